"""Deterministic synthetic scenes: anti-aliased shapes on a flat background.

Every scene is a pure function of (seed, split, index), so data loading never
needs to be stored or shuffled -- the stream is the dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_CIRCLE, CLASS_SQUARE, CLASS_TRIANGLE = 0, 1, 2
N_CLASSES = 3
TRAIN_SPLIT, EVAL_SPLIT = 0, 1

_SUBSAMPLES = 4  # anti-aliasing grid per pixel axis
_MIN_SIZE, _MAX_SIZE = 0.1, 0.4
_MIN_CONTRAST = 0.75  # summed |rgb delta| between shape and background


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: tuple[float, float, float, float]  # (cx, cy, w, h), normalized


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    objects: list[SceneObject]


def _subpixel_grid(image_size: int) -> np.ndarray:
    """Normalized coordinates of the anti-aliasing subsample centers,
    shape (image_size * sub,)."""
    n = image_size * _SUBSAMPLES
    return (np.arange(n) + 0.5) / n


def shape_coverage(class_id: int, box: tuple[float, float, float, float],
                   image_size: int) -> np.ndarray:
    """Per-pixel coverage in [0, 1] of one shape, via subsampling."""
    cx, cy, w, h = box
    coords = _subpixel_grid(image_size)
    xs = coords[None, :]
    ys = coords[:, None]
    if class_id == CLASS_CIRCLE:
        r = w / 2.0
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    elif class_id == CLASS_SQUARE:
        inside = (np.abs(xs - cx) <= w / 2.0) & (np.abs(ys - cy) <= h / 2.0)
    elif class_id == CLASS_TRIANGLE:
        # isoceles: apex at top-center, base along the bottom box edge
        top = cy - h / 2.0
        frac = np.clip((ys - top) / h, 0.0, None)
        inside = (ys >= top) & (ys <= cy + h / 2.0) & \
                 (np.abs(xs - cx) <= (w / 2.0) * frac)
    else:
        raise ValueError(f"unknown class id {class_id}")
    s = _SUBSAMPLES
    blocks = inside.reshape(image_size, s, image_size, s)
    return blocks.mean(axis=(1, 3))


def _box_iou(a, b) -> float:
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def generate_scene(seed: int, index: int, image_size: int = 128,
                   split: int = TRAIN_SPLIT) -> SyntheticScene:
    """Scene `index` of the stream identified by (seed, split)."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(split, index)))
    background = rng.uniform(0.0, 1.0, size=3)
    image = np.broadcast_to(
        background[:, None, None], (3, image_size, image_size)).copy()

    # weighted toward crowded scenes: more assigned cells per image means
    # denser classification supervision
    n_objects = int(rng.choice([1, 2, 3, 4], p=[0.1, 0.2, 0.3, 0.4]))
    objects: list[SceneObject] = []
    for _ in range(n_objects):
        class_id = int(rng.integers(0, N_CLASSES))
        size = float(rng.uniform(_MIN_SIZE, _MAX_SIZE))
        box = None
        for _ in range(20):  # keep shapes mostly disjoint; give up after 20
            cx = float(rng.uniform(size / 2, 1.0 - size / 2))
            cy = float(rng.uniform(size / 2, 1.0 - size / 2))
            cand = (cx, cy, size, size)
            if all(_box_iou(cand, o.box) <= 0.2 for o in objects):
                box = cand
                break
            box = cand
        color = rng.uniform(0.0, 1.0, size=3)
        while np.abs(color - background).sum() < _MIN_CONTRAST:
            color = rng.uniform(0.0, 1.0, size=3)
        cov = shape_coverage(class_id, box, image_size)
        image = image * (1.0 - cov) + color[:, None, None] * cov
        objects.append(SceneObject(class_id=class_id, box=box))
    return SyntheticScene(image=image, objects=objects)


def scene_batch(seed: int, indices, image_size: int = 128,
                split: int = TRAIN_SPLIT) -> tuple[np.ndarray, list[list[SceneObject]]]:
    """Stack scenes into a (B, 3, H, W) image array plus per-image objects."""
    scenes = [generate_scene(seed, i, image_size, split) for i in indices]
    images = np.stack([s.image for s in scenes])
    return images, [s.objects for s in scenes]
