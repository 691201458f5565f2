"""PCA projection of dense feature maps to RGB, written as binary P6 pixmaps.

Each spatial location of a (C, H, W) map is one C-dimensional sample; the
top three principal components become the red/green/blue channels after
per-component min-max normalization.  Conventions are pinned for bit-stable
golden tests: eigenvector sign makes the largest-magnitude loading positive,
and degenerate components render mid-gray (128).
"""

from __future__ import annotations

import numpy as np

GRAY = 128
_EIG_REL_TOL = 1e-9
_SPREAD_TOL = 1e-12


def pca_rgb(feature_map: np.ndarray) -> np.ndarray:
    """(C, H, W) feature map -> (H, W, 3) uint8 image."""
    c, h, w = feature_map.shape
    samples = feature_map.reshape(c, h * w).T.astype(np.float64)
    centered = samples - samples.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(1, samples.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    out = np.full((h * w, 3), GRAY, dtype=np.float64)
    top = max(eigvals[-1], 0.0) if c else 0.0
    for k in range(min(3, c)):
        val = eigvals[-1 - k]
        vec = eigvecs[:, -1 - k]
        if val <= _EIG_REL_TOL * max(top, 1e-30):
            continue  # flat component stays mid-gray
        pivot = int(np.abs(vec).argmax())
        if vec[pivot] < 0:
            vec = -vec
        proj = centered @ vec
        lo, hi = proj.min(), proj.max()
        if hi - lo < _SPREAD_TOL:
            continue
        out[:, k] = np.floor((proj - lo) / (hi - lo) * 255.0 + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8).reshape(h, w, 3)


def image_to_rgb(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float image in [0,1] -> (H, W, 3) uint8."""
    arr = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 pixmap from an (H, W, 3) uint8 array."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H,W,3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6\n"):
        raise ValueError(f"{path}: not a binary P6 pixmap")
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
