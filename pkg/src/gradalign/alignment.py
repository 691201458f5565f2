"""Teacher-feature alignment.

Reconciles the frozen teacher's patch tokens with detector feature maps
(grid reshape + bilinear resize on the teacher side, a learned channel
projector on the student side) and scores the match with a patch-wise
cosine loss (or an MSE variant).  Injection strategies choose which
feature maps are aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import (ChannelMismatch, GridMismatch, MissingFeature,
                     ShapeMismatch, ZeroTarget)
from .registry import Component, ParameterRegistry
from .teacher import TokenSequence
from .tensor import Tensor

NORM_FLOOR = 1e-8  # stabilizer for cosine denominators
BACKBONE_LEVELS = ("S3", "S4", "S5")
ALL_FEATURES = ("S3", "S4", "S5", "F5")


# --- teacher-side reconciliation (no gradients) ------------------------------

def tokens_to_map(seq: TokenSequence) -> np.ndarray:
    """Row-major token grid as a (B, C, H_T, W_T) array; pure reindexing."""
    h, w = seq.grid
    bsz, n_p, c = seq.tokens.shape
    if n_p != h * w:
        raise GridMismatch(f"N_p={n_p} != {h}*{w}")
    return seq.tokens.reshape(bsz, h, w, c).transpose(0, 3, 1, 2)


def map_to_tokens(grid_map: np.ndarray) -> np.ndarray:
    """Inverse of tokens_to_map; recovers (B, N_p, C) row-major order."""
    bsz, c, h, w = grid_map.shape
    return grid_map.transpose(0, 2, 3, 1).reshape(bsz, h * w, c)


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (B, C, h, w) map with half-pixel centers.

    Source coordinate of output cell d is (d + 0.5) * scale - 0.5, clamped
    into the source grid.  Not differentiable by design: it only ever runs
    on frozen teacher features.
    """
    if out_h <= 0 or out_w <= 0:
        raise ZeroTarget(f"target size {out_h}x{out_w}")
    src = np.asarray(src, dtype=np.float64)
    bsz, c, h, w = src.shape

    def axis_weights(n_out, n_src):
        coords = (np.arange(n_out) + 0.5) * (n_src / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_src - 1.0)
        lo = np.floor(coords).astype(np.int64)
        frac = coords - lo
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, frac

    y0, y1, fy = axis_weights(out_h, h)
    x0, x1, fx = axis_weights(out_w, w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = src[:, :, y0[:, None], x0[None, :]] * (1 - fx) + \
        src[:, :, y0[:, None], x1[None, :]] * fx
    bottom = src[:, :, y1[:, None], x0[None, :]] * (1 - fx) + \
        src[:, :, y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bottom * fy


def teacher_target(seq: TokenSequence, out_h: int, out_w: int) -> np.ndarray:
    return bilinear_resize(tokens_to_map(seq), out_h, out_w)


# --- student-side projectors --------------------------------------------------

class LinearProjector:
    """One weight matrix + bias applied per spatial location."""

    kind = "linear"

    def __init__(self, rng, c_in: int, c_out: int):
        self.c_in, self.c_out = c_in, c_out
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_in, c_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, feat: Tensor) -> Tensor:
        bsz, c, h, w = feat.shape
        flat = ops.reshape(ops.transpose(feat, (0, 2, 3, 1)), (bsz * h * w, c))
        out = ops.linear(flat, self.weight, self.bias)
        return ops.transpose(ops.reshape(out, (bsz, h, w, self.c_out)), (0, 3, 1, 2))

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias


class MlpProjector:
    """Two per-location layers with GELU; hidden width 2 * c_out."""

    kind = "mlp"

    def __init__(self, rng, c_in: int, c_out: int):
        self.c_in, self.c_out = c_in, c_out
        hidden = 2 * c_out
        self.w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, hidden)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, c_out)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, feat: Tensor) -> Tensor:
        bsz, c, h, w = feat.shape
        flat = ops.reshape(ops.transpose(feat, (0, 2, 3, 1)), (bsz * h * w, c))
        hid = ops.gelu(ops.linear(flat, self.w1, self.b1))
        out = ops.linear(hid, self.w2, self.b2)
        return ops.transpose(ops.reshape(out, (bsz, h, w, self.c_out)), (0, 3, 1, 2))

    def params(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2


class Conv1x1Projector:
    """Same map as the linear projector, parameterized as a 1x1 conv."""

    kind = "conv1x1"

    def __init__(self, rng, c_in: int, c_out: int):
        self.c_in, self.c_out = c_in, c_out
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / c_in),
                                        size=(c_out, c_in, 1, 1)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, feat: Tensor) -> Tensor:
        return ops.conv2d(feat, self.weight, self.bias, stride=1)

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias


PROJECTOR_KINDS = {"linear": LinearProjector, "mlp": MlpProjector,
                   "conv1x1": Conv1x1Projector}


def make_projector(kind: str, rng, c_in: int, c_out: int):
    try:
        cls = PROJECTOR_KINDS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown projector kind {kind!r}") from None
    return cls(rng, c_in, c_out)


def project_student(feat: Tensor, projector) -> Tensor:
    if feat.shape[1] != projector.c_in:
        raise ChannelMismatch(
            f"projector expects {projector.c_in} channels, feature has {feat.shape[1]}")
    return projector(feat)


# --- alignment losses ---------------------------------------------------------

def cosine_alignment_loss(student: Tensor, target: Tensor) -> Tensor:
    """Negative mean patch-wise cosine similarity over locations and batch.

    Denominator norms are floored at 1e-8, so an all-zero location
    contributes similarity 0 rather than NaN.
    """
    if student.shape != target.shape:
        raise ShapeMismatch(f"student {student.shape} vs target {target.shape}")
    dot = ops.tsum(ops.mul(student, target), axes=1)
    s_norm = ops.sqrt(ops.tsum(ops.mul(student, student), axes=1))
    t_norm = ops.sqrt(ops.tsum(ops.mul(target, target), axes=1))
    denom = ops.mul(ops.maximum_scalar(s_norm, NORM_FLOOR),
                    ops.maximum_scalar(t_norm, NORM_FLOOR))
    return ops.neg(ops.mean(ops.div(dot, denom)))


def mse_alignment_loss(student: Tensor, target: Tensor) -> Tensor:
    if student.shape != target.shape:
        raise ShapeMismatch(f"student {student.shape} vs target {target.shape}")
    diff = ops.sub(student, target)
    return ops.mean(ops.mul(diff, diff))


def alignment_loss(student: Tensor, target: Tensor, kind: str = "cosine") -> Tensor:
    kind = kind.lower()
    if kind == "cosine":
        return cosine_alignment_loss(student, target)
    if kind == "mse":
        return mse_alignment_loss(student, target)
    raise ValueError(f"unknown alignment loss kind {kind!r}")


# --- injection strategies -------------------------------------------------------

@dataclass(frozen=True)
class InjectionStrategy:
    """Which feature maps get aligned against the teacher.

    kind "aifi-only" aligns exactly F5; "backbone" aligns the chosen subset
    of S3/S4/S5; "hybrid" aligns all of S3, S4, S5 and F5.
    """

    kind: str
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("aifi-only", "backbone", "hybrid"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "backbone":
            if not self.levels or any(lv not in BACKBONE_LEVELS for lv in self.levels):
                raise ValueError(f"backbone strategy needs levels from "
                                 f"{BACKBONE_LEVELS}, got {self.levels}")
        elif self.levels:
            raise ValueError(f"{self.kind} strategy takes no levels")

    def aligned_features(self) -> tuple[str, ...]:
        if self.kind == "aifi-only":
            return ("F5",)
        if self.kind == "backbone":
            return tuple(self.levels)
        return ALL_FEATURES

    def label(self) -> str:
        if self.kind == "backbone":
            return "backbone(" + "+".join(self.levels) + ")"
        return self.kind


def parse_strategy(kind: str, levels=()) -> InjectionStrategy:
    kind = kind.lower()
    if kind == "backbone" and not levels:
        levels = BACKBONE_LEVELS
    return InjectionStrategy(kind=kind, levels=tuple(levels))


class Aligner:
    """Owns one projector per aligned feature plus the loss kind."""

    def __init__(self, seed: int, strategy: InjectionStrategy,
                 feature_channels: dict[str, int], teacher_width: int,
                 projector_kind: str = "linear", loss_kind: str = "cosine"):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=seed, spawn_key=(200,)))
        self.strategy = strategy
        self.loss_kind = loss_kind
        self.teacher_width = teacher_width
        self.projectors = {}
        for feat in strategy.aligned_features():
            if feat not in feature_channels:
                raise MissingFeature(f"no channel width known for {feat}")
            self.projectors[feat] = make_projector(
                projector_kind, rng, feature_channels[feat], teacher_width)

    def register(self, registry: ParameterRegistry, prefix: str = "align") -> None:
        for feat, proj in self.projectors.items():
            for p_name, p in proj.params():
                registry.register(f"{prefix}.{feat.lower()}.{p_name}",
                                  p, Component.PROJECTOR)

    def _student_map(self, features, feat: str) -> Tensor:
        attr = feat.lower()
        value = getattr(features, attr, None)
        if value is None:
            raise MissingFeature(f"strategy needs feature {feat}")
        return value

    def loss(self, features, teacher_tokens: TokenSequence) -> Tensor:
        """Sum of per-feature alignment losses for the configured strategy."""
        teacher_map = tokens_to_map(teacher_tokens)
        total = None
        for feat in self.strategy.aligned_features():
            student = self._student_map(features, feat)
            _, _, h, w = student.shape
            target = Tensor(bilinear_resize(teacher_map, h, w))
            projected = project_student(student, self.projectors[feat])
            term = alignment_loss(projected, target, self.loss_kind)
            total = term if total is None else ops.add(total, term)
        return total

    def f5_cosine_score(self, features, teacher_tokens: TokenSequence):
        """Mean cosine similarity of projected F5 vs the teacher (the
        alignment evaluation metric); None when F5 is not aligned."""
        proj = self.projectors.get("F5")
        if proj is None:
            return None
        teacher_map = tokens_to_map(teacher_tokens)
        f5 = self._student_map(features, "F5")
        _, _, h, w = f5.shape
        target = Tensor(bilinear_resize(teacher_map, h, w))
        loss = cosine_alignment_loss(project_student(f5, proj), target)
        return -loss.item()
