"""Miniature hybrid-encoder detector.

Structure: CNN backbone producing S3/S4/S5 at strides 8/16/32, a single
pre-norm self-attention block over the S5 token grid (the only attention in
the model, producing F5), top-down convolutional fusion spreading F5 into
P3/P4/P5, and dense anchor-free heads.  Every trainable parameter is tagged
backbone / aifi / ccff / decoder for gradient accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import BadResolution, ShapeMismatch
from .registry import Component, ParameterRegistry
from .scenes import SceneObject
from .tensor import Tensor

N_CLASSES = 3
BACKGROUND = N_CLASSES  # class index of unassigned cells
BOX_LOSS_WEIGHT = 5.0
LEVELS = ("P3", "P4", "P5")
# object area thresholds (fraction of image area) for level assignment
P3_MAX_AREA = 1.0 / 64.0
P4_MAX_AREA = 1.0 / 16.0
# prior added to raw head outputs: cell center for (cx, cy), typical size
SIZE_PRIOR = 0.25


class Conv:
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1):
        std = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride)

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias


class Dense:
    def __init__(self, rng, c_in: int, c_out: int, std: float | None = None):
        std = std if std is not None else np.sqrt(1.0 / c_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(c_in, c_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias


class Norm:
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.bias)

    def params(self):
        yield "gain", self.gain
        yield "bias", self.bias


class NormedConv:
    """Conv -> per-location channel layer-norm -> ReLU."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1):
        self.conv = Conv(rng, c_in, c_out, kernel, stride)
        self.norm = Norm(c_out)

    def __call__(self, x):
        y = ops.layer_norm(self.conv(x), self.norm.gain, self.norm.bias, axis=1)
        return ops.relu(y)

    def params(self):
        for name, p in self.conv.params():
            yield f"conv.{name}", p
        for name, p in self.norm.params():
            yield f"norm.{name}", p


def sincos_position_embedding(h: int, w: int, dim: int,
                              temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sin/cos embedding, one row per grid cell in row-major order."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / temperature ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    xs = xs.reshape(-1, 1) * omega
    ys = ys.reshape(-1, 1) * omega
    return np.concatenate([np.sin(xs), np.cos(xs), np.sin(ys), np.cos(ys)], axis=1)


class Backbone:
    """Normalized stride-2 downsampling convs, each followed by a stride-1
    refiner; taps at strides 8/16/32."""

    def __init__(self, rng, c3: int, c4: int, c5: int):
        self.stem1 = NormedConv(rng, 3, 16, 3, stride=2)
        self.stem2 = NormedConv(rng, 16, 32, 3, stride=2)
        self.stem3 = NormedConv(rng, 32, 32, 3)
        self.stage3a = NormedConv(rng, 32, c3, 3, stride=2)
        self.stage3b = NormedConv(rng, c3, c3, 3)
        self.stage4a = NormedConv(rng, c3, c4, 3, stride=2)
        self.stage4b = NormedConv(rng, c4, c4, 3)
        self.stage5a = NormedConv(rng, c4, c5, 3, stride=2)
        self.stage5b = NormedConv(rng, c5, c5, 3)

    def __call__(self, images):
        x = self.stem1(images)
        x = self.stem2(x)
        x = self.stem3(x)
        s3 = self.stage3b(self.stage3a(x))
        s4 = self.stage4b(self.stage4a(s3))
        s5 = self.stage5b(self.stage5a(s4))
        return s3, s4, s5

    def modules(self):
        return [("stem1", self.stem1), ("stem2", self.stem2),
                ("stem3", self.stem3),
                ("stage3a", self.stage3a), ("stage3b", self.stage3b),
                ("stage4a", self.stage4a), ("stage4b", self.stage4b),
                ("stage5a", self.stage5a), ("stage5b", self.stage5b)]


class AttentionBlock:
    """Pre-norm transformer block over the S5 token grid (single head).

    Queries/keys/values live in a narrower inner space so the block's
    gradient mass stays a small fraction of the whole model's.  Fixed 2-D
    sin/cos positional encodings are added to the query/key inputs only;
    pass ``use_pos=False`` to drop them (test hook: without positions the
    block is permutation-equivariant over tokens).
    """

    def __init__(self, rng, dim: int, attn_dim: int = 16,
                 ffn_dim: int | None = None, branch_scale: float = 0.1):
        self.dim = dim
        self.attn_dim = attn_dim
        self.branch_scale = branch_scale
        ffn_dim = ffn_dim or dim // 4
        self.ln1 = Norm(dim)
        self.w_q = Dense(rng, dim, attn_dim)
        self.w_k = Dense(rng, dim, attn_dim)
        self.w_v = Dense(rng, dim, attn_dim)
        self.w_o = Dense(rng, attn_dim, dim, std=np.sqrt(1.0 / attn_dim))
        self.ln2 = Norm(dim)
        self.ffn1 = Dense(rng, dim, ffn_dim, std=np.sqrt(2.0 / dim))
        self.ffn2 = Dense(rng, ffn_dim, dim, std=np.sqrt(1.0 / ffn_dim))
        self._pe_cache: dict[tuple[int, int], np.ndarray] = {}
        self.last_attn: np.ndarray | None = None

    def __call__(self, s5, use_pos: bool = True):
        bsz, c, h, w = s5.shape
        if c != self.dim:
            raise ShapeMismatch(f"attention dim {self.dim}, got {c} channels")
        tokens = ops.reshape(ops.transpose(s5, (0, 2, 3, 1)), (bsz, h * w, c))
        normed = self.ln1(tokens)
        if use_pos:
            key = (h, w)
            if key not in self._pe_cache:
                self._pe_cache[key] = sincos_position_embedding(h, w, c)
            qk_in = ops.add(normed, Tensor(self._pe_cache[key]))
        else:
            qk_in = normed
        q, k = self.w_q(qk_in), self.w_k(qk_in)
        v = self.w_v(normed)
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))),
                           1.0 / np.sqrt(self.attn_dim))
        attn = ops.softmax(scores, axis=-1)
        self.last_attn = attn.data.copy()
        # residual branches carry a fixed damping factor, which keeps this
        # block's share of the whole model's gradient mass small
        tokens = ops.add(tokens, ops.scale(self.w_o(ops.matmul(attn, v)),
                                           self.branch_scale))
        ffn = self.ffn2(ops.gelu(self.ffn1(self.ln2(tokens))))
        tokens = ops.add(tokens, ops.scale(ffn, self.branch_scale))
        return ops.transpose(ops.reshape(tokens, (bsz, h, w, c)), (0, 3, 1, 2))

    def modules(self):
        return [("ln1", self.ln1), ("w_q", self.w_q), ("w_k", self.w_k),
                ("w_v", self.w_v), ("w_o", self.w_o), ("ln2", self.ln2),
                ("ffn1", self.ffn1), ("ffn2", self.ffn2)]


class Fusion:
    """Top-down path: P5 = 1x1(F5); P4 = 3x3(up2(P5) + 1x1(S4));
    P3 = 3x3(up2(P4) + 1x1(S3)).  Purely convolutional."""

    def __init__(self, rng, c3: int, c4: int, c5: int, width: int):
        self.lat5 = Conv(rng, c5, width, 1)
        self.lat4 = Conv(rng, c4, width, 1)
        self.lat3 = Conv(rng, c3, width, 1)
        self.out4 = Conv(rng, width, width, 3)
        self.out3 = Conv(rng, width, width, 3)

    def __call__(self, f5, s4, s3):
        p5 = self.lat5(f5)
        p4 = self.out4(ops.add(ops.upsample2x(p5), self.lat4(s4)))
        p3 = self.out3(ops.add(ops.upsample2x(p4), self.lat3(s3)))
        return p3, p4, p5

    def modules(self):
        return [("lat5", self.lat5), ("lat4", self.lat4), ("lat3", self.lat3),
                ("out4", self.out4), ("out3", self.out3)]


class LevelHead:
    """Per-cell class logits and decoded (cx, cy, w, h) boxes for one level.

    Classification and box regression get separate trunks: the masked box
    loss concentrates far more gradient per cell than the pooled
    cross-entropy, and a shared trunk would serve box geometry only.
    """

    def __init__(self, rng, width: int, n_classes: int):
        self.cls_trunk = NormedConv(rng, width, width, 3)
        self.cls_mid = NormedConv(rng, width, width, 3)
        self.cls_out = Conv(rng, width, n_classes + 1, 1)
        self.box_trunk = NormedConv(rng, width, width, 3)
        self.box_out = Conv(rng, width, 4, 1)
        # background prior: almost every cell is empty, so start there
        self.cls_out.bias.data[n_classes] = 2.0
        self.n_classes = n_classes
        self._grid_cache: dict[tuple[int, int], np.ndarray] = {}

    def _prior(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._grid_cache:
            g = np.zeros((1, 4, h, w))
            g[0, 0] = (np.arange(w) + 0.5)[None, :] / w
            g[0, 1] = (np.arange(h) + 0.5)[:, None] / h
            g[0, 2] = SIZE_PRIOR
            g[0, 3] = SIZE_PRIOR
            self._grid_cache[key] = g
        return self._grid_cache[key]

    def __call__(self, p):
        _, _, h, w = p.shape
        logits = self.cls_out(self.cls_mid(self.cls_trunk(p)))
        boxes = ops.add(self.box_out(self.box_trunk(p)),
                        Tensor(self._prior(h, w)))
        return logits, boxes

    def modules(self):
        return [("cls_trunk", self.cls_trunk), ("cls_mid", self.cls_mid),
                ("cls_out", self.cls_out),
                ("box_trunk", self.box_trunk), ("box_out", self.box_out)]


@dataclass
class DetectionOutput:
    """Per level: class logits (B, K+1, H, W) and box maps (B, 4, H, W)
    holding normalized (cx, cy, w, h)."""

    logits: dict[str, Tensor]
    boxes: dict[str, Tensor]

    def level_shapes(self) -> dict[str, tuple[int, int]]:
        return {lv: self.logits[lv].shape[2:] for lv in LEVELS}


@dataclass
class Features:
    s3: Tensor
    s4: Tensor
    s5: Tensor
    f5: Tensor


class ToyDetector:
    """Backbone -> attention on S5 -> fusion -> per-level heads."""

    def __init__(self, seed: int = 0, c3: int = 32, c4: int = 64, c5: int = 128,
                 fusion_width: int = 64, n_classes: int = N_CLASSES):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=seed, spawn_key=(100,)))
        self.c3, self.c4, self.c5 = c3, c4, c5
        self.fusion_width = fusion_width
        self.n_classes = n_classes
        self.backbone = Backbone(rng, c3, c4, c5)
        self.attention = AttentionBlock(rng, c5)
        self.fusion = Fusion(rng, c3, c4, c5, fusion_width)
        self.heads = {lv: LevelHead(rng, fusion_width, n_classes) for lv in LEVELS}
        self.registry = ParameterRegistry()
        self._register_all()

    def _register_all(self) -> None:
        def add(prefix, module, component):
            for sub_name, sub in module.modules():
                for p_name, p in sub.params():
                    self.registry.register(f"{prefix}.{sub_name}.{p_name}",
                                           p, component)

        add("backbone", self.backbone, Component.BACKBONE)
        add("aifi", self.attention, Component.AIFI)
        add("ccff", self.fusion, Component.CCFF)
        for lv in LEVELS:
            add(f"head.{lv.lower()}", self.heads[lv], Component.DECODER)

    # -- forward passes ----------------------------------------------------

    def backbone_features(self, images) -> tuple[Tensor, Tensor, Tensor]:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.data.ndim != 4 or images.shape[1] != 3:
            raise ShapeMismatch(f"expected (B,3,H,W) images, got {images.shape}")
        h, w = images.shape[2:]
        if h % 32 or w % 32:
            raise BadResolution(f"image size {h}x{w} not divisible by 32")
        return self.backbone(images)

    def features(self, images, use_pos: bool = True) -> Features:
        s3, s4, s5 = self.backbone_features(images)
        f5 = self.attention(s5, use_pos=use_pos)
        return Features(s3=s3, s4=s4, s5=s5, f5=f5)

    def forward(self, images) -> tuple[DetectionOutput, Features]:
        feats = self.features(images)
        p3, p4, p5 = self.fusion(feats.f5, feats.s4, feats.s3)
        logits, boxes = {}, {}
        for lv, p in zip(LEVELS, (p3, p4, p5)):
            logits[lv], boxes[lv] = self.heads[lv](p)
        return DetectionOutput(logits=logits, boxes=boxes), feats


# --- target assignment and detection loss -----------------------------------

def box_iou(a, b) -> float:
    """IoU of two normalized (cx, cy, w, h) boxes; degenerate sizes clamp to 0."""
    aw, ah = max(a[2], 0.0), max(a[3], 0.0)
    bw, bh = max(b[2], 0.0), max(b[3], 0.0)
    ix = min(a[0] + aw / 2, b[0] + bw / 2) - max(a[0] - aw / 2, b[0] - bw / 2)
    iy = min(a[1] + ah / 2, b[1] + bh / 2) - max(a[1] - ah / 2, b[1] - bh / 2)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def level_for_box(box) -> str:
    area = box[2] * box[3]
    if area < P3_MAX_AREA:
        return "P3"
    if area < P4_MAX_AREA:
        return "P4"
    return "P5"


def cell_for_box(box, shape: tuple[int, int]) -> tuple[int, int]:
    h, w = shape
    col = min(int(box[0] * w), w - 1)
    row = min(int(box[1] * h), h - 1)
    return row, col


@dataclass
class LevelTargets:
    classes: np.ndarray  # (B, H, W) int, BACKGROUND where unassigned
    boxes: np.ndarray    # (B, 4, H, W)
    mask: np.ndarray     # (B, 4, H, W), 1 at assigned cells


def assign_targets(objects: list[list[SceneObject]],
                   level_shapes: dict[str, tuple[int, int]]) -> dict[str, LevelTargets]:
    """Center-cell assignment; the first object claiming a cell keeps it."""
    bsz = len(objects)
    out = {}
    for lv, (h, w) in level_shapes.items():
        out[lv] = LevelTargets(
            classes=np.full((bsz, h, w), BACKGROUND, dtype=np.int64),
            boxes=np.zeros((bsz, 4, h, w)),
            mask=np.zeros((bsz, 4, h, w)))
    for b, objs in enumerate(objects):
        for obj in objs:
            lv = level_for_box(obj.box)
            t = out[lv]
            row, col = cell_for_box(obj.box, level_shapes[lv])
            if t.classes[b, row, col] != BACKGROUND:
                continue
            t.classes[b, row, col] = obj.class_id
            t.boxes[b, :, row, col] = obj.box
            t.mask[b, :, row, col] = 1.0
    return out


def single_level_detection_loss(logits, boxes, cls_target: np.ndarray,
                                box_target: np.ndarray, box_mask: np.ndarray,
                                beta: float = BOX_LOSS_WEIGHT) -> Tensor:
    """Detection loss restricted to one level (used directly by the
    gradient-check suite)."""
    n_cells = int(np.prod(cls_target.shape))
    loss = ops.scale(ops.cross_entropy_sum(logits, cls_target), 1.0 / n_cells)
    n_box = float(box_mask.sum())
    if n_box > 0:
        l1 = ops.tsum(ops.mul(ops.absval(ops.sub(boxes, Tensor(box_target))),
                              Tensor(box_mask)))
        loss = ops.add(loss, ops.scale(l1, beta / n_box))
    return loss


def detection_loss(output: DetectionOutput,
                   targets: dict[str, LevelTargets],
                   beta: float = BOX_LOSS_WEIGHT) -> Tensor:
    """Mean cross-entropy over every cell of every level (background class
    included) plus ``beta`` times the mean L1 over assigned cells' four box
    coordinates.  A scene with no objects is legal: the box term vanishes."""
    n_cells = sum(int(np.prod(t.classes.shape)) for t in targets.values())
    ce = None
    l1 = None
    n_box = 0.0
    for lv in LEVELS:
        t = targets[lv]
        ce_lv = ops.cross_entropy_sum(output.logits[lv], t.classes)
        ce = ce_lv if ce is None else ops.add(ce, ce_lv)
        if t.mask.any():
            l1_lv = ops.tsum(ops.mul(
                ops.absval(ops.sub(output.boxes[lv], Tensor(t.boxes))),
                Tensor(t.mask)))
            l1 = l1_lv if l1 is None else ops.add(l1, l1_lv)
            n_box += float(t.mask.sum())
    loss = ops.scale(ce, 1.0 / n_cells)
    if l1 is not None:
        loss = ops.add(loss, ops.scale(l1, beta / n_box))
    return loss
