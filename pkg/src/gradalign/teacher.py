"""Frozen semantic teacher: a seeded random mini-ViT stub, plus a binary
feature-file loader so externally computed patch tokens can stand in for it.

The stub is deliberately untrained -- the training mechanics it feeds
(alignment geometry, gradient routing, ratio control) do not care where the
target directions come from, only that they are fixed, finite and mixed
across patches.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagic, BadResolution, GridMismatch, TruncatedPayload,
                     VersionMismatch)

PATCH_SIZE = 16
DEFAULT_TEACHER_WIDTH = 48

_MAGIC = b"SDTF"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, H_T, W_T, C_T, batch


@dataclass
class TokenSequence:
    """Patch tokens (batch, N_p, C_T) laid out row-major over an
    (H_T, W_T) grid.  Tokens are plain arrays and never carry gradients."""

    tokens: np.ndarray
    grid: tuple[int, int]
    teacher_id: str = "unknown"

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        h, w = self.grid
        if self.tokens.ndim != 3:
            raise GridMismatch(f"tokens must be (B, N_p, C), got {self.tokens.shape}")
        if h * w != self.tokens.shape[1]:
            raise GridMismatch(
                f"N_p={self.tokens.shape[1]} != H_T*W_T={h}*{w}")

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class StubTeacher:
    """Deterministic frozen teacher: patch embed, one pre-norm self-attention
    block, final layer norm.  Same (image, seed) always gives identical
    tokens; nothing here is ever updated."""

    def __init__(self, seed: int, width: int = DEFAULT_TEACHER_WIDTH,
                 patch_size: int = PATCH_SIZE):
        self.seed = int(seed)
        self.width = int(width)
        self.patch_size = int(patch_size)
        rng = np.random.default_rng(self.seed)
        pdim = 3 * patch_size * patch_size
        c = self.width
        self.w_embed = rng.normal(0.0, pdim ** -0.5, size=(pdim, c))
        self.b_embed = rng.normal(0.0, 0.02, size=c)
        self.ln1_g = 1.0 + 0.1 * rng.normal(size=c)
        self.ln1_b = 0.1 * rng.normal(size=c)
        self.w_q = rng.normal(0.0, c ** -0.5, size=(c, c))
        self.w_k = rng.normal(0.0, c ** -0.5, size=(c, c))
        self.w_v = rng.normal(0.0, c ** -0.5, size=(c, c))
        self.w_o = rng.normal(0.0, c ** -0.5, size=(c, c))
        self.ln2_g = 1.0 + 0.1 * rng.normal(size=c)
        self.ln2_b = 0.1 * rng.normal(size=c)
        self.teacher_id = "stub:" + self.fingerprint()[:16]

    def _weights(self):
        return (self.w_embed, self.b_embed, self.ln1_g, self.ln1_b, self.w_q,
                self.w_k, self.w_v, self.w_o, self.ln2_g, self.ln2_b)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for w in self._weights():
            digest.update(np.ascontiguousarray(w).tobytes())
        return digest.hexdigest()

    def forward(self, images: np.ndarray) -> TokenSequence:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        bsz, ch, h, w = images.shape
        p = self.patch_size
        if ch != 3 or h % p or w % p:
            raise BadResolution(
                f"teacher needs (B,3,H,W) with H,W divisible by {p}, got {images.shape}")
        hp, wp = h // p, w // p
        patches = images.reshape(bsz, 3, hp, p, wp, p)
        patches = patches.transpose(0, 2, 4, 1, 3, 5).reshape(bsz, hp * wp, 3 * p * p)

        t = patches @ self.w_embed + self.b_embed
        hval = _layer_norm(t, self.ln1_g, self.ln1_b)
        q, k, v = hval @ self.w_q, hval @ self.w_k, hval @ self.w_v
        attn = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(self.width))
        t = t + (attn @ v) @ self.w_o
        t = _layer_norm(t, self.ln2_g, self.ln2_b)
        return TokenSequence(tokens=t, grid=(hp, wp), teacher_id=self.teacher_id)

    def tokens_for_batch(self, images: np.ndarray, indices) -> TokenSequence:
        return self.forward(images)


class FileTeacher:
    """Serves precomputed patch tokens from a feature file.

    Token sequence ``i`` of the file corresponds to training-scene index
    ``i`` (modulo the bank size); exporters are expected to generate the
    bank in scene-stream order.
    """

    def __init__(self, path):
        self.bank = read_feature_file(path)
        self.teacher_id = self.bank.teacher_id
        self.width = self.bank.width

    def fingerprint(self) -> str:
        return self.teacher_id

    def tokens_for_batch(self, images, indices) -> TokenSequence:
        n = self.bank.tokens.shape[0]
        rows = np.stack([self.bank.tokens[i % n] for i in indices])
        return TokenSequence(tokens=rows, grid=self.bank.grid,
                             teacher_id=self.teacher_id)


# --- feature file format ----------------------------------------------------

def write_feature_file(path, seq: TokenSequence) -> None:
    """Binary little-endian layout: "SDTF", u32 version, H_T, W_T, C_T,
    batch, then batch*H_T*W_T*C_T f32 values in (batch, row, col, channel)
    order."""
    h, w = seq.grid
    bsz, n_p, c = seq.tokens.shape
    header = _HEADER.pack(_MAGIC, _VERSION, h, w, c, bsz)
    payload = seq.tokens.reshape(bsz, h, w, c).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_feature_file(path) -> TokenSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise BadMagic(f"{path}: not a teacher feature file")
    if len(raw) < _HEADER.size:
        raise TruncatedPayload(f"{path}: header cut short")
    _, version, h, w, c, bsz = _HEADER.unpack_from(raw)
    if version != _VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {_VERSION}")
    if min(h, w, c, bsz) == 0:
        raise GridMismatch(f"{path}: degenerate header dims {(h, w, c, bsz)}")
    body = raw[_HEADER.size:]
    if len(body) % 4:
        raise TruncatedPayload(f"{path}: payload is not whole f32 words")
    n_floats = len(body) // 4
    expected = bsz * h * w * c
    if n_floats != expected:
        # a whole number of differently-sized tokens means the grid in the
        # header cannot match the payload; anything else is a short read
        if n_floats % (bsz * c) == 0:
            raise GridMismatch(
                f"{path}: payload holds N_p={n_floats // (bsz * c)} tokens "
                f"per image, header says {h}x{w}")
        raise TruncatedPayload(
            f"{path}: payload has {n_floats} floats, expected {expected}")
    tokens = np.frombuffer(body, dtype="<f4").astype(np.float64)
    tokens = tokens.reshape(bsz, h, w, c).reshape(bsz, h * w, c)
    teacher_id = "file:" + hashlib.sha256(raw).hexdigest()[:16]
    return TokenSequence(tokens=tokens, grid=(h, w), teacher_id=teacher_id)
