"""Central-difference gradient verification for the op catalog and losses."""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .errors import NonFinite
from .tensor import Tape, Tensor, backward

DEFAULT_EPS = 1e-5
DEFAULT_SEEDS = tuple(range(10))
TOLERANCE = 1e-5


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = DEFAULT_EPS) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x``
    and central finite differences.

    The relative error per coordinate is
    ``|g_analytic - g_fd| / max(1e-12, |g_analytic| + |g_fd|)``.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
        backward(y)
        tape.clear()
    g_analytic = (np.zeros_like(probe.data) if probe.grad is None
                  else probe.grad.copy())
    probe.grad = None
    probe.requires_grad = False

    flat = probe.data.reshape(-1)
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(probe).item()
        flat[i] = orig - eps
        f_minus = f(probe).item()
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFinite(f"non-finite value while probing coordinate {i}")
        g_fd[i] = (f_plus - f_minus) / (2.0 * eps)

    ga = g_analytic.reshape(-1)
    denom = np.maximum(1e-12, np.abs(ga) + np.abs(g_fd))
    return float((np.abs(ga - g_fd) / denom).max())


def _away_from(x: np.ndarray, kink: float, margin: float) -> np.ndarray:
    """Push values at least ``margin`` away from ``kink`` so finite
    differences never straddle a subgradient point."""
    d = x - kink
    s = np.where(d >= 0.0, 1.0, -1.0)
    return kink + s * np.maximum(np.abs(d), margin)


def _weighted(op_out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize an op output against a fixed random direction."""
    return ops.tsum(ops.mul(op_out, Tensor(weights)))


def _cases_for_seed(seed: int) -> list[tuple[str, Callable, Tensor]]:
    """(op name, scalar function, probe input) triples for one seed."""
    rng = np.random.default_rng(seed)

    def arr(*shape):
        return rng.normal(0.0, 1.0, size=shape)

    cases: list[tuple[str, Callable, Tensor]] = []

    def case(name, f, x0):
        cases.append((name, f, Tensor(np.asarray(x0, dtype=np.float64))))

    a34, b34 = arr(3, 4), arr(3, 4)
    w34 = arr(3, 4)
    case("add", lambda x: _weighted(ops.add(x, Tensor(b34)), w34), a34)
    case("sub", lambda x: _weighted(ops.sub(Tensor(b34), x), w34), a34)
    case("mul", lambda x: _weighted(ops.mul(x, Tensor(b34)), w34), a34)
    denom = _away_from(arr(3, 4), 0.0, 0.5)
    case("div", lambda x: _weighted(ops.div(Tensor(b34), x), w34), denom)
    case("scale", lambda x: _weighted(ops.scale(x, -1.7), w34), a34)
    case("neg", lambda x: _weighted(ops.neg(x), w34), a34)

    case("relu", lambda x: _weighted(ops.relu(x), w34),
         _away_from(a34, 0.0, 0.01))
    case("gelu", lambda x: _weighted(ops.gelu(x), w34), a34)
    case("sqrt", lambda x: _weighted(ops.sqrt(x), w34),
         np.abs(a34) + 0.1)
    case("abs", lambda x: _weighted(ops.absval(x), w34),
         _away_from(a34, 0.0, 0.01))
    case("maximum_scalar", lambda x: _weighted(ops.maximum_scalar(x, 0.3), w34),
         _away_from(a34, 0.3, 0.01))

    m_l, m_r, m_w = arr(3, 4), arr(4, 2), arr(3, 2)
    case("matmul", lambda x: _weighted(ops.matmul(x, Tensor(m_r)), m_w), m_l)
    mb_l, mb_w = arr(2, 3, 4), arr(2, 3, 2)
    case("matmul", lambda x: _weighted(ops.matmul(Tensor(mb_l), x), mb_w), m_r)

    lw, lb, lwght = arr(4, 3), arr(3), arr(3, 3)
    case("linear", lambda x: _weighted(ops.linear(x, Tensor(lw), Tensor(lb)), lwght), a34[:3])

    for k, stride in ((1, 1), (1, 2), (3, 1), (3, 2)):
        cx = arr(1, 2, 6, 6)
        cw = arr(3, 2, k, k) * 0.5
        cb = arr(3) * 0.1
        oh = (6 + 2 * ((k - 1) // 2) - k) // stride + 1
        cwght = arr(1, 3, oh, oh)

        def conv_x(x, cw=cw, cb=cb, stride=stride, cwght=cwght):
            return _weighted(ops.conv2d(x, Tensor(cw), Tensor(cb), stride=stride), cwght)

        def conv_w(w, cx=cx, cb=cb, stride=stride, cwght=cwght):
            return _weighted(ops.conv2d(Tensor(cx), w, Tensor(cb), stride=stride), cwght)

        def conv_b(b, cx=cx, cw=cw, stride=stride, cwght=cwght):
            return _weighted(ops.conv2d(Tensor(cx), Tensor(cw), b, stride=stride), cwght)

        case("conv2d", conv_x, cx)
        case("conv2d", conv_w, cw)
        case("conv2d", conv_b, cb)

    # weights must be hoisted out of the closures: f has to be pure, and
    # arr() advances the seed rng on every call
    x234 = arr(2, 3, 4)
    mean_w, sum_w = arr(2, 4), arr(3)
    case("mean", lambda x: _weighted(ops.mean(x, axes=(1,)), mean_w), x234)
    case("mean", lambda x: ops.mean(x), x234)
    case("sum", lambda x: _weighted(ops.tsum(x, axes=(0, 2)), sum_w), x234)

    sm_w = arr(3, 5)
    case("softmax", lambda x: _weighted(ops.softmax(x, axis=-1), sm_w), arr(3, 5))

    ce_targets = rng.integers(0, 3, size=(2, 2, 2))
    case("cross_entropy_sum",
         lambda x: ops.scale(ops.cross_entropy_sum(x, ce_targets), 1.0 / 8.0),
         arr(2, 3, 2, 2))

    rs_w, tp_w, up_w = arr(4, 3), arr(4, 2, 3), arr(1, 2, 6, 6)
    case("reshape", lambda x: _weighted(ops.reshape(x, (4, 3)), rs_w), a34)
    case("transpose", lambda x: _weighted(ops.transpose(x, (2, 0, 1)), tp_w), x234)
    case("upsample2x", lambda x: _weighted(ops.upsample2x(x), up_w), arr(1, 2, 3, 3))

    c_other, cc_w = arr(2, 3, 2, 2), arr(2, 5, 2, 2)
    case("concat_channels",
         lambda x: _weighted(ops.concat_channels([x, Tensor(c_other)]), cc_w),
         arr(2, 2, 2, 2))

    sl_w = arr(2, 2, 2, 2)
    case("slice_channels",
         lambda x: _weighted(ops.slice_channels(x, 1, 3), sl_w),
         arr(2, 5, 2, 2))

    ln_g, ln_b, ln_w, ln_x = arr(5), arr(5), arr(4, 5), arr(4, 5)
    case("layer_norm",
         lambda x: _weighted(ops.layer_norm(x, Tensor(ln_g), Tensor(ln_b)), ln_w),
         ln_x)
    case("layer_norm",
         lambda g: _weighted(ops.layer_norm(Tensor(ln_x), g, Tensor(ln_b)), ln_w),
         ln_g)

    return cases


def run_op_catalog(seeds: Iterable[int] = DEFAULT_SEEDS,
                   eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Max relative finite-difference error per catalog op across seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, f, x0 in _cases_for_seed(seed):
            err = finite_diff_check(f, x0, eps=eps)
            if err > worst.get(name, -1.0):
                worst[name] = err
    return worst


def run_loss_checks(seeds: Iterable[int] = DEFAULT_SEEDS,
                    eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Finite-difference checks for the composite training losses."""
    from .alignment import (LinearProjector, alignment_loss, project_student)
    from .detector import single_level_detection_loss

    worst: dict[str, float] = {}

    def update(name, err):
        if err > worst.get(name, -1.0):
            worst[name] = err

    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        teacher = rng.normal(0.0, 1.0, size=(1, 3, 3, 3)) + 0.2
        proj = LinearProjector(rng, c_in=4, c_out=3)
        student = rng.normal(0.0, 1.0, size=(1, 4, 3, 3))

        def cos_wrt_feat(x):
            return alignment_loss(project_student(x, proj), Tensor(teacher), kind="cosine")

        def mse_wrt_feat(x):
            return alignment_loss(project_student(x, proj), Tensor(teacher), kind="mse")

        update("alignment_cosine", finite_diff_check(cos_wrt_feat, Tensor(student), eps=eps))
        update("alignment_mse", finite_diff_check(mse_wrt_feat, Tensor(student), eps=eps))

        feat_const = Tensor(student)

        def cos_wrt_proj(w):
            projected = ops.reshape(
                ops.linear(ops.reshape(ops.transpose(feat_const, (0, 2, 3, 1)), (9, 4)),
                           w, Tensor(proj.bias.data)),
                (1, 3, 3, 3))
            projected = ops.transpose(projected, (0, 3, 1, 2))
            return alignment_loss(projected, Tensor(teacher), kind="cosine")

        update("alignment_cosine", finite_diff_check(cos_wrt_proj, Tensor(proj.weight.data), eps=eps))

        logits0 = rng.normal(0.0, 1.0, size=(1, 4, 2, 2))
        boxes0 = rng.normal(0.0, 0.3, size=(1, 4, 2, 2))
        cls_target = rng.integers(0, 4, size=(1, 2, 2))
        box_target = np.zeros((1, 4, 2, 2))
        box_mask = np.zeros((1, 4, 2, 2))
        box_target[0, :, 1, 0] = rng.uniform(0.2, 0.6, size=4)
        box_mask[0, :, 1, 0] = 1.0
        cls_target[0, 1, 0] = rng.integers(0, 3)

        def det_wrt_logits(x):
            return single_level_detection_loss(x, Tensor(boxes0), cls_target,
                                               box_target, box_mask)

        def det_wrt_boxes(x):
            return single_level_detection_loss(Tensor(logits0), x, cls_target,
                                               box_target, box_mask)

        update("detection_loss", finite_diff_check(det_wrt_logits, Tensor(logits0), eps=eps))
        update("detection_loss", finite_diff_check(det_wrt_boxes, Tensor(boxes0), eps=eps))

    return worst


def full_report(seeds: Iterable[int] = DEFAULT_SEEDS,
                eps: float = DEFAULT_EPS) -> list[tuple[str, float]]:
    """One (name, max relative error) row per catalog op and loss."""
    rows = list(run_op_catalog(seeds, eps).items())
    rows += list(run_loss_checks(seeds, eps).items())
    return rows
