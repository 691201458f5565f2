"""Feedback control of the alignment loss weight via gradient-norm ratios.

Each optimizer step contributes one measurement: the attention block's share
of the summed per-component gradient L1 norms.  At every epoch boundary the
shares are averaged; if the average left the target band, the loss weight is
rescaled so the ratio is steered toward the *further* band boundary (only
part of the attention gradient comes from the alignment loss, so aiming past
the near boundary converges without oscillating).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (DegenerateRatio, EmptyEpoch, MissingComponent, NonFinite,
                     NonPositiveLambda)
from .registry import Component, ParameterRegistry, RATIO_COMPONENTS

log = logging.getLogger(__name__)

ZERO_GRAD_FLOOR = 1e-12   # steps with smaller total norm are skipped
LAMBDA_MIN, LAMBDA_MAX = 1e-6, 1e6

BRANCH_UP = "up"        # ratio below band: weight raised
BRANCH_DOWN = "down"    # ratio above band: weight lowered
BRANCH_HOLD = "hold"


@dataclass(frozen=True)
class GamConfig:
    """Target ratio, tolerance band half-width, and initial loss weight.

    The defaults (rho=0.10, delta=0.02, lambda0=1.0) are this artifact's
    own choice, picked so the toy model's natural attention-gradient share
    brackets the band and both update branches get exercised.
    """

    rho: float = 0.10
    delta: float = 0.02
    lambda0: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must be in (0,1), got {self.rho}")
        if not 0.0 <= self.delta < self.rho:
            raise ValueError(f"delta must satisfy 0 <= delta < rho, got {self.delta}")
        if not self.rho + self.delta < 1.0:
            raise ValueError(f"rho + delta must be < 1, got {self.rho + self.delta}")
        if not self.lambda0 > 0.0:
            raise ValueError(f"lambda0 must be positive, got {self.lambda0}")

    @property
    def band(self) -> tuple[float, float]:
        return self.rho - self.delta, self.rho + self.delta

    def in_band(self, r: float) -> bool:
        lo, hi = self.band
        return lo <= r <= hi


@dataclass(frozen=True)
class GradSnapshot:
    """Per-component gradient L1 norms captured after one backward pass,
    before the optimizer step."""

    norms: dict[Component, float]
    step_index: int = 0

    def __post_init__(self):
        for c in RATIO_COMPONENTS:
            if c not in self.norms:
                raise MissingComponent(f"snapshot missing component {c.value}")
            v = self.norms[c]
            if not np.isfinite(v):
                raise NonFinite(f"non-finite gradient norm for {c.value}: {v}")
            if v < 0:
                raise ValueError(f"negative gradient norm for {c.value}")

    @classmethod
    def from_registry(cls, registry: ParameterRegistry,
                      step_index: int = 0) -> "GradSnapshot":
        norms = {c: registry.component_grad_l1(c) for c in RATIO_COMPONENTS}
        return cls(norms=norms, step_index=step_index)

    def total(self) -> float:
        total = 0.0
        for c in RATIO_COMPONENTS:
            total += self.norms[c]
        return total


@dataclass
class EpochSummary:
    epoch: int
    r_bar: Optional[float]
    lambda_used: float
    lambda_next: float
    branch: str
    steps: int
    skipped: int


@dataclass
class GamState:
    """Controller state for one training run."""

    config: GamConfig
    lambda_e: float = field(init=False)
    epoch_index: int = 1
    ratios: list[float] = field(default_factory=list)
    skipped: int = 0
    history: list[EpochSummary] = field(default_factory=list)

    def __post_init__(self):
        self.lambda_e = self.config.lambda0


def record_step(state: GamState, snap: GradSnapshot) -> Optional[float]:
    """Append this step's attention gradient share; returns None (and skips
    the step) when the total gradient norm is degenerate."""
    total = snap.total()
    if total < ZERO_GRAD_FLOOR:
        state.skipped += 1
        return None
    r = snap.norms[Component.AIFI] / total
    state.ratios.append(r)
    return r


def epoch_average(state: GamState) -> float:
    """Arithmetic mean of the recorded ratios this epoch."""
    if not state.ratios:
        raise EmptyEpoch(f"epoch {state.epoch_index}: every step was skipped")
    total = 0.0
    for r in state.ratios:
        total += r
    return total / len(state.ratios)


def update_branch(r_bar: float, rho: float, delta: float) -> str:
    if r_bar > rho + delta:
        return BRANCH_DOWN
    if r_bar < rho - delta:
        return BRANCH_UP
    return BRANCH_HOLD


def update_lambda(lambda_e: float, r_bar: float, rho: float, delta: float) -> float:
    """Pure further-boundary update:

        r_bar > rho + delta  ->  lambda * (rho - delta) / r_bar
        r_bar < rho - delta  ->  lambda * (rho + delta) / r_bar
        otherwise            ->  lambda (boundary ties hold)

    The result is clamped into [1e-6, 1e6] with a logged warning.
    """
    if not (np.isfinite(lambda_e) and np.isfinite(r_bar)):
        raise NonFinite(f"non-finite controller inputs: lambda={lambda_e}, r_bar={r_bar}")
    if lambda_e <= 0.0:
        raise NonPositiveLambda(f"lambda must be positive, got {lambda_e}")
    if r_bar <= 0.0:
        raise DegenerateRatio(f"ratio average must be positive, got {r_bar}")
    branch = update_branch(r_bar, rho, delta)
    if branch == BRANCH_DOWN:
        lam = lambda_e * (rho - delta) / r_bar
    elif branch == BRANCH_UP:
        lam = lambda_e * (rho + delta) / r_bar
    else:
        return lambda_e
    if lam < LAMBDA_MIN or lam > LAMBDA_MAX:
        clamped = min(max(lam, LAMBDA_MIN), LAMBDA_MAX)
        log.warning("lambda update %.3e clamped to %.3e", lam, clamped)
        return clamped
    return lam


def end_epoch(state: GamState, adapt: bool = True) -> EpochSummary:
    """Close the epoch: average ratios, update lambda (unless ``adapt`` is
    off, i.e. a static-weight run), log, and reset the step buffer.

    An epoch where every step was skipped is legal: lambda carries over and
    the record is flagged as degenerate.
    """
    cfg = state.config
    steps = len(state.ratios)
    try:
        r_bar = epoch_average(state)
    except EmptyEpoch:
        summary = EpochSummary(epoch=state.epoch_index, r_bar=None,
                               lambda_used=state.lambda_e,
                               lambda_next=state.lambda_e,
                               branch="degenerate", steps=0,
                               skipped=state.skipped)
    else:
        if adapt:
            lam_next = update_lambda(state.lambda_e, r_bar, cfg.rho, cfg.delta)
            branch = update_branch(r_bar, cfg.rho, cfg.delta)
        else:
            lam_next, branch = state.lambda_e, "off"
        summary = EpochSummary(epoch=state.epoch_index, r_bar=r_bar,
                               lambda_used=state.lambda_e,
                               lambda_next=lam_next, branch=branch,
                               steps=steps, skipped=state.skipped)
    state.history.append(summary)
    state.lambda_e = summary.lambda_next
    state.epoch_index += 1
    state.ratios.clear()
    state.skipped = 0
    return summary


# --- closed-loop simulation ---------------------------------------------------

@dataclass(frozen=True)
class Plant:
    """Deterministic monotone response r_bar(lambda) = a*lambda / (a*lambda + b),
    optionally with bounded multiplicative noise (at most 5%)."""

    a: float
    b: float
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("plant parameters a, b must be positive")
        if not 0.0 <= self.noise <= 0.05:
            raise ValueError(f"noise must be in [0, 0.05], got {self.noise}")

    def response(self, lam: float, rng: Optional[np.random.Generator]) -> float:
        r = self.a * lam / (self.a * lam + self.b)
        if self.noise and rng is not None:
            r *= 1.0 + self.noise * float(rng.uniform(-1.0, 1.0))
        return min(r, 1.0)


@dataclass(frozen=True)
class TrajectoryPoint:
    epoch: int
    lambda_e: float
    r_bar: float
    branch: str


def closed_loop_sim(plant: Plant, config: GamConfig,
                    epochs: int) -> list[TrajectoryPoint]:
    """Iterate plant response and weight update for ``epochs`` rounds."""
    rng = np.random.default_rng(plant.seed) if plant.noise else None
    lam = config.lambda0
    trajectory = []
    for epoch in range(1, epochs + 1):
        r_bar = plant.response(lam, rng)
        branch = update_branch(r_bar, config.rho, config.delta)
        lam_next = update_lambda(lam, r_bar, config.rho, config.delta)
        trajectory.append(TrajectoryPoint(epoch=epoch, lambda_e=lam,
                                          r_bar=r_bar, branch=branch))
        lam = lam_next
    return trajectory


def epochs_to_band(trajectory: list[TrajectoryPoint],
                   config: GamConfig) -> Optional[int]:
    """First epoch whose ratio average sits inside the band, or None."""
    for point in trajectory:
        if config.in_band(point.r_bar):
            return point.epoch
    return None


def band_residence(trajectory: list[TrajectoryPoint], config: GamConfig,
                   first: Optional[int] = None,
                   last: Optional[int] = None) -> float:
    """Fraction of epochs in [first, last] (defaults: first band entry to
    the end) whose ratio average is in-band."""
    if first is None:
        first = epochs_to_band(trajectory, config)
        if first is None:
            return 0.0
    window = [p for p in trajectory
              if p.epoch >= first and (last is None or p.epoch <= last)]
    if not window:
        return 0.0
    return sum(config.in_band(p.r_bar) for p in window) / len(window)


def write_trajectory_csv(path, trajectory: list[TrajectoryPoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lambda", "r_bar", "branch"])
        for p in trajectory:
            writer.writerow([p.epoch, repr(p.lambda_e), repr(p.r_bar), p.branch])
