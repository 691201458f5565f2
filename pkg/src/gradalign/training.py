"""Training harness: composite loss assembly, ratio bookkeeping, epoch
records, evaluation, and the run driver.

The total loss is ``detection + lambda * alignment`` with lambda either
static or steered by the ratio controller at epoch boundaries.  Everything
is deterministic in the config: two runs with the same config produce
byte-identical metrics logs and checkpoints (wall-clock timings therefore
live in the run summary, never in the metrics log).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .alignment import Aligner, InjectionStrategy, parse_strategy
from .checkpoint import write_checkpoint
from .controller import (GamConfig, GamState, GradSnapshot, end_epoch,
                         record_step)
from .detector import (ToyDetector, assign_targets, box_iou, cell_for_box,
                       detection_loss, level_for_box)
from .errors import BadConfig, NonFinite
from .registry import RATIO_COMPONENTS, make_optimizer
from .scenes import EVAL_SPLIT, TRAIN_SPLIT, scene_batch
from .teacher import FileTeacher, StubTeacher
from .tensor import Tape, backward, no_grad

METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "model.ckpt"
SUMMARY_NAME = "summary.json"
CONFIG_NAME = "config.json"


# --- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class TeacherSpec:
    kind: str = "stub"           # "stub" or "file"
    seed: int = 1234             # stub weights seed
    path: Optional[str] = None   # feature file for kind == "file"


@dataclass(frozen=True)
class GamSpec:
    enabled: bool = True
    rho: float = 0.10
    delta: float = 0.02
    lambda0: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    image_size: int = 128
    batch_size: int = 8
    steps_per_epoch: int = 50
    epochs: int = 40
    lr: float = 1e-3
    optimizer: str = "adam"
    gam: GamSpec = GamSpec()
    static_lambda: float = 1.0   # loss weight when the controller is off
    strategy: str = "aifi-only"
    strategy_levels: tuple[str, ...] = ()
    align_loss: str = "cosine"
    projector: str = "linear"
    teacher: TeacherSpec = TeacherSpec()
    eval_scenes: int = 32

    def validate(self) -> "TrainConfig":
        if self.image_size <= 0 or self.image_size % 32:
            raise BadConfig(f"image_size must be a positive multiple of 32, "
                            f"got {self.image_size}")
        for name in ("batch_size", "steps_per_epoch", "epochs", "eval_scenes"):
            if getattr(self, name) <= 0:
                raise BadConfig(f"{name} must be positive")
        if self.lr <= 0:
            raise BadConfig("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise BadConfig(f"unknown optimizer {self.optimizer!r}")
        if self.align_loss not in ("cosine", "mse"):
            raise BadConfig(f"unknown align_loss {self.align_loss!r}")
        if self.projector not in ("linear", "mlp", "conv1x1"):
            raise BadConfig(f"unknown projector {self.projector!r}")
        if self.static_lambda < 0:
            raise BadConfig("static_lambda must be non-negative")
        if self.teacher.kind not in ("stub", "file"):
            raise BadConfig(f"unknown teacher kind {self.teacher.kind!r}")
        if self.teacher.kind == "file" and not self.teacher.path:
            raise BadConfig("file teacher needs a path")
        try:
            parse_strategy(self.strategy, self.strategy_levels)
            if self.gam.enabled:
                GamConfig(rho=self.gam.rho, delta=self.gam.delta,
                          lambda0=self.gam.lambda0)
        except ValueError as exc:
            raise BadConfig(str(exc)) from None
        return self

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "image_size": self.image_size,
            "batch_size": self.batch_size,
            "steps_per_epoch": self.steps_per_epoch,
            "epochs": self.epochs,
            "lr": self.lr,
            "optimizer": self.optimizer,
            "gam": {"enabled": self.gam.enabled, "rho": self.gam.rho,
                    "delta": self.gam.delta, "lambda0": self.gam.lambda0},
            "static_lambda": self.static_lambda,
            "strategy": self.strategy,
            "strategy_levels": list(self.strategy_levels),
            "align_loss": self.align_loss,
            "projector": self.projector,
            "teacher": {"kind": self.teacher.kind, "seed": self.teacher.seed,
                        "path": self.teacher.path},
            "eval_scenes": self.eval_scenes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        def take(d: dict, allowed: set[str], ctx: str) -> None:
            unknown = set(d) - allowed
            if unknown:
                raise BadConfig(f"unknown {ctx} keys: {sorted(unknown)}")

        take(data, {f.name for f in fields(cls)}, "config")
        kwargs = dict(data)
        if "gam" in kwargs:
            gam = dict(kwargs["gam"])
            take(gam, {f.name for f in fields(GamSpec)}, "gam")
            kwargs["gam"] = GamSpec(**gam)
        if "teacher" in kwargs:
            teacher = dict(kwargs["teacher"])
            take(teacher, {f.name for f in fields(TeacherSpec)}, "teacher")
            kwargs["teacher"] = TeacherSpec(**teacher)
        if "strategy_levels" in kwargs:
            kwargs["strategy_levels"] = tuple(kwargs["strategy_levels"])
        try:
            return cls(**kwargs).validate()
        except TypeError as exc:
            raise BadConfig(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise BadConfig(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise BadConfig(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise BadConfig(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()

    @property
    def initial_lambda(self) -> float:
        return self.gam.lambda0 if self.gam.enabled else self.static_lambda


def build_teacher(spec: TeacherSpec):
    if spec.kind == "stub":
        return StubTeacher(seed=spec.seed)
    return FileTeacher(spec.path)


# --- per-epoch records ---------------------------------------------------------

_LOG_KEYS = ("epoch", "lambda", "r_bar", "branch", "grad_l1", "loss_det",
             "loss_align", "loss_total", "det_score", "align_score")


@dataclass
class EpochRecord:
    epoch: int
    lambda_used: float
    r_bar: Optional[float]
    branch: Optional[str]
    grad_l1: Optional[dict[str, float]]
    loss_det: Optional[float]
    loss_align: Optional[float]
    loss_total: Optional[float]
    det_score: Optional[float]
    align_score: Optional[float]
    wall_seconds: float = 0.0  # summary-only; kept out of the metrics line

    def to_json_line(self) -> str:
        payload = {
            "epoch": self.epoch,
            "lambda": self.lambda_used,
            "r_bar": self.r_bar,
            "branch": self.branch,
            "grad_l1": self.grad_l1,
            "loss_det": self.loss_det,
            "loss_align": self.loss_align,
            "loss_total": self.loss_total,
            "det_score": self.det_score,
            "align_score": self.align_score,
        }
        return json.dumps(payload)

    @classmethod
    def from_json_line(cls, line: str) -> "EpochRecord":
        data = json.loads(line)
        if tuple(data.keys()) != _LOG_KEYS:
            raise ValueError(f"unexpected metrics record keys: {list(data)}")
        return cls(epoch=data["epoch"], lambda_used=data["lambda"],
                   r_bar=data["r_bar"], branch=data["branch"],
                   grad_l1=data["grad_l1"], loss_det=data["loss_det"],
                   loss_align=data["loss_align"], loss_total=data["loss_total"],
                   det_score=data["det_score"], align_score=data["align_score"])


@dataclass
class EvalResult:
    det_score: float
    align_score: Optional[float]


def evaluate(model: ToyDetector, seed: int, n_scenes: int, image_size: int,
             aligner: Optional[Aligner] = None, teacher=None,
             batch_size: int = 8) -> EvalResult:
    """Held-out scoring on the evaluation scene stream.

    Detection score: fraction of objects whose assigned cell predicts the
    right class with box IoU >= 0.5.  Alignment score: mean cosine
    similarity of projected F5 vs the teacher, when both a teacher capable
    of embedding new images and an F5 projector are supplied; the detection
    path itself needs neither and records nothing on any tape.
    """
    hits = 0
    total = 0
    cos_sum, cos_n = 0.0, 0
    can_align = (aligner is not None and teacher is not None
                 and hasattr(teacher, "forward")
                 and "F5" in getattr(aligner, "projectors", {}))
    for start in range(0, n_scenes, batch_size):
        indices = range(start, min(start + batch_size, n_scenes))
        images, objects = scene_batch(seed, indices, image_size, EVAL_SPLIT)
        with no_grad():
            output, feats = model.forward(images)
            shapes = output.level_shapes()
            for b, objs in enumerate(objects):
                for obj in objs:
                    lv = level_for_box(obj.box)
                    row, col = cell_for_box(obj.box, shapes[lv])
                    pred_cls = int(output.logits[lv].data[b, :, row, col].argmax())
                    pred_box = output.boxes[lv].data[b, :, row, col]
                    ok = (pred_cls == obj.class_id
                          and box_iou(tuple(pred_box), obj.box) >= 0.5)
                    hits += int(ok)
                    total += 1
            if can_align:
                tokens = teacher.forward(images)
                score = aligner.f5_cosine_score(feats, tokens)
                cos_sum += score * len(list(indices))
                cos_n += len(list(indices))
    det = hits / total if total else 0.0
    align = (cos_sum / cos_n) if cos_n else None
    return EvalResult(det_score=det, align_score=align)


# --- the session ---------------------------------------------------------------

@dataclass
class StepStats:
    loss_det: float
    loss_align: float
    loss_total: float
    snapshot: GradSnapshot


class TrainingSession:
    """One deterministic training run; owns model, teacher, aligner,
    optimizer and controller state."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        self.model = ToyDetector(seed=config.seed)
        self.teacher = build_teacher(config.teacher)
        self.strategy = parse_strategy(config.strategy, config.strategy_levels)
        channels = {"S3": self.model.c3, "S4": self.model.c4,
                    "S5": self.model.c5, "F5": self.model.c5}
        self.aligner = Aligner(seed=config.seed, strategy=self.strategy,
                               feature_channels=channels,
                               teacher_width=self.teacher.width,
                               projector_kind=config.projector,
                               loss_kind=config.align_loss)
        self.aligner.register(self.model.registry)
        self.optimizer = make_optimizer(config.optimizer, self.model.registry,
                                        config.lr)
        gam_cfg = GamConfig(rho=config.gam.rho, delta=config.gam.delta,
                            lambda0=config.gam.lambda0)
        self.state = GamState(config=gam_cfg)
        if not config.gam.enabled:
            self.state.lambda_e = config.static_lambda
        self._step_counter = 0

    @property
    def lambda_e(self) -> float:
        return self.state.lambda_e

    def train_step(self, indices) -> StepStats:
        cfg = self.config
        images, objects = scene_batch(cfg.seed, indices, cfg.image_size,
                                      TRAIN_SPLIT)
        lam = self.state.lambda_e
        with Tape() as tape:
            output, feats = self.model.forward(images)
            targets = assign_targets(objects, output.level_shapes())
            l_det = detection_loss(output, targets)
            tokens = self.teacher.tokens_for_batch(images, indices)
            l_align = self.aligner.loss(feats, tokens)
            l_total = ops.add(l_det, ops.scale(l_align, lam))
            stats = (l_det.item(), l_align.item(), l_total.item())
            if not all(np.isfinite(v) for v in stats):
                raise NonFinite(
                    f"step {self._step_counter}: losses det={stats[0]} "
                    f"align={stats[1]} total={stats[2]}")
            if abs(stats[2] - (stats[0] + lam * stats[1])) > 1e-9 * max(1.0, abs(stats[2])):
                raise AssertionError("total loss assembly drifted")
            backward(l_total)
            tape.clear()
        self.model.registry.ensure_grads()
        snap = GradSnapshot.from_registry(self.model.registry,
                                          self._step_counter)
        record_step(self.state, snap)
        self.optimizer.step()
        self.model.registry.zero_grads()
        self._step_counter += 1
        return StepStats(loss_det=stats[0], loss_align=stats[1],
                         loss_total=stats[2], snapshot=snap)

    def evaluate_now(self) -> EvalResult:
        cfg = self.config
        return evaluate(self.model, cfg.seed, cfg.eval_scenes, cfg.image_size,
                        aligner=self.aligner, teacher=self.teacher,
                        batch_size=cfg.batch_size)

    def train_epoch(self) -> EpochRecord:
        cfg = self.config
        t0 = time.perf_counter()
        sums = {"det": 0.0, "align": 0.0, "total": 0.0}
        grad_sums = {c: 0.0 for c in RATIO_COMPONENTS}
        n = cfg.steps_per_epoch
        for step in range(n):
            base = step * cfg.batch_size
            stats = self.train_step(range(base, base + cfg.batch_size))
            sums["det"] += stats.loss_det
            sums["align"] += stats.loss_align
            sums["total"] += stats.loss_total
            for c in RATIO_COMPONENTS:
                grad_sums[c] += stats.snapshot.norms[c]
        summary = end_epoch(self.state, adapt=cfg.gam.enabled)
        result = self.evaluate_now()
        return EpochRecord(
            epoch=summary.epoch,
            lambda_used=summary.lambda_used,
            r_bar=summary.r_bar,
            branch=summary.branch,
            grad_l1={c.value: grad_sums[c] / n for c in RATIO_COMPONENTS},
            loss_det=sums["det"] / n,
            loss_align=sums["align"] / n,
            loss_total=sums["total"] / n,
            det_score=result.det_score,
            align_score=result.align_score,
            wall_seconds=time.perf_counter() - t0,
        )


def run_training(config: TrainConfig, out_dir, log=None) -> dict:
    """Full run: initial eval, epochs, checkpoint, metrics log, summary.
    Returns the summary dict (also written to summary.json)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(
        json.dumps(config.to_dict(), indent=2) + "\n")

    session = TrainingSession(config)
    records: list[EpochRecord] = []
    t_start = time.perf_counter()

    init_eval = session.evaluate_now()
    init_record = EpochRecord(
        epoch=0, lambda_used=session.lambda_e, r_bar=None, branch=None,
        grad_l1=None, loss_det=None, loss_align=None, loss_total=None,
        det_score=init_eval.det_score, align_score=init_eval.align_score)
    records.append(init_record)

    with open(out_dir / METRICS_NAME, "w") as metrics:
        metrics.write(init_record.to_json_line() + "\n")
        for _ in range(config.epochs):
            record = session.train_epoch()
            records.append(record)
            metrics.write(record.to_json_line() + "\n")
            if log:
                log(f"epoch {record.epoch:3d}  lambda {record.lambda_used:9.4f}  "
                    f"r_bar {record.r_bar:.4f}  branch {record.branch:5s}  "
                    f"det {record.det_score:.3f}  "
                    f"align {-1.0 if record.align_score is None else record.align_score:.3f}")

    write_checkpoint(out_dir / CHECKPOINT_NAME, session.model.registry,
                     config_digest=config.digest())

    gam_cfg = session.state.config
    epoch_rows = [r for r in records if r.epoch > 0]
    in_band = [r.r_bar is not None and gam_cfg.in_band(r.r_bar)
               for r in epoch_rows]
    first_in_band = next((i + 1 for i, ok in enumerate(in_band) if ok), None)
    if first_in_band is None:
        residence = 0.0
    else:
        window = in_band[first_in_band - 1:]
        residence = sum(window) / len(window)

    summary = {
        "config_digest": config.digest(),
        "n_parameters": len(session.model.registry),
        "n_values": session.model.registry.n_values(),
        "initial": {"det_score": init_eval.det_score,
                    "align_score": init_eval.align_score},
        "final": {"det_score": epoch_rows[-1].det_score if epoch_rows else None,
                  "align_score": epoch_rows[-1].align_score if epoch_rows else None},
        "lambda_trajectory": [
            {"epoch": r.epoch, "lambda": r.lambda_used, "r_bar": r.r_bar,
             "branch": r.branch} for r in epoch_rows],
        "branches": sorted({r.branch for r in epoch_rows}),
        "first_in_band_epoch": first_in_band,
        "band_residence_after_entry": residence,
        "wall_seconds_total": time.perf_counter() - t_start,
        "wall_seconds_per_epoch": [r.wall_seconds for r in epoch_rows],
        "checkpoint": CHECKPOINT_NAME,
        "metrics": METRICS_NAME,
    }
    (out_dir / SUMMARY_NAME).write_text(json.dumps(summary, indent=2) + "\n")
    return summary
