"""Command-line entry point.

Commands: train, eval, grad-check, gam-sim, inspect-features.
Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .controller import (GamConfig, Plant, band_residence, closed_loop_sim,
                         epochs_to_band, write_trajectory_csv)
from .errors import (BadCheckpoint, BadConfig, BadMagic, GradAlignError,
                     IoError, NonFinite, ShapeMismatchOnLoad, TruncatedPayload,
                     UnknownName, VersionMismatch)
from .gradcheck import DEFAULT_EPS, TOLERANCE, full_report

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

_VALIDATION_ERRORS = (BadConfig, BadMagic, BadCheckpoint, UnknownName,
                      ShapeMismatchOnLoad, TruncatedPayload, VersionMismatch,
                      ValueError)


class _CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad flags as validation failures (exit 1)."""

    def error(self, message):
        raise _CliError(message, EXIT_VALIDATION)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gradalign",
                     description="Desk-scale detector training with teacher "
                                 "feature alignment and a gradient-ratio "
                                 "controller for the alignment loss weight.")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run a full training loop",
                        description="Train the toy detector; writes "
                                    "metrics.jsonl, model.ckpt, config.json "
                                    "and summary.json into --out.")
    tr.add_argument("--config", default="default",
                    help="JSON config path, or the literal 'default'")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--seed", type=int, help="override: master seed")
    tr.add_argument("--epochs", type=int, help="override: number of epochs")
    tr.add_argument("--steps-per-epoch", type=int, help="override: steps per epoch")
    tr.add_argument("--batch-size", type=int, help="override: batch size")
    tr.add_argument("--image-size", type=int, help="override: image size (multiple of 32)")
    tr.add_argument("--lr", type=float, help="override: learning rate")
    tr.add_argument("--optimizer", choices=["adam", "sgd"], help="override: optimizer kind")
    tr.add_argument("--gam", choices=["on", "off"],
                    help="override: adaptive loss-weight controller on/off")
    tr.add_argument("--rho", type=float, help="override: controller target ratio")
    tr.add_argument("--delta", type=float, help="override: controller band half-width")
    tr.add_argument("--lambda0", type=float, help="override: initial adaptive loss weight")
    tr.add_argument("--lambda", dest="static_lambda", type=float,
                    help="override: static loss weight (used when --gam off)")
    tr.add_argument("--strategy", choices=["aifi-only", "backbone", "hybrid"],
                    help="override: which features are aligned")
    tr.add_argument("--levels", help="override: comma-separated backbone levels, e.g. S3,S5")
    tr.add_argument("--align-loss", choices=["cosine", "mse"],
                    help="override: alignment loss kind")
    tr.add_argument("--projector", choices=["linear", "mlp", "conv1x1"],
                    help="override: projector architecture")
    tr.add_argument("--teacher-seed", type=int, help="override: stub teacher seed")
    tr.add_argument("--teacher-file", help="override: teacher feature file (SDTF)")
    tr.add_argument("--eval-scenes", type=int, help="override: held-out scene count")
    tr.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")

    ev = sub.add_parser("eval", help="score a checkpoint on held-out scenes")
    ev.add_argument("--checkpoint", required=True, help="checkpoint file")
    ev.add_argument("--config",
                    help="config JSON (default: config.json next to the checkpoint)")
    ev.add_argument("--scenes", type=int, help="number of held-out scenes")

    gc = sub.add_parser("grad-check",
                        help="verify analytic gradients against finite differences")
    gc.add_argument("--seeds", type=int, default=10,
                    help="number of random seeds per op (default 10)")
    gc.add_argument("--eps", type=float, default=DEFAULT_EPS,
                    help="central-difference step (default 1e-5)")

    gs = sub.add_parser("gam-sim",
                        help="closed-loop simulation of the ratio controller")
    gs.add_argument("--rho", type=float, default=0.10, help="target ratio")
    gs.add_argument("--delta", type=float, default=0.02, help="band half-width")
    gs.add_argument("--lambda0", type=float, default=1.0, help="initial weight")
    gs.add_argument("--plant-a", type=float, default=1.0, help="plant parameter a")
    gs.add_argument("--plant-b", type=float, default=1.0, help="plant parameter b")
    gs.add_argument("--noise", type=float, default=0.0,
                    help="multiplicative noise amplitude, at most 0.05")
    gs.add_argument("--noise-seed", type=int, default=0, help="noise rng seed")
    gs.add_argument("--epochs", type=int, default=100, help="simulated epochs")
    gs.add_argument("--out", help="trajectory CSV path")

    ins = sub.add_parser("inspect-features",
                         help="PCA-project feature maps of one scene to images")
    ins.add_argument("--checkpoint", required=True, help="checkpoint file")
    ins.add_argument("--config",
                     help="config JSON (default: config.json next to the checkpoint)")
    ins.add_argument("--scene-seed", type=int, default=0, help="scene stream seed")
    ins.add_argument("--scene-index", type=int, default=0, help="scene index")
    ins.add_argument("--out", required=True, help="output directory for images")
    return parser


def _load_config(arg: str):
    from .training import TrainConfig
    if arg == "default":
        return TrainConfig()
    return TrainConfig.from_file(arg)


def _apply_overrides(config, args):
    from .training import GamSpec, TeacherSpec
    updates = {}
    for name in ("seed", "epochs", "batch_size", "image_size", "lr",
                 "optimizer", "static_lambda", "strategy", "projector",
                 "eval_scenes"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if args.steps_per_epoch is not None:
        updates["steps_per_epoch"] = args.steps_per_epoch
    if args.align_loss is not None:
        updates["align_loss"] = args.align_loss
    if args.levels is not None:
        updates["strategy_levels"] = tuple(
            lv.strip().upper() for lv in args.levels.split(",") if lv.strip())
    gam = config.gam
    if args.gam is not None:
        gam = dataclasses.replace(gam, enabled=args.gam == "on")
    for name in ("rho", "delta", "lambda0"):
        value = getattr(args, name)
        if value is not None:
            gam = dataclasses.replace(gam, **{name: value})
    if gam != config.gam:
        updates["gam"] = gam
    teacher = config.teacher
    if args.teacher_file is not None:
        teacher = TeacherSpec(kind="file", seed=teacher.seed,
                              path=args.teacher_file)
    elif args.teacher_seed is not None:
        teacher = dataclasses.replace(teacher, seed=args.teacher_seed)
    if teacher != config.teacher:
        updates["teacher"] = teacher
    return dataclasses.replace(config, **updates).validate()


def _cmd_train(args) -> int:
    from .training import run_training
    config = _apply_overrides(_load_config(args.config), args)
    log = None if args.quiet else (lambda msg: print(msg))
    summary = run_training(config, Path(args.out), log=log)
    final = summary["final"]
    align = final["align_score"]
    print(f"done: det_score={final['det_score']:.4f} "
          f"align_score={'n/a' if align is None else f'{align:.4f}'} "
          f"(summary: {Path(args.out) / 'summary.json'})")
    return EXIT_OK


def _resolve_run_config(args):
    from .training import TrainConfig
    if args.config:
        return TrainConfig.from_file(args.config)
    sibling = Path(args.checkpoint).parent / "config.json"
    if not sibling.exists():
        raise BadConfig(f"no --config given and {sibling} does not exist")
    return TrainConfig.from_file(sibling)


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .training import TrainingSession
    config = _resolve_run_config(args)
    session = TrainingSession(config)
    digest = load_checkpoint(args.checkpoint, session.model.registry)
    if digest not in ("none", config.digest()):
        print(f"warning: checkpoint config digest {digest[:12]} does not match "
              f"the supplied config", file=sys.stderr)
    if args.scenes is not None:
        config = dataclasses.replace(config, eval_scenes=args.scenes)
        session.config = config
    result = session.evaluate_now()
    align = result.align_score
    print(f"det_score={result.det_score:.4f} "
          f"align_score={'n/a' if align is None else f'{align:.4f}'}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    rows = full_report(seeds=range(args.seeds), eps=args.eps)
    width = max(len(name) for name, _ in rows)
    print(f"{'op':{width}s}  max rel err")
    failures = []
    for name, err in rows:
        flag = "" if err < TOLERANCE else "  FAIL"
        print(f"{name:{width}s}  {err:.3e}{flag}")
        if err >= TOLERANCE:
            failures.append(name)
    if failures:
        print(f"FAIL: {', '.join(failures)} over tolerance {TOLERANCE:g}")
        return EXIT_VALIDATION
    print(f"PASS: {len(rows)} checks within {TOLERANCE:g}")
    return EXIT_OK


def _cmd_gamsim(args) -> int:
    config = GamConfig(rho=args.rho, delta=args.delta, lambda0=args.lambda0)
    plant = Plant(a=args.plant_a, b=args.plant_b, noise=args.noise,
                  seed=args.noise_seed)
    trajectory = closed_loop_sim(plant, config, args.epochs)
    if args.out:
        write_trajectory_csv(args.out, trajectory)
    entry = epochs_to_band(trajectory, config)
    residence = band_residence(trajectory, config)
    print(f"epochs-to-band: {'never' if entry is None else entry}")
    print(f"band-residence after entry: {residence:.3f}")
    if args.out:
        print(f"trajectory: {args.out}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    from .checkpoint import load_checkpoint
    from .scenes import generate_scene
    from .tensor import no_grad
    from .training import TrainingSession
    from .visualize import image_to_rgb, pca_rgb, write_ppm

    config = _resolve_run_config(args)
    session = TrainingSession(config)
    load_checkpoint(args.checkpoint, session.model.registry)
    scene = generate_scene(args.scene_seed, args.scene_index, config.image_size)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with no_grad():
        feats = session.model.features(scene.image[None])
        p3, p4, p5 = session.model.fusion(feats.f5, feats.s4, feats.s3)
    write_ppm(out_dir / "input.ppm", image_to_rgb(scene.image))
    for name, tensor in (("f5", feats.f5), ("p3", p3), ("p4", p4), ("p5", p5)):
        write_ppm(out_dir / f"{name}.ppm", pca_rgb(tensor.data[0]))
    print(f"wrote input.ppm, f5.ppm, p3.ppm, p4.ppm, p5.ppm to {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"train": _cmd_train, "eval": _cmd_eval,
                   "grad-check": _cmd_gradcheck, "gam-sim": _cmd_gamsim,
                   "inspect-features": _cmd_inspect}[args.command]
        return handler(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonFinite as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IoError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GradAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
