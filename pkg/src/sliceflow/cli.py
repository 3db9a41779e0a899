"""Command-line entry point: phantom generation, training, generation, evaluation.

Every numeric experiment knob lives in a JSON run config; flags override the
config. Exit codes: 0 success, 1 usage error, 2 runtime/divergence error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluate import (
    condition,
    dense_sweep,
    evaluate_dataset,
    model_slice_stack,
    motion_experiment,
)
from .plots import save_loss_curve, save_ssim_curves
from .training import (
    CheckpointError,
    DivergenceError,
    ModelConfig,
    load_checkpoint,
    train,
)
from .volumes import (
    PhantomSpec,
    VolumeIOError,
    generate_phantom,
    load_volume,
    load_volume_dir,
    save_volume,
    write_pgm,
)


class UsageError(ValueError):
    """Bad flag values; maps to exit code 1."""


@dataclass
class EvalConfig:
    context_counts: list = field(default_factory=lambda: [0, 1, 2, 4])
    samples: int = 32
    mode: str = "average"

    def to_dict(self) -> dict:
        return {"context_counts": list(self.context_counts), "samples": self.samples, "mode": self.mode}

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown evaluation config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class DataConfig:
    train_dir: str | None = None
    val_dir: str | None = None

    def to_dict(self) -> dict:
        return {"train_dir": self.train_dir, "val_dir": self.val_dir}

    @classmethod
    def from_dict(cls, doc: dict) -> "DataConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class RunConfig:
    """JSON-backed experiment recipe: model + data paths + evaluation schedule."""

    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "evaluation": self.evaluation.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {"model", "data", "evaluation"}
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(
            model=ModelConfig.from_dict(doc.get("model", {})),
            data=DataConfig.from_dict(doc.get("data", {})),
            evaluation=EvalConfig.from_dict(doc.get("evaluation", {})),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc)


def _parse_int_list(text: str, what: str) -> list:
    if text.strip() == "":
        return []
    try:
        return [int(tok) for tok in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"invalid {what} {text!r}: expected comma-separated integers") from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    shape = _parse_int_list(args.shape, "--shape")
    if len(shape) != 3 or any(s < 4 for s in shape):
        raise UsageError(f"--shape must be three voxel counts >= 4, got {args.shape!r}")
    base = {}
    if args.spec is not None:
        base = json.loads(Path(args.spec).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        doc = dict(base)
        doc.update(shape=tuple(shape), seed=args.seed + i, subject_id=f"phantom-{i:04d}")
        vol = generate_phantom(PhantomSpec.from_dict(doc))
        save_volume(vol, out / f"phantom-{i:04d}.vol")
    print(f"wrote {args.count} volumes of shape {tuple(shape)} to {out}")
    return 0


def cmd_train(args) -> int:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.data:
        run.data.train_dir = args.data
    if args.val_data:
        run.data.val_dir = args.val_data
    if args.seed is not None:
        run.model.seed = args.seed
    if run.data.train_dir is None:
        raise UsageError("no training data: pass --data or set data.train_dir in the config")

    volumes = load_volume_dir(run.data.train_dir)
    val = load_volume_dir(run.data.val_dir) if run.data.val_dir else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=1) + "\n")

    def progress(epoch, train_nll, val_nll):
        msg = f"epoch {epoch}/{run.model.epochs}  train_nll={train_nll:.4f}"
        if val_nll is not None:
            msg += f"  val_nll={val_nll:.4f}"
        print(msg, flush=True)

    model, history = train(
        volumes,
        run.model,
        out_dir=out,
        val_volumes=val,
        resume_from=args.resume,
        progress=progress,
    )
    history.write_csv(out / "loss.csv")
    save_loss_curve(history, out / "loss_curve.png")
    print(f"checkpoint: {out / 'model.brnc'}")
    print(f"loss curve: {out / 'loss.csv'}")
    return 0


def cmd_generate(args) -> int:
    model = load_checkpoint(args.model)
    k_total = model.config.slices_per_volume
    context_ids = _parse_int_list(args.contexts, "--contexts")
    bad = [k for k in context_ids if not 0 <= k < k_total]
    if bad:
        raise UsageError(f"context indices {bad} outside [0, {k_total})")
    if context_ids and not args.subject:
        raise UsageError("--subject is required when context slices are given")

    if context_ids:
        vol = load_volume(args.subject)
        stack = model_slice_stack(model, vol)
        contexts = [stack[k] for k in context_ids]
    else:
        contexts = []

    cm = condition(model, contexts)
    rng = np.random.default_rng(args.seed)
    generated = dense_sweep(cm, n_samples=args.samples, mode=args.mode, rng=rng)
    generated.subject_id = "atlas" if not context_ids else f"generated-{Path(args.subject).stem}"

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(generated, out / "generated.vol")
    print(f"generated volume ({generated.data.shape[0]} slices, contexts={context_ids}): "
          f"{out / 'generated.vol'}")
    if args.pgm:
        for k in range(generated.data.shape[0]):
            write_pgm(generated.data[k], out / f"slice_{k:03d}.pgm")
        print(f"slice images: {out}/slice_*.pgm")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    volumes = load_volume_dir(args.data)
    counts = _parse_int_list(args.contexts_counts, "--contexts-counts")
    if not counts:
        raise UsageError("--contexts-counts must name at least one context count")

    report = evaluate_dataset(
        model,
        volumes,
        counts,
        n_samples=args.samples,
        mode=args.mode,
        seed=args.seed,
        jobs=args.jobs,
    )
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    report.write_summary_csv(out / "summary.csv")
    report.write_curve_csvs(out)
    save_ssim_curves(report, out)

    print("contexts  mean_ssim  mean_cc")
    for n, s, c in report.dataset_rows:
        print(f"{n:8d}  {s:9.4f}  {c:7.4f}")

    if args.motion is not None:
        rows = [
            motion_experiment(model, vol, args.motion, n_samples=args.samples, seed=args.seed)
            for vol in volumes
        ]
        lines = ["subject,n_contexts,max_translation,ssim_generated,ssim_motion_average"]
        lines += [
            f"{r.subject},{r.n_contexts},{r.max_translation},{r.ssim_generated:.6f},{r.ssim_motion_average:.6f}"
            for r in rows
        ]
        (out / "motion.csv").write_text("\n".join(lines) + "\n")
        wins = sum(r.ssim_generated > r.ssim_motion_average for r in rows)
        print(f"motion comparison: generated beats corrupted average on {wins}/{len(rows)} subjects")
    print(f"report: {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="sliceflow", description=__doc__)
    parser.add_argument("--print-config", action="store_true",
                        help="print the default run config as JSON and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate synthetic test-pattern volumes")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--shape", default="32,32,32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default=None, help="JSON file with phantom spec overrides")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a model on a directory of .vol volumes")
    p.add_argument("--data", default=None)
    p.add_argument("--config", default=None, help="run config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="dense-sweep a volume from context slices")
    p.add_argument("--model", required=True)
    p.add_argument("--contexts", default="", help='comma-separated slice indices; "" for the prior')
    p.add_argument("--subject", default=None, help=".vol file providing the context slices")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--mode", default="average", choices=["sample", "average", "mean-latent"])
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", action="store_true", help="also write per-slice PGM images")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score generated volumes against ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--contexts-counts", dest="contexts_counts", default="0,1,2,4")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--mode", default="average", choices=["sample", "average", "mean-latent"])
    p.add_argument("--report", required=True)
    p.add_argument("--motion", type=int, default=None,
                   help="also run the motion comparison with this max translation (voxels)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        print(json.dumps(RunConfig().to_dict(), indent=1))
        return 0
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sliceflow: error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"sliceflow: training diverged: {exc}", file=sys.stderr)
        return 2
    except (VolumeIOError, CheckpointError, ValueError, OSError, FloatingPointError) as exc:
        print(f"sliceflow: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
