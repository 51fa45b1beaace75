"""The `sdzero` command: ten subcommands covering the whole pipeline from
task generation to analysis, all driven by one JSON config file.

Exit codes: 0 ok, 2 config error, 3 missing input, 4 numeric divergence,
5 guard violation (phase order, gold access, directory lock).

The only environment variable honored is SDZERO_THREADS, which caps the
numeric libraries' global thread count; it must be applied before numpy is
first imported, which is why the heavy imports live inside main().
"""

from __future__ import annotations

import argparse
import os
import sys

THREAD_ENV = "SDZERO_THREADS"
_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_NUMERIC = 4
EXIT_GUARD = 5

COMMANDS = (
    "gen-tasks",
    "pretrain",
    "collect",
    "train-srt",
    "distill",
    "train-baseline",
    "eval",
    "revise-eval",
    "analyze",
    "ledger",
)


def _apply_thread_env() -> str | None:
    raw = os.environ.get(THREAD_ENV)
    if raw is None:
        return None
    if not raw.isdigit() or int(raw) < 1:
        return f"{THREAD_ENV} must be a positive integer, got {raw!r}"
    for var in _BLAS_VARS:
        os.environ[var] = raw
    return None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the run config JSON")
    common.add_argument("--out", default=None, help="run directory (overrides out_dir)")
    common.add_argument("--seed", type=int, default=None, help="override the global seed")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key, e.g. data.srt_frac=0.4",
    )

    parser = argparse.ArgumentParser(prog="sdzero", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-tasks", parents=[common], help="materialize the instance blocks")
    gen.add_argument("--srt-frac", type=float, default=None, help="phase-1 share of the train split")

    sub.add_parser("pretrain", parents=[common], help="train the base model into the accuracy band")
    sub.add_parser("collect", parents=[common], help="gather filtered self-revision traces")

    srt = sub.add_parser("train-srt", parents=[common], help="revision training on the traces")
    srt.add_argument("--no-revision-loss", action="store_true", help="ablation: generation term only")
    srt.add_argument("--no-generation-loss", action="store_true", help="ablation: revision term only")

    dis = sub.add_parser("distill", parents=[common], help="on-policy self-distillation")
    dis.add_argument("--teacher", default=None, help="teacher checkpoint (default: srt.ckpt)")
    dis.add_argument("--student", default=None, help="student start (default: the teacher)")
    dis.add_argument(
        "--allow-untrained-teacher",
        action="store_true",
        help="permit a non-revision-trained teacher (phase-2-only ablation)",
    )
    dis.add_argument("--sync-period", type=int, default=None, help="teacher sync period in epochs")
    dis.add_argument("--top-k", type=int, default=None, help="teacher atoms kept per position")

    bas = sub.add_parser("train-baseline", parents=[common], help="train a comparison baseline")
    bas.add_argument("--baseline", choices=("sft", "rft", "sdft-lite"), default=None)

    ev = sub.add_parser("eval", parents=[common], help="accuracy report for one checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--label", default=None)
    ev.add_argument("--k", type=int, default=None, help="rollouts per instance")

    rev = sub.add_parser("revise-eval", parents=[common], help="generate-then-revise report")
    rev.add_argument("--checkpoint", required=True)
    rev.add_argument("--label", default=None)

    sub.add_parser("analyze", parents=[common], help="KL buckets, Gini, length/keyword curve")
    sub.add_parser("ledger", parents=[common], help="budget report, reference and actual")
    return parser


def main(argv: list[str] | None = None) -> int:
    env_error = _apply_thread_env()
    if env_error:
        print(f"error: {env_error}", file=sys.stderr)
        return EXIT_CONFIG

    args = build_parser().parse_args(argv)

    from pathlib import Path

    from ..autodiff import NumericOverflowError
    from ..tasks import GoldAccessError
    from ..training import PretrainBandError
    from . import pipeline
    from .config import ConfigError, load_config
    from .manifest import ManifestError

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "srt_frac", None) is not None:
        overrides.append(f"data.srt_frac={args.srt_frac}")
    if getattr(args, "no_revision_loss", False):
        overrides.append("srt.use_revision_loss=false")
    if getattr(args, "no_generation_loss", False):
        overrides.append("srt.use_generation_loss=false")
    if getattr(args, "sync_period", None) is not None:
        overrides.append(f"distill.sync_period_epochs={args.sync_period}")
    if getattr(args, "top_k", None) is not None:
        overrides.append(f"distill.top_k={args.top_k}")
    if getattr(args, "k", None) is not None:
        overrides.append(f"eval.k={args.k}")

    try:
        cfg = load_config(args.config, overrides)
        run_dir = Path(args.out) if args.out else Path(cfg.out_dir)
        if args.command == "gen-tasks":
            outputs = pipeline.run_gen_tasks(cfg, run_dir)
        elif args.command == "pretrain":
            outputs = pipeline.run_pretrain(cfg, run_dir)
        elif args.command == "collect":
            outputs = pipeline.run_collect(cfg, run_dir)
        elif args.command == "train-srt":
            outputs = pipeline.run_train_srt(cfg, run_dir)
        elif args.command == "distill":
            outputs = pipeline.run_distill(
                cfg,
                run_dir,
                teacher_path=args.teacher,
                student_path=args.student,
                allow_untrained_teacher=args.allow_untrained_teacher,
            )
        elif args.command == "train-baseline":
            outputs = pipeline.run_baseline(cfg, run_dir, selector=args.baseline)
        elif args.command == "eval":
            outputs = pipeline.run_eval(cfg, run_dir, args.checkpoint, label=args.label)
        elif args.command == "revise-eval":
            outputs = pipeline.run_revise_eval(cfg, run_dir, args.checkpoint, label=args.label)
        elif args.command == "analyze":
            outputs = pipeline.run_analyze(cfg, run_dir)
        else:  # ledger
            out, text = pipeline.run_ledger(cfg, run_dir)
            print(text)
            outputs = [out]
    except (ConfigError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.MissingInputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (NumericOverflowError, PretrainBandError, pipeline.EmptyStageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.PhaseOrderError, pipeline.LockHeldError, GoldAccessError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_GUARD
    for path in outputs:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
