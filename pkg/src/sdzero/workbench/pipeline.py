"""Stage implementations behind the CLI: each function runs one command
against a run directory, enforcing the run's identity, the directory lock,
and phase ordering, and recording a manifest entry for what it did.

Persisted metrics leave the wall-clock column blank: timing is printed to
the console instead of written to disk, so a re-run of the same seed
reproduces every output file byte for byte.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from pathlib import Path

from ..checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ..decoding import SamplerConfig
from ..distill import DistillConfig, distill_run, write_kl_records
from ..evalkit import (
    bucketize_kl,
    evaluate,
    generate_then_revise,
    kl_gini_by_reward,
    length_and_keyword_curve,
    write_bucket_csv,
    write_curve_csv,
    write_eval_csv,
    write_revise_csv,
)
from ..model import ModelConfig, init_params
from ..optim import AdamWConfig, Schedule
from ..revision import (
    CollectConfig,
    budget_report,
    collect_traces,
    read_traces,
    write_ledger_csv,
    write_traces,
)
from ..seeding import derive_seed
from ..tasks import TaskPool, gen_instance, read_instances, write_instances
from ..training import (
    PretrainConfig,
    TrainConfig,
    pretrain_base,
    rft_dataset,
    sft_dataset,
    steps_per_epoch,
    train_revision,
    train_supervised,
    write_metrics_csv,
)
from ..vocab import vocab
from .config import RunConfig, config_hash, config_json, from_dict, identity_dict
from .manifest import record_entry

BLOCKS = ("pretrain", "srt", "distill", "eval", "probe")

CONFIG_FILE = "config.json"
LOCK_FILE = "LOCK"
BASE_CKPT = "base.ckpt"
SRT_CKPT = "srt.ckpt"
DISTILLED_CKPT = "distilled.ckpt"
TRACES_FILE = "traces.jsonl"
KL_RECORDS_FILE = "kl_records.jsonl"


class PhaseOrderError(RuntimeError):
    """A command ran before the stage that produces its inputs."""


class LockHeldError(RuntimeError):
    """The run directory is claimed by another process."""


class MissingInputError(FileNotFoundError):
    """A referenced artifact does not exist."""


class EmptyStageError(RuntimeError):
    """A stage produced no usable data, so downstream training is undefined."""


@contextmanager
def run_lock(run_dir):
    """Exclusive marker file; concurrent commands must use distinct
    directories."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeldError(
            f"{lock}: run directory is locked by another command "
            "(remove the file if that process is gone)"
        ) from None
    try:
        os.write(fd, f"pid {os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(run_dir: Path, name: str, hint: str) -> Path:
    path = run_dir / name
    if not path.exists():
        raise MissingInputError(f"{path}: missing input ({hint})")
    return path


def check_identity(cfg: RunConfig, run_dir) -> Path:
    """The stored config defines the run's identity (seed, task, data,
    model); a command under different identity values must not proceed."""
    import json

    stored_path = _require(Path(run_dir), CONFIG_FILE, "run gen-tasks first")
    stored = from_dict(json.loads(stored_path.read_text()))
    if identity_dict(stored) != identity_dict(cfg):
        raise PhaseOrderError(
            f"{stored_path}: run directory was generated under a different "
            "seed/task/data/model configuration"
        )
    return stored_path


# ---- instance blocks ----


def block_ranges(cfg: RunConfig) -> dict[str, range]:
    """Disjoint instance-seed ranges, one contiguous block per pool. The
    whole band is offset by a run-seed derivation so different run seeds see
    different instances, while blocks within a run can never overlap."""
    start = derive_seed(cfg.seed, "instance-band") % (1 << 48)
    sizes = [
        ("pretrain", cfg.data.n_pretrain),
        ("srt", cfg.data.n_srt),
        ("distill", cfg.data.n_distill),
        ("eval", cfg.data.n_eval),
        ("probe", cfg.data.n_probe),
    ]
    out = {}
    cursor = start
    for name, size in sizes:
        out[name] = range(cursor, cursor + size)
        cursor += size
    return out


def build_pool(cfg: RunConfig, block: str, allow_gold: bool = False) -> TaskPool:
    seeds = block_ranges(cfg)[block]
    instances = [gen_instance(cfg.task.kind, cfg.task.difficulty, s) for s in seeds]
    return TaskPool(block, instances, allow_gold=allow_gold)


def load_pool(cfg: RunConfig, run_dir, block: str, allow_gold: bool = False) -> TaskPool:
    path = _require(Path(run_dir), f"tasks/{block}.jsonl", "run gen-tasks first")
    return TaskPool(block, read_instances(path), allow_gold=allow_gold)


# ---- section adapters ----


def _sampler(section) -> SamplerConfig:
    return SamplerConfig(
        temperature=section.temperature, max_new_tokens=section.max_new_tokens
    )


def _schedule(section, total_steps: int) -> Schedule:
    from .config import ConfigError

    try:
        return Schedule(
            kind=section.schedule,
            peak_lr=section.peak_lr,
            warmup_steps=section.warmup_steps,
            total_steps=total_steps,
        )
    except ValueError as e:
        raise ConfigError(f"schedule over {total_steps} steps: {e}") from e


_OPTIMIZER = AdamWConfig(weight_decay=1e-4)


def _train_config(section, n_items: int, seed: int, **toggles) -> TrainConfig:
    total = section.epochs * steps_per_epoch(n_items, section.batch_size)
    return TrainConfig(
        epochs=section.epochs,
        batch_size=section.batch_size,
        schedule=_schedule(section, total),
        optimizer=_OPTIMIZER,
        seed=seed,
        **toggles,
    )


def _persist_metrics(path, rows) -> None:
    # wall_ms stays blank on disk; see module docstring
    write_metrics_csv(path, [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows])


def _model_config(cfg: RunConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        vocab_size=vocab().size,
        context=m.context,
        dim=m.dim,
        heads=m.heads,
        layers=m.layers,
    )


# ---- stages ----


def run_gen_tasks(cfg: RunConfig, run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        stored = run_dir / CONFIG_FILE
        if stored.exists():
            check_identity(cfg, run_dir)
        stored.write_text(config_json(cfg))
        (run_dir / "tasks").mkdir(exist_ok=True)
        outputs = [stored]
        for block in BLOCKS:
            pool = build_pool(cfg, block, allow_gold=True)
            path = run_dir / "tasks" / f"{block}.jsonl"
            write_instances(path, pool.instances)
            outputs.append(path)
        record_entry(run_dir, "gen-tasks", config_hash(cfg), cfg.seed, [], outputs)
    return outputs


def run_pretrain(cfg: RunConfig, run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        check_identity(cfg, run_dir)
        train_pool = load_pool(cfg, run_dir, "pretrain", allow_gold=True)
        band_pool = load_pool(cfg, run_dir, "probe")
        p = cfg.pretrain
        pcfg = PretrainConfig(
            max_steps=p.max_steps,
            batch_size=p.batch_size,
            schedule=_schedule(p, p.max_steps),
            optimizer=_OPTIMIZER,
            seed=derive_seed(cfg.seed, "stage-pretrain"),
            eval_every=p.eval_every,
            eval_replicates=p.eval_replicates,
            eval_temperature=p.temperature,
            eval_max_new_tokens=p.max_new_tokens,
            band_low=p.band_low,
            band_high=p.band_high,
            retry_fraction=p.retry_fraction,
        )
        start = Checkpoint(
            config=_model_config(cfg),
            params=init_params(_model_config(cfg), derive_seed(cfg.seed, "init")),
            phase="init",
        )
        result = pretrain_base(start, train_pool, band_pool, pcfg)
        ckpt_path = run_dir / BASE_CKPT
        save_checkpoint(result.checkpoint, ckpt_path)
        metrics_path = run_dir / "pretrain_metrics.csv"
        _persist_metrics(metrics_path, result.metrics)
        inputs = [run_dir / "tasks/pretrain.jsonl", run_dir / "tasks/probe.jsonl"]
        outputs = [ckpt_path, metrics_path]
        record_entry(run_dir, "pretrain", config_hash(cfg), cfg.seed, inputs, outputs)
    return outputs


def run_collect(cfg: RunConfig, run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        check_identity(cfg, run_dir)
        ckpt_path = _require(run_dir, BASE_CKPT, "run pretrain first")
        ckpt = load_checkpoint(ckpt_path)
        pool = load_pool(cfg, run_dir, "srt")
        c = cfg.collect
        ccfg = CollectConfig(
            attempts_per_initial=c.attempts_per_initial,
            keep_per_initial=c.keep_per_initial,
            temperature=c.temperature,
            max_new_tokens=c.max_new_tokens,
        )
        result = collect_traces(ckpt, pool, ccfg, derive_seed(cfg.seed, "stage-collect"))
        traces_path = run_dir / TRACES_FILE
        write_traces(traces_path, result.traces)
        ledger_path = run_dir / "collect_ledger.csv"
        write_ledger_csv(ledger_path, result.ledger)
        inputs = [ckpt_path, run_dir / "tasks/srt.jsonl"]
        outputs = [traces_path, ledger_path]
        record_entry(run_dir, "collect", config_hash(cfg), cfg.seed, inputs, outputs)
    return outputs


def run_train_srt(cfg: RunConfig, run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        check_identity(cfg, run_dir)
        ckpt_path = _require(run_dir, BASE_CKPT, "run pretrain first")
        traces_path = _require(run_dir, TRACES_FILE, "run collect first")
        ckpt = load_checkpoint(ckpt_path)
        traces = read_traces(traces_path)
        if not traces:
            raise EmptyStageError(f"{traces_path}: no traces survived filtering")
        s = cfg.srt
        tcfg = _train_config(
            s,
            len(traces),
            derive_seed(cfg.seed, "stage-srt"),
            use_revision_loss=s.use_revision_loss,
            use_generation_loss=s.use_generation_loss,
        )
        result = train_revision(ckpt, traces, tcfg)
        out_ckpt = run_dir / SRT_CKPT
        save_checkpoint(result.checkpoint, out_ckpt)
        metrics_path = run_dir / "srt_metrics.csv"
        _persist_metrics(metrics_path, result.metrics)
        record_entry(
            run_dir,
            "train-srt",
            config_hash(cfg),
            cfg.seed,
            [ckpt_path, traces_path],
            [out_ckpt, metrics_path],
        )
    return [out_ckpt, metrics_path]


def run_distill(
    cfg: RunConfig,
    run_dir,
    teacher_path=None,
    student_path=None,
    allow_untrained_teacher: bool = False,
) -> list[Path]:
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        check_identity(cfg, run_dir)
        teacher_path = (
            Path(teacher_path) if teacher_path else _require(run_dir, SRT_CKPT, "run train-srt first")
        )
        if not teacher_path.exists():
            raise MissingInputError(f"{teacher_path}: missing teacher checkpoint")
        teacher = load_checkpoint(teacher_path)
        if teacher.phase != "srt" and not allow_untrained_teacher:
            raise PhaseOrderError(
                f"{teacher_path}: teacher phase is {teacher.phase!r}, not 'srt'; "
                "pass --allow-untrained-teacher for the phase-2-only ablation"
            )
        if student_path:
            student_path = Path(student_path)
            if not student_path.exists():
                raise MissingInputError(f"{student_path}: missing student checkpoint")
            student = load_checkpoint(student_path)
        else:
            student_path = teacher_path
            student = teacher
        pool = load_pool(cfg, run_dir, "distill")
        d = cfg.distill
        total = d.epochs * steps_per_epoch(len(pool), d.batch_size)
        dcfg = DistillConfig(
            epochs=d.epochs,
            batch_size=d.batch_size,
            schedule=_schedule(d, total),
            optimizer=_OPTIMIZER,
            top_k=d.top_k,
            kl_temperature=d.kl_temperature,
            rollout_temperature=d.rollout_temperature,
            max_new_tokens=d.max_new_tokens,
            reverse_kl=d.reverse_kl,
            sync_period_epochs=d.sync_period_epochs,
            seed=derive_seed(cfg.seed, "stage-distill"),
        )
        result = distill_run(student, teacher, pool, dcfg, derive_seed(cfg.seed, "stage-distill"))
        out_ckpt = run_dir / DISTILLED_CKPT
        save_checkpoint(result.checkpoint, out_ckpt)
        metrics_path = run_dir / "distill_metrics.csv"
        _persist_metrics(metrics_path, result.metrics)
        ledger_path = run_dir / "distill_ledger.csv"
        write_ledger_csv(ledger_path, result.ledger)
        records_path = run_dir / KL_RECORDS_FILE
        write_kl_records(records_path, result.records)
        inputs = [teacher_path, student_path, run_dir / "tasks/distill.jsonl"]
        outputs = [out_ckpt, metrics_path, ledger_path, records_path]
        record_entry(
            run_dir,
            "distill",
            config_hash(cfg),
            cfg.seed,
            sorted(set(inputs)),
            outputs,
            extra={"allow_untrained_teacher": allow_untrained_teacher},
        )
    return outputs


def run_baseline(cfg: RunConfig, run_dir, selector: str | None = None) -> list[Path]:
    from .config import BASELINES, ConfigError

    sel = selector or cfg.baseline.selector
    if sel not in BASELINES or sel == "none":
        raise ConfigError(f"train-baseline needs a selector in {BASELINES[:-1]}, got {sel!r}")
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        check_identity(cfg, run_dir)
        ckpt_path = _require(run_dir, BASE_CKPT, "run pretrain first")
        base = load_checkpoint(ckpt_path)
        b = cfg.baseline
        seed = derive_seed(cfg.seed, "stage-baseline", sel)
        # baselines see the whole train split; gold access only where the
        # method is supervised by construction
        gold = sel in ("sft", "sdft-lite")
        instances = (
            load_pool(cfg, run_dir, "srt").instances
            + load_pool(cfg, run_dir, "distill").instances
        )
        pool = TaskPool("train", instances, allow_gold=gold)
        metrics_path = run_dir / f"baseline_{sel}_metrics.csv"
        out_ckpt = run_dir / f"baseline_{sel}.ckpt"
        outputs = [out_ckpt, metrics_path]
        ledger = None
        if sel == "sft":
            examples = sft_dataset(pool)
            result = train_supervised(base, examples, _train_config(b, len(examples), seed), "sft")
        elif sel == "rft":
            examples, ledger = rft_dataset(
                base, pool, b.rft_replicates, _sampler(cfg.collect), seed
            )
            if not examples:
                raise EmptyStageError("rejection sampling kept no correct rollouts")
            result = train_supervised(base, examples, _train_config(b, len(examples), seed), "rft")
        else:  # sdft-lite: self-teacher conditioned on the gold demonstration
            total = b.epochs * steps_per_epoch(len(pool), b.batch_size)
            dcfg = DistillConfig(
                epochs=b.epochs,
                batch_size=b.batch_size,
                schedule=_schedule(b, total),
                optimizer=_OPTIMIZER,
                top_k=cfg.distill.top_k,
                kl_temperature=cfg.distill.kl_temperature,
                rollout_temperature=cfg.distill.rollout_temperature,
                max_new_tokens=cfg.distill.max_new_tokens,
                teacher_mode="self",
                guide="gold",
                sync_period_epochs=0,
                seed=seed,
            )
            result = distill_run(base, None, pool, dcfg, seed)
            ledger = result.ledger
        save_checkpoint(result.checkpoint, out_ckpt)
        _persist_metrics(metrics_path, result.metrics)
        if ledger is not None:
            ledger_path = run_dir / f"baseline_{sel}_ledger.csv"
            write_ledger_csv(ledger_path, ledger)
            outputs.append(ledger_path)
        inputs = [ckpt_path, run_dir / "tasks/srt.jsonl", run_dir / "tasks/distill.jsonl"]
        record_entry(
            run_dir,
            f"train-baseline-{sel}",
            config_hash(cfg),
            cfg.seed,
            inputs,
            outputs,
        )
    return outputs


def _label_for(label: str | None, ckpt: Checkpoint) -> str:
    from .config import ConfigError

    name = label or ckpt.phase
    if not name or not all(c.isalnum() or c in "-_" for c in name):
        raise ConfigError(f"label {name!r} must be alphanumeric with - or _")
    return name


def run_eval(cfg: RunConfig, run_dir, ckpt_path, label: str | None = None) -> list[Path]:
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        check_identity(cfg, run_dir)
        ckpt_path = Path(ckpt_path)
        if not ckpt_path.exists():
            raise MissingInputError(f"{ckpt_path}: missing checkpoint")
        ckpt = load_checkpoint(ckpt_path)
        name = _label_for(label, ckpt)
        pool = load_pool(cfg, run_dir, "eval")
        # one shared seed so every checkpoint faces identical draws
        report, _ = evaluate(
            ckpt, pool, cfg.eval.k, _sampler(cfg.eval), derive_seed(cfg.seed, "stage-eval")
        )
        out = run_dir / f"eval_{name}.csv"
        write_eval_csv(out, report)
        record_entry(
            run_dir,
            f"eval-{name}",
            config_hash(cfg),
            cfg.seed,
            [ckpt_path, run_dir / "tasks/eval.jsonl"],
            [out],
        )
    return [out]


def run_revise_eval(cfg: RunConfig, run_dir, ckpt_path, label: str | None = None) -> list[Path]:
    run_dir = Path(run_dir)
    with run_lock(run_dir):
        check_identity(cfg, run_dir)
        ckpt_path = Path(ckpt_path)
        if not ckpt_path.exists():
            raise MissingInputError(f"{ckpt_path}: missing checkpoint")
        ckpt = load_checkpoint(ckpt_path)
        name = _label_for(label, ckpt)
        pool = load_pool(cfg, run_dir, "eval")
        report, _ = generate_then_revise(
            ckpt, pool, _sampler(cfg.eval), derive_seed(cfg.seed, "stage-revise-eval")
        )
        out = run_dir / f"revise_{name}.csv"
        write_revise_csv(out, report)
        record_entry(
            run_dir,
            f"revise-eval-{name}",
            config_hash(cfg),
            cfg.seed,
            [ckpt_path, run_dir / "tasks/eval.jsonl"],
            [out],
        )
    return [out]


def run_analyze(cfg: RunConfig, run_dir) -> list[Path]:
    import csv

    from ..distill import read_kl_records

    run_dir = Path(run_dir)
    with run_lock(run_dir):
        check_identity(cfg, run_dir)
        records_path = _require(run_dir, KL_RECORDS_FILE, "run distill first")
        records = read_kl_records(records_path)
        if not records:
            raise EmptyStageError(f"{records_path}: no distillation records to analyze")
        out_dir = run_dir / "analysis"
        out_dir.mkdir(exist_ok=True)
        buckets_path = out_dir / "buckets.csv"
        write_bucket_csv(buckets_path, bucketize_kl(records))
        gini_path = out_dir / "gini.csv"
        with open(gini_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["reward_class", "mean_gini"])
            for reward, value in sorted(kl_gini_by_reward(records).items()):
                writer.writerow([reward, value])
        inputs = [records_path]
        outputs = [buckets_path, gini_path]
        stages = [
            ("base", run_dir / BASE_CKPT),
            ("srt", run_dir / SRT_CKPT),
            ("distilled", run_dir / DISTILLED_CKPT),
        ]
        present = [(name, path) for name, path in stages if path.exists()]
        if present:
            probe_pool = load_pool(cfg, run_dir, "probe")
            rows = length_and_keyword_curve(
                [(name, load_checkpoint(path)) for name, path in present],
                probe_pool,
                _sampler(cfg.eval),
                derive_seed(cfg.seed, "stage-analyze"),
            )
            curve_path = out_dir / "curve.csv"
            write_curve_csv(curve_path, rows)
            inputs += [path for _, path in present] + [run_dir / "tasks/probe.jsonl"]
            outputs.append(curve_path)
        record_entry(run_dir, "analyze", config_hash(cfg), cfg.seed, inputs, outputs)
    return outputs


def run_ledger(cfg: RunConfig, run_dir) -> tuple[Path, str]:
    """Reference generation budgets plus this run's actual ledger totals."""
    import csv

    run_dir = Path(run_dir)
    with run_lock(run_dir):
        check_identity(cfg, run_dir)
        rows = [("reference:" + k, v) for k, v in budget_report().items()]
        inputs = []
        for stage, fname in (
            ("collect", "collect_ledger.csv"),
            ("distill", "distill_ledger.csv"),
            ("baseline_rft", "baseline_rft_ledger.csv"),
            ("baseline_sdft-lite", "baseline_sdft-lite_ledger.csv"),
        ):
            path = run_dir / fname
            if not path.exists():
                continue
            with open(path, newline="") as f:
                values = {r["key"]: r["value"] for r in csv.DictReader(f)}
            rows.append((f"run:{stage}:training_generations", int(values["training_generations"])))
            inputs.append(path)
        out = run_dir / "ledger_report.csv"
        with open(out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["item", "generations"])
            writer.writerows(rows)
        record_entry(run_dir, "ledger", config_hash(cfg), cfg.seed, inputs, [out])
        text = "\n".join(f"{item},{value}" for item, value in rows)
    return out, text
