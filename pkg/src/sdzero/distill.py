"""On-policy self-distillation against a reviser teacher.

The student samples a response y for question x. The verifier grades it, and
the teacher (a frozen revision-trained model) reads
[x, y, SEP, control-phrase(reward), SEP, y] while the student reads [x, y];
both score the same target stream y (plus EOS when the rollout terminated).
Per target token the loss is KL(student || teacher) over the teacher's
top-K probability atoms plus one residual tail atom, with every atom log
clamped at log(1e-12). Teacher probabilities enter as constants, so no
gradient ever reaches the teacher. The opposite, teacher-weighted direction
is available behind an experimental flag.

A gold-guided variant conditions the teacher on [x, GOLD_SEP, gold, SEP, y]
instead; it needs a pool that permits gold access.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericOverflowError, Tensor
from .checkpoint import Checkpoint, clone_params, params_hash
from .decoding import SamplerConfig, sample_tokens
from .inference import InferenceSession
from .model import model_logits
from .optim import AdamWConfig, OptimizerState, Schedule, adamw_step, clip_grads_, lr_at
from .revision import BudgetLedger, control_prompt_tokens
from .seeding import derive_seed
from .tasks import TaskPool, verify
from .training import batch_order, steps_per_epoch, _collect_grads
from .vocab import vocab

LOG_EPS = 1e-12


def revision_guide(question_tokens: Sequence[int], response_tokens: Sequence[int], reward: int) -> list[int]:
    """Teacher prefix [x, y, SEP, phrase(reward), SEP] for the reviser teacher."""
    voc = vocab()
    return (
        list(question_tokens)
        + list(response_tokens)
        + [voc.sep]
        + control_prompt_tokens(reward)
        + [voc.sep]
    )


def gold_guide(question_tokens: Sequence[int], gold_tokens: Sequence[int]) -> list[int]:
    """Teacher prefix [x, GOLD_SEP, gold, SEP] for gold-guided distillation."""
    voc = vocab()
    return list(question_tokens) + [voc.gold_sep] + list(gold_tokens) + [voc.sep]


@dataclass(frozen=True)
class DistillAlignment:
    """Row-level pairing of one student sequence with its teacher sequence.

    targets[j] lives at student_rows[j] of the student forward pass and at
    teacher_rows[j] of the teacher forward pass; both rows score the same
    next token, so their distributions are directly comparable.
    """

    student_tokens: tuple[int, ...]
    teacher_tokens: tuple[int, ...]
    student_rows: tuple[int, ...]
    teacher_rows: tuple[int, ...]
    targets: tuple[int, ...]


def build_alignment(
    question_tokens: Sequence[int],
    response_tokens: Sequence[int],
    ended: bool,
    guide_tokens: Sequence[int],
    context: int,
) -> DistillAlignment | None:
    """Pair up rows, or None when either sequence overflows the context or
    there is nothing to score (empty truncated response)."""
    voc = vocab()
    x = list(question_tokens)
    y = list(response_tokens)
    if not x:
        raise ValueError("question tokens must be non-empty")
    targets = y + [voc.eos] if ended else list(y)
    if not targets:
        return None
    student_tokens = x + y
    teacher_tokens = list(guide_tokens) + y
    if len(student_tokens) > context or len(teacher_tokens) > context:
        return None
    n = len(targets)
    student_rows = tuple(range(len(x) - 1, len(x) - 1 + n))
    teacher_rows = tuple(range(len(guide_tokens) - 1, len(guide_tokens) - 1 + n))
    return DistillAlignment(
        student_tokens=tuple(student_tokens),
        teacher_tokens=tuple(teacher_tokens),
        student_rows=student_rows,
        teacher_rows=teacher_rows,
        targets=tuple(targets),
    )


def teacher_row_logits(teacher: Checkpoint, alignment: DistillAlignment) -> np.ndarray:
    """Teacher logits for the aligned rows, one plain forward pass, float64."""
    session = InferenceSession(teacher)
    logits = session.logits_all(list(alignment.teacher_tokens))
    return logits[np.asarray(alignment.teacher_rows)].astype(np.float64)


def teacher_atoms(
    teacher_logits: np.ndarray, k: int, temperature: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-K teacher probability atoms per row plus the residual tail mass.

    Selection is by descending probability with ties broken toward the lower
    token id, so it is deterministic. Returns (indices (n,k), probs (n,k),
    tail (n,)), computed in float64.
    """
    z = np.asarray(teacher_logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    q = np.exp(z)
    q /= q.sum(axis=-1, keepdims=True)
    n, v = q.shape
    if not 1 <= k <= v:
        raise ValueError(f"top-k must be in [1, {v}]")
    cols = np.arange(v)
    idx = np.empty((n, k), dtype=np.int64)
    for row in range(n):
        order = np.lexsort((cols, -q[row]))
        idx[row] = order[:k]
    q_top = np.take_along_axis(q, idx, axis=-1)
    tail = np.maximum(1.0 - q_top.sum(axis=-1), 0.0)
    return idx, q_top, tail


def _clamped_log(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, LOG_EPS))


def topk_kl_values(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    k: int,
    temperature: float = 1.0,
    reverse: bool = False,
) -> np.ndarray:
    """Reference implementation over plain arrays, one KL value per row (nats).

    Default direction is KL(student || teacher): the sum is weighted by the
    student's atom probabilities. The atom set is always chosen by the
    teacher; `reverse` flips to the teacher-weighted direction (experimental).
    """
    idx, q_top, q_tail = teacher_atoms(teacher_logits, k, temperature)
    zs = np.asarray(student_logits, dtype=np.float64) / temperature
    zs = zs - zs.max(axis=-1, keepdims=True)
    p = np.exp(zs)
    p /= p.sum(axis=-1, keepdims=True)
    p_top = np.take_along_axis(p, idx, axis=-1)
    p_tail = np.maximum(1.0 - p_top.sum(axis=-1), 0.0)
    q_atoms = np.concatenate([q_top, q_tail[:, None]], axis=-1)
    p_atoms = np.concatenate([p_top, p_tail[:, None]], axis=-1)
    if reverse:
        return (q_atoms * (_clamped_log(q_atoms) - _clamped_log(p_atoms))).sum(axis=-1)
    return (p_atoms * (_clamped_log(p_atoms) - _clamped_log(q_atoms))).sum(axis=-1)


def sequence_kl_loss(
    student_logits: Tensor,
    alignment: DistillAlignment,
    teacher_logits_rows: np.ndarray,
    k: int,
    temperature: float = 1.0,
    reverse: bool = False,
) -> Tensor:
    """Differentiable per-sequence loss: mean over target positions of the
    atom KL. The teacher side is plain data; only student terms carry grad.

    Default weights the log-ratio by the student's atom probabilities,
    KL(student || teacher); `reverse` weights by the teacher's instead.
    """
    idx, q_top, q_tail = teacher_atoms(teacher_logits_rows, k, temperature)
    dt = student_logits.data.dtype
    rows = ad.take_rows(student_logits, np.asarray(alignment.student_rows))
    lp = ad.log_softmax(rows * float(1.0 / temperature))
    p_top = ad.exp(ad.take_per_row(lp, idx))
    p_tail = (p_top.sum(axis=-1) * -1.0) + 1.0
    log_p_top = ad.log(ad.clip_min(p_top, LOG_EPS))
    log_p_tail = ad.log(ad.clip_min(p_tail, LOG_EPS))
    q_top_c = q_top.astype(dt)
    q_tail_c = q_tail.astype(dt)
    log_q_top = _clamped_log(q_top).astype(dt)
    log_q_tail = _clamped_log(q_tail).astype(dt)
    if reverse:
        top_terms = ((log_q_top - log_p_top) * q_top_c).sum(axis=-1)
        tail_terms = (log_p_tail * -1.0 + log_q_tail) * q_tail_c
    else:
        top_terms = (p_top * (log_p_top - log_q_top)).sum(axis=-1)
        tail_terms = p_tail * (log_p_tail - log_q_tail)
    return (top_terms + tail_terms).mean()


def token_rewards(
    student_logits_rows: np.ndarray, teacher_logits_rows: np.ndarray, targets: Sequence[int]
) -> np.ndarray:
    """Per-token log-probability gap, student minus teacher, on the realized
    tokens, full-softmax, float64. Negative where the revision-conditioned
    teacher likes the token better than the generator did; this is the dense
    per-token feedback signal distillation applies."""
    cols = np.asarray(targets)

    def logp(rows):
        z = np.asarray(rows, dtype=np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        return z[np.arange(len(cols)), cols] - np.log(np.exp(z).sum(axis=-1))

    return logp(student_logits_rows) - logp(teacher_logits_rows)


@dataclass
class TokenKLRecord:
    """One scored token of one distillation rollout."""

    instance_id: str
    step_index: int
    t: int  # 1-based position within the response
    kl: float
    token_reward: float
    rollout_reward: int


def write_kl_records(path, records: Sequence[TokenKLRecord]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(asdict(rec)) + "\n")


def read_kl_records(path) -> list[TokenKLRecord]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(TokenKLRecord(**json.loads(line)))
    return out


def _records_for_alignment(
    alignment: DistillAlignment,
    student_rows: np.ndarray,
    teacher_rows: np.ndarray,
    instance_id: str,
    step_index: int,
    rollout_reward: int,
    k: int,
    temperature: float,
    reverse: bool,
) -> list[TokenKLRecord]:
    kls = topk_kl_values(student_rows, teacher_rows, k, temperature, reverse)
    rewards = token_rewards(student_rows, teacher_rows, alignment.targets)
    return [
        TokenKLRecord(
            instance_id=instance_id,
            step_index=step_index,
            t=t + 1,
            kl=float(kls[t]),
            token_reward=float(rewards[t]),
            rollout_reward=rollout_reward,
        )
        for t in range(len(alignment.targets))
    ]


@dataclass
class DistillConfig:
    epochs: int
    batch_size: int
    schedule: Schedule
    optimizer: AdamWConfig = field(default_factory=lambda: AdamWConfig(weight_decay=0.01))
    clip_norm: float = 1.0
    top_k: int = 64
    kl_temperature: float = 1.0
    rollout_temperature: float = 1.0
    max_new_tokens: int = 256
    reverse_kl: bool = False  # experimental teacher-weighted direction
    teacher_mode: str = "frozen"  # "frozen": fixed reviser; "self": current params
    guide: str = "revision"  # "revision" or "gold"
    sync_period_epochs: int = 1  # frozen mode: refresh teacher every N epochs; 0 = never
    overflow_tolerance: float = 0.05
    emit_records: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.teacher_mode not in ("frozen", "self"):
            raise ValueError("teacher_mode must be 'frozen' or 'self'")
        if self.guide not in ("revision", "gold"):
            raise ValueError("guide must be 'revision' or 'gold'")
        if not 0.0 <= self.overflow_tolerance <= 1.0:
            raise ValueError("overflow_tolerance must be in [0, 1]")
        if self.sync_period_epochs < 0:
            raise ValueError("sync_period_epochs must be >= 0")


@dataclass
class DistillResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    ledger: BudgetLedger
    attempted: int = 0
    skipped: int = 0
    teacher_hashes: list[str] = field(default_factory=list)
    sync_steps: list[int] = field(default_factory=list)
    records: list[TokenKLRecord] = field(default_factory=list)


def sync_teacher(student_params: dict, cfg) -> Checkpoint:
    """Replace the teacher with a frozen copy of the student as it stands."""
    return Checkpoint(config=cfg, params=clone_params(student_params), phase="distill-teacher")


def _guide_for(
    config: DistillConfig,
    pool: TaskPool,
    index: int,
    question_tokens: Sequence[int],
    response_tokens: Sequence[int],
    reward: int,
) -> list[int]:
    if config.guide == "revision":
        return revision_guide(question_tokens, response_tokens, reward)
    gold = pool.gold_solution(index)
    return gold_guide(question_tokens, vocab().encode(gold))


def distill_run(
    student: Checkpoint,
    teacher: Checkpoint | None,
    pool: TaskPool,
    config: DistillConfig,
    run_seed: int,
) -> DistillResult:
    """The phase-two loop: sample on-policy, grade, align, distill.

    Every epoch draws exactly one rollout per pool instance. Frozen mode
    requires a teacher checkpoint and asserts its parameters do not drift
    between syncs; when sync_period_epochs > 0 the teacher is replaced by a
    copy of the current student at each period boundary. Self mode scores
    the teacher context with the current student parameters (detached), so
    no teacher checkpoint exists. If more than `overflow_tolerance` of
    attempted alignments are skipped for context overflow, the run fails
    rather than silently training on a truncated slice of the data.
    """
    voc = vocab()
    if config.teacher_mode == "frozen":
        if teacher is None:
            raise ValueError("frozen teacher mode needs a teacher checkpoint")
        teacher_ckpt = Checkpoint(
            config=teacher.config, params=clone_params(teacher.params), phase=teacher.phase
        )
    elif teacher is not None:
        raise ValueError("self teacher mode must not pass a teacher checkpoint")

    params = clone_params(student.params)
    cfg = student.config
    state = OptimizerState.init(params, config.optimizer)
    sampler = SamplerConfig(
        temperature=config.rollout_temperature, max_new_tokens=config.max_new_tokens
    )
    ledger = BudgetLedger()
    metrics: list[dict] = []
    teacher_hashes: list[str] = []
    sync_steps: list[int] = []
    records: list[TokenKLRecord] = []
    if config.teacher_mode == "frozen":
        teacher_hashes.append(params_hash(teacher_ckpt.params))
    attempted = 0
    skipped = 0
    per_epoch = steps_per_epoch(len(pool.instances), config.batch_size)
    sync_stride = config.sync_period_epochs * per_epoch
    batches = batch_order(len(pool.instances), config.batch_size, config.epochs, config.seed)
    for step, batch in enumerate(batches):
        t0 = time.perf_counter()
        if config.teacher_mode == "frozen" and sync_stride and step and step % sync_stride == 0:
            if params_hash(teacher_ckpt.params) != teacher_hashes[-1]:
                raise RuntimeError("teacher parameters drifted between syncs")
            teacher_ckpt = sync_teacher(params, cfg)
            teacher_hashes.append(params_hash(teacher_ckpt.params))
            sync_steps.append(step)
        lr = lr_at(step, config.schedule)
        student_snapshot = Checkpoint(config=cfg, params=params, phase="distill-student")
        session = InferenceSession(student_snapshot)
        ad.zero_grads(params.values())
        losses = 0.0
        rewards = 0.0
        lengths = 0
        used = 0
        for slot, index in enumerate(batch):
            inst = pool.instances[index]
            x = voc.encode(inst.prompt)
            seed = derive_seed(run_seed, "distill-rollout", step, inst.seed, slot)
            tokens, ended = sample_tokens(session, x, sampler, seed)
            ledger.distill_rollouts += 1
            ledger.tokens_generated += len(tokens)
            content = tokens[:-1] if ended else tokens
            reward = verify(inst, voc.decode(content), truncated=not ended)
            rewards += reward
            lengths += len(tokens)
            guide = _guide_for(config, pool, index, x, content, reward)
            alignment = build_alignment(x, content, ended, guide, cfg.context)
            attempted += 1
            if alignment is None:
                skipped += 1
                ledger.overflow_skips += 1
                continue
            if config.teacher_mode == "frozen":
                t_rows = teacher_row_logits(teacher_ckpt, alignment)
            else:
                t_rows = teacher_row_logits(student_snapshot, alignment)
            student_logits = model_logits(params, cfg, list(alignment.student_tokens))
            loss = sequence_kl_loss(
                student_logits,
                alignment,
                t_rows,
                config.top_k,
                config.kl_temperature,
                config.reverse_kl,
            )
            if not np.isfinite(loss.data):
                raise NumericOverflowError(f"non-finite distillation loss at step {step}")
            ad.backward(loss * (1.0 / len(batch)))
            losses += float(loss.data)
            used += 1
            if config.emit_records:
                s_rows = student_logits.data[np.asarray(alignment.student_rows)].astype(
                    np.float64
                )
                records.extend(
                    _records_for_alignment(
                        alignment,
                        s_rows,
                        t_rows,
                        inst.uid,
                        step,
                        reward,
                        config.top_k,
                        config.kl_temperature,
                        config.reverse_kl,
                    )
                )
        grads = _collect_grads(params)
        norm = clip_grads_(grads, config.clip_norm)
        adamw_step(state, params, grads, lr)
        metrics.append(
            {
                "step": step,
                "loss": losses / max(used, 1),
                "lr": lr,
                "grad_norm": norm,
                "reward_mean": rewards / len(batch),
                "mean_tokens": lengths / len(batch),
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
        )
    if attempted and skipped / attempted > config.overflow_tolerance:
        raise RuntimeError(
            f"{skipped}/{attempted} alignments overflowed the context window "
            f"(tolerance {config.overflow_tolerance:.0%}); shrink generation "
            "budgets or grow the context"
        )
    if config.teacher_mode == "frozen":
        if params_hash(teacher_ckpt.params) != teacher_hashes[-1]:
            raise RuntimeError("teacher parameters drifted during the run")
    out = Checkpoint(
        config=cfg,
        params=params,
        step=student.step + len(batches),
        phase="distilled",
        optimizer=state,
    )
    return DistillResult(
        checkpoint=out,
        metrics=metrics,
        ledger=ledger,
        attempted=attempted,
        skipped=skipped,
        teacher_hashes=teacher_hashes,
        sync_steps=sync_steps,
        records=records,
    )


def collect_kl_records(
    student: Checkpoint,
    teacher: Checkpoint,
    pool: TaskPool,
    config: DistillConfig,
    run_seed: int,
    replicates: int = 1,
) -> tuple[list[TokenKLRecord], BudgetLedger]:
    """Score fresh student rollouts against a fixed teacher without training.

    Pure analysis: rollouts are charged to the ledger's evaluation counter,
    not the training budget. step_index in the records is the replicate id.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    voc = vocab()
    sampler = SamplerConfig(
        temperature=config.rollout_temperature, max_new_tokens=config.max_new_tokens
    )
    session = InferenceSession(student)
    ledger = BudgetLedger()
    records: list[TokenKLRecord] = []
    for index, inst in enumerate(pool.instances):
        x = voc.encode(inst.prompt)
        for rep in range(replicates):
            seed = derive_seed(run_seed, "kl-probe", inst.seed, rep)
            tokens, ended = sample_tokens(session, x, sampler, seed)
            ledger.eval_rollouts += 1
            ledger.tokens_generated += len(tokens)
            content = tokens[:-1] if ended else tokens
            reward = verify(inst, voc.decode(content), truncated=not ended)
            guide = _guide_for(config, pool, index, x, content, reward)
            alignment = build_alignment(x, content, ended, guide, student.config.context)
            if alignment is None:
                ledger.overflow_skips += 1
                continue
            t_rows = teacher_row_logits(teacher, alignment)
            s_logits = session.logits_all(list(alignment.student_tokens))
            s_rows = s_logits[np.asarray(alignment.student_rows)].astype(np.float64)
            records.extend(
                _records_for_alignment(
                    alignment,
                    s_rows,
                    t_rows,
                    inst.uid,
                    rep,
                    reward,
                    config.top_k,
                    config.kl_temperature,
                    config.reverse_kl,
                )
            )
    return records, ledger
