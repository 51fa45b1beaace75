"""Supervised training on token sequences with per-position target masks.

An example is one token sequence plus a mask selecting which positions are
prediction targets. Loss is mean negative log-likelihood over the selected
targets; the gather never reads an unselected position, so labels outside
the mask cannot influence the loss or any gradient, bit for bit.

The revision trainer puts two masks over one shared sequence
[question, attempt, SEP, phrase, SEP, revision, EOS]:
  revision mask    targets the revision span and the final EOS
  generation mask  targets everything after the question
and adds the two NLL terms. Both are gathered from a single forward pass,
which is exactly equal to evaluating them in two passes.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericOverflowError, Tensor
from .checkpoint import Checkpoint, clone_params
from .decoding import SamplerConfig, rollouts_for_instances
from .model import ModelConfig, model_logits
from .optim import AdamWConfig, OptimizerState, Schedule, adamw_step, clip_grads_, lr_at
from .revision import BudgetLedger, RevisionTrace, control_prompt_tokens
from .seeding import derive_seed
from .tasks import TaskPool
from .vocab import vocab


@dataclass
class SupervisedExample:
    tokens: list[int]
    mask: list[int]  # 1 marks a target position; position 0 can never be one
    kind: str
    labels: list[int] | None = None  # optional per-position target override

    def __post_init__(self):
        if len(self.mask) != len(self.tokens):
            raise ValueError("mask and tokens must have the same length")
        if len(self.tokens) < 2:
            raise ValueError("an example needs at least two tokens")
        if any(m not in (0, 1) for m in self.mask):
            raise ValueError("mask entries must be 0 or 1")
        if self.mask[0] != 0:
            raise ValueError("position 0 has no prefix and cannot be a target")
        if not any(self.mask):
            raise ValueError("example supervises no positions")
        if self.labels is not None and len(self.labels) != len(self.tokens):
            raise ValueError("labels must align with tokens")

    @property
    def target_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.mask) if m]


def trace_tokens(trace: RevisionTrace) -> list[int]:
    """The full training sequence for one revision trace."""
    voc = vocab()
    return (
        list(trace.question_tokens)
        + list(trace.attempt_tokens)
        + [voc.sep]
        + control_prompt_tokens(trace.reward_initial)
        + [voc.sep]
        + list(trace.revised_tokens)
        + [voc.eos]
    )


def make_revision_example(trace: RevisionTrace) -> SupervisedExample:
    """Targets: the revised span plus its EOS, given everything before it."""
    tokens = trace_tokens(trace)
    revised_len = len(trace.revised_tokens) + 1  # + EOS
    mask = [0] * (len(tokens) - revised_len) + [1] * revised_len
    return SupervisedExample(tokens=tokens, mask=mask, kind="revision")


def make_generation_example(trace: RevisionTrace) -> SupervisedExample:
    """Targets: every position after the question, separators and phrase
    included, over the same sequence the revision example uses."""
    tokens = trace_tokens(trace)
    q = len(trace.question_tokens)
    mask = [0] * q + [1] * (len(tokens) - q)
    return SupervisedExample(tokens=tokens, mask=mask, kind="generation")


def make_completion_example(
    prompt_tokens: Sequence[int], completion_tokens: Sequence[int], kind: str
) -> SupervisedExample:
    """Targets: the completion plus EOS, given the prompt."""
    voc = vocab()
    tokens = list(prompt_tokens) + list(completion_tokens) + [voc.eos]
    mask = [0] * len(prompt_tokens) + [1] * (len(completion_tokens) + 1)
    return SupervisedExample(tokens=tokens, mask=mask, kind=kind)


def make_pretrain_example(prompt_tokens: Sequence[int], solution_tokens: Sequence[int]) -> SupervisedExample:
    """Targets: every position past the first (plain language modeling)."""
    voc = vocab()
    tokens = list(prompt_tokens) + list(solution_tokens) + [voc.eos]
    mask = [0] + [1] * (len(tokens) - 1)
    return SupervisedExample(tokens=tokens, mask=mask, kind="pretrain")


def gathered_nll(log_probs: Tensor, example: SupervisedExample) -> Tensor:
    """Mean NLL over the example's target positions.

    `log_probs` is log-softmax over the forward pass of tokens[:-1], so its
    row i scores the token at position i+1. Targets come from `labels` when
    present, else from the tokens themselves; either way only masked
    positions are ever read.
    """
    positions = example.target_positions
    rows = np.asarray(positions, dtype=np.int64) - 1
    source = example.labels if example.labels is not None else example.tokens
    targets = np.asarray([source[i] for i in positions], dtype=np.int64)
    picked = ad.take_per_row(ad.take_rows(log_probs, rows), targets)
    return -picked.mean()


def sequence_nll(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    example: SupervisedExample,
    position_offset: int = 0,
) -> Tensor:
    logits = model_logits(params, cfg, example.tokens[:-1], position_offset=position_offset)
    return gathered_nll(ad.log_softmax(logits), example)


def revision_loss(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    trace: RevisionTrace,
    use_revision: bool = True,
    use_generation: bool = True,
) -> tuple[Tensor, dict[str, float]]:
    """Revision NLL plus generation NLL from one forward pass.

    The toggles exist for the single-term ablations; a disabled term is not
    computed at all, so the returned loss IS the enabled term, not a sum
    with a zeroed partner.
    """
    if not (use_revision or use_generation):
        raise ValueError("at least one loss term must be enabled")
    rev = make_revision_example(trace)
    gen = make_generation_example(trace)
    logits = model_logits(params, cfg, rev.tokens[:-1])
    lp = ad.log_softmax(logits)
    terms: dict[str, float] = {}
    loss = None
    if use_revision:
        rev_term = gathered_nll(lp, rev)
        terms["loss_revision"] = float(rev_term.data)
        loss = rev_term
    if use_generation:
        gen_term = gathered_nll(lp, gen)
        terms["loss_generation"] = float(gen_term.data)
        loss = gen_term if loss is None else loss + gen_term
    return loss, terms


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    schedule: Schedule
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    clip_norm: float = 1.0
    seed: int = 0
    # single-term ablation toggles, honored by the revision trainer only
    use_revision_loss: bool = True
    use_generation_loss: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    return -(-n_items // batch_size)


def epoch_batches(n_items: int, batch_size: int, seed: int):
    """Endless epoch-aligned batch stream. Each epoch draws a fresh seeded
    permutation and chops it into ceil(n/batch) slices, the last of which
    may run short; every item appears exactly once per epoch."""
    epoch = 0
    while True:
        rng = np.random.default_rng(np.uint64(derive_seed(seed, "shuffle", epoch)))
        order = [int(i) for i in rng.permutation(n_items)]
        for s in range(0, n_items, batch_size):
            yield order[s : s + batch_size]
        epoch += 1


def batch_order(n_items: int, batch_size: int, epochs: int, seed: int) -> list[list[int]]:
    if n_items < 1:
        raise ValueError("empty dataset")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    total = epochs * steps_per_epoch(n_items, batch_size)
    gen = epoch_batches(n_items, batch_size, seed)
    return [next(gen) for _ in range(total)]


LossFn = Callable[[dict, ModelConfig, object], tuple[Tensor, dict]]


def _collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def train_items(
    ckpt: Checkpoint,
    items: Sequence,
    config: TrainConfig,
    loss_of: LossFn,
    phase: str,
) -> TrainResult:
    """Generic loop: per-example backward accumulation in a fixed order,
    global-norm clipping, AdamW with the configured schedule. Non-finite
    losses abort immediately rather than training through garbage."""
    params = clone_params(ckpt.params)
    cfg = ckpt.config
    state = OptimizerState.init(params, config.optimizer)
    metrics: list[dict] = []
    batches = batch_order(len(items), config.batch_size, config.epochs, config.seed)
    for step, batch in enumerate(batches):
        t0 = time.perf_counter()
        lr = lr_at(step, config.schedule)
        ad.zero_grads(params.values())
        total = 0.0
        term_sums: dict[str, float] = {}
        for idx in batch:
            loss, terms = loss_of(params, cfg, items[idx])
            if not np.isfinite(loss.data):
                raise NumericOverflowError(f"non-finite loss at step {step}")
            ad.backward(loss * (1.0 / len(batch)))
            total += float(loss.data)
            for key, value in terms.items():
                term_sums[key] = term_sums.get(key, 0.0) + value
        grads = _collect_grads(params)
        norm = clip_grads_(grads, config.clip_norm)
        adamw_step(state, params, grads, lr)
        row = {"step": step, "loss": total / len(batch)}
        for key, value in term_sums.items():
            row[key] = value / len(batch)
        row["lr"] = lr
        row["grad_norm"] = norm
        row["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        metrics.append(row)
    out = Checkpoint(
        config=cfg,
        params=params,
        step=ckpt.step + len(batches),
        phase=phase,
        optimizer=state,
    )
    return TrainResult(checkpoint=out, metrics=metrics)


def train_revision(ckpt: Checkpoint, traces: Sequence[RevisionTrace], config: TrainConfig) -> TrainResult:
    if not traces:
        raise ValueError("no revision traces to train on")
    if not (config.use_revision_loss or config.use_generation_loss):
        raise ValueError("revision training needs at least one loss term enabled")

    def loss_of(params, cfg, trace):
        return revision_loss(
            params, cfg, trace, config.use_revision_loss, config.use_generation_loss
        )

    return train_items(ckpt, traces, config, loss_of, phase="srt")


def train_supervised(
    ckpt: Checkpoint,
    examples: Sequence[SupervisedExample],
    config: TrainConfig,
    phase: str,
) -> TrainResult:
    if not examples:
        raise ValueError("no examples to train on")

    def loss_of(params, cfg, ex):
        return sequence_nll(params, cfg, ex), {}

    return train_items(ckpt, examples, config, loss_of, phase=phase)


# ---- dataset builders ----


def sft_dataset(pool: TaskPool) -> list[SupervisedExample]:
    """Gold-solution imitation data. Reads gold through the pool's access
    switch, so a pool loaded in self-improvement mode refuses here."""
    voc = vocab()
    out = []
    for i, inst in enumerate(pool.instances):
        gold = pool.gold_solution(i)
        out.append(make_completion_example(voc.encode(inst.prompt), voc.encode(gold), "sft"))
    return out


def make_retry_example(
    prompt_tokens: Sequence[int],
    draft_tokens: Sequence[int],
    reward: int,
    solution_tokens: Sequence[int],
) -> SupervisedExample:
    """Targets: control phrase, closing separator, solution, EOS, given a
    retry-shaped prefix.

    The layout mirrors a revision trace, [prompt, draft, SEP, control
    phrase, SEP, solution]. The prompt, the draft, and the separator that
    opens the retry are never supervised, so plain generation keeps its
    end-after-answer habit; supervising the phrase teaches its spelling,
    which a small character model cannot pick up any other way.
    """
    voc = vocab()
    tokens = (
        list(prompt_tokens)
        + list(draft_tokens)
        + [voc.sep]
        + control_prompt_tokens(reward)
        + [voc.sep]
        + list(solution_tokens)
        + [voc.eos]
    )
    prefix = len(prompt_tokens) + len(draft_tokens) + 1
    mask = [0] * prefix + [1] * (len(tokens) - prefix)
    return SupervisedExample(tokens=tokens, mask=mask, kind="pretrain-retry")


def pretrain_dataset(
    pool: TaskPool, retry_fraction: float = 0.0, seed: int = 0
) -> list[SupervisedExample]:
    """Gold continuations, plus an optional slice of retry-shaped examples.

    A seeded `retry_fraction` of the instances also contribute one retry
    example whose draft is usually another instance's solution (its own on a
    quarter of the draws) and whose control phrase is a fair coin flip. The
    phrase carries no information about the draft there, so the layout
    becomes familiar without teaching any outcome conditioning.
    """
    if not 0.0 <= retry_fraction < 1.0:
        raise ValueError("retry_fraction must be in [0, 1)")
    voc = vocab()
    out = []
    golds = [pool.gold_solution(i) for i in range(len(pool.instances))]
    rng = np.random.default_rng(np.uint64(seed))
    for i, inst in enumerate(pool.instances):
        prompt = voc.encode(inst.prompt)
        gold = voc.encode(golds[i])
        out.append(make_pretrain_example(prompt, gold))
        if rng.random() >= retry_fraction:
            continue
        if len(golds) > 1 and rng.random() >= 0.25:
            j = int(rng.integers(0, len(golds) - 1))
            draft = voc.encode(golds[j if j < i else j + 1])
        else:
            draft = gold
        out.append(make_retry_example(prompt, draft, int(rng.integers(0, 2)), gold))
    return out


def rft_dataset(
    ckpt: Checkpoint,
    pool: TaskPool,
    replicates: int,
    sampler: SamplerConfig,
    run_seed: int,
) -> tuple[list[SupervisedExample], BudgetLedger]:
    """Rejection sampling: keep the verified-correct rollouts as completion
    examples. Every rollout is charged to the ledger, kept or not."""
    rolls = rollouts_for_instances(
        ckpt, pool.instances, replicates, sampler, run_seed, "rft-sample"
    )
    ledger = BudgetLedger(
        initial_samples=len(rolls),
        tokens_generated=sum(r.token_count for r in rolls),
    )
    examples = [
        make_completion_example(r.prompt_tokens, r.content_tokens, "rft")
        for r in rolls
        if r.reward == 1
    ]
    ledger.retained_traces = len(examples)
    return examples, ledger


# ---- base-model pretraining with an accuracy stop band ----


class PretrainBandError(RuntimeError):
    """Pretraining could not stop inside the target accuracy band."""


@dataclass
class PretrainConfig:
    max_steps: int
    batch_size: int
    schedule: Schedule
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 25
    eval_replicates: int = 1
    eval_temperature: float = 0.7
    eval_max_new_tokens: int = 256
    band_low: float = 0.3
    band_high: float = 0.6
    position_jitter: bool = True
    retry_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.band_low < self.band_high <= 1.0:
            raise ValueError("need 0 <= band_low < band_high <= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not 0.0 <= self.retry_fraction < 1.0:
            raise ValueError("retry_fraction must be in [0, 1)")


def eval_accuracy(
    ckpt: Checkpoint,
    pool: TaskPool,
    replicates: int,
    sampler: SamplerConfig,
    run_seed: int,
    stream_tag: str = "band-eval",
) -> float:
    rolls = rollouts_for_instances(ckpt, pool.instances, replicates, sampler, run_seed, stream_tag)
    return float(np.mean([r.reward for r in rolls]))


def pretrain_base(
    ckpt: Checkpoint,
    train_pool: TaskPool,
    eval_pool: TaskPool,
    config: PretrainConfig,
) -> TrainResult:
    """Language-model the gold traces until held-out sampling accuracy lands
    inside [band_low, band_high].

    Each example is placed at a seeded random position offset, so the whole
    position table trains even though individual sequences are short; without
    this, generation from long contexts later would sit on untrained rows.
    Stops at the first in-band evaluation; raises PretrainBandError when an
    evaluation overshoots the band or max_steps runs out below it.
    """
    examples = pretrain_dataset(
        train_pool, config.retry_fraction, derive_seed(config.seed, "retry-mix")
    )
    params = clone_params(ckpt.params)
    cfg = ckpt.config
    state = OptimizerState.init(params, config.optimizer)
    sampler = SamplerConfig(
        temperature=config.eval_temperature, max_new_tokens=config.eval_max_new_tokens
    )
    jitter_rng = np.random.default_rng(np.uint64(derive_seed(config.seed, "jitter")))
    metrics: list[dict] = []
    if not examples:
        raise ValueError("empty dataset")
    batches = itertools.islice(
        epoch_batches(len(examples), config.batch_size, config.seed), config.max_steps
    )
    for step, batch in enumerate(batches):
        t0 = time.perf_counter()
        lr = lr_at(step, config.schedule)
        ad.zero_grads(params.values())
        total = 0.0
        for idx in batch:
            ex = examples[idx]
            room = cfg.context - (len(ex.tokens) - 1)
            if room < 0:
                raise ValueError("pretraining example exceeds the context window")
            offset = int(jitter_rng.integers(0, room + 1)) if config.position_jitter else 0
            loss = sequence_nll(params, cfg, ex, position_offset=offset)
            if not np.isfinite(loss.data):
                raise NumericOverflowError(f"non-finite loss at step {step}")
            ad.backward(loss * (1.0 / len(batch)))
            total += float(loss.data)
        grads = _collect_grads(params)
        norm = clip_grads_(grads, config.clip_norm)
        adamw_step(state, params, grads, lr)
        row = {"step": step, "loss": total / len(batch), "lr": lr, "grad_norm": norm}
        done = step + 1
        if done % config.eval_every == 0 or done == config.max_steps:
            snapshot = Checkpoint(config=cfg, params=params, step=ckpt.step + done, phase="base")
            acc = eval_accuracy(
                snapshot,
                eval_pool,
                config.eval_replicates,
                sampler,
                derive_seed(config.seed, "band-eval", done),
            )
            row["eval_acc"] = acc
            row["wall_ms"] = (time.perf_counter() - t0) * 1000.0
            metrics.append(row)
            if config.band_low <= acc <= config.band_high:
                out = Checkpoint(
                    config=cfg,
                    params=params,
                    step=ckpt.step + done,
                    phase="base",
                    optimizer=state,
                )
                return TrainResult(checkpoint=out, metrics=metrics)
            if acc > config.band_high:
                raise PretrainBandError(
                    f"held-out accuracy {acc:.3f} overshot the stop band "
                    f"({config.band_low}, {config.band_high}) at step {done}"
                )
        else:
            row["wall_ms"] = (time.perf_counter() - t0) * 1000.0
            metrics.append(row)
    last = metrics[-1].get("eval_acc", float("nan"))
    raise PretrainBandError(
        f"accuracy {last:.3f} never reached the stop band "
        f"({config.band_low}, {config.band_high}) within {config.max_steps} steps"
    )


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    """Stable column order: step, loss, the two revision-training terms when
    present, lr, grad_norm, any other extras sorted, wall_ms last (wall time
    is the one column manifests treat as volatile)."""
    import csv

    seen = {k for r in rows for k in r}
    head = [
        k
        for k in ("step", "loss", "loss_revision", "loss_generation", "lr", "grad_norm")
        if k in seen or k in ("step", "loss", "lr", "grad_norm")
    ]
    extras = sorted(seen - set(head) - {"wall_ms"})
    fields = head + extras + ["wall_ms"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, restval="")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
