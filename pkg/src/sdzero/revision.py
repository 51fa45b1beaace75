"""Outcome-conditioned self-revision: collection phase.

A base model samples an initial attempt per task, the verifier grades it,
and the grade picks one of two fixed control phrases. The model then
continues from [question, attempt, SEP, phrase, SEP] to produce revision
attempts. Verified-correct revisions become training traces; everything
sampled is charged to a budget ledger.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .checkpoint import Checkpoint
from .decoding import Rollout, SamplerConfig, rollout_instance, sample_tokens
from .inference import InferenceSession
from .seeding import derive_seed
from .tasks import TaskInstance, TaskPool, verify
from .vocab import vocab

# Control phrases are fixed strings, chosen by the verifier outcome of the
# attempt being revised. Training and inference must use them byte-for-byte.
REPHRASE_PROMPT = "Let me rephrase the above solution."
START_OVER_PROMPT = "Wait, this response is not correct, let me start over."

PROMPT_KINDS = {1: "rephrase", 0: "start-over"}


def control_prompt(reward: int) -> str:
    if reward == 1:
        return REPHRASE_PROMPT
    if reward == 0:
        return START_OVER_PROMPT
    raise ValueError(f"reward must be 0 or 1, got {reward!r}")


def control_prompt_tokens(reward: int) -> list[int]:
    return vocab().encode(control_prompt(reward))


def build_revision_context(
    question_tokens: Sequence[int],
    attempt_tokens: Sequence[int],
    reward: int,
) -> list[int]:
    """[question, attempt, SEP, control phrase, SEP] as one token list.

    `attempt_tokens` are content tokens only; the attempt's EOS must already
    be stripped because the sequence continues past it.
    """
    voc = vocab()
    question_tokens = list(question_tokens)
    attempt_tokens = list(attempt_tokens)
    if not question_tokens:
        raise ValueError("question tokens must be non-empty")
    if not attempt_tokens:
        raise ValueError("attempt tokens must be non-empty")
    if voc.eos in attempt_tokens:
        raise ValueError("attempt tokens must not contain EOS")
    return (
        question_tokens
        + attempt_tokens
        + [voc.sep]
        + control_prompt_tokens(reward)
        + [voc.sep]
    )


@dataclass
class RevisionTrace:
    """One kept (attempt, revision) pair for supervised revision training."""

    instance_uid: str
    instance_seed: int
    prompt_kind: str  # "rephrase" or "start-over"
    reward_initial: int
    question_tokens: list[int]
    attempt_tokens: list[int]  # content tokens, no EOS
    revised_tokens: list[int]  # content tokens, no EOS
    attempt_index: int
    seed_initial: int
    seed_revision: int

    def to_json(self) -> str:
        # Text fields make the file human-inspectable; token arrays are the
        # authoritative payload (decoding strips any special tokens).
        voc = vocab()
        return json.dumps(
            {
                "instance_id": self.instance_uid,
                "instance_seed": self.instance_seed,
                "r_init": self.reward_initial,
                "control_phrase": control_prompt(self.reward_initial),
                "x_text": voc.decode(self.question_tokens),
                "y_init_text": voc.decode(self.attempt_tokens),
                "y_revised_text": voc.decode(self.revised_tokens),
                "question_tokens": self.question_tokens,
                "attempt_tokens": self.attempt_tokens,
                "revised_tokens": self.revised_tokens,
                "attempt_index": self.attempt_index,
                "seed_initial": self.seed_initial,
                "seed_revision": self.seed_revision,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "RevisionTrace":
        d = json.loads(line)
        return cls(
            instance_uid=d["instance_id"],
            instance_seed=d["instance_seed"],
            prompt_kind=PROMPT_KINDS[d["r_init"]],
            reward_initial=d["r_init"],
            question_tokens=list(d["question_tokens"]),
            attempt_tokens=list(d["attempt_tokens"]),
            revised_tokens=list(d["revised_tokens"]),
            attempt_index=d["attempt_index"],
            seed_initial=d["seed_initial"],
            seed_revision=d["seed_revision"],
        )


@dataclass
class BudgetLedger:
    """Counts every model generation the pipeline pays for."""

    initial_samples: int = 0
    revision_attempts: int = 0
    distill_rollouts: int = 0
    eval_rollouts: int = 0
    retained_traces: int = 0
    overflow_skips: int = 0
    tokens_generated: int = 0

    def training_generations(self) -> int:
        # Evaluation rollouts are tracked but not charged against training.
        return self.initial_samples + self.revision_attempts + self.distill_rollouts

    def merge(self, other: "BudgetLedger") -> None:
        for name in vars(other):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["training_generations"] = self.training_generations()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BudgetLedger":
        d = {k: v for k, v in d.items() if k != "training_generations"}
        return cls(**d)


@dataclass(frozen=True)
class CollectConfig:
    attempts_per_initial: int = 3
    keep_per_initial: int = 1
    temperature: float = 0.7
    max_new_tokens: int = 256

    def __post_init__(self):
        if self.attempts_per_initial < 1:
            raise ValueError("attempts_per_initial must be >= 1")
        if not 1 <= self.keep_per_initial <= self.attempts_per_initial:
            raise ValueError("keep_per_initial must be in [1, attempts_per_initial]")


@dataclass
class RevisionCandidate:
    """One graded revision attempt, before filtering."""

    attempt_index: int
    reward: int
    tokens: list[int]
    ended: bool
    seed: int


def filter_candidates(
    candidates: Sequence[RevisionCandidate], keep_per_initial: int
) -> list[RevisionCandidate]:
    """Keep the first `keep_per_initial` verified-correct attempts, in
    attempt order. Incorrect and truncated attempts are dropped."""
    kept = [c for c in candidates if c.reward == 1]
    return list(kept[:keep_per_initial])


@dataclass
class CollectResult:
    traces: list[RevisionTrace]
    ledger: BudgetLedger
    rollouts: list[Rollout] = field(default_factory=list)


def collect_traces(
    ckpt: Checkpoint,
    pool: TaskPool,
    config: CollectConfig,
    run_seed: int,
    keep_rollouts: bool = False,
) -> CollectResult:
    """Phase-1 data collection over a task pool.

    Per instance: one initial sample at the collection temperature, graded;
    then `attempts_per_initial` revision continuations from the grade's
    control context, each graded independently. Instances whose revision
    context would leave no room to generate are skipped and counted.
    """
    voc = vocab()
    session = InferenceSession(ckpt)
    sampler = SamplerConfig(temperature=config.temperature, max_new_tokens=config.max_new_tokens)
    ledger = BudgetLedger()
    traces: list[RevisionTrace] = []
    rollouts: list[Rollout] = []
    for inst in pool.instances:
        seed_init = derive_seed(run_seed, "collect-initial", inst.seed)
        initial = rollout_instance(session, inst, 0, sampler, seed_init)
        ledger.initial_samples += 1
        ledger.tokens_generated += initial.token_count
        if keep_rollouts:
            rollouts.append(initial)
        if not initial.content_tokens:
            ledger.overflow_skips += 1
            continue
        context = build_revision_context(
            initial.prompt_tokens, initial.content_tokens, initial.reward
        )
        if len(context) + 2 > ckpt.config.context:
            ledger.overflow_skips += 1
            continue
        candidates: list[RevisionCandidate] = []
        for attempt in range(config.attempts_per_initial):
            seed_rev = derive_seed(run_seed, "collect-revision", inst.seed, attempt)
            tokens, ended = sample_tokens(session, context, sampler, seed_rev)
            content = tokens[:-1] if ended else tokens
            text = voc.decode(content)
            reward = verify(inst, text, truncated=not ended)
            ledger.revision_attempts += 1
            ledger.tokens_generated += len(tokens)
            candidates.append(
                RevisionCandidate(
                    attempt_index=attempt,
                    reward=reward,
                    tokens=content,
                    ended=ended,
                    seed=seed_rev,
                )
            )
            if keep_rollouts:
                rollouts.append(
                    Rollout(
                        instance_uid=inst.uid,
                        replicate=attempt,
                        prompt_tokens=list(context),
                        tokens=tokens,
                        text=text,
                        ended=ended,
                        truncated=not ended,
                        reward=reward,
                        seed=seed_rev,
                    )
                )
        for kept in filter_candidates(candidates, config.keep_per_initial):
            traces.append(
                RevisionTrace(
                    instance_uid=inst.uid,
                    instance_seed=inst.seed,
                    prompt_kind=PROMPT_KINDS[initial.reward],
                    reward_initial=initial.reward,
                    question_tokens=list(initial.prompt_tokens),
                    attempt_tokens=list(initial.content_tokens),
                    revised_tokens=list(kept.tokens),
                    attempt_index=kept.attempt_index,
                    seed_initial=seed_init,
                    seed_revision=kept.seed,
                )
            )
            ledger.retained_traces += 1
    return CollectResult(traces=traces, ledger=ledger, rollouts=rollouts)


def write_traces(path, traces: Sequence[RevisionTrace]) -> None:
    with open(path, "w") as f:
        for t in traces:
            f.write(t.to_json() + "\n")


def read_traces(path) -> list[RevisionTrace]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(RevisionTrace.from_json(line))
    return out


def write_ledger_csv(path, ledger: BudgetLedger) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["key", "value"])
        for key, value in ledger.to_dict().items():
            writer.writerow([key, value])


# Reference budget accounting for the methods compared at paper scale. Each
# stage is either questions x samples_per_question or a flat generation
# count; a method's cost is the sum over its stages. These figures are the
# published training-generation budgets and the ledger report checks our
# arithmetic against them.
METHOD_BUDGETS: list[dict] = [
    {
        "method": "rejection-sampling-ft",
        "stages": [{"questions": 15000, "samples_per_question": 4}],
    },
    {
        "method": "policy-gradient-rl",
        "stages": [{"generations": 60000}],
    },
    {
        "method": "gold-guided-self-distillation",
        "stages": [{"generations": 60000}],
    },
    {
        "method": "self-revision-training",
        "stages": [
            {"questions": 10000, "samples_per_question": 1, "note": "initial attempts"},
            {"questions": 5000, "samples_per_question": 3, "note": "rephrase attempts"},
            {"questions": 5000, "samples_per_question": 3, "note": "start-over attempts"},
        ],
    },
    {
        "method": "self-distillation-stage",
        "stages": [{"questions": 9000, "samples_per_question": 1}],
    },
]


def stage_cost(stage: dict) -> int:
    if "generations" in stage:
        return int(stage["generations"])
    return int(stage["questions"]) * int(stage["samples_per_question"])


def method_budget(method: str) -> int:
    for entry in METHOD_BUDGETS:
        if entry["method"] == method:
            return sum(stage_cost(s) for s in entry["stages"])
    raise KeyError(f"unknown method {method!r}")


def budget_report() -> dict[str, int]:
    """Training-generation totals per method, plus the two-phase combined
    pipeline (revision training followed by the distillation stage)."""
    report = {e["method"]: method_budget(e["method"]) for e in METHOD_BUDGETS}
    report["revision-plus-distillation"] = (
        report["self-revision-training"] + report["self-distillation-stage"]
    )
    return report
