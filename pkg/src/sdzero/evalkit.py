"""Evaluation and analysis: accuracy reports, revision-fix rates, keyword
and length tracking, and the token-KL concentration views.

Conventions: avg@k and pass@k are fractions in [0, 1]; the revise report and
the correction-rate formula work in percent, matching the published table
this module's golden tests pin. KL figures are raw nats.
"""

from __future__ import annotations

import csv
import hashlib
import re
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, params_hash
from .decoding import SamplerConfig, rollouts_for_instances, sample_tokens
from .distill import TokenKLRecord
from .inference import InferenceSession
from .revision import BudgetLedger, build_revision_context
from .seeding import derive_seed
from .tasks import TaskPool, verify
from .vocab import vocab

# ---- accuracy reports ----


@dataclass
class EvalReport:
    checkpoint_id: str
    instance_set_id: str
    k: int
    avg_at_k: float
    pass_at_k: float
    mean_response_tokens: float
    outcomes: list[dict]


def instance_set_id(pool: TaskPool) -> str:
    digest = hashlib.sha256("\n".join(i.uid for i in pool.instances).encode()).hexdigest()
    return f"{pool.name}:{len(pool.instances)}:{digest[:12]}"


def evaluate(
    ckpt: Checkpoint,
    pool: TaskPool,
    k: int,
    sampler: SamplerConfig,
    run_seed: int,
) -> tuple[EvalReport, BudgetLedger]:
    """k independent rollouts per instance with derived seeds.

    avg@k is the mean reward over all k*n rollouts; pass@k the fraction of
    instances with at least one correct rollout. avg@k <= pass@k always.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not pool.instances:
        raise ValueError("empty instance set")
    rolls = rollouts_for_instances(ckpt, pool.instances, k, sampler, run_seed, "eval")
    by_uid: dict[str, list] = {}
    for r in rolls:
        by_uid.setdefault(r.instance_uid, []).append(r)
    outcomes = []
    for inst in pool.instances:
        group = by_uid[inst.uid]
        outcomes.append(
            {
                "instance_id": inst.uid,
                "rewards": [r.reward for r in group],
                "tokens": [r.token_count for r in group],
            }
        )
    rewards = np.array([r.reward for r in rolls], dtype=np.float64)
    report = EvalReport(
        checkpoint_id=params_hash(ckpt.params),
        instance_set_id=instance_set_id(pool),
        k=k,
        avg_at_k=float(rewards.mean()),
        pass_at_k=float(np.mean([max(o["rewards"]) for o in outcomes])),
        mean_response_tokens=float(np.mean([r.token_count for r in rolls])),
        outcomes=outcomes,
    )
    ledger = BudgetLedger(
        eval_rollouts=len(rolls), tokens_generated=sum(r.token_count for r in rolls)
    )
    return report, ledger


# ---- generate-then-revise ----


@dataclass
class ReviseReport:
    """Accuracies in percent; token means over the respective attempts."""

    first_accuracy: float
    revised_accuracy: float
    correction_rate: float
    mean_first_tokens: float
    mean_revised_tokens: float


def correction_rate(first_pct: float, revised_pct: float) -> float:
    """Share of initially wrong answers the revision fixed, in percent.

    With no initially wrong answers the rate is defined as 0.
    """
    if not 0.0 <= first_pct <= 100.0 or not 0.0 <= revised_pct <= 100.0:
        raise ValueError("accuracies must be percentages in [0, 100]")
    if first_pct >= 100.0:
        return 0.0
    return 100.0 * (revised_pct - first_pct) / (100.0 - first_pct)


def generate_then_revise(
    ckpt: Checkpoint,
    pool: TaskPool,
    sampler: SamplerConfig,
    run_seed: int,
) -> tuple[ReviseReport, BudgetLedger]:
    """One first attempt per instance, then one revision conditioned on the
    attempt and the control phrase picked by its TRUE reward; both verified.

    An instance whose revision context cannot fit the model's window keeps
    its first answer (counted under overflow_skips, no generation charged).
    """
    if not pool.instances:
        raise ValueError("empty instance set")
    voc = vocab()
    session = InferenceSession(ckpt)
    ledger = BudgetLedger()
    first_rewards = []
    revised_rewards = []
    first_tokens = []
    revised_tokens = []
    for inst in pool.instances:
        prompt = voc.encode(inst.prompt)
        seed_first = derive_seed(run_seed, "gtr-first", inst.seed)
        tokens, ended = sample_tokens(session, prompt, sampler, seed_first)
        ledger.initial_samples += 1
        ledger.tokens_generated += len(tokens)
        content = tokens[:-1] if ended else tokens
        reward = verify(inst, voc.decode(content), truncated=not ended)
        first_rewards.append(reward)
        first_tokens.append(len(tokens))
        if not content:
            ledger.overflow_skips += 1
            revised_rewards.append(reward)
            revised_tokens.append(len(tokens))
            continue
        context = build_revision_context(prompt, content, reward)
        if len(context) + 2 > ckpt.config.context:
            ledger.overflow_skips += 1
            revised_rewards.append(reward)
            revised_tokens.append(len(tokens))
            continue
        seed_rev = derive_seed(run_seed, "gtr-revise", inst.seed)
        r_tokens, r_ended = sample_tokens(session, context, sampler, seed_rev)
        ledger.revision_attempts += 1
        ledger.tokens_generated += len(r_tokens)
        r_content = r_tokens[:-1] if r_ended else r_tokens
        revised_rewards.append(verify(inst, voc.decode(r_content), truncated=not r_ended))
        revised_tokens.append(len(r_tokens))
    first_pct = 100.0 * float(np.mean(first_rewards))
    revised_pct = 100.0 * float(np.mean(revised_rewards))
    report = ReviseReport(
        first_accuracy=first_pct,
        revised_accuracy=revised_pct,
        correction_rate=correction_rate(first_pct, revised_pct),
        mean_first_tokens=float(np.mean(first_tokens)),
        mean_revised_tokens=float(np.mean(revised_tokens)),
    )
    return report, ledger


# ---- revision-keyword tracking ----


@lru_cache(maxsize=1)
def revision_keywords() -> tuple[str, ...]:
    """The fixed lowercase phrase list, shipped as a versioned data file."""
    text = resources.files("sdzero").joinpath("data/revision_keywords.txt").read_text()
    return tuple(line for line in text.splitlines() if line)


def count_keywords(text: str) -> int:
    """Case-insensitive plain substring count over the phrase list.

    Every phrase is counted independently, so overlapping matches of
    different phrases (and repeated matches of one phrase) all count.
    """
    hay = text.lower()
    total = 0
    for phrase in revision_keywords():
        total += len(re.findall(f"(?={re.escape(phrase)})", hay))
    return total


# ---- token-KL concentration ----

N_BUCKETS = 20


def _sequences(records: Sequence[TokenKLRecord]) -> dict[tuple, tuple[int, list[float]]]:
    seqs: dict[tuple, tuple[int, list[float]]] = {}
    for rec in records:
        key = (rec.instance_id, rec.step_index)
        if key not in seqs:
            seqs[key] = (rec.rollout_reward, [])
        seqs[key][1].append(rec.kl)
    return seqs


def _bucket_means(kls: list[float]) -> np.ndarray:
    """Sort ascending, then split into 20 buckets: contiguous proportional
    slices when there are at least 20 tokens, round-robin low-to-high when
    fewer (leaving trailing buckets empty for that sequence)."""
    values = np.sort(np.asarray(kls, dtype=np.float64))
    n = len(values)
    out = np.full(N_BUCKETS, np.nan)
    if n >= N_BUCKETS:
        edges = [n * j // N_BUCKETS for j in range(N_BUCKETS + 1)]
        for j in range(N_BUCKETS):
            out[j] = values[edges[j] : edges[j + 1]].mean()
    else:
        for j in range(n):
            out[j] = values[j]
    return out


def bucketize_kl(records: Sequence[TokenKLRecord]) -> dict[int, list[float]]:
    """Per reward class: the 20 bucket means, averaged across sequences.

    Bucket 0 holds each sequence's lowest-KL tokens and bucket 19 its
    highest. Output order of the input records is irrelevant.
    """
    if not records:
        raise ValueError("no records to bucketize")
    per_class: dict[int, list[np.ndarray]] = {}
    for reward, kls in _sequences(records).values():
        per_class.setdefault(reward, []).append(_bucket_means(kls))
    result = {}
    for reward, rows in per_class.items():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN buckets
            means = np.nanmean(np.stack(rows), axis=0)
        result[reward] = [float(v) for v in means]
    return result


def gini(values: Sequence[float]) -> float:
    """Concentration of non-negative mass: 0 when uniform, towards 1 when a
    few entries hold everything."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("gini of an empty sequence")
    if (x < 0).any():
        raise ValueError("gini needs non-negative values")
    total = x.sum()
    if total == 0.0:
        return 0.0
    x = np.sort(x)
    n = x.size
    ranks = np.arange(1, n + 1)
    return float((2.0 * (ranks * x).sum() - (n + 1) * total) / (n * total))


def kl_gini_by_reward(records: Sequence[TokenKLRecord]) -> dict[int, float]:
    """Mean per-sequence Gini of token KL values, per reward class."""
    if not records:
        raise ValueError("no records")
    per_class: dict[int, list[float]] = {}
    for reward, kls in _sequences(records).values():
        clipped = np.maximum(np.asarray(kls, dtype=np.float64), 0.0)
        per_class.setdefault(reward, []).append(gini(clipped))
    return {reward: float(np.mean(vals)) for reward, vals in per_class.items()}


# ---- behavior over checkpoints ----


def length_and_keyword_curve(
    checkpoints: Sequence[tuple[str, Checkpoint]],
    probe_pool: TaskPool,
    sampler: SamplerConfig,
    run_seed: int,
) -> list[dict]:
    """One row per checkpoint: mean response tokens and mean revision-keyword
    count over a fixed probe set (same instances, same derived seeds)."""
    if not probe_pool.instances:
        raise ValueError("probe set must be non-empty")
    rows = []
    for label, ckpt in checkpoints:
        rolls = rollouts_for_instances(
            ckpt, probe_pool.instances, 1, sampler, run_seed, "probe"
        )
        rows.append(
            {
                "label": label,
                "mean_tokens": float(np.mean([r.token_count for r in rolls])),
                "mean_keywords": float(np.mean([count_keywords(r.text) for r in rolls])),
            }
        )
    return rows


# ---- report files ----


def write_eval_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["checkpoint_id", "instance_set_id", "k", "avg_at_k", "pass_at_k", "mean_response_tokens"]
        )
        writer.writerow(
            [
                report.checkpoint_id,
                report.instance_set_id,
                report.k,
                report.avg_at_k,
                report.pass_at_k,
                report.mean_response_tokens,
            ]
        )


def write_revise_csv(path, report: ReviseReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            [
                "first_accuracy",
                "revised_accuracy",
                "correction_rate",
                "mean_first_tokens",
                "mean_revised_tokens",
            ]
        )
        writer.writerow(
            [
                report.first_accuracy,
                report.revised_accuracy,
                report.correction_rate,
                report.mean_first_tokens,
                report.mean_revised_tokens,
            ]
        )


def write_bucket_csv(path, buckets_by_class: dict[int, list[float]]) -> None:
    """Plot-data file: one row per (bucket, reward class)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bucket", "mean_kl", "reward_class"])
        for reward in sorted(buckets_by_class):
            for j, value in enumerate(buckets_by_class[reward]):
                writer.writerow([j, value, reward])


def write_curve_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["label", "mean_tokens", "mean_keywords"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
