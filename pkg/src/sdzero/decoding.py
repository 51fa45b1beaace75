"""Autoregressive sampling against the KV-cache inference path.

Temperature 0 is exact greedy argmax (ties break to the lowest token id).
Positive temperatures draw through an inverse-CDF walk over float64
probabilities, so a rollout is a pure function of (checkpoint, prompt,
config, seed). Replicate seeds are derived hashes; nothing here shares RNG
state between rollouts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .inference import InferenceSession
from .seeding import derive_seed
from .tasks import TaskInstance, verify
from .vocab import vocab


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.7
    max_new_tokens: int = 256

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class Rollout:
    instance_uid: str
    replicate: int
    prompt_tokens: list[int]
    tokens: list[int]  # generated tokens, EOS included when it terminated
    text: str  # decoded generation without the trailing EOS
    ended: bool
    truncated: bool
    reward: int | None
    seed: int

    @property
    def content_tokens(self) -> list[int]:
        return self.tokens[:-1] if self.ended else list(self.tokens)

    @property
    def token_count(self) -> int:
        return len(self.tokens)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Rollout":
        return cls(**json.loads(line))


def draw_token(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """One token from a logits row. Greedy at temperature 0, else softmax
    sampling computed in float64 with explicit inverse-CDF so the draw is
    fully specified by (logits, temperature, rng state)."""
    if temperature == 0.0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, logits.shape[0] - 1)


def sample_tokens(
    session: InferenceSession,
    prompt_tokens: Sequence[int],
    config: SamplerConfig,
    seed: int,
) -> tuple[list[int], bool]:
    """Generate until EOS, the token budget, or the context edge.

    Returns (tokens, ended). `ended` is False when the budget or context cut
    generation off; that is the truncation signal and downstream reward logic
    treats it as an automatic failure.
    """
    voc = vocab()
    cfg = session.cfg
    prompt_tokens = list(prompt_tokens)
    if not prompt_tokens:
        raise ValueError("prompt must be non-empty")
    if len(prompt_tokens) >= cfg.context:
        raise ValueError(f"prompt length {len(prompt_tokens)} fills the context window")
    rng = np.random.default_rng(np.uint64(seed))
    budget = min(config.max_new_tokens, cfg.context - len(prompt_tokens))
    logits = session.start(prompt_tokens)
    out: list[int] = []
    for _ in range(budget):
        tok = draw_token(logits, config.temperature, rng)
        out.append(tok)
        if tok == voc.eos:
            return out, True
        if session.n >= cfg.context:
            break
        logits = session.step(tok)
    return out, False


def rollout_instance(
    session: InferenceSession,
    instance: TaskInstance,
    replicate: int,
    config: SamplerConfig,
    seed: int,
    prompt_tokens: Sequence[int] | None = None,
    grade_against: TaskInstance | None = None,
) -> Rollout:
    """Sample one response and grade it. Truncated rollouts always score 0."""
    voc = vocab()
    if prompt_tokens is None:
        prompt_tokens = voc.encode(instance.prompt)
    tokens, ended = sample_tokens(session, prompt_tokens, config, seed)
    content = tokens[:-1] if ended else tokens
    text = voc.decode(content)
    target = grade_against if grade_against is not None else instance
    reward = verify(target, text, truncated=not ended)
    return Rollout(
        instance_uid=instance.uid,
        replicate=replicate,
        prompt_tokens=list(prompt_tokens),
        tokens=tokens,
        text=text,
        ended=ended,
        truncated=not ended,
        reward=reward,
        seed=seed,
    )


def rollouts_for_instances(
    ckpt: Checkpoint,
    instances: Sequence[TaskInstance],
    replicates: int,
    config: SamplerConfig,
    run_seed: int,
    stream_tag: str,
    progress: Callable[[int, int], None] | None = None,
) -> list[Rollout]:
    """All (instance, replicate) rollouts in deterministic order."""
    if replicates < 0:
        raise ValueError("replicates must be >= 0")
    session = InferenceSession(ckpt)
    out: list[Rollout] = []
    total = len(instances) * replicates
    for inst in instances:
        for rep in range(replicates):
            seed = derive_seed(run_seed, stream_tag, inst.seed, rep)
            out.append(rollout_instance(session, inst, rep, config, seed))
            if progress is not None:
                progress(len(out), total)
    return out


def write_rollouts(path, rollouts: Sequence[Rollout]) -> None:
    with open(path, "w") as f:
        for r in rollouts:
            f.write(r.to_json() + "\n")


def read_rollouts(path) -> list[Rollout]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(Rollout.from_json(line))
    return out
