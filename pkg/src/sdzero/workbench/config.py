"""Run configuration: one human-editable JSON file is the source of truth
for a whole run; command-line flags override individual keys.

The schema is strict. Unknown keys, wrong types, and out-of-range values all
raise ConfigError, so a typo cannot silently change an experiment. The seed,
task, data, and model sections define a run directory's identity; the stage
sections may be overridden per command (the manifest records what actually
ran).
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from ..tasks import TASK_KINDS


class ConfigError(ValueError):
    """Configuration file or override violates the schema."""


BASELINES = ("sft", "rft", "sdft-lite", "none")
SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TaskSection:
    kind: str = "countdown-lite"
    difficulty: int = 1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}")
        if self.difficulty not in (1, 2, 3):
            raise ConfigError("task.difficulty must be 1, 2, or 3")


@dataclass(frozen=True)
class DataSection:
    """Instance counts per block and the phase-1 share of the train block."""

    n_pretrain: int = 384
    n_train: int = 192
    srt_frac: float = 0.5
    n_eval: int = 64
    n_probe: int = 32

    def __post_init__(self):
        for name in ("n_pretrain", "n_train", "n_eval", "n_probe"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")
        if not 0.0 < self.srt_frac < 1.0:
            raise ConfigError("data.srt_frac must be strictly between 0 and 1")
        if min(self.n_srt, self.n_distill) < 1:
            raise ConfigError("data.srt_frac leaves an empty phase block")

    @property
    def n_srt(self) -> int:
        return int(round(self.n_train * self.srt_frac))

    @property
    def n_distill(self) -> int:
        return self.n_train - self.n_srt


@dataclass(frozen=True)
class ModelSection:
    context: int = 448
    dim: int = 96
    heads: int = 4
    layers: int = 2

    def __post_init__(self):
        if self.context < 2:
            raise ConfigError("model.context must be >= 2")
        if self.dim < 1 or self.heads < 1 or self.layers < 1:
            raise ConfigError("model dims must be positive")
        if self.dim % self.heads:
            raise ConfigError("model.dim must be divisible by model.heads")


@dataclass(frozen=True)
class PretrainSection:
    max_steps: int = 1200
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_steps: int = 40
    schedule: str = "cosine"
    eval_every: int = 50
    eval_replicates: int = 1
    band_low: float = 0.3
    band_high: float = 0.6
    temperature: float = 0.7
    max_new_tokens: int = 176
    retry_fraction: float = 0.25

    def __post_init__(self):
        _check_train_common(self, "pretrain", steps_field="max_steps")
        if self.eval_every < 1 or self.eval_replicates < 1:
            raise ConfigError("pretrain eval knobs must be >= 1")
        if not 0.0 <= self.band_low < self.band_high <= 1.0:
            raise ConfigError("pretrain band must satisfy 0 <= low < high <= 1")
        if not 0.0 <= self.retry_fraction < 1.0:
            raise ConfigError("pretrain retry_fraction must be in [0, 1)")
        _check_sampler(self, "pretrain")


@dataclass(frozen=True)
class CollectSection:
    attempts_per_initial: int = 3
    keep_per_initial: int = 1
    temperature: float = 0.7
    max_new_tokens: int = 176

    def __post_init__(self):
        if self.attempts_per_initial < 1:
            raise ConfigError("collect.attempts_per_initial must be >= 1")
        if not 1 <= self.keep_per_initial <= self.attempts_per_initial:
            raise ConfigError("collect.keep_per_initial out of range")
        _check_sampler(self, "collect")


@dataclass(frozen=True)
class SrtSection:
    epochs: int = 3
    batch_size: int = 8
    peak_lr: float = 3e-4
    warmup_steps: int = 10
    schedule: str = "cosine"
    use_revision_loss: bool = True
    use_generation_loss: bool = True

    def __post_init__(self):
        _check_train_common(self, "srt")
        if not (self.use_revision_loss or self.use_generation_loss):
            raise ConfigError("srt needs at least one loss term enabled")


@dataclass(frozen=True)
class DistillSection:
    epochs: int = 1
    batch_size: int = 4
    peak_lr: float = 1e-4
    warmup_steps: int = 5
    schedule: str = "cosine"
    top_k: int = 16
    kl_temperature: float = 1.0
    sync_period_epochs: int = 0
    rollout_temperature: float = 1.0
    max_new_tokens: int = 176
    reverse_kl: bool = False

    def __post_init__(self):
        _check_train_common(self, "distill")
        if self.top_k < 1:
            raise ConfigError("distill.top_k must be >= 1")
        if self.kl_temperature <= 0.0:
            raise ConfigError("distill.kl_temperature must be positive")
        if self.sync_period_epochs < 0:
            raise ConfigError("distill.sync_period_epochs must be >= 0")
        if self.rollout_temperature < 0.0 or self.max_new_tokens < 1:
            raise ConfigError("distill sampler values out of range")


@dataclass(frozen=True)
class EvalSection:
    k: int = 8
    temperature: float = 0.7
    max_new_tokens: int = 176

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("eval.k must be >= 1")
        _check_sampler(self, "eval")


@dataclass(frozen=True)
class BaselineSection:
    selector: str = "none"
    rft_replicates: int = 4
    epochs: int = 3
    batch_size: int = 8
    peak_lr: float = 3e-4
    warmup_steps: int = 10
    schedule: str = "cosine"

    def __post_init__(self):
        if self.selector not in BASELINES:
            raise ConfigError(f"baseline.selector must be one of {BASELINES}")
        if self.rft_replicates < 1:
            raise ConfigError("baseline.rft_replicates must be >= 1")
        _check_train_common(self, "baseline")


def _check_train_common(section, name: str, steps_field: str = "epochs") -> None:
    if getattr(section, steps_field) < 0:
        raise ConfigError(f"{name}.{steps_field} must be >= 0")
    if section.batch_size < 1:
        raise ConfigError(f"{name}.batch_size must be >= 1")
    if section.peak_lr <= 0.0:
        raise ConfigError(f"{name}.peak_lr must be positive")
    if section.warmup_steps < 0:
        raise ConfigError(f"{name}.warmup_steps must be >= 0")
    if section.schedule not in SCHEDULES:
        raise ConfigError(f"{name}.schedule must be one of {SCHEDULES}")


def _check_sampler(section, name: str) -> None:
    if section.temperature < 0.0:
        raise ConfigError(f"{name}.temperature must be >= 0")
    if section.max_new_tokens < 1:
        raise ConfigError(f"{name}.max_new_tokens must be >= 1")


_SECTIONS = {
    "task": TaskSection,
    "data": DataSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "collect": CollectSection,
    "srt": SrtSection,
    "distill": DistillSection,
    "eval": EvalSection,
    "baseline": BaselineSection,
}

# sections that define the run directory's identity; commands refuse to run
# against a directory generated under different values for these
IDENTITY_KEYS = ("seed", "task", "data", "model")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    out_dir: str = "run"
    task: TaskSection = field(default_factory=TaskSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    collect: CollectSection = field(default_factory=CollectSection)
    srt: SrtSection = field(default_factory=SrtSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if not self.out_dir:
            raise ConfigError("out_dir must be non-empty")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_dict(self) -> dict:
        """The stored form: out_dir normalized away so two runs of the same
        experiment in different directories serialize byte-identically."""
        d = self.to_dict()
        d["out_dir"] = "."
        return d


def _coerce(value, target_type, path: str):
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type")  # pragma: no cover


def _build_section(cls, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        ftype = {"int": int, "float": float, "str": str, "bool": bool}[fields[name]]
        kwargs[name] = _coerce(value, ftype, f"{path}.{name}")
    return cls(**kwargs)


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    unknown = set(d) - set(_SECTIONS) - {"seed", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {}
    if "seed" in d:
        kwargs["seed"] = _coerce(d["seed"], int, "seed")
    if "out_dir" in d:
        kwargs["out_dir"] = _coerce(d["out_dir"], str, "out_dir")
    for name, cls in _SECTIONS.items():
        if name in d:
            kwargs[name] = _build_section(cls, d[name], name)
    return RunConfig(**kwargs)


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, _, raw = text.partition("=")
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {text!r} has an empty key component")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quoting
    return parts, value


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply `a.b=value` pairs onto a raw config dict. Key existence is not
    checked here; schema validation happens when the result is built."""
    out = copy.deepcopy(d)
    for text in overrides:
        parts, value = _parse_override(text)
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a scalar")
        node[parts[-1]] = value
    return out


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return from_dict(apply_overrides(raw, overrides or []))


def config_json(cfg: RunConfig) -> str:
    """Canonical serialized form (sorted keys, stable separators)."""
    return json.dumps(cfg.canonical_dict(), sort_keys=True, indent=2) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_json(cfg).encode()).hexdigest()


def identity_dict(cfg: RunConfig) -> dict:
    d = cfg.canonical_dict()
    return {k: d[k] for k in IDENTITY_KEYS}
