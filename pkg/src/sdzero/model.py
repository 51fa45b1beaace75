"""Decoder-only causal transformer built on the autodiff engine.

Learned absolute position embeddings, pre-norm blocks, GELU MLPs, and a
zero-initialized output head (an untrained model emits exactly uniform
next-token distributions). `model_logits` is the differentiable forward pass;
the sampling-oriented numpy path lives in `inference.py` and is cross-checked
against this one in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ATTN_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context: int = 1024
    dim: int = 256
    heads: int = 8
    layers: int = 4
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.context < 2:
            raise ValueError("context must be >= 2")
        if self.dim <= 0 or self.heads <= 0 or self.layers <= 0:
            raise ValueError("dim, heads, layers must be positive")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.layers):
        names += [
            f"h{i}.ln1.g",
            f"h{i}.ln1.b",
            f"h{i}.attn.wq",
            f"h{i}.attn.bq",
            f"h{i}.attn.wk",
            f"h{i}.attn.bk",
            f"h{i}.attn.wv",
            f"h{i}.attn.bv",
            f"h{i}.attn.wo",
            f"h{i}.attn.bo",
            f"h{i}.ln2.g",
            f"h{i}.ln2.b",
            f"h{i}.mlp.w1",
            f"h{i}.mlp.b1",
            f"h{i}.mlp.w2",
            f"h{i}.mlp.b2",
        ]
    names += ["ln_f.g", "ln_f.b", "head.w"]
    return names


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Seeded initialization. Residual output projections are scaled down by
    1/sqrt(2*layers); the head starts at zero so logits start uniform."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    std = 0.02
    resid_std = std / np.sqrt(2.0 * cfg.layers)

    def normal(shape, s):
        return (rng.standard_normal(shape) * s).astype(dt)

    params: dict[str, Tensor] = {}
    for name in param_names(cfg):
        leaf = name.split(".")[-1]
        if name == "tok_emb":
            data = normal((cfg.vocab_size, cfg.dim), std)
        elif name == "pos_emb":
            data = normal((cfg.context, cfg.dim), std)
        elif name == "head.w":
            data = np.zeros((cfg.dim, cfg.vocab_size), dtype=dt)
        elif leaf == "g":
            data = np.ones(cfg.dim, dtype=dt)
        elif leaf == "b":
            data = np.zeros(cfg.dim, dtype=dt)
        elif leaf in ("bq", "bk", "bv", "bo", "b2"):
            data = np.zeros(cfg.dim, dtype=dt)
        elif leaf == "b1":
            data = np.zeros(4 * cfg.dim, dtype=dt)
        elif leaf in ("wq", "wk", "wv"):
            data = normal((cfg.dim, cfg.dim), std)
        elif leaf == "wo":
            data = normal((cfg.dim, cfg.dim), resid_std)
        elif leaf == "w1":
            data = normal((cfg.dim, 4 * cfg.dim), std)
        elif leaf == "w2":
            data = normal((4 * cfg.dim, cfg.dim), resid_std)
        else:
            raise AssertionError(f"unhandled parameter {name}")
        params[name] = ad.param(data, name)
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


_MASK_CACHE: dict[tuple[int, str], np.ndarray] = {}


def causal_mask(t: int, dtype: str) -> np.ndarray:
    """Additive attention mask: 0 at or below the diagonal, large negative above."""
    key = (t, dtype)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        dt = np.float32 if dtype == "float32" else np.float64
        cached = np.triu(np.full((t, t), ATTN_MASK_VALUE, dtype=dt), k=1)
        _MASK_CACHE[key] = cached
    return cached


def model_logits(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    tokens,
    position_offset: int = 0,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Differentiable forward pass.

    Returns a (T, vocab) tensor; row t is the pre-softmax distribution over
    the token following tokens[:t+1]. Strictly causal: row t never reads
    tokens after position t.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    t = tokens.size
    if position_offset < 0 or position_offset + t > cfg.context:
        raise ValueError(
            f"sequence of length {t} at offset {position_offset} exceeds context {cfg.context}"
        )
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")

    dt = cfg.np_dtype
    drop = cfg.dropout if dropout_rng is not None else 0.0

    def dropout(x: Tensor) -> Tensor:
        if drop == 0.0:
            return x
        keep = (dropout_rng.random(x.shape) >= drop).astype(dt) / dt(1.0 - drop)
        return x * Tensor(keep)

    positions = np.arange(position_offset, position_offset + t)
    x = ad.embed(params["tok_emb"], tokens) + ad.take_rows(params["pos_emb"], positions)
    x = dropout(x)

    h, hd = cfg.heads, cfg.head_dim
    scale = dt(1.0 / np.sqrt(hd))
    mask = Tensor(causal_mask(t, cfg.dtype))

    for i in range(cfg.layers):
        pre = ad.layer_norm(x, params[f"h{i}.ln1.g"], params[f"h{i}.ln1.b"])

        def heads_of(y: Tensor) -> Tensor:
            return y.reshape(t, h, hd).transpose((1, 0, 2))

        q = heads_of(pre @ params[f"h{i}.attn.wq"] + params[f"h{i}.attn.bq"])
        k = heads_of(pre @ params[f"h{i}.attn.wk"] + params[f"h{i}.attn.bk"])
        v = heads_of(pre @ params[f"h{i}.attn.wv"] + params[f"h{i}.attn.bv"])

        scores = (q @ k.transpose((0, 2, 1))) * scale + mask
        attn = ad.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose((1, 0, 2)).reshape(t, cfg.dim)
        x = x + dropout(ctx @ params[f"h{i}.attn.wo"] + params[f"h{i}.attn.bo"])

        pre2 = ad.layer_norm(x, params[f"h{i}.ln2.g"], params[f"h{i}.ln2.b"])
        mlp = ad.gelu(pre2 @ params[f"h{i}.mlp.w1"] + params[f"h{i}.mlp.b1"])
        x = x + dropout(mlp @ params[f"h{i}.mlp.w2"] + params[f"h{i}.mlp.b2"])

    x = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return x @ params["head.w"]
