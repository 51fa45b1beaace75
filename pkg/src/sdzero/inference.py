"""Plain-numpy forward passes for sampling: no tape, with a KV cache.

`InferenceSession.logits_all` mirrors `model.model_logits` and is
cross-checked against it in tests; `start`/`step` run incremental decoding
against a per-layer key/value cache. Correctness over cleverness: the cache
exists so decoding is O(T) per token, nothing more.
"""

from __future__ import annotations

import numpy as np

from .autodiff import NumericOverflowError
from .checkpoint import Checkpoint
from .model import ATTN_MASK_VALUE, ModelConfig


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    k = x.dtype.type(0.044715)
    return 0.5 * x * (1.0 + np.tanh(c * (x + k * x * x * x)))


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + x.dtype.type(eps)) * g + b


class InferenceSession:
    """Decoding session bound to one checkpoint's parameter arrays."""

    def __init__(self, ckpt: Checkpoint):
        self.cfg: ModelConfig = ckpt.config
        self.p = {name: t.data for name, t in ckpt.params.items()}
        cfg = self.cfg
        self._k = [
            np.zeros((cfg.heads, cfg.context, cfg.head_dim), dtype=cfg.np_dtype)
            for _ in range(cfg.layers)
        ]
        self._v = [
            np.zeros((cfg.heads, cfg.context, cfg.head_dim), dtype=cfg.np_dtype)
            for _ in range(cfg.layers)
        ]
        self.n = 0  # tokens currently in the cache

    # ---- full-sequence path ----

    def logits_all(self, tokens) -> np.ndarray:
        """Forward over a whole sequence; returns (T, vocab). No cache use."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("tokens must be a non-empty 1-D sequence")
        if tokens.size > cfg.context:
            raise ValueError(f"sequence length {tokens.size} exceeds context {cfg.context}")
        t = tokens.size
        p = self.p
        x = p["tok_emb"][tokens] + p["pos_emb"][:t]
        h, hd = cfg.heads, cfg.head_dim
        scale = cfg.np_dtype(1.0 / np.sqrt(hd))
        mask = np.triu(np.full((t, t), ATTN_MASK_VALUE, dtype=cfg.np_dtype), k=1)
        for i in range(cfg.layers):
            pre = _layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            q = (pre @ p[f"h{i}.attn.wq"] + p[f"h{i}.attn.bq"]).reshape(t, h, hd).transpose(1, 0, 2)
            k = (pre @ p[f"h{i}.attn.wk"] + p[f"h{i}.attn.bk"]).reshape(t, h, hd).transpose(1, 0, 2)
            v = (pre @ p[f"h{i}.attn.wv"] + p[f"h{i}.attn.bv"]).reshape(t, h, hd).transpose(1, 0, 2)
            scores = q @ k.transpose(0, 2, 1) * scale + mask
            ctx = (_softmax_rows(scores) @ v).transpose(1, 0, 2).reshape(t, cfg.dim)
            x = x + ctx @ p[f"h{i}.attn.wo"] + p[f"h{i}.attn.bo"]
            pre2 = _layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
            x = x + _gelu(pre2 @ p[f"h{i}.mlp.w1"] + p[f"h{i}.mlp.b1"]) @ p[f"h{i}.mlp.w2"] + p[
                f"h{i}.mlp.b2"
            ]
        x = _layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = x @ p["head.w"]
        if not np.all(np.isfinite(logits)):
            raise NumericOverflowError("non-finite logits in inference forward")
        return logits

    # ---- incremental path ----

    def reset(self) -> None:
        self.n = 0

    def start(self, prompt_tokens) -> np.ndarray:
        """Fill the cache with the prompt; return logits for the next token."""
        cfg = self.cfg
        tokens = np.asarray(prompt_tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("prompt must be a non-empty 1-D sequence")
        if tokens.size > cfg.context:
            raise ValueError("prompt exceeds the context window")
        self.reset()
        t = tokens.size
        p = self.p
        h, hd = cfg.heads, cfg.head_dim
        scale = cfg.np_dtype(1.0 / np.sqrt(hd))
        mask = np.triu(np.full((t, t), ATTN_MASK_VALUE, dtype=cfg.np_dtype), k=1)
        x = p["tok_emb"][tokens] + p["pos_emb"][:t]
        for i in range(cfg.layers):
            pre = _layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            q = (pre @ p[f"h{i}.attn.wq"] + p[f"h{i}.attn.bq"]).reshape(t, h, hd).transpose(1, 0, 2)
            k = (pre @ p[f"h{i}.attn.wk"] + p[f"h{i}.attn.bk"]).reshape(t, h, hd).transpose(1, 0, 2)
            v = (pre @ p[f"h{i}.attn.wv"] + p[f"h{i}.attn.bv"]).reshape(t, h, hd).transpose(1, 0, 2)
            self._k[i][:, :t] = k
            self._v[i][:, :t] = v
            scores = q @ k.transpose(0, 2, 1) * scale + mask
            ctx = (_softmax_rows(scores) @ v).transpose(1, 0, 2).reshape(t, cfg.dim)
            x = x + ctx @ p[f"h{i}.attn.wo"] + p[f"h{i}.attn.bo"]
            pre2 = _layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
            x = x + _gelu(pre2 @ p[f"h{i}.mlp.w1"] + p[f"h{i}.mlp.b1"]) @ p[f"h{i}.mlp.w2"] + p[
                f"h{i}.mlp.b2"
            ]
        self.n = t
        x = _layer_norm(x[-1], p["ln_f.g"], p["ln_f.b"])
        logits = x @ p["head.w"]
        if not np.all(np.isfinite(logits)):
            raise NumericOverflowError("non-finite logits in inference forward")
        return logits

    def step(self, token: int) -> np.ndarray:
        """Append one token; return logits for the position after it."""
        cfg = self.cfg
        if self.n == 0:
            raise RuntimeError("step() before start()")
        if self.n >= cfg.context:
            raise ValueError("context window exhausted")
        if not 0 <= int(token) < cfg.vocab_size:
            raise ValueError(f"token id {token} out of range")
        p = self.p
        h, hd = cfg.heads, cfg.head_dim
        pos = self.n
        scale = cfg.np_dtype(1.0 / np.sqrt(hd))
        x = p["tok_emb"][int(token)] + p["pos_emb"][pos]
        for i in range(cfg.layers):
            pre = _layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            q = (pre @ p[f"h{i}.attn.wq"] + p[f"h{i}.attn.bq"]).reshape(h, hd)
            k = (pre @ p[f"h{i}.attn.wk"] + p[f"h{i}.attn.bk"]).reshape(h, hd)
            v = (pre @ p[f"h{i}.attn.wv"] + p[f"h{i}.attn.bv"]).reshape(h, hd)
            self._k[i][:, pos] = k
            self._v[i][:, pos] = v
            keys = self._k[i][:, : pos + 1]
            vals = self._v[i][:, : pos + 1]
            scores = (keys @ q[:, :, None])[:, :, 0] * scale
            attn = _softmax_rows(scores)
            ctx = (attn[:, None, :] @ vals)[:, 0, :].reshape(cfg.dim)
            x = x + ctx @ p[f"h{i}.attn.wo"] + p[f"h{i}.attn.bo"]
            pre2 = _layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
            x = x + _gelu(pre2 @ p[f"h{i}.mlp.w1"] + p[f"h{i}.mlp.b1"]) @ p[f"h{i}.mlp.w2"] + p[
                f"h{i}.mlp.b2"
            ]
        self.n = pos + 1
        x = _layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = x @ p["head.w"]
        if not np.all(np.isfinite(logits)):
            raise NumericOverflowError("non-finite logits in inference forward")
        return logits
