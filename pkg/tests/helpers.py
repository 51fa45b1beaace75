"""Shared builders for gradient-check cases, used by unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from sdzero import autodiff as ad


def op_cases(dtype) -> dict[str, tuple]:
    """One (make_loss, params) pair per primitive op.

    Every builder rereads the parameter tensors, so finite-difference probes
    see the perturbed values.
    """
    rng = np.random.default_rng(7)

    def arr(*shape, scale=1.0):
        return (scale * rng.standard_normal(shape)).astype(dtype)

    cases: dict[str, tuple] = {}

    w = ad.param(arr(3, 4), "w")
    x_const = ad.tensor(arr(5, 3), dtype)
    cases["matmul"] = (lambda: ad.gelu(x_const @ w).sum(), {"w": w})

    a = ad.param(arr(3, 4), "a")
    b = ad.param(arr(4), "b")
    cases["add_mul_sub_broadcast"] = (
        lambda: ((a + b) * (a - b) + a * 0.5).mean(),
        {"a": a, "b": b},
    )

    bm1 = ad.param(arr(2, 3, 4), "bm1")
    bm2 = ad.param(arr(2, 4, 3), "bm2")
    cases["matmul_batched"] = (lambda: (bm1 @ bm2).sum(), {"bm1": bm1, "bm2": bm2})

    table = ad.param(arr(7, 5), "table")
    ids = np.array([0, 3, 3, 6])
    mixer = ad.tensor(arr(5, 2), dtype)
    cases["embed"] = (lambda: (ad.embed(table, ids) @ mixer).sum(), {"table": table})

    rowsrc = ad.param(arr(6, 4), "rowsrc")
    cases["take_rows"] = (
        lambda: ad.take_rows(rowsrc, np.array([1, 1, 5])).mean(),
        {"rowsrc": rowsrc},
    )

    persrc = ad.param(arr(4, 6), "persrc")
    cols = np.array([[0, 5], [2, 2], [1, 3], [4, 0]])
    cases["take_per_row"] = (
        lambda: (ad.take_per_row(persrc, cols) * 0.7).sum(),
        {"persrc": persrc},
    )

    sm = ad.param(arr(3, 5), "sm")
    probe = ad.tensor(arr(3, 5), dtype)
    cases["softmax"] = (lambda: (ad.softmax(sm) * probe).sum(), {"sm": sm})

    lsm_w = ad.param(arr(4, 6), "lsm_w")
    lsm_x = ad.tensor(arr(3, 4), dtype)
    targets = np.array([0, 5, 2])
    cases["log_softmax_nll"] = (
        lambda: -ad.take_per_row(ad.log_softmax(lsm_x @ lsm_w), targets).mean(),
        {"lsm_w": lsm_w},
    )

    ln_x = ad.param(arr(3, 8), "ln_x")
    ln_g = ad.param(np.ones(8, dtype=dtype) + arr(8, scale=0.1), "ln_g")
    ln_b = ad.param(arr(8, scale=0.1), "ln_b")
    cases["layer_norm"] = (
        lambda: (ad.layer_norm(ln_x, ln_g, ln_b) * 0.3).sum(),
        {"ln_x": ln_x, "ln_g": ln_g, "ln_b": ln_b},
    )

    ge = ad.param(arr(4, 4), "ge")
    cases["gelu"] = (lambda: ad.gelu(ge).sum(), {"ge": ge})

    ex = ad.param(arr(3, 3, scale=0.5), "ex")
    cases["exp_log"] = (lambda: ad.log(ad.exp(ex) + 1.0).sum(), {"ex": ex})

    cl = ad.param((1.5 * np.sign(rng.standard_normal((4, 4)))).astype(dtype), "cl")
    cases["clip_min"] = (lambda: (ad.clip_min(cl, 0.0) * 2.0).sum(), {"cl": cl})

    sh = ad.param(arr(2, 3, 4), "sh")
    cases["reshape_transpose"] = (
        lambda: (sh.transpose((1, 0, 2)).reshape(3, 8) * 0.25).sum(axis=1).mean(),
        {"sh": sh},
    )

    red = ad.param(arr(3, 5), "red")
    cases["reductions"] = (
        lambda: red.sum(axis=0).mean() + red.mean(axis=1, keepdims=True).sum(),
        {"red": red},
    )

    return cases


def tolerance_for(dtype) -> float:
    return 1e-6 if dtype == np.float64 else 1e-3


def fresh_checkpoint(context=64, dim=32, heads=2, layers=1, seed=0, dtype="float32"):
    """Small randomly initialized model for sampling and training tests."""
    from sdzero.checkpoint import Checkpoint
    from sdzero.model import ModelConfig, init_params
    from sdzero.vocab import vocab

    cfg = ModelConfig(
        vocab_size=vocab().size, context=context, dim=dim, heads=heads, layers=layers, dtype=dtype
    )
    return Checkpoint(config=cfg, params=init_params(cfg, seed))


def scripted_checkpoint(tape, context=None):
    """Model whose greedy output at row p is tape[p], regardless of input.

    Token embeddings and every block weight are zeroed, so the residual
    stream at position p is exactly the one-hot position embedding e_p. The
    final layer norm then gives the head a vector whose largest entry sits at
    index p, and the head matrix routes row p to the scripted token. Rows at
    or beyond len(tape) emit PAD. Requires dim >= context, so keep these
    models short.
    """
    from sdzero.checkpoint import Checkpoint
    from sdzero.model import ModelConfig, init_params
    from sdzero.vocab import vocab

    voc = vocab()
    context = context if context is not None else len(tape)
    if len(tape) > context:
        raise ValueError("tape longer than context")
    dim = context + (context % 2)
    cfg = ModelConfig(vocab_size=voc.size, context=context, dim=dim, heads=2, layers=1)
    params = init_params(cfg, seed=0)
    for t in params.values():
        t.data[...] = 0.0
    for p in range(context):
        params["pos_emb"].data[p, p] = 1.0
    params["ln_f.g"].data[...] = 1.0
    for p, tok in enumerate(tape):
        if not 0 <= int(tok) < voc.size:
            raise ValueError(f"tape token {tok!r} out of range")
        params["head.w"].data[p, int(tok)] = 1.0
    return Checkpoint(config=cfg, params=params, phase="scripted")
