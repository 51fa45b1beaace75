from __future__ import annotations

import numpy as np
import pytest

from helpers import op_cases, tolerance_for
from sdzero import autodiff as ad

pytestmark = pytest.mark.filterwarnings("error::RuntimeWarning")


def test_matmul_hand_value():
    a = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = ad.tensor([[1.0], [1.0]])
    out = a @ b
    assert np.array_equal(out.data, np.array([[3.0], [7.0]], dtype=np.float32))


def test_softmax_uniform_rows():
    out = ad.softmax(ad.tensor([[0.0, 0.0], [5.0, 5.0]]))
    assert np.allclose(out.data, 0.5)
    big = ad.softmax(ad.tensor(np.full((3, 7), 1e4, dtype=np.float32)))
    assert np.all(np.isfinite(big.data))
    assert np.allclose(big.data.sum(axis=-1), 1.0, atol=1e-6)


def test_square_gradient_is_two():
    w = ad.param(np.array([1.0], dtype=np.float64))
    loss = (w * w).sum()
    grads = ad.grads_for(loss, {"w": w})
    assert np.allclose(grads["w"], 2.0)


def test_constant_gets_zero_gradient():
    w = ad.param(np.array([2.0], dtype=np.float64))
    unused = ad.param(np.array([5.0], dtype=np.float64))
    loss = (w * 3.0).sum()
    grads = ad.grads_for(loss, {"w": w, "unused": unused})
    assert np.allclose(grads["w"], 3.0)
    assert np.array_equal(grads["unused"], np.zeros(1))


def test_fanout_accumulates_gradient():
    w = ad.param(np.array([3.0], dtype=np.float64))
    y = w * w + w * 2.0 + w  # dy/dw = 2w + 3 = 9
    ad.backward(y.sum())
    assert np.allclose(w.grad, 9.0)


def test_backward_rejects_nonscalar():
    w = ad.param(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(w + w)


def test_mixed_dtype_rejected():
    a = ad.tensor([1.0], dtype=np.float32)
    b = ad.tensor([1.0], dtype=np.float64)
    with pytest.raises(TypeError):
        _ = a + b


def test_nonfinite_raises():
    x = ad.tensor([0.0])
    with pytest.raises(ad.NumericOverflowError):
        ad.log(x)


@pytest.mark.parametrize("dtype", [np.float64, np.float32], ids=["f64", "f32"])
def test_gradient_check_every_op(dtype):
    tol = tolerance_for(dtype)
    for name, (make_loss, params) in op_cases(dtype).items():
        worst = ad.gradient_check(make_loss, params)
        assert worst < tol, f"{name}: worst rel err {worst:.3e} >= {tol}"


def test_gradient_check_composite_two_layer_f64():
    rng = np.random.default_rng(11)
    dt = np.float64
    ids = np.array([1, 4, 2, 0, 3])
    params = {
        "emb": ad.param(rng.standard_normal((6, 8)).astype(dt) * 0.5),
        "w1": ad.param(rng.standard_normal((8, 16)).astype(dt) * 0.5),
        "w2": ad.param(rng.standard_normal((16, 8)).astype(dt) * 0.5),
        "g": ad.param(np.ones(8, dtype=dt)),
        "b": ad.param(np.zeros(8, dtype=dt)),
        "head": ad.param(rng.standard_normal((8, 6)).astype(dt) * 0.5),
    }
    targets = np.array([2, 2, 5, 0, 1])

    def make_loss():
        h = ad.embed(params["emb"], ids)
        h = ad.layer_norm(h, params["g"], params["b"])
        h = h + ad.gelu(h @ params["w1"]) @ params["w2"]
        logp = ad.log_softmax(h @ params["head"])
        return -ad.take_per_row(logp, targets).mean()

    worst = ad.gradient_check(make_loss, params)
    assert worst < 1e-6


def test_grads_accumulate_across_backward_calls():
    w = ad.param(np.array([2.0], dtype=np.float64))
    ad.backward((w * w).sum())
    first = w.grad.copy()
    ad.backward((w * w).sum())
    assert np.allclose(w.grad, 2 * first)
    ad.zero_grads([w])
    assert w.grad is None


def test_detach_blocks_gradient():
    w = ad.param(np.array([4.0], dtype=np.float64))
    loss = (w.detach() * w).sum()  # only the live branch contributes
    grads = ad.grads_for(loss, {"w": w})
    assert np.allclose(grads["w"], 4.0)
