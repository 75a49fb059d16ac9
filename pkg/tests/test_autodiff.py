"""Gradient engine: finite-difference oracle over every op, Adam, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bones4d.gradcheck import check_gradients
from bones4d.optim import (
    AdamConfig,
    ParamStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)
from bones4d import tensor as T
from bones4d.tensor import Tensor, backward


def fd_grad(fn, x, step=1e-5):
    """Central differences of a scalar fn at array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def ad_grad(build, x):
    """Reverse-mode gradient of scalar build(p) for leaf p initialized at x."""
    p = T.parameter(x.copy(), name="p")
    root = build(p)
    return backward(root)["p"]


def assert_grad_matches(build, x, step=1e-5, tol=1e-6):
    ad = ad_grad(build, x)

    def scalar(arr):
        p = Tensor(arr)
        p.requires_grad = False
        q = T.parameter(arr, name="p")
        return float(build(q).data)

    fd = fd_grad(scalar, x.copy(), step)
    scale = max(np.abs(ad).max(), np.abs(fd).max(), 1.0)
    assert np.abs(ad - fd).max() / scale < tol, (ad, fd)


RNG = np.random.default_rng(7)


@pytest.mark.parametrize(
    "build",
    [
        lambda p: (p + 2.0).sum(),
        lambda p: (2.0 - p).sum(),
        lambda p: (p * p).sum(),
        lambda p: (p / (p * p + 1.5)).sum(),
        lambda p: (p**3).sum(),
        lambda p: p.exp().sum(),
        lambda p: (p * p + 0.5).log().sum(),
        lambda p: (p * p + 0.3).sqrt().sum(),
        lambda p: p.sin().sum(),
        lambda p: p.cos().sum(),
        lambda p: p.tanh().sum(),
        lambda p: p.sigmoid().sum(),
        lambda p: p.softplus().sum(),
        lambda p: (p.abs() + 0.0).sum(),
        lambda p: p.mean(),
        lambda p: (p.cumsum(axis=0) * np.arange(1.0, 7.0)).sum(),
        lambda p: p.reshape(2, 3)[0, :].sum() * 3.0 + p.reshape(3, 2)[:, 1].sum(),
        lambda p: T.softmax(p, axis=0)[2] * 1.7 + T.softmax(p, axis=0).sum(),
        lambda p: T.logsumexp(p, axis=0),
        lambda p: T.where(np.arange(6) % 2 == 0, p * 2.0, p * p).sum(),
    ],
)
def test_elementwise_ops_match_fd(build):
    x = RNG.normal(size=6) * 0.8 + 0.1
    assert_grad_matches(build, x)


def test_matmul_broadcast_grad():
    x = RNG.normal(size=24)

    def build(p):
        a = p.reshape(2, 3, 4)[:, :, :3]  # (2,3,3)
        b = p.reshape(4, 6)[:3, :3]  # (3,3)
        return T.matmul(a, b).sum() + T.matmul(b, a).sum()

    assert_grad_matches(build, x)


def test_matmul_batched_vector_grad():
    x = RNG.normal(size=30)

    def build(p):
        m = p.reshape(30)[:18].reshape(2, 3, 3)
        v = p.reshape(30)[18:24].reshape(2, 3, 1)
        return T.matmul(m, v).sum()

    assert_grad_matches(build, x)


def test_broadcast_add_mul_grad():
    x = RNG.normal(size=8)

    def build(p):
        a = p.reshape(2, 4)
        b = p.reshape(8)[:4].reshape(1, 4)
        return (a * b + b).sum()

    assert_grad_matches(build, x)


def test_gather_scatter_grad():
    x = RNG.normal(size=12)
    idx = np.array([0, 2, 2, 1])

    def build(p):
        m = p.reshape(4, 3)
        return (m[idx] * np.arange(1.0, 13.0).reshape(4, 3)).sum()

    assert_grad_matches(build, x)


def test_concat_stack_grad():
    x = RNG.normal(size=9)

    def build(p):
        a = p.reshape(9)[:4]
        b = p.reshape(9)[4:]
        c = T.concat([a * 2.0, b], axis=0)
        d = T.stack([c[:4], c[5:]], axis=1)
        return (d * d).sum()

    assert_grad_matches(build, x)


def test_clamp_stop_gradient():
    p = T.parameter([-2.0, 0.5, 3.0], name="p")
    root = p.clamp(0.0, 1.0).sum()
    g = backward(root)["p"]
    assert np.allclose(g, [0.0, 1.0, 0.0])


def test_detached_tensor_contributes_zero():
    p = T.parameter([1.0, 2.0], name="p")
    root = (p.detach() * p.detach()).sum() + p.sum() * 0.0
    grads = backward(root, params=[p])
    assert np.allclose(grads["p"], 0.0)


def test_backward_sum_linearity():
    # root = sum(p) -> grad ones
    p = T.parameter(np.zeros(3), name="p")
    assert np.allclose(backward(p.sum())["p"], [1, 1, 1])


def test_backward_constant_root():
    p = T.parameter(np.ones(3), name="p")
    root = Tensor(5.0)
    grads = backward(root, params=[p])
    assert np.allclose(grads["p"], 0.0)


def test_backward_quadratic():
    p = T.parameter([1.0, 2.0, 3.0], name="p")
    assert np.allclose(backward((p * p).sum())["p"], [2, 4, 6])


def test_backward_rejects_nonscalar():
    p = T.parameter([1.0, 2.0], name="p")
    with pytest.raises(ValueError):
        backward(p * 2.0)


def test_sum_of_independent_subgraphs_is_sum_of_grads():
    p = T.parameter([1.0, -1.0], name="p")
    q = T.parameter([2.0], name="q")
    g_joint = backward((p * p).sum() + (q * 3.0).sum())
    g_p = backward((p * p).sum(), params=[p, q])
    g_q = backward((q * 3.0).sum(), params=[p, q])
    for name in ("p", "q"):
        assert np.allclose(g_joint[name], g_p[name] + g_q[name])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=8))
def test_softmax_simplex_property(vals):
    x = Tensor(np.asarray(vals))
    s = T.softmax(x, axis=0).data
    assert (s >= 0).all()
    assert abs(s.sum() - 1.0) < 1e-12


# -- Adam -----------------------------------------------------------------------


def test_adam_zero_grad_is_identity():
    store = ParamStore()
    store.add("w", [1.0, -2.0])
    before = store["w"].data.copy()
    adam_step(store, {"w": np.zeros(2)}, AdamConfig())
    assert np.allclose(store["w"].data, before)
    assert store.step_count == 1


def test_adam_first_step_magnitude():
    # hand-evaluated recurrence: step 1 with g=1 moves by -lr/(1+eps)
    cfg = AdamConfig(lr=0.0005)
    store = ParamStore()
    store.add("w", 0.0)
    adam_step(store, {"w": np.array(1.0)}, cfg)
    expected = -cfg.lr * 1.0 / (1.0 + cfg.eps)
    assert abs(float(store["w"].data) - expected) < 1e-12


def test_adam_step_magnitude_nonincreasing_for_constant_grad():
    cfg = AdamConfig(lr=0.01)
    store = ParamStore()
    store.add("w", 0.0)
    adam_step(store, {"w": np.array(1.0)}, cfg)
    d1 = abs(float(store["w"].data))
    prev = float(store["w"].data)
    adam_step(store, {"w": np.array(1.0)}, cfg)
    d2 = abs(float(store["w"].data) - prev)
    assert d2 <= d1 * 1.01


def test_adam_shape_mismatch_raises():
    store = ParamStore()
    store.add("w", [1.0, 2.0])
    with pytest.raises(ValueError):
        adam_step(store, {"w": np.zeros(3)}, AdamConfig())


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(lr=0.0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)


# -- check_gradients --------------------------------------------------------------


def test_check_gradients_quadratic():
    store = ParamStore()
    store.add("w", [0.3, -0.8, 1.1])

    def fn(s):
        w = s["w"]
        return (w * w).sum() + (w * 3.0).sum()

    assert check_gradients(fn, store, step=1e-4) < 1e-6


def test_check_gradients_constant_fn_is_zero():
    store = ParamStore()
    store.add("w", [1.0, 2.0])

    def fn(s):
        return Tensor(4.2) + s["w"].sum() * 0.0

    assert check_gradients(fn, store, step=1e-4) == 0.0


def test_check_gradients_nonfinite_raises():
    store = ParamStore()
    store.add("w", [1.0])

    def fn(s):
        return s["w"].log().sum() * np.nan

    with pytest.raises(FloatingPointError):
        check_gradients(fn, store)


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    store = ParamStore()
    store.add("a", np.arange(6.0).reshape(2, 3))
    store.add("b", 3.14)
    adam_step(store, {"a": np.ones((2, 3)), "b": np.array(0.5)}, AdamConfig())
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, {"kind": "test"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"kind": "test"}
    assert loaded.step_count == 1
    assert loaded.names() == store.names()
    for name in store.names():
        assert np.array_equal(loaded[name].data, store[name].data)
        assert np.array_equal(loaded._m[name], store._m[name])
        assert np.array_equal(loaded._v[name], store._v[name])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not-a-checkpoint")
    with pytest.raises(IOError):
        load_checkpoint(path)


def test_checkpoint_bytes_deterministic(tmp_path):
    store = ParamStore()
    store.add("w", np.linspace(0, 1, 7))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, store, {"x": 1})
    save_checkpoint(p2, store, {"x": 1})
    assert p1.read_bytes() == p2.read_bytes()
