import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xview import tensor as T
from xview.errors import NumericError, ShapeError, StateError
from xview.tensor import ParamStore, Tensor


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        assert np.array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)

    def test_scalar(self):
        assert (Tensor([[2.0]]) @ Tensor([[3.0]])).item() == 6.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert np.max(np.abs((Tensor(a) @ Tensor(b)).data - triple_loop(a, b))) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_property_triple_loop(self, n, k, m, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        assert np.max(np.abs((Tensor(a) @ Tensor(b)).data - triple_loop(a, b))) < 1e-12

    def test_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_backward_rule(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        (a @ b).backward(g)
        assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
        assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


class TestSoftmax:
    def test_constant_row_is_uniform(self):
        y = T.row_softmax(Tensor(np.full((2, 5), 3.7))).data
        assert np.allclose(y, 0.2, atol=1e-15)

    def test_single_column(self):
        assert np.array_equal(T.row_softmax(Tensor([[5.0], [-2.0]])).data, np.ones((2, 1)))

    def test_analytic(self):
        y = T.row_softmax(Tensor([[0.0, math.log(2.0)]])).data
        assert np.allclose(y, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_large_inputs_are_stable(self):
        y = T.row_softmax(Tensor([[1000.0, 1000.0, -1000.0]])).data
        assert np.allclose(y, [[0.5, 0.5, 0.0]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one_and_shift_invariant(self, n, m, shift, seed):
        x = np.random.default_rng(seed).normal(scale=5, size=(n, m))
        y = T.row_softmax(Tensor(x)).data
        assert np.all(y >= 0)
        assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-12
        y2 = T.row_softmax(Tensor(x + shift)).data
        assert np.max(np.abs(y - y2)) < 1e-12


def test_grad_check_square():
    ps = ParamStore({"x": np.array([[3.0]])})
    err = T.grad_check(lambda p: p["x"] * p["x"], ps, eps=1e-5)
    assert err < 1e-8


def test_grad_check_rejects_nonfinite_loss():
    ps = ParamStore({"x": np.array([[1.0]])})

    def loss(p):
        t = Tensor.__new__(Tensor)
        t.data = np.array([[np.inf]])
        t.grad, t.requires_grad, t._parents, t._backward = None, False, (), None
        return t

    with pytest.raises(NumericError):
        T.grad_check(loss, ps)


def test_nonfinite_data_is_rejected():
    with pytest.raises(NumericError):
        Tensor([[np.nan]])
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        T.mul_const(Tensor([[1e308]]), 10.0)


OP_CASES = {
    "add_row": (lambda p: T.sum_all(T.tanh(p["a"] + p["r"])), {"a": (3, 4), "r": (1, 4)}),
    "sub_row": (lambda p: T.sum_all(T.tanh(p["r"] - p["a"])), {"a": (3, 4), "r": (1, 4)}),
    "mul": (lambda p: T.sum_all(p["a"] * p["b"]), {"a": (3, 4), "b": (3, 4)}),
    "scale": (lambda p: T.sum_all(T.tanh(T.scale(p["a"], p["s"]))), {"a": (3, 4), "s": (1, 1)}),
    "matmul_T": (lambda p: T.sum_all(T.tanh(p["a"] @ p["b"].T)), {"a": (3, 4), "b": (2, 4)}),
    "softmax": (lambda p: T.sum_all(T.row_softmax(p["a"]) * p["b"]), {"a": (3, 4), "b": (3, 4)}),
    "sigmoid": (lambda p: T.sum_all(T.sigmoid(p["a"]) * p["b"]), {"a": (3, 4), "b": (3, 4)}),
    "mean_rows": (lambda p: T.sum_all(T.tanh(T.mean_rows(p["a"]))), {"a": (3, 4)}),
    "mean_all": (lambda p: T.mean_all(p["a"] * p["b"]), {"a": (3, 4), "b": (3, 4)}),
    "concat_slice": (lambda p: T.sum_all(T.tanh(T.slice_rows(T.concat_rows([p["a"], p["b"]]), 2, 5))),
                     {"a": (3, 4), "b": (3, 4)}),
    "repeat": (lambda p: T.sum_all(T.tanh(T.repeat_rows(p["r"], 3)) * p["a"]), {"a": (3, 4), "r": (1, 4)}),
    "upsample": (lambda p: T.sum_all(T.tanh(T.upsample_grid(p["g"], 2, 3)) * p["h"]),
                 {"g": (4, 2), "h": (36, 2)}),
    "row_norm": (lambda p: T.sum_all(T.row_norm(p["a"])), {"a": (3, 4)}),
    "layer_norm": (lambda p: T.sum_all(T.layer_norm(p["a"]) * p["b"]), {"a": (3, 5), "b": (3, 5)}),
    "row_cosine": (lambda p: T.sum_all(T.row_cosine(p["a"], p["b"])), {"a": (3, 4), "b": (3, 4)}),
    "bce": (lambda p: T.bce_with_logits(p["z"], np.array([[1], [0], [1], [0], [0]])), {"z": (5, 1)}),
    "dice": (lambda p: T.dice_loss(p["z"], np.array([[1], [0], [1], [0], [0]])), {"z": (5, 1)}),
    "consts": (lambda p: T.sum_all(T.tanh(3.0 - 2.0 * p["a"] + 1.0)), {"a": (3, 4)}),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    ps = ParamStore({k: rng.normal(size=s) for k, s in shapes.items()})
    assert T.grad_check(fn, ps, eps=1e-5) < 1e-6


def test_upsample_layout():
    g = Tensor(np.arange(4.0).reshape(4, 1))
    out = T.upsample_grid(g, 2, 2).data.reshape(4, 4)
    assert np.array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_gradient_accumulates_across_reuse():
    ps = ParamStore({"x": np.array([[2.0]])})
    x = ps["x"]
    (x * x + x).backward()
    assert x.grad[0, 0] == pytest.approx(5.0)


def test_only_row_broadcast_allowed():
    with pytest.raises(ShapeError):
        Tensor(np.ones((3, 4))) + Tensor(np.ones((3, 1)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((3, 4))) * Tensor(np.ones((1, 4)))


class TestAdamW:
    def test_zero_gradient_is_pure_decay(self):
        w = np.random.default_rng(0).normal(size=(3, 2))
        ps = ParamStore({"w": w})
        ps["w"].grad = np.zeros((3, 2))
        T.adamw_step(ps, lr=0.01, weight_decay=0.1)
        assert np.array_equal(ps["w"].data, w * (1 - 0.01 * 0.1))

    def test_zero_lr_keeps_params_but_updates_moments(self):
        w = np.array([[1.0, -2.0]])
        ps = ParamStore({"w": w})
        ps["w"].grad = np.array([[0.5, 0.5]])
        T.adamw_step(ps, lr=0.0)
        assert np.array_equal(ps["w"].data, w)
        assert np.allclose(ps.moment1["w"], 0.05)
        assert ps.step_count == 1

    def test_single_scalar_hand_evaluated(self):
        ps = ParamStore({"w": np.array([[1.0]])})
        ps["w"].grad = np.array([[1.0]])
        T.adamw_step(ps, lr=0.1, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8)
        m, v = 0.1 * 1.0, 0.001 * 1.0
        m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
        expected = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert abs(ps["w"].item() - expected) < 1e-12

    def test_missing_gradient_names_parameter(self):
        ps = ParamStore({"a": np.ones((1, 1)), "b": np.ones((1, 1))})
        ps["a"].grad = np.ones((1, 1))
        with pytest.raises(StateError, match="'b'"):
            T.adamw_step(ps, lr=0.1)

    def test_step_count_and_moment_shapes(self):
        ps = ParamStore({"a": np.ones((2, 3)), "b": np.ones((1, 4))})
        for k in range(3):
            for n in ps:
                ps[n].grad = np.ones(ps[n].shape)
            T.adamw_step(ps, lr=0.01)
            assert ps.step_count == k + 1
        assert set(ps.moment1) == set(ps.moment2) == {"a", "b"}
        assert all(ps.moment1[n].shape == ps[n].shape for n in ps)

    def test_bitwise_deterministic(self):
        rng = np.random.default_rng(3)
        w, g = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        results = []
        for _ in range(2):
            ps = ParamStore({"w": w})
            for _ in range(5):
                ps["w"].grad = g.copy()
                T.adamw_step(ps, lr=0.003, weight_decay=0.02)
            results.append(ps["w"].data.tobytes())
        assert results[0] == results[1]

    def test_subset_update_leaves_others(self):
        ps = ParamStore({"a": np.ones((1, 2)), "b": np.ones((1, 2))})
        ps["a"].grad = np.ones((1, 2))
        T.adamw_step(ps, lr=0.1, names=["a"])
        assert np.array_equal(ps["b"].data, np.ones((1, 2)))
        assert not np.array_equal(ps["a"].data, np.ones((1, 2)))


def test_cosine_lr_endpoints():
    assert T.cosine_lr(1.0, 0, 10) == 1.0
    assert T.cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert T.cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


def test_no_grad_disables_recording():
    x = Tensor([[1.0]], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
