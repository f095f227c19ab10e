import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralgpu import tensor as T
from neuralgpu.errors import ContractViolation, NumericError
from neuralgpu.model import LayerParams, cgru_layer
from neuralgpu.tensor import Tape, Tensor

from gradcheck import check, numeric_grad


def brute_conv(x, k, b):
    n, w, m = x.shape
    kh, kw, _, mo = k.shape
    out = np.zeros((n, w, mo))
    for i in range(n):
        for j in range(w):
            for c in range(mo):
                acc = b[c]
                for di in range(kh):
                    for dj in range(kw):
                        ii, jj = i + di - kh // 2, j + dj - kw // 2
                        if 0 <= ii < n and 0 <= jj < w:
                            for ci in range(m):
                                acc += x[ii, jj, ci] * k[di, dj, ci, c]
                out[i, j, c] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(5, 4, 3))
        k = np.eye(3).reshape(1, 1, 3, 3)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).normal(size=(5, 4, 3))
        out = T.conv2d(Tensor(x), Tensor(np.zeros((3, 3, 3, 2))), Tensor(np.zeros(2)))
        assert out.shape == (5, 4, 2)
        assert not out.data.any()

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(2)
        x, k, b = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        np.testing.assert_allclose(out, brute_conv(x, k, b), rtol=1e-6, atol=1e-12)

    def test_batched_equals_unbatched(self):
        rng = np.random.default_rng(3)
        x, k, b = rng.normal(size=(2, 6, 4, 3)), rng.normal(size=(3, 3, 3, 5)), rng.normal(size=5)
        batched = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(batched[i], brute_conv(x[i], k, b), rtol=1e-9)

    @pytest.mark.parametrize("kshape,bshape", [((3, 3, 4, 2), (2,)), ((2, 3, 3, 2), (2,)), ((3, 3, 3, 2), (3,))])
    def test_shape_contract(self, kshape, bshape):
        with pytest.raises(ContractViolation):
            T.conv2d(Tensor(np.zeros((4, 4, 3))), Tensor(np.zeros(kshape)), Tensor(np.zeros(bshape)))

    def test_nonfinite_is_reported(self):
        k = np.full((1, 1, 1, 1), np.inf)
        with pytest.raises(NumericError, match="conv2d"):
            T.conv2d(Tensor(np.ones((2, 2, 1))), Tensor(k), Tensor(np.zeros(1)))


def hp_sat_sigmoid(x):
    mpmath.mp.dps = 50
    v = 1.2 / (1 + mpmath.e ** (-mpmath.mpf(x))) - mpmath.mpf("0.1")
    return float(min(1, max(0, v)))


def hp_sat_tanh(x):
    mpmath.mp.dps = 50
    return float(min(1, max(-1, 1.2 * mpmath.tanh(mpmath.mpf(x)))))


class TestSaturating:
    def test_sigmoid_center(self):
        assert T.saturating_sigmoid(Tensor(np.zeros(1, np.float64))).data[0] == 0.5

    def test_sigmoid_saturates(self):
        assert T.saturating_sigmoid(Tensor(np.array([20.0, -20.0]))).data.tolist() == [1.0, 0.0]

    def test_sigmoid_value(self):
        got = T.saturating_sigmoid(Tensor(np.array([-1.3]))).data[0]
        assert got == pytest.approx(hp_sat_sigmoid(-1.3), rel=1e-14)

    def test_tanh_values(self):
        out = T.saturating_tanh(Tensor(np.array([0.0, 10.0, -10.0, 0.5]))).data
        assert out[:3].tolist() == [0.0, 1.0, -1.0]
        assert out[3] == pytest.approx(hp_sat_tanh(0.5), rel=1e-14)

    @given(st.floats(-30, 30))
    def test_sigmoid_matches_high_precision(self, x):
        got = T.saturating_sigmoid(Tensor(np.array([x]))).data[0]
        assert abs(got - hp_sat_sigmoid(x)) < 1e-12

    def test_zero_gradient_where_clipped(self):
        x = Tensor(np.array([-10.0, 0.0, 10.0]), requires_grad=True)
        tape = Tape()
        with tape:
            loss = T.saturating_tanh(x).sum()
        tape.backward(loss)
        assert x.grad[0] == 0.0 and x.grad[2] == 0.0
        assert x.grad[1] == pytest.approx(1.2)


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = Tensor(np.arange(6.0))
        assert T.dropout(x, 0.0, 7) is x

    def test_eval_mode_is_identity(self):
        x = Tensor(np.arange(6.0))
        assert T.dropout(x, 0.5, 7, training=False) is x

    def test_inverted_scaling_mean(self):
        x = Tensor(np.ones(10 ** 6, dtype=np.float32))
        assert abs(float(T.dropout(x, 0.5, 123).data.mean()) - 1.0) < 0.01

    def test_mask_is_pure_function_of_seed(self):
        x = Tensor(np.ones((4, 5)))
        np.testing.assert_array_equal(T.dropout(x, 0.3, [1, 2]).data, T.dropout(x, 0.3, [1, 2]).data)
        assert not np.array_equal(T.dropout(x, 0.3, [1, 2]).data, T.dropout(x, 0.3, [1, 3]).data)

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_bad_rate(self, rate):
        with pytest.raises(ContractViolation):
            T.dropout(Tensor(np.ones(3)), rate, 0)


class TestBackward:
    def test_sum(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        tape = Tape()
        with tape:
            loss = x.sum()
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares(self):
        data = np.random.default_rng(1).normal(size=(2, 5))
        x = Tensor(data, requires_grad=True)
        tape = Tape()
        with tape:
            loss = T.square(x).sum()
        T.backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * data)

    def test_reused_input_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        tape = Tape()
        with tape:
            loss = (x * x + x).sum()
        tape.backward(loss)
        assert x.grad[0] == pytest.approx(7.0)

    def test_each_node_visited_once(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        with tape:
            y = x * 2.0
            z = y + y
            loss = (z * z).sum()
        recorded = len(tape.nodes)
        tape.backward(loss)
        assert tape.visited == recorded == 4

    def test_backward_before_forward(self):
        tape = Tape()
        with pytest.raises(ContractViolation):
            tape.backward(Tensor(np.zeros(())))

    def test_detached_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        with tape:
            loss = x.sum()
        with pytest.raises(ContractViolation):
            tape.backward(loss.detach())

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        with tape:
            y = x * 2.0
        with pytest.raises(ContractViolation):
            tape.backward(y)

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        with tape:
            loss = x.sum()
        tape.backward(loss)
        with pytest.raises(ContractViolation):
            tape.backward(loss)

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        assert not (x * 2.0).requires_grad


def _scalar_head(out_shape, seed):
    return np.random.default_rng(seed).normal(size=out_shape)


def _gradcheck_op(build, arrays, seed=0):
    """``build(*tensors) -> Tensor``; compare tape gradients with finite differences."""
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    head = _scalar_head(out_shape, seed)

    def f():
        return float((build(*[Tensor(a) for a in arrays]).data * head).sum())

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    tape = Tape()
    with tape:
        loss = (build(*tensors) * Tensor(head)).sum()
    tape.backward(loss)
    for i, t in enumerate(tensors):
        ok, frac, worst = check(t.grad, numeric_grad(f, arrays, i))
        assert ok, f"input {i}: {frac:.3f} within tolerance, worst {worst:.2e}"


rng0 = np.random.default_rng(42)
PRIMITIVES = {
    "add": (lambda a, b: a + b, [rng0.normal(size=(3, 4)), rng0.normal(size=(3, 4))]),
    "sub": (lambda a, b: a - b, [rng0.normal(size=(3, 4)), rng0.normal(size=(3, 4))]),
    "mul": (lambda a, b: a * b, [rng0.normal(size=(3, 4)), rng0.normal(size=(3, 4))]),
    "rsub": (lambda a: 1.0 - a, [rng0.normal(size=(5,))]),
    "square": (T.square, [rng0.normal(size=(2, 3))]),
    "mean": (T.mean_all, [rng0.normal(size=(2, 3))]),
    "sigmoid": (T.sigmoid, [rng0.normal(size=(6,))]),
    "tanh": (T.tanh, [rng0.normal(size=(6,))]),
    "saturating_sigmoid": (T.saturating_sigmoid, [rng0.normal(size=(10,))]),
    "saturating_tanh": (T.saturating_tanh, [rng0.normal(scale=0.5, size=(10,))]),
    "conv2d": (T.conv2d, [rng0.normal(size=(2, 4, 3, 2)), rng0.normal(size=(3, 3, 2, 3)), rng0.normal(size=3)]),
    "linear": (T.linear, [rng0.normal(size=(2, 5, 3)), rng0.normal(size=(3, 4))]),
    "take_row": (lambda s: T.take_row(s, 1), [rng0.normal(size=(2, 3, 4, 2))]),
    "embed": (lambda e: T.embed_rows(e, np.array([[0, 2, -1], [2, 2, 1]])), [rng0.normal(size=(3, 4))]),
    "cross_entropy": (lambda z: T.cross_entropy(z, np.array([[0, 3], [2, 1]])), [rng0.normal(size=(2, 2, 4))]),
    "pull_to_mean": (lambda a, b, c: T.pull_to_mean([a, b, c]), [rng0.normal(size=(2, 2)) for _ in range(3)]),
    "mask": (lambda a: T.apply_mask(a, np.array([0.0, 2.0, 2.0, 0.0])), [rng0.normal(size=(4,))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    build, arrays = PRIMITIVES[name]
    _gradcheck_op(build, [a.copy() for a in arrays])


def _layer_arrays(m, seed):
    rng = np.random.default_rng(seed)
    return [rng.normal(scale=0.4, size=(3, 3, m, m)) for _ in range(3)] + [rng.normal(scale=0.3, size=m) for _ in range(3)]


def test_cgru_step_gradients():
    m = 3
    s = np.random.default_rng(9).normal(scale=0.5, size=(5, 4, m))
    arrays = [s] + _layer_arrays(m, 10)
    mask = T.dropout_mask((5, 4, m), 0.2, 3, np.float64)

    def build(x, *p):
        return cgru_layer(x, LayerParams(*p), cutoff=True, dropout_mask=mask)

    _gradcheck_op(build, arrays)


def _stack(s, params, depth, memory):
    def one(x):
        return cgru_layer(x, LayerParams(*params), cutoff=True)

    for _ in range(depth):
        s = T.checkpoint(one, s) if memory == "recompute" else one(s)
    return s


@pytest.mark.parametrize("depth", [1, 7, 40])
def test_recompute_matches_stored(depth):
    m = 4
    s0 = np.random.default_rng(depth).normal(scale=0.5, size=(2, 6, 4, m))
    head = np.random.default_rng(5).normal(size=s0.shape)
    grads = {}
    for memory in ("stored", "recompute"):
        params = [Tensor(a, requires_grad=True) for a in _layer_arrays(m, 11)]
        x = Tensor(s0, requires_grad=True)
        tape = Tape()
        with tape:
            loss = (_stack(x, params, depth, memory) * Tensor(head)).sum()
        tape.backward(loss)
        grads[memory] = [x.grad] + [p.grad for p in params]
    for a, b in zip(grads["stored"], grads["recompute"]):
        np.testing.assert_allclose(b, a, rtol=1e-6, atol=1e-12)


def test_recompute_keeps_fewer_nodes():
    m = 3
    params = [Tensor(a, requires_grad=True) for a in _layer_arrays(m, 1)]
    counts = {}
    for memory in ("stored", "recompute"):
        tape = Tape()
        with tape:
            loss = _stack(Tensor(np.ones((4, 4, m)), requires_grad=True), params, 10, memory).sum()
        counts[memory] = len(tape.nodes)
        tape.backward(loss)
    assert counts["recompute"] < counts["stored"] / 5


def test_forward_is_deterministic():
    m = 5
    params = [Tensor(a.astype(np.float32)) for a in _layer_arrays(m, 3)]
    s = Tensor(np.random.default_rng(4).normal(size=(3, 7, 4, m)).astype(np.float32))
    a = _stack(s, params, 6, "stored").data
    b = _stack(s, params, 6, "stored").data
    assert a.tobytes() == b.tobytes()


def test_count_ops():
    x = Tensor(np.ones((2, 2, 1)))
    with T.count_ops() as counts:
        T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert counts["conv2d"] == 2


def test_nonfinite_scale_raises():
    with pytest.raises(NumericError):
        Tensor(np.ones(2)) * math.inf


def test_rank_limit():
    with pytest.raises(ContractViolation):
        Tensor(np.zeros((1, 1, 1, 1, 1)))
