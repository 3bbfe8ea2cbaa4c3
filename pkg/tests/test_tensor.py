"""Numerics core: every differentiable op is checked against central
differences computed directly on numpy arrays, independent of the tape."""

import numpy as np
import pytest

from parloop.errors import DimensionError, NumericError
from parloop.gradcheck import grad_check
from parloop.tensor import (
    Rng,
    Tensor,
    concat,
    cross_entropy,
    embedding,
    matmul,
    no_grad,
    repeat_heads,
    rmsnorm,
    sigmoid,
    silu,
    softmax_rows,
)


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar-valued fn at x, coordinate by coordinate."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def rel(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestElementwise:
    def test_add_broadcast_grads(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)
        ((a + b) * (a + b)).sum().backward()
        ga = numeric_grad(lambda x: float(((x + b.data) ** 2).sum()), a.data.copy())
        gb = numeric_grad(lambda x: float(((a.data + x) ** 2).sum()), b.data.copy())
        assert rel(a.grad, ga) < 1e-6
        assert rel(b.grad, gb) < 1e-6

    def test_mul_sub_neg_scalar_div(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        out = ((a * b - a) / 2.0 + (-b) * 0.5 + 3.0).sum()
        out.backward()
        def f(x, y):
            return float(((x * y - x) / 2.0 - y * 0.5 + 3.0).sum())
        ga = numeric_grad(lambda x: f(x, b.data), a.data.copy())
        gb = numeric_grad(lambda y: f(a.data, y), b.data.copy())
        assert rel(a.grad, ga) < 1e-6
        assert rel(b.grad, gb) < 1e-6

    def test_rsub_radd(self, rng):
        a = Tensor(rng.normal(size=(3,)), requires_grad=True)
        (1.0 - a).sum().backward()
        assert np.allclose(a.grad, -1.0)
        a.grad = None
        (1.0 + a).sum().backward()
        assert np.allclose(a.grad, 1.0)


class TestMatmul:
    def test_grads_against_central_differences(self, rng):
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        (matmul(a, b) * matmul(a, b)).sum().backward()
        ga = numeric_grad(lambda x: float(((x @ b.data) ** 2).sum()), a.data.copy())
        gb = numeric_grad(lambda y: float(((a.data @ y) ** 2).sum()), b.data.copy())
        assert rel(a.grad, ga) < 1e-6
        assert rel(b.grad, gb) < 1e-6

    def test_batched_with_broadcast_weight(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        (matmul(x, w)).sum().backward()
        gw = numeric_grad(lambda ww: float((x.data @ ww).sum()), w.data.copy())
        gx = numeric_grad(lambda xx: float((xx @ w.data).sum()), x.data.copy())
        assert rel(w.grad, gw) < 1e-6
        assert rel(x.grad, gx) < 1e-6

    def test_inner_extent_mismatch_raises(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestShapes:
    def test_reshape_swapaxes_getitem(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        y = x.reshape(6, 4).swapaxes(0, 1)[1:3]
        (y * y).sum().backward()
        def f(v):
            t = v.reshape(6, 4).swapaxes(0, 1)[1:3]
            return float((t * t).sum())
        g = numeric_grad(f, x.data.copy())
        assert rel(x.grad, g) < 1e-6

    def test_getitem_repeated_index_accumulates(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        idx = np.array([0, 0, 2])
        x[idx].sum().backward()
        assert np.allclose(x.grad, [2.0, 0.0, 1.0])

    def test_concat_splits_gradient(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        c = concat([a, b], axis=0)
        (c[1:5] * c[1:5]).sum().backward()
        def f(av, bv):
            t = np.concatenate([av, bv], axis=0)[1:5]
            return float((t * t).sum())
        ga = numeric_grad(lambda v: f(v, b.data), a.data.copy())
        gb = numeric_grad(lambda v: f(a.data, v), b.data.copy())
        assert rel(a.grad, ga) < 1e-6
        assert rel(b.grad, gb) < 1e-6

    def test_sum_axis_keepdims(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
        (x.sum(axis=1) * 2.0).sum().backward()
        assert np.allclose(x.grad, 2.0)
        x.grad = None
        (x.mean(axis=(0, 2), keepdims=True)).sum().backward()
        assert np.allclose(x.grad, 1.0 / 15.0)


class TestActivations:
    def test_sigmoid_matches_and_saturates_exactly(self, rng):
        x = Tensor(rng.normal(size=(10,)) * 3, requires_grad=True)
        sigmoid(x).sum().backward()
        g = numeric_grad(lambda v: float((1 / (1 + np.exp(-v))).sum()), x.data.copy())
        assert rel(x.grad, g) < 1e-6
        big = sigmoid(Tensor(np.array([-np.inf, np.inf, -1e4, 1e4])))
        assert big.data[0] == 0.0 and big.data[1] == 1.0
        assert big.data[2] == 0.0 and big.data[3] == 1.0

    def test_silu_grad(self, rng):
        x = Tensor(rng.normal(size=(7,)), requires_grad=True)
        (silu(x) * silu(x)).sum().backward()
        def f(v):
            s = v / (1 + np.exp(-v))
            return float((s * s).sum())
        assert rel(x.grad, numeric_grad(f, x.data.copy())) < 1e-6


class TestSoftmax:
    def test_rows_sum_to_one_without_overflow(self):
        p = softmax_rows(Tensor(np.array([[1000.0, 0.0], [3.0, 3.0]])))
        assert np.all(np.isfinite(p.data))
        assert np.allclose(p.data.sum(axis=-1), 1.0)
        assert p.data[0, 0] > 0.999

    def test_masked_entries_get_zero_weight(self):
        p = softmax_rows(Tensor(np.array([[0.5, -np.inf, 1.0]])))
        assert p.data[0, 1] == 0.0
        assert np.allclose(p.data.sum(), 1.0)

    def test_all_masked_row_raises(self):
        with pytest.raises(NumericError):
            softmax_rows(Tensor(np.array([[-np.inf, -np.inf]])))

    def test_nan_input_raises(self):
        with pytest.raises(NumericError):
            softmax_rows(Tensor(np.array([[np.nan, 0.0]])))

    def test_grad_with_masked_lanes(self, rng):
        base = rng.normal(size=(3, 5))
        mask = np.zeros((3, 5))
        mask[0, 4] = -np.inf
        mask[2, 0] = -np.inf
        x = Tensor(base, requires_grad=True)
        w = rng.normal(size=(3, 5))
        (softmax_rows(x + mask) * w).sum().backward()
        def f(v):
            z = v + mask
            e = np.exp(z - z.max(axis=-1, keepdims=True))
            return float((e / e.sum(axis=-1, keepdims=True) * w).sum())
        assert rel(x.grad, numeric_grad(f, base.copy())) < 1e-6


class TestRmsnorm:
    def test_forward_matches_definition(self, rng):
        x = rng.normal(size=(2, 4, 8))
        gain = rng.normal(size=(8,))
        y = rmsnorm(Tensor(x), Tensor(gain), eps=1e-6)
        want = x / np.sqrt((x ** 2).mean(axis=-1, keepdims=True) + 1e-6) * gain
        assert np.allclose(y.data, want, atol=1e-12)

    def test_grads_against_central_differences(self, rng):
        xv = rng.normal(size=(3, 6))
        gv = rng.normal(size=(6,))
        x = Tensor(xv, requires_grad=True)
        gain = Tensor(gv, requires_grad=True)
        w = rng.normal(size=(3, 6))
        (rmsnorm(x, gain) * w).sum().backward()
        def f(xx, gg):
            y = xx / np.sqrt((xx ** 2).mean(axis=-1, keepdims=True) + 1e-6) * gg
            return float((y * w).sum())
        assert rel(x.grad, numeric_grad(lambda v: f(v, gv), xv.copy())) < 1e-5
        assert rel(gain.grad, numeric_grad(lambda v: f(xv, v), gv.copy())) < 1e-5

    def test_gain_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            rmsnorm(Tensor(np.zeros((2, 4))), Tensor(np.zeros(3)))


class TestEmbeddingAndGather:
    def test_repeated_ids_accumulate(self):
        table = Tensor(np.arange(12, dtype=float).reshape(4, 3), requires_grad=True)
        ids = np.array([[1, 1], [3, 0]])
        out = embedding(table, ids)
        assert out.shape == (2, 2, 3)
        out.sum().backward()
        want = np.zeros((4, 3))
        want[1] = 2.0
        want[3] = 1.0
        want[0] = 1.0
        assert np.allclose(table.grad, want)

    def test_repeat_heads_grad_sums_over_copies(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 3, 4)), requires_grad=True)
        y = repeat_heads(x, 3)
        assert y.shape == (2, 6, 3, 4)
        w = rng.normal(size=(2, 6, 3, 4))
        (y * w).sum().backward()
        def f(v):
            return float((np.repeat(v, 3, axis=-3) * w).sum())
        assert rel(x.grad, numeric_grad(f, x.data.copy())) < 1e-6


class TestCrossEntropy:
    def test_matches_logsumexp_oracle(self, rng):
        logits = rng.normal(size=(2, 5, 7))
        targets = rng.integers(0, 7, size=(2, 5))
        loss = cross_entropy(Tensor(logits), targets)
        m = logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
        picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
        want = float((logz - picked).mean())
        assert abs(loss.item() - want) < 1e-12

    def test_uniform_logits_give_log_vocab(self):
        v = 13
        loss = cross_entropy(Tensor(np.zeros((3, v))), np.array([0, 5, 12]))
        assert abs(loss.item() - np.log(v)) < 1e-12

    def test_mask_selects_rows(self, rng):
        logits = rng.normal(size=(4, 6))
        targets = rng.integers(0, 6, size=4)
        mask = np.array([True, False, True, False])
        loss = cross_entropy(Tensor(logits), targets, mask)
        m = logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
        picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
        want = float((logz - picked)[mask].mean())
        assert abs(loss.item() - want) < 1e-12

    def test_all_masked_raises(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1]),
                          np.array([False, False]))

    def test_grad_against_central_differences(self, rng):
        logits_v = rng.normal(size=(3, 4, 5))
        targets = rng.integers(0, 5, size=(3, 4))
        mask = rng.random(size=(3, 4)) > 0.3
        logits = Tensor(logits_v, requires_grad=True)
        cross_entropy(logits, targets, mask).backward()
        def f(v):
            m = v.max(axis=-1, keepdims=True)
            logz = np.log(np.exp(v - m).sum(axis=-1)) + m[..., 0]
            picked = np.take_along_axis(v, targets[..., None], axis=-1)[..., 0]
            return float((logz - picked)[mask].mean())
        assert rel(logits.grad, numeric_grad(f, logits_v.copy())) < 1e-6


class TestTapeMechanics:
    def test_no_grad_builds_no_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._backward is None
        assert not y.requires_grad

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2.0).backward()

    def test_diamond_graph_accumulates_once_per_path(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * 3.0
        (y * y).sum().backward()
        assert np.allclose(x.grad, 2 * 3.0 * 3.0 * 2.0)

    def test_reused_node_in_two_branches(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        a = x * 2.0
        out = (a + a * a).sum()
        out.backward()
        assert np.allclose(x.grad, 2.0 + 2 * 2.0 * x.data[0] * 2.0)


class TestGradCheckHarness:
    def test_quadratic_is_exact_to_fd_accuracy(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        res = grad_check(lambda: (p * p).sum(), {"p": p})
        assert res.passed
        assert res.max_err < 1e-9

    def test_zero_gradient_uses_absolute_fallback(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        res = grad_check(lambda: (p * p).sum(), {"p": p})
        assert res.passed  # analytic = numeric = 0, absolute comparison

    def test_detects_a_wrong_gradient(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def bad_loss():
            out = Tensor((p.data * p.data).sum(), requires_grad=True)
            out._parents = (p,)
            out._backward = lambda g: p._accum(g * 3.0 * p.data)  # true factor is 2
            return out

        res = grad_check(bad_loss, {"p": p})
        assert not res.passed
        assert "FAIL" in res.summary()

    def test_subset_of_coordinates(self):
        p = Tensor(np.linspace(0.1, 1.0, 50), requires_grad=True)
        res = grad_check(lambda: (p * p * p).sum(), {"p": p}, max_coords=10)
        assert res.reports[0].n_checked == 10
        assert res.passed


class TestRng:
    def test_same_seed_bit_identical(self):
        a = Rng(123).normal((4, 4))
        b = Rng(123).normal((4, 4))
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal((8,)), Rng(2).normal((8,)))

    def test_fork_is_stable_and_independent(self):
        r = Rng(5)
        a = r.fork("weights").normal((3,))
        b = Rng(5).fork("weights").normal((3,))
        c = Rng(5).fork("data").normal((3,))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
