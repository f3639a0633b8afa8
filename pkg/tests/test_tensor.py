import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from osa_fusion.errors import DeterminismError, FormatError, ShapeError
from osa_fusion.tensor import (
    ParamStore,
    Tensor,
    concat,
    grad_check,
    grad_check_report,
    layer_norm,
    load_arrays,
    log,
    matmul,
    save_arrays,
    softmax,
    softmax_rows,
    take_rows,
    tanh,
    tmatmul,
)

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        m = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(matmul(np.eye(2), m), m)

    def test_hand_product(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])

    def test_empty_contraction(self):
        out = matmul(np.zeros((1, 0)), np.zeros((0, 1)))
        assert out.shape == (1, 1) and out[0, 0] == 0.0

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match="2x3.*2x2"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_associativity(self, n, k, l, m, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(n, k)), rng.normal(size=(k, l)), rng.normal(size=(l, m))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)


class TestSoftmaxRows:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0, 0, 0]]), [[0.25] * 4])

    @pytest.mark.parametrize("c", [-50.0, 0.0, 3.0, 700.0])
    def test_shift_invariance(self, c):
        delta = 1.3
        sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
        np.testing.assert_allclose(softmax_rows([[c, c + delta]]), [[sig(-delta), sig(delta)]], rtol=1e-12)

    def test_direct_formula(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(softmax_rows([[1.0, 2.0, 3.0]])[0], e / e.sum(), rtol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
    def test_rows_sum_to_one_and_keep_argmax(self, m):
        p = softmax_rows(m)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        # argmax agrees whenever the logits row has a resolvable unique maximum
        for row, prow in zip(m, p):
            top = np.sort(row)[::-1]
            if top.size == 1 or top[0] - top[1] > 1e-9:
                assert np.argmax(prow) == np.argmax(row)


class TestBackward:
    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x + x
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_broadcast_bias_gradient(self):
        x = Tensor(np.ones((3, 2)))
        b = Tensor(np.zeros(2), requires_grad=True)
        (x + b).sum().backward()
        np.testing.assert_allclose(b.grad, [3.0, 3.0])

    def test_nonscalar_backward_needs_seed(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3), requires_grad=True).backward()

    @pytest.mark.parametrize("op", ["tanh", "softmax", "layer_norm", "log", "matmul3d", "take", "concat"])
    def test_ops_against_finite_differences(self, op):
        rng = np.random.default_rng(3)
        store = ParamStore()
        store.add("a", rng.uniform(0.5, 1.5, size=(2, 3, 4)))
        store.add("b", rng.normal(size=(4, 2)))
        ids = np.array([[0, 2], [1, 1]])
        mix = rng.normal(size=(2, 3, 4))

        def loss(s):
            a, b = s["a"], s["b"]
            if op == "tanh":
                out = tanh(a)
            elif op == "softmax":
                out = softmax(a, axis=-1)
            elif op == "layer_norm":
                out = layer_norm(a)
            elif op == "log":
                out = log(a)
            elif op == "matmul3d":
                out = tmatmul(a, b)
            elif op == "take":
                out = take_rows(b, ids)
            else:
                out = concat([a, a * 2.0], axis=1)
            w = np.resize(mix, out.shape)
            return (out * w).sum()

        assert grad_check(loss, store) < 1e-6


class TestGradCheck:
    def test_quadratic(self):
        store = ParamStore()
        store.add("p", np.random.default_rng(0).normal(size=(3, 2)))
        assert grad_check(lambda s: (s["p"] * s["p"]).sum() * 0.5, store) < 1e-6

    def test_empty_store(self):
        assert grad_check(lambda s: Tensor(0.0), ParamStore()) == 0.0

    def test_nondeterministic_loss_rejected(self):
        store = ParamStore()
        store.add("p", np.ones(2))
        rng = np.random.default_rng(0)
        with pytest.raises(DeterminismError):
            grad_check(lambda s: (s["p"] * rng.normal()).sum(), store)

    def test_corrupted_gradient_detected(self):
        store = ParamStore()
        store.add("p", np.ones((2, 2)))
        report = grad_check_report(lambda s: (s["p"] * s["p"]).sum(), store,
                                   analytic_hook=lambda name, g: g * 1.01)
        assert report["p"] > 1e-4


class TestParamStore:
    def test_adam_moments_start_at_zero_and_first_step_is_lr(self):
        store = ParamStore()
        p = store.add("w", np.array([1.0, -2.0]))
        assert np.all(store.m["w"] == 0) and np.all(store.v["w"] == 0) and store.step_count == 0
        (p * np.array([3.0, -0.5])).sum().backward()
        store.adam_step(0.1)
        # bias-corrected first Adam step moves each entry by lr * sign(grad)
        np.testing.assert_allclose(store["w"].data, [0.9, -1.9], atol=1e-7)

    def test_grad_shape_matches_param(self):
        store = ParamStore()
        store.add("w", np.zeros((3, 4)))
        assert store.grad("w").shape == (3, 4)

    def test_save_load_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"a": rng.normal(size=(3, 2)), "b.c": rng.normal(size=(5,))}
        save_arrays(tmp_path / "ck.npz", arrays, {"note": "x"})
        loaded, meta = load_arrays(tmp_path / "ck.npz")
        assert meta["note"] == "x" and meta["format_version"] == 1
        for k in arrays:
            assert loaded[k].tobytes() == arrays[k].tobytes()

    def test_load_rejects_shape_mismatch(self):
        store = ParamStore()
        store.add("w", np.zeros((2, 2)))
        with pytest.raises(FormatError, match="shape"):
            store.load_arrays({"w": np.zeros((3, 2))})
