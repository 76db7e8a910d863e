import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hybridbev import tensor as T

from gradcases import PRIMITIVES, run_case

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(T.matmul(np.eye(2), np.eye(2)), np.eye(2))

    def test_hand_sum(self):
        out = T.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(out, [[3.0], [7.0]])

    def test_gradient(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        W = rng.normal(size=(3, 2))

        def fa(x):
            return float((T.matmul(x, b) * W).sum()), T.matmul_backward(W, x, b)[0]

        def fb(x):
            return float((T.matmul(a, x) * W).sum()), T.matmul_backward(W, a, x)[1]

        assert T.grad_check(fa, a) <= 1e-6
        assert T.grad_check(fb, b) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 5, 5))
        out = T.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_all_ones_center(self):
        out = T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
        assert out[0, 1, 1] == 9.0
        assert out[0, 0, 0] == 4.0

    def test_gradient(self, rng):
        x, w, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        W = rng.normal(size=(3, 5, 5))

        def fx(v):
            return float((T.conv2d(v, w, b, 1, 1) * W).sum()), T.conv2d_backward(W, v, w, 1, 1)[0]

        def fw(v):
            return float((T.conv2d(x, v, b, 1, 1) * W).sum()), T.conv2d_backward(W, x, v, 1, 1)[1]

        assert T.grad_check(fx, x) <= 1e-6
        assert T.grad_check(fw, w) <= 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)))

    @given(k=st.sampled_from([1, 3, 5]), h=st.integers(3, 9), w=st.integers(3, 9))
    @settings(max_examples=25, deadline=None)
    def test_same_padding_preserves_extent(self, k, h, w):
        out = T.conv2d(np.ones((1, h, w)), np.ones((2, 1, k, k)), None, 1, (k - 1) // 2)
        assert out.shape == (2, h, w)


class TestSoftmax:
    def test_constant_row_uniform(self):
        np.testing.assert_allclose(T.softmax(np.full((1, 5), 3.0), axis=1), np.full((1, 5), 0.2))

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax(np.array([0.0, math.log(3.0)])), [0.25, 0.75], atol=1e-15)

    def test_gradient(self, rng):
        x = rng.normal(size=(4, 7))
        W = rng.normal(size=(4, 7))

        def f(v):
            y = T.softmax(v, axis=1)
            return float((y * W).sum()), T.softmax_backward(W, y, axis=1)

        assert T.grad_check(f, x) <= 1e-6

    def test_large_inputs_stable(self):
        y = T.softmax(np.array([1000.0, 1000.0]))
        np.testing.assert_allclose(y, [0.5, 0.5])

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite),
           st.sampled_from([0, 1]))
    @settings(max_examples=60, deadline=None)
    def test_probability_vector(self, x, axis):
        y = T.softmax(x, axis=axis)
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-12)


class TestGradCheck:
    def test_linear_map_exact(self, rng):
        x = rng.normal(size=(3, 3))
        assert T.grad_check(lambda v: (float(v.sum()), np.ones_like(v)), x) <= 1e-9

    def test_square(self):
        err = T.grad_check(lambda v: (float(v[0] ** 2), 2 * v), np.array([3.0]))
        assert err <= 1e-9

    def test_detects_wrong_gradient(self):
        err = T.grad_check(lambda v: (float(v[0] ** 2), 3 * v), np.array([3.0]))
        assert err > 0.1

    def test_non_finite_value(self):
        with pytest.raises(T.EvaluationError):
            T.grad_check(lambda v: (float("nan"), v), np.array([1.0]))

    def test_coordinate_subset(self, rng):
        calls = []

        def f(v):
            calls.append(1)
            return float((v ** 2).sum()), 2 * v

        T.grad_check(f, rng.normal(size=10), coords=[1, 4])
        assert len(calls) == 1 + 2 * 2


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(hash(name) % 2 ** 32)
    assert run_case(PRIMITIVES[name], rng) <= 1e-6


class TestBatchnormAndActivations:
    def test_relu_backward_masks(self):
        x = np.array([-1.0, 2.0])
        np.testing.assert_array_equal(T.relu_backward(np.ones(2), x), [0.0, 1.0])

    def test_sigmoid_extremes(self):
        y = T.sigmoid(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_allclose(y, [0.0, 0.5, 1.0])

    def test_softplus_matches_log1p(self):
        x = np.linspace(-5, 5, 11)
        np.testing.assert_allclose(T.softplus(x), np.log1p(np.exp(x)))

    def test_identity_batchnorm(self, rng):
        x = rng.normal(size=(2, 3, 3))
        y = T.batchnorm(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), eps=0.0)
        np.testing.assert_array_equal(y, x)


class TestMacCounter:
    def test_counts_matmul(self):
        with T.count_macs() as c:
            T.matmul(np.ones((2, 3)), np.ones((3, 4)))
        assert c.count == 2 * 3 * 4

    def test_no_count_outside_context(self):
        with T.count_macs() as c:
            pass
        T.matmul(np.ones((2, 3)), np.ones((3, 4)))
        assert c.count == 0


class TestSerialization:
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4), elements=finite))
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, x):
        buf = io.BytesIO()
        T.write_tensor(buf, x)
        buf.seek(0)
        y = T.read_tensor(buf)
        assert y.shape == x.shape
        np.testing.assert_array_equal(y, x)

    def test_file_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(2, 3))
        T.save_tensor(tmp_path / "x.bin", x)
        np.testing.assert_array_equal(T.load_tensor(tmp_path / "x.bin"), x)

    def test_layout_little_endian(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.array([1.0, 2.0]))
        raw = buf.getvalue()
        assert raw[:4] == (1).to_bytes(4, "little")
        assert raw[4:8] == (2).to_bytes(4, "little")
        assert np.frombuffer(raw[8:], "<f8").tolist() == [1.0, 2.0]
