import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcheck
from oracles import enumerate_output_extent, instance_norm_stats, naive_conv3d, trilinear_upsample2
from petseg import tensor as T


def _conv(x, w, b, stride=1, padding=0):
    return T.conv3d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, padding).data


# -- conv3d ------------------------------------------------------------------


def test_conv_identity_kernel_returns_input():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 5, 5))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(_conv(x, w, np.zeros(1), 1, 1), x)


def test_conv_ones_kernel_on_ones_counts_neighbours():
    x = np.ones((1, 1, 4, 4, 4))
    out = _conv(x, np.ones((1, 1, 3, 3, 3)), np.zeros(1), 1, 1)
    assert out[0, 0, 1, 1, 1] == 27
    assert out[0, 0, 0, 0, 0] == 8
    assert out[0, 0, 0, 1, 1] == 18
    assert out[0, 0, 0, 0, 1] == 12


@pytest.mark.parametrize(
    "shape,wshape,stride,pad",
    [
        ((1, 2, 5, 5, 4), (3, 2, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ((2, 1, 6, 5, 4), (2, 1, 3, 3, 3), (2, 2, 2), (1, 1, 1)),
        ((1, 3, 4, 4, 4), (2, 3, 1, 1, 1), (1, 1, 1), (0, 0, 0)),
        ((1, 2, 5, 6, 3), (2, 2, 2, 3, 1), (1, 2, 1), (0, 1, 0)),
    ],
)
def test_conv_matches_nested_loop_oracle(shape, wshape, stride, pad):
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal(shape), rng.standard_normal(wshape), rng.standard_normal(wshape[0])
    np.testing.assert_allclose(_conv(x, w, b, stride, pad), naive_conv3d(x, w, b, stride, pad), rtol=0, atol=1e-10)


def test_conv_float32_matches_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 8, 8, 6)).astype(np.float32)
    w = rng.standard_normal((5, 4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(5).astype(np.float32)
    out = _conv(x, w, b, 1, 1)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, naive_conv3d(x, w, b, (1, 1, 1), (1, 1, 1)), rtol=0, atol=1e-4)


@given(
    n=st.tuples(*[st.integers(1, 9)] * 3),
    k=st.tuples(*[st.integers(1, 3)] * 3),
    s=st.tuples(*[st.integers(1, 3)] * 3),
    p=st.tuples(*[st.integers(0, 2)] * 3),
)
def test_conv_output_shape_matches_enumeration(n, k, s, p):
    if any(ni + 2 * pi < ki for ni, ki, pi in zip(n, k, p)):
        with pytest.raises(T.ShapeError):
            _conv(np.zeros((1, 1) + n), np.zeros((1, 1) + k), np.zeros(1), s, p)
        return
    out = _conv(np.zeros((1, 1) + n), np.zeros((1, 1) + k), np.zeros(1), s, p)
    assert out.shape[2:] == tuple(enumerate_output_extent(*args) for args in zip(n, k, s, p))


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(T.ShapeError) as exc:
        _conv(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)), np.zeros(1))
    assert exc.value.axis == "Cin"


def test_conv_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 8, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
    b = np.zeros(4, np.float32)
    a1, a2 = _conv(x, w, b, 1, 1), _conv(x, w, b, 1, 1)
    assert a1.tobytes() == a2.tobytes()


def test_conv_sum_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    arrays = [rng.standard_normal((1, 2, 4, 5, 3)), rng.standard_normal((2, 2, 3, 3, 3)), rng.standard_normal(2)]

    def fn(x, w, b):
        return T.tsum(T.conv3d(x, w, b, 1, 1))

    assert gradcheck.check(fn, arrays) < 1e-5


# -- instance norm -----------------------------------------------------------


def test_instance_norm_standardizes_each_slice():
    x = np.random.default_rng(5).normal(3.0, 2.0, (2, 3, 4, 5, 6))
    out = T.instance_norm(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))).data
    np.testing.assert_allclose(out.mean(axis=(2, 3, 4)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(2, 3, 4)), 1, atol=1e-5)


def test_instance_norm_constant_slice_is_beta():
    x = np.full((1, 2, 3, 3, 3), 7.0)
    beta = np.array([0.5, -1.0])
    out = T.instance_norm(T.Tensor(x), T.Tensor(np.array([2.0, 3.0])), T.Tensor(beta)).data
    np.testing.assert_array_equal(out[0, :, 0, 0, 0], beta)


def test_instance_norm_matches_two_pass_oracle():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 3, 4, 2))
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    out = T.instance_norm(T.Tensor(x), T.Tensor(g), T.Tensor(b)).data
    np.testing.assert_allclose(out, instance_norm_stats(x, g, b, 1e-5), atol=1e-12)


# -- upsampling --------------------------------------------------------------


def test_upsample_constant_stays_constant():
    x = np.full((1, 2, 3, 2, 4), 1.5)
    out = T.trilinear_upsample(T.Tensor(x)).data
    assert out.shape == (1, 2, 6, 4, 8)
    assert np.all(out == 1.5)


def test_upsample_ramp_interior_is_linear():
    ramp = np.arange(4.0).reshape(1, 1, 4, 1, 1) * np.ones((1, 1, 4, 2, 2))
    out = T.trilinear_upsample(T.Tensor(ramp)).data[0, 0, :, 0, 0]
    # half-pixel sample centres: (j + 0.5) / 2 - 0.5, clamped at the borders
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0])


def test_upsample_matches_voxelwise_oracle():
    x = np.random.default_rng(7).standard_normal((2, 2, 3, 4, 2))
    np.testing.assert_allclose(T.trilinear_upsample(T.Tensor(x)).data, trilinear_upsample2(x), atol=1e-12)


def test_upsample_matches_torch_reference():
    torch = pytest.importorskip("torch")
    x = np.random.default_rng(8).standard_normal((1, 3, 3, 5, 4))
    ref = torch.nn.functional.interpolate(torch.from_numpy(x), scale_factor=2, mode="trilinear", align_corners=False).numpy()
    np.testing.assert_allclose(T.trilinear_upsample(T.Tensor(x)).data, ref, atol=1e-12)


# -- backward mechanics ------------------------------------------------------


def test_sum_backward_is_ones():
    x = T.Tensor(np.random.default_rng(9).standard_normal((2, 3)), requires_grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_backward_is_twice_input():
    a = np.random.default_rng(10).standard_normal((3, 4))
    x = T.Tensor(a, requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * a)


def test_chain_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    arrays = [
        rng.standard_normal((1, 2, 4, 4, 3)),
        rng.standard_normal((3, 2, 3, 3, 3)) * 0.4,
        rng.standard_normal(3),
        rng.uniform(0.5, 1.5, 3),
        rng.standard_normal(3),
    ]

    def fn(x, w, b, g, be):
        return T.sigmoid(T.leaky_relu(T.instance_norm(T.conv3d(x, w, b, 1, 1), g, be)))

    assert gradcheck.check(fn, arrays, seed=11) < 1e-4


def test_second_backward_raises():
    x = T.Tensor(np.ones(3), requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    with pytest.raises(T.GraphError):
        loss.backward()


def test_unreachable_input_gets_zero_gradient():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.Tensor(np.ones(2), requires_grad=True)
    T.backward(T.tsum(x), [x, y])
    np.testing.assert_array_equal(y.grad, np.zeros(2))


def test_gradients_accumulate_over_reuse():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tsum(T.add(T.scale(x, 3.0), x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_no_grad_builds_no_graph():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


def test_add_shape_mismatch_names_axis():
    with pytest.raises(T.ShapeError) as exc:
        T.add(T.Tensor(np.zeros((1, 2, 3))), T.Tensor(np.zeros((1, 4, 3))))
    assert exc.value.axis == 1


# -- properties --------------------------------------------------------------


@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=50))
def test_sigmoid_in_unit_interval(vals):
    s = T.sigmoid(T.Tensor(np.array(vals))).data
    assert np.all((s >= 0) & (s <= 1))
    assert np.all(np.isfinite(s))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_concat_channel_count(c1, c2, n):
    a, b = np.zeros((n, c1, 2, 2, 2)), np.ones((n, c2, 2, 2, 2))
    out = T.channel_concat(T.Tensor(a), T.Tensor(b)).data
    assert out.shape[1] == c1 + c2
    assert np.all(out[:, :c1] == 0) and np.all(out[:, c1:] == 1)


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=30), st.floats(0.0, 0.5))
def test_leaky_relu_keeps_positives_and_scales_negatives(vals, slope):
    x = np.array(vals)
    out = T.leaky_relu(T.Tensor(x), slope).data
    np.testing.assert_array_equal(out[x > 0], x[x > 0])
    np.testing.assert_array_equal(out[x <= 0], x[x <= 0] * slope)


@pytest.mark.parametrize("name", gradcheck.OP_NAMES)
def test_op_finite_difference_soundness(name):
    errs = []
    for i in range(20):
        rng = np.random.default_rng([0, i])
        for op, fn, arrays in gradcheck.op_cases(rng):
            if op == name:
                errs.append(gradcheck.check(fn, arrays, seed=i))
    assert len(errs) == 20
    assert max(errs) < gradcheck.TOL
