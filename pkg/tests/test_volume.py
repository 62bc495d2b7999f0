import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from petseg.volume import (
    CT_WINDOW,
    SUV_WINDOW,
    IntensityWindow,
    Volume,
    index_to_physical,
    physical_to_index,
    resample,
    resampled_grid,
    window_normalize,
)

spacings = st.tuples(*[st.floats(0.5, 5.0)] * 3)


def ramp_volume(coeffs=(1.0, 0.0, 0.0), offset=0.0, dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    axes = [origin[i] + np.arange(dims[i]) * spacing[i] for i in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    return Volume(coeffs[0] * x + coeffs[1] * y + coeffs[2] * z + offset, spacing, origin)


def physical_centres(v):
    axes = [v.origin[i] + np.arange(v.dims[i]) * v.spacing[i] for i in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def test_identity_spacing_is_bitwise_identity():
    v = Volume(np.random.default_rng(0).standard_normal((5, 6, 7)).astype(np.float32), (2, 2, 3), (1.5, -2, 4))
    out = resample(v, (2.0, 2.0, 3.0))
    assert out.dims == v.dims and out.spacing == v.spacing and out.origin == v.origin
    assert out.data.tobytes() == v.data.tobytes()


@given(spacings, spacings)
def test_constant_volume_stays_constant(src, dst):
    v = Volume(np.full((6, 5, 4), 7.0), src)
    out = resample(v, dst)
    assert np.all(out.data == 7.0)


def test_ramp_reproduces_affine_field():
    v = ramp_volume()
    out = resample(v, (2.0, 2.0, 3.0))
    assert out.dims == (4, 4, 3)
    x, _, _ = physical_centres(out)
    np.testing.assert_allclose(out.data, x, atol=1e-6, rtol=0)


@given(
    st.tuples(*[st.floats(-3, 3)] * 3),
    st.tuples(*[st.floats(-20, 20)] * 3),
    st.sampled_from([(2.0, 2.0, 3.0), (1.5, 2.5, 2.0), (3.0, 3.0, 3.0)]),
)
def test_affine_field_reproduced_inside_extent(coeffs, origin, target):
    v = ramp_volume(coeffs, 0.7, (10, 9, 12), (1.0, 1.25, 1.1), origin)
    out = resample(v, target)
    x, y, z = physical_centres(out)
    # only voxels whose centre lies inside the source sample range: outside, values are edge-clamped
    lo = [v.origin[i] for i in range(3)]
    hi = [v.origin[i] + (v.dims[i] - 1) * v.spacing[i] for i in range(3)]
    inside = (x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2])
    expected = coeffs[0] * x + coeffs[1] * y + coeffs[2] * z + 0.7
    np.testing.assert_allclose(out.data[inside], expected[inside], atol=1e-6, rtol=0)


def test_output_dims_round_half_away_from_zero():
    # 5 voxels of 1 mm to 2 mm: 2.5 -> 3
    v = Volume(np.zeros((5, 3, 1)), (1.0, 1.0, 1.0))
    dims, _ = resampled_grid(v, (2.0, 2.0, 3.0))
    assert dims == (3, 2, 1)


def test_edge_samples_are_clamped():
    v = Volume(np.arange(4.0).reshape(4, 1, 1) * np.ones((4, 2, 2)), (1.0, 1.0, 1.0))
    out = resample(v, (2.5, 1.0, 1.0))
    # centres at -0.5 + 1.25 = 0.75 and 3.25; the second lies past the last sample (3.0)
    np.testing.assert_allclose(out.data[:, 0, 0], [0.75, 3.0])


@given(hnp.arrays(np.uint8, st.tuples(*[st.integers(1, 8)] * 3), elements=st.integers(0, 1)), spacings, spacings)
def test_nearest_resampling_of_mask_stays_binary(mask, src, dst):
    out = resample(Volume(mask.astype(np.float32), src), dst, mode="nearest")
    assert set(np.unique(out.data)) <= {0.0, 1.0}


def test_coarse_then_fine_is_not_invertible_for_random_data():
    v = Volume(np.random.default_rng(1).standard_normal((12, 12, 12)), (1.0, 1.0, 1.0))
    back = resample(resample(v, (3.0, 3.0, 3.0)), (1.0, 1.0, 1.0))
    assert back.dims == v.dims
    assert not np.allclose(back.data, v.data, atol=1e-3)


def test_ct_window_examples():
    v = Volume(np.array([-100.0, 250.0, 75.0, -1000.0, 3000.0]).reshape(5, 1, 1))
    np.testing.assert_allclose(window_normalize(v, CT_WINDOW).data.ravel(), [0.0, 1.0, 0.5, 0.0, 1.0])


def test_suv_window_clamps_above():
    v = Volume(np.array([40.0, 7.5]).reshape(2, 1, 1))
    np.testing.assert_allclose(window_normalize(v, SUV_WINDOW).data.ravel(), [1.0, 0.5])


def test_window_requires_ordered_bounds():
    with pytest.raises(ValueError):
        IntensityWindow(5.0, 5.0)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=40))
def test_window_output_in_unit_interval_and_monotone(vals):
    vals = np.sort(np.array(vals))
    out = window_normalize(Volume(vals.reshape(-1, 1, 1)), CT_WINDOW).data.ravel()
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.diff(out) >= 0)


def test_physical_to_index_examples():
    v = Volume(np.zeros((4, 4, 4)), (2.0, 2.0, 3.0))
    np.testing.assert_array_equal(physical_to_index(v, v.origin), [0, 0, 0])
    np.testing.assert_array_equal(physical_to_index(v, (4.0, 2.0, 3.0)), [2, 1, 1])


def test_physical_index_round_trip():
    rng = np.random.default_rng(2)
    v = Volume(np.zeros((3, 3, 3)), (0.7, 1.9, 3.3), (-12.0, 4.5, 100.0))
    for p in rng.uniform(-500, 500, size=(100, 3)):
        np.testing.assert_allclose(index_to_physical(v, physical_to_index(v, p)), p, atol=1e-9, rtol=0)


@pytest.mark.parametrize("kw", [dict(spacing=(0, 1, 1)), dict(spacing=(1, -1, 1)), dict(origin=(0, 0))])
def test_invalid_volume_rejected(kw):
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), **kw)
