import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import brute_force_metrics, flood_fill_labels, same_partition
from petseg.metrics import (
    MetricsError,
    connected_components,
    dice_score,
    evaluate_case,
    false_negative_volume,
    false_positive_volume,
    summarize,
)
from petseg.volume import Volume

UNIT = (1.0, 1.0, 1.0)
masks = hnp.arrays(np.uint8, (6, 6, 5), elements=st.integers(0, 1))


def cube(shape, lo, hi):
    m = np.zeros(shape, dtype=np.uint8)
    m[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = 1
    return m


def random_mask(rng, shape=(16, 16, 16)):
    # mix of densities so both sparse blobs and percolating clusters appear
    return (rng.random(shape) < rng.uniform(0.02, 0.35)).astype(np.uint8)


def test_metrics_match_flood_fill_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    spacing = (2.0, 2.0, 3.0)
    for _ in range(200):
        pred, gt = random_mask(rng), random_mask(rng)
        dice, fp, fn = brute_force_metrics(pred, gt, 12.0 / 1000)
        assert dice_score(pred, gt) == dice
        assert false_positive_volume(pred, gt, spacing) == fp
        assert false_negative_volume(pred, gt, spacing) == fn


@pytest.mark.parametrize("conn", [6, 18, 26])
def test_components_match_flood_fill(conn):
    rng = np.random.default_rng(conn)
    for _ in range(20):
        m = random_mask(rng, (10, 9, 8))
        cc = connected_components(m, conn)
        labels, k = flood_fill_labels(m, conn)
        assert cc.count == k
        assert same_partition(cc.labels, labels)
        assert cc.sizes.sum() == m.sum()


def test_diagonal_voxels_depend_on_connectivity():
    m = np.zeros((3, 3, 3), np.uint8)
    m[0, 0, 0] = m[1, 1, 1] = 1
    assert connected_components(m, 26).count == 1
    assert connected_components(m, 18).count == 2
    m2 = np.zeros((3, 3, 3), np.uint8)
    m2[0, 0, 1] = m2[1, 1, 1] = 1  # edge neighbours
    assert connected_components(m2, 18).count == 1
    assert connected_components(m2, 6).count == 2


def test_identical_masks():
    m = cube((8, 8, 8), (1, 1, 1), (4, 4, 4))
    assert dice_score(m, m) == 1.0
    assert false_positive_volume(m, m, UNIT) == 0.0
    assert false_negative_volume(m, m, UNIT) == 0.0


def test_both_empty_is_perfect():
    z = np.zeros((4, 4, 4), np.uint8)
    assert dice_score(z, z) == 1.0
    assert false_positive_volume(z, z, UNIT) == 0.0


def test_disjoint_prediction_counts_all_volume():
    gt = cube((10, 10, 10), (0, 0, 0), (2, 2, 2))  # 8 voxels
    pred = cube((10, 10, 10), (6, 6, 6), (9, 9, 9))  # 27 voxels
    assert dice_score(pred, gt) == 0.0
    spacing = (2.0, 2.0, 2.0)  # 8 mm^3 per voxel
    assert false_positive_volume(pred, gt, spacing) == pytest.approx(27 * 8 / 1000)
    assert false_negative_volume(pred, gt, spacing) == pytest.approx(8 * 8 / 1000)


def test_touching_component_is_not_false_positive():
    gt = cube((10, 10, 10), (2, 2, 2), (4, 4, 4))
    pred = cube((10, 10, 10), (3, 3, 3), (8, 8, 8))  # overlaps gt in one voxel
    assert false_positive_volume(pred, gt, UNIT) == 0.0
    assert false_negative_volume(pred, gt, UNIT) == 0.0
    assert dice_score(pred, gt) == pytest.approx(2 * 1 / (8 + 125))


def test_only_untouched_components_counted():
    gt = cube((12, 12, 12), (0, 0, 0), (3, 3, 3)) | cube((12, 12, 12), (8, 8, 8), (10, 10, 10))
    pred = cube((12, 12, 12), (1, 1, 1), (2, 2, 2))
    assert false_negative_volume(pred, gt, UNIT) == pytest.approx(8 / 1000)


def test_non_binary_rejected():
    with pytest.raises(MetricsError):
        dice_score(np.full((2, 2, 2), 0.5), np.zeros((2, 2, 2)))


def test_grid_mismatch_rejected():
    with pytest.raises(MetricsError):
        dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(MetricsError):
        evaluate_case(Volume(np.zeros((2, 2, 2)), UNIT), Volume(np.zeros((2, 2, 2)), UNIT, (5.0, 0, 0)))


def test_invalid_connectivity():
    with pytest.raises(MetricsError):
        connected_components(np.zeros((2, 2, 2)), 8)


@given(masks, masks)
def test_dice_symmetric_and_bounded(a, b):
    d = dice_score(a, b)
    assert d == dice_score(b, a)
    assert 0.0 <= d <= 1.0


@given(masks, masks)
def test_fp_fn_swap_under_role_exchange(a, b):
    assert false_positive_volume(a, b, UNIT) == false_negative_volume(b, a, UNIT)


@given(masks, masks)
def test_unmatched_volume_never_exceeds_mask_volume(a, b):
    assert false_positive_volume(a, b, UNIT) <= a.sum() / 1000 + 1e-12
    assert false_negative_volume(a, b, UNIT) <= b.sum() / 1000 + 1e-12


def test_fp_additive_over_separated_components():
    gt = cube((20, 20, 20), (0, 0, 0), (2, 2, 2))
    p1 = cube((20, 20, 20), (6, 6, 6), (8, 8, 8))
    p2 = cube((20, 20, 20), (14, 14, 14), (17, 17, 17))
    total = false_positive_volume(p1 | p2, gt, UNIT)
    assert total == pytest.approx(false_positive_volume(p1, gt, UNIT) + false_positive_volume(p2, gt, UNIT))


def test_evaluate_case_uses_ground_truth_spacing():
    gt = Volume(cube((6, 6, 6), (0, 0, 0), (2, 2, 2)).astype(np.float32), (2.0, 2.0, 3.0))
    pred = gt.with_data(cube((6, 6, 6), (4, 4, 4), (5, 5, 5)).astype(np.float32))
    r = evaluate_case(pred, gt, "c")
    assert r.as_row() == {"case": "c", "dice": 0.0, "fp_volume_ml": pytest.approx(0.012), "fn_volume_ml": pytest.approx(0.096)}


def test_summarize_mean_and_std():
    from petseg.metrics import MetricsReport

    s = summarize([MetricsReport("a", 1.0, 0.0, 2.0), MetricsReport("b", 0.5, 1.0, 0.0)])
    assert s["dice"] == {"mean": 0.75, "std": 0.25}
    assert s["fn_volume_ml"]["mean"] == 1.0
