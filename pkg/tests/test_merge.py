"""Weighting, confidence, smoothing and the merge rule against scalar oracles."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contseg.merge import (
    BodyPartDistribution,
    MergeContext,
    anomaly_diameter,
    build_context,
    compute_distribution,
    confidence_map,
    gaussian_smooth,
    merge_predictions,
    rasterize_distribution,
    simple_ensemble,
    weighting_map,
    win_counts,
    write_merged,
)
from contseg.nn.tensor import load_tensor


def scalar_merge(preds, confs, ps, eps):
    """Per-voxel reference: loop over voxels and tasks with plain floats."""
    t_count = len(preds)
    out = np.zeros(preds[0].shape, dtype=np.int16)
    for j in np.ndindex(preds[0].shape):
        best, best_h = None, None
        for t in range(t_count):
            if preds[t][j] == 0:
                continue
            m = 1.0 - 0.5 * (1.0 - ps[t][j] + eps[t][j] * ps[t][j])
            x = min(max(m * confs[t][j], 1e-12), 1.0)
            h = -x * math.log(x)
            if best_h is None or h < best_h:
                best, best_h = t, h
        out[j] = 0 if best is None else preds[best][j]
    return out


def random_instance(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, size=3))
    preds, confs, ps, eps = [], [], [], []
    for t in range(3):
        classes = rng.choice(np.arange(1, 10), size=2, replace=False)
        preds.append(np.where(rng.uniform(size=shape) < 0.4, 0, rng.choice(classes, size=shape)).astype(np.int16))
        confs.append(rng.uniform(size=shape))
        # coarse grids make exact ties possible
        ps.append(rng.choice([0.0, 0.25, 0.5, 1.0], size=shape))
        eps.append(rng.choice([0.0, 0.5, 1.0], size=shape))
    return preds, confs, ps, eps


class TestWeightingMap:
    def test_corner_truth_table(self):
        p = np.array([1.0, 0.0, 1.0, 0.0])
        e = np.array([0.0, 0.0, 1.0, 1.0])
        assert weighting_map(p, e).tolist() == [1.0, 0.5, 0.5, 0.5]

    def test_midpoint(self):
        assert weighting_map(np.array(0.5), np.array(0.0)) == 0.75

    def test_draft_form(self):
        p = np.array([1.0, 0.0, 1.0, 0.0])
        e = np.array([0.0, 0.0, 1.0, 1.0])
        assert weighting_map(p, e, draft=True).tolist() == [0.0, 0.5, 0.5, 0.5]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            weighting_map(np.array([1.2]), np.array([0.0]))
        with pytest.raises(ValueError):
            weighting_map(np.array([0.5]), np.array([-0.1]))

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_anomaly_never_raises_weight(self, p, e1, e2):
        lo, hi = sorted((e1, e2))
        assert weighting_map(np.array(p), np.array(hi)) <= weighting_map(np.array(p), np.array(lo))


class TestConfidence:
    def test_half(self):
        assert abs(float(confidence_map(np.array(1.0), np.array(0.5))) - 0.34657) < 1e-4

    def test_one_is_zero(self):
        assert float(confidence_map(np.array(1.0), np.array(1.0))) == 0.0

    def test_zero_clamped(self):
        h = float(confidence_map(np.array(0.0), np.array(0.7)))
        assert 0.0 <= h < 1e-10

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_range(self, m, y):
        h = float(confidence_map(np.array(m), np.array(y)))
        assert 0.0 <= h <= 1 / math.e + 1e-9


class TestSmoothing:
    def test_sigma_zero_identity(self):
        v = np.random.default_rng(0).uniform(size=(4, 5, 6))
        assert gaussian_smooth(v, 0).tobytes() == v.tobytes()

    def test_constant_preserved(self):
        v = np.full((6, 6, 6), 0.3)
        np.testing.assert_allclose(gaussian_smooth(v, (1.0, 2.0, 0.5)), 0.3, rtol=1e-12)

    def test_impulse_center(self):
        v = np.zeros((9, 9, 9))
        v[4, 4, 4] = 1.0
        x = np.arange(-3, 4)
        k = np.exp(-x ** 2 / 2.0)
        k /= k.sum()
        assert gaussian_smooth(v, 1.0)[4, 4, 4] == pytest.approx(k[3] ** 3, rel=1e-12)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_smooth(np.zeros((2, 2, 2)), -1)

    def test_mass_preserved_away_from_border(self):
        v = np.zeros((15, 15, 15))
        v[7, 7, 7] = 1.0
        assert gaussian_smooth(v, 1.5).sum() == pytest.approx(1.0, rel=1e-12)


class TestDistribution:
    def test_inside_one_part(self):
        bp = np.repeat(np.arange(1, 5), 2)[:, None, None] * np.ones((8, 4, 4), int)
        lab = np.zeros((8, 4, 4), int)
        lab[2:4, 1:3, 1:3] = 5
        d = compute_distribution([lab], [bp])
        assert d.fractions.tolist() == [0, 1, 0, 0]

    def test_split_75_25(self):
        bp = np.repeat(np.arange(1, 5), 4)[:, None, None] * np.ones((16, 2, 2), int)
        lab = np.zeros((16, 2, 2), int)
        lab[5, 0, 0], lab[8, 1, 1] = 1, 2      # bbox depths 5..8: three in part 2, one in part 3
        np.testing.assert_allclose(compute_distribution([lab], [bp]).fractions, [0, 0.75, 0.25, 0])

    def test_average_of_samples(self):
        bp = np.repeat(np.arange(1, 5), 2)[:, None, None] * np.ones((8, 2, 2), int)
        a = np.zeros((8, 2, 2), int)
        a[2:4] = 1
        b = np.zeros((8, 2, 2), int)
        b[2:6] = 1
        np.testing.assert_allclose(compute_distribution([a, b], [bp, bp]).fractions, [0, 0.75, 0.25, 0])

    def test_empty_sample_skipped(self, caplog):
        bp = np.ones((2, 2, 2), int)
        lab = np.zeros((2, 2, 2), int)
        full = np.ones((2, 2, 2), int)
        d = compute_distribution([lab, full], [bp, bp])
        assert d.n_samples == 1 and d.fractions[0] == 1.0
        assert "no labeled voxels" in caplog.text

    def test_outside_body_remainder(self):
        bp = np.zeros((4, 4, 4), int)
        bp[:2] = 1
        lab = np.ones((4, 4, 4), int)
        d = compute_distribution([lab], [bp])
        assert d.fractions.sum() == pytest.approx(0.5)

    def test_invalid_rows(self):
        with pytest.raises(ValueError):
            BodyPartDistribution(np.array([0.7, 0.7]))

    def test_rasterize(self):
        d = BodyPartDistribution(np.array([0.1, 0.9]))
        np.testing.assert_allclose(rasterize_distribution(d, np.array([0, 1, 2])), [0, 0.1, 0.9])

    def test_anomaly_diameter(self):
        m = np.zeros((5, 5, 5), bool)
        m[2, 2, 2] = True
        assert anomaly_diameter([m, np.zeros_like(m)]) == pytest.approx(2 * (3 / (4 * np.pi)) ** (1 / 3))


def _ctx(name, pred, conf, p=1.0, eps=0.0):
    shape = np.shape(pred)
    return MergeContext(name, np.asarray(pred, np.int16), np.asarray(conf, float), np.full(shape, p), np.full(shape, eps))


class TestMerge:
    def test_single_task_relabel(self):
        pred = np.array([[[3, 5], [5, 3]]])
        merged, winner = merge_predictions([_ctx("a", pred, np.full(pred.shape, 0.7))])
        assert merged.tolist() == pred.tolist()
        assert (winner == 0).all()

    def test_argmin_picks_more_confident(self):
        # H(0.30) vs H(0.10): choose M*Y so that -x ln x equals these
        a = _ctx("a", [[[1]]], [[[0.5]]])
        b = _ctx("b", [[[2]]], [[[0.95]]])
        ha = float(confidence_map(np.array(1.0), np.array(0.5)))
        hb = float(confidence_map(np.array(1.0), np.array(0.95)))
        assert hb < ha
        merged, winner = merge_predictions([a, b])
        assert merged.item() == 2 and winner.item() == 1

    def test_background_when_no_foreground(self):
        merged, winner = merge_predictions([_ctx("a", [[[0]]], [[[0.9]]]), _ctx("b", [[[0]]], [[[0.2]]])])
        assert merged.item() == 0 and winner.item() == -1

    def test_tie_goes_to_lowest_index(self):
        merged, winner = merge_predictions([_ctx("a", [[[4]]], [[[0.6]]]), _ctx("b", [[[7]]], [[[0.6]]])])
        assert merged.item() == 4 and winner.item() == 0

    def test_zero_weight_background_task_cannot_win(self):
        # x -> 0 would look maximally confident; a background prediction never competes
        merged, _ = merge_predictions([_ctx("a", [[[2]]], [[[0.5]]]), _ctx("b", [[[0]]], [[[0.0]]])])
        assert merged.item() == 2

    def test_empty_list(self):
        with pytest.raises(ValueError):
            merge_predictions([])

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            MergeContext("a", np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2, 1)), np.zeros((2, 2, 2)))

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_scalar_oracle(self, seed):
        preds, confs, ps, eps = random_instance(seed)
        contexts = [MergeContext(str(t), preds[t], confs[t], ps[t], eps[t]) for t in range(3)]
        merged, _ = merge_predictions(contexts)
        np.testing.assert_array_equal(merged, scalar_merge(preds, confs, ps, eps))

    @given(st.floats(2 / math.e, 1.0), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=200)
    def test_raising_anomaly_never_flips_toward_task(self, y, p, e_lo, e_hi, other_conf):
        # with y >= 2/e every weighted confidence lies where -x ln x is decreasing
        e_lo, e_hi = sorted((e_lo, e_hi))
        other = _ctx("o", [[[1]]], [[[other_conf]]], p=0.5, eps=0.0)
        lo = merge_predictions([_ctx("t", [[[2]]], [[[y]]], p=p, eps=e_lo), other])[0].item()
        hi = merge_predictions([_ctx("t", [[[2]]], [[[y]]], p=p, eps=e_hi), other])[0].item()
        assert not (lo != 2 and hi == 2)

    def test_low_confidence_anomaly_can_flip_toward_task(self):
        # below 1/e the entropy grows with x, so a smaller weight lowers H
        other = _ctx("o", [[[1]]], [[[0.3]]], p=0.5, eps=0.0)
        lo = merge_predictions([_ctx("t", [[[2]]], [[[0.25]]], p=1.0, eps=0.0), other])[0].item()
        hi = merge_predictions([_ctx("t", [[[2]]], [[[0.25]]], p=1.0, eps=1.0), other])[0].item()
        assert (lo, hi) == (1, 2)


def test_build_context_maps_to_global_ids():
    probs = np.zeros((3, 1, 2, 2))
    probs[0, 0, 0, 0] = 1.0
    probs[1, 0, 0, 1] = 0.8
    probs[0, 0, 0, 1] = 0.2
    probs[2, 0, 1] = 1.0
    dist = BodyPartDistribution(np.array([1.0]))
    ctx = build_context("t", probs, [4, 9], np.ones((1, 2, 2), int), dist, np.zeros((1, 2, 2)))
    assert ctx.pred.tolist() == [[[0, 4], [9, 9]]]
    assert ctx.confidence[0, 0, 1] == pytest.approx(0.8)
    with pytest.raises(ValueError):
        build_context("t", probs, [4], np.ones((1, 2, 2), int), dist, np.zeros((1, 2, 2)))


def test_simple_ensemble_comparator():
    a = np.array([[0.2], [0.8]]).reshape(2, 1, 1, 1)     # bg, class 1
    b = np.array([[0.6], [0.4]]).reshape(2, 1, 1, 1)     # bg, class 1 (overlap)
    assert simple_ensemble([a, b], [[1], [1]], 2).item() == 1
    c = np.array([[0.9], [0.1]]).reshape(2, 1, 1, 1)     # bg, class 2
    assert simple_ensemble([a, c], [[1], [2]], 2).item() == 1


def test_write_merged(tmp_path):
    merged = np.array([[[0, 1], [2, 1]]], np.int16)
    winner = np.array([[[-1, 0], [1, 0]]])
    wins = win_counts(winner, ["a", "b"])
    assert wins == {"a": 2, "b": 1}
    write_merged(tmp_path / "m.cstn", merged, ["background", "x", "y"], wins)
    assert load_tensor(tmp_path / "m.cstn").tolist() == merged.tolist()
    assert (tmp_path / "m.names.txt").read_text().splitlines() == ["0\tbackground", "1\tx", "2\ty"]
    assert (tmp_path / "m.wins.csv").read_text().splitlines() == ["task,wins", "a,2", "b,1"]
