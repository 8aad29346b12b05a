"""DSC, HD95, ASD and forgetting rate, checked against brute-force oracles."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contseg.metrics import (
    MetricRow,
    asd,
    class_metrics,
    dice,
    empty_sentinel,
    forgetting_rate,
    hd95,
    read_metrics_csv,
    surface,
    write_metrics_csv,
)

ORACLE_TOL = 1e-6


def brute_surface(mask):
    """Voxels with a face neighbour that is background or outside the volume."""
    out = np.zeros_like(mask)
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not 0 <= n[axis] < mask.shape[axis] or not mask[tuple(n)]:
                    out[idx] = True
    return out


def brute_distances(a, b, spacing):
    sa = np.argwhere(brute_surface(a)) * np.asarray(spacing)
    sb = np.argwhere(brute_surface(b)) * np.asarray(spacing)
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(axis=2))
    return np.concatenate([d.min(axis=1), d.min(axis=0)])


def random_masks(seed, max_side=6):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, max_side + 1, size=3))
    p = rng.uniform(0.1, 0.6)
    a = rng.uniform(size=shape) < p
    b = rng.uniform(size=shape) < p
    a.flat[rng.integers(a.size)] = True
    b.flat[rng.integers(b.size)] = True
    spacing = tuple(rng.uniform(0.5, 2.0, size=3))
    return a, b, spacing


class TestDice:
    def test_identical(self):
        m = np.zeros((4, 4, 4), bool)
        m[1:3, 1:3, 1:3] = True
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), bool)
        b = a.copy()
        a[0], b[3] = True, True
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 4), bool)
        b = a.copy()
        a[0, 0, :4], a[0, 1, :4] = True, True
        b[0, 1, :4], b[0, 2, :4] = True, True
        assert a.sum() == b.sum() == 8
        assert dice(a, b) == 0.5

    def test_both_empty(self):
        z = np.zeros((3, 3, 3), bool)
        assert dice(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_symmetric_and_bounded(self, seed):
        a, b, _ = random_masks(seed)
        assert dice(a, b) == dice(b, a)
        assert 0.0 <= dice(a, b) <= 1.0


class TestSurfaceDistances:
    def test_identical_zero(self):
        m = np.zeros((5, 5, 5), bool)
        m[1:4, 1:4, 1:4] = True
        assert hd95(m, m) == 0.0
        assert asd(m, m) == 0.0

    def test_single_voxels_apart(self):
        a = np.zeros((8, 8, 8), bool)
        b = a.copy()
        a[1, 2, 2], b[6, 2, 2] = True, True
        assert hd95(a, b, (1, 1, 1)) == 5.0

    def test_parallel_slabs(self):
        a = np.zeros((8, 6, 6), bool)
        b = a.copy()
        a[2], b[5] = True, True
        assert asd(a, b, (1, 1, 1)) == 3.0

    def test_empty_sentinel(self):
        a = np.zeros((4, 5, 6), bool)
        b = a.copy()
        b[0, 0, 0] = True
        diag = np.sqrt(4 ** 2 + 10 ** 2 + 18 ** 2)
        assert hd95(a, b, (1, 2, 3)) == pytest.approx(diag)
        assert asd(b, a, (1, 2, 3)) == pytest.approx(diag)
        assert empty_sentinel((4, 5, 6), (1, 2, 3)) == pytest.approx(diag)

    def test_both_empty_zero(self):
        z = np.zeros((3, 3, 3), bool)
        assert hd95(z, z) == 0.0 and asd(z, z) == 0.0

    @pytest.mark.parametrize("seed", range(30))
    def test_surface_matches_brute_force(self, seed):
        a, _, _ = random_masks(seed)
        np.testing.assert_array_equal(surface(a), brute_surface(a))

    @pytest.mark.parametrize("seed", range(60))
    def test_against_all_pairs_oracle(self, seed):
        a, b, spacing = random_masks(seed)
        d = brute_distances(a, b, spacing)
        assert abs(hd95(a, b, spacing) - np.percentile(d, 95)) < ORACLE_TOL
        assert abs(asd(a, b, spacing) - d.mean()) < ORACLE_TOL

    @given(st.integers(0, 10_000), st.floats(0.25, 4.0))
    @settings(max_examples=25, deadline=None)
    def test_symmetric_and_scale_linear(self, seed, k):
        a, b, spacing = random_masks(seed, max_side=5)
        assert hd95(a, b, spacing) == pytest.approx(hd95(b, a, spacing), abs=1e-12)
        assert asd(a, b, spacing) == pytest.approx(asd(b, a, spacing), abs=1e-12)
        scaled = tuple(k * s for s in spacing)
        assert hd95(a, b, scaled) == pytest.approx(k * hd95(a, b, spacing), rel=1e-9)
        assert asd(a, b, scaled) == pytest.approx(k * asd(a, b, spacing), rel=1e-9)


class TestForgetting:
    def test_published_entry(self):
        assert abs(forgetting_rate(93.24, 45.80) - 50.87) < 0.01

    def test_no_change(self):
        assert forgetting_rate(0.8, 0.8) == 0.0

    def test_improvement_floored(self):
        assert forgetting_rate(0.5, 0.9) == 0.0

    @pytest.mark.parametrize("snap", [0.0, -1.0])
    def test_nonpositive_snapshot(self, snap):
        with pytest.raises(ValueError):
            forgetting_rate(snap, 0.5)


def test_class_metrics_and_csv_round_trip(tmp_path):
    gt = np.zeros((6, 6, 6), np.int16)
    gt[1:3, 1:3, 1:3] = 4
    gt[3:5, 3:5, 3:5] = 7
    pred = gt.copy()
    pred[3:5, 3:5, 3:5] = 0
    rows = class_metrics([pred], [gt], [4, 7], (1, 1, 1), step=2, task="chest")
    assert [r.cls for r in rows] == [4, 7]
    assert rows[0].dsc == 1.0 and rows[0].hd95_mm == 0.0
    assert rows[1].dsc == 0.0 and rows[1].empty
    rows[0].forget_pct = 0.0
    path = tmp_path / "m.csv"
    write_metrics_csv(path, rows)
    header = path.read_text().splitlines()[0]
    assert header == "step,task,class,dsc,hd95_mm,asd_mm,forget_pct"
    back = read_metrics_csv(path)
    assert [(r.step, r.task, r.cls, r.dsc, r.hd95_mm, r.asd_mm) for r in back] == \
        [(r.step, r.task, r.cls, r.dsc, r.hd95_mm, r.asd_mm) for r in rows]
    assert back[0].forget_pct == 0.0 and back[1].forget_pct is None


def test_metric_row_fields():
    r = MetricRow(1, "t", 3, 0.5, 1.0, 0.5)
    assert set(r.csv_row()) == {"step", "task", "class", "dsc", "hd95_mm", "asd_mm", "forget_pct"}
    assert list(itertools.islice(r.csv_row().values(), 3)) == [1, "t", 3]
