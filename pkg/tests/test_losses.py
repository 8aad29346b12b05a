"""Dice+CE, MiB-style UNCE/UNKD and 3D local POD."""
import numpy as np
import pytest

from contseg.losses import (
    DICE_SMOOTH,
    POD_FACTOR,
    UNKD_WEIGHT,
    cross_entropy,
    dice_ce_loss,
    local_pod_3d,
    local_pod_backward,
    merge_into_background,
    pod_distill_loss,
    soft_dice_loss,
    unce_loss,
    unkd_loss,
)
from contseg.nn import softmax
from contseg.nn.gradcheck import max_relative_error, numerical_gradient

GRAD_TOL = 1e-3
H = 1e-6


def random_probs(seed, k=4, shape=(2, 3, 4, 4)):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(shape[0], k) + shape[1:])
    return softmax(logits, axis=1)


def random_labels(seed, k, shape=(2, 3, 4, 4)):
    return np.random.default_rng(seed + 100).integers(0, k, size=shape)


def fd_error(loss_fn, probs):
    analytic = loss_fn(probs).grad
    numeric = numerical_gradient(lambda: loss_fn(probs).value, probs, h=H)
    return max_relative_error(analytic, numeric, floor=1e-6)


class TestDiceCE:
    def test_perfect_prediction(self):
        labels = random_labels(0, 3)
        probs = np.moveaxis(np.eye(3)[labels], -1, 1)
        assert cross_entropy(probs, labels).value == 0.0
        assert soft_dice_loss(probs, labels).value < 1e-4
        assert dice_ce_loss(probs, labels).value < 1e-4

    @pytest.mark.parametrize("k", [2, 3, 6])
    def test_uniform_ce(self, k):
        labels = random_labels(1, k)
        probs = np.full((2, k, 3, 4, 4), 1.0 / k)
        assert cross_entropy(probs, labels).value == pytest.approx(np.log(k), abs=1e-12)

    def test_dice_by_hand(self):
        probs = np.zeros((1, 2, 1, 1, 2))
        probs[0, :, 0, 0, 0] = (0.25, 0.75)
        probs[0, :, 0, 0, 1] = (0.5, 0.5)
        labels = np.array([[[[1, 0]]]])
        d_bg = (2 * 0.5 + DICE_SMOOTH) / (0.75 + 1 + DICE_SMOOTH)
        d_fg = (2 * 0.75 + DICE_SMOOTH) / (1.25 + 1 + DICE_SMOOTH)
        assert soft_dice_loss(probs, labels).value == pytest.approx(1 - (d_bg + d_fg) / 2, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            dice_ce_loss(random_probs(0, k=3), random_labels(0, 4))

    @pytest.mark.parametrize("seed", range(4))
    def test_gradient(self, seed):
        labels = random_labels(seed, 4)
        assert fd_error(lambda p: dice_ce_loss(p, labels), random_probs(seed)) < GRAD_TOL

    def test_masked_gradient(self):
        labels = random_labels(5, 4)
        mask = np.random.default_rng(5).uniform(size=labels.shape) < 0.6
        assert fd_error(lambda p: dice_ce_loss(p, labels, mask), random_probs(5)) < GRAD_TOL

    def test_mask_ignores_outside(self):
        labels = random_labels(6, 3)
        mask = np.zeros(labels.shape, bool)
        mask[:, :2] = True
        p1 = random_probs(6, k=3)
        p2 = p1.copy()
        p2[:, :, 2:] = random_probs(7, k=3)[:, :, 2:]
        assert dice_ce_loss(p1, labels, mask).value == pytest.approx(dice_ce_loss(p2, labels, mask).value)

    def test_grad_shape_and_finite(self):
        labels = random_labels(2, 4)
        probs = random_probs(2)
        probs[0, 1, 0, 0, 0] = 0.0
        loss = dice_ce_loss(probs, labels)
        assert loss.grad.shape == probs.shape and np.isfinite(loss.grad).all()


class TestUNCE:
    def test_empty_old_is_ce(self):
        probs, labels = random_probs(0, k=5), random_labels(0, 5)
        a, b = unce_loss(probs, labels, ()), cross_entropy(probs, labels)
        assert a.value == b.value
        assert np.abs(a.grad - b.grad).max() == 0

    def test_merged_background_voxel(self):
        probs = np.zeros((1, 3, 1, 1, 1))
        probs[0, :, 0, 0, 0] = (0.7, 0.3, 0.0)
        labels = np.zeros((1, 1, 1, 1), int)
        assert unce_loss(probs, labels, old_classes={1}).value == pytest.approx(0.0, abs=1e-12)

    def test_overlap_not_merged(self):
        probs = np.zeros((1, 3, 1, 1, 1))
        probs[0, :, 0, 0, 0] = (0.5, 0.3, 0.2)
        labels = np.zeros((1, 1, 1, 1), int)
        value = unce_loss(probs, labels, old_classes={1, 2}, overlap_classes={2}, new_classes={2}).value
        assert value == pytest.approx(-np.log(0.8))

    def test_mass_conservation(self):
        probs = random_probs(3, k=6)
        q = merge_into_background(probs, [1, 3, 4])
        assert np.abs(q.sum(axis=1) - 1).max() < 1e-5
        assert (q[:, [1, 3, 4]] == 0).all()

    @pytest.mark.parametrize("old, overlap, new", [({1}, {2}, {2}), ({1, 2}, {0}, None), ({1, 2}, {2}, {3})])
    def test_bad_overlap(self, old, overlap, new):
        with pytest.raises(ValueError):
            unce_loss(random_probs(0, k=4), np.zeros((2, 3, 4, 4), int), old, overlap, new)

    def test_gradient(self):
        labels = np.where(random_labels(4, 5) == 1, 0, random_labels(4, 5))
        loss = lambda p: unce_loss(p, labels, old_classes={1, 2}, overlap_classes={2}, new_classes={2, 3, 4})
        assert fd_error(loss, random_probs(4, k=5)) < GRAD_TOL


class TestUNKD:
    def test_default_weight(self):
        assert UNKD_WEIGHT == 10

    def test_self_distillation_is_entropy(self):
        probs = random_probs(1, k=4)
        loss = unkd_loss(probs, probs.copy(), old_classes={1, 2, 3}, new_classes=set())
        entropy = -(probs * np.log(probs)).sum(axis=1).mean()
        assert loss.value == pytest.approx(UNKD_WEIGHT * entropy, rel=1e-12)

    def test_self_distillation_is_minimum(self):
        old = random_probs(2, k=3)
        base = unkd_loss(old, old, {1, 2}, set(), weight=1.0).value
        for s in range(5):
            other = random_probs(10 + s, k=3)
            assert unkd_loss(other, old, {1, 2}, set(), weight=1.0).value >= base

    def test_new_classes_merged(self):
        new = np.zeros((1, 4, 1, 1, 1))
        new[0, :, 0, 0, 0] = (0.2, 0.3, 0.1, 0.4)
        old = np.zeros((1, 3, 1, 1, 1))
        old[0, :, 0, 0, 0] = (0.5, 0.3, 0.2)
        value = unkd_loss(new, old, {1, 2}, {3}, weight=1.0).value
        expected = -(0.5 * np.log(0.6) + 0.3 * np.log(0.3) + 0.2 * np.log(0.1))
        assert value == pytest.approx(expected)

    def test_mismatched_sets(self):
        with pytest.raises(ValueError):
            unkd_loss(random_probs(0, k=4), random_probs(0, k=3), {1, 2, 3}, {3})
        with pytest.raises(ValueError):
            unkd_loss(random_probs(0, k=4), random_probs(0, k=3), {1, 2}, {2, 3})

    def test_gradient(self):
        new, old = random_probs(6, k=5), random_probs(7, k=3)
        loss = lambda p: unkd_loss(p, old, {1, 2}, {2, 3, 4}, overlap_classes={2})
        assert fd_error(loss, new) < GRAD_TOL


class TestPOD:
    def test_default_factor(self):
        assert POD_FACTOR == 0.001

    def test_constant_features(self):
        f = np.full((1, 3, 4, 4, 4), 2.5)
        np.testing.assert_allclose(local_pod_3d(f), 2.5)

    def test_descriptor_length(self):
        assert local_pod_3d(np.zeros((1, 2, 4, 4, 4)), scales=(1,)).shape == (1, 96)

    def test_multiscale_length(self):
        # scale 2: 8 regions of 2x2x2, each (4+4+4)*C entries
        assert local_pod_3d(np.zeros((3, 2, 4, 4, 4)), scales=(1, 2)).shape == (3, 96 + 8 * 12 * 2)

    def test_one_d_variant_length(self):
        assert local_pod_3d(np.zeros((1, 2, 4, 4, 4)), scales=(1,), one_d=True).shape == (1, 24)

    def test_rejects_non_5d(self):
        with pytest.raises(ValueError):
            local_pod_3d(np.zeros((2, 4, 4, 4)))

    @pytest.mark.parametrize("one_d", [False, True])
    def test_backward_is_adjoint(self, one_d):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(2, 3, 4, 6, 4))
        d = local_pod_3d(f, (1, 2), one_d)
        g = rng.normal(size=d.shape)
        assert (d * g).sum() == pytest.approx((f * local_pod_backward(g, f.shape, (1, 2), one_d)).sum())

    def test_identical_features_zero(self):
        f = [np.random.default_rng(1).normal(size=(1, 2, 4, 4, 4))]
        value, grads = pod_distill_loss(f, f)
        assert value == 0.0 and np.abs(grads[0]).max() == 0

    def test_gradient(self):
        rng = np.random.default_rng(3)
        old = [rng.normal(size=(2, 2, 4, 4, 4)), rng.normal(size=(2, 3, 2, 2, 2))]
        new = [o + rng.normal(scale=0.5, size=o.shape) for o in old]
        _, grads = pod_distill_loss(new, old)
        for i, f in enumerate(new):
            numeric = numerical_gradient(lambda: pod_distill_loss(new, old)[0], f, h=H)
            assert max_relative_error(grads[i], numeric, floor=1e-9) < GRAD_TOL
