import numpy as np
import pytest

from vamkit.seeding import make_rng
from vamkit.triplet import (Triplet, sample_triplets_cross_domain, sample_triplets_inshop,
                            triplet_loss, triplet_loss_grad, triplet_loss_grad_batch)


class TestLoss:
    def test_satisfied_triplet_is_zero(self):
        a = np.zeros(4)
        n = np.array([1.0, 0, 0, 0])
        assert triplet_loss(a, a, n, margin=0.2) == 0.0

    def test_degenerate_triplet_is_margin(self):
        v = np.zeros(4)
        assert triplet_loss(v, v, v, margin=0.2) == pytest.approx(0.2)

    def test_hinge_arithmetic(self):
        a = np.zeros(1)
        p = np.array([np.sqrt(0.5)])
        n = np.array([np.sqrt(0.4)])
        assert triplet_loss(a, p, n, margin=0.2) == pytest.approx(0.3, abs=1e-9)

    def test_non_negative_and_zero_condition(self, rng):
        for _ in range(100):
            a, p, n = (rng.standard_normal(8) for _ in range(3))
            loss = triplet_loss(a, p, n, margin=0.2)
            assert loss >= 0.0
            d_ap = float(((a - p) ** 2).sum())
            d_an = float(((a - n) ** 2).sum())
            assert (loss == 0.0) == (d_ap + 0.2 <= d_an)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            triplet_loss(np.zeros(3), np.zeros(4), np.zeros(3))

    def test_margin_must_be_positive(self):
        with pytest.raises(ValueError, match="margin"):
            triplet_loss(np.zeros(2), np.zeros(2), np.zeros(2), margin=0.0)


class TestLossGrad:
    def test_inactive_hinge_zero(self):
        a = np.zeros(3)
        n = np.full(3, 10.0)
        for g in triplet_loss_grad(a, a, n, margin=0.2):
            assert np.all(g == 0.0)

    def test_symmetric_degenerate(self):
        v = np.zeros(3)
        da, dp, dn = triplet_loss_grad(v, v, v, margin=0.5)
        assert np.all(da == 0.0) and np.all(dp == 0.0) and np.all(dn == 0.0)

    def test_matches_finite_differences_when_active(self):
        rng = make_rng(77, "fd")
        margin = 0.2
        checked = 0
        while checked < 20:
            a, p, n = (rng.standard_normal(6) for _ in range(3))
            arg = ((a - p) ** 2).sum() - ((a - n) ** 2).sum() + margin
            if abs(arg) < 1e-3 or arg < 0:  # stay away from the kink, need active
                continue
            grads = triplet_loss_grad(a, p, n, margin)
            h = 1e-4
            for vec, grad in zip((a, p, n), grads):
                for i in range(vec.size):
                    orig = vec[i]
                    vec[i] = orig + h
                    f_plus = triplet_loss(a, p, n, margin)
                    vec[i] = orig - h
                    f_minus = triplet_loss(a, p, n, margin)
                    vec[i] = orig
                    fd = (f_plus - f_minus) / (2 * h)
                    assert abs(fd - grad[i]) <= 1e-3 * max(abs(fd), abs(grad[i]), 1e-6)
            checked += 1

    def test_batch_matches_scalar(self, rng):
        A = rng.standard_normal((16, 5)).astype(np.float32)
        P = rng.standard_normal((16, 5)).astype(np.float32)
        N = rng.standard_normal((16, 5)).astype(np.float32)
        losses, dA, dP, dN = triplet_loss_grad_batch(A, P, N, margin=0.3)
        for i in range(16):
            assert losses[i] == pytest.approx(triplet_loss(A[i], P[i], N[i], 0.3), abs=1e-6)
            da, dp, dn = triplet_loss_grad(A[i], P[i], N[i], 0.3)
            assert np.allclose(dA[i], da, atol=1e-6)
            assert np.allclose(dP[i], dp, atol=1e-6)
            assert np.allclose(dN[i], dn, atol=1e-6)


class FakeItem:
    def __init__(self, id, shop, consumer=()):
        self.id = id
        self.shop = list(shop)
        self.consumer = list(consumer)


class FakeManifest:
    def __init__(self, items):
        self.items = items


class TestCrossDomainSampler:
    def make_manifest(self, n_items, consumers=1):
        items = [FakeItem(f"i{j}", [f"i{j}_shop_0"],
                          [f"i{j}_consumer_{k}" for k in range(consumers)])
                 for j in range(n_items)]
        return FakeManifest(items)

    def test_count(self):
        out = sample_triplets_cross_domain(self.make_manifest(3), 2, make_rng(0, "s"))
        assert len(out) == 6

    def test_single_item_rejected(self):
        with pytest.raises(ValueError, match="no negatives"):
            sample_triplets_cross_domain(self.make_manifest(1), 2, make_rng(0, "s"))

    def test_seed_determinism(self):
        m = self.make_manifest(5, consumers=2)
        a = sample_triplets_cross_domain(m, 3, make_rng(4, "s"))
        b = sample_triplets_cross_domain(m, 3, make_rng(4, "s"))
        assert a == b

    def test_labels_correct(self):
        m = self.make_manifest(6, consumers=2)
        item_of = {sid: it.id for it in m.items for sid in it.shop + it.consumer}
        for t in sample_triplets_cross_domain(m, 4, make_rng(9, "s")):
            assert item_of[t.anchor_id] == item_of[t.positive_id]
            assert item_of[t.negative_id] != item_of[t.anchor_id]
            assert len({t.anchor_id, t.positive_id, t.negative_id}) == 3


class TestInshopSampler:
    def make_manifest(self, n_items, shops=3):
        items = [FakeItem(f"i{j}", [f"i{j}_shop_{k}" for k in range(shops)])
                 for j in range(n_items)]
        return FakeManifest(items)

    def test_count(self):
        out = sample_triplets_inshop(self.make_manifest(2), 5, make_rng(0, "s"))
        assert len(out) == 10

    def test_single_image_class_rejected(self):
        with pytest.raises(ValueError, match="fewer than 2"):
            sample_triplets_inshop(self.make_manifest(2, shops=1), 5, make_rng(0, "s"))

    def test_anchors_share_class_label(self):
        m = self.make_manifest(3)
        item_of = {sid: it.id for it in m.items for sid in it.shop}
        for t in sample_triplets_inshop(m, 10, make_rng(2, "s")):
            assert item_of[t.anchor_id] == item_of[t.positive_id]
            assert t.anchor_id != t.positive_id
            assert item_of[t.negative_id] != item_of[t.anchor_id]

    def test_seed_determinism(self):
        m = self.make_manifest(3)
        assert (sample_triplets_inshop(m, 7, make_rng(5, "s"))
                == sample_triplets_inshop(m, 7, make_rng(5, "s")))


def test_triplet_record_fields():
    t = Triplet("a", "p", "n")
    assert (t.anchor_id, t.positive_id, t.negative_id) == ("a", "p", "n")
