import numpy as np
import pytest
import torch

from bevda.geometry import SpaceFeatures
from bevda.objective import LossWeights, loss_mkt, loss_total


def _spaces(rng, scale=1.0):
    return SpaceFeatures(torch.from_numpy(rng.normal(size=(2, 3, 4, 5, 6)) * scale),
                         torch.from_numpy(rng.normal(size=(2, 4, 3, 5, 2)) * scale),
                         torch.from_numpy(rng.normal(size=(2, 5, 3, 5)) * scale))


def mkt_oracle(t: SpaceFeatures, s: SpaceFeatures):
    """Location-by-location loops, batch mean."""
    B = t.bev.shape[0]
    total = 0.0
    for b in range(B):
        ti, si = t.image[b].numpy(), s.image[b].numpy()
        M, C, H, W = ti.shape
        for m in range(M):
            acc = 0.0
            for i in range(H):
                for j in range(W):
                    acc += sum((ti[m, c, i, j] - si[m, c, i, j]) ** 2 for c in range(C))
            total += acc / (H * W)
        tv, sv = t.voxel[b].numpy(), s.voxel[b].numpy()
        C, X, Y, Z = tv.shape
        acc = 0.0
        for x in range(X):
            for y in range(Y):
                for z in range(Z):
                    acc += sum((tv[c, x, y, z] - sv[c, x, y, z]) ** 2 for c in range(C))
        total += acc / (X * Y * Z)
        tb, sb = t.bev[b].numpy(), s.bev[b].numpy()
        C, X, Y = tb.shape
        acc = 0.0
        for x in range(X):
            for y in range(Y):
                acc += sum((tb[c, x, y] - sb[c, x, y]) ** 2 for c in range(C))
        total += acc / (X * Y)
    return total / B


class TestMKT:
    def test_identical_zero(self, rng):
        s = _spaces(rng)
        assert float(loss_mkt(s, s)) == 0.0

    def test_unit_fixture(self):
        one = lambda v: torch.full((1, 1, 1, 1), v, dtype=torch.float64)
        dummy = torch.zeros(1, 1, 1, 1, 1, dtype=torch.float64)
        t = SpaceFeatures(dummy, dummy, one(2.0))
        s = SpaceFeatures(dummy, dummy, one(0.0))
        assert float(loss_mkt(t, s, ("bev",))) == 4.0

    def test_matches_loop_oracle(self, rng):
        t, s = _spaces(rng), _spaces(rng)
        assert abs(float(loss_mkt(t, s)) - mkt_oracle(t, s)) <= 1e-6

    def test_symmetric_value_student_only_gradient(self, rng):
        t, s = _spaces(rng), _spaces(rng)
        assert float(loss_mkt(t, s)) == pytest.approx(float(loss_mkt(s, t)), rel=1e-14)
        tt = SpaceFeatures(*(x.clone().requires_grad_() for x in (t.image, t.voxel, t.bev)))
        ss = SpaceFeatures(*(x.clone().requires_grad_() for x in (s.image, s.voxel, s.bev)))
        loss_mkt(tt, ss).backward()
        assert tt.bev.grad is None and ss.bev.grad is not None

    @pytest.mark.parametrize("a", [0.5, 2.0, -3.0])
    def test_quadratic_scaling(self, rng, a):
        t, s = _spaces(rng), _spaces(rng)
        scaled = lambda x: SpaceFeatures(a * x.image, a * x.voxel, a * x.bev)
        assert float(loss_mkt(scaled(t), scaled(s))) == pytest.approx(a * a * float(loss_mkt(t, s)), rel=1e-12)

    def test_space_subset_adds_up(self, rng):
        t, s = _spaces(rng), _spaces(rng)
        parts = sum(float(loss_mkt(t, s, (n,))) for n in ("image", "voxel", "bev"))
        assert float(loss_mkt(t, s)) == pytest.approx(parts, rel=1e-12)
        assert float(loss_mkt(t, s, ())) == 0.0

    def test_shape_mismatch(self, rng):
        t = _spaces(rng)
        s = SpaceFeatures(t.image, t.voxel, t.bev[:, :, :2])
        with pytest.raises(ValueError):
            loss_mkt(t, s)
        with pytest.raises(ValueError):
            loss_mkt(t, t, ("lidar",))


class TestTotal:
    def test_unit_components(self):
        assert float(loss_total(1.0, 1.0, 1.0, 1.0)) == pytest.approx(2.2, abs=1e-12)

    def test_default_weights(self):
        assert LossWeights() == LossWeights(1.0, 1.0, 0.1, 0.1)

    def test_zero(self):
        assert float(loss_total(0.0, 0.0, 0.0, 0.0)) == 0.0

    def test_reduces_without_transfer_and_alignment(self, rng):
        a, b, c, d = rng.normal(size=4)
        w = LossWeights(transfer=0.0, alignment=0.0)
        assert float(loss_total(a, b, c, d, w)) == a + b

    def test_linear_in_each_component(self, rng):
        w = LossWeights(0.3, 1.7, 0.2, 0.05)
        base = np.array(rng.normal(size=4))
        for k, lam in enumerate((0.3, 1.7, 0.2, 0.05)):
            bumped = base.copy()
            bumped[k] += 1.0
            diff = float(loss_total(*bumped, w)) - float(loss_total(*base, w))
            assert diff == pytest.approx(lam, abs=1e-12)

    def test_non_finite_named(self):
        with pytest.raises(ValueError, match="L_MKT"):
            loss_total(1.0, 1.0, float("nan"), 1.0)
        with pytest.raises(ValueError, match="L_GAS"):
            loss_total(1.0, 1.0, 1.0, torch.tensor(float("inf")))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(transfer=-0.1)
