import math

import numpy as np
import pytest
import torch

from bevda.gas import (EMBED_DIM, AlignmentParams, aggregate_prototype, build_embedding,
                       domain_prototypes, loss_gas, pool_spaces)
from bevda.geometry import SpaceFeatures

CH = {"image": 3, "voxel": 4, "bev": 5}


def _align(n=1, zero_bias=False):
    torch.manual_seed(0)
    a = AlignmentParams(CH, num_classes=n).double()
    if zero_bias:
        with torch.no_grad():
            for mod in a.modules():
                if isinstance(mod, torch.nn.Linear):
                    mod.bias.zero_()
    return a


def _spaces(rng, B=2):
    return SpaceFeatures(torch.from_numpy(rng.normal(size=(B, 2, 3, 4, 5))),
                         torch.from_numpy(rng.normal(size=(B, 4, 3, 3, 2))),
                         torch.from_numpy(rng.normal(size=(B, 5, 3, 3))))


class _ConstDisc(torch.nn.Module):
    def __init__(self, p):
        super().__init__()
        self.logit = math.log(p / (1 - p))

    def forward(self, x):
        return torch.full(x.shape[:-1] + (1,), self.logit, dtype=x.dtype)


class TestEmbedding:
    @pytest.mark.parametrize("n", [1, 3])
    def test_shapes(self, rng, n):
        a = _align(n)
        e = build_embedding(_spaces(rng), a)
        assert e.shape == (2, 3, EMBED_DIM, n)
        assert aggregate_prototype(e, a).shape == (2, EMBED_DIM, n)

    def test_zero_features_zero_bias(self):
        a = _align(2, zero_bias=True)
        z = SpaceFeatures(torch.zeros(1, 2, 3, 4, 5, dtype=torch.float64), torch.zeros(1, 4, 3, 3, 2, dtype=torch.float64),
                          torch.zeros(1, 5, 3, 3, dtype=torch.float64))
        e = build_embedding(z, a)
        assert torch.count_nonzero(e) == 0
        assert torch.count_nonzero(aggregate_prototype(e, a)) == 0

    def test_constant_grid_matches_single_vector(self, rng):
        a = _align(2)
        vecs = {k: torch.from_numpy(rng.normal(size=c)) for k, c in CH.items()}
        sp = SpaceFeatures(vecs["image"].view(1, 1, 3, 1, 1).expand(1, 2, 3, 4, 5),
                           vecs["voxel"].view(1, 4, 1, 1, 1).expand(1, 4, 3, 3, 2),
                           vecs["bev"].view(1, 5, 1, 1).expand(1, 5, 3, 3))
        e = build_embedding(sp, a)
        for slot, name in enumerate(("image", "voxel", "bev")):
            ref = a.projectors[name](vecs[name]).reshape(EMBED_DIM, 2)
            assert (e[0, slot] - ref).abs().max() <= 1e-6

    def test_pooling(self, rng):
        sp = _spaces(rng)
        pooled = pool_spaces(sp)
        assert torch.allclose(pooled["image"][1], sp.image[1].permute(1, 0, 2, 3).reshape(3, -1).mean(1))
        assert torch.allclose(pooled["bev"][0], sp.bev[0].reshape(5, -1).mean(1))

    def test_disabled_space_slot_is_zero(self, rng):
        e = build_embedding(_spaces(rng), _align(), enabled=("bev",))
        assert torch.count_nonzero(e[:, :2]) == 0 and torch.count_nonzero(e[:, 2]) > 0

    def test_column_permutation_equivariance(self, rng):
        a = _align(3)
        e = torch.from_numpy(rng.normal(size=(2, 3, EMBED_DIM, 3)))
        perm = [2, 0, 1]
        assert torch.allclose(aggregate_prototype(e[..., perm], a), aggregate_prototype(e, a)[..., perm], atol=1e-12)

    def test_aggregate_rejects_bad_slots(self, rng):
        with pytest.raises(ValueError):
            aggregate_prototype(torch.zeros(1, 2, EMBED_DIM, 1, dtype=torch.float64), _align())

    def test_deterministic(self, rng):
        sp = _spaces(rng)
        a = _align(2)
        assert torch.equal(domain_prototypes(sp, a), domain_prototypes(sp, a))

    def test_reverse_weight_keeps_forward(self, rng):
        sp = _spaces(rng)
        a = _align()
        assert torch.equal(domain_prototypes(sp, a), domain_prototypes(sp, a, reverse_weight=1.0))


class TestLossGas:
    def test_half_half(self):
        a = _align()
        a.discriminator = _ConstDisc(0.5)
        f = torch.zeros(4, EMBED_DIM, 1, dtype=torch.float64)
        assert loss_gas(f, f, a).item() == pytest.approx(2 * math.log(0.5), abs=1e-12)

    def test_limit_is_zero(self):
        a = _align()
        f = torch.zeros(1, EMBED_DIM, 1, dtype=torch.float64)
        vals = []
        for eps in (1e-2, 1e-4, 1e-6):
            a.discriminator = _ConstDisc(1 - eps)
            d_s = float(a.discriminate(f))
            a.discriminator = _ConstDisc(eps)
            d_t = float(a.discriminate(f))
            vals.append(math.log(d_s) + math.log(1 - d_t))
        assert vals[0] < vals[1] < vals[2] <= 0 and abs(vals[2]) < 1e-5

    def test_clamped_finite(self):
        a = _align()
        a.discriminator = _ConstDisc(0.5)
        a.discriminator.logit = 1e4
        f = torch.zeros(1, EMBED_DIM, 1, dtype=torch.float64)
        v = loss_gas(f, f, a).item()
        assert math.isfinite(v) and v == pytest.approx(math.log(1e-7), rel=1e-6)

    def test_bounded_above_and_self_bound(self, rng):
        a = _align(2)
        for _ in range(20):
            fs = torch.from_numpy(rng.normal(size=(1, EMBED_DIM, 2)) * 3)
            ft = torch.from_numpy(rng.normal(size=(1, EMBED_DIM, 2)) * 3)
            assert loss_gas(fs, ft, a).item() <= 0
            assert loss_gas(fs, fs, a).item() <= 2 * math.log(0.5) + 1e-12

    def test_asymmetric(self, rng):
        a = _align()
        fs = torch.from_numpy(rng.normal(size=(1, EMBED_DIM, 1)))
        ft = torch.from_numpy(rng.normal(size=(1, EMBED_DIM, 1)))
        assert loss_gas(fs, ft, a).item() != loss_gas(ft, fs, a).item()
