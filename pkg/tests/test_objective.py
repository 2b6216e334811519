import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from densealign.objective import (PART_NAMES, LossWeights, NonFiniteLoss, assemble, gmp_logits,
                                  mlsm_loss, ptc_loss)


def test_gmp_zero_features():
    assert torch.equal(gmp_logits(torch.zeros(3, 3, 4), torch.randn(2, 4)), torch.zeros(2))


def test_gmp_selects_max():
    F = -torch.ones(3, 3, 1)
    F[2, 0, 0] = 1.7
    assert float(gmp_logits(F, torch.ones(1, 1))[0]) == pytest.approx(1.7)


def test_gmp_matches_oracle_seed0():
    rng = np.random.default_rng(0)
    F, W = rng.standard_normal((3, 3, 4)), rng.standard_normal((2, 4))
    np.testing.assert_allclose(gmp_logits(torch.from_numpy(F), torch.from_numpy(W)).numpy(), oracles.gmp(F, W), atol=1e-7)


@pytest.mark.parametrize("y", [[0, 0, 0], [1, 0, 1], [1, 1, 1]])
def test_mlsm_zero_logits(y):
    assert float(mlsm_loss(torch.zeros(3, dtype=torch.float64), torch.tensor(y))) == pytest.approx(math.log(2), abs=1e-12)


def test_mlsm_saturation():
    y = torch.tensor([1, 0, 1, 0])
    z = torch.where(y > 0, 20.0, -20.0).double()
    assert float(mlsm_loss(z, y)) < 1e-8


def test_mlsm_matches_oracle_seed0():
    rng = np.random.default_rng(0)
    z, y = rng.standard_normal(5) * 3, (rng.random(5) < 0.5).astype(float)
    assert float(mlsm_loss(torch.from_numpy(z), torch.from_numpy(y))) == pytest.approx(oracles.mlsm(z, y), abs=1e-9)


def test_mlsm_stable_at_extremes():
    val = float(mlsm_loss(torch.tensor([1000.0, -1000.0]), torch.tensor([0, 1])))
    assert math.isfinite(val) and val == pytest.approx(1000.0)


def test_ptc_all_ones_mask_is_zero():
    assert float(ptc_loss(torch.randn(9, 4), torch.ones(3, 3))) == 0.0
    assert float(ptc_loss(torch.randn(9, 4), torch.zeros(3, 3))) == 0.0


def test_ptc_two_orthogonal_clusters():
    v = torch.zeros(16, 3, dtype=torch.float64)
    m = torch.zeros(4, 4)
    m[:, :2] = 1
    side = m.reshape(-1) > 0
    v[side] = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    v[~side] = torch.tensor([0.0, 2.0, 0.0], dtype=torch.float64)
    assert float(ptc_loss(v, m)) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)


def test_ptc_matches_pair_oracle_seed0():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((9, 4))
    m = np.array([1, 0, 0, 1, 1, 0, 1, 0, 0], dtype=float)
    got = float(ptc_loss(torch.from_numpy(v), torch.from_numpy(m.reshape(3, 3))))
    assert got == pytest.approx(oracles.ptc(v, m), abs=1e-8)


def test_ptc_single_patch_per_side_has_no_pairs():
    v = torch.randn(2, 3)
    assert float(ptc_loss(v, torch.tensor([[1.0, 0.0]]))) == 0.0


def test_ptc_batched_mean():
    g = torch.Generator().manual_seed(1)
    v = torch.randn(3, 9, 4, generator=g, dtype=torch.float64)
    m = (torch.rand(3, 3, 3, generator=g) > 0.5).double()
    expected = np.mean([float(ptc_loss(v[i], m[i])) for i in range(3)])
    assert float(ptc_loss(v, m)) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_ptc_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    v = torch.from_numpy(rng.standard_normal((9, 4)))
    m = torch.from_numpy((rng.random((3, 3)) < 0.5).astype(float))
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    rotated = v @ torch.from_numpy(q)
    assert float(ptc_loss(rotated, m)) == pytest.approx(float(ptc_loss(v, m)), abs=1e-10)


def parts(**kw):
    base = {n: 0.0 for n in PART_NAMES}
    base.update(kw)
    return base


def test_assemble_all_ones():
    # 1 + 1 + 1.0*1 + 1.0*1 + 0.2*1
    bd = assemble(parts(**{n: 1.0 for n in PART_NAMES}), LossWeights())
    assert bd.total_l == pytest.approx(4.2, abs=1e-12)
    assert bd.total == pytest.approx(6.2, abs=1e-12)


def test_assemble_zero():
    bd = assemble(parts(), LossWeights())
    assert bd.total_l == 0 and bd.total == 0


def test_assemble_mixed():
    bd = assemble(parts(cls=0.5, inter=0.25, im=2, ex=1, ptc=0.5, seg=0.1, reg=0.05), LossWeights())
    assert bd.total_l == pytest.approx(3.85, abs=1e-12)
    assert bd.total == pytest.approx(4.0, abs=1e-12)


def test_assemble_rejects_non_finite():
    with pytest.raises(NonFiniteLoss, match="ex"):
        assemble(parts(ex=float("nan")), LossWeights())
    with pytest.raises(NonFiniteLoss, match="seg"):
        assemble(parts(seg=torch.tensor(float("inf"))), LossWeights())


def test_assemble_linear_per_part():
    w = LossWeights(0.7, 1.3, 0.2)
    coef = {"cls": 1, "inter": 1, "im": 0.7, "ex": 1.3, "ptc": 0.2, "seg": 1, "reg": 1}
    rng = np.random.default_rng(0)
    base = parts(**{n: float(rng.random()) for n in PART_NAMES})
    t0 = assemble(base, w).total
    for name, c in coef.items():
        bumped = dict(base)
        bumped[name] += 0.125
        assert assemble(bumped, w).total - t0 == pytest.approx(c * 0.125, abs=1e-12)


def test_assemble_keeps_gradients():
    x = torch.tensor(2.0, requires_grad=True)
    bd = assemble(parts(im=x), LossWeights())
    bd.total.backward()
    assert float(x.grad) == 1.0


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0, 0.2)
    with pytest.raises(ValueError):
        LossWeights(1.0, float("inf"), 0.2)
