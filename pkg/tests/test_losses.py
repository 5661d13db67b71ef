import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossgan.losses import (LossWeights, adv_loss_discriminator, adv_loss_generator, cycle_loss,
                             total_generator_loss)


@pytest.mark.parametrize("scores, expected", [([1.0, 1.0], 0.0), ([0.0], 1.0), ([0.5, 0.0], 0.625)])
def test_adv_generator_values(scores, expected):
    assert float(adv_loss_generator(scores)) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("real, fake, expected", [([1.0], [0.0], 0.0), ([0.0], [1.0], 1.0), ([0.8], [0.3], 0.065)])
def test_adv_discriminator_values(real, fake, expected):
    assert float(adv_loss_discriminator(real, fake, LossWeights(d_slowdown=0.5))) == pytest.approx(expected, abs=1e-6)


def test_empty_scores_rejected():
    with pytest.raises(ValueError):
        adv_loss_generator([])
    with pytest.raises(ValueError):
        adv_loss_discriminator([1.0], [])


def test_adv_accepts_tensors_and_keeps_grad():
    s = torch.tensor([0.2, 0.7], requires_grad=True)
    adv_loss_generator(s).backward()
    assert torch.allclose(s.grad, (s.detach() - 1.0))  # d/ds mean((s-1)^2) = (s-1) for n=2


def test_cycle_identity_and_uniform_difference():
    x = torch.rand(3, 4, 4)
    assert float(cycle_loss(x, x)) == 0.0
    assert float(cycle_loss(x, x + 0.1, LossWeights(lambda_cycle=20))) == pytest.approx(2.0, abs=1e-5)


def test_cycle_matches_per_pixel_sum():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (3, 4, 4)), rng.uniform(-1, 1, (3, 4, 4))
    total = 0.0
    for c in range(3):
        for i in range(4):
            for j in range(4):
                total += abs(a[c, i, j] - b[c, i, j])
    oracle = 20.0 * total / 48
    assert float(cycle_loss(torch.tensor(a), torch.tensor(b))) == pytest.approx(oracle, abs=1e-6)


def test_cycle_shape_mismatch():
    with pytest.raises(ValueError):
        cycle_loss(torch.zeros(3, 4, 4), torch.zeros(3, 4, 8))


@pytest.mark.parametrize("lam", [1.0, 20.0, 40.0])
def test_cycle_linear_in_lambda(lam):
    g = torch.Generator().manual_seed(1)
    a, b = torch.rand(3, 8, 8, generator=g, dtype=torch.float64), torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
    base = float(cycle_loss(a, b, LossWeights(lambda_cycle=1.0)))
    assert float(cycle_loss(a, b, LossWeights(lambda_cycle=lam))) == pytest.approx(lam * base, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cycle_symmetric_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(3, 4, 4, generator=g), torch.rand(3, 4, 4, generator=g)
    assert float(cycle_loss(a, b)) == float(cycle_loss(b, a))
    assert float(cycle_loss(a, b)) >= 0


def test_cycle_gradient_is_scaled_sign():
    g = torch.Generator().manual_seed(2)
    orig = torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
    rec = (torch.rand(3, 4, 4, generator=g, dtype=torch.float64)).requires_grad_()
    w = LossWeights(lambda_cycle=20.0)
    cycle_loss(orig, rec, w).backward()
    expected = 20.0 / orig.numel() * torch.sign(rec.detach() - orig)
    assert torch.allclose(rec.grad, expected)
    # central differences away from ties
    eps = 1e-6
    flat = rec.detach().clone().reshape(-1)
    for i in range(0, flat.numel(), 7):
        p, m = flat.clone(), flat.clone()
        p[i] += eps
        m[i] -= eps
        fd = (float(cycle_loss(orig, p.reshape(orig.shape), w)) - float(cycle_loss(orig, m.reshape(orig.shape), w))) / (2 * eps)
        assert fd == pytest.approx(float(expected.reshape(-1)[i]), rel=1e-6)


def test_discriminator_minimum_over_constant_scores():
    w = LossWeights(d_slowdown=0.5)
    grid = np.linspace(0, 1, 1001)
    vals = [float(adv_loss_discriminator([s], [s], w)) for s in grid]
    best = int(np.argmin(vals))
    assert grid[best] == pytest.approx(0.5)
    assert vals[best] == pytest.approx(0.5 * 0.5)


def test_losses_zero_only_at_optimum():
    assert float(adv_loss_generator([0.99])) > 0
    assert float(adv_loss_discriminator([0.99], [0.0])) > 0
    assert float(cycle_loss(torch.zeros(1), torch.full((1,), 1e-3))) > 0


def test_total_generator_loss():
    total, bd = total_generator_loss([0.0], [0.0])
    assert total == 0.0
    total, bd = total_generator_loss([0.5, 0.5], [2.0, 2.0])
    assert total == 5.0 and bd.total == 5.0 and len(bd.terms) == 4
    rng = np.random.default_rng(3)
    adv, cyc = list(rng.uniform(0, 2, 4)), list(rng.uniform(0, 20, 4))
    acc = 0.0
    for v in adv + cyc:
        acc = acc + v
    total, _ = total_generator_loss(adv, cyc)
    assert total == pytest.approx(acc, abs=1e-9)


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_cycle=0)
    with pytest.raises(ValueError):
        LossWeights(d_slowdown=1.5)
    assert LossWeights().lambda_cycle == 20.0 and LossWeights().d_slowdown == 0.5


def test_bce_switch():
    w = LossWeights(gan_mode="bce")
    v = float(adv_loss_discriminator([10.0], [-10.0], w))
    assert 0 < v < 1e-3
