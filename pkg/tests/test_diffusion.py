import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from oracles import relative_error
from serdiff.diffusion import (
    NoiseSchedule,
    compute_error_map,
    linear_schedule,
    p_sample,
    q_closed,
    q_step,
    teacher_loss,
)
from serdiff.nets import NetConfig, build_denoiser

TINY = NetConfig(base_channels=4, depth=2, embed_dim=8)


class TestSchedule:
    def test_two_steps(self):
        s = linear_schedule(2, 0.1, 0.3)
        np.testing.assert_allclose(s.betas, [0.1, 0.3], atol=1e-15)
        np.testing.assert_allclose(s.alpha_bars, [0.9, 0.63], atol=1e-15)

    def test_default_alpha_bar_product(self):
        s = linear_schedule()
        prod = 1.0
        for i in range(100):
            prod *= 1.0 - (1e-4 + i * (0.02 - 1e-4) / 99)
        assert s.alpha_bar(100) == pytest.approx(prod, rel=1e-12)
        assert s.alpha_bar(100) < 0.05 or s.alpha_bar(100) == pytest.approx(prod)

    @pytest.mark.parametrize("args", [(5, 1e-3, 0.2), (100, 1e-4, 0.02), (30, 0.05, 0.05)])
    def test_monotone(self, args):
        ab = linear_schedule(*args).alpha_bars
        assert (np.diff(ab) < 0).all()
        snr = ab / (1 - ab)
        assert (np.diff(snr) < 0).all()

    @pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.3, 0.2), (10, 0.1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            linear_schedule(*args)

    def test_t_range(self):
        s = linear_schedule(10)
        for t in (0, 11):
            with pytest.raises(ValueError):
                s.beta(t)
            with pytest.raises(ValueError):
                q_step(torch.zeros(3), t, s, torch.zeros(3))
            with pytest.raises(ValueError):
                q_closed(torch.zeros(3), t, s, torch.zeros(3))


class TestForward:
    def test_q_step_zero_noise(self):
        s = linear_schedule(10, 0.01, 0.2)
        x = torch.randn(2, 4, 3, 3, dtype=torch.float64)
        out = q_step(x, 4, s, torch.zeros_like(x))
        assert torch.allclose(out, math.sqrt(1 - s.beta(4)) * x, rtol=0, atol=1e-15)

    def test_q_step_small_beta(self):
        s = NoiseSchedule(np.full(3, 1e-12))
        x = torch.randn(10, dtype=torch.float64)
        assert torch.allclose(q_step(x, 2, s, torch.randn_like(x)), x, atol=1e-5)

    def test_q_closed_zero_noise(self):
        s = linear_schedule()
        x = torch.randn(4, 3, 3, dtype=torch.float64)
        assert torch.allclose(q_closed(x, 50, s, torch.zeros_like(x)), math.sqrt(s.alpha_bar(50)) * x, atol=1e-15)

    def test_q_closed_identity_limit(self):
        s = NoiseSchedule(np.full(4, 1e-15))
        x = torch.randn(7, dtype=torch.float64)
        assert torch.allclose(q_closed(x, 4, s, torch.randn_like(x)), x, atol=1e-6)

    def test_shape_mismatch(self):
        s = linear_schedule(10)
        with pytest.raises(ValueError):
            q_step(torch.zeros(3), 1, s, torch.zeros(4))


def iterate_q_step(x0, t, sched, gen):
    x = x0.clone()
    for s in range(1, t + 1):
        x = q_step(x, s, sched, torch.randn(x.shape, generator=gen, dtype=x.dtype))
    return x


def marginal_check(sched, t, n=10_000, seed=0):
    """Return (|mean gap| / se, |var gap| / se) between iterated and closed-form samples."""
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.full((n,), 0.7, dtype=torch.float64)
    a = iterate_q_step(x0, t, sched, gen)
    b = q_closed(x0, t, sched, torch.randn(n, generator=gen, dtype=torch.float64))
    va, vb = a.var().item(), b.var().item()
    se_mean = math.sqrt(va / n + vb / n)
    se_var = math.sqrt(2 * va**2 / (n - 1) + 2 * vb**2 / (n - 1))
    z_mean = abs(a.mean().item() - b.mean().item()) / se_mean
    z_var = abs(va - vb) / se_var
    # also against the analytic marginal
    ab = sched.alpha_bar(t)
    z_mean_th = abs(a.mean().item() - math.sqrt(ab) * 0.7) / math.sqrt((1 - ab) / n)
    z_var_th = abs(va - (1 - ab)) / ((1 - ab) * math.sqrt(2 / (n - 1)))
    return z_mean, z_var, z_mean_th, z_var_th


@pytest.mark.parametrize("t", [50, 100])
def test_marginal_monte_carlo(t):
    zs = marginal_check(linear_schedule(), t)
    assert max(zs) < 3.0, zs


class ConstantNoise(nn.Module):
    def __init__(self, noise):
        super().__init__()
        self.noise = noise

    def forward(self, x_t, t, c):
        return self.noise


class Zero(nn.Module):
    config = NetConfig()

    def forward(self, x_t, t, c):
        return torch.zeros_like(x_t)


class TestTeacherLoss:
    def test_perfect_denoiser(self):
        s = linear_schedule()
        noise = torch.randn(2, 4, 8, 8)
        loss = teacher_loss(ConstantNoise(noise), torch.rand(2, 4, 8, 8), torch.rand(2, 4, 8, 8), 17, noise, s)
        assert loss.item() == 0.0

    def test_non_negative_and_tensor_t(self):
        s = linear_schedule()
        net = build_denoiser(TINY, 100, seed=0)
        g = torch.Generator().manual_seed(0)
        x0, c = torch.rand(3, 4, 8, 8, generator=g) * 2 - 1, torch.rand(3, 4, 8, 8, generator=g)
        noise = torch.randn(3, 4, 8, 8, generator=g)
        assert teacher_loss(net, x0, c, 5, noise, s).item() >= 0
        same = teacher_loss(net, x0, c, torch.tensor([5, 5, 5]), noise, s)
        assert same.item() == pytest.approx(teacher_loss(net, x0, c, 5, noise, s).item(), rel=1e-6)

    def test_t_out_of_range(self):
        s = linear_schedule(10)
        net = build_denoiser(TINY, 10, seed=0)
        x = torch.zeros(1, 4, 8, 8)
        with pytest.raises(ValueError):
            teacher_loss(net, x, x, 11, x, s)


def param_gradient_error(net, loss_fn, gen, n_coords=12, h=1e-6):
    """Relative error between autograd and central differences on random parameter coordinates."""
    net.zero_grad()
    loss_fn().backward()
    params = [p for p in net.parameters() if p.grad is not None]
    auto, fd = [], []
    for _ in range(n_coords):
        p = params[int(torch.randint(len(params), (1,), generator=gen))]
        i = int(torch.randint(p.numel(), (1,), generator=gen))
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
        auto.append(p.grad.view(-1)[i].item())
        fd.append((up - down) / (2 * h))
    return relative_error(torch.tensor(auto), torch.tensor(fd))


@pytest.mark.parametrize("i", range(20))
def test_teacher_loss_gradient(i):
    s = linear_schedule(20)
    net = build_denoiser(TINY, 20, seed=i).double()
    g = torch.Generator().manual_seed(1000 + i)
    x0 = torch.rand(2, 4, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    c = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
    noise = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
    t = int(torch.randint(1, 21, (1,), generator=g))
    err = param_gradient_error(net, lambda: teacher_loss(net, x0, c, t, noise, s), g)
    assert err < 1e-4, err


class TestSampling:
    def test_deterministic_and_clamped(self):
        s = linear_schedule(8, 0.01, 0.3)
        net = build_denoiser(TINY, 8, seed=1)
        c = torch.rand(2, 4, 8, 8, generator=torch.Generator().manual_seed(0))
        a, b = p_sample(net, c, s, seed=5), p_sample(net, c, s, seed=5)
        assert a.source == "synthetic"
        assert torch.equal(a.values, b.values)
        assert a.values.abs().max() <= 1.0
        assert not torch.equal(a.values, p_sample(net, c, s, seed=6).values)

    def test_unbatched(self):
        s = linear_schedule(4)
        net = build_denoiser(TINY, 4, seed=1)
        out = p_sample(net, torch.rand(4, 8, 8), s, seed=0)
        assert out.values.shape == (4, 8, 8)

    def test_per_element_seeds(self):
        s = linear_schedule(4)
        net = build_denoiser(TINY, 4, seed=1)
        c = torch.rand(1, 4, 8, 8).expand(2, 4, 8, 8)
        both = p_sample(net, c, s, seed=[3, 9]).values
        assert torch.allclose(both[0], p_sample(net, c[:1], s, seed=3).values[0], atol=1e-5)
        with pytest.raises(ValueError):
            p_sample(net, c, s, seed=[1, 2, 3])

    def test_zero_denoiser_variance(self):
        s = linear_schedule(100)
        out = p_sample(Zero(), torch.zeros(500, 4, 8, 8), s, seed=0, clamp=False).values
        v = 1.0
        for t in range(s.T, 0, -1):
            v /= 1 - s.beta(t)
            if t > 1:
                v += s.beta(t)
        n = out.numel()
        emp = out.double().var().item()
        assert abs(emp - v) < 3 * v * math.sqrt(2 / (n - 1))
        assert abs(out.double().mean().item()) < 3 * math.sqrt(v / n)


class TestErrorMap:
    def test_saturated(self):
        lab = torch.randint(0, 4, (8, 8), generator=torch.Generator().manual_seed(0))
        gt = torch.nn.functional.one_hot(lab, 4).permute(2, 0, 1).float()
        e = compute_error_map(60 * gt, gt)
        assert e.source == "computed" and e.values.abs().max() < 1e-6

    def test_uniform_logits(self):
        gt = torch.zeros(4, 3, 3)
        gt[2] = 1
        e = compute_error_map(torch.zeros(4, 3, 3), gt)
        assert torch.allclose(e.values, gt - 0.25)

    def test_recovers_gt(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64)
        gt = torch.nn.functional.one_hot(torch.randint(0, 4, (2, 5, 5), generator=g), 4).permute(0, 3, 1, 2).double()
        e = compute_error_map(logits, gt)
        assert torch.allclose(e.values + torch.softmax(logits, 1), gt, atol=1e-15)
        assert e.values.abs().max() <= 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compute_error_map(torch.zeros(4, 3, 3), torch.zeros(3, 3, 3))
