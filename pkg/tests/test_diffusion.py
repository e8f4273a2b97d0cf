from __future__ import annotations

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from streamdepth.diffusion import (
    apply_denoiser,
    dsm_loss,
    euler_step,
    forward_diffuse,
    forward_diffuse_clip,
    loss_weight,
    make_schedule,
    precondition,
    sample_sigma_per_frame,
)


def zero_net(z, c_noise, cond):
    return torch.zeros_like(z)


def test_sigma_zero_std_is_constant():
    s = sample_sigma_per_frame(3, 0.7, 0.0, torch.Generator().manual_seed(0))
    assert s.shape == (3,)
    assert torch.allclose(s, torch.full((3,), math.exp(0.7)))
    assert abs(float(s[0]) - 2.01375) < 1e-5


def test_sigma_lognormal_moments():
    s = sample_sigma_per_frame(100_000, 0.7, 1.6, torch.Generator().manual_seed(0), dtype=torch.float64)
    logs = torch.log(s)
    assert abs(float(logs.mean()) - 0.7) < 0.02
    assert abs(float(logs.std()) - 1.6) < 0.02


def test_sigma_deterministic_and_batched():
    a = sample_sigma_per_frame(5, generator=torch.Generator().manual_seed(7), batch_shape=(4,))
    b = sample_sigma_per_frame(5, generator=torch.Generator().manual_seed(7), batch_shape=(4,))
    assert a.shape == (4, 5)
    assert torch.equal(a, b)


def test_sigma_rejects_zero_frames():
    with pytest.raises(ValueError):
        sample_sigma_per_frame(0)
    with pytest.raises(ValueError):
        sample_sigma_per_frame(2, p_std=-1.0)


def test_forward_diffuse_small_sigma_is_identity(gen):
    z0 = torch.randn(3, 1, 4, 4, generator=gen, dtype=torch.float64)
    out = forward_diffuse(z0, torch.full((3,), 1e-12, dtype=torch.float64), gen)
    assert float((out - z0).abs().max()) < 1e-10


def test_forward_diffuse_variance(gen):
    z0 = torch.zeros(2, 1, 100, 100, dtype=torch.float64)
    out = forward_diffuse(z0, torch.full((2,), 2.0), gen)
    var = out.reshape(2, -1).var(dim=1)
    assert torch.all((var - 4.0).abs() < 0.2)


def test_forward_diffuse_per_frame_std(gen):
    z0 = torch.zeros(2, 1, 100, 100, dtype=torch.float64)
    out = forward_diffuse(z0, torch.tensor([1.0, 3.0]), gen)
    std = out.reshape(2, -1).std(dim=1)
    assert abs(float(std[0]) - 1.0) < 0.05
    assert abs(float(std[1]) - 3.0) < 0.15


def test_forward_diffuse_length_mismatch(gen):
    with pytest.raises(ValueError):
        forward_diffuse(torch.zeros(3, 1, 2, 2), torch.ones(2), gen)


def test_precondition_values():
    w = precondition(0.5, 0.5)
    assert float(w.c_skip) == pytest.approx(0.5, abs=1e-12)
    assert float(w.c_out) == pytest.approx(0.353553, abs=1e-6)
    assert float(w.c_in) == pytest.approx(1.414214, abs=1e-6)
    assert float(w.c_noise) == pytest.approx(-0.173287, abs=1e-6)


def test_precondition_limits():
    small, large = precondition(1e-9), precondition(1e9)
    assert float(small.c_skip) == pytest.approx(1.0, abs=1e-12)
    assert float(small.c_out) == pytest.approx(0.0, abs=1e-8)
    assert float(large.c_skip) == pytest.approx(0.0, abs=1e-12)
    assert float(large.c_out) == pytest.approx(0.5, rel=1e-9)


@pytest.mark.parametrize("sigma, sd", [(0.0, 0.5), (-1.0, 0.5), (1.0, 0.0), (float("inf"), 0.5)])
def test_precondition_rejects(sigma, sd):
    with pytest.raises(ValueError):
        precondition(sigma, sd)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1e4), st.floats(0.05, 5.0))
def test_precondition_invariants(sigma, sd):
    w = precondition(sigma, sd)
    assert float(w.c_in) > 0
    # c_skip + c_out^2 / sd^2 = 1 for the EDM forms
    assert float(w.c_skip + w.c_out**2 / sd**2) == pytest.approx(1.0, rel=1e-12)


def test_apply_denoiser_zero_net(gen):
    z = torch.randn(2, 1, 3, 3, generator=gen, dtype=torch.float64)
    sigma = torch.tensor([0.3, 2.0], dtype=torch.float64)
    out = apply_denoiser(zero_net, z, sigma)
    c_skip = precondition(sigma).c_skip
    assert torch.allclose(out, c_skip[:, None, None, None] * z, rtol=0, atol=1e-15)


def test_apply_denoiser_mixed_limits(gen):
    z = torch.randn(2, 1, 3, 3, generator=gen, dtype=torch.float64)
    out = apply_denoiser(zero_net, z, torch.tensor([1e-9, 1e9], dtype=torch.float64))
    assert torch.allclose(out[0], z[0], atol=1e-12)
    assert float(out[1].abs().max()) < 1e-12


def test_apply_denoiser_per_frame_inputs():
    seen = {}

    def spy(z_in, c_noise, cond):
        seen["z_in"], seen["c_noise"] = z_in, c_noise
        return torch.ones_like(z_in)

    z = torch.ones(2, 1, 1, 1, dtype=torch.float64)
    sigma = torch.tensor([0.5, 4.0], dtype=torch.float64)
    out = apply_denoiser(spy, z, sigma)
    w = precondition(sigma)
    assert torch.allclose(seen["z_in"].flatten(), w.c_in)
    assert torch.allclose(seen["c_noise"], torch.log(sigma) / 4)
    assert torch.allclose(out.flatten(), w.c_skip + w.c_out)


def test_apply_denoiser_shape_errors():
    z = torch.zeros(2, 1, 3, 3)
    with pytest.raises(ValueError):
        apply_denoiser(zero_net, z, torch.ones(3))
    with pytest.raises(ValueError):
        apply_denoiser(zero_net, z, torch.ones(2), cond=torch.zeros(2, 1, 4, 4))
    with pytest.raises(ValueError):
        apply_denoiser(lambda a, b, c: torch.zeros(1), z, torch.ones(2))


def test_dsm_loss_examples():
    z0 = torch.zeros(2, 1, 2, 2, dtype=torch.float64)
    assert float(dsm_loss(z0, z0, torch.ones(2))) == 0.0
    pred = torch.ones_like(z0)
    # frame 0: lambda(1) = 2, frame 1: lambda(0.5) = 5, mse 1 each
    assert float(dsm_loss(pred, z0, torch.tensor([1.0, 0.5]))) == pytest.approx((2.0 + 5.0) / 2)
    assert float(loss_weight(torch.tensor(0.5))) == pytest.approx(5.0)


def test_dsm_loss_shape_mismatch():
    with pytest.raises(ValueError):
        dsm_loss(torch.zeros(2, 1, 2, 2), torch.zeros(3, 1, 2, 2), torch.ones(2))
    with pytest.raises(ValueError):
        dsm_loss(torch.zeros(2, 1, 2, 2), torch.zeros(2, 1, 2, 2), torch.ones(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.floats(0.01, 50.0), st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
def test_dsm_loss_nonneg_and_linear(frames, sigma, scale, seed):
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn(frames, 1, 3, 3, generator=g, dtype=torch.float64)
    d = torch.randn(frames, 1, 3, 3, generator=g, dtype=torch.float64)
    s = torch.full((frames,), sigma, dtype=torch.float64)
    base = dsm_loss(z0 + d, z0, s)
    assert float(base) >= 0
    # squared error scales with scale^2, loss is linear in the per-frame MSE
    assert float(dsm_loss(z0 + math.sqrt(scale) * d, z0, s)) == pytest.approx(scale * float(base), rel=1e-10)


def test_euler_examples():
    z = torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64)
    z0 = torch.full((1, 1, 1, 1), 1.0, dtype=torch.float64)
    assert float(euler_step(z, z0, 2.0, 1.0)) == pytest.approx(1.5)
    assert torch.equal(euler_step(z, z, 2.0, 1.0), z)
    assert torch.allclose(euler_step(z, z0, 2.0, 0.0), z0)


def test_euler_mask_leaves_context(gen):
    z = torch.randn(3, 1, 2, 2, generator=gen)
    z0 = torch.randn(3, 1, 2, 2, generator=gen)
    out = euler_step(z, z0, 1.0, 0.5, torch.tensor([False, True, True]))
    assert torch.equal(out[0], z[0])
    assert not torch.equal(out[1], z[1])


def test_euler_rejects_zero_sigma():
    z = torch.zeros(1, 1, 1, 1)
    with pytest.raises(ValueError):
        euler_step(z, z, 0.0, 0.0)


def test_schedule_examples():
    assert make_schedule(1, 0.002, 80.0, 7.0).sigmas == (80.0, 0.0)
    s = make_schedule(2, 1.0, 3.0, 1.0).sigmas
    assert s == pytest.approx((3.0, 2.0, 0.0), abs=1e-12)
    d = make_schedule()
    assert d.num_steps == 25 and d.sigmas[0] == 80.0 and d.sigmas[-1] == 0.0


@pytest.mark.parametrize("args", [(0, 0.002, 80, 7), (5, 0.0, 80, 7), (5, 90, 80, 7), (5, 0.002, 80, 0)])
def test_schedule_rejects(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.floats(1e-4, 1.0), st.floats(1.5, 200.0), st.floats(0.5, 10.0))
def test_schedule_monotone(steps, smin, smax, rho):
    s = make_schedule(steps, smin, smax, rho).sigmas
    assert len(s) == steps + 1
    assert s[0] == smax and s[-1] == 0.0
    assert all(a > b for a, b in zip(s, s[1:]))


# --- constant per-frame sigma reduces bit-exactly to the clip-level path ---

def clip_level_denoiser(raw, z, sigma: float, sd=0.5):
    s = torch.tensor(sigma, dtype=z.dtype)
    denom = s**2 + sd**2
    c_skip, c_out, c_in = sd**2 / denom, s * sd / torch.sqrt(denom), 1.0 / torch.sqrt(denom)
    c_noise = (torch.log(s) / 4.0).expand(z.shape[-4])
    return c_skip * z + c_out * raw(c_in * z, c_noise, None)


def test_reduction_bit_identical():
    g = torch.Generator().manual_seed(3)
    z0 = torch.randn(4, 1, 5, 5, generator=g)
    w = torch.randn(4, 1, 5, 5, generator=g)

    def raw(z_in, c_noise, cond):
        return torch.tanh(z_in * w) + c_noise[:, None, None, None]

    for sigma in (0.01, 0.7, 13.0):
        vec = torch.full((4,), sigma)
        a = forward_diffuse(z0, vec, torch.Generator().manual_seed(9))
        b = forward_diffuse_clip(z0, sigma, torch.Generator().manual_seed(9))
        assert torch.equal(a, b)
        assert torch.equal(apply_denoiser(raw, a, vec), clip_level_denoiser(raw, a, sigma))
        assert torch.equal(apply_denoiser(raw, a, vec), apply_denoiser(raw, a, sigma))
        assert torch.equal(dsm_loss(a, z0, vec), dsm_loss(a, z0, sigma))
