"""Continuous-time diffusion primitives with one noise level per frame.

Clips are tensors shaped ``(..., F, C, H, W)``; any leading dimensions are
treated as a batch.  Noise levels are given per frame as a tensor shaped
``(F,)`` or ``(..., F)`` matching the clip's leading dimensions.  A plain
Python float (or 0-d tensor) is the clip-level special case where every frame
shares one noise level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor

P_MEAN = 0.7
P_STD = 1.6
SIGMA_DATA = 0.5

# (net input, c_noise per frame, condition clip) -> residual prediction
RawNet = Callable[[Tensor, Tensor, Optional[Tensor]], Tensor]


def _check_clip(z: Tensor, name: str = "clip") -> None:
    if z.ndim < 4:
        raise ValueError(f"{name} must have shape (..., F, C, H, W), got {tuple(z.shape)}")
    if any(s < 1 for s in z.shape[-4:]):
        raise ValueError(f"{name} has an empty dimension: {tuple(z.shape)}")


def _as_sigma(sigma, like: Tensor) -> Tensor:
    return torch.as_tensor(sigma, dtype=like.dtype, device=like.device)


def _frame_view(sigma: Tensor, z: Tensor) -> Tensor:
    """Broadcast a per-frame sigma of shape (..., F) against a clip (..., F, C, H, W)."""
    if sigma.ndim == 0:
        return sigma
    if sigma.shape[-1] != z.shape[-4]:
        raise ValueError(
            f"sigma has {sigma.shape[-1]} entries but the clip has {z.shape[-4]} frames"
        )
    return sigma[..., None, None, None]


def sample_sigma_per_frame(
    num_frames: int,
    p_mean: float = P_MEAN,
    p_std: float = P_STD,
    generator: Optional[torch.Generator] = None,
    batch_shape: tuple[int, ...] = (),
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Draw an independent log-normal noise level for every frame.

    ``log(sigma_i) ~ Normal(p_mean, p_std**2)``, i.i.d. over frames and over
    ``batch_shape``.  Returns a tensor shaped ``batch_shape + (num_frames,)``.
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    if p_std < 0:
        raise ValueError(f"p_std must be non-negative, got {p_std}")
    g = torch.randn(*batch_shape, num_frames, generator=generator, dtype=torch.float64)
    return torch.exp(g * p_std + p_mean).to(dtype)


def forward_diffuse(z0: Tensor, sigma, generator: Optional[torch.Generator] = None) -> Tensor:
    """Add Gaussian noise of standard deviation ``sigma_i`` to frame ``i``."""
    _check_clip(z0, "z0")
    s = _frame_view(_as_sigma(sigma, z0), z0)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
    return z0 + s * eps


def forward_diffuse_clip(z0: Tensor, sigma: float, generator: Optional[torch.Generator] = None) -> Tensor:
    """Clip-level forward process: one noise level for the whole clip."""
    _check_clip(z0, "z0")
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
    return z0 + _as_sigma(sigma, z0) * eps


@dataclass(frozen=True)
class PreconditionWeights:
    c_skip: Tensor
    c_out: Tensor
    c_in: Tensor
    c_noise: Tensor


def precondition(sigma, sigma_data: float = SIGMA_DATA) -> PreconditionWeights:
    """EDM preconditioning coefficients, evaluated elementwise on ``sigma``."""
    if not torch.is_tensor(sigma):
        sigma = torch.as_tensor(sigma, dtype=torch.float64)
    if sigma_data <= 0:
        raise ValueError(f"sigma_data must be positive, got {sigma_data}")
    if not bool(torch.all(sigma > 0)) or not bool(torch.all(torch.isfinite(sigma))):
        raise ValueError("sigma must be positive and finite")
    denom = sigma**2 + sigma_data**2
    return PreconditionWeights(
        c_skip=sigma_data**2 / denom,
        c_out=sigma * sigma_data / torch.sqrt(denom),
        c_in=1.0 / torch.sqrt(denom),
        c_noise=torch.log(sigma) / 4.0,
    )


def apply_denoiser(
    raw_net: RawNet,
    z_t: Tensor,
    sigma,
    cond: Optional[Tensor] = None,
    sigma_data: float = SIGMA_DATA,
) -> Tensor:
    """Wrap a raw residual network into a denoiser with per-frame preconditioning.

    Frame ``i`` of the output is
    ``c_skip(s_i) z_i + c_out(s_i) * raw_net(c_in(s) z, c_noise(s), cond)_i``.
    Every frame's noise level reaches the network only through its own
    ``c_noise`` entry.
    """
    _check_clip(z_t, "z_t")
    sigma = _as_sigma(sigma, z_t)
    if sigma.ndim > 0 and sigma.shape[-1] != z_t.shape[-4]:
        raise ValueError(f"sigma has {sigma.shape[-1]} entries but z_t has {z_t.shape[-4]} frames")
    if cond is not None:
        _check_clip(cond, "cond")
        if cond.shape[-4] != z_t.shape[-4] or cond.shape[-2:] != z_t.shape[-2:]:
            raise ValueError(
                f"condition shape {tuple(cond.shape)} incompatible with depth clip {tuple(z_t.shape)}"
            )
    w = precondition(sigma, sigma_data)
    c_noise = w.c_noise
    if c_noise.ndim == 0:
        c_noise = c_noise.expand(z_t.shape[-4])
    residual = raw_net(_frame_view(w.c_in, z_t) * z_t, c_noise, cond)
    if residual.shape != z_t.shape:
        raise ValueError(f"network returned {tuple(residual.shape)}, expected {tuple(z_t.shape)}")
    return _frame_view(w.c_skip, z_t) * z_t + _frame_view(w.c_out, z_t) * residual


def loss_weight(sigma: Tensor) -> Tensor:
    """lambda(sigma) = (1 + sigma^2) / sigma^2."""
    return (1.0 + sigma**2) / sigma**2


def dsm_loss(pred_z0: Tensor, z0: Tensor, sigma) -> Tensor:
    """Weighted denoising loss: mean over frames of ``lambda(sigma_i) * mse_i``.

    Leading batch dimensions are averaged as well, after the per-frame
    weighting.
    """
    if pred_z0.shape != z0.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_z0.shape)} vs {tuple(z0.shape)}")
    _check_clip(z0, "z0")
    sigma = _as_sigma(sigma, z0)
    if sigma.ndim > 0 and sigma.shape[-1] != z0.shape[-4]:
        raise ValueError(f"sigma has {sigma.shape[-1]} entries but the clip has {z0.shape[-4]} frames")
    frame_mse = ((pred_z0 - z0) ** 2).mean(dim=(-3, -2, -1))
    return (loss_weight(sigma) * frame_mse).mean()


def euler_step(
    z_t: Tensor,
    z0_pred: Tensor,
    sigma_t: float,
    sigma_prev: float,
    frame_mask: Optional[Tensor] = None,
) -> Tensor:
    """One Euler step of the probability-flow ODE from ``sigma_t`` to ``sigma_prev``.

    Frames where ``frame_mask`` is False are returned untouched.
    """
    if sigma_t <= 0:
        raise ValueError("sigma_t must be positive")
    if sigma_prev < 0:
        raise ValueError("sigma_prev must be non-negative")
    stepped = (z_t - z0_pred) / sigma_t * (sigma_prev - sigma_t) + z_t
    if frame_mask is None:
        return stepped
    mask = torch.as_tensor(frame_mask, dtype=torch.bool, device=z_t.device)
    if mask.shape[-1] != z_t.shape[-4]:
        raise ValueError(f"frame_mask has {mask.shape[-1]} entries but the clip has {z_t.shape[-4]} frames")
    return torch.where(mask[..., None, None, None], stepped, z_t)


@dataclass(frozen=True)
class NoiseSchedule:
    """Sampling noise levels listed from ``sigma_T`` down to ``sigma_0 = 0``."""

    sigmas: tuple[float, ...]
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def num_steps(self) -> int:
        return len(self.sigmas) - 1

    def steps(self):
        """Yield ``(sigma_t, sigma_{t-1})`` pairs in sampling order."""
        return zip(self.sigmas[:-1], self.sigmas[1:])


def make_schedule(
    num_steps: int = 25,
    sigma_min: float = 0.002,
    sigma_max: float = 80.0,
    rho: float = 7.0,
) -> NoiseSchedule:
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    hi, lo = sigma_max ** (1.0 / rho), sigma_min ** (1.0 / rho)
    levels = [
        (hi + (1.0 - i / num_steps) * (lo - hi)) ** rho for i in range(num_steps, 0, -1)
    ]
    levels[0] = sigma_max
    return NoiseSchedule(tuple(levels) + (0.0,), sigma_min, sigma_max, rho)
