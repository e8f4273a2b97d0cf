"""Closed-form denoising for Gaussian video priors.

When clean clips are exactly Gaussian the minimiser of the denoising loss is
the posterior mean, so these routines give an exact reference denoiser and the
exact conditional distribution that a sliding-window sampler should reproduce.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor


@dataclass(frozen=True)
class GaussianVideoPrior:
    """Joint Gaussian over a flattened clip of ``num_frames`` frames of ``frame_dim`` values."""

    mean: np.ndarray
    cov: np.ndarray
    num_frames: int
    frame_dim: int
    structure: str = "dense"
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.num_frames * self.frame_dim
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.shape != (n,) or cov.shape != (n, n):
            raise ValueError(
                f"prior of {self.num_frames}x{self.frame_dim} needs mean ({n},) and cov ({n},{n}), "
                f"got {mean.shape} and {cov.shape}"
            )
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def ar1(
        cls,
        num_frames: int,
        frame_dim: int,
        rho_time: float,
        frame_cov: Optional[np.ndarray] = None,
        mean: Optional[np.ndarray] = None,
    ) -> "GaussianVideoPrior":
        """Stationary AR(1) in time: block ``(i, j)`` is ``rho_time**|i-j| * frame_cov``."""
        if not -1.0 < rho_time < 1.0:
            raise ValueError(f"rho_time must lie in (-1, 1), got {rho_time}")
        frame_cov = np.eye(frame_dim) if frame_cov is None else np.asarray(frame_cov, dtype=np.float64)
        idx = np.arange(num_frames)
        temporal = rho_time ** np.abs(idx[:, None] - idx[None, :])
        cov = np.kron(temporal, frame_cov)
        mean = np.zeros(num_frames * frame_dim) if mean is None else np.asarray(mean, dtype=np.float64)
        if mean.size == frame_dim:
            mean = np.tile(mean.reshape(-1), num_frames)
        return cls(mean, cov, num_frames, frame_dim, structure=f"ar1(rho={rho_time})")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` flattened clips, shape ``(n, F*D)``."""
        g = rng.standard_normal((n, self.mean.size))
        return self.mean + g @ self._chol.T

    def frame_slice(self, frames: Sequence[int]) -> np.ndarray:
        d = self.frame_dim
        return np.concatenate([np.arange(f * d, (f + 1) * d) for f in frames])


def _flatten_clip(z: Tensor, prior: GaussianVideoPrior) -> Tensor:
    f, d = prior.num_frames, prior.frame_dim
    if z.ndim < 4 or z.shape[-4] != f or int(np.prod(z.shape[-3:])) != d:
        raise ValueError(f"clip shape {tuple(z.shape)} does not match prior of {f} frames x {d} values")
    return z.reshape(*z.shape[:-4], f * d)


def gaussian_oracle_denoise(prior: GaussianVideoPrior, z_t: Tensor, sigma) -> Tensor:
    """Posterior mean ``E[z0 | z_t]`` with frame ``i`` observed under noise ``sigma_i``.

    ``z_t`` is ``(..., F, C, H, W)`` with ``C*H*W`` equal to the prior's frame
    dimension.  ``sigma`` is ``(F,)`` (shared across the batch) or ``(..., F)``.
    """
    flat = _flatten_clip(z_t, prior).to(torch.float64)
    sigma = torch.as_tensor(sigma, dtype=torch.float64)
    if sigma.ndim == 0:
        sigma = sigma.expand(prior.num_frames)
    if sigma.shape[-1] != prior.num_frames:
        raise ValueError(f"sigma has {sigma.shape[-1]} entries, prior has {prior.num_frames} frames")
    if not bool(torch.all(sigma > 0)):
        raise ValueError("sigma must be positive")
    cov = torch.from_numpy(prior.cov)
    mu = torch.from_numpy(prior.mean)
    noise_var = torch.repeat_interleave(sigma**2, prior.frame_dim, dim=-1)
    # (Sigma + N)^{-1} Sigma, transposed, applied to row vectors
    system = cov + torch.diag_embed(noise_var)
    gain = torch.linalg.solve(system, cov.expand_as(system))
    centred = (flat - mu).unsqueeze(-2)
    out = mu + (centred @ gain).squeeze(-2)
    return out.reshape(z_t.shape).to(z_t.dtype)


class GaussianOracle:
    """Denoiser callable ``(z_t, sigma, cond) -> z0`` backed by a Gaussian prior."""

    def __init__(self, prior: GaussianVideoPrior):
        self.prior = prior

    def __call__(self, z_t: Tensor, sigma, cond: Optional[Tensor] = None) -> Tensor:
        return gaussian_oracle_denoise(self.prior, z_t, sigma)


def conditional_stats(
    prior: GaussianVideoPrior,
    known_frames: Sequence[int],
    known_values: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the unknown frames given exact values of the known ones.

    Returns the flattened conditional mean (``(U*D,)``, unknown frames in
    ascending order) and its covariance via the Schur complement.
    """
    known = sorted(set(int(k) for k in known_frames))
    if not known or len(known) >= prior.num_frames:
        raise ValueError("known frame set must be non-empty and a proper subset of the frames")
    if known[0] < 0 or known[-1] >= prior.num_frames:
        raise ValueError(f"known frame index out of range for {prior.num_frames} frames")
    unknown = [f for f in range(prior.num_frames) if f not in known]
    ki, ui = prior.frame_slice(known), prior.frame_slice(unknown)
    values = np.asarray(known_values, dtype=np.float64).reshape(-1)
    if values.size != ki.size:
        raise ValueError(f"expected {ki.size} known values, got {values.size}")
    s_kk = prior.cov[np.ix_(ki, ki)]
    s_uk = prior.cov[np.ix_(ui, ki)]
    s_uu = prior.cov[np.ix_(ui, ui)]
    gain = np.linalg.solve(s_kk, s_uk.T).T
    mean = prior.mean[ui] + gain @ (values - prior.mean[ki])
    cov = s_uu - gain @ s_uk.T
    return mean, 0.5 * (cov + cov.T)
