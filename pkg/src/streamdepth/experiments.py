"""Reusable experiment drivers: Gaussian-world sampler checks and toy strategy comparisons."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .diffusion import NoiseSchedule, euler_step
from .denoiser.oracle import GaussianOracle, GaussianVideoPrior, conditional_stats
from .evalsuite import evaluate
from .streaming import STRATEGIES, Denoiser, StreamConfig, infer_clip, run_video, sample_continuation

# KITTI-360 multi-frame consistency of the three inference schemes (full model)
REFERENCE_MFC = {"naive": 0.505, "replacement": 0.479, "context_aware": 0.407}


def ar1_world(frames: int = 10, frame_dim: int = 4, rho_time: float = 0.9) -> GaussianVideoPrior:
    """Zero-mean AR(1) clip prior with unit-variance, independent frame entries."""
    return GaussianVideoPrior.ar1(frames, frame_dim, rho_time)


def _zeros_cond(prior: GaussianVideoPrior, n: int, frames: Optional[int] = None) -> Tensor:
    return torch.zeros(n, frames or prior.num_frames, 1, 1, prior.frame_dim, dtype=torch.float64)


# --- unconditional sampler fidelity ----------------------------------------

@dataclass
class FidelityResult:
    mean_err: float        # max |empirical mean - prior mean|
    cov_err: float         # max |empirical cov - prior cov|
    exact_mean_err: float  # same, for the noise-free propagated distribution
    exact_cov_err: float
    samples: int


def propagate(model: Denoiser, z_init: Tensor, schedule: NoiseSchedule, cond: Optional[Tensor] = None) -> Tensor:
    """Deterministic Euler trajectory from a given starting point."""
    z = z_init
    frames = z.shape[-4]
    for s_t, s_prev in schedule.steps():
        z = euler_step(z, model(z, torch.full((frames,), s_t, dtype=z.dtype), cond), s_t, s_prev)
    return z


def exact_sampler_moments(prior: GaussianVideoPrior, schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the sampler output under the oracle.

    The oracle is affine in its input, so the whole trajectory is an affine
    map ``b + M z_T`` of the starting noise and the output law is exactly
    ``N(b, sigma_max^2 M M^T)``.
    """
    oracle = GaussianOracle(prior)
    n = prior.num_frames * prior.frame_dim
    basis = torch.cat([torch.zeros(1, n), torch.eye(n)], dim=0).to(torch.float64)
    out = propagate(oracle, basis.reshape(n + 1, prior.num_frames, 1, 1, prior.frame_dim), schedule)
    out = out.reshape(n + 1, n).numpy()
    b = out[0]
    M = (out[1:] - b).T
    return b, schedule.sigmas[0] ** 2 * (M @ M.T)


def sampler_fidelity(prior: GaussianVideoPrior, schedule: NoiseSchedule, samples: int = 10_000,
                     seed: int = 0) -> FidelityResult:
    gen = torch.Generator().manual_seed(seed)
    z = infer_clip(GaussianOracle(prior), _zeros_cond(prior, samples), schedule, gen)
    flat = z.reshape(samples, -1).numpy()
    emp_mean = flat.mean(axis=0)
    emp_cov = np.cov(flat, rowvar=False)
    b, cov = exact_sampler_moments(prior, schedule)
    return FidelityResult(
        mean_err=float(np.abs(emp_mean - prior.mean).max()),
        cov_err=float(np.abs(emp_cov - prior.cov).max()),
        exact_mean_err=float(np.abs(b - prior.mean).max()),
        exact_cov_err=float(np.abs(cov - prior.cov).max()),
        samples=samples,
    )


# --- conditional sampling against the analytic conditional -----------------

@dataclass
class StrategyBias:
    strategy: str
    epsilon: float   # mean |empirical conditional mean - analytic conditional mean|
    ci_low: float
    ci_high: float


@dataclass
class OracleCheckResult:
    rho_time: float
    samples: int
    biases: dict
    seam_jump: float     # mean |z_F - z_{F-1}| across the naive clip boundary
    within_jump: float   # mean |z_{i+1} - z_i| for neighbours sampled in the same clip

    @property
    def seam_ratio(self) -> float:
        return self.seam_jump / self.within_jump

    @property
    def ordering_ok(self) -> bool:
        ours, repl = self.biases["context_aware"], self.biases["replacement"]
        return ours.epsilon < repl.epsilon and ours.ci_high < repl.ci_low

    def rows(self) -> list[dict]:
        out = []
        for name in STRATEGIES:
            b = self.biases[name]
            out.append({
                "strategy": name, "epsilon": b.epsilon, "ci_low": b.ci_low, "ci_high": b.ci_high,
                "seam_ratio": self.seam_ratio if name == "naive" else float("nan"),
            })
        return out


def bias_with_ci(samples: np.ndarray, target: np.ndarray, rng: np.random.Generator,
                 n_boot: int = 200, level: float = 0.95) -> tuple[float, float, float]:
    """Mean absolute error of the sample mean, with a percentile bootstrap interval."""
    n = samples.shape[0]
    eps = float(np.abs(samples.mean(axis=0) - target).mean())
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, n)
        boots[b] = np.abs(samples[idx].mean(axis=0) - target).mean()
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(boots, [tail, 100.0 - tail])
    return eps, float(lo), float(hi)


def oracle_check(
    prior: GaussianVideoPrior,
    overlap: int,
    schedule: NoiseSchedule,
    samples: int = 10_000,
    context_value: float = 2.0,
    sigma_eps: float = math.exp(-4.0),
    seed: int = 0,
    n_boot: int = 200,
) -> OracleCheckResult:
    """Run the three strategies with the exact denoiser and compare to the analytic conditional.

    The first ``overlap`` frames are fixed to ``context_value``; each strategy
    samples the remaining frames ``samples`` times.  The naive scheme is also
    run over two consecutive clips to measure the jump at the clip boundary.
    """
    F, D = prior.num_frames, prior.frame_dim
    oracle = GaussianOracle(prior)
    context = torch.full((overlap, 1, 1, D), float(context_value), dtype=torch.float64)
    target, _ = conditional_stats(prior, range(overlap), context.numpy())
    rng = np.random.default_rng(seed)
    biases = {}
    for k, name in enumerate(STRATEGIES):
        gen = torch.Generator().manual_seed(seed + k)
        new = sample_continuation(oracle, _zeros_cond(prior, samples), context, schedule, name, sigma_eps, gen)
        eps, lo, hi = bias_with_ci(new.reshape(samples, -1).numpy(), target, rng, n_boot)
        biases[name] = StrategyBias(name, eps, lo, hi)

    cfg = StreamConfig(clip_len=F, overlap=overlap, strategy="naive", num_steps=schedule.num_steps,
                       sigma_min=schedule.sigma_min, sigma_max=schedule.sigma_max, rho=schedule.rho, seed=seed)
    length = 2 * F - overlap
    video = run_video(oracle, _zeros_cond(prior, samples, length), cfg).reshape(samples, length, D).numpy()
    jumps = np.abs(np.diff(video, axis=1)).mean(axis=(0, 2))  # jump between frame i and i+1
    seam = F - 1
    within = np.delete(jumps, seam)
    return OracleCheckResult(prior_rho(prior), samples, biases, float(jumps[seam]), float(within.mean()))


def prior_rho(prior: GaussianVideoPrior) -> float:
    d = prior.frame_dim
    return float(prior.cov[0, d]) if prior.num_frames > 1 else 0.0


# --- toy-model evaluation ----------------------------------------------------

def condition_tensor(samples: Sequence) -> Tensor:
    """Shading videos mapped to [-1, 1], shape ``(S, N, 1, H, W)``."""
    return torch.stack([torch.from_numpy(2.0 * np.asarray(s.condition) - 1.0).float() for s in samples]).unsqueeze(2)


def predict_videos(model: Denoiser, samples: Sequence, cfg: StreamConfig,
                   on_progress: Optional[Callable[[int, int], None]] = None) -> np.ndarray:
    """Depth predictions (normalised units) for all sequences at once, ``(S, N, H, W)``."""
    with torch.no_grad():
        out = run_video(model, condition_tensor(samples), cfg, on_progress)
    return out[:, :, 0].numpy().astype(np.float64)


def score_predictions(preds: np.ndarray, samples: Sequence, method: str = "mesh") -> dict:
    reports = [evaluate(p, s.depth, s.cameras, gt_mask=s.mask, method=method) for p, s in zip(preds, samples)]
    return {
        "mfc": float(np.mean([r.mfc for r in reports])),
        "abs_rel": float(np.mean([r.abs_rel for r in reports])),
        "delta1": float(np.mean([r.delta1 for r in reports])),
    }


def compare_strategies(model: Denoiser, samples: Sequence, cfg: StreamConfig,
                       strategies: Sequence[str] = STRATEGIES, method: str = "mesh") -> list[dict]:
    rows = []
    for name in strategies:
        scores = score_predictions(predict_videos(model, samples, cfg.replace(strategy=name)), samples, method)
        rows.append({"strategy": name, **scores, "reference_mfc": REFERENCE_MFC[name]})
    return rows


def sweep_sigma_eps(model: Denoiser, samples: Sequence, cfg: StreamConfig, log_grid: Sequence[float],
                    method: str = "mesh") -> list[dict]:
    rows = []
    for le in log_grid:
        run = cfg.replace(strategy="context_aware", sigma_eps=float(math.exp(le)))
        scores = score_predictions(predict_videos(model, samples, run), samples, method)
        rows.append({"log_sigma_eps": float(le), "sigma_eps": run.sigma_eps, **scores})
    return rows


def interior_minimum(values: Sequence[float]) -> bool:
    i = int(np.argmin(values))
    return 0 < i < len(values) - 1


def adjacent_difference_variance(model: Denoiser, cond_clip: Tensor, cfg: StreamConfig) -> float:
    """Variance of frame-to-frame prediction differences on one clip (lower is steadier)."""
    gen = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        z = infer_clip(model, cond_clip, cfg.schedule, gen)
    return float(torch.diff(z, dim=-4).var())
