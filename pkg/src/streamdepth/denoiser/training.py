"""Two-stage denoising training: spatial layers on single frames, then temporal layers on clips."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from ..diffusion import P_MEAN, P_STD, SIGMA_DATA, apply_denoiser, dsm_loss, sample_sigma_per_frame

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    batch_size: int = 16       # frames per single-frame step
    clip_batch: int = 4        # clips per clip step
    steps_stage1: int = 1000
    steps_stage2: int = 1000
    f_max: int = 10
    p_mean: float = P_MEAN
    p_std: float = P_STD
    sigma_data: float = SIGMA_DATA
    seed: int = 0
    joint: bool = False        # clip stage updates every parameter

    def __post_init__(self):
        if self.f_max < 1:
            raise ValueError(f"f_max must be >= 1, got {self.f_max}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.steps_stage1 < 0 or self.steps_stage2 < 0:
            raise ValueError("step counts must be non-negative")
        if self.batch_size < 1 or self.clip_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.p_std > 0:
            raise ValueError("p_std must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class SequenceSet:
    """Training sequences as tensors: condition in [-1, 1] and normalised depth, each ``(L, 1, H, W)``."""

    cond: list
    depth: list

    def __post_init__(self):
        if len(self.cond) != len(self.depth):
            raise ValueError("condition and depth lists differ in length")
        for c, d in zip(self.cond, self.depth):
            if c.shape[0] != d.shape[0] or c.shape[-2:] != d.shape[-2:]:
                raise ValueError(f"condition {tuple(c.shape)} and depth {tuple(d.shape)} disagree")

    @classmethod
    def from_samples(cls, samples: Iterable) -> "SequenceSet":
        cond, depth = [], []
        for s in samples:
            nd = np.where(s.mask, s.normalized_depth(), 1.0)
            cond.append(torch.from_numpy(2.0 * s.condition - 1.0).float().unsqueeze(1))
            depth.append(torch.from_numpy(nd).float().unsqueeze(1))
        return cls(cond, depth)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple]) -> "SequenceSet":
        """Single-frame ``(condition, normalised depth)`` arrays, each ``(H, W)``."""
        cond = [torch.as_tensor(2.0 * np.asarray(c) - 1.0).float()[None, None] for c, _ in pairs]
        depth = [torch.as_tensor(np.asarray(d)).float()[None, None] for _, d in pairs]
        return cls(cond, depth)

    def __len__(self) -> int:
        return len(self.cond)

    @property
    def num_frames(self) -> int:
        return sum(c.shape[0] for c in self.cond)

    def frames(self) -> tuple[Tensor, Tensor]:
        return torch.cat(self.cond), torch.cat(self.depth)


@dataclass
class DenoiseBatch:
    """Clean clips, conditions and the unit noise that will be scaled by sigma."""

    z0: Tensor     # (B, F, C, H, W)
    cond: Tensor   # (B, F, Cc, H, W)
    noise: Tensor  # like z0


def sample_clip_length(f_max: int, rng: torch.Generator) -> int:
    """Uniform integer in ``[1, f_max]``."""
    if f_max < 1:
        raise ValueError(f"f_max must be >= 1, got {f_max}")
    return int(torch.randint(1, f_max + 1, (1,), generator=rng))


def _raw(model: nn.Module, temporal: bool) -> Callable:
    if hasattr(model, "temporal_parameters"):
        return lambda z, c, y: model(z, c, y, temporal=temporal)
    return model


def batch_loss(model: nn.Module, batch: DenoiseBatch, sigma: Tensor, sigma_data: float = SIGMA_DATA,
               temporal: bool = True) -> Tensor:
    """``dsm_loss`` of the preconditioned model on ``z0 + sigma * noise``."""
    sigma = torch.as_tensor(sigma, dtype=batch.z0.dtype)
    view = sigma.reshape(*sigma.shape, 1, 1, 1) if sigma.ndim else sigma
    z_t = batch.z0 + view * batch.noise
    pred = apply_denoiser(_raw(model, temporal), z_t, sigma, batch.cond, sigma_data)
    return dsm_loss(pred, batch.z0, sigma)


def _group(model: nn.Module, which: str) -> list:
    if which == "all" or not hasattr(model, "temporal_parameters"):
        return list(model.parameters())
    if which == "spatial":
        return list(model.spatial_parameters())
    if which == "temporal":
        return list(model.temporal_parameters())
    raise ValueError(f"unknown parameter group {which!r}")


def loss_gradient(model: nn.Module, batch: DenoiseBatch, sigma: Tensor, group: str = "all",
                  sigma_data: float = SIGMA_DATA, temporal: bool = True) -> dict:
    """Gradient of ``batch_loss`` for every named parameter.

    Parameters outside ``group`` ("all", "spatial" or "temporal") are treated
    as frozen and get exact zeros.  ``temporal=False`` differentiates the
    stage-one network with the temporal blocks bypassed.
    """
    if batch.z0.shape != batch.noise.shape:
        raise ValueError(f"noise {tuple(batch.noise.shape)} does not match z0 {tuple(batch.z0.shape)}")
    trained = {id(p) for p in _group(model, group)}
    named = list(model.named_parameters())
    live = [p for _, p in named if id(p) in trained]
    loss = batch_loss(model, batch, sigma, sigma_data, temporal)
    grads = iter(torch.autograd.grad(loss, live, allow_unused=True))
    out = {}
    for name, p in named:
        g = next(grads) if id(p) in trained else None
        out[name] = torch.zeros_like(p) if g is None else g.detach()
    return out


def _optimise(
    model: nn.Module,
    params: list,
    draw: Callable[[torch.Generator], tuple[Tensor, Tensor]],
    steps: int,
    cfg: TrainConfig,
    gen: torch.Generator,
    temporal: bool,
    losses: Optional[list],
    label: str,
) -> None:
    if steps == 0:
        return
    trained = {id(p) for p in params}
    saved = [(p, p.requires_grad) for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(id(p) in trained)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    model.train()
    try:
        for step in range(steps):
            z0, cond = draw(gen)
            sigma = sample_sigma_per_frame(z0.shape[1], cfg.p_mean, cfg.p_std, gen, batch_shape=(z0.shape[0],))
            noise = torch.randn(z0.shape, generator=gen)
            loss = batch_loss(model, DenoiseBatch(z0, cond, noise), sigma, cfg.sigma_data, temporal)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            value = float(loss.detach())
            if losses is not None:
                losses.append(value)
            if step % 100 == 0 or step == steps - 1:
                log.info("%s step %d/%d loss %.5f", label, step + 1, steps, value)
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)
        model.eval()


def train_spatial(model: nn.Module, data: SequenceSet, cfg: TrainConfig,
                  losses: Optional[list] = None) -> nn.Module:
    """Fit the per-frame layers on independent frames; temporal layers stay untouched.

    Every frame of every sequence is a training sample.  The loss per step is
    appended to ``losses`` when given.
    """
    cond, depth = data.frames() if len(data) else (None, None)
    if cond is None or cond.shape[0] == 0:
        raise ValueError("single-frame dataset is empty")
    n = cond.shape[0]

    def draw(gen: torch.Generator):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        return depth[idx].unsqueeze(1), cond[idx].unsqueeze(1)

    gen = torch.Generator().manual_seed(int(cfg.seed))
    _optimise(model, _group(model, "spatial"), draw, cfg.steps_stage1, cfg, gen, False, losses, "stage1")
    return model


def train_temporal(model: nn.Module, data: SequenceSet, cfg: TrainConfig,
                   losses: Optional[list] = None) -> nn.Module:
    """Fit the cross-frame layers on clips of random length in ``[1, f_max]``.

    Spatial layers are frozen unless ``cfg.joint`` is set, in which case the
    whole network is optimised.  Clips are drawn from sequences at least
    ``f_max`` frames long.
    """
    if len(data) == 0:
        raise ValueError("clip dataset is empty")
    lengths = [c.shape[0] for c in data.cond]
    if min(lengths) < 1:
        raise ValueError("sequences must have at least one frame")
    usable = [i for i, n in enumerate(lengths) if n >= cfg.f_max]
    if not usable:
        raise ValueError(f"no sequence has at least f_max={cfg.f_max} frames (longest {max(lengths)})")

    def draw(gen: torch.Generator):
        f = sample_clip_length(cfg.f_max, gen)
        zs, cs = [], []
        for _ in range(cfg.clip_batch):
            i = usable[int(torch.randint(0, len(usable), (1,), generator=gen))]
            start = int(torch.randint(0, lengths[i] - f + 1, (1,), generator=gen))
            zs.append(data.depth[i][start:start + f])
            cs.append(data.cond[i][start:start + f])
        return torch.stack(zs), torch.stack(cs)

    gen = torch.Generator().manual_seed(int(cfg.seed) + 1)
    params = _group(model, "all" if cfg.joint else "temporal")
    _optimise(model, params, draw, cfg.steps_stage2, cfg, gen, True, losses, "stage2")
    return model
