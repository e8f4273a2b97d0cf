"""Single-clip sampling and sliding-window inference over arbitrarily long videos.

Three ways of carrying information from one clip to the next are supported:

``naive``
    every clip starts from fresh noise and ignores earlier predictions.
``replacement``
    the overlapping frames are re-noised from the previous predictions at
    every sampling step, and the denoiser sees them at the current noise level.
``context_aware``
    the overlapping frames are held at the previous (clean) predictions for
    the whole trajectory and declared to the denoiser at a small noise level
    ``sigma_eps``; only the new frames are integrated.

All strategies keep the first prediction of an overlapped frame; later clips
never re-emit it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Protocol

import torch
from torch import Tensor

from .diffusion import NoiseSchedule, euler_step, forward_diffuse, make_schedule

STRATEGIES = ("naive", "replacement", "context_aware")


class Denoiser(Protocol):
    def __call__(self, z_t: Tensor, sigma: Tensor, cond: Optional[Tensor]) -> Tensor: ...


ProgressCallback = Callable[[int, int], None]


class StreamSourceError(RuntimeError):
    """The frame provider raised while the stream was being consumed."""


@dataclass
class StreamConfig:
    clip_len: int = 10
    overlap: int = 5
    strategy: str = "context_aware"
    sigma_eps: float = math.exp(-4.0)
    num_steps: int = 25
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    depth_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.clip_len < 1:
            raise ValueError(f"clip_len must be >= 1, got {self.clip_len}")
        if not 0 <= self.overlap < self.clip_len:
            raise ValueError(f"overlap must satisfy 0 <= W < F, got W={self.overlap}, F={self.clip_len}")
        if self.strategy != "naive" and self.overlap == 0:
            raise ValueError(f"strategy {self.strategy!r} needs at least one overlapping frame")
        if self.strategy == "context_aware" and not self.sigma_eps > 0:
            raise ValueError(f"sigma_eps must be positive, got {self.sigma_eps}")
        if self.depth_channels < 1:
            raise ValueError("depth_channels must be >= 1")

    @property
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.num_steps, self.sigma_min, self.sigma_max, self.rho)

    def replace(self, **changes) -> "StreamConfig":
        params = {k: getattr(self, k) for k in self.__dataclass_fields__}
        params.update(changes)
        return StreamConfig(**params)


@dataclass
class WindowState:
    """Last ``W`` emitted depth frames plus the number of frames emitted so far."""

    context_frames: Optional[Tensor] = None
    global_frame_index: int = 0


def _depth_shape(cond: Tensor, channels: int) -> tuple[int, ...]:
    if cond.ndim < 4 or cond.shape[-4] < 1:
        raise ValueError(f"condition clip must be (..., F, C, H, W) with F >= 1, got {tuple(cond.shape)}")
    return (*cond.shape[:-3], channels, *cond.shape[-2:])


def infer_clip(
    model: Denoiser,
    cond: Tensor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    depth_channels: int = 1,
    per_frame: bool = True,
    on_step: Optional[Callable[[int], None]] = None,
) -> Tensor:
    """Sample one depth clip from pure noise with Euler steps along ``schedule``.

    With ``per_frame=False`` the denoiser receives a scalar noise level
    instead of a constant per-frame vector.
    """
    shape = _depth_shape(cond, depth_channels)
    frames = shape[-4]
    z = torch.randn(shape, generator=generator, dtype=cond.dtype) * schedule.sigmas[0]
    for step, (s_t, s_prev) in enumerate(schedule.steps()):
        sigma = torch.full((frames,), s_t, dtype=cond.dtype) if per_frame else torch.tensor(s_t, dtype=cond.dtype)
        z0 = model(z, sigma, cond)
        z = euler_step(z, z0, s_t, s_prev)
        if on_step is not None:
            on_step(step)
    return z


def sample_continuation(
    model: Denoiser,
    cond: Tensor,
    context: Tensor,
    schedule: NoiseSchedule,
    strategy: str,
    sigma_eps: float = math.exp(-4.0),
    generator: Optional[torch.Generator] = None,
    on_step: Optional[Callable[[int], None]] = None,
) -> Tensor:
    """Sample the last ``F - W`` frames of a clip whose first ``W`` frames are ``context``.

    Returns only the new frames, shape ``(..., F - W, C, H, W)``.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    frames, ctx_len = cond.shape[-4], context.shape[-4]
    if not 0 < ctx_len < frames:
        raise ValueError(f"context length {ctx_len} must lie in (0, {frames})")
    if strategy == "context_aware" and not sigma_eps > 0:
        raise ValueError(f"sigma_eps must be positive, got {sigma_eps}")
    shape = _depth_shape(cond, context.shape[-3])
    context = context.to(cond.dtype).expand(*shape[:-4], *context.shape[-4:])
    update = torch.arange(frames) >= ctx_len
    s_max = schedule.sigmas[0]

    if strategy == "naive":
        clip = infer_clip(model, cond, schedule, generator, context.shape[-3], on_step=on_step)
        return clip[..., ctx_len:, :, :, :]

    new_shape = (*shape[:-4], frames - ctx_len, *shape[-3:])
    z_new = torch.randn(new_shape, generator=generator, dtype=cond.dtype) * s_max
    for step, (s_t, s_prev) in enumerate(schedule.steps()):
        if strategy == "replacement":
            ctx_t = forward_diffuse(context, s_t, generator)
            sigma = torch.full((frames,), s_t, dtype=cond.dtype)
        else:
            ctx_t = context
            sigma = torch.cat([
                torch.full((ctx_len,), sigma_eps, dtype=cond.dtype),
                torch.full((frames - ctx_len,), s_t, dtype=cond.dtype),
            ])
        z = torch.cat([ctx_t, z_new], dim=-4)
        z0 = model(z, sigma, cond)
        z = euler_step(z, z0, s_t, s_prev, update)
        z_new = z[..., ctx_len:, :, :, :]
        if on_step is not None:
            on_step(step)
    return z_new


class StreamRunner:
    """Incremental sliding-window inference.

    Condition frames are pushed one at a time (each ``(..., C, H, W)``);
    depth frames come back as soon as a clip can be run.  ``flush`` handles
    the trailing partial clip by repeating the last condition frame.
    """

    def __init__(self, model: Denoiser, cfg: StreamConfig, on_progress: Optional[ProgressCallback] = None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.schedule = cfg.schedule
        self.on_progress = on_progress
        self.generator = torch.Generator().manual_seed(int(cfg.seed))
        self.state = WindowState()
        self.clip_index = 0
        self.clip_times: list[float] = []
        self._pending: list[Tensor] = []  # condition frames from the next clip's start onwards
        self._received = 0

    @property
    def frames_received(self) -> int:
        return self._received

    def push(self, frame: Tensor) -> Optional[Tensor]:
        self._pending.append(frame)
        self._received += 1
        # after the first clip, pending starts at the next clip's context frames
        if len(self._pending) >= self.cfg.clip_len:
            return self._run(self._pending[: self.cfg.clip_len], emit=None)
        return None

    def flush(self) -> Optional[Tensor]:
        ctx = 0 if self.clip_index == 0 else self.cfg.overlap
        fresh = len(self._pending) - ctx
        if fresh <= 0:
            return None
        frames = self._pending + [self._pending[-1]] * (self.cfg.clip_len - len(self._pending))
        return self._run(frames, emit=fresh)

    def _run(self, frames: list[Tensor], emit: Optional[int]) -> Tensor:
        cfg = self.cfg
        cond = torch.stack(frames, dim=-4)
        clip = self.clip_index

        def step_hook(step: int) -> None:
            if self.on_progress is not None:
                self.on_progress(clip, step)

        start = time.perf_counter()
        if clip == 0 or cfg.overlap == 0:
            depth = infer_clip(self.model, cond, self.schedule, self.generator, cfg.depth_channels, on_step=step_hook)
        else:
            depth = sample_continuation(
                self.model, cond, self.state.context_frames, self.schedule,
                cfg.strategy, cfg.sigma_eps, self.generator, on_step=step_hook,
            )
        self.clip_times.append(time.perf_counter() - start)
        if emit is not None:
            depth = depth[..., :emit, :, :, :]

        self._update_state(depth)
        self.clip_index += 1
        step = cfg.clip_len - cfg.overlap
        self._pending = self._pending[step:] if emit is None else []
        return depth

    def _update_state(self, emitted: Tensor) -> None:
        w = self.cfg.overlap
        prev = self.state.context_frames
        recent = emitted if prev is None else torch.cat([prev, emitted], dim=-4)
        self.state.context_frames = recent[..., recent.shape[-4] - w:, :, :, :] if w else recent[..., :0, :, :, :]
        self.state.global_frame_index += emitted.shape[-4]


def run_stream(
    model: Denoiser,
    frame_source: Iterable[Tensor],
    cfg: StreamConfig,
    on_progress: Optional[ProgressCallback] = None,
    runner: Optional[StreamRunner] = None,
) -> Iterator[Tensor]:
    """Yield depth frames one by one while consuming condition frames in order."""
    runner = runner or StreamRunner(model, cfg, on_progress)
    position = 0
    iterator = iter(frame_source)
    while True:
        try:
            frame = next(iterator)
        except StopIteration:
            break
        except Exception as exc:
            raise StreamSourceError(f"frame source failed at frame {position}") from exc
        position += 1
        out = runner.push(frame)
        if out is not None:
            yield from out.unbind(dim=-4)
    out = runner.flush()
    if out is not None:
        yield from out.unbind(dim=-4)


def run_video(
    model: Denoiser,
    video_cond: Tensor,
    cfg: StreamConfig,
    on_progress: Optional[ProgressCallback] = None,
    runner: Optional[StreamRunner] = None,
) -> Tensor:
    """Depth for a whole condition video ``(..., N, C, H, W)`` using ``cfg.strategy``."""
    if video_cond.ndim < 4 or video_cond.shape[-4] < 1:
        raise ValueError(f"video must be (..., N, C, H, W) with N >= 1, got {tuple(video_cond.shape)}")
    frames = list(run_stream(model, video_cond.unbind(dim=-4), cfg, on_progress, runner))
    return torch.stack(frames, dim=-4)


def naive_sliding_window(model: Denoiser, video_cond: Tensor, cfg: StreamConfig, **kw) -> Tensor:
    return run_video(model, video_cond, cfg.replace(strategy="naive"), **kw)


def replacement_sliding_window(model: Denoiser, video_cond: Tensor, cfg: StreamConfig, **kw) -> Tensor:
    return run_video(model, video_cond, cfg.replace(strategy="replacement"), **kw)


def context_aware_sliding_window(model: Denoiser, video_cond: Tensor, cfg: StreamConfig, **kw) -> Tensor:
    return run_video(model, video_cond, cfg.replace(strategy="context_aware"), **kw)


def num_clips(num_frames: int, clip_len: int, overlap: int) -> int:
    """Number of clip inferences needed to cover ``num_frames`` frames."""
    if num_frames <= clip_len:
        return 1
    return 1 + math.ceil((num_frames - clip_len) / (clip_len - overlap))
