"""Small factorised video denoiser: per-frame conv UNet plus temporal blocks.

Spatial layers see a clip as a batch of independent images.  Temporal blocks
sit at the two coarse resolutions and mix features along time only, with a
1-D convolution followed by self-attention; both branches end in a
zero-initialised projection so a fresh temporal block is the identity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from ..diffusion import SIGMA_DATA, apply_denoiser


@dataclass(frozen=True)
class NetConfig:
    depth_channels: int = 1
    cond_channels: int = 1
    widths: tuple = (16, 32, 48)
    emb_dim: int = 32
    noise_freqs: int = 8
    temporal_kernel: int = 3
    groups: int = 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def noise_features(c_noise: Tensor, freqs: int) -> Tensor:
    """Sinusoidal features of ``c_noise``, shape ``(..., 2 * freqs)``."""
    scale = torch.exp(torch.arange(freqs, dtype=c_noise.dtype) * (math.log(100.0) / max(freqs - 1, 1)))
    arg = c_noise[..., None] * scale
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(min(groups, ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class TemporalBlock(nn.Module):
    """Residual mixing along the frame axis at every spatial location."""

    def __init__(self, ch: int, kernel: int):
        super().__init__()
        self.norm_conv = nn.LayerNorm(ch)
        self.conv = nn.Conv1d(ch, ch, kernel, padding=kernel // 2)
        self.conv_out = nn.Linear(ch, ch)
        self.norm_attn = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.attn_out = nn.Linear(ch, ch)
        for proj in (self.conv_out, self.attn_out):
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)

    def forward(self, x: Tensor, frames: int) -> Tensor:
        bf, c, h, w = x.shape
        b = bf // frames
        y = x.reshape(b, frames, c, h, w).permute(0, 3, 4, 1, 2).reshape(b * h * w, frames, c)
        k = self.conv(self.norm_conv(y).transpose(1, 2)).transpose(1, 2)
        y = y + self.conv_out(F.silu(k))
        q, k, v = self.qkv(self.norm_attn(y)).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        y = y + self.attn_out(att @ v)
        return y.reshape(b, h, w, frames, c).permute(0, 3, 4, 1, 2).reshape(bf, c, h, w)


class DenoiserModel(nn.Module):
    """Residual network ``F_theta(c_in * z, c_noise, cond)`` on clips ``(..., F, C, H, W)``."""

    def __init__(self, config: Optional[NetConfig] = None):
        super().__init__()
        self.config = cfg = config or NetConfig()
        c1, c2, c3 = cfg.widths
        e, g = cfg.emb_dim, cfg.groups
        self.embed = nn.Sequential(nn.Linear(2 * cfg.noise_freqs, e), nn.SiLU(), nn.Linear(e, e))
        self.inp = nn.Conv2d(cfg.depth_channels + cfg.cond_channels, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, e, g)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, e, g)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c3, e, g)
        self.glob = nn.Linear(c3, c3)
        self.mid2 = ResBlock(c3, e, g)
        self.up2 = nn.Conv2d(c3 + c2, c2, 3, padding=1)
        self.dec2 = ResBlock(c2, e, g)
        self.up1 = nn.Conv2d(c2 + c1, c1, 3, padding=1)
        self.dec1 = ResBlock(c1, e, g)
        self.out_norm = nn.GroupNorm(min(g, c1), c1)
        self.out = nn.Conv2d(c1, cfg.depth_channels, 3, padding=1)
        self.temporal = nn.ModuleDict({
            "enc2": TemporalBlock(c2, cfg.temporal_kernel),
            "mid": TemporalBlock(c3, cfg.temporal_kernel),
            "dec2": TemporalBlock(c2, cfg.temporal_kernel),
        })

    def spatial_parameters(self) -> Iterator[nn.Parameter]:
        for name, p in self.named_parameters():
            if not name.startswith("temporal."):
                yield p

    def temporal_parameters(self) -> Iterator[nn.Parameter]:
        return self.temporal.parameters()

    def forward(self, z_in: Tensor, c_noise: Tensor, cond: Optional[Tensor], temporal: bool = True) -> Tensor:
        return net_forward(self, z_in, c_noise, cond, temporal=temporal)


def net_forward(
    model: DenoiserModel,
    z_in: Tensor,
    c_noise: Tensor,
    cond: Optional[Tensor],
    temporal: bool = True,
) -> Tensor:
    """Evaluate the raw network.

    ``c_noise`` is ``(F,)`` or ``(..., F)``; entry ``i`` only enters frame
    ``i``'s features.  The condition is concatenated with the depth input on
    the channel axis.  ``temporal=False`` bypasses the temporal blocks.
    """
    cfg = model.config
    if z_in.ndim < 4:
        raise ValueError(f"z_in must be (..., F, C, H, W), got {tuple(z_in.shape)}")
    lead, frames = z_in.shape[:-4], z_in.shape[-4]
    if c_noise.shape[-1] != frames:
        raise ValueError(f"c_noise has {c_noise.shape[-1]} entries for {frames} frames")
    if z_in.shape[-3] != cfg.depth_channels:
        raise ValueError(f"expected {cfg.depth_channels} depth channels, got {z_in.shape[-3]}")
    if cond is None:
        cond = z_in.new_zeros(*z_in.shape[:-3], cfg.cond_channels, *z_in.shape[-2:])
    if cond.shape[:-3] != z_in.shape[:-3] or cond.shape[-2:] != z_in.shape[-2:] or cond.shape[-3] != cfg.cond_channels:
        raise ValueError(f"condition {tuple(cond.shape)} does not match depth input {tuple(z_in.shape)}")
    dtype = next(model.parameters()).dtype
    h, w = z_in.shape[-2:]
    x = torch.cat([z_in, cond], dim=-3).to(dtype).reshape(-1, cfg.depth_channels + cfg.cond_channels, h, w)
    emb = model.embed(noise_features(c_noise.to(dtype).expand(*lead, frames), cfg.noise_freqs)).reshape(-1, cfg.emb_dim)

    def mix(name: str, t: Tensor) -> Tensor:
        return model.temporal[name](t, frames) if temporal else t

    s1 = model.enc1(model.inp(x), emb)
    s2 = mix("enc2", model.enc2(model.down1(s1), emb))
    m = model.mid1(model.down2(s2), emb)
    m = m + model.glob(m.mean(dim=(-2, -1)))[:, :, None, None]
    m = mix("mid", model.mid2(m, emb))
    u = F.interpolate(m, size=s2.shape[-2:], mode="nearest")
    u = mix("dec2", model.dec2(model.up2(torch.cat([u, s2], dim=1)), emb))
    u = F.interpolate(u, size=s1.shape[-2:], mode="nearest")
    u = model.dec1(model.up1(torch.cat([u, s1], dim=1)), emb)
    out = model.out(F.silu(model.out_norm(u)))
    return out.reshape(*lead, frames, cfg.depth_channels, h, w).to(z_in.dtype)


class NetworkDenoiser:
    """Inference wrapper: ``(z_t, sigma, cond) -> z0`` with preconditioning, gradients off."""

    def __init__(self, model: DenoiserModel, sigma_data: float = SIGMA_DATA, temporal: bool = True):
        self.model = model.eval()
        self.sigma_data = sigma_data
        self.temporal = temporal

    def raw(self, z_in: Tensor, c_noise: Tensor, cond: Optional[Tensor]) -> Tensor:
        return net_forward(self.model, z_in, c_noise, cond, temporal=self.temporal)

    @torch.no_grad()
    def __call__(self, z_t: Tensor, sigma, cond: Optional[Tensor]) -> Tensor:
        return apply_denoiser(self.raw, z_t, sigma, cond, self.sigma_data)


CHECKPOINT_KIND = "streamdepth-denoiser"


def save_model(path, model: DenoiserModel, **header) -> None:
    """Write parameters and config to the versioned checkpoint container."""
    from ..io import save_checkpoint

    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, state, dict(header, kind=CHECKPOINT_KIND, net=model.config.to_dict()))


def load_model(path) -> tuple[DenoiserModel, dict]:
    from ..io import TensorFormatError, load_checkpoint

    state, header = load_checkpoint(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise TensorFormatError(f"{path}: not a denoiser checkpoint")
    model = DenoiserModel(NetConfig.from_dict(header["net"]))
    try:
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
    except RuntimeError as exc:
        raise TensorFormatError(f"{path}: parameters do not match the stored config") from exc
    return model.eval(), header
