from __future__ import annotations

import pytest
import torch

from streamdepth.denoiser.network import (
    DenoiserModel,
    NetConfig,
    NetworkDenoiser,
    load_model,
    net_forward,
    save_model,
)
from streamdepth.io import TensorFormatError


def perturb_temporal(model: DenoiserModel, scale: float = 0.2, seed: int = 0) -> DenoiserModel:
    """Give the zero-initialised temporal output projections some weight."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.temporal_parameters():
            p.add_(scale * torch.randn(p.shape, generator=g))
    return model


@pytest.fixture
def model():
    torch.manual_seed(0)
    return DenoiserModel().double().eval()


def clip(frames=4, h=8, w=8, seed=1):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(2, frames, 1, h, w, generator=g, dtype=torch.float64)
    c = torch.rand(2, frames, 1, h, w, generator=g, dtype=torch.float64)
    s = torch.randn(2, frames, generator=g, dtype=torch.float64)
    return z, s, c


def test_shapes_and_dtype(model):
    z, s, c = clip()
    out = net_forward(model, z, s, c)
    assert out.shape == z.shape and out.dtype == z.dtype
    assert net_forward(model.float(), z[0], s[0], None).shape == z[0].shape


def test_rejects_bad_shapes(model):
    z, s, c = clip()
    with pytest.raises(ValueError):
        net_forward(model, z[0, 0, 0], s, c)
    with pytest.raises(ValueError):
        net_forward(model, z, s[:, :3], c)
    with pytest.raises(ValueError):
        net_forward(model, z, s, c[..., :4])
    with pytest.raises(ValueError):
        net_forward(model, torch.cat([z, z], dim=2), s, c)


def test_identity_init_is_frame_equivariant(model):
    z, s, c = clip(frames=5)
    perm = torch.tensor([3, 0, 4, 2, 1])
    out = net_forward(model, z, s, c)
    out_p = net_forward(model, z[:, perm], s[:, perm], c[:, perm])
    assert torch.allclose(out_p, out[:, perm], atol=1e-12)
    # and the temporal blocks are exact identities at initialisation
    assert torch.equal(out, net_forward(model, z, s, c, temporal=False))


def test_single_frame_matches_spatial_path(model):
    z, s, c = clip(frames=1)
    assert torch.allclose(net_forward(model, z, s, c), net_forward(model, z, s, c, temporal=False), atol=1e-12)


def test_noise_level_only_reaches_frames_through_temporal_layers(model):
    perturb_temporal(model)
    z, s, c = clip(frames=5)
    j = 2
    bumped = s.clone()
    bumped[:, j] += 0.5
    for temporal in (False, True):
        diff = (net_forward(model, z, bumped, c, temporal) - net_forward(model, z, s, c, temporal)).abs()
        per_frame = diff.amax(dim=(0, 2, 3, 4))
        assert per_frame[j] > 1e-6
        others = torch.cat([per_frame[:j], per_frame[j + 1:]])
        if temporal:
            assert (others > 1e-9).all()
        else:
            assert torch.equal(others, torch.zeros_like(others))


def test_parameter_groups_partition(model):
    spatial = {id(p) for p in model.spatial_parameters()}
    temporal = {id(p) for p in model.temporal_parameters()}
    assert spatial.isdisjoint(temporal)
    assert spatial | temporal == {id(p) for p in model.parameters()}
    n_all = sum(p.numel() for p in model.parameters())
    n_temp = sum(p.numel() for p in model.temporal_parameters())
    assert 0 < n_temp < n_all


def test_denoiser_wrapper_limits(model):
    den = NetworkDenoiser(model)
    z, s, c = clip(frames=3)
    assert torch.allclose(den(z, 1e-9, c), z, atol=1e-6)
    out = den(z, torch.tensor([1e-9, 5.0, 80.0], dtype=torch.float64), c)
    assert torch.allclose(out[:, 0], z[:, 0], atol=1e-6)
    assert not out.requires_grad


def test_checkpoint_round_trip(tmp_path, model):
    m = perturb_temporal(DenoiserModel(NetConfig(widths=(8, 16, 16), groups=4)))
    save_model(tmp_path / "m.ckpt", m, stage=2)
    back, header = load_model(tmp_path / "m.ckpt")
    assert header["stage"] == 2 and back.config == m.config
    for (k, a), (_, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(TensorFormatError):
        load_model(tmp_path / "bad.ckpt")
