from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamdepth.evalsuite import (
    REPORT_COLUMNS,
    DegenerateInputError,
    abs_rel,
    delta1,
    evaluate,
    fit_scale_shift_global,
    mfc,
    mfc_flow,
    warp_depth,
)
from streamdepth.worldgen import CameraFrame, FlowField, generate_dataset, intrinsics

H = W = 16
K = intrinsics(H, W)
IDENT = CameraFrame(K, np.eye(3), np.zeros(3))


def shifted(tx: float) -> CameraFrame:
    return CameraFrame(K, np.eye(3), np.array([-tx, 0.0, 0.0]))


@pytest.fixture(scope="module")
def room():
    return generate_dataset(n_sequences=1, frames_per_seq=6, seed=4, height=24, width=24)[0]


# --- alignment and accuracy ------------------------------------------------------

def test_fit_examples():
    gt = np.array([1.0, 2.0, 3.0])
    fit = fit_scale_shift_global(np.array([1.0, 1.0, 2.0]), gt)
    assert (fit.scale, fit.shift) == pytest.approx((1.5, 0.0), abs=1e-12)
    aligned = fit.scale * np.array([1.0, 1.0, 2.0]) + fit.shift
    assert np.allclose(aligned, [1.5, 1.5, 3.0])
    assert abs_rel(aligned, gt) == pytest.approx(0.25)

    fit = fit_scale_shift_global(2 * gt + 3, gt)
    assert (fit.scale, fit.shift) == pytest.approx((0.5, -1.5))
    assert abs_rel(fit.scale * (2 * gt + 3) + fit.shift, gt) == pytest.approx(0.0, abs=1e-12)

    fit = fit_scale_shift_global(np.array([0.0, 1.0]), np.array([1.0, 2.0]))
    assert (fit.scale, fit.shift) == pytest.approx((1.0, 1.0))


def test_fit_errors_and_fallback():
    with pytest.raises(DegenerateInputError):
        fit_scale_shift_global(np.array([1.0, 2.0]), np.array([1.0, 2.0]), np.array([True, False]))
    fit = fit_scale_shift_global(np.full(3, 2.0), np.array([1.0, 2.0, 3.0]))
    assert fit.degenerate and fit.scale == 1.0 and fit.shift == pytest.approx(0.0)


def test_metric_examples():
    assert abs_rel(np.array([1.5]), np.array([1.0])) == pytest.approx(0.5)
    assert delta1(np.array([1.3]), np.array([1.0])) == 0.0
    assert delta1(np.array([1.0, 2.4]), np.array([1.0, 2.0])) == 1.0
    g = np.array([1.0, 2.0, 3.0])
    assert abs_rel(g, g) == 0.0 and delta1(g, g) == 1.0
    with pytest.raises(DegenerateInputError):
        abs_rel(g, g, np.zeros(3, bool))
    with pytest.raises(DegenerateInputError):
        delta1(g, g, np.zeros(3, bool))
    d, excluded = delta1(np.array([-1.0, 2.0]), np.array([1.0, 2.0]), return_excluded=True)
    assert excluded == 1 and d == 1.0


def test_delta1_monotone_in_error(rng):
    gt = rng.uniform(1.0, 5.0, 4000)
    direction = rng.standard_normal(4000)
    values = [delta1(gt * np.exp(s * direction), gt) for s in np.linspace(0.0, 1.0, 21)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert values[0] == 1.0 and values[-1] < 0.5


# --- warping ----------------------------------------------------------------------

@pytest.mark.parametrize("method", ["mesh", "splat"])
def test_warp_identity_and_translation(method, rng):
    v, u = np.mgrid[0:H, 0:W]
    depth = 3.0 + 0.5 * np.sin(u / 3.0) * np.cos(v / 4.0)
    out, mask = warp_depth(depth, IDENT, IDENT, method=method)
    assert mask.all()
    assert np.allclose(out, depth, rtol=1e-9)
    plane = np.full((H, W), 3.0)
    out, mask = warp_depth(plane, IDENT, shifted(0.3), method=method)
    assert mask.sum() > 0.5 * H * W and not mask.all()
    assert np.allclose(out[mask], 3.0, atol=1e-12)


def test_warp_keeps_nearer_point():
    depth = np.zeros((H, W))
    valid = np.zeros((H, W), bool)
    # camera moves by -0.5 in x: a point at depth d shifts right by f*0.5/d = 8/d pixels
    depth[5, 8], depth[5, 2] = 4.0, 1.0
    valid[5, 8] = valid[5, 2] = True
    out, mask = warp_depth(depth, IDENT, shifted(-0.5), valid, method="splat")
    assert mask.sum() == 1 and mask[5, 10] and out[5, 10] == pytest.approx(1.0)


def test_warp_rejects_singular_camera():
    bad = object.__new__(CameraFrame)
    object.__setattr__(bad, "K", np.zeros((3, 3)))
    object.__setattr__(bad, "R", np.eye(3))
    object.__setattr__(bad, "t", np.zeros(3))
    with pytest.raises(ValueError):
        warp_depth(np.ones((H, W)), bad, IDENT)
    with pytest.raises(ValueError):
        warp_depth(np.ones((H, W)), IDENT, IDENT, method="voxel")


def test_warp_round_trip(room):
    cams = room.cameras
    there, ok = warp_depth(room.depth[0], cams[0], cams[3], planar_only=True)
    back, ok2 = warp_depth(np.where(ok, there, 0.0), cams[3], cams[0], ok, planar_only=True)
    # one-way tolerance: sub-pixel resampling only, i.e. 1e-4 relative
    covis = ok2 & (np.abs(back - room.depth[0]) / room.depth[0] < 0.05)
    assert covis.sum() > 0.3 * covis.size
    rel = np.abs(back[covis] - room.depth[0][covis]) / room.depth[0][covis]
    assert rel.max() < 2e-4


# --- consistency ------------------------------------------------------------------

def test_mfc_constant_offset_fixture():
    d, delta = 3.0, 0.25
    pred = np.stack([np.full((H, W), d), np.full((H, W), d + delta)])
    cams = [IDENT, shifted(0.2)]
    assert mfc(pred, cams) == pytest.approx(delta, abs=1e-12)
    assert mfc(pred, cams, method="splat") == pytest.approx(delta, abs=1e-12)
    same = np.full((4, H, W), d)
    assert mfc(same, [shifted(0.1 * i) for i in range(4)]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DegenerateInputError):
        mfc(pred[:1], cams[:1])


def test_ground_truth_is_consistent(room):
    assert mfc(room.depth, room.cameras, room.depth, room.mask) < 1e-4
    # nearest-pixel splatting carries resampling error, but stays small
    assert mfc(room.depth, room.cameras, room.depth, room.mask, method="splat") < 0.05


def test_flow_and_pose_agree_on_static_scene(room):
    rep = evaluate(room.depth, room.depth, room.cameras, flows=room.flows, gt_mask=room.mask)
    assert abs(rep.mfc_flow - rep.mfc) < 1e-3
    assert rep.abs_rel == pytest.approx(0.0, abs=1e-12) and rep.delta1 == 1.0
    noisy = room.depth * (1 + 0.02 * np.cos(np.arange(room.depth.size)).reshape(room.depth.shape))
    rep = evaluate(noisy, room.depth, room.cameras, flows=room.flows, gt_mask=room.mask)
    assert rep.mfc_flow > 0 and rep.mfc > 0


def test_flow_mfc_trivial_cases(rng):
    frames = np.stack([np.full((H, W), 2.0)] * 3)
    zero = FlowField(np.zeros((H, W, 2)), np.ones((H, W), bool))
    assert mfc_flow(frames, [zero, zero]) == 0.0
    wild = FlowField(rng.uniform(-3, 3, (H, W, 2)), np.ones((H, W), bool))
    assert mfc_flow(frames, [wild, wild]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        mfc_flow(frames, [zero])
    with pytest.raises(ValueError):
        mfc_flow(frames, [zero, None])


def test_shuffled_frames_are_less_consistent():
    s = generate_dataset(n_sequences=1, frames_per_seq=5, seed=8, height=24, width=24)[0]
    base = evaluate(s.depth, s.depth, s.cameras, gt_mask=s.mask).mfc
    shuffled = evaluate(s.depth[[3, 0, 4, 1, 2]], s.depth, s.cameras, gt_mask=s.mask).mfc
    assert shuffled > base


def test_noise_never_beats_ground_truth(room, rng):
    base = evaluate(room.depth, room.depth, room.cameras, gt_mask=room.mask).mfc
    for std in (0.01, 0.05):
        noisy = room.depth + std * rng.standard_normal(room.depth.shape)
        assert evaluate(noisy, room.depth, room.cameras, gt_mask=room.mask).mfc > base


@settings(max_examples=15, deadline=None)
@given(a=st.floats(0.05, 20.0), b=st.floats(-5.0, 5.0))
def test_affine_invariance(a, b):
    s = _small_seq()
    pred = s.depth * (1 + 0.05 * np.sin(np.arange(s.depth.size)).reshape(s.depth.shape))
    r0 = evaluate(pred, s.depth, s.cameras, gt_mask=s.mask)
    r1 = evaluate(a * pred + b, s.depth, s.cameras, gt_mask=s.mask)
    for k in ("abs_rel", "delta1", "mfc"):
        assert getattr(r1, k) == pytest.approx(getattr(r0, k), rel=1e-6, abs=1e-12)


_SMALL = []


def _small_seq():
    if not _SMALL:
        _SMALL.append(generate_dataset(n_sequences=1, frames_per_seq=3, seed=6, height=16, width=16)[0])
    return _SMALL[0]


# --- report -------------------------------------------------------------------------

def test_report_rows_and_errors(room):
    rep = evaluate(2.0 * room.depth + 1.0, room.depth, room.cameras, flows=room.flows, gt_mask=room.mask)
    assert rep.abs_rel == pytest.approx(0.0, abs=1e-9) and rep.delta1 == 1.0
    assert rep.scale == pytest.approx(0.5) and rep.shift == pytest.approx(-0.5)
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 1 + (len(room.depth) - 1) + 1
    assert lines[-1].startswith("summary,")
    assert "MFC*" in rep.summary()

    bad = room.mask.copy()
    bad[2] = False
    with pytest.raises(DegenerateInputError, match="frame 2"):
        evaluate(room.depth, room.depth, room.cameras, gt_mask=bad)
    with pytest.raises(ValueError):
        evaluate(room.depth[:3], room.depth, room.cameras)
