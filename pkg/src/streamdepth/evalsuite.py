"""Affine-invariant depth metrics and multi-frame consistency.

Predictions are aligned to ground truth with one global scale and shift for
the whole video before any metric is computed, so consistency errors that a
per-frame fit would hide remain visible.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .worldgen import CameraFrame, FlowField, unproject

log = logging.getLogger(__name__)

ALIGN_FLOOR = 1e-3
OCCLUSION_TOL = 0.05
PLANAR_TOL = 1e-6
DELTA1_THR = 1.25


class DegenerateInputError(ValueError):
    """Not enough valid data to compute a metric."""


def _mask_or_all(x: np.ndarray, mask) -> np.ndarray:
    return np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)


@dataclass
class AlignResult:
    scale: float
    shift: float
    degenerate: bool = False


def fit_scale_shift_global(pred, gt, mask=None) -> AlignResult:
    """Least-squares ``(s, b)`` minimising ``sum (s*pred + b - gt)^2`` over every valid pixel of every frame."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    m = _mask_or_all(gt, mask)
    p, g = pred[m], gt[m]
    if p.size < 2:
        raise DegenerateInputError(f"need at least 2 valid pixels for alignment, got {p.size}")
    p_mean, g_mean = p.mean(), g.mean()
    dp = p - p_mean
    var = dp @ dp
    if var <= 1e-12 * max(1.0, p_mean**2) * p.size:
        log.warning("constant prediction; falling back to unit scale")
        return AlignResult(1.0, float(np.mean(g - p)), degenerate=True)
    s = float(dp @ (g - g_mean) / var)
    return AlignResult(s, float(g_mean - s * p_mean))


def abs_rel(pred_aligned, gt, mask=None) -> float:
    pred_aligned = np.asarray(pred_aligned, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _mask_or_all(gt, mask)
    if not m.any():
        raise DegenerateInputError("empty mask")
    g = gt[m]
    if np.any(g <= 0):
        raise ValueError("ground truth must be positive on the mask")
    return float(np.mean(np.abs(pred_aligned[m] - g) / g))


def delta1(pred_aligned, gt, mask=None, thr: float = DELTA1_THR, return_excluded: bool = False):
    """Fraction of valid pixels with ``max(p/g, g/p) < thr``.

    Pixels with a non-positive prediction are dropped from the valid set;
    their count is returned alongside when ``return_excluded`` is set.
    """
    pred_aligned = np.asarray(pred_aligned, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _mask_or_all(gt, mask)
    if not m.any():
        raise DegenerateInputError("empty mask")
    positive = pred_aligned > 0
    excluded = int(np.count_nonzero(m & ~positive))
    m = m & positive
    if not m.any():
        raise DegenerateInputError("no positive predictions on the mask")
    p, g = pred_aligned[m], gt[m]
    value = float(np.mean(np.maximum(p / g, g / p) < thr))
    return (value, excluded) if return_excluded else value


# --- warping -----------------------------------------------------------------

def _check_cam(cam: CameraFrame) -> None:
    if abs(np.linalg.det(cam.K)) < 1e-12:
        raise ValueError("singular intrinsics")


def _transform(depth_m, cam_m: CameraFrame, cam_n: CameraFrame):
    R_rel, t_rel = cam_m.relative_to(cam_n)
    pts = unproject(depth_m, cam_m.K) @ R_rel.T + t_rel
    z = pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (pts @ cam_n.K.T)[..., :2] / z[..., None]
    return uv, z


def _splat(depth_m, valid, cam_m, cam_n):
    h, w = depth_m.shape
    uv, z = _transform(depth_m, cam_m, cam_n)
    ok = valid & (z > 1e-9) & np.all(np.isfinite(uv), axis=-1)
    uv = np.where(ok[..., None], uv, -1.0)
    cols = np.rint(uv[..., 0]).astype(np.int64)
    rows = np.rint(uv[..., 1]).astype(np.int64)
    ok &= (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    out = np.full(h * w, np.inf)
    np.minimum.at(out, rows[ok] * w + cols[ok], z[ok])
    return out.reshape(h, w)


def _cell_planarity(points: np.ndarray) -> np.ndarray:
    """Relative distance of each 2x2 cell's fourth corner from the plane of the other three."""
    p00, p01 = points[:-1, :-1], points[:-1, 1:]
    p10, p11 = points[1:, :-1], points[1:, 1:]
    n = np.cross(p01 - p00, p10 - p00)
    norm = np.linalg.norm(n, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.abs(np.einsum("hwk,hwk->hw", n, p11 - p00)) / norm
        scale = (p00[..., 2] + p01[..., 2] + p10[..., 2] + p11[..., 2]) / 4.0
        res = dist / scale
    return np.where(np.isfinite(res), res, np.inf)


def _rasterize(depth_m, valid, cam_m, cam_n, max_ratio: float, planar_tol: float):
    """Render the source depth map as a triangle mesh from the target camera.

    Inverse depth is interpolated linearly in target screen space, which is
    exact for each planar triangle.  Triangles spanning a depth jump (vertex
    depth ratio above ``max_ratio``) are dropped as silhouette edges.  Also
    returns, per target pixel, whether the visible triangle came from a planar
    source cell (resampling-exact).
    """
    h, w = depth_m.shape
    uv, z = _transform(depth_m, cam_m, cam_n)
    good = valid & (z > 1e-9) & np.all(np.isfinite(uv), axis=-1)
    inv_z = np.where(good, 1.0 / np.where(good, z, 1.0), 0.0)
    d_src = np.where(valid, depth_m, 0.0)
    planar_cell = (_cell_planarity(unproject(np.where(valid, depth_m, 0.0), cam_m.K)) <= planar_tol).ravel()

    i, j = np.mgrid[0 : h - 1, 0 : w - 1]
    i, j = i.ravel(), j.ravel()
    corners = [(i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1)]
    targets, depths, flags = [], [], []
    for a, b, c in ((0, 1, 2), (1, 3, 2)):
        va, vb, vc = corners[a], corners[b], corners[c]
        ok = good[va] & good[vb] & good[vc]
        dd = np.stack([d_src[va], d_src[vb], d_src[vc]])
        ok &= dd.max(axis=0) <= max_ratio * dd.min(axis=0)
        if not ok.any():
            continue
        pa, pb, pc = uv[va][ok], uv[vb][ok], uv[vc][ok]
        qa, qb, qc = inv_z[va][ok], inv_z[vb][ok], inv_z[vc][ok]
        lo = np.ceil(np.minimum(np.minimum(pa, pb), pc) - 1e-9).astype(np.int64)
        hi = np.floor(np.maximum(np.maximum(pa, pb), pc) + 1e-9).astype(np.int64)
        lo = np.maximum(lo, 0)
        hi[:, 0] = np.minimum(hi[:, 0], w - 1)
        hi[:, 1] = np.minimum(hi[:, 1], h - 1)
        nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
        ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
        count = nx * ny
        if count.sum() == 0:
            continue
        tri = np.repeat(np.arange(len(count)), count)
        offset = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        px = lo[tri, 0] + offset % nx[tri]
        py = lo[tri, 1] + offset // nx[tri]
        A, B, C = pa[tri], pb[tri], pc[tri]
        area = (B[:, 0] - A[:, 0]) * (C[:, 1] - A[:, 1]) - (B[:, 1] - A[:, 1]) * (C[:, 0] - A[:, 0])
        nondeg = np.abs(area) > 1e-12
        safe = np.where(nondeg, area, 1.0)
        w_b = ((px - A[:, 0]) * (C[:, 1] - A[:, 1]) - (py - A[:, 1]) * (C[:, 0] - A[:, 0])) / safe
        w_c = ((B[:, 0] - A[:, 0]) * (py - A[:, 1]) - (B[:, 1] - A[:, 1]) * (px - A[:, 0])) / safe
        w_a = 1.0 - w_b - w_c
        eps = -1e-9
        inside = nondeg & (w_a >= eps) & (w_b >= eps) & (w_c >= eps)
        q = w_a * qa[tri] + w_b * qb[tri] + w_c * qc[tri]
        inside &= q > 0
        targets.append(py[inside] * w + px[inside])
        depths.append(1.0 / q[inside])
        flags.append(planar_cell[ok][tri][inside])
    out = np.full(h * w, np.inf)
    planar = np.zeros(h * w, dtype=bool)
    if targets:
        target, depth, flag = np.concatenate(targets), np.concatenate(depths), np.concatenate(flags)
        np.minimum.at(out, target, depth)
        winner = depth == out[target]
        np.logical_or.at(planar, target[winner], flag[winner])
    return out.reshape(h, w), planar.reshape(h, w)


def warp_depth(
    depth_m,
    cam_m: CameraFrame,
    cam_n: CameraFrame,
    valid_m=None,
    method: str = "mesh",
    max_ratio: float = 1.15,
    planar_only: bool = False,
    planar_tol: float = PLANAR_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-warp frame ``m``'s depth into frame ``n`` with z-buffering.

    ``method="splat"`` moves every source pixel to the nearest target pixel;
    ``method="mesh"`` renders the depth map as a triangle mesh, which is free
    of resampling error on planar surfaces.  Returns the warped depth
    (zero where invalid) and its validity mask.  With ``planar_only`` the
    mask keeps just the pixels rendered from planar source cells (mesh only).
    """
    _check_cam(cam_m)
    _check_cam(cam_n)
    depth_m = np.asarray(depth_m, dtype=np.float64)
    valid = (depth_m > 0) & np.isfinite(depth_m)
    if valid_m is not None:
        valid &= np.asarray(valid_m, dtype=bool)
    if method == "splat":
        out = _splat(depth_m, valid, cam_m, cam_n)
    elif method == "mesh":
        out, planar = _rasterize(depth_m, valid, cam_m, cam_n, max_ratio, planar_tol)
    else:
        raise ValueError(f"unknown warp method {method!r}")
    mask = np.isfinite(out)
    if planar_only:
        if method != "mesh":
            raise ValueError("planar_only needs the mesh warp")
        mask &= planar
    return np.where(mask, out, 0.0), mask


# --- consistency ---------------------------------------------------------------

@dataclass
class PairStat:
    m: int
    n: int
    value: float
    valid: int


def _pair_masks(gt_m, gt_n, cam_m, cam_n, gt_mask_m, gt_mask_n, method):
    """Pixels usable for comparing frame m warped into n under ground truth.

    A pixel qualifies when the ground-truth warp reaches it from a planar
    source cell (no resampling error) and agrees with the target within the
    occlusion tolerance.
    """
    warped, ok = warp_depth(gt_m, cam_m, cam_n, gt_mask_m, method=method, planar_only=method == "mesh")
    ok &= gt_mask_n
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(warped - gt_n) / gt_n
    return ok & (rel <= OCCLUSION_TOL)


def mfc_pairs(
    pred_video,
    cams: Sequence[CameraFrame],
    gt_video=None,
    gt_mask=None,
    method: str = "mesh",
) -> list[PairStat]:
    pred_video = np.asarray(pred_video, dtype=np.float64)
    n_frames = pred_video.shape[0]
    if n_frames < 2:
        raise DegenerateInputError("multi-frame consistency needs at least 2 frames")
    if len(cams) != n_frames:
        raise ValueError(f"{len(cams)} cameras for {n_frames} frames")
    if gt_video is not None:
        gt_video = np.asarray(gt_video, dtype=np.float64)
        gt_mask = (gt_video > 0) if gt_mask is None else np.asarray(gt_mask, dtype=bool)
    stats = []
    for m in range(n_frames - 1):
        warped, ok = warp_depth(pred_video[m], cams[m], cams[m + 1], method=method)
        if gt_video is not None:
            ok &= _pair_masks(gt_video[m], gt_video[m + 1], cams[m], cams[m + 1],
                              gt_mask[m], gt_mask[m + 1], method)
        ok &= pred_video[m + 1] > 0
        count = int(ok.sum())
        value = float(np.mean(np.abs(warped[ok] - pred_video[m + 1][ok]))) if count else float("nan")
        stats.append(PairStat(m, m + 1, value, count))
    return stats


def _mean_pairs(stats: list[PairStat]) -> float:
    vals = [s.value for s in stats if s.valid > 0]
    if not vals:
        raise DegenerateInputError("no frame pair has a valid overlap")
    return float(np.mean(vals))


def mfc(pred_video, cams: Sequence[CameraFrame], gt_video=None, gt_mask=None, method: str = "mesh") -> float:
    """Mean over adjacent pairs of the mean ``|D^{m->m+1} - D^{m+1}|`` on co-visible pixels."""
    return _mean_pairs(mfc_pairs(pred_video, cams, gt_video, gt_mask, method))


def _bilinear_inverse(depth: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample depth at sub-pixel positions by bilinear interpolation of inverse depth."""
    h, w = depth.shape
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx, fy = x - x0, y - y0
    corners = [depth[y0, x0], depth[y0, x0 + 1], depth[y0 + 1, x0], depth[y0 + 1, x0 + 1]]
    ok = np.all([c > 0 for c in corners], axis=0)
    inv = [np.where(c > 0, 1.0 / np.where(c > 0, c, 1.0), 0.0) for c in corners]
    q = (1 - fx) * (1 - fy) * inv[0] + fx * (1 - fy) * inv[1] + (1 - fx) * fy * inv[2] + fx * fy * inv[3]
    # inverse depth is affine in pixel coordinates on a plane, making the sample exact there
    twist = np.abs(inv[0] + inv[3] - inv[1] - inv[2])
    affine = ok & (twist <= PLANAR_TOL * (inv[0] + inv[1] + inv[2] + inv[3]) / 4.0)
    return np.where(ok & (q > 0), 1.0 / np.where(q > 0, q, 1.0), 0.0), ok, affine


def mfc_flow_pairs(pred_video, flows: Sequence[FlowField], gt_video=None) -> list[PairStat]:
    pred_video = np.asarray(pred_video, dtype=np.float64)
    n_frames, h, w = pred_video.shape
    if flows is None or len(flows) != n_frames - 1 or any(f is None for f in flows):
        raise ValueError(f"need {n_frames - 1} flow fields for {n_frames} frames")
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    stats = []
    for m, fl in enumerate(flows):
        x, y = u + fl.flow[..., 0], v + fl.flow[..., 1]
        inb = fl.mask & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        sampled, ok, _ = _bilinear_inverse(pred_video[m + 1], np.clip(x, 0, w - 1), np.clip(y, 0, h - 1))
        ok &= inb & (pred_video[m] > 0)
        dz = fl.dz()
        if gt_video is not None:
            gt_s, _, gt_affine = _bilinear_inverse(np.asarray(gt_video[m + 1], dtype=np.float64),
                                                   np.clip(x, 0, w - 1), np.clip(y, 0, h - 1))
            g = np.asarray(gt_video[m], dtype=np.float64) + dz
            with np.errstate(divide="ignore", invalid="ignore"):
                ok &= gt_affine & (g > 0) & (np.abs(gt_s - g) / g <= OCCLUSION_TOL)
        count = int(ok.sum())
        target = pred_video[m] + dz
        value = float(np.mean(np.abs(sampled[ok] - target[ok]))) if count else float("nan")
        stats.append(PairStat(m, m + 1, value, count))
    return stats


def mfc_flow(pred_video, flows: Sequence[FlowField], gt_video=None) -> float:
    """Flow-based consistency: ``D^{m+1}`` sampled at flow-displaced pixels against ``D^m``.

    When the flow carries a depth change (the tracked point's ``z_n - z_m``)
    it is added to ``D^m`` first, so on static scenes the value matches the
    pose-based one; without it the comparison is the plain 2-D version.
    Independently moving objects are handled either way.
    """
    return _mean_pairs(mfc_flow_pairs(pred_video, flows, gt_video))


# --- full report -----------------------------------------------------------------

REPORT_COLUMNS = ("row", "frame_m", "frame_n", "mfc", "mfc_flow", "valid_pixels",
                  "abs_rel", "delta1", "scale", "shift")


@dataclass
class EvalReport:
    abs_rel: float
    delta1: float
    mfc: float
    scale: float
    shift: float
    mfc_flow: Optional[float] = None
    valid_pixels: int = 0
    excluded_nonpositive: int = 0
    align_degenerate: bool = False
    pairs: list = field(default_factory=list)        # PairStat per adjacent pair
    flow_pairs: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        flow_by_pair = {(p.m, p.n): p.value for p in self.flow_pairs}
        out = []
        for p in self.pairs:
            out.append(dict(row="pair", frame_m=p.m, frame_n=p.n, mfc=p.value,
                            mfc_flow=flow_by_pair.get((p.m, p.n), ""), valid_pixels=p.valid,
                            abs_rel="", delta1="", scale="", shift=""))
        out.append(dict(row="summary", frame_m="", frame_n="", mfc=self.mfc,
                        mfc_flow="" if self.mfc_flow is None else self.mfc_flow,
                        valid_pixels=self.valid_pixels, abs_rel=self.abs_rel, delta1=self.delta1,
                        scale=self.scale, shift=self.shift))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"AbsRel   {self.abs_rel:.6f}",
            f"delta1   {self.delta1:.6f}",
            f"MFC      {self.mfc:.6f}",
        ]
        if self.mfc_flow is not None:
            lines.append(f"MFC*     {self.mfc_flow:.6f}")
        lines += [f"scale    {self.scale:.6f}", f"shift    {self.shift:.6f}",
                  f"pixels   {self.valid_pixels}"]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else "nan"
    return str(v)


def evaluate(
    pred_video,
    gt_video,
    cams: Sequence[CameraFrame],
    flows: Optional[Sequence[FlowField]] = None,
    gt_mask=None,
    method: str = "mesh",
) -> EvalReport:
    """Global alignment, then AbsRel, delta1, pose-based MFC and (optionally) flow-based MFC."""
    pred_video = np.asarray(pred_video, dtype=np.float64)
    gt_video = np.asarray(gt_video, dtype=np.float64)
    if pred_video.shape != gt_video.shape or pred_video.ndim != 3:
        raise ValueError(f"pred {pred_video.shape} and gt {gt_video.shape} must both be (N, H, W)")
    mask = (gt_video > 0) & np.isfinite(gt_video)
    if gt_mask is not None:
        mask &= np.asarray(gt_mask, dtype=bool)
    for f in range(len(mask)):
        if not mask[f].any():
            raise DegenerateInputError(f"frame {f} has no valid ground-truth pixels")
    fit = fit_scale_shift_global(pred_video, gt_video, mask)
    aligned = np.maximum(fit.scale * pred_video + fit.shift, ALIGN_FLOOR)
    d1, excluded = delta1(aligned, gt_video, mask, return_excluded=True)
    pairs = mfc_pairs(aligned, cams, gt_video, mask, method)
    report = EvalReport(
        abs_rel=abs_rel(aligned, gt_video, mask),
        delta1=d1,
        mfc=_mean_pairs(pairs),
        scale=fit.scale,
        shift=fit.shift,
        valid_pixels=int(mask.sum()),
        excluded_nonpositive=excluded,
        align_degenerate=fit.degenerate,
        pairs=pairs,
    )
    if flows is not None:
        report.flow_pairs = mfc_flow_pairs(aligned, flows, gt_video)
        report.mfc_flow = _mean_pairs(report.flow_pairs)
    return report
