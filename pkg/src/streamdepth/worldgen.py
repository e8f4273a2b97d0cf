"""Procedural plane/sphere worlds with exact depth, shading and optical flow.

Conventions: world-to-camera ``X_c = R @ X_w + t``; the camera looks down
``+z``; pixel ``(row i, col j)`` has its centre at image coordinates
``(u, v) = (j, i)``.  Depth is the camera-frame ``z`` of the nearest hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class CameraFrame:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise ValueError("K and R must be 3x3")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError(f"focal lengths must be positive, got fx={K[0, 0]}, fy={K[1, 1]}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R must be a proper rotation")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def look_at(cls, K, position, target, up=(0.0, -1.0, 0.0)) -> "CameraFrame":
        """Camera at ``position`` looking at ``target``; ``up`` is world up (default ``-y``)."""
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(K, R, -R @ position)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def relative_to(self, other: "CameraFrame") -> tuple[np.ndarray, np.ndarray]:
        """Rigid map taking points in this camera's frame to ``other``'s frame."""
        R_rel = other.R @ self.R.T
        return R_rel, other.t - R_rel @ self.t


def intrinsics(height: int, width: int, focal: Optional[float] = None) -> np.ndarray:
    f = float(width) if focal is None else float(focal)
    return np.array([[f, 0.0, (width - 1) / 2.0], [0.0, f, (height - 1) / 2.0], [0.0, 0.0, 1.0]])


def _check_intrinsics(K: np.ndarray) -> None:
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (3, 3) or abs(np.linalg.det(K)) < 1e-12 or K[0, 0] <= 0 or K[1, 1] <= 0:
        raise ValueError("degenerate camera intrinsics")


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    albedo: float = 1.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: float = 1.0
    velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def center_at(self, frame: int) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity, dtype=np.float64)


Primitive = Union[Plane, Sphere]


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    trajectory: tuple = ()
    light: tuple = (0.0, -1.0, 0.0)

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        light = np.asarray(self.light, dtype=np.float64)
        object.__setattr__(self, "light", tuple(light / np.linalg.norm(light)))

    @property
    def is_static(self) -> bool:
        return all(not isinstance(p, Sphere) or not any(p.velocity) for p in self.primitives)


@dataclass
class RenderResult:
    depth: np.ndarray   # (H, W), 0 where nothing is hit
    mask: np.ndarray    # (H, W) bool
    shading: np.ndarray  # (H, W)
    object_id: np.ndarray  # (H, W) int, -1 for background


def pixel_rays(cam: CameraFrame, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """World-space origin and per-pixel directions scaled so camera-frame z = 1."""
    _check_intrinsics(cam.K)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    d_cam = pix @ np.linalg.inv(cam.K).T
    return cam.center, d_cam @ cam.R


def render(scene: SceneSpec, cam: CameraFrame, height: int, width: int, frame: int = 0) -> RenderResult:
    origin, dirs = pixel_rays(cam, height, width)
    best = np.full((height, width), np.inf)
    ids = np.full((height, width), -1, dtype=np.int64)
    normals = np.zeros((height, width, 3))
    for k, prim in enumerate(scene.primitives):
        if isinstance(prim, Plane):
            n = np.asarray(prim.normal, dtype=np.float64)
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                s = ((np.asarray(prim.point, dtype=np.float64) - origin) @ n) / denom
            s = np.where(np.abs(denom) > 1e-12, s, np.inf)
            hit_n = np.broadcast_to(n, dirs.shape)
        else:
            c = prim.center_at(frame)
            oc = origin - c
            a = np.einsum("hwk,hwk->hw", dirs, dirs)
            b = 2.0 * (dirs @ oc)
            disc = b * b - 4.0 * a * (oc @ oc - prim.radius**2)
            root = np.sqrt(np.maximum(disc, 0.0))
            s_near = (-b - root) / (2.0 * a)
            s_far = (-b + root) / (2.0 * a)
            s = np.where(s_near > 1e-9, s_near, s_far)
            s = np.where(disc >= 0, s, np.inf)
            hit_n = (origin + np.where(np.isfinite(s), s, 0.0)[..., None] * dirs - c) / prim.radius
        s = np.where(s > 1e-9, s, np.inf)
        closer = s < best
        best = np.where(closer, s, best)
        ids = np.where(closer, k, ids)
        normals = np.where(closer[..., None], hit_n, normals)
    mask = np.isfinite(best)
    depth = np.where(mask, best, 0.0)
    # face normals towards the viewer
    facing = np.einsum("hwk,hwk->hw", normals, dirs)
    normals = np.where((facing > 0)[..., None], -normals, normals)
    albedo = np.array([p.albedo for p in scene.primitives] + [0.0])[ids]
    lambert = np.maximum(0.0, normals @ np.asarray(scene.light))
    shading = np.where(mask, lambert * albedo, 0.0)
    return RenderResult(depth, mask, shading, ids)


def render_depth(scene: SceneSpec, cam: CameraFrame, height: int, width: int, frame: int = 0):
    """Depth map and hit mask."""
    r = render(scene, cam, height, width, frame)
    return r.depth, r.mask


def render_condition(scene: SceneSpec, cam: CameraFrame, height: int, width: int, frame: int = 0) -> np.ndarray:
    """Lambertian shading ``max(0, n.l) * albedo``; background is 0."""
    return render(scene, cam, height, width, frame).shading


@dataclass
class FlowField:
    flow: np.ndarray  # (H, W, 2) pixel displacement (du, dv), frame m -> n
    mask: np.ndarray  # (H, W) bool
    # camera-frame depth change z_n - z_m of the tracked point; None means 0
    depth_change: Optional[np.ndarray] = None

    def dz(self) -> np.ndarray:
        if self.depth_change is None:
            return np.zeros(self.mask.shape)
        return self.depth_change


def unproject(depth: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Camera-frame points (H, W, 3) for a depth map."""
    _check_intrinsics(K)
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    rays = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(K).T
    return rays * depth[..., None]


def project(points: np.ndarray, K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (..., 2) and depth (...) of camera-frame points."""
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (points @ K.T)[..., :2] / z[..., None]
    return uv, z


def flow_from_depth(depth_m: np.ndarray, cam_m: CameraFrame, cam_n: CameraFrame, mask_m=None) -> FlowField:
    """Optical flow induced by camera motion on a static scene."""
    _check_intrinsics(cam_m.K)
    _check_intrinsics(cam_n.K)
    h, w = depth_m.shape
    R_rel, t_rel = cam_m.relative_to(cam_n)
    pts = unproject(depth_m, cam_m.K) @ R_rel.T + t_rel
    uv, z = project(pts, cam_n.K)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    flow = uv - np.stack([u, v], axis=-1)
    valid = (depth_m > 0) & (z > 1e-9)
    if mask_m is not None:
        valid &= mask_m
    valid &= (uv[..., 0] >= 0) & (uv[..., 0] <= w - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= h - 1)
    flow = np.where(valid[..., None], flow, 0.0)
    return FlowField(flow, valid, np.where(valid, z - depth_m, 0.0))


def scene_flow(scene: SceneSpec, cam_m: CameraFrame, cam_n: CameraFrame, frame_m: int, frame_n: int,
               height: int, width: int) -> FlowField:
    """Flow including known object motion (moving spheres translate rigidly)."""
    r = render(scene, cam_m, height, width, frame_m)
    pts_w = pixel_rays(cam_m, height, width)[1] * r.depth[..., None] + cam_m.center
    shift = np.zeros((len(scene.primitives) + 1, 3))
    for k, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            shift[k] = prim.center_at(frame_n) - prim.center_at(frame_m)
    pts_w = pts_w + shift[r.object_id]
    uv, z = project(pts_w @ cam_n.R.T + cam_n.t, cam_n.K)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    valid = r.mask & (z > 1e-9)
    valid &= (uv[..., 0] >= 0) & (uv[..., 0] <= width - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= height - 1)
    flow = np.where(valid[..., None], uv - np.stack([u, v], axis=-1), 0.0)
    return FlowField(flow, valid, np.where(valid, z - r.depth, 0.0))


# --- random scene family ---------------------------------------------------

ROOM = dict(half_width=3.0, floor=1.2, ceiling=-2.5, back=9.0)


def random_room(rng: np.random.Generator, num_frames: int, height: int, width: int,
                moving: bool = False, speed: float = 0.05, jitter: float = 0.3) -> SceneSpec:
    """A box room with a few spheres and a smooth camera path.

    Each wall distance is the nominal ``ROOM`` value scaled by a factor in
    ``[1 - jitter, 1 + jitter]``, so the layout is not recoverable from the
    shading alone.  The camera translates at constant speed ``speed`` (world
    units per frame) along a random horizontal heading and sways its gaze
    slowly.
    """
    if not 0.0 <= jitter < 0.5:
        raise ValueError("jitter must lie in [0, 0.5)")
    scale = rng.uniform(1.0 - jitter, 1.0 + jitter, 4)
    hw = ROOM["half_width"] * scale[0]
    floor, ceil = ROOM["floor"] * scale[1], ROOM["ceiling"] * scale[2]
    back = ROOM["back"] * scale[3]
    prims: list = [
        Plane((0.0, floor, 0.0), (0.0, -1.0, 0.0), float(rng.uniform(0.5, 0.9))),
        Plane((0.0, ceil, 0.0), (0.0, 1.0, 0.0), float(rng.uniform(0.3, 0.6))),
        Plane((0.0, 0.0, back), (0.0, 0.0, -1.0), float(rng.uniform(0.4, 0.9))),
        Plane((-hw, 0.0, 0.0), (1.0, 0.0, 0.0), float(rng.uniform(0.4, 0.9))),
        Plane((hw, 0.0, 0.0), (-1.0, 0.0, 0.0), float(rng.uniform(0.4, 0.9))),
        Plane((0.0, 0.0, -4.0), (0.0, 0.0, 1.0), 0.5),
    ]
    for k in range(int(rng.integers(1, 4))):
        radius = float(rng.uniform(0.4, 0.8))
        center = (float(rng.uniform(-0.5, 0.5) * hw), float(floor - radius - rng.uniform(0.0, 0.6)),
                  float(rng.uniform(0.45, 0.8) * back))
        velocity = (0.0, 0.0, 0.0)
        if moving and k == 0:
            velocity = (float(rng.uniform(-0.05, 0.05)), 0.0, float(rng.uniform(-0.05, 0.05)))
        prims.append(Sphere(center, radius, float(rng.uniform(0.5, 1.0)), velocity))
    light = np.array([rng.uniform(-0.6, 0.6), -1.0, rng.uniform(-0.8, -0.2)])
    K = intrinsics(height, width)
    heading = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(heading), 0.2 * rng.uniform(-1, 1), np.sin(heading) * 0.6])
    mid = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.3, 0.3), rng.uniform(-1.0, 0.5)])
    # keep the whole path inside the free part of the room (away from walls and spheres)
    lo = np.array([-hw + 0.5, ceil + 0.5, -3.0])
    hi = np.array([hw - 0.5, floor - 0.5, 0.45 * back - 1.3])
    reach = np.abs(vel) * (num_frames - 1) / 2.0
    room = np.minimum(mid - lo, hi - mid)
    with np.errstate(divide="ignore"):
        shrink = np.min(np.where(reach > 0, room / reach, np.inf))
    vel = vel * min(1.0, float(shrink))
    start = mid - vel * (num_frames - 1) / 2.0
    gaze = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.3), back])
    sway = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0, 2 * np.pi)
    cams = []
    for f in range(num_frames):
        pos = start + f * vel
        target = gaze + np.array([sway * np.sin(phase + 0.05 * f), 0.0, 0.0])
        cams.append(CameraFrame.look_at(K, pos, target))
    return SceneSpec(tuple(prims), tuple(cams), tuple(light))


SCENE_FAMILIES = {"room": random_room}


def trajectory_speed_bound(scene: SceneSpec) -> float:
    """Largest per-frame camera displacement along the trajectory."""
    centers = np.array([c.center for c in scene.trajectory])
    if len(centers) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(centers, axis=0), axis=1).max())


@dataclass
class VideoSample:
    """One rendered video with its ground truth."""

    scene: SceneSpec
    condition: np.ndarray   # (N, H, W) shading
    depth: np.ndarray       # (N, H, W)
    mask: np.ndarray        # (N, H, W)
    flows: list = field(default_factory=list)  # N-1 FlowFields, frame m -> m+1
    depth_range: tuple = (0.0, 1.0)  # 2nd / 98th depth percentiles of the sequence

    @property
    def cameras(self) -> tuple:
        return self.scene.trajectory

    def normalized_depth(self) -> np.ndarray:
        return normalize_depth(self.depth, self.depth_range)


def depth_percentiles(depth: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    vals = depth[mask]
    lo, hi = np.percentile(vals, [2.0, 98.0])
    if hi - lo < 1e-6:
        hi = lo + 1e-6
    return float(lo), float(hi)


def normalize_depth(depth: np.ndarray, depth_range: tuple[float, float]) -> np.ndarray:
    """Affine map sending the sequence's 2nd/98th percentiles to -1/+1."""
    lo, hi = depth_range
    return 2.0 * (depth - lo) / (hi - lo) - 1.0


def render_sequence(scene: SceneSpec, height: int, width: int, with_flow: bool = True) -> VideoSample:
    results = [render(scene, cam, height, width, f) for f, cam in enumerate(scene.trajectory)]
    depth = np.stack([r.depth for r in results])
    mask = np.stack([r.mask for r in results])
    cond = np.stack([r.shading for r in results])
    flows = []
    if with_flow:
        for m in range(len(results) - 1):
            if scene.is_static:
                flows.append(flow_from_depth(depth[m], scene.trajectory[m], scene.trajectory[m + 1], mask[m]))
            else:
                flows.append(scene_flow(scene, scene.trajectory[m], scene.trajectory[m + 1], m, m + 1, height, width))
    return VideoSample(scene, cond, depth, mask, flows, depth_percentiles(depth, mask))


def generate_dataset(
    family: str = "room",
    n_sequences: int = 20,
    frames_per_seq: int = 60,
    seed: int = 0,
    height: int = 32,
    width: int = 32,
    moving: bool = False,
    with_flow: bool = True,
) -> list[VideoSample]:
    """Render ``n_sequences`` random sequences; each gets its own derived seed."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    if frames_per_seq < 1:
        raise ValueError("frames_per_seq must be >= 1")
    if family not in SCENE_FAMILIES:
        raise ValueError(f"unknown scene family {family!r}")
    make = SCENE_FAMILIES[family]
    out = []
    for child in np.random.SeedSequence(seed).spawn(n_sequences):
        rng = np.random.default_rng(child)
        scene = make(rng, frames_per_seq, height, width, moving=moving)
        out.append(render_sequence(scene, height, width, with_flow=with_flow))
    return out


def single_frame_subset(dataset: Sequence[VideoSample]) -> list[tuple[np.ndarray, np.ndarray]]:
    """All frames as independent ``(condition, normalized depth)`` pairs."""
    pairs = []
    for seq in dataset:
        nd = seq.normalized_depth()
        pairs.extend((seq.condition[i], nd[i]) for i in range(len(seq.depth)))
    return pairs
