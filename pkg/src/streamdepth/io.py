"""On-disk formats: tensor files, checkpoints and dataset directories.

Tensor file layout (little-endian)::

    b"VDT1"            magic
    u8                 dtype code (1 = float32)
    u32                ndim
    u32 * ndim         dims
    payload            prod(dims) float32 values, row-major

A checkpoint is ``b"VDCK"``, a u32 format version, a u32 header length, a
UTF-8 JSON header (network config, stage, parameter names) and then one
tensor file blob per parameter in header order.

A dataset directory holds ``manifest.txt`` plus one sub-directory per
sequence with ``condition.vdt``, ``depth.vdt``, ``mask.vdt``, ``flows.vdt``
and ``cameras.txt``.  Flows are stored as ``(N-1, H, W, 4)`` with channels
du, dv, mask and the depth change of the tracked point.  Camera rows are ``camera <seq> <frame>`` followed by
the 9 entries of K, the 9 entries of R and the 3 entries of t, written with
round-trip precision.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .worldgen import CameraFrame, FlowField, normalize_depth

PathLike = Union[str, Path]

TENSOR_MAGIC = b"VDT1"
DTYPE_F32 = 1
CKPT_MAGIC = b"VDCK"
CKPT_VERSION = 1
_HEAD = struct.Struct("<4sBI")


class TensorFormatError(ValueError):
    """A tensor or checkpoint file does not follow the documented layout."""


class CheckpointVersionError(TensorFormatError):
    pass


# --- tensor files ----------------------------------------------------------

def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")
    head = _HEAD.pack(TENSOR_MAGIC, DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns the array and the end offset."""
    if len(buf) - offset < _HEAD.size:
        raise TensorFormatError(f"{source}: truncated header")
    magic, code, ndim = _HEAD.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"{source}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if code != DTYPE_F32:
        raise TensorFormatError(f"{source}: unsupported dtype code {code}")
    pos = offset + _HEAD.size
    if len(buf) - pos < 4 * ndim:
        raise TensorFormatError(f"{source}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    nbytes = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - pos < nbytes:
        raise TensorFormatError(f"{source}: payload has {len(buf) - pos} bytes, expected {nbytes}")
    arr = np.reshape(np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos), dims)
    return arr.astype(np.float32), pos + nbytes


def write_tensor(path: PathLike, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: PathLike) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    arr, end = decode_tensor(buf, 0, str(path))
    if end != len(buf):
        raise TensorFormatError(f"{path}: {len(buf) - end} trailing bytes after payload")
    return arr


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path: PathLike, state: dict, header: dict) -> None:
    """Write named float tensors ``state`` plus a JSON-serialisable ``header``."""
    names = list(state)
    meta = dict(header, params=names, shapes=[list(np.shape(state[n])) for n in names])
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob]
    parts += [encode_tensor(np.asarray(state[n])) for n in names]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: PathLike) -> tuple[dict, dict]:
    """Returns ``(state, header)``; ``state`` maps names to float32 arrays."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise TensorFormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: corrupt header") from exc
    pos = 12 + hlen
    state = {}
    for name in header.get("params", []):
        state[name], pos = decode_tensor(buf, pos, f"{path}:{name}")
    if pos != len(buf):
        raise TensorFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return state, header


# --- cameras ---------------------------------------------------------------

def camera_rows(cams: Sequence[CameraFrame], seq: int = 0) -> list[str]:
    rows = []
    for f, cam in enumerate(cams):
        vals = np.concatenate([cam.K.ravel(), cam.R.ravel(), cam.t.ravel()])
        rows.append(f"camera {seq} {f} " + " ".join(repr(float(v)) for v in vals))
    return rows


def parse_cameras(text: str, seq: Optional[int] = None, source: str = "<text>") -> list[CameraFrame]:
    """Camera rows for sequence ``seq`` (all rows when ``None``), ordered by frame."""
    found = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0] != "camera":
            continue
        if len(parts) != 24:
            raise TensorFormatError(f"{source}:{lineno}: camera row needs 21 numbers, got {len(parts) - 3}")
        s, f = int(parts[1]), int(parts[2])
        if seq is not None and s != seq:
            continue
        v = np.array([float(x) for x in parts[3:]])
        found[(s, f)] = CameraFrame(v[:9].reshape(3, 3), v[9:18].reshape(3, 3), v[18:])
    if not found:
        raise TensorFormatError(f"{source}: no camera rows" + ("" if seq is None else f" for sequence {seq}"))
    return [found[k] for k in sorted(found)]


def read_cameras(path: PathLike, seq: Optional[int] = None) -> list[CameraFrame]:
    path = Path(path)
    return parse_cameras(path.read_text(), seq, str(path))


# --- dataset directories ---------------------------------------------------

@dataclass
class StoredSequence:
    """A sequence read back from a dataset directory."""

    condition: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    cameras: list
    flows: list = field(default_factory=list)
    depth_range: tuple = (0.0, 1.0)

    def normalized_depth(self) -> np.ndarray:
        return normalize_depth(self.depth, self.depth_range)


def flows_to_array(flows: Sequence[FlowField], h: int, w: int) -> np.ndarray:
    """Stack flows as ``(N-1, H, W, 4)``: du, dv, mask, depth change."""
    out = np.zeros((len(flows), h, w, 4), dtype=np.float32)
    for i, fl in enumerate(flows):
        out[i, ..., :2] = fl.flow
        out[i, ..., 2] = fl.mask
        out[i, ..., 3] = fl.dz()
    return out


def flows_from_array(arr: np.ndarray, source: str = "<flows>") -> list[FlowField]:
    """Inverse of :func:`flows_to_array`; a 3-channel array has no depth change."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] not in (3, 4):
        raise TensorFormatError(f"{source}: flows must be (N-1, H, W, 3|4), got {arr.shape}")
    return [FlowField(f[..., :2], f[..., 2] > 0.5, f[..., 3] if f.shape[-1] == 4 else None) for f in arr]


def write_dataset(root: PathLike, samples: Sequence, meta: Optional[dict] = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["# streamdepth dataset v1"]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta {k} {v}")
    for i, s in enumerate(samples):
        name = f"seq{i:03d}"
        d = root / name
        d.mkdir(exist_ok=True)
        n, h, w = s.depth.shape
        write_tensor(d / "condition.vdt", s.condition)
        write_tensor(d / "depth.vdt", np.where(s.mask, s.depth, 0.0))
        write_tensor(d / "mask.vdt", s.mask)
        write_tensor(d / "flows.vdt", flows_to_array(s.flows, h, w))
        rows = camera_rows(s.cameras, i)
        (d / "cameras.txt").write_text("\n".join(rows) + "\n")
        lo, hi = s.depth_range
        lines.append(f"sequence {i} {name} frames {n} height {h} width {w} depth_range {lo!r} {hi!r}")
        lines.extend(rows)
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def read_manifest(root: PathLike) -> list[dict]:
    path = Path(root) / "manifest.txt"
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0] != "sequence":
            continue
        try:
            entries.append({
                "index": int(parts[1]), "name": parts[2], "frames": int(parts[4]),
                "height": int(parts[6]), "width": int(parts[8]),
                "depth_range": (float(parts[10]), float(parts[11])),
            })
        except (IndexError, ValueError) as exc:
            raise TensorFormatError(f"{path}:{lineno}: malformed sequence row") from exc
    return entries


def read_dataset(root: PathLike) -> list[StoredSequence]:
    root = Path(root)
    out = []
    for e in read_manifest(root):
        d = root / e["name"]
        depth = read_tensor(d / "depth.vdt").astype(np.float64)
        mask = read_tensor(d / "mask.vdt") > 0.5
        cond = read_tensor(d / "condition.vdt").astype(np.float64)
        if depth.shape != (e["frames"], e["height"], e["width"]) or cond.shape != depth.shape:
            raise TensorFormatError(f"{d}: tensor shapes {cond.shape}/{depth.shape} disagree with manifest")
        flows = flows_from_array(read_tensor(d / "flows.vdt"), str(d / "flows.vdt"))
        cams = read_cameras(d / "cameras.txt", e["index"])
        out.append(StoredSequence(cond, depth, mask, cams, flows, e["depth_range"]))
    return out
