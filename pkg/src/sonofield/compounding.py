"""Volumetric compounding of tracked sweeps and reslicing at arbitrary poses."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .geometry import FrameSpec

COMPOUND_MODES = ("max", "mean")


@dataclass
class IntensityVolume:
    data: np.ndarray  # (nx, ny, nz) float32 in [0, 1]
    hits: np.ndarray  # (nx, ny, nz) int32 per-voxel sample count
    spacing: float
    origin: np.ndarray  # world position of voxel (0, 0, 0) centre

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError("voxel spacing must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64)


def compound(
    sweeps: Sequence[tuple[Sequence[np.ndarray], Sequence[np.ndarray]]],
    frame_spec: FrameSpec,
    spacing: float = 0.5,
    mode: str = "mean",
) -> IntensityVolume:
    """Splat every pixel of every (frames, poses) sweep into its nearest voxel.

    ``max`` keeps the brightest sample per voxel, ``mean`` averages by hit
    count; voxels no pixel lands in stay 0.
    """
    if mode not in COMPOUND_MODES:
        raise ValueError(f"compounding mode must be one of {COMPOUND_MODES}, got {mode!r}")
    if spacing <= 0:
        raise ValueError("voxel spacing must be positive")
    pts, vals = [], []
    for frames, poses in sweeps:
        if len(frames) != len(poses):
            raise ValueError(f"{len(frames)} frames but {len(poses)} poses")
        for frame, pose in zip(frames, poses):
            pts.append(geo.frame_points(pose, frame_spec).reshape(-1, 3))
            vals.append(np.asarray(frame, dtype=np.float64).reshape(-1))
    if not pts:
        raise ValueError("nothing to compound: empty sweep list")
    pts, vals = np.concatenate(pts), np.concatenate(vals)

    origin = np.floor(pts.min(axis=0) / spacing + 0.5) * spacing
    idx = np.rint((pts - origin) / spacing).astype(np.int64)
    shape = tuple(idx.max(axis=0) + 1)
    flat = np.ravel_multi_index(idx.T, shape)
    hits = np.bincount(flat, minlength=int(np.prod(shape)))
    if mode == "mean":
        acc = np.bincount(flat, weights=vals, minlength=hits.size)
        data = np.divide(acc, hits, out=np.zeros_like(acc), where=hits > 0)
    else:
        data = np.zeros(hits.size)
        np.maximum.at(data, flat, vals)
    return IntensityVolume(
        np.clip(data, 0, 1).reshape(shape).astype(np.float32), hits.reshape(shape).astype(np.int32), spacing, origin
    )


def sample(vol: IntensityVolume, points: np.ndarray) -> np.ndarray:
    """Trilinear lookup at world ``points`` (..., 3); 0 outside the grid."""
    pts = np.asarray(points, dtype=np.float64)
    g = (pts.reshape(-1, 3) - vol.origin) / vol.spacing
    n = np.array(vol.data.shape)
    inside = np.all((g >= -1e-9) & (g <= n - 1 + 1e-9), axis=1)
    out = ndimage.map_coordinates(vol.data, np.clip(g, 0, n - 1).T, output=np.float64, order=1, mode="nearest")
    out[~inside] = 0.0
    return out.reshape(pts.shape[:-1])


def slice_volume(vol: IntensityVolume, pose: np.ndarray, frame_spec: FrameSpec) -> np.ndarray:
    """Resample the volume over the W x D grid of the frame at ``pose``."""
    return sample(vol, geo.frame_points(pose, frame_spec)).astype(np.float32)


def save_volume(path: str | Path, vol: IntensityVolume) -> None:
    """Raw little-endian float32 values (x fastest) plus a text header ``<path>.hdr``."""
    path = Path(path)
    path.write_bytes(np.asfortranarray(vol.data, dtype="<f4").tobytes(order="F"))
    nx, ny, nz = vol.data.shape
    header = [
        "format sonofield-volume/1",
        f"dims {nx} {ny} {nz}",
        f"spacing {vol.spacing!r}",
        "origin " + " ".join(repr(float(v)) for v in vol.origin),
        "dtype float32-le",
        "order x-fastest",
    ]
    Path(str(path) + ".hdr").write_text("\n".join(header) + "\n")


def load_volume(path: str | Path) -> IntensityVolume:
    path = Path(path)
    hdr_path = Path(str(path) + ".hdr")
    if not hdr_path.exists():
        raise ValueError(f"{hdr_path}: volume header missing")
    fields = {}
    for lineno, line in enumerate(hdr_path.read_text().splitlines(), 1):
        key, _, value = line.partition(" ")
        if not value:
            raise ValueError(f"{hdr_path}:{lineno}: malformed header line")
        fields[key] = value.split()
    dims = tuple(int(v) for v in fields["dims"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != np.prod(dims):
        raise ValueError(f"{path}: expected {np.prod(dims)} values for dims {dims}, found {raw.size}")
    data = raw.reshape(dims, order="F").astype(np.float32)
    # hit counts are not stored; any non-zero voxel counts as touched
    return IntensityVolume(data, (data > 0).astype(np.int32), float(fields["spacing"][0]), np.array([float(v) for v in fields["origin"]]))
