"""Probe poses, scan-line rays and sample grids for a linear probe.

Image-plane convention: x runs along the transducer face (one scan-line per
lateral step), y is depth, z = 0 is the imaging plane. Pixel (0, 0) is the
first scan-line at the transducer face. A pose maps image-plane millimetres
to world millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-5


class InvalidPoseError(ValueError):
    pass


class PoseFileError(ValueError):
    pass


@dataclass(frozen=True)
class FrameSpec:
    width: int  # scan-lines
    depth: int  # samples per scan-line
    lateral_spacing: float = 0.5  # mm between scan-lines
    axial_spacing: float = 0.5  # mm between samples (dt)

    def __post_init__(self):
        if self.width <= 0 or self.depth <= 0:
            raise ValueError(f"frame size must be positive, got {self.width}x{self.depth}")
        if self.lateral_spacing <= 0 or self.axial_spacing <= 0:
            raise ValueError("frame spacings must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.width, self.depth)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class VolumeBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("bounds corners must be 3-vectors")
        if not np.all(lo < hi):
            raise ValueError(f"degenerate bounds: lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Affine map of mm coordinates into [-1, 1] per axis (outside points exceed it)."""
        return (np.asarray(points) - self.center) / ((self.hi - self.lo) / 2)

    def denormalize(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * ((self.hi - self.lo) / 2) + self.center


def bounds_from_points(points: np.ndarray, margin: float = 0.05) -> VolumeBounds:
    """Bounding box of ``points`` grown by ``margin`` of its extent on every side."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = np.maximum((hi - lo) * margin, 1e-6)
    return VolumeBounds(lo - pad, hi + pad)


def validate_pose(pose: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise InvalidPoseError(f"pose must be 4x4, got {pose.shape}")
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=tol):
        raise InvalidPoseError(f"pose last row must be (0,0,0,1), got {pose[3]}")
    rot = pose[:3, :3]
    if not np.allclose(rot.T @ rot, np.eye(3), atol=tol):
        raise InvalidPoseError("pose rotation block is not orthonormal")
    return pose


def make_pose(rotation: np.ndarray | None = None, translation=(0.0, 0.0, 0.0)) -> np.ndarray:
    pose = np.eye(4)
    if rotation is not None:
        pose[:3, :3] = rotation
    pose[:3, 3] = translation
    return pose


def rotation_x(degrees: float) -> np.ndarray:
    """Rotation about the lateral (x) axis; positive tilts depth (+y) towards +z."""
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rotation_y(degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rays_for_frame(pose: np.ndarray, spec: FrameSpec) -> list[Ray]:
    """One ray per scan-line: origins along the transducer edge, common depth direction."""
    origins, direction = _ray_arrays(pose, spec)
    return [Ray(o, direction.copy()) for o in origins]


def _ray_arrays(pose: np.ndarray, spec: FrameSpec) -> tuple[np.ndarray, np.ndarray]:
    pose = validate_pose(pose)
    lateral = np.arange(spec.width) * spec.lateral_spacing
    local = np.stack([lateral, np.zeros(spec.width), np.zeros(spec.width)], axis=1)
    origins = local @ pose[:3, :3].T + pose[:3, 3]
    direction = pose[:3, :3] @ np.array([0.0, 1.0, 0.0])
    return origins, direction / np.linalg.norm(direction)


def sample_points(ray: Ray, spec: FrameSpec) -> np.ndarray:
    t = np.arange(spec.depth) * spec.axial_spacing
    return ray.origin[None, :] + t[:, None] * ray.direction[None, :]


def frame_points(pose: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """World positions of every sample in a frame, shape (W, D, 3)."""
    origins, direction = _ray_arrays(pose, spec)
    t = np.arange(spec.depth) * spec.axial_spacing
    return origins[:, None, :] + t[None, :, None] * direction[None, None, :]


def ray_direction(pose: np.ndarray) -> np.ndarray:
    return _ray_arrays(pose, FrameSpec(1, 1))[1]


def format_pose(pose: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(pose, dtype=np.float64).reshape(-1))


def write_poses(path: str | Path, poses) -> None:
    Path(path).write_text("".join(format_pose(p) + "\n" for p in poses))


def read_poses(path: str | Path) -> list[np.ndarray]:
    """Parse a pose file: one frame per line, 16 row-major numbers."""
    path = Path(path)
    if not path.exists():
        raise PoseFileError(f"{path}: pose file not found")
    poses = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 16:
            raise PoseFileError(f"{path}:{lineno}: expected 16 numbers, found {len(fields)}")
        try:
            values = [float(v) for v in fields]
        except ValueError as exc:
            raise PoseFileError(f"{path}:{lineno}: {exc}") from None
        pose = np.array(values).reshape(4, 4)
        try:
            validate_pose(pose)
        except InvalidPoseError as exc:
            raise PoseFileError(f"{path}:{lineno}: {exc}") from None
        poses.append(pose)
    return poses
