"""Dataset directories: manifest, per-sweep pose files and 8-bit PGM frames."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .geometry import FrameSpec
from .phantom import CHANNELS, Sweep
from .renderer import ParamMaps

FORMAT = "sonofield-dataset/1"
FRAME_PATTERN = "frame_{:04d}.pgm"
GT_PATTERN = "frame_{:04d}_{}.pgm"
POSE_FILE = "poses.txt"


class DatasetError(ValueError):
    pass


# ----------------------------------------------------------------------------
# PGM


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a W x D float image in [0, 1] as binary PGM with W columns and D rows."""
    q = quantize(np.asarray(image)).T  # rows are depth samples
    header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(q).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary 8-bit PGM back to a W x D float32 image in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM is supported, maxval {maxval}")
    body = raw[pos:]
    if len(body) != cols * rows:
        raise DatasetError(f"{path}: expected {cols * rows} pixel bytes, found {len(body)}")
    return (np.frombuffer(body, dtype=np.uint8).reshape(rows, cols).T / 255.0).astype(np.float32)


# ----------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class SweepManifest:
    sweep_id: str
    frames: int
    view_kind: str  # "tilted" or "perpendicular"
    split: str  # "train" or "test"
    tilt: float | None = None
    image_pattern: str = FRAME_PATTERN
    pose_file: str = POSE_FILE
    has_gt: bool = False

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class Dataset:
    frame_spec: FrameSpec
    sweeps: list[Sweep]
    alpha_scale: float = 1.0

    def split(self, name: str) -> list[Sweep]:
        return [s for s in self.sweeps if s.split == name]

    def without(self, sweep_ids) -> list[Sweep]:
        drop = set(sweep_ids)
        return [s for s in self.sweeps if s.sweep_id not in drop]


def _frame_spec_dict(spec: FrameSpec) -> dict:
    return {
        "width": spec.width,
        "depth": spec.depth,
        "lateral_spacing": spec.lateral_spacing,
        "axial_spacing": spec.axial_spacing,
    }


def save_dataset(path: str | Path, dataset: Dataset) -> None:
    """Write manifest, poses and quantized frames (plus ground-truth maps if present).

    Ground-truth alpha is divided by ``dataset.alpha_scale`` so it fits the
    8-bit range; the scale is recorded in the manifest.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifests = []
    for sweep in dataset.sweeps:
        d = root / sweep.sweep_id
        d.mkdir(exist_ok=True)
        geo.write_poses(d / POSE_FILE, sweep.poses)
        for i, frame in enumerate(sweep.frames):
            write_pgm(d / FRAME_PATTERN.format(i), frame)
        if sweep.gt is not None:
            (d / "gt").mkdir(exist_ok=True)
            for i, maps in enumerate(sweep.gt):
                for name, m in zip(CHANNELS, maps):
                    m = np.asarray(m) / dataset.alpha_scale if name == "alpha" else m
                    write_pgm(d / "gt" / GT_PATTERN.format(i, name), m)
        manifests.append(
            SweepManifest(sweep.sweep_id, len(sweep.frames), sweep.view_kind, sweep.split, sweep.tilt, has_gt=sweep.gt is not None)
        )
    manifest = {
        "format": FORMAT,
        "frame_spec": _frame_spec_dict(dataset.frame_spec),
        "gt_alpha_scale": dataset.alpha_scale,
        "sweeps": [m.to_dict() for m in manifests],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> tuple[FrameSpec, float, list[SweepManifest]]:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath}: manifest not found")
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}:{exc.lineno}: {exc.msg}") from exc
    if doc.get("format") != FORMAT:
        raise DatasetError(f"{mpath}: unsupported format {doc.get('format')!r}")
    spec = FrameSpec(**doc["frame_spec"])
    return spec, float(doc.get("gt_alpha_scale", 1.0)), [SweepManifest(**s) for s in doc["sweeps"]]


def load_dataset(path: str | Path, with_gt: bool = True) -> Dataset:
    root = Path(path)
    spec, alpha_scale, manifests = load_manifest(root)
    mpath = root / "manifest.json"
    sweeps = []
    for m in manifests:
        d = root / m.sweep_id
        if not d.is_dir():
            raise DatasetError(f"{mpath}: sweep directory {d} is missing")
        on_disk = sorted(p.name for p in d.glob("frame_*.pgm"))
        if len(on_disk) != m.frames:
            raise DatasetError(f"{mpath}: sweep {m.sweep_id} lists {m.frames} frames but {d} holds {len(on_disk)}")
        pose_path = d / m.pose_file
        if not pose_path.exists():
            raise DatasetError(f"{mpath}: pose file {pose_path} is missing")
        poses = geo.read_poses(pose_path)
        if len(poses) != m.frames:
            raise DatasetError(f"{pose_path}: {len(poses)} poses for {m.frames} frames listed in {mpath}")
        frames = []
        for i in range(m.frames):
            fpath = d / m.image_pattern.format(i)
            if not fpath.exists():
                raise DatasetError(f"{mpath}: frame file {fpath} is missing")
            img = read_pgm(fpath)
            if img.shape != spec.shape:
                raise DatasetError(f"{fpath}: frame is {img.shape}, manifest frame spec is {spec.shape}")
            frames.append(img)
        gt = None
        if with_gt and m.has_gt:
            gt = []
            for i in range(m.frames):
                maps = [read_pgm(d / "gt" / GT_PATTERN.format(i, name)) for name in CHANNELS]
                maps[0] = maps[0] * np.float32(alpha_scale)
                gt.append(ParamMaps(*maps))
        sweeps.append(Sweep(m.sweep_id, m.view_kind, m.split, poses, frames, gt, m.tilt))
    return Dataset(spec, sweeps, alpha_scale)
