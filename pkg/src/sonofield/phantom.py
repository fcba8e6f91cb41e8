"""Procedural tissue phantoms, probe trajectories and sweep simulation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .diffcore import no_grad
from .geometry import FrameSpec
from .renderer import ParamMaps, RenderConfig, render_frame

CHANNELS = ("alpha", "beta", "rho_b", "rho_s", "phi")


@dataclass(frozen=True)
class TissuePreset:
    alpha: float  # attenuation per mm (up to scale)
    beta: float  # reflectance when entering this tissue
    rho_s: float  # scatterer density
    phi: float  # scatterer amplitude


# absolute values are arbitrary; only the ordering bone > others matters
PRESETS: dict[str, TissuePreset] = {
    "water": TissuePreset(0.0, 0.0, 0.0, 0.0),
    "fat": TissuePreset(0.02, 0.15, 0.35, 0.35),
    "soft": TissuePreset(0.015, 0.1, 0.5, 0.45),
    "liver": TissuePreset(0.04, 0.2, 0.6, 0.55),
    "bone": TissuePreset(0.6, 0.8, 0.8, 0.8),
}


@dataclass(frozen=True)
class Layer:
    top: float  # depth (world y, mm) where the layer starts
    bottom: float
    tissue: str


@dataclass(frozen=True)
class Inclusion:
    shape: str  # "box" or "sphere"
    tissue: str
    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)  # box corner
    hi: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)  # sphere
    radius: float = 0.0


@dataclass(frozen=True)
class PhantomSpec:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    layers: tuple[Layer, ...]
    inclusions: tuple[Inclusion, ...] = ()
    presets: dict = field(default_factory=lambda: dict(PRESETS))

    def validate(self) -> None:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if not np.all(lo < hi):
            raise ValueError(f"phantom extent is degenerate: {self.lo} .. {self.hi}")
        layers = sorted(self.layers, key=lambda l: l.top)
        if not layers:
            raise ValueError("phantom needs at least one layer")
        for l in layers:
            if l.tissue not in self.presets:
                raise ValueError(f"unknown tissue preset {l.tissue!r}")
            if not l.top < l.bottom:
                raise ValueError(f"empty layer {l}")
        for a, b in zip(layers, layers[1:]):
            if b.top < a.bottom:
                raise ValueError(f"overlapping layers: {a} and {b}")
            if b.top > a.bottom:
                raise ValueError(f"gap between layers at depth {a.bottom}..{b.top}")
        if layers[0].top > lo[1] or layers[-1].bottom < hi[1]:
            raise ValueError("layers must cover the phantom depth extent")
        for inc in self.inclusions:
            if inc.tissue not in self.presets:
                raise ValueError(f"unknown tissue preset {inc.tissue!r}")
            if inc.shape == "box":
                ilo, ihi = np.asarray(inc.lo), np.asarray(inc.hi)
            elif inc.shape == "sphere":
                ilo = np.asarray(inc.center) - inc.radius
                ihi = np.asarray(inc.center) + inc.radius
            else:
                raise ValueError(f"unknown inclusion shape {inc.shape!r}")
            if np.any(ilo < lo) or np.any(ihi > hi):
                raise ValueError(f"inclusion {inc} leaves the phantom extent")

    def to_dict(self) -> dict:
        return {
            "lo": list(self.lo),
            "hi": list(self.hi),
            "layers": [vars(l) for l in self.layers],
            "inclusions": [
                {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(i).items()} for i in self.inclusions
            ],
            "presets": {k: vars(v) for k, v in self.presets.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        presets = dict(PRESETS)
        presets.update({k: TissuePreset(**v) for k, v in d.get("presets", {}).items()})
        return cls(
            lo=tuple(d["lo"]),
            hi=tuple(d["hi"]),
            layers=tuple(Layer(**l) for l in d["layers"]),
            inclusions=tuple(
                Inclusion(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in i.items()})
                for i in d.get("inclusions", [])
            ),
            presets=presets,
        )


def load_phantom_spec(path: str | Path) -> PhantomSpec:
    return PhantomSpec.from_dict(json.loads(Path(path).read_text()))


def layered_reflector_phantom() -> PhantomSpec:
    """Fat / soft tissue / liver layers with a rib-like bone bar in the soft layer.

    The bar is narrow along the sweep (z) axis, so tilted and perpendicular
    views shadow different regions beneath it.
    """
    return PhantomSpec(
        lo=(-1.0, 0.0, -30.0),
        hi=(33.0, 50.0, 30.0),
        layers=(Layer(0.0, 6.0, "fat"), Layer(6.0, 22.0, "soft"), Layer(22.0, 50.0, "liver")),
        inclusions=(Inclusion("box", "bone", lo=(8.0, 12.0, -2.5), hi=(24.0, 15.0, 2.5)),),
    )


@dataclass
class ParamVolume:
    data: np.ndarray  # (nx, ny, nz, 5)
    spacing: float
    origin: np.ndarray  # world position of voxel (0, 0, 0) centre
    tissue: np.ndarray | None = None  # integer tissue ids, for inspection

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.array(self.shape) - 1) * self.spacing

    def channel(self, name: str) -> np.ndarray:
        return self.data[..., CHANNELS.index(name)]


def build_phantom(spec: PhantomSpec, resolution: float = 0.5) -> ParamVolume:
    """Rasterize layers then inclusions (later wins) on a voxel-centre grid.

    Voxels where the tissue changes along depth (and the top face) are
    interface voxels: border probability 1 and the reflectance of the tissue
    being entered. Everything else has zero border probability and
    reflectance.
    """
    spec.validate()
    lo, hi = np.asarray(spec.lo, float), np.asarray(spec.hi, float)
    n = np.floor((hi - lo) / resolution + 1e-9).astype(int) + 1
    axes = [lo[i] + np.arange(n[i]) * resolution for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")

    names = list(spec.presets)
    ids = np.full(n, -1, dtype=np.int16)
    for layer in spec.layers:
        ids[(Y >= layer.top) & (Y < layer.bottom)] = names.index(layer.tissue)
    last = max(spec.layers, key=lambda l: l.bottom)
    ids[Y >= last.bottom] = names.index(last.tissue)
    for inc in spec.inclusions:
        if inc.shape == "box":
            mask = np.ones(n, dtype=bool)
            for ax, c in enumerate((X, Y, Z)):
                mask &= (c >= inc.lo[ax]) & (c <= inc.hi[ax])
        else:
            d2 = (X - inc.center[0]) ** 2 + (Y - inc.center[1]) ** 2 + (Z - inc.center[2]) ** 2
            mask = d2 <= inc.radius**2
        ids[mask] = names.index(inc.tissue)

    table = np.array([[p.alpha, p.beta, p.rho_s, p.phi] for p in spec.presets.values()], dtype=np.float32)
    props = table[ids]
    interface = np.zeros(n, dtype=bool)
    interface[:, 0, :] = True
    interface[:, 1:, :] = ids[:, 1:, :] != ids[:, :-1, :]

    data = np.zeros((*n, 5), dtype=np.float32)
    data[..., 0] = props[..., 0]
    data[..., 1] = np.where(interface, props[..., 1], 0)
    data[..., 2] = interface.astype(np.float32)
    data[..., 3] = props[..., 2]
    data[..., 4] = props[..., 3]
    return ParamVolume(data, resolution, lo, ids)


def sample_volume(vol: ParamVolume, points: np.ndarray, background=None) -> np.ndarray:
    """Trilinear interpolation of all channels at world ``points`` (..., 3).

    Points outside the voxel-centre grid get the background (water) values.
    """
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    g = (flat - vol.origin) / vol.spacing
    n = np.array(vol.shape)
    eps = 1e-9
    inside = np.all((g >= -eps) & (g <= n - 1 + eps), axis=1)
    coords = np.clip(g, 0, n - 1).T
    out = np.stack(
        [
            ndimage.map_coordinates(vol.data[..., c], coords, output=np.float64, order=1, mode="nearest")
            for c in range(vol.data.shape[-1])
        ],
        axis=-1,
    )
    if background is None:
        background = np.zeros(vol.data.shape[-1])
    out[~inside] = background
    return out.reshape(*pts.shape[:-1], vol.data.shape[-1])


def param_maps_at(vol: ParamVolume, pose: np.ndarray, spec: FrameSpec) -> ParamMaps:
    """Ground-truth parameter maps (W x D each) along the rays of one frame."""
    values = sample_volume(vol, geo.frame_points(pose, spec)).astype(np.float32)
    return ParamMaps(*(values[..., k] for k in range(5)))


# ----------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class SweepPlan:
    sweep_id: str
    tilt: float  # degrees about the lateral axis; 0 is perpendicular
    frames: int
    start: tuple[float, float, float]
    step: tuple[float, float, float]
    split: str = "train"  # "train" or "test"

    @property
    def view_kind(self) -> str:
        return "perpendicular" if self.tilt == 0 else "tilted"


@dataclass(frozen=True)
class TrajectorySpec:
    sweeps: tuple[SweepPlan, ...]


def make_trajectories(spec: TrajectorySpec, frame_spec: FrameSpec) -> list[tuple[str, list[np.ndarray]]]:
    """Straight translational sweeps; each frame plane is tilted about the lateral axis."""
    out = []
    for plan in spec.sweeps:
        if abs(plan.tilt) > 45:
            raise ValueError(f"{plan.sweep_id}: tilt {plan.tilt} outside +-45 degrees")
        rot = geo.rotation_x(plan.tilt)
        start, step = np.asarray(plan.start, float), np.asarray(plan.step, float)
        poses = [geo.make_pose(rot, start + i * step) for i in range(plan.frames)]
        out.append((plan.sweep_id, poses))
    return out


def covering_sweep(
    sweep_id: str,
    tilt: float,
    frame_spec: FrameSpec,
    frames: int = 50,
    z_center: float = 0.0,
    half_length: float = 10.0,
    split: str = "train",
) -> SweepPlan:
    """Sweep along +z whose frame planes together cover the slab |z - z_center| <= half_length at every depth."""
    reach = (frame_spec.depth - 1) * frame_spec.axial_spacing * np.sin(np.deg2rad(tilt))
    z0 = z_center - half_length - max(reach, 0.0)
    z1 = z_center + half_length - min(reach, 0.0)
    step = (z1 - z0) / max(frames - 1, 1)
    return SweepPlan(sweep_id, float(tilt), frames, (0.0, 0.0, float(z0)), (0.0, 0.0, float(step)), split)


def default_trajectories(
    frame_spec: FrameSpec,
    frames: int = 50,
    train_tilts: Sequence[float] = (10.0, -10.0, 20.0, -20.0),
    test_tilts: Sequence[float] = (0.0, 15.0, -15.0),
    half_length: float = 10.0,
) -> TrajectorySpec:
    """Tilted training sweeps plus test sweeps (0 means perpendicular)."""
    plans = [covering_sweep(f"sweep_{k}", t, frame_spec, frames, 0.0, half_length, "train") for k, t in enumerate(train_tilts)]
    base = len(plans)
    plans += [
        covering_sweep(f"sweep_{base + k}", t, frame_spec, frames, 0.0, half_length, "test") for k, t in enumerate(test_tilts)
    ]
    return TrajectorySpec(tuple(plans))


# ----------------------------------------------------------------------------
# simulation


@dataclass
class Sweep:
    sweep_id: str
    view_kind: str
    split: str
    poses: list[np.ndarray]
    frames: list[np.ndarray]  # W x D float images in [0, 1]
    gt: list[ParamMaps] | None = None
    tilt: float | None = None


def simulate_sweep(
    vol: ParamVolume,
    poses: Sequence[np.ndarray],
    frame_spec: FrameSpec,
    render_cfg: RenderConfig,
    frame_offset: int = 0,
) -> tuple[list[np.ndarray], list[ParamMaps]]:
    """Render every pose of a sweep from the ground-truth volume.

    Returns the pre-clamp echo images and the ground-truth parameter maps.
    Frame ``i`` draws its random stream with frame id ``frame_offset + i``.
    """
    images, maps = [], []
    with no_grad():
        for i, pose in enumerate(poses):
            gt = param_maps_at(vol, pose, frame_spec)
            E, _ = render_frame(gt, render_cfg, frame_id=frame_offset + i)
            images.append(E.data.astype(np.float32))
            maps.append(gt)
    return images, maps


def simulate_dataset(
    vol: ParamVolume,
    trajectories: TrajectorySpec,
    frame_spec: FrameSpec,
    render_cfg: RenderConfig,
) -> list[Sweep]:
    sweeps = []
    for k, ((sweep_id, poses), plan) in enumerate(zip(make_trajectories(trajectories, frame_spec), trajectories.sweeps)):
        images, maps = simulate_sweep(vol, poses, frame_spec, render_cfg, frame_offset=k * 100_000)
        images = [np.clip(im, 0, 1) for im in images]
        sweeps.append(Sweep(sweep_id, plan.view_kind, plan.split, poses, images, maps, plan.tilt))
    return sweeps


def shadow_mask(alpha: np.ndarray, reflector_alpha: float, margin: int = 3) -> np.ndarray:
    """Samples lying beneath a strong attenuator on their own scan-line.

    ``alpha`` is a W x D ground-truth attenuation map; a sample is in shadow
    when some shallower sample on its scan-line reaches ``reflector_alpha``,
    ignoring the first ``margin`` samples below it (PSF spill).
    """
    alpha = np.asarray(alpha)
    strong = alpha >= reflector_alpha
    mask = np.zeros(alpha.shape, dtype=bool)
    for w in np.nonzero(strong.any(axis=1))[0]:
        last = np.nonzero(strong[w])[0].max()
        mask[w, last + 1 + margin :] = True
    return mask
