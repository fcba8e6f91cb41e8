"""Training loop (field -> renderer -> loss), checkpoints, novel views and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from . import inr
from .geometry import FrameSpec, VolumeBounds
from .inr import EncodingConfig, MlpConfig
from .lossmetrics import LossConfig, combined_loss, sweep_ssim_stats
from .optim import Adam
from .phantom import Sweep
from .renderer import MODES, IntermediateMaps, ParamMaps, RenderConfig, render_frame, to_image

log = logging.getLogger(__name__)

VARIANTS = ("ultra", "baseline")
MAGIC = b"UNRF1"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "ultra"
    iterations: int = 20000
    frames_per_batch: int = 1
    lr: float = 5e-4
    halve_every: int = 2500
    lam: float = 0.9
    seed: int = 0
    mode: str = "hard"
    temperature: float = 0.1
    checkpoint_every: int = 0
    width: int = 256
    depth: int = 8
    skip: int = 5
    frequencies: int = 10
    # initial bias of the border-probability logit; 0 gives sigmoid 0.5
    border_bias: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.iterations < 0 or self.frames_per_batch <= 0 or self.checkpoint_every < 0:
            raise ValueError("iteration, batch and checkpoint counts must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"loss weight must lie in [0, 1], got {self.lam}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.mode not in MODES:
            raise ValueError(f"sampling mode must be one of {MODES}, got {self.mode!r}")

    def model_configs(self) -> tuple[EncodingConfig, MlpConfig]:
        out = 5 if self.variant == "ultra" else 1
        return EncodingConfig(self.frequencies), MlpConfig(self.width, self.depth, self.skip, out)


@dataclass
class Checkpoint:
    variant: str
    encoding: EncodingConfig
    mlp: MlpConfig
    bounds: VolumeBounds
    frame_spec: FrameSpec
    render: RenderConfig
    train: TrainConfig
    iteration: int
    weights: list[np.ndarray]
    extra: dict = field(default_factory=dict)

    @property
    def is_ultra(self) -> bool:
        return self.variant == "ultra"


def initial_weights(cfg: TrainConfig) -> list[np.ndarray]:
    enc, mlp = cfg.model_configs()
    weights = inr.init_weights(cfg.seed, enc, mlp)
    if cfg.variant == "ultra" and cfg.border_bias:
        weights[-1][2] = np.float32(cfg.border_bias)
    return weights


# ----------------------------------------------------------------------------
# forward passes


def _render_points(
    points: np.ndarray, weights: Sequence, ckpt_like, shape: tuple[int, int], render_cfg: RenderConfig, frame_id: int
) -> tuple[dc.Tensor, IntermediateMaps | None, ParamMaps | None]:
    """Field query over normalized ``points`` (N, 3) reshaped to one W x D frame."""
    enc, mlp = ckpt_like.encoding, ckpt_like.mlp
    if ckpt_like.variant == "baseline":
        E = inr.intensity_query(points, weights, enc, mlp).reshape(shape)
        return E, None, None
    tissue = inr.field_query(points, weights, enc, mlp)
    maps = ParamMaps(*(t.reshape(shape) for t in tissue))
    E, inter = render_frame(maps, render_cfg, frame_id)
    return E, inter, maps


@dataclass
class _Model:
    variant: str
    encoding: EncodingConfig
    mlp: MlpConfig


# ----------------------------------------------------------------------------
# training


def training_bounds(sweeps: Sequence[Sweep], spec: FrameSpec) -> VolumeBounds:
    pts = np.concatenate([geo.frame_points(p, spec).reshape(-1, 3) for s in sweeps for p in s.poses])
    return geo.bounds_from_points(pts)


def train(
    sweeps: Sequence[Sweep],
    frame_spec: FrameSpec,
    cfg: TrainConfig,
    render_cfg: RenderConfig | None = None,
    on_checkpoint: Callable[[Checkpoint], None] | None = None,
) -> tuple[Checkpoint, list[float]]:
    """Fit one field to every frame of ``sweeps``.

    Frames are visited round-robin in an order reshuffled each epoch from
    ``cfg.seed``. Returns the final checkpoint and the per-iteration loss.
    """
    if not sweeps or not any(s.frames for s in sweeps):
        raise ValueError("training needs at least one sweep with frames")
    enc, mlp = cfg.model_configs()
    if render_cfg is None:
        render_cfg = RenderConfig(axial_spacing=frame_spec.axial_spacing)
    render_cfg = replace(render_cfg, mode=cfg.mode, temperature=cfg.temperature, seed=cfg.seed)
    bounds = training_bounds(sweeps, frame_spec)

    targets, points = [], []
    for s in sweeps:
        for pose, frame in zip(s.poses, s.frames):
            if frame.shape != frame_spec.shape:
                raise dc.ShapeError("train", frame.shape, frame_spec.shape, detail="frame vs frame spec")
            targets.append(np.asarray(frame, dtype=np.float32))
            points.append(bounds.normalize(geo.frame_points(pose, frame_spec).reshape(-1, 3)).astype(np.float32))

    weights = initial_weights(cfg)
    opt = Adam(lr=cfg.lr, halve_every=cfg.halve_every)
    loss_cfg = LossConfig(lam=cfg.lam)
    model = _Model(cfg.variant, enc, mlp)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    losses: list[float] = []

    def snapshot(iteration: int) -> Checkpoint:
        return Checkpoint(
            cfg.variant, enc, mlp, bounds, frame_spec, render_cfg, cfg, iteration, [w.copy() for w in weights]
        )

    for it in range(cfg.iterations):
        leaves = [dc.Tensor(w, requires_grad=True) for w in weights]
        total = None
        for b in range(cfg.frames_per_batch):
            if not order:
                order = list(rng.permutation(len(targets)))
            k = int(order.pop(0))
            E, _, _ = _render_points(points[k], leaves, model, frame_spec.shape, render_cfg, it * cfg.frames_per_batch + b)
            loss = combined_loss(E, targets[k], loss_cfg)
            total = loss if total is None else total + loss
        total = total * (1.0 / cfg.frames_per_batch)
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at iteration {it}")
        store = dc.backward(total)
        opt.step(weights, dc.parameters_grads(store, leaves))
        losses.append(value)
        if it % 500 == 0:
            log.info("iteration %d loss %.5f lr %.2e", it, value, opt.current_lr())
        if on_checkpoint and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(snapshot(it + 1))
    return snapshot(cfg.iterations), losses


# ----------------------------------------------------------------------------
# checkpoint files


def _render_dict(cfg: RenderConfig) -> dict:
    return {
        "axial_spacing": cfg.axial_spacing,
        "frequency": cfg.frequency,
        "i0": cfg.i0,
        "psf": cfg.psf.tolist(),
        "mode": cfg.mode,
        "temperature": cfg.temperature,
        "seed": cfg.seed,
        "scatter_noise": cfg.scatter_noise,
    }


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Magic, one line of JSON header, then little-endian float32 weights in header order."""
    header = {
        "format_version": FORMAT_VERSION,
        "variant": ckpt.variant,
        "encoding": asdict(ckpt.encoding),
        "mlp": asdict(ckpt.mlp),
        "bounds": {"lo": ckpt.bounds.lo.tolist(), "hi": ckpt.bounds.hi.tolist()},
        "frame_spec": asdict(ckpt.frame_spec),
        "render": _render_dict(ckpt.render),
        "train": asdict(ckpt.train),
        "iteration": ckpt.iteration,
        "layers": [list(w.shape) for w in ckpt.weights],
        "dtype": "<f4",
        "extra": ckpt.extra,
    }
    body = b"".join(np.ascontiguousarray(w, dtype="<f4").tobytes() for w in ckpt.weights)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(MAGIC + b"\n" + text + b"\n" + body)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    start = len(MAGIC) + 1
    end = raw.find(b"\n", start)
    if end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        h = json.loads(raw[start:end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc.msg})") from exc
    if h.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {h.get('format_version')}")
    body = raw[end + 1 :]
    expected = sum(int(np.prod(s)) for s in h["layers"]) * 4
    if len(body) != expected:
        raise CheckpointError(f"{path}: expected {expected} weight bytes, found {len(body)}")
    weights, pos = [], 0
    for shape in h["layers"]:
        n = int(np.prod(shape))
        weights.append(np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32))
        pos += n * 4
    r = dict(h["render"])
    r["psf"] = np.array(r["psf"])
    return Checkpoint(
        variant=h["variant"],
        encoding=EncodingConfig(**h["encoding"]),
        mlp=MlpConfig(**h["mlp"]),
        bounds=VolumeBounds(np.array(h["bounds"]["lo"]), np.array(h["bounds"]["hi"])),
        frame_spec=FrameSpec(**h["frame_spec"]),
        render=RenderConfig(**r),
        train=TrainConfig(**h["train"]),
        iteration=h["iteration"],
        weights=weights,
        extra=h.get("extra", {}),
    )


# ----------------------------------------------------------------------------
# inference


@dataclass
class View:
    image: np.ndarray  # clamped to [0, 1]
    raw: np.ndarray  # pre-clamp echo
    intermediates: IntermediateMaps | None  # absent for the baseline
    params: ParamMaps | None


def render_novel_view(
    ckpt: Checkpoint, pose: np.ndarray, frame_spec: FrameSpec | None = None, mode: str = "expected", seed: int = 0, frame_id: int = 0
) -> View:
    spec = frame_spec or ckpt.frame_spec
    pts = ckpt.bounds.normalize(geo.frame_points(geo.validate_pose(pose), spec).reshape(-1, 3)).astype(np.float32)
    cfg = replace(ckpt.render, mode=mode, seed=seed, axial_spacing=spec.axial_spacing)
    with dc.no_grad():
        E, inter, maps = _render_points(pts, ckpt.weights, ckpt, spec.shape, cfg, frame_id)
    return View(
        to_image(E),
        E.data,
        IntermediateMaps(*(t.data for t in inter)) if inter is not None else None,
        ParamMaps(*(t.data for t in maps)) if maps is not None else None,
    )


def decompose(ckpt: Checkpoint, pose: np.ndarray, frame_spec: FrameSpec | None = None) -> dict[str, np.ndarray]:
    """The five regressed parameter maps over a view grid (ultra checkpoints only)."""
    if not ckpt.is_ultra:
        raise CheckpointError("decomposition needs an ultra checkpoint; the baseline has no tissue parameters")
    view = render_novel_view(ckpt, pose, frame_spec)
    return dict(zip(inr.PARAM_NAMES, view.params))


def evaluate(ckpt: Checkpoint, sweeps: Sequence[Sweep]) -> list[dict]:
    """Render every pose of every sweep in expected mode and score it against the stored frame."""
    rows = []
    for s in sweeps:
        if s.frames and s.frames[0].shape != ckpt.frame_spec.shape:
            raise dc.ShapeError("evaluate", s.frames[0].shape, ckpt.frame_spec.shape, detail="dataset vs checkpoint frame spec")
        rendered = [render_novel_view(ckpt, p).image for p in s.poses]
        stats = sweep_ssim_stats(rendered, s.frames)
        rows.append(
            {
                "sweep": s.sweep_id,
                "view": s.view_kind,
                "frames": len(s.frames),
                "median_ssim": stats["median"],
                "mean_ssim": stats["mean"],
                "per_frame": stats["per_frame"],
            }
        )
    return rows


def write_table(path: str | Path, rows: Sequence[dict]) -> None:
    lines = ["sweep\tview\tframes\tmedian_ssim\tmean_ssim"]
    lines += [f"{r['sweep']}\t{r['view']}\t{r['frames']}\t{r['median_ssim']:.6f}\t{r['mean_ssim']:.6f}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
