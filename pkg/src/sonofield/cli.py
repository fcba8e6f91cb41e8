"""Command-line entry point.

Every subcommand resolves its options as flags > config file > defaults,
prints the resolved ``key=value`` set to stderr and exits 0 on success, 1 on
invalid input and 2 when the work itself fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import compounding, dataio, gradsuite, phantom, plotting
from . import geometry as geo
from . import trainer as tr
from .renderer import MODES, RenderConfig

log = logging.getLogger("sonofield")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config keys or input paths; detected before any work starts."""


# ----------------------------------------------------------------------------
# option tables


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(float(v) for v in text.split(",")) if text else ()


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise ValueError(f"expected a positive integer, got {text}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise ValueError(f"expected a non-negative integer, got {text}")
    return v


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    parse.__name__ = "choice"
    return parse


def _show(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_show(v) for v in value)
    return "" if value is None else str(value)


@dataclass(frozen=True)
class Opt:
    name: str  # flag and config key, dashed
    parse: Callable[[str], Any]
    default: Any
    help: str
    required: bool = False


COMMON = [Opt("threads", _positive_int, 1, "cap on BLAS/OpenMP worker threads")]

OPTIONS: dict[str, tuple[str, list[Opt]]] = {
    "simulate": (
        "render a procedural phantom into a tracked-sweep dataset",
        [
            Opt("phantom", str, None, "phantom spec (JSON); default is the layered reflector phantom"),
            Opt("out", str, None, "output dataset directory", required=True),
            Opt("seed", int, 0, "sampling seed"),
            Opt("sweeps", _non_negative_int, None, "number of training sweeps (first N tilts); default all"),
            Opt("tilt", _floats, (10.0, -10.0, 20.0, -20.0), "comma-separated training tilts in degrees"),
            Opt("test-tilt", _floats, (0.0, 15.0, -15.0), "comma-separated test tilts in degrees (0 is perpendicular)"),
            Opt("frames", _positive_int, 50, "frames per sweep"),
            Opt("width", _positive_int, 64, "scan-lines per frame"),
            Opt("depth", _positive_int, 96, "samples per scan-line"),
            Opt("spacing", float, 0.5, "lateral and axial pixel spacing in mm"),
            Opt("resolution", float, 0.5, "phantom voxel size in mm"),
            Opt("half-length", float, 10.0, "half extent along the sweep direction in mm"),
            Opt("mode", _choice(*MODES), "hard", "border/scatterer sampling mode"),
        ],
    ),
    "train": (
        "fit a field (ultra) or intensity network (baseline) to a dataset's training sweeps",
        [
            Opt("data", str, None, "dataset directory", required=True),
            Opt("out", str, None, "checkpoint path", required=True),
            Opt("variant", _choice(*tr.VARIANTS), "ultra", "model variant"),
            Opt("iters", _non_negative_int, 20000, "training iterations"),
            Opt("seed", int, 0, "initialization, ordering and sampling seed"),
            Opt("lambda", float, 0.9, "weight of the SSIM term in the loss"),
            Opt("lr", float, 5e-4, "initial Adam learning rate"),
            Opt("halve-every", _positive_int, 2500, "iterations per learning-rate halving"),
            Opt("batch", _positive_int, 1, "frames per iteration"),
            Opt("mode", _choice(*MODES), "hard", "sampling mode while training"),
            Opt("temperature", float, 0.1, "relaxed-Bernoulli temperature"),
            Opt("width", _positive_int, 256, "hidden units per layer"),
            Opt("layers", _positive_int, 8, "hidden layers"),
            Opt("skip", _positive_int, 5, "layer that receives the encoded input again"),
            Opt("frequencies", _non_negative_int, 10, "positional-encoding frequencies"),
            Opt("border-bias", float, 0.0, "initial border-probability logit"),
            Opt("checkpoint-every", _non_negative_int, 0, "write <out>.<iteration> every N iterations (0 = off)"),
        ],
    ),
    "render": (
        "render novel views from a checkpoint",
        [
            Opt("ckpt", str, None, "checkpoint path", required=True),
            Opt("pose-file", str, None, "poses, one 4x4 row-major matrix per line", required=True),
            Opt("out", str, None, "output PGM; several poses write <stem>_<i>.pgm", required=True),
            Opt("mode", _choice(*MODES), "expected", "sampling mode"),
            Opt("seed", int, 0, "sampling seed for hard/relaxed modes"),
        ],
    ),
    "eval": (
        "score rendered views against a dataset's sweeps (SSIM table plus plot)",
        [
            Opt("ckpt", str, None, "checkpoint path", required=True),
            Opt("data", str, None, "dataset directory", required=True),
            Opt("out", str, None, "output table (.tsv); a .png plot is written next to it", required=True),
            Opt("split", _choice("test", "train", "all"), "test", "which sweeps to evaluate"),
        ],
    ),
    "decompose": (
        "export the regressed tissue parameter maps at given poses",
        [
            Opt("ckpt", str, None, "ultra checkpoint path", required=True),
            Opt("pose-file", str, None, "poses, one 4x4 row-major matrix per line", required=True),
            Opt("out-dir", str, None, "output directory", required=True),
        ],
    ),
    "compound": (
        "splat dataset frames into a voxel volume",
        [
            Opt("data", str, None, "dataset directory", required=True),
            Opt("out", str, None, "output raw volume; header goes to <out>.hdr", required=True),
            Opt("exclude-sweeps", _names, (), "comma-separated sweep ids to leave out"),
            Opt("spacing", float, 0.5, "voxel size in mm"),
            Opt("mode", _choice(*compounding.COMPOUND_MODES), "mean", "per-voxel reduction"),
        ],
    ),
    "slice": (
        "resample a compounded volume at given poses",
        [
            Opt("vol", str, None, "raw volume (with .hdr header)", required=True),
            Opt("pose-file", str, None, "poses, one 4x4 row-major matrix per line", required=True),
            Opt("out", str, None, "output PGM; several poses write <stem>_<i>.pgm", required=True),
            Opt("width", _positive_int, 64, "scan-lines per frame"),
            Opt("depth", _positive_int, 96, "samples per scan-line"),
            Opt("spacing", float, 0.5, "lateral and axial pixel spacing in mm"),
        ],
    ),
    "gradcheck": (
        "finite-difference check of every differentiable operation and the render pipeline",
        [
            Opt("points", _positive_int, 5, "random points per operation"),
            Opt("seed", int, 0, "point sampling seed"),
        ],
    ),
}


def _key(name: str) -> str:
    return name.replace("-", "_")


def _options(command: str) -> list[Opt]:
    return OPTIONS[command][1] + COMMON


# ----------------------------------------------------------------------------
# parsing and resolution


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sonofield", description="Ultrasound neural field toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for command, (summary, _) in OPTIONS.items():
        p = sub.add_parser(command, help=summary, description=summary)
        p.add_argument("--config", help="text file of key=value lines; flags override it")
        for opt in _options(command):
            req = " (required)" if opt.required else ""
            default = "" if opt.default is None else f" [default: {_show(opt.default)}]"
            # raw strings here; parsed in resolve() so file and flag values share one path
            p.add_argument(f"--{opt.name}", dest=_key(opt.name), default=argparse.SUPPRESS, help=opt.help + req + default)
    return parser


def read_config(path: str | Path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def resolve(command: str, flags: dict[str, str], file_values: dict[str, str] | None = None) -> dict[str, Any]:
    """Merge defaults, config-file values and flags (strings) into typed options."""
    opts = {_key(o.name): o for o in _options(command)}
    file_values = {_key(k): v for k, v in (file_values or {}).items()}
    unknown = sorted(set(file_values) - set(opts))
    if unknown:
        raise UsageError(f"{command}: unknown config key(s): {', '.join(k.replace('_', '-') for k in unknown)}")
    resolved = {}
    for key, opt in opts.items():
        raw = flags.get(key, file_values.get(key))
        if raw is None:
            if opt.required:
                raise UsageError(f"{command}: --{opt.name} is required")
            resolved[key] = opt.default
            continue
        try:
            resolved[key] = opt.parse(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise UsageError(f"{command}: bad value for --{opt.name}: {exc}") from None
    return resolved


def format_config(command: str, cfg: dict[str, Any]) -> str:
    """The resolved options as a config file; reading it back resolves to the same values."""
    lines = [f"# sonofield {command}"]
    lines += [f"{k.replace('_', '-')}={_show(v)}" for k, v in cfg.items() if v is not None]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# validation helpers


def _need_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")


def _need_dir(path: str, what: str) -> None:
    if not Path(path).is_dir():
        raise UsageError(f"{what} {path} does not exist")


def _need_parent(path: str) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")


def _frame_spec(cfg: dict) -> geo.FrameSpec:
    try:
        return geo.FrameSpec(cfg["width"], cfg["depth"], cfg["spacing"], cfg["spacing"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _indexed(out: str, i: int, n: int) -> Path:
    p = Path(out)
    return p if n == 1 else p.with_name(f"{p.stem}_{i:04d}{p.suffix or '.pgm'}")


# ----------------------------------------------------------------------------
# subcommands; each returns a "work" callable after validating its inputs


def _simulate(cfg: dict):
    spec = _frame_spec(cfg)
    tilts = cfg["tilt"]
    if cfg["sweeps"] is not None:
        if cfg["sweeps"] > len(tilts):
            raise UsageError(f"--sweeps {cfg['sweeps']} exceeds the {len(tilts)} listed tilts")
        tilts = tilts[: cfg["sweeps"]]
    if any(abs(t) > 45 for t in tilts + cfg["test_tilt"]):
        raise UsageError("tilts must lie within +-45 degrees")
    if cfg["resolution"] <= 0 or cfg["half_length"] <= 0:
        raise UsageError("--resolution and --half-length must be positive")
    if cfg["phantom"] is not None:
        _need_file(cfg["phantom"], "phantom spec")

    def work():
        pspec = phantom.load_phantom_spec(cfg["phantom"]) if cfg["phantom"] else phantom.layered_reflector_phantom()
        vol = phantom.build_phantom(pspec, cfg["resolution"])
        traj = phantom.default_trajectories(spec, cfg["frames"], tilts, cfg["test_tilt"], cfg["half_length"])
        render = RenderConfig(axial_spacing=spec.axial_spacing, mode=cfg["mode"], seed=cfg["seed"])
        sweeps = phantom.simulate_dataset(vol, traj, spec, render)
        scale = max(1.0, float(vol.channel("alpha").max()))
        dataio.save_dataset(cfg["out"], dataio.Dataset(spec, sweeps, scale))
        log.info("wrote %d sweeps to %s", len(sweeps), cfg["out"])

    return work


def _train(cfg: dict):
    _need_dir(cfg["data"], "dataset")
    _need_parent(cfg["out"])
    try:
        tcfg = tr.TrainConfig(
            variant=cfg["variant"],
            iterations=cfg["iters"],
            frames_per_batch=cfg["batch"],
            lr=cfg["lr"],
            halve_every=cfg["halve_every"],
            lam=cfg["lambda"],
            seed=cfg["seed"],
            mode=cfg["mode"],
            temperature=cfg["temperature"],
            checkpoint_every=cfg["checkpoint_every"],
            width=cfg["width"],
            depth=cfg["layers"],
            skip=cfg["skip"],
            frequencies=cfg["frequencies"],
            border_bias=cfg["border_bias"],
        )
        tcfg.model_configs()
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def work():
        ds = dataio.load_dataset(cfg["data"], with_gt=False)
        out = cfg["out"]

        def on_checkpoint(ck):
            tr.save_checkpoint(f"{out}.{ck.iteration}", ck)

        ckpt, losses = tr.train(ds.split("train"), ds.frame_spec, tcfg, on_checkpoint=on_checkpoint)
        tr.save_checkpoint(out, ckpt)
        if losses:
            log.info("final loss %.6f after %d iterations", losses[-1], len(losses))

    return work


def _render(cfg: dict):
    _need_file(cfg["ckpt"], "checkpoint")
    _need_file(cfg["pose_file"], "pose file")
    _need_parent(cfg["out"])

    def work():
        ckpt = tr.load_checkpoint(cfg["ckpt"])
        poses = geo.read_poses(cfg["pose_file"])
        for i, pose in enumerate(poses):
            view = tr.render_novel_view(ckpt, pose, mode=cfg["mode"], seed=cfg["seed"], frame_id=i)
            dataio.write_pgm(_indexed(cfg["out"], i, len(poses)), view.image)

    return work


def _eval(cfg: dict):
    _need_file(cfg["ckpt"], "checkpoint")
    _need_dir(cfg["data"], "dataset")
    _need_parent(cfg["out"])

    def work():
        ckpt = tr.load_checkpoint(cfg["ckpt"])
        ds = dataio.load_dataset(cfg["data"], with_gt=False)
        sweeps = ds.sweeps if cfg["split"] == "all" else ds.split(cfg["split"])
        if not sweeps:
            raise dataio.DatasetError(f"{cfg['data']}: no {cfg['split']} sweeps")
        rows = tr.evaluate(ckpt, sweeps)
        tr.write_table(cfg["out"], rows)
        plotting.plot_eval(rows, Path(cfg["out"]).with_suffix(".png"))
        sys.stdout.write(Path(cfg["out"]).read_text())

    return work


def _decompose(cfg: dict):
    _need_file(cfg["ckpt"], "checkpoint")
    _need_file(cfg["pose_file"], "pose file")

    def work():
        ckpt = tr.load_checkpoint(cfg["ckpt"])
        poses = geo.read_poses(cfg["pose_file"])
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        for i, pose in enumerate(poses):
            maps = tr.decompose(ckpt, pose)
            ranges = []
            for name, m in maps.items():
                lo, hi = float(m.min()), float(m.max())
                # each map is stretched to the 8-bit range; the sidecar restores units
                dataio.write_pgm(out / f"frame_{i:04d}_{name}.pgm", (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m))
                ranges.append(f"{name}\t{lo!r}\t{hi!r}")
            (out / f"frame_{i:04d}_ranges.tsv").write_text("map\tmin\tmax\n" + "\n".join(ranges) + "\n")
            image = tr.render_novel_view(ckpt, pose).image
            plotting.plot_maps(maps, out / f"frame_{i:04d}_maps.png", image=image)

    return work


def _compound(cfg: dict):
    _need_dir(cfg["data"], "dataset")
    _need_parent(cfg["out"])
    if cfg["spacing"] <= 0:
        raise UsageError("--spacing must be positive")

    def work():
        ds = dataio.load_dataset(cfg["data"], with_gt=False)
        missing = set(cfg["exclude_sweeps"]) - {s.sweep_id for s in ds.sweeps}
        if missing:
            raise dataio.DatasetError(f"{cfg['data']}: no sweep(s) named {', '.join(sorted(missing))}")
        sweeps = ds.without(cfg["exclude_sweeps"])
        vol = compounding.compound([(s.frames, s.poses) for s in sweeps], ds.frame_spec, cfg["spacing"], cfg["mode"])
        compounding.save_volume(cfg["out"], vol)
        log.info("volume %s from %d sweeps", vol.data.shape, len(sweeps))

    return work


def _slice(cfg: dict):
    spec = _frame_spec(cfg)
    _need_file(cfg["vol"], "volume")
    _need_file(cfg["pose_file"], "pose file")
    _need_parent(cfg["out"])

    def work():
        vol = compounding.load_volume(cfg["vol"])
        poses = geo.read_poses(cfg["pose_file"])
        for i, pose in enumerate(poses):
            frame = compounding.slice_volume(vol, geo.validate_pose(pose), spec)
            dataio.write_pgm(_indexed(cfg["out"], i, len(poses)), frame)

    return work


class _ChecksFailed(Exception):
    pass


def _gradcheck(cfg: dict):
    def work():
        results = gradsuite.run(points=cfg["points"], seed=cfg["seed"])
        print(gradsuite.format_results(results))
        failed = [r for r in results if not r.passed]
        if failed:
            raise _ChecksFailed(f"{len(failed)} gradient check(s) failed")

    return work


COMMANDS = {
    "simulate": _simulate,
    "train": _train,
    "render": _render,
    "eval": _eval,
    "decompose": _decompose,
    "compound": _compound,
    "slice": _slice,
    "gradcheck": _gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        ns = vars(parser.parse_args(argv))
        command = ns.pop("command")
        if command is None:
            raise UsageError("no command given")
        config_path = ns.pop("config", None)
        file_values = {}
        if config_path is not None:
            _need_file(config_path, "config file")
            file_values = read_config(config_path)
        cfg = resolve(command, ns, file_values)
        sys.stderr.write(format_config(command, cfg))
        work = COMMANDS[command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        with threadpool_limits(limits=cfg["threads"]):
            work()
    except _ChecksFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        # dataset, checkpoint, pose and training errors all derive from these
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
