"""Finite-difference gradient checks over every differentiable operation and
the field -> render -> loss pipeline.

Each check projects the operation output onto fixed random weights so the
scalar being differentiated touches every output element.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import diffcore as dc
from . import inr
from .lossmetrics import LossConfig, combined_loss
from .renderer import ParamMaps, RenderConfig, render_frame

TOLERANCE = {np.float32: 1e-3, np.float64: 1e-5}
# components smaller than this fraction of an input's largest gradient sit
# below the resolution of the central difference and are compared absolutely
REL_FLOOR = 1e-4
PRECISIONS = (np.float32, np.float64)


@dataclass(frozen=True)
class CheckResult:
    name: str
    precision: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tolerance


def _away_from_zero(rng: np.random.Generator, shape, lo=0.2, hi=1.5) -> np.ndarray:
    # kinks (abs, relu) and poles (div, log) are kept out of the FD stencil
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _projected(fn: Callable, out_shape, rng) -> Callable:
    w = rng.standard_normal(out_shape)

    def f(ts):
        out = fn(ts)
        return dc.tsum(out * w.astype(out.dtype))

    return f


def op_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, list[np.ndarray]]]:
    """(name, scalar function of tensors, point) for each registered operation."""
    shape = (3, 4)
    pos = lambda: rng.uniform(0.2, 1.5, shape)  # noqa: E731
    signed = lambda: _away_from_zero(rng, shape)  # noqa: E731

    unary_inputs = {"log-safe": pos, "abs": signed, "relu": signed}
    for kind in ("neg", "exp", "log-safe", "sin", "cos", "abs", "relu", "sigmoid", "square"):
        make = unary_inputs.get(kind, lambda: rng.standard_normal(shape))
        yield kind, _projected(lambda t, k=kind: dc.elementwise(k, t[0]), shape, rng), [make()]
    for kind in ("add", "sub", "mul"):
        yield kind, _projected(lambda t, k=kind: dc.elementwise(k, t[0], t[1]), shape, rng), [
            rng.standard_normal(shape),
            rng.standard_normal(shape),
        ]
    yield "div", _projected(lambda t: dc.div(t[0], t[1]), shape, rng), [rng.standard_normal(shape), signed()]
    yield "broadcast-mul", _projected(lambda t: t[0] * t[1], shape, rng), [
        rng.standard_normal(shape),
        rng.standard_normal(shape[1]),
    ]
    yield "sum", lambda t: dc.tsum(t[0]) * 0.5, [rng.standard_normal(shape)]
    yield "mean", lambda t: dc.tmean(t[0] * t[0]), [rng.standard_normal(shape)]
    yield "reshape", _projected(lambda t: dc.reshape(t[0], (4, 3)), (4, 3), rng), [rng.standard_normal(shape)]
    yield "transpose", _projected(lambda t: dc.transpose(t[0]), (4, 3), rng), [rng.standard_normal(shape)]
    yield "getitem", _projected(lambda t: t[0][:, 1], (3,), rng), [rng.standard_normal(shape)]
    yield "matmul", _projected(lambda t: t[0] @ t[1], (3, 2), rng), [
        rng.standard_normal(shape),
        rng.standard_normal((4, 2)),
    ]
    yield "concat", _projected(lambda t: dc.concat([t[0], t[1]], axis=1), (3, 6), rng), [
        rng.standard_normal(shape),
        rng.standard_normal((3, 2)),
    ]
    for exclusive in (True, False):
        yield f"cumprod-{'exclusive' if exclusive else 'inclusive'}", _projected(
            lambda t, e=exclusive: dc.cumprod(t[0], e), (4, 6), rng
        ), [rng.uniform(0.3, 1.2, (4, 6))]
    kernel = rng.random((3, 5))
    for mode, out in (("same", (6, 8)), ("valid", (4, 4))):
        yield f"conv2d-{mode}", _projected(lambda t, m=mode: dc.conv2d(t[0], kernel, m), out, rng), [
            rng.standard_normal((6, 8))
        ]


def random_maps(rng: np.random.Generator, shape=(8, 12)) -> list[np.ndarray]:
    """Interior-valued parameter maps so relaxed logits stay finite under perturbation."""
    return [
        rng.uniform(0.0, 0.1, shape),
        rng.uniform(0.05, 0.9, shape),
        rng.uniform(0.05, 0.95, shape),
        rng.uniform(0.05, 0.95, shape),
        rng.uniform(0.05, 0.95, shape),
    ]


def render_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, list[np.ndarray]]]:
    for mode in ("expected", "relaxed"):
        cfg = RenderConfig(mode=mode, temperature=0.5, seed=int(rng.integers(1 << 16)))
        yield f"render-{mode}", lambda t, c=cfg: dc.tsum(render_frame(ParamMaps(*t), c)[0]), random_maps(rng)


def pipeline_case(rng: np.random.Generator, shape=(8, 12)):
    """Small field queried over one frame, rendered in expected mode, scored against a random target."""
    enc = inr.EncodingConfig(frequencies=2)
    mlp = inr.MlpConfig(width=12, depth=3, skip=2)
    weights = inr.init_weights(int(rng.integers(1 << 16)), enc, mlp, dtype=np.float64)
    # a positive attenuation bias keeps abs() away from its kink
    weights[-1] = weights[-1] + np.array([0.05, 0.0, 0.0, 0.0, 0.0])
    points = rng.uniform(-1, 1, (shape[0] * shape[1], 3))
    target = rng.uniform(0, 0.6, shape)
    cfg = RenderConfig(mode="expected")
    loss_cfg = LossConfig(lam=0.9)

    def f(ts):
        tissue = inr.field_query(points, ts, enc, mlp)
        maps = ParamMaps(*(m.reshape(shape) for m in tissue))
        E, _ = render_frame(maps, cfg)
        return combined_loss(E, dc.Tensor(target, dtype=E.dtype), loss_cfg)

    return "field-render-loss", f, weights


def run(points: int = 5, seed: int = 0, epsilon: float = 1e-5, include_pipeline: bool = True) -> list[CheckResult]:
    """Every case at every precision; ``points`` random points per operation."""
    results = []
    for dtype in PRECISIONS:
        rng = np.random.default_rng(seed)
        worst: dict[str, float] = {}
        for _ in range(points):
            for name, f, point in list(op_cases(rng)) + list(render_cases(rng)):
                err = dc.gradcheck(f, point, epsilon, dtype=dtype, rel_floor=REL_FLOOR)
                worst[name] = max(worst.get(name, 0.0), err)
        if include_pipeline:
            name, f, point = pipeline_case(rng)
            worst[name] = dc.gradcheck(f, point, epsilon, dtype=dtype, rel_floor=REL_FLOOR)
        label = np.dtype(dtype).name
        results.extend(CheckResult(n, label, e, TOLERANCE[dtype]) for n, e in worst.items())
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'check':<22} {'precision':<9} {'max-rel-err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<22} {r.precision:<9} {r.error:12.3e} {r.tolerance:8.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
