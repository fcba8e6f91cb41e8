"""SSIM, L2 and the combined training loss; per-sweep SSIM statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.9
    ssim: SsimConfig = SsimConfig()

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"loss weight must lie in [0, 1], got {self.lam}")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def window_size(shape: tuple[int, ...], cfg: SsimConfig) -> int:
    """Configured window, shrunk to the largest odd size that fits the image."""
    fit = min(cfg.window, *shape)
    return fit if fit % 2 else fit - 1


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise dc.ShapeError(op, a.shape, b.shape)


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> tuple[Tensor, Tensor]:
    """Mean SSIM and the per-window SSIM map over fully contained windows.

    Differentiable with respect to both inputs.
    """
    a, b = dc.lift(a, b)
    _same_shape("ssim", a, b)
    win = gaussian_window(window_size(a.shape, cfg), cfg.sigma)

    def blur(x):
        return dc.conv2d(x, win, "valid")

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = blur(a * a) - mu_aa
    var_b = blur(b * b) - mu_bb
    cov = blur(a * b) - mu_ab
    num = (2.0 * mu_ab + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mu_aa + mu_bb + cfg.c1) * (var_a + var_b + cfg.c2)
    smap = num / den
    return dc.tmean(smap), smap


def l2(a, b) -> Tensor:
    a, b = dc.lift(a, b)
    _same_shape("l2", a, b)
    return dc.tmean(dc.square(a - b))


def combined_loss(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """lam * (1 - SSIM) + (1 - lam) * mean squared error; zero at pred == target."""
    pred, target = dc.lift(pred, target)
    _same_shape("combined_loss", pred, target)
    s, _ = ssim(pred, target, cfg.ssim)
    return (1.0 - s) * cfg.lam + l2(pred, target) * (1.0 - cfg.lam)


def ssim_value(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> float:
    """Plain float SSIM for evaluation (computed in 64-bit, no record)."""
    with dc.no_grad():
        s, _ = ssim(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), cfg)
    return float(s.data)


def sweep_ssim_stats(rendered: Sequence[np.ndarray], reference: Sequence[np.ndarray], cfg: SsimConfig = SsimConfig()) -> dict:
    if len(rendered) != len(reference):
        raise ValueError(f"frame count mismatch: {len(rendered)} rendered vs {len(reference)} reference")
    if not rendered:
        raise ValueError("empty sweep")
    per_frame = [ssim_value(r, t, cfg) for r, t in zip(rendered, reference)]
    return {"median": float(np.median(per_frame)), "mean": float(np.mean(per_frame)), "per_frame": per_frame}
