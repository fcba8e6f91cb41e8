"""Differentiable ray-based ultrasound B-mode rendering.

Per scan-line the echo is the sum of a reflection term at tissue borders and
a backscatter term from sub-resolution scatterers, both scaled by the energy
still travelling along the line::

    I(t) = I0 * prod_{n<t} (1 - beta(n) G(n)) * exp(-sum_{n<t} alpha(n) f dt)
    R(t) = |I(t) beta(t)| * (PSF (x) G)(t)
    B(t) = I(t) * (PSF (x) T)(t),   T = H * phi
    E(t) = R(t) + B(t)

G and H are border/scatterer indicators drawn from the border probability
and scattering density maps. All maps are ``W x D`` (scan-lines by depth).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

MODES = ("hard", "relaxed", "expected")
PROB_TOL = 1e-6

# stream ids for the counter-based generator
BORDER, SCATTER, AMPLITUDE = 0, 1, 2


def gaussian_psf(size: tuple[int, int] = (5, 5), sigma_lateral: float = 1.0, sigma_axial: float = 0.75) -> np.ndarray:
    """Separable Gaussian point-spread function normalized to unit sum."""
    if size[0] % 2 == 0 or size[1] % 2 == 0:
        raise ValueError(f"PSF size must be odd, got {size}")
    lat = np.arange(size[0]) - size[0] // 2
    ax = np.arange(size[1]) - size[1] // 2
    kernel = np.outer(np.exp(-(lat**2) / (2 * sigma_lateral**2)), np.exp(-(ax**2) / (2 * sigma_axial**2)))
    return kernel / kernel.sum()


def identity_psf() -> np.ndarray:
    return np.ones((1, 1))


@dataclass(frozen=True, eq=False)
class RenderConfig:
    axial_spacing: float = 0.5  # dt in mm
    frequency: float = 1.0
    i0: float = 1.0
    psf: np.ndarray = field(default_factory=gaussian_psf)
    mode: str = "hard"
    temperature: float = 0.1
    seed: int = 0
    scatter_noise: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"sampling mode must be one of {MODES}, got {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("relaxed-Bernoulli temperature must be positive")
        psf = np.asarray(self.psf, dtype=np.float64)
        if psf.ndim != 2 or psf.shape[0] % 2 == 0 or psf.shape[1] % 2 == 0:
            raise ValueError(f"PSF must be a 2-D kernel with odd sides, got shape {psf.shape}")
        if np.any(psf < 0) or abs(psf.sum() - 1) > 1e-6:
            raise ValueError("PSF entries must be non-negative and sum to 1")
        object.__setattr__(self, "psf", psf)

    def with_mode(self, mode: str) -> "RenderConfig":
        return replace(self, mode=mode)


class ParamMaps(NamedTuple):
    alpha: object
    beta: object
    rho_b: object
    rho_s: object
    phi: object


class IntermediateMaps(NamedTuple):
    G: Tensor
    H: Tensor
    T: Tensor
    I: Tensor
    R: Tensor
    B: Tensor


def stream(seed: int, frame_id: int, kind: int) -> np.random.Generator:
    """Counter-based random stream keyed by (seed, frame, map kind).

    Element k of a draw always comes from counter position k, so results do
    not depend on which worker renders which frame.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, frame_id, kind])))


def _check_prob(p: Tensor) -> None:
    lo, hi = float(p.data.min()), float(p.data.max())
    if lo < -PROB_TOL or hi > 1 + PROB_TOL:
        raise ValueError(f"probabilities must lie in [0, 1], got range [{lo}, {hi}]")


def sample_indicator(prob, mode: str, rng: np.random.Generator | None = None, temperature: float = 0.1) -> Tensor:
    """Border/scatterer indicator from a probability map.

    ``hard`` draws Bernoulli samples and passes gradients straight through
    to ``prob``; ``relaxed`` draws a binary-concrete sample at the given
    temperature; ``expected`` returns ``prob`` itself.
    """
    prob = dc.as_tensor(prob)
    _check_prob(prob)
    if mode == "expected":
        return prob
    if rng is None:
        raise ValueError(f"{mode} sampling needs a random stream")
    u = rng.random(prob.shape)
    if mode == "hard":
        return dc.straight_through(prob, (u < prob.data).astype(prob.dtype))
    if mode == "relaxed":
        u = np.clip(u, 1e-6, 1 - 1e-6)
        noise = np.log(u) - np.log1p(-u)
        logit = dc.log(prob) - dc.log(1.0 - prob)
        return dc.sigmoid((logit + noise.astype(prob.dtype)) * (1.0 / temperature))
    raise ValueError(f"unknown sampling mode {mode!r}")


def scatter_template(H, phi, rng: np.random.Generator | None = None, noise: bool = False) -> Tensor:
    """T = H * amplitude, the amplitude being phi (or phi plus unit normal noise)."""
    H, phi = dc.as_tensor(H), dc.as_tensor(phi)
    if H.shape != phi.shape:
        raise dc.ShapeError("scatter_template", H.shape, phi.shape)
    amp = phi
    if noise:
        if rng is None:
            raise ValueError("amplitude noise needs a random stream")
        amp = phi + rng.standard_normal(phi.shape).astype(phi.dtype)
    return H * amp


def transmission(beta, G, alpha, cfg: RenderConfig) -> Tensor:
    """Remaining energy per sample, exclusive along depth so I(r, 0) = I0."""
    beta, G, alpha = dc.as_tensor(beta), dc.as_tensor(G), dc.as_tensor(alpha)
    step = (1.0 - beta * G) * dc.exp(alpha * (-cfg.frequency * cfg.axial_spacing))
    return dc.cumprod(step, exclusive=True) * cfg.i0


def reflection_term(I, beta, G, psf: np.ndarray) -> Tensor:
    return dc.tabs(dc.as_tensor(I) * beta) * dc.conv2d_same(G, psf)


def backscatter_term(I, T, psf: np.ndarray) -> Tensor:
    return dc.as_tensor(I) * dc.conv2d_same(T, psf)


def render_frame(params: ParamMaps, cfg: RenderConfig, frame_id: int = 0) -> tuple[Tensor, IntermediateMaps]:
    """Render one B-mode frame (pre-clamp) plus its intermediate maps."""
    maps = ParamMaps(*(dc.as_tensor(m) for m in params))
    shape = maps.alpha.shape
    if len(shape) != 2 or any(m.shape != shape for m in maps):
        raise dc.ShapeError("render_frame", *(m.shape for m in maps), detail="all five maps must share one W x D shape")
    if float(maps.alpha.data.min(initial=0.0)) < 0:
        raise ValueError("attenuation must be non-negative")
    stochastic = cfg.mode != "expected"
    G = sample_indicator(maps.rho_b, cfg.mode, stream(cfg.seed, frame_id, BORDER) if stochastic else None, cfg.temperature)
    H = sample_indicator(maps.rho_s, cfg.mode, stream(cfg.seed, frame_id, SCATTER) if stochastic else None, cfg.temperature)
    T = scatter_template(
        H, maps.phi, stream(cfg.seed, frame_id, AMPLITUDE) if cfg.scatter_noise else None, noise=cfg.scatter_noise
    )
    I = transmission(maps.beta, G, maps.alpha, cfg)
    R = reflection_term(I, maps.beta, G, cfg.psf)
    B = backscatter_term(I, T, cfg.psf)
    return R + B, IntermediateMaps(G, H, T, I, R, B)


def to_image(E) -> np.ndarray:
    """Export clamp to [0, 1]; never used on the loss path."""
    data = E.data if isinstance(E, Tensor) else np.asarray(E)
    return np.clip(data, 0.0, 1.0)
