"""Classifier-free guidance with a cosine, uncertainty-adaptive scale."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import _check_pair, _coef
from .schedules import NoiseSchedule


@dataclass(frozen=True)
class GuidanceConfig:
    w_min: float = 0.1
    w_max_base: float = 1.0
    t_c: float = 50.0

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.w_min, self.w_max_base, self.t_c)):
            raise ValueError("guidance parameters must be finite")
        if self.w_min > self.w_max_base:
            raise ValueError("w_min must not exceed w_max_base")
        if self.t_c <= 0:
            raise ValueError("t_c must be positive")


def v_to_eps(s: NoiseSchedule, x_t, v, t) -> np.ndarray:
    """Map a velocity prediction to a noise prediction: ``sigma_t x_t + a_t v``."""
    x_t, v = _check_pair(x_t, v, ("x_t", "v"))
    s.check_t(t)
    return _coef(s.sigma, t, x_t) * x_t + _coef(s.a, t, x_t) * v


def cfg_combine(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """``(1 + w) eps_cond - w eps_uncond``."""
    eps_cond, eps_uncond = _check_pair(eps_cond, eps_uncond, ("eps_cond", "eps_uncond"))
    if not math.isfinite(w):
        raise ValueError(f"guidance scale must be finite, got {w}")
    return (1.0 + w) * eps_cond - w * eps_uncond


def w_max(delta: float, cfg: GuidanceConfig) -> float:
    """Peak guidance weight, shrinking linearly to zero as ``delta`` reaches ``t_c``."""
    if delta < 0 or math.isnan(delta):
        raise ValueError(f"delta must be non-negative, got {delta}")
    return cfg.w_max_base * (1.0 - min(delta, cfg.t_c) / cfg.t_c)


def guidance_scale(t: int, T: int, delta: float, cfg: GuidanceConfig) -> float:
    """Cosine ramp from ``w_min`` at ``t = 0`` to ``w_max(delta)`` at ``t = T``.

    ``t`` is the position in the full training schedule, not the index into
    a DDIM subset. No clamping is applied when ``w_max(delta) < w_min``.
    """
    if not 0 <= t <= T:
        raise ValueError(f"t must lie in [0, {T}], got {t}")
    ramp = (1.0 - math.cos(math.pi * t / T)) / 2.0
    return cfg.w_min + (w_max(delta, cfg) - cfg.w_min) * ramp
