"""Forward noising, velocity parameterisation algebra and reverse updates.

Shapes are free: every function broadcasts elementwise. ``t`` may be a
scalar or a per-row integer array, in which case the schedule coefficients
are reshaped to broadcast against the leading axis of the signal.
"""

from __future__ import annotations

import numpy as np

from .schedules import NoiseSchedule

_SIGMA_DIVISION_FLOOR = 1e-6


def _coef(values: np.ndarray, t, like: np.ndarray) -> np.ndarray | float:
    """Schedule coefficient at ``t`` shaped to broadcast against ``like``."""
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        return float(values[int(t_arr)])
    out = values[t_arr]
    return out.reshape(out.shape + (1,) * (np.ndim(like) - out.ndim))


def _check_pair(x, y, names=("x0", "eps")) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {names[0]} {x.shape} vs {names[1]} {y.shape}")
    return x, y


def forward_noise(s: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """Sample ``x_t = a_t x0 + sigma_t eps`` in closed form."""
    x0, eps = _check_pair(x0, eps)
    s.check_t(t)
    return _coef(s.a, t, x0) * x0 + _coef(s.sigma, t, x0) * eps


def forward_chain(s: NoiseSchedule, x0, t: int, rng: np.random.Generator) -> np.ndarray:
    """Run the one-step Markov noising chain from ``x0`` for ``t`` steps."""
    x = np.asarray(x0, dtype=np.float64).copy()
    s.check_t(t)
    for k in range(1, int(t) + 1):
        x = np.sqrt(s.alpha[k]) * x + np.sqrt(1.0 - s.alpha[k]) * rng.standard_normal(x.shape)
    return x


def velocity_target(s: NoiseSchedule, x0, eps, t) -> np.ndarray:
    """``v_t = a_t eps - sigma_t x0``."""
    x0, eps = _check_pair(x0, eps)
    s.check_t(t)
    return _coef(s.a, t, x0) * eps - _coef(s.sigma, t, x0) * x0


def eps_from_x0(s: NoiseSchedule, x_t, x0_hat, t) -> np.ndarray:
    """Noise implied by a clean-signal estimate, ``(x_t - a_t x0) / sigma_t``."""
    x_t, x0_hat = _check_pair(x_t, x0_hat, ("x_t", "x0_hat"))
    s.check_t(t)
    return (x_t - _coef(s.a, t, x_t) * x0_hat) / _coef(s.sigma, t, x_t)


def recover_x0_eps(s: NoiseSchedule, x_t, v, t) -> tuple[np.ndarray, np.ndarray]:
    """Recover ``(x0, eps)`` from a noised signal and its velocity.

    Uses the division form for ``eps`` while ``sigma_t`` is comfortably
    positive and the algebraic form ``sigma_t x_t + a_t v`` otherwise.
    """
    x_t, v = _check_pair(x_t, v, ("x_t", "v"))
    s.check_t(t)
    a = _coef(s.a, t, x_t)
    sig = _coef(s.sigma, t, x_t)
    x0_hat = a * x_t - sig * v
    algebraic = sig * x_t + a * v
    if np.all(np.asarray(sig) > _SIGMA_DIVISION_FLOOR):
        eps_hat = (x_t - a * x0_hat) / sig
    else:
        safe = np.where(np.asarray(sig) > _SIGMA_DIVISION_FLOOR, sig, 1.0)
        eps_hat = np.where(np.asarray(sig) > _SIGMA_DIVISION_FLOOR, (x_t - a * x0_hat) / safe, algebraic)
    return x0_hat, eps_hat


def ddpm_step(s: NoiseSchedule, x_t, eps_hat, t: int, z) -> np.ndarray:
    """One ancestral DDPM update from ``t`` to ``t - 1``."""
    x_t, eps_hat = _check_pair(x_t, eps_hat, ("x_t", "eps_hat"))
    x_t, z = _check_pair(x_t, z, ("x_t", "z"))
    s.check_t(t)
    t = int(t)
    mean = (x_t - (1.0 - s.alpha[t]) / s.sigma[t] * eps_hat) / np.sqrt(s.alpha[t])
    return mean + np.sqrt(s.beta_tilde[t]) * z


def ddim_sigma(s: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    """Stochastic scale for a DDIM jump ``t -> t_prev`` (zero when ``eta = 0``)."""
    ab_t, ab_prev = s.alpha_bar[t], s.alpha_bar[t_prev]
    return float(eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev))


def ddim_step(s: NoiseSchedule, x_t, x0_hat, eps_hat, t: int, t_prev: int,
              eta: float = 0.0, noise=None) -> np.ndarray:
    """DDIM update from ``t`` to ``t_prev`` using the cumulative ``alpha_bar``."""
    x0_hat, eps_hat = _check_pair(x0_hat, eps_hat, ("x0_hat", "eps_hat"))
    s.check_t(t)
    s.check_t(t_prev, allow_zero=True)
    t, t_prev = int(t), int(t_prev)
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be below t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    sig = ddim_sigma(s, t, t_prev, eta)
    ab_prev = s.alpha_bar[t_prev]
    radicand = 1.0 - ab_prev - sig * sig
    if radicand < -1e-12:
        raise ValueError(f"DDIM radicand negative ({radicand:.3e}); eta too large for this gap")
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(radicand, 0.0)) * eps_hat
    if sig > 0.0:
        if noise is None:
            raise ValueError("noise is required when eta > 0")
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != x0_hat.shape:
            raise ValueError("noise shape must match the signal")
        out = out + sig * noise
    return out
