"""Discrete noise schedules and DDIM timestep subsets.

All per-step arrays are indexed directly by the timestep ``t`` in ``0..T``.
Index 0 is the clean-data convention: ``alpha_bar[0] = 1``, ``a[0] = 1``,
``sigma[0] = 0`` and ``beta[0] = beta_tilde[0] = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    a: np.ndarray
    sigma: np.ndarray
    beta_tilde: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        """Build a schedule from ``beta[1..T]``."""
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("need a non-empty 1-D array of betas")
        if not np.all(np.isfinite(betas)) or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        a = np.sqrt(alpha_bar)
        sigma = np.sqrt(1.0 - alpha_bar)
        beta_tilde = np.zeros_like(beta)
        beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
        return cls(*(_frozen(x) for x in (beta, alpha, alpha_bar, a, sigma, beta_tilde)))

    def check_t(self, t, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise TypeError(f"timestep must be integer, got {t_arr.dtype}")
        if np.any(t_arr < lo) or np.any(t_arr > self.T):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``t = 1..T``."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    for name, val in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not math.isfinite(val) or not 0.0 < val < 1.0:
            raise ValueError(f"{name} must be finite and inside (0, 1), got {val}")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T)))


def subset_timesteps(schedule: NoiseSchedule, S: int) -> np.ndarray:
    """``S`` linearly spaced timesteps from ``{1..T}``, descending, starting at ``T``.

    The grid is a rounded inclusive linspace over ``[1, T]``. Because the
    spacing is at least one whenever ``S <= T``, rounding never produces
    duplicates.
    """
    T = schedule.T
    if int(S) != S or S < 1 or S > T:
        raise ValueError(f"S must be an integer in [1, {T}], got {S}")
    if S == 1:
        return np.array([T], dtype=np.int64)
    grid = np.rint(np.linspace(1, T, int(S))).astype(np.int64)
    grid[-1] = T
    assert np.all(np.diff(grid) > 0)
    return grid[::-1].copy()
