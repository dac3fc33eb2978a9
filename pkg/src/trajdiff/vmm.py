"""Kinematic vehicle motion model.

Controls are longitudinal acceleration and yaw rate, held constant over
each step of length ``tau``. Positions use metres, headings radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    v: float
    psi: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.v, self.psi)):
            raise ValueError("vehicle state must be finite")
        if self.v < 0:
            raise ValueError(f"initial speed must be non-negative, got {self.v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.psi])


@dataclass(frozen=True)
class ControlSequence:
    a_x: np.ndarray
    psi_dot: np.ndarray
    tau: float

    def __post_init__(self):
        a = np.asarray(self.a_x, dtype=np.float64)
        w = np.asarray(self.psi_dot, dtype=np.float64)
        if a.shape != w.shape or a.ndim != 1:
            raise ValueError("a_x and psi_dot must be 1-D sequences of equal length")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
            raise ValueError("controls must be finite")
        object.__setattr__(self, "a_x", a)
        object.__setattr__(self, "psi_dot", w)

    def as_array(self) -> np.ndarray:
        """Stacked ``(2, T_pred)`` control matrix."""
        return np.stack([self.a_x, self.psi_dot])


def rollout_array(state0, controls: np.ndarray, tau: float) -> np.ndarray:
    """Vectorised rollout.

    ``state0`` is ``(..., 4)`` or a :class:`VehicleState`; ``controls`` is
    ``(..., 2, T)``. Returns positions ``(..., 2, T)`` after each step.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if isinstance(state0, VehicleState):
        state0 = state0.as_array()
    controls = np.asarray(controls, dtype=np.float64)
    st = np.broadcast_to(np.asarray(state0, dtype=np.float64), controls.shape[:-2] + (4,))
    x, y, v, psi = (st[..., i].copy() for i in range(4))
    n = controls.shape[-1]
    out = np.empty(controls.shape[:-2] + (2, n))
    half_tau2 = 0.5 * tau * tau
    for k in range(n):
        acc = controls[..., 0, k]
        yaw = controls[..., 1, k]
        c, s = np.cos(psi), np.sin(psi)
        x = x + v * c * tau + (acc * c - yaw * v * s) * half_tau2
        y = y + v * s * tau + (acc * s + yaw * v * c) * half_tau2
        v = v + acc * tau
        psi = psi + yaw * tau
        out[..., 0, k] = x
        out[..., 1, k] = y
    return out


def rollout(s0: VehicleState, u: ControlSequence) -> np.ndarray:
    """Positions ``(2, T_pred)`` reached after each control step."""
    return rollout_array(s0, u.as_array(), u.tau)


def wrap_angle(a):
    """Wrap to ``(-pi, pi]``."""
    out = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def _chord_headings(d: np.ndarray, eps: float) -> np.ndarray:
    """Heading of each displacement chord; zero-length chords keep the previous heading."""
    n = d.shape[1]
    out = np.empty(n)
    prev = None
    for k in range(n):
        if np.hypot(d[0, k], d[1, k]) > eps:
            prev = math.atan2(d[1, k], d[0, k])
        out[k] = prev if prev is not None else np.nan
    if np.all(np.isnan(out)):
        return np.zeros(n)
    first = out[~np.isnan(out)][0]
    out[np.isnan(out)] = first
    return np.unwrap(out)


def inverse_controls(positions, tau: float, prev=None, eps: float = 1e-9) -> tuple[ControlSequence, VehicleState]:
    """Extract controls and the initial state that reproduce a sampled path.

    ``positions`` is ``(2, M)`` with ``M >= 3``; column 0 is the anchor (the
    current position) and the result has ``M - 1`` control steps. ``prev``,
    when given, is the position one step before the anchor and sharpens the
    anchor's speed and heading estimate.

    Speeds and headings are first estimated at every sample point by averaging
    the adjacent chords (linear extrapolation at the ends); controls are then
    forward differences of those point estimates. This keeps the per-step
    displacement of the rollout within O(tau^3) of the sampled chord.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != 2 or p.shape[1] < 3:
        raise ValueError("positions must be (2, M) with M >= 3")
    if prev is not None:
        p = np.concatenate([np.asarray(prev, dtype=np.float64).reshape(2, 1), p], axis=1)
    d = np.diff(p, axis=1)
    chord_speed = np.hypot(d[0], d[1]) / tau
    chord_head = _chord_headings(d, eps)

    def at_points(c: np.ndarray) -> np.ndarray:
        pts = np.empty(len(c) + 1)
        pts[1:-1] = 0.5 * (c[:-1] + c[1:])
        pts[0] = c[0] - 0.5 * (c[1] - c[0])
        pts[-1] = c[-1] + 0.5 * (c[-1] - c[-2])
        return pts

    speed = at_points(chord_speed)
    head = at_points(chord_head)
    if prev is not None:
        speed, head, p = speed[1:], head[1:], p[:, 1:]
    a_x = np.diff(speed) / tau
    psi_dot = wrap_angle(np.diff(head)) / tau
    s0 = VehicleState(float(p[0, 0]), float(p[1, 0]), max(float(speed[0]), 0.0), float(wrap_angle(head[0])))
    return ControlSequence(a_x, psi_dot, tau), s0

