"""Displacement metrics, the constant-velocity baseline and the per-token KL diagnostic.

Trajectories are ``(2, T)`` arrays of positions (row 0 = x, row 1 = y);
leading batch dimensions are allowed where noted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .multimodal import HypothesisSet


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape[-2:] != g.shape[-2:] or p.shape[-2] != 2:
        raise ValueError(f"trajectory shapes differ: {p.shape} vs {g.shape}")
    return p, g


def displacement(pred, gt, squared: bool = False) -> np.ndarray:
    """Per-step distance ``(..., T)``; ``squared`` returns squared distances."""
    p, g = _pair(pred, gt)
    d2 = np.sum((p - g) ** 2, axis=-2)
    return d2 if squared else np.sqrt(d2)


def ade(pred, gt, squared: bool = False):
    """Average displacement error over the horizon."""
    return np.mean(displacement(pred, gt, squared), axis=-1)


def fde(pred, gt, index: int = -1, squared: bool = False):
    """Displacement error at one horizon step (the last by default)."""
    d = displacement(pred, gt, squared)
    T = d.shape[-1]
    if not -T <= index < T:
        raise IndexError(f"horizon index {index} out of range for {T} steps")
    return d[..., index]


def _hypothesis_means(hyps) -> np.ndarray:
    means = hyps.means if isinstance(hyps, HypothesisSet) else np.asarray(hyps, dtype=np.float64)
    if means.ndim != 3 or len(means) == 0:
        raise ValueError("need at least one hypothesis trajectory (K, 2, T)")
    return means


def min_over_hypotheses(hyps, gt, squared: bool = False) -> tuple[float, float]:
    """``(min_ade_k, min_fde_k)``; each minimum is taken separately over the hypothesis means."""
    means = _hypothesis_means(hyps)
    return float(np.min(ade(means, gt, squared))), float(np.min(fde(means, gt, squared=squared)))


@dataclass(frozen=True)
class MetricReport:
    """Errors of one prediction under the three read-outs (mean, most likely, best of K)."""

    ade_mean: float
    fde_mean: float
    ade_ml: float
    fde_ml: float
    min_ade_k: float
    min_fde_k: float
    k: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> list:
        return [getattr(self, c) for c in self.columns()]


def evaluate_prediction(mean_traj, hyps: HypothesisSet, gt, squared: bool = False) -> MetricReport:
    ml = hyps.means[hyps.most_likely]
    min_ade, min_fde = min_over_hypotheses(hyps, gt, squared)
    return MetricReport(float(ade(mean_traj, gt, squared)), float(fde(mean_traj, gt, squared=squared)),
                        float(ade(ml, gt, squared)), float(fde(ml, gt, squared=squared)),
                        min_ade, min_fde, len(hyps))


def average_reports(reports) -> dict[str, float]:
    reports = list(reports)
    if not reports:
        return {}
    return {c: float(np.mean([getattr(r, c) for r in reports])) for c in MetricReport.columns()}


def constant_velocity(xi, T_pred: int, tau: float) -> np.ndarray:
    """Extrapolate the target's last observed position and velocity.

    ``xi`` is ``(..., N, F, T_obs)`` with features ``[x, y, vx, vy]``; the
    result holds the positions after each of ``T_pred`` steps.
    """
    last = np.asarray(xi, dtype=np.float64)[..., 0, :, -1]
    k = np.arange(1, T_pred + 1) * tau
    x = last[..., 0, None] + last[..., 2, None] * k
    y = last[..., 1, None] + last[..., 3, None] * k
    return np.stack([x, y], axis=-2)


# per-token endpoint distribution diagnostic

def _grid(p: np.ndarray, q: np.ndarray, bins) -> tuple[list, list]:
    both = np.concatenate([p, q])
    lo, hi = both.min(axis=0), both.max(axis=0)
    zero = hi - lo <= 0
    lo = np.where(zero, lo - 0.5, lo)
    hi = np.where(zero, hi + 0.5, hi)
    nb = (bins, bins) if np.isscalar(bins) else tuple(bins)
    return list(nb), [(lo[0], hi[0]), (lo[1], hi[1])]


def smoothed_histogram(points, bins, rng_box) -> np.ndarray:
    """Bin probabilities ``(c_i + 1/B) / (N + 1)`` over ``B`` bins."""
    pts = np.asarray(points, dtype=np.float64)
    h, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=bins, range=rng_box)
    B = h.size
    return ((h + 1.0 / B) / (len(pts) + 1.0)).ravel()


def histogram_kl(p_points, q_points, bins=32) -> float:
    """``KL(p || q)`` between smoothed 2-D histograms on a shared grid.

    The grid spans the bounding box of both sets (a zero-width side is
    widened by 0.5 each way). Additive smoothing puts ``1/(B N)`` of mass on
    every bin before renormalising, so the estimate is finite.
    """
    p = np.asarray(p_points, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(q_points, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("both point sets must be non-empty")
    nb, box = _grid(p, q, bins)
    hp = smoothed_histogram(p, nb, box)
    hq = smoothed_histogram(q, nb, box)
    return max(0.0, float(np.sum(hp * np.log(hp / hq))))


@dataclass(frozen=True)
class KLRecord:
    token: int
    n_q: int
    kl: float
    note: str = ""


def cluster_kl_report(truth: dict, generated: dict, bins=32) -> list[KLRecord]:
    """One record per token in ``truth``.

    ``truth[q]`` and ``generated[q]`` are endpoint sets ``(n, 2)``; ``n_q``
    is the size of the ground-truth set. Tokens with fewer than two points on
    either side get a ``nan`` estimate and a note instead of an error.
    """
    out = []
    for q in sorted(truth):
        p = np.asarray(truth[q], dtype=np.float64).reshape(-1, 2)
        g = np.asarray(generated.get(q, np.empty((0, 2))), dtype=np.float64).reshape(-1, 2)
        if len(p) < 2 or len(g) < 2:
            out.append(KLRecord(int(q), len(p), math.nan, "skipped: fewer than 2 points"))
            continue
        out.append(KLRecord(int(q), len(p), histogram_kl(p, g, bins)))
    return out
