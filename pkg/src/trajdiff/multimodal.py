"""Aggregating sampled trajectories: sample-size estimate, mean, and modes.

Trajectory sets are arrays ``(n, 2, T_pred)``. Modes are found by min-max
scaling the x and y channels, projecting onto the top principal
components, fitting full-covariance Gaussian mixtures by EM and choosing
the component count by BIC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


def required_samples_raw(sigma_t: float, eps_tol: float, z: float = 1.96) -> float:
    """``(z * sigma_t / eps_tol)^2`` before rounding."""
    if not eps_tol > 0:
        raise ValueError(f"eps_tol must be positive, got {eps_tol}")
    if sigma_t < 0:
        raise ValueError(f"sigma_t must be non-negative, got {sigma_t}")
    return (z * sigma_t / eps_tol) ** 2


def required_samples(sigma_t: float, eps_tol: float, z: float = 1.96) -> int:
    """Samples needed for the mean to land within ``eps_tol`` at the given quantile (at least 1)."""
    return max(1, math.ceil(required_samples_raw(sigma_t, eps_tol, z)))


def _as_set(samples, min_n: int) -> np.ndarray:
    y = np.asarray(samples, dtype=np.float64)
    if y.ndim != 3 or y.shape[1] != 2:
        raise ValueError(f"expected trajectories (n, 2, T), got {y.shape}")
    if len(y) < min_n:
        raise ValueError(f"need at least {min_n} trajectories, got {len(y)}")
    return y


def pooled_std(samples, t: int) -> float:
    """``sqrt(Var(x_t) + Var(y_t))`` across samples, population variances."""
    y = _as_set(samples, 2)
    return float(np.sqrt(np.var(y[:, 0, t]) + np.var(y[:, 1, t])))


def mean_trajectory(samples) -> np.ndarray:
    return _as_set(samples, 1).mean(axis=0)


def minmax_scale(samples) -> np.ndarray:
    """Scale the x and y channels separately to ``[0, 1]`` over the whole set."""
    y = _as_set(samples, 1)
    lo = y.min(axis=(0, 2), keepdims=True)
    span = y.max(axis=(0, 2), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (y - lo) / safe, 0.0)


def pca_project(samples, r: int = 2) -> np.ndarray:
    """Min-max scale, flatten, centre and project onto the top ``r`` components.

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    y = _as_set(samples, 2)
    flat = minmax_scale(y).reshape(len(y), -1)
    if flat.shape[1] < r:
        raise ValueError("trajectory dimension is smaller than r")
    centred = flat - flat.mean(axis=0)
    cov = centred.T @ centred / len(y)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:r]]
    flip = np.sign(top[np.argmax(np.abs(top), axis=0), np.arange(r)])
    return centred @ (top * np.where(flip == 0, 1.0, flip))


@dataclass
class GMMModel:
    pi: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    log_likelihood: float
    history: list[float] = field(default_factory=list, repr=False)
    degenerate: bool = False

    @property
    def C(self) -> int:
        return len(self.pi)

    def log_joint(self, points) -> np.ndarray:
        """``log pi_c + log N(x | mu_c, Sigma_c)`` for every point and component."""
        return _log_joint(np.asarray(points, dtype=np.float64), self.pi, self.mu, self.Sigma)

    def responsibilities(self, points) -> np.ndarray:
        lj = self.log_joint(points)
        return np.exp(lj - _logsumexp(lj))


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1, keepdims=True)
    return m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True))


def _log_joint(x: np.ndarray, pi, mu, Sigma) -> np.ndarray:
    n, r = x.shape
    out = np.empty((n, len(pi)))
    for c in range(len(pi)):
        chol = np.linalg.cholesky(Sigma[c])
        sol = np.linalg.solve(chol, (x - mu[c]).T)
        maha = np.sum(sol * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        with np.errstate(divide="ignore"):
            log_pi = np.log(pi[c])
        out[:, c] = log_pi - 0.5 * (r * math.log(2 * math.pi) + logdet + maha)
    return out


def n_parameters(C: int, r: int = 2) -> int:
    """Free parameters of a full-covariance mixture: means, covariances, weights minus one."""
    return C * (r + r * (r + 1) // 2 + 1) - 1


def bic(log_likelihood: float, C: int, n: int, r: int = 2) -> float:
    return -2.0 * log_likelihood + n_parameters(C, r) * math.log(n)


def _kmeanspp(x: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    centres = [x[rng.integers(len(x))]]
    for _ in range(1, C):
        d2 = np.min(np.sum((x[:, None, :] - np.asarray(centres)[None]) ** 2, axis=2), axis=1)
        total = d2.sum()
        p = d2 / total if total > 0 else np.full(len(x), 1.0 / len(x))
        centres.append(x[rng.choice(len(x), p=p)])
    return np.asarray(centres)


def _m_step(x: np.ndarray, resp: np.ndarray):
    n, r = x.shape
    nk = resp.sum(axis=0)
    pi = nk / n
    safe = np.where(nk > 0, nk, 1.0)
    mu = (resp.T @ x) / safe[:, None]
    Sigma = np.empty((resp.shape[1], r, r))
    for c in range(resp.shape[1]):
        dev = x - mu[c]
        Sigma[c] = (resp[:, c, None] * dev).T @ dev / safe[c]
    return pi, mu, Sigma, nk


def _is_degenerate(nk: np.ndarray, Sigma: np.ndarray, floor: float) -> bool:
    r = Sigma.shape[1]
    if np.any(nk < r + 1):
        return True
    return bool(np.any(np.linalg.eigvalsh(Sigma)[:, 0] < floor))


def _em_run(x: np.ndarray, C: int, rng: np.random.Generator, max_iter: int, tol: float, ridge: float) -> GMMModel:
    """One EM run with exact maximum-likelihood M-steps.

    A run whose component loses support (fewer than ``r + 1`` effective
    points, or a covariance eigenvalue below the ridge floor) stops and is
    flagged degenerate; its covariances get the ridge so they stay usable.
    """
    r = x.shape[1]
    floor = ridge * max(float(np.trace(np.cov(x.T, bias=True).reshape(r, r))) / r, 1e-300)
    centres = _kmeanspp(x, C, rng)
    hard = np.argmin(np.sum((x[:, None, :] - centres[None]) ** 2, axis=2), axis=1)
    pi, mu, Sigma, nk = _m_step(x, np.eye(C)[hard])
    history: list[float] = []
    for _ in range(max_iter):
        if _is_degenerate(nk, Sigma, floor):
            Sigma = Sigma + floor * np.eye(r)
            pi = np.maximum(pi, 1e-300)
            pi = pi / pi.sum()
            ll = float(np.sum(_logsumexp(_log_joint(x, pi, mu, Sigma))))
            return GMMModel(pi, mu, Sigma, ll, history, degenerate=True)
        lj = _log_joint(x, pi, mu, Sigma)
        lse = _logsumexp(lj)
        history.append(float(np.sum(lse)))
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * abs(history[-2]):
            break
        pi, mu, Sigma, nk = _m_step(x, np.exp(lj - lse))
    return GMMModel(pi, mu, Sigma, history[-1], history)


def fit_gmm_em(points, C: int, rng: np.random.Generator, restarts: int = 5, max_iter: int = 200,
               tol: float = 1e-8, ridge: float = 1e-6) -> GMMModel:
    """Best-of-``restarts`` EM fit by final log-likelihood.

    Non-degenerate runs always beat degenerate ones. ``ridge`` is relative to
    the mean per-axis variance of ``points``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be (n, r)")
    if C < 1 or C > len(x):
        raise ValueError(f"need 1 <= C <= n_points ({len(x)}), got {C}")
    best = None
    for _ in range(max(1, restarts)):
        model = _em_run(x, C, rng, max_iter, tol, ridge)
        if best is None or (best.degenerate, -best.log_likelihood) > (model.degenerate, -model.log_likelihood):
            best = model
    return best


@dataclass
class BICSelection:
    model: GMMModel
    C: int
    scores: dict[int, float]


def select_by_bic(points, C_max: int = 3, rng: np.random.Generator | None = None, restarts: int = 5,
                  ridge: float = 1e-6) -> BICSelection:
    """Fit ``C = 1..C_max`` and keep the lowest BIC; ties go to the smaller ``C``.

    Degenerate fits with ``C > 1`` score ``+inf``: a component without
    enough support for a full covariance is not a mode.
    """
    x = np.asarray(points, dtype=np.float64)
    if C_max < 1:
        raise ValueError("C_max must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    best, best_c, scores = None, 0, {}
    for C in range(1, min(C_max, len(x)) + 1):
        model = fit_gmm_em(x, C, rng, restarts=restarts, ridge=ridge)
        scores[C] = math.inf if (model.degenerate and C > 1) else bic(model.log_likelihood, C, len(x), x.shape[1])
        if best is None or scores[C] < scores[best_c]:
            best, best_c = model, C
    return BICSelection(best, best_c, scores)


@dataclass
class HypothesisSet:
    means: np.ndarray
    members: list[np.ndarray]
    n_samples: int

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.n_samples

    @property
    def fractions(self) -> list[Fraction]:
        return [Fraction(int(c), self.n_samples) for c in self.counts]

    @property
    def most_likely(self) -> int:
        """Index of the best-supported hypothesis (lowest index on ties)."""
        return int(np.argmax(self.counts))

    def __len__(self) -> int:
        return len(self.members)


def extract_hypotheses(samples, gmm: GMMModel, points) -> HypothesisSet:
    """Hard-assign each sample to its most responsible component; drop empty ones."""
    y = _as_set(samples, 1)
    resp = gmm.responsibilities(points)
    if len(resp) != len(y):
        raise ValueError("points and samples must align")
    assign = np.argmax(resp, axis=1)
    means, members = [], []
    for c in range(gmm.C):
        idx = np.flatnonzero(assign == c)
        if idx.size:
            members.append(idx)
            means.append(y[idx].mean(axis=0))
    return HypothesisSet(np.stack(means), members, len(y))


def hypotheses_from_samples(samples, C_max: int = 3, rng: np.random.Generator | None = None,
                            restarts: int = 5, r: int = 2) -> tuple[HypothesisSet, BICSelection]:
    y = _as_set(samples, 1)
    if len(y) < 2:
        return HypothesisSet(y.copy(), [np.arange(len(y))], len(y)), None
    points = pca_project(y, r)
    sel = select_by_bic(points, C_max, rng, restarts)
    return extract_hypotheses(y, sel.model, points), sel
