"""Conditional velocity predictor, its training loop and guided DDIM sampling.

The diffusion variable is the control matrix ``(2, T_pred)`` (acceleration,
yaw rate) after per-channel standardisation; ``sample_controls`` returns
controls in physical units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .context import NULL_TOKEN
from .diffusion import forward_noise, velocity_target, ddim_step
from .guidance import GuidanceConfig, cfg_combine, guidance_scale, v_to_eps
from .io import CHECKPOINT_MAGIC, ConfigError, DataError, DivergenceError, read_envelope, write_envelope
from .nn import MLP, make_optimizer, sinusoidal_features
from .schedules import NoiseSchedule, subset_timesteps


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 2e-4
    epochs: int = 200
    cond_dropout: float = 0.10
    optimizer: str = "adam"
    probe_size: int = 512
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, learning_rate >= 0 required")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


class MLPDenoiser:
    """Predicts the velocity ``v`` from ``(x_t, t, token)``.

    Input is the flattened state, sinusoidal features of ``t / T`` and a
    learned embedding of the token (row 0 is the null token). ``n_evals``
    counts per-sample evaluations.
    """

    def __init__(self, T_pred: int, Q: int, T: int, rng: np.random.Generator,
                 hidden: int = 128, depth: int = 3, t_dim: int = 16, cond_dim: int = 16):
        self.T_pred, self.Q, self.T = int(T_pred), int(Q), int(T)
        self.hidden, self.depth, self.t_dim, self.cond_dim = hidden, depth, t_dim, cond_dim
        n_x = 2 * self.T_pred
        self.net = MLP([n_x + t_dim + cond_dim] + [hidden] * depth + [n_x], rng, out_scale=0.1)
        self.embed = rng.standard_normal((self.Q + 1, cond_dim)) * 0.1
        self.x_mean = np.zeros(2)
        self.x_scale = np.ones(2)
        self.n_evals = 0
        self.meta: dict = {}

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params + [self.embed]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def fit_scaler(self, x0: np.ndarray) -> None:
        self.x_mean = x0.mean(axis=(0, 2))
        std = x0.std(axis=(0, 2))
        self.x_scale = np.where(std > 1e-12, std, 1.0)

    def normalize(self, x0) -> np.ndarray:
        return (np.asarray(x0) - self.x_mean[:, None]) / self.x_scale[:, None]

    def denormalize(self, x) -> np.ndarray:
        return np.asarray(x) * self.x_scale[:, None] + self.x_mean[:, None]

    def _inputs(self, x_t, t, cond) -> tuple[np.ndarray, np.ndarray, int]:
        x = np.asarray(x_t, dtype=np.float64)
        if x.shape[-2:] != (2, self.T_pred):
            raise ValueError(f"state must end in (2, {self.T_pred}), got {x.shape}")
        x2 = x.reshape(-1, 2 * self.T_pred)
        B = len(x2)
        t = np.broadcast_to(np.asarray(t), (B,))
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (B,))
        if np.any(cond < 0) or np.any(cond > self.Q):
            raise ValueError(f"token out of range [0, {self.Q}]")
        feats = np.concatenate([x2, sinusoidal_features(t / self.T, self.t_dim), self.embed[cond]], axis=1)
        return feats, cond, B

    def predict_v(self, x_t, t, cond) -> np.ndarray:
        x = np.asarray(x_t)
        feats, _, B = self._inputs(x, t, cond)
        self.n_evals += B
        return self.net(feats).reshape(x.shape)

    def loss_and_grad(self, x_t, t, cond, target) -> tuple[float, list[np.ndarray]]:
        """Mean over the batch of ``||target - v||^2`` and its parameter gradients."""
        feats, cond, B = self._inputs(x_t, t, cond)
        out, cache = self.net.forward(feats)
        diff = out - np.asarray(target).reshape(B, -1)
        loss = float(np.sum(diff * diff)) / B
        grads, g_in = self.net.backward(cache, 2.0 * diff / B)
        g_embed = np.zeros_like(self.embed)
        np.add.at(g_embed, cond, g_in[:, -self.cond_dim:])
        return loss, grads + [g_embed]

    def save(self, path) -> None:
        header = {"kind": "denoiser", "T_pred": self.T_pred, "Q": self.Q, "T": self.T,
                  "hidden": self.hidden, "depth": self.depth, "t_dim": self.t_dim, "cond_dim": self.cond_dim,
                  "meta": self.meta}
        arrays = [(f"net.{i}", p) for i, p in enumerate(self.net.params)]
        arrays += [("embed", self.embed), ("x_mean", self.x_mean), ("x_scale", self.x_scale)]
        write_envelope(path, CHECKPOINT_MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "MLPDenoiser":
        header, arrays = read_envelope(path, CHECKPOINT_MAGIC)
        if header.get("kind") != "denoiser":
            raise DataError(f"{path}: not a denoiser checkpoint")
        model = cls(header["T_pred"], header["Q"], header["T"], np.random.default_rng(0),
                    header["hidden"], header["depth"], header["t_dim"], header["cond_dim"])
        for i, p in enumerate(model.net.params):
            p[...] = arrays[f"net.{i}"]
        model.embed = arrays["embed"].copy()
        model.x_mean = arrays["x_mean"].copy()
        model.x_scale = arrays["x_scale"].copy()
        model.meta = dict(header.get("meta", {}))
        return model


@dataclass(frozen=True)
class VelocityDraw:
    """The random quantities behind one evaluation of the velocity loss."""

    t: np.ndarray
    eps: np.ndarray
    cond: np.ndarray

    @classmethod
    def sample(cls, s: NoiseSchedule, x0: np.ndarray, cond, rng: np.random.Generator,
               cond_dropout: float) -> "VelocityDraw":
        B = len(x0)
        t = rng.integers(1, s.T + 1, size=B)
        eps = rng.standard_normal(x0.shape)
        drop = rng.random(B) < cond_dropout
        cond = np.where(drop, NULL_TOKEN, np.broadcast_to(np.asarray(cond, dtype=np.int64), (B,)))
        return cls(t, eps, cond)


def velocity_loss(denoiser, s: NoiseSchedule, x0, cond, rng: np.random.Generator | None = None,
                  cond_dropout: float = 0.10, draw: VelocityDraw | None = None, with_grad: bool = False):
    """Mean over the batch of ``||v_t - v_theta(x_t, t, c)||^2``.

    ``x0`` is a batch ``(B, 2, T_pred)`` in the denoiser's normalised units.
    Timesteps are uniform on ``1..T``; each condition is replaced by the null
    token with probability ``cond_dropout``. Pass ``draw`` to reuse fixed
    randomness.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim < 2 or len(x0) == 0:
        raise ValueError("velocity_loss needs a non-empty batch")
    if draw is None:
        draw = VelocityDraw.sample(s, x0, cond, rng, cond_dropout)
    x_t = forward_noise(s, x0, draw.t, draw.eps)
    target = velocity_target(s, x0, draw.eps, draw.t)
    if with_grad:
        return denoiser.loss_and_grad(x_t, draw.t, draw.cond, target)
    pred = denoiser.predict_v(x_t, draw.t, draw.cond)
    diff = (target - pred).reshape(len(x0), -1)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def train(denoiser: MLPDenoiser, x0, tokens, s: NoiseSchedule, cfg: TrainConfig) -> tuple[MLPDenoiser, list[float]]:
    """Fit the denoiser to controls ``x0 (M, 2, T_pred)`` with tokens ``(M,)``.

    The returned trace holds the velocity loss on a fixed probe draw (same
    samples, timesteps, noise and dropout every epoch); entry 0 is measured
    before any update.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(x0) == 0 or len(x0) != len(tokens):
        raise ValueError("need matching, non-empty x0 and tokens")
    rng = np.random.default_rng(cfg.rng_seed)
    denoiser.fit_scaler(x0)
    xn = denoiser.normalize(x0)
    M = len(xn)
    probe_idx = rng.choice(M, size=min(cfg.probe_size, M), replace=False)
    probe_x = xn[probe_idx]
    probe = VelocityDraw.sample(s, probe_x, tokens[probe_idx], rng, cfg.cond_dropout)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)

    def probe_loss(epoch: int) -> float:
        loss = velocity_loss(denoiser, s, probe_x, None, draw=probe)
        if not math.isfinite(loss):
            raise DivergenceError(f"velocity loss became {loss} at epoch {epoch}")
        return loss

    trace = [probe_loss(0)]
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(M)
        for start in range(0, M, cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            loss, grads = velocity_loss(denoiser, s, xn[b], tokens[b], rng, cfg.cond_dropout, with_grad=True)
            if not math.isfinite(loss):
                raise DivergenceError(f"velocity loss became {loss} during epoch {epoch}")
            opt.step(denoiser.params, grads)
        trace.append(probe_loss(epoch))
    if not all(np.all(np.isfinite(p)) for p in denoiser.params):
        raise DivergenceError("non-finite parameters after training")
    return denoiser, trace


def sample_controls(denoiser: MLPDenoiser, s: NoiseSchedule, cond: int, delta: float, g: GuidanceConfig,
                    S: int, n: int, rng: np.random.Generator, eta: float = 0.0,
                    normalized: bool = False) -> np.ndarray:
    """Draw ``n`` control sequences ``(n, 2, T_pred)`` by guided DDIM over ``S`` steps.

    Each sample gets its own RNG stream spawned from ``rng``. Every step
    evaluates the conditional and unconditional branches once per sample,
    so exactly ``2 * S * n`` evaluations are made.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 1 <= int(cond) <= denoiser.Q:
        raise ValueError(f"token must lie in [1, {denoiser.Q}], got {cond}")
    steps = subset_timesteps(s, S)
    streams = rng.spawn(n)
    shape = (2, denoiser.T_pred)
    x = np.stack([r.standard_normal(shape) for r in streams])
    conds = np.concatenate([np.full(n, int(cond)), np.full(n, NULL_TOKEN)])
    for i, t in enumerate(steps):
        t = int(t)
        t_prev = int(steps[i + 1]) if i + 1 < len(steps) else 0
        v_both = denoiser.predict_v(np.concatenate([x, x]), t, conds)
        v_c, v_u = v_both[:n], v_both[n:]
        w = guidance_scale(t, s.T, delta, g)
        eps_hat = cfg_combine(v_to_eps(s, x, v_c, t), v_to_eps(s, x, v_u, t), w)
        # guidance is linear, so combining velocities gives the same estimate without dividing by a_t
        x0_hat = s.a[t] * x - s.sigma[t] * cfg_combine(v_c, v_u, w)
        noise = np.stack([r.standard_normal(shape) for r in streams]) if eta > 0 else None
        x = ddim_step(s, x, x0_hat, eps_hat, t, t_prev, eta, noise)
    return x if normalized else denoiser.denormalize(x)

