"""Scenario context: vector-quantised autoencoder with collapse mitigation.

Scenarios are flattened, standardised per input element, encoded to a
latent ``z_hat`` and snapped to the nearest codebook entry. Tokens are
1-based (``1..Q``); token 0 is reserved for the unconditional branch of the
denoiser. After training, each cluster gets a Gaussian centred on its
codebook entry, and the Mahalanobis distance to it scores how atypical a
scenario is for its token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import CHECKPOINT_MAGIC, ConfigError, DataError, DivergenceError, read_envelope, write_envelope
from .nn import MLP, Adam

NULL_TOKEN = 0


@dataclass
class Codebook:
    entries: np.ndarray
    usage: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        self.usage = np.asarray(self.usage, dtype=np.float64)
        if self.entries.ndim != 2 or self.usage.shape != (self.entries.shape[0],):
            raise ValueError("entries must be (Q, d) and usage (Q,)")

    @property
    def Q(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.entries.copy(), self.usage.copy())


def nearest_entry(z_hat: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """0-based index of the closest entry for each row; ties go to the lowest index."""
    d2 = (np.sum(z_hat * z_hat, axis=1)[:, None] - 2.0 * z_hat @ entries.T
          + np.sum(entries * entries, axis=1)[None, :])
    return np.argmin(d2, axis=1)


def quantize(z_hat, cb: Codebook):
    """Snap to the nearest codebook entry.

    Accepts a single latent ``(d,)`` returning ``(z_q, q)`` with an int
    token, or a batch ``(B, d)`` returning arrays. Tokens are 1-based.
    """
    if cb.Q == 0:
        raise ValueError("empty codebook")
    z = np.asarray(z_hat, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[1] != cb.d:
        raise ValueError(f"latent dim {z2.shape[1]} does not match codebook dim {cb.d}")
    # exact distances keep tie-breaking well defined
    d2 = np.sum((z2[:, None, :] - cb.entries[None, :, :]) ** 2, axis=2)
    idx = np.argmin(d2, axis=1)
    if single:
        return cb.entries[idx[0]].copy(), int(idx[0]) + 1
    return cb.entries[idx].copy(), idx + 1


def cvq_losses(xi, xi_hat, z_hat, z_q, beta: float = 0.25) -> tuple[float, float, float]:
    """Reconstruction, codebook and commitment terms (squared norms).

    The codebook and commitment terms have the same value up to ``beta``;
    they differ only in which side receives the gradient.
    """
    xi, xi_hat = np.asarray(xi, dtype=np.float64), np.asarray(xi_hat, dtype=np.float64)
    z_hat, z_q = np.asarray(z_hat, dtype=np.float64), np.asarray(z_q, dtype=np.float64)
    if xi.shape != xi_hat.shape or z_hat.shape != z_q.shape:
        raise ValueError("shape mismatch in cvq_losses")
    recon = float(np.sum((xi - xi_hat) ** 2))
    gap = float(np.sum((z_hat - z_q) ** 2))
    return recon, gap, beta * gap


def _check_onehot(s: np.ndarray) -> None:
    if not (np.all((s == 0) | (s == 1)) and np.all(s.sum(axis=-1) == 1)):
        raise ValueError("labels must be one-hot")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def classifier_loss(logits, s) -> float:
    """Cross-entropy ``-sum_i s_i log softmax(logits)_i`` (mean over a batch)."""
    logits = np.asarray(logits, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if logits.shape != s.shape:
        raise ValueError("logits and labels must have the same shape")
    _check_onehot(s)
    ce = -np.sum(s * log_softmax(logits), axis=-1)
    return float(np.mean(ce))


def perplexity(usage) -> float:
    u = np.asarray(usage, dtype=np.float64)
    total = u.sum()
    if total <= 0:
        return 0.0
    p = u[u > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def dead_fraction(usage, threshold: float) -> float:
    return float(np.mean(np.asarray(usage) < threshold))


def reinit_dead_codes(cb: Codebook, batch_latents, decay: float, threshold: float,
                      rng: np.random.Generator) -> Codebook:
    """EMA usage update, then re-anchor entries whose usage fell below ``threshold``.

    Dead entries move onto batch latents drawn with probability proportional
    to their squared distance from their own nearest entry, so poorly served
    regions attract the freed capacity. Re-anchored entries restart at the
    mean usage.
    """
    z = np.atleast_2d(np.asarray(batch_latents, dtype=np.float64))
    if z.shape[0] == 0:
        raise ValueError("batch_latents must be non-empty")
    out = cb.copy()
    idx = nearest_entry(z, out.entries)
    counts = np.bincount(idx, minlength=out.Q).astype(np.float64)
    out.usage = decay * out.usage + (1.0 - decay) * counts
    dead = np.flatnonzero(out.usage < threshold)
    if dead.size == 0:
        return out
    d2 = np.sum((z - out.entries[idx]) ** 2, axis=1)
    total = d2.sum()
    p = d2 / total if total > 0 else np.full(len(z), 1.0 / len(z))
    replace = np.count_nonzero(p) < dead.size
    pick = rng.choice(len(z), size=dead.size, replace=replace, p=p)
    out.entries[dead] = z[pick]
    out.usage[dead] = out.usage.mean()
    return out


def _codebook_grad(z: np.ndarray, entries: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Gradient of the mean codebook term w.r.t. the entries (latents held fixed)."""
    g = np.zeros_like(entries)
    np.add.at(g, idx, 2.0 * (entries[idx] - z) / len(z))
    return g


def fit_codebook(latents, Q: int, rng: np.random.Generator, steps: int = 500, batch_size: int = 64,
                 lr: float = 0.05, decay: float = 0.9, threshold: float = 0.1, reinit: bool = True,
                 init: np.ndarray | None = None) -> Codebook:
    """Learn a codebook over fixed latents with the codebook term alone."""
    z_all = np.asarray(latents, dtype=np.float64)
    if init is None:
        init = z_all[rng.choice(len(z_all), size=Q, replace=len(z_all) < Q)]
    cb = Codebook(np.array(init, dtype=np.float64), np.full(Q, batch_size / Q))
    opt = Adam(lr)
    for _ in range(steps):
        z = z_all[rng.choice(len(z_all), size=min(batch_size, len(z_all)), replace=False)]
        idx = nearest_entry(z, cb.entries)
        opt.step([cb.entries], [_codebook_grad(z, cb.entries, idx)])
        if reinit:
            cb = _sync(cb, reinit_dead_codes(cb, z, decay, threshold, rng))
        else:
            counts = np.bincount(idx, minlength=Q)
            cb.usage[...] = decay * cb.usage + (1.0 - decay) * counts
    return cb


def _sync(target: Codebook, new: Codebook) -> Codebook:
    """Copy ``new`` into ``target``'s arrays so optimiser state stays attached."""
    target.entries[...] = new.entries
    target.usage[...] = new.usage
    return target


@dataclass
class ClusterGaussian:
    mu: np.ndarray
    Sigma: np.ndarray
    inv: np.ndarray = field(repr=False)
    logdet: float = 0.0

    @classmethod
    def from_cov(cls, mu, Sigma) -> "ClusterGaussian":
        Sigma = 0.5 * (Sigma + Sigma.T)
        sign, logdet = np.linalg.slogdet(Sigma)
        if sign <= 0:
            raise np.linalg.LinAlgError("cluster covariance is not positive definite")
        return cls(np.asarray(mu, dtype=np.float64), Sigma, np.linalg.inv(Sigma), float(logdet))


def fit_cluster_gaussians(latents, tokens, cb: Codebook, ridge_rel: float = 1e-6,
                          ridge_floor: float = 1e-12) -> dict[int, ClusterGaussian | None]:
    """Per-token Gaussian with mean fixed at the codebook entry.

    The covariance is the mean outer product of deviations from that entry,
    plus ``max(ridge_rel * trace / d, ridge_floor) * I``. Tokens with no
    members map to ``None``.
    """
    z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    tokens = np.asarray(tokens)
    out: dict[int, ClusterGaussian | None] = {}
    for q in range(1, cb.Q + 1):
        members = z[tokens == q]
        if len(members) == 0:
            out[q] = None
            continue
        mu = cb.entries[q - 1]
        dev = members - mu
        cov = dev.T @ dev / len(members)
        ridge = max(ridge_rel * np.trace(cov) / cb.d, ridge_floor)
        out[q] = ClusterGaussian.from_cov(mu, cov + ridge * np.eye(cb.d))
    return out


def mahalanobis(z_hat, g: ClusterGaussian | None) -> float:
    """Covariance-weighted distance to a cluster; ``inf`` for unfitted clusters."""
    if g is None:
        return math.inf
    z = np.asarray(z_hat, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent must be finite")
    dev = z - g.mu
    return math.sqrt(max(float(dev @ g.inv @ dev), 0.0))


@dataclass(frozen=True)
class ContextConfig:
    Q: int = 60
    latent_dim: int = 16
    hidden: int = 64
    beta: float = 0.25
    lam: float = 1.0
    batch_size: int = 64
    learning_rate: float = 4.5e-6
    epochs: int = 1200
    reinit: bool = True
    usage_decay: float = 0.99
    dead_threshold: float = 0.01
    ridge_rel: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.Q < 1 or self.latent_dim < 1 or self.hidden < 1:
            raise ConfigError("Q, latent_dim and hidden must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, learning_rate >= 0 required")
        if not 0 <= self.usage_decay < 1:
            raise ConfigError("usage_decay must lie in [0, 1)")


N_CLASSES = 3


class ContextModel:
    """Encoder, decoder, maneuver head, codebook and cluster Gaussians."""

    def __init__(self, input_shape: tuple[int, ...], cfg: ContextConfig, rng: np.random.Generator):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.cfg = cfg
        n_in = int(np.prod(self.input_shape))
        d = cfg.latent_dim
        self.encoder = MLP([n_in, cfg.hidden, d], rng)
        self.decoder = MLP([d, cfg.hidden, n_in], rng)
        self.head = MLP([d, N_CLASSES], rng)
        self.codebook = Codebook(rng.standard_normal((cfg.Q, d)), np.zeros(cfg.Q))
        self.feat_mean = np.zeros(n_in)
        self.feat_std = np.ones(n_in)
        self.gaussians: dict[int, ClusterGaussian | None] = {}

    @property
    def params(self) -> list[np.ndarray]:
        return self.encoder.params + self.decoder.params + self.head.params + [self.codebook.entries]

    def fit_scaler(self, xi: np.ndarray) -> None:
        flat = xi.reshape(len(xi), -1)
        self.feat_mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.feat_std = np.where(std > 1e-8, std, 1.0)

    def standardize(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=np.float64)
        single = xi.shape == self.input_shape
        if not single and xi.shape[1:] != self.input_shape:
            raise ValueError(f"scenario tensor must have shape {self.input_shape}, got {xi.shape}")
        flat = xi.reshape(1 if single else len(xi), -1)
        return (flat - self.feat_mean) / self.feat_std

    def encode(self, xi) -> np.ndarray:
        """Latent for one scenario ``(N, F, T_obs)`` or a batch of them."""
        xi = np.asarray(xi, dtype=np.float64)
        z = self.encoder(self.standardize(xi))
        return z[0] if xi.shape == self.input_shape else z

    def tokenize(self, xi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Tokens (1-based), latents and Mahalanobis distances for a batch."""
        z = np.atleast_2d(self.encode(np.asarray(xi).reshape((-1,) + self.input_shape)))
        _, q = quantize(z, self.codebook)
        delta = np.array([mahalanobis(zi, self.gaussians.get(int(qi))) for zi, qi in zip(z, q)])
        return q, z, delta

    def batch_loss(self, x: np.ndarray, s: np.ndarray, with_grad: bool = False):
        """Mean context loss over a standardised batch.

        The reconstruction term is averaged over input elements so that the
        classification weight keeps its meaning for wide scenario tensors.
        """
        cfg = self.cfg
        B, n_el = x.shape
        z, ec = self.encoder.forward(x)
        idx = nearest_entry(z, self.codebook.entries)
        zq = self.codebook.entries[idx]
        xh, dc = self.decoder.forward(zq)
        logits, hc = self.head.forward(zq)
        recon = float(np.sum((x - xh) ** 2)) / (n_el * B)
        gap = float(np.sum((z - zq) ** 2)) / B
        ce = classifier_loss(logits, s)
        total = recon + gap + cfg.beta * gap + cfg.lam * ce
        if not with_grad:
            return total
        gdec, g_zq_dec = self.decoder.backward(dc, 2.0 * (xh - x) / (n_el * B))
        p = np.exp(log_softmax(logits))
        ghead, g_zq_head = self.head.backward(hc, cfg.lam * (p - s) / B)
        # straight-through: decoder and head gradients pass to the encoder output
        g_z = g_zq_dec + g_zq_head + 2.0 * cfg.beta * (z - zq) / B
        genc, _ = self.encoder.backward(ec, g_z)
        g_entries = _codebook_grad(z, self.codebook.entries, idx)
        return total, genc + gdec + ghead + [g_entries], z

    def fit_gaussians(self, xi: np.ndarray) -> np.ndarray:
        z = self.encode(xi)
        _, q = quantize(z, self.codebook)
        self.gaussians = fit_cluster_gaussians(z, q, self.codebook, self.cfg.ridge_rel)
        return q

    # checkpoint I/O

    def save(self, path) -> None:
        cfg = self.cfg
        d = cfg.latent_dim
        fitted = np.array([self.gaussians.get(q) is not None for q in range(1, cfg.Q + 1)], dtype=np.float64)
        mus = np.zeros((cfg.Q, d))
        sigmas = np.zeros((cfg.Q, d, d))
        for q in range(1, cfg.Q + 1):
            g = self.gaussians.get(q)
            if g is not None:
                mus[q - 1], sigmas[q - 1] = g.mu, g.Sigma
        arrays = [(f"encoder.{i}", p) for i, p in enumerate(self.encoder.params)]
        arrays += [(f"decoder.{i}", p) for i, p in enumerate(self.decoder.params)]
        arrays += [(f"head.{i}", p) for i, p in enumerate(self.head.params)]
        arrays += [("codebook", self.codebook.entries), ("usage", self.codebook.usage),
                   ("feat_mean", self.feat_mean), ("feat_std", self.feat_std),
                   ("cluster_fitted", fitted), ("cluster_mu", mus), ("cluster_sigma", sigmas)]
        header = {"kind": "context", "input_shape": list(self.input_shape), "Q": cfg.Q,
                  "latent_dim": d, "hidden": cfg.hidden, "config": asdict(cfg)}
        write_envelope(path, CHECKPOINT_MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "ContextModel":
        header, arrays = read_envelope(path, CHECKPOINT_MAGIC)
        if header.get("kind") != "context":
            raise DataError(f"{path}: not a context checkpoint")
        cfg = ContextConfig(**header["config"])
        model = cls(tuple(header["input_shape"]), cfg, np.random.default_rng(0))
        for prefix, net in (("encoder", model.encoder), ("decoder", model.decoder), ("head", model.head)):
            for i, p in enumerate(net.params):
                p[...] = arrays[f"{prefix}.{i}"]
        model.codebook = Codebook(arrays["codebook"].copy(), arrays["usage"].copy())
        model.feat_mean = arrays["feat_mean"]
        model.feat_std = arrays["feat_std"]
        model.gaussians = {}
        for q in range(1, cfg.Q + 1):
            if arrays["cluster_fitted"][q - 1] > 0:
                model.gaussians[q] = ClusterGaussian.from_cov(arrays["cluster_mu"][q - 1],
                                                              arrays["cluster_sigma"][q - 1])
            else:
                model.gaussians[q] = None
        return model


def train_context(xi: np.ndarray, labels: np.ndarray, cfg: ContextConfig) -> tuple[ContextModel, list[float]]:
    """Train on scenarios ``(M, N, F, T_obs)`` with one-hot maneuver labels.

    Returns the trained model (cluster Gaussians fitted) and a loss trace
    whose entry 0 is the full-data loss before any update and entry ``k``
    the loss after epoch ``k``.
    """
    rng = np.random.default_rng(cfg.seed)
    xi = np.asarray(xi, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    _check_onehot(labels)
    model = ContextModel(xi.shape[1:], cfg, rng)
    model.fit_scaler(xi)
    X = model.standardize(xi)
    M = len(X)
    z0 = model.encoder(X)
    pick = rng.choice(M, size=cfg.Q, replace=M < cfg.Q)
    model.codebook = Codebook(z0[pick] + 1e-3 * rng.standard_normal((cfg.Q, cfg.latent_dim)),
                              np.full(cfg.Q, min(cfg.batch_size, M) / cfg.Q))
    opt = Adam(cfg.learning_rate)
    trace = [model.batch_loss(X, labels)]
    for epoch in range(cfg.epochs):
        perm = rng.permutation(M)
        for start in range(0, M, cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            loss, grads, z = model.batch_loss(X[b], labels[b], with_grad=True)
            if not math.isfinite(loss):
                raise DivergenceError(f"context loss became {loss} at epoch {epoch + 1}")
            opt.step(model.params, grads)
            if cfg.reinit:
                _sync(model.codebook, reinit_dead_codes(model.codebook, z, cfg.usage_decay,
                                                        cfg.dead_threshold, rng))
            else:
                counts = np.bincount(nearest_entry(z, model.codebook.entries), minlength=cfg.Q)
                model.codebook.usage[...] = cfg.usage_decay * model.codebook.usage + (1 - cfg.usage_decay) * counts
        full = model.batch_loss(X, labels)
        if not math.isfinite(full):
            raise DivergenceError(f"context loss became {full} after epoch {epoch + 1}")
        trace.append(full)
    model.fit_gaussians(xi)
    return model, trace
