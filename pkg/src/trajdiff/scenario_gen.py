"""Synthetic highway scenarios with highD-like tensor shapes.

Coordinates are road-aligned: ``x`` is longitudinal and measured from the
target vehicle's current position, ``y`` is lateral and measured from the
centre of the lane the target occupied at the start of the observation
window (positive = left). Vehicle 0 of every scenario is the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .io import DATASET_MAGIC, ConfigError, DataError, read_envelope, write_csv, write_envelope
from .vmm import inverse_controls

MANEUVERS = ("kl", "lcl", "lcr")
N_VEHICLES = 9
N_FEATURES = 4


@dataclass(frozen=True)
class GenConfig:
    n_scenarios: int = 9841
    lane_width: float = 3.4
    speed_min: float = 25.0
    speed_max: float = 40.0
    mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    tau: float = 0.2
    obs_rate_hz: float = 25.0
    t_obs_steps: int = 75
    t_pred_steps: int = 25
    min_neighbors: int = 3
    max_neighbors: int = 8
    accel_std: float = 0.15
    lc_duration_min: float = 3.0
    lc_duration_max: float = 5.0
    lc_center_min: float = 0.3
    lc_center_max: float = 1.5

    def __post_init__(self):
        if self.n_scenarios < 1 or self.t_obs_steps < 2 or self.t_pred_steps < 2:
            raise ConfigError("n_scenarios, t_obs_steps and t_pred_steps must be positive (steps >= 2)")
        if len(self.mix) != 3 or any(m < 0 for m in self.mix) or not math.isclose(sum(self.mix), 1.0, abs_tol=1e-9):
            raise ConfigError(f"maneuver mix must be 3 non-negative weights summing to 1, got {self.mix}")
        if not 0 < self.speed_min <= self.speed_max:
            raise ConfigError("speed range must satisfy 0 < speed_min <= speed_max")
        if not 0 <= self.min_neighbors <= self.max_neighbors <= N_VEHICLES - 1:
            raise ConfigError(f"neighbour counts must lie in [0, {N_VEHICLES - 1}]")
        if self.tau <= 0 or self.obs_rate_hz <= 0 or self.lane_width <= 0:
            raise ConfigError("tau, obs_rate_hz and lane_width must be positive")
        if not 0 < self.lc_duration_min <= self.lc_duration_max:
            raise ConfigError("lane-change duration range invalid")


@dataclass
class Dataset:
    """Stacked scenario records.

    Shapes: ``xi (M, N, F, T_obs)``, ``mask (M, N)``, ``Y (M, 2, T_pred)``,
    ``labels (M, 3)`` one-hot, ``x0 (M, 2, T_pred)`` controls,
    ``state0 (M, 4)`` rollout anchor ``[x, y, v, psi]``.
    """

    xi: np.ndarray
    mask: np.ndarray
    Y: np.ndarray
    labels: np.ndarray
    x0: np.ndarray
    state0: np.ndarray
    config: GenConfig = field(default_factory=GenConfig)

    def __len__(self) -> int:
        return len(self.xi)

    @property
    def label_index(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.xi[idx], self.mask[idx], self.Y[idx], self.labels[idx],
                       self.x0[idx], self.state0[idx], self.config)


def class_counts(n: int, mix) -> np.ndarray:
    """Largest-remainder allocation of ``n`` records over the maneuver mix."""
    raw = np.asarray(mix, dtype=np.float64) * n
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def _lateral(t: np.ndarray, label: int, width: float, t_c: float, scale: float, wobble) -> tuple:
    amp, freq, phase = wobble
    y = amp * np.sin(2 * math.pi * freq * t + phase)
    vy = amp * 2 * math.pi * freq * np.cos(2 * math.pi * freq * t + phase)
    if label:
        sign = 1.0 if label == 1 else -1.0
        sig = 1.0 / (1.0 + np.exp(-(t - t_c) / scale))
        y = y + sign * width * sig
        vy = vy + sign * width * sig * (1.0 - sig) / scale
    return y, vy


def _one_scenario(cfg: GenConfig, label: int, rng: np.random.Generator) -> dict:
    dt_obs = 1.0 / cfg.obs_rate_hz
    t_obs = (np.arange(cfg.t_obs_steps) - (cfg.t_obs_steps - 1)) * dt_obs
    t_fut = np.arange(-1, cfg.t_pred_steps + 1) * cfg.tau

    v0 = rng.uniform(cfg.speed_min, cfg.speed_max)
    acc = float(np.clip(rng.normal(0.0, cfg.accel_std), -3 * cfg.accel_std, 3 * cfg.accel_std))
    duration = rng.uniform(cfg.lc_duration_min, cfg.lc_duration_max)
    scale = duration / (2.0 * math.log(99.0))
    t_c = rng.uniform(cfg.lc_center_min, cfg.lc_center_max)
    wobble = (rng.uniform(0.0, 0.08), rng.uniform(0.05, 0.2), rng.uniform(0, 2 * math.pi))

    def target(t):
        x = v0 * t + 0.5 * acc * t * t
        vx = v0 + acc * t
        y, vy = _lateral(t, label, cfg.lane_width, t_c, scale, wobble)
        return x, y, vx, vy

    xi = np.zeros((N_VEHICLES, N_FEATURES, cfg.t_obs_steps))
    mask = np.zeros(N_VEHICLES)
    xi[0] = np.stack(target(t_obs))
    mask[0] = 1.0

    n_nb = int(rng.integers(cfg.min_neighbors, cfg.max_neighbors + 1))
    for j in range(1, n_nb + 1):
        lane = int(rng.integers(-1, 2))
        gap = rng.uniform(10.0, 60.0) * (1 if rng.random() < 0.5 else -1)
        vn = rng.uniform(cfg.speed_min, cfg.speed_max)
        yn = lane * cfg.lane_width + rng.normal(0.0, 0.1)
        xi[j, 0] = gap + vn * t_obs
        xi[j, 1] = yn
        xi[j, 2] = vn
        xi[j, 3] = 0.0
        mask[j] = 1.0

    fx, fy, _, _ = target(t_fut)
    pos = np.stack([fx, fy])
    u, s0 = inverse_controls(pos[:, 1:], cfg.tau, prev=pos[:, 0])
    return {
        "xi": xi, "mask": mask, "Y": pos[:, 2:], "x0": u.as_array(), "state0": s0.as_array(),
    }


def generate_dataset(cfg: GenConfig) -> Dataset:
    """Deterministic for a given config (including ``seed``)."""
    rng = np.random.default_rng(cfg.seed)
    counts = class_counts(cfg.n_scenarios, cfg.mix)
    labels = np.repeat(np.arange(3), counts)
    rng.shuffle(labels)
    recs = [_one_scenario(cfg, int(lab), rng) for lab in labels]
    onehot = np.eye(3)[labels]
    stack = {k: np.stack([r[k] for r in recs]) for k in recs[0]}
    return Dataset(stack["xi"], stack["mask"], stack["Y"], onehot, stack["x0"], stack["state0"], cfg)


def labels_from_future(Y: np.ndarray, lane_width: float) -> np.ndarray:
    """Recompute maneuver indices from the final lateral position."""
    y_end = np.asarray(Y)[..., 1, -1]
    out = np.zeros(y_end.shape, dtype=np.int64)
    out[y_end > lane_width / 2] = 1
    out[y_end < -lane_width / 2] = 2
    return out


def current_state(xi: np.ndarray) -> np.ndarray:
    """Target's current ``[x, y, v, psi]`` from the last observed frame."""
    last = np.asarray(xi)[..., 0, :, -1]
    vx, vy = last[..., 2], last[..., 3]
    return np.stack([last[..., 0], last[..., 1], np.hypot(vx, vy), np.arctan2(vy, vx)], axis=-1)


_GEN_SCALARS = [f.name for f in fields(GenConfig) if f.name != "mix"]


def save_dataset(ds: Dataset, path) -> None:
    cfg = ds.config
    header = {"kind": "dataset", "n": len(ds), "N": ds.xi.shape[1], "F": ds.xi.shape[2],
              "T_obs": ds.xi.shape[3], "T_pred": ds.Y.shape[2], "tau": cfg.tau, "seed": cfg.seed,
              "gen": {**{k: getattr(cfg, k) for k in _GEN_SCALARS}, "mix": list(cfg.mix)}}
    arrays = [("xi", ds.xi), ("mask", ds.mask), ("Y", ds.Y), ("labels", ds.labels),
              ("x0", ds.x0), ("state0", ds.state0)]
    write_envelope(path, DATASET_MAGIC, header, arrays)


def load_dataset(path) -> Dataset:
    header, arrays = read_envelope(path, DATASET_MAGIC)
    if header.get("kind") != "dataset":
        raise DataError(f"{path}: not a dataset file")
    gen = dict(header["gen"])
    gen["mix"] = tuple(gen["mix"])
    try:
        cfg = GenConfig(**gen)
    except (TypeError, ConfigError) as exc:
        raise DataError(f"{path}: bad generator header: {exc}") from exc
    return Dataset(arrays["xi"], arrays["mask"], arrays["Y"], arrays["labels"],
                   arrays["x0"], arrays["state0"], cfg)


def export_csv(ds: Dataset, path) -> None:
    """One row per scenario: label, anchor state, future positions and controls."""
    T = ds.Y.shape[2]
    header = (["index", "label", "x0_state", "y0_state", "v0_state", "psi0_state"]
              + [f"x_{k + 1}" for k in range(T)] + [f"y_{k + 1}" for k in range(T)]
              + [f"a_{k + 1}" for k in range(T)] + [f"yaw_{k + 1}" for k in range(T)])
    rows = []
    for i in range(len(ds)):
        rows.append([i, MANEUVERS[int(ds.label_index[i])], *map(float, ds.state0[i]),
                     *map(float, ds.Y[i, 0]), *map(float, ds.Y[i, 1]),
                     *map(float, ds.x0[i, 0]), *map(float, ds.x0[i, 1])])
    write_csv(path, header, rows)
