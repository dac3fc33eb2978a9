"""End-to-end orchestration: configs, training stages, prediction and run outputs.

A run is fully described by :class:`RunConfig`, which can be read from a
key-value text file. Keys are dotted (``context.Q = 30``) or grouped under
``[section]`` headers; a bare ``seed`` sets every stage's seed at once.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .context import ContextConfig, ContextModel, dead_fraction, perplexity, train_context
from .denoiser import MLPDenoiser, TrainConfig, sample_controls, train
from .guidance import GuidanceConfig, w_max
from .io import ConfigError, DataError, read_csv, write_csv
from .metrics import (MetricReport, average_reports, cluster_kl_report, constant_velocity, ade, fde,
                      evaluate_prediction)
from .multimodal import BICSelection, HypothesisSet, hypotheses_from_samples, mean_trajectory
from .scenario_gen import MANEUVERS, Dataset, GenConfig, current_state
from .schedules import NoiseSchedule, build_linear_schedule
from .vmm import rollout_array

CONFIG_DIR_ENV = "TRAJDIFF_CONFIG_DIR"
DEFAULT_CONFIG_NAME = "default.cfg"


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class ArchConfig:
    hidden: int = 128
    depth: int = 3
    t_dim: int = 16
    cond_dim: int = 16


@dataclass(frozen=True)
class SamplingConfig:
    n_samples: int = 9
    ddim_steps: int = 10
    eta: float = 0.0
    c_max: int = 3
    restarts: int = 5
    pca_dim: int = 2
    squared_metrics: bool = False
    kl_bins: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.ddim_steps < 1 or self.c_max < 1 or self.restarts < 1:
            raise ConfigError("n_samples, ddim_steps, c_max and restarts must be positive")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.kl_bins < 1 or self.pca_dim < 1:
            raise ConfigError("kl_bins and pca_dim must be positive")


SECTIONS = {
    "gen": GenConfig,
    "context": ContextConfig,
    "schedule": ScheduleConfig,
    "guidance": GuidanceConfig,
    "denoiser": ArchConfig,
    "train": TrainConfig,
    "sampling": SamplingConfig,
}
SEED_FIELDS = {"gen": "seed", "context": "seed", "train": "rng_seed", "sampling": "seed"}


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    denoiser: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, **{sec: replace(getattr(self, sec), **{name: int(seed)})
                                for sec, name in SEED_FIELDS.items()})

    def seeds(self) -> dict[str, int]:
        return {sec: getattr(getattr(self, sec), name) for sec, name in SEED_FIELDS.items()}

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(Fraction(raw)) if "/" in raw else float(raw)
        if isinstance(default, tuple):
            return tuple(float(Fraction(v.strip())) for v in raw.split(","))
        return raw
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> RunConfig:
    """Build a :class:`RunConfig` from key-value text; unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__",
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    seed = None
    overrides: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            full = key if section == "__root__" else f"{section}.{key}"
            if full == "seed":
                seed = raw
                continue
            sec, _, name = full.partition(".")
            if sec not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {full!r}")
            overrides.setdefault(sec, {})[name] = raw
    cfg = RunConfig()
    if seed is not None:
        cfg = cfg.with_seed(_coerce(seed, 0, "seed"))
    parts = {}
    for sec, raws in overrides.items():
        current = getattr(cfg, sec)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        vals = {}
        for name, raw in raws.items():
            if name not in known:
                raise ConfigError(f"unknown config key {sec}.{name!r}")
            vals[name] = _coerce(raw, known[name], f"{sec}.{name}")
        try:
            parts[sec] = replace(current, **vals)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid [{sec}] settings: {exc}") from exc
    return replace(cfg, **parts)


def resolve_config_path(path, env=None) -> Path | None:
    """Locate a config file; relative names fall back to the config-dir variable.

    With no path, ``default.cfg`` in that directory is used when present.
    """
    env = os.environ if env is None else env
    cfg_dir = env.get(CONFIG_DIR_ENV)
    if path is None:
        if cfg_dir and (Path(cfg_dir) / DEFAULT_CONFIG_NAME).is_file():
            return Path(cfg_dir) / DEFAULT_CONFIG_NAME
        return None
    p = Path(path)
    if p.is_file():
        return p
    if cfg_dir and not p.is_absolute() and (Path(cfg_dir) / p).is_file():
        return Path(cfg_dir) / p
    raise ConfigError(f"config file not found: {path}")


def load_config(path=None, seed: int | None = None, env=None) -> tuple[RunConfig, str | None]:
    """Return the run config and the SHA-256 of the config file (``None`` for defaults)."""
    found = resolve_config_path(path, env)
    if found is None:
        cfg, file_hash = RunConfig(), None
    else:
        raw = found.read_bytes()
        cfg, file_hash = parse_config_text(raw.decode("utf-8")), hashlib.sha256(raw).hexdigest()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg, file_hash


# training stages

def run_context_training(ds: Dataset, cfg: RunConfig, out=None) -> tuple[ContextModel, list[float]]:
    """Train and freeze the context module; every training scenario must get a valid token."""
    model, trace = train_context(ds.xi, ds.labels, cfg.context)
    q, _, _ = model.tokenize(ds.xi)
    if np.any(q < 1) or np.any(q > cfg.context.Q):
        raise DataError("tokenization produced an out-of-range token")
    if out is not None:
        model.save(out)
    return model, trace


def run_diffusion_training(ds: Dataset, context: ContextModel, cfg: RunConfig,
                           out=None) -> tuple[MLPDenoiser, list[float]]:
    """Label the data with frozen context tokens and fit the denoiser on the controls."""
    tokens, _, _ = context.tokenize(ds.xi)
    s = cfg.schedule.build()
    init_rng = np.random.default_rng([cfg.train.rng_seed, 1])
    den = MLPDenoiser(ds.Y.shape[2], context.cfg.Q, s.T, init_rng, **asdict(cfg.denoiser))
    den.meta = {"schedule": asdict(cfg.schedule), "tau": ds.config.tau}
    den, trace = train(den, ds.x0, tokens, s, cfg.train)
    if out is not None:
        den.save(out)
    return den, trace


def schedule_of(den: MLPDenoiser) -> NoiseSchedule:
    sched = den.meta.get("schedule")
    s = ScheduleConfig(**sched).build() if sched else build_linear_schedule(den.T)
    if s.T != den.T:
        raise DataError(f"denoiser was trained with T={den.T}, schedule has T={s.T}")
    return s


def check_compatible(context: ContextModel, den: MLPDenoiser) -> None:
    if context.cfg.Q != den.Q:
        raise DataError(f"context codebook has Q={context.cfg.Q} but the denoiser expects Q={den.Q}")


# prediction

@dataclass
class Prediction:
    token: int
    delta: float
    w_max: float
    controls: np.ndarray
    samples: np.ndarray
    mean: np.ndarray
    hypotheses: HypothesisSet
    selection: BICSelection | None
    n_evals: int
    report: MetricReport | None = None


def run_prediction(xi, context: ContextModel, den: MLPDenoiser, sampling: SamplingConfig,
                   guidance: GuidanceConfig, rng: np.random.Generator, gt=None) -> Prediction:
    """Predict one scenario ``xi (N, F, T_obs)``; ``gt (2, T_pred)`` is optional.

    The uncertainty score is computed once from the latent and reused at
    every sampling step. Trajectories are rolled out from the target's
    current state.
    """
    check_compatible(context, den)
    s = schedule_of(den)
    tau = float(den.meta.get("tau", 0.2))
    xi = np.asarray(xi, dtype=np.float64)
    q, _, delta = context.tokenize(xi[None])
    token, d = int(q[0]), float(delta[0])
    before = den.n_evals
    controls = sample_controls(den, s, token, d, guidance, sampling.ddim_steps, sampling.n_samples, rng,
                               eta=sampling.eta)
    n_evals = den.n_evals - before
    samples = rollout_array(current_state(xi), controls, tau)
    hyps, sel = hypotheses_from_samples(samples, sampling.c_max, rng, sampling.restarts, sampling.pca_dim)
    mean = mean_trajectory(samples)
    report = None
    if gt is not None:
        report = evaluate_prediction(mean, hyps, gt, sampling.squared_metrics)
    return Prediction(token, d, w_max(d, guidance), controls, samples, mean, hyps, sel, n_evals, report)


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    """Per-scenario stream, independent of which other scenarios are predicted."""
    return np.random.default_rng([int(seed), int(index)])


def predict_dataset(ds: Dataset, context: ContextModel, den: MLPDenoiser, cfg: RunConfig,
                    indices=None, with_gt: bool = True) -> list[tuple[int, Prediction]]:
    indices = range(len(ds)) if indices is None else indices
    out = []
    for i in indices:
        i = int(i)
        gt = ds.Y[i] if with_gt else None
        out.append((i, run_prediction(ds.xi[i], context, den, cfg.sampling, cfg.guidance,
                                      scenario_rng(cfg.sampling.seed, i), gt)))
    return out


# prediction directory layout

def _traj_header(T: int) -> list[str]:
    return [f"x_{k + 1}" for k in range(T)] + [f"y_{k + 1}" for k in range(T)]


def _scenario_name(i: int) -> str:
    return f"scenario_{i:05d}.csv"


def write_predictions(out_dir, preds: list[tuple[int, Prediction]]) -> list[str]:
    """Write sample, hypothesis and summary CSVs; returns the relative file names."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    (out / "hypotheses").mkdir(parents=True, exist_ok=True)
    names = []
    summary = []
    for i, p in preds:
        T = p.samples.shape[2]
        rows = [[k, *map(float, traj.ravel())] for k, traj in enumerate(p.samples)]
        write_csv(out / "samples" / _scenario_name(i), ["sample", *_traj_header(T)], rows)
        hrows = []
        for c, (mean, members, frac) in enumerate(zip(p.hypotheses.means, p.hypotheses.members,
                                                      p.hypotheses.fractions)):
            hrows.append([c, float(frac), frac.numerator, frac.denominator,
                          " ".join(str(int(m)) for m in members), *map(float, mean.ravel())])
        write_csv(out / "hypotheses" / _scenario_name(i),
                  ["hypothesis", "p_c", "p_num", "p_den", "members", *_traj_header(T)], hrows)
        names += [f"samples/{_scenario_name(i)}", f"hypotheses/{_scenario_name(i)}"]
        summary.append([i, p.token, p.delta, p.w_max, len(p.hypotheses),
                        p.selection.C if p.selection else 1, p.n_evals])
    write_csv(out / "scenarios.csv", ["index", "token", "delta", "w_max", "n_hypotheses", "bic_c", "n_evals"],
              summary)
    return names + ["scenarios.csv"]


@dataclass
class StoredPrediction:
    index: int
    token: int
    delta: float
    samples: np.ndarray
    hyp_means: np.ndarray
    hyp_fractions: list[Fraction]
    hyp_members: list[np.ndarray]

    @property
    def hypotheses(self) -> HypothesisSet:
        return HypothesisSet(self.hyp_means, self.hyp_members, len(self.samples))


def _trajs(rows, start: int) -> np.ndarray:
    vals = np.array([[float(v) for v in r[start:]] for r in rows])
    return vals.reshape(len(rows), 2, -1)


def read_predictions(pred_dir) -> list[StoredPrediction]:
    base = Path(pred_dir)
    _, rows = read_csv(base / "scenarios.csv")
    out = []
    for r in rows:
        i = int(r[0])
        _, srows = read_csv(base / "samples" / _scenario_name(i))
        _, hrows = read_csv(base / "hypotheses" / _scenario_name(i))
        if not srows or not hrows:
            raise DataError(f"{pred_dir}: empty prediction files for scenario {i}")
        out.append(StoredPrediction(
            i, int(r[1]), float(r[2]), _trajs(srows, 1), _trajs(hrows, 5),
            [Fraction(int(h[2]), int(h[3])) for h in hrows],
            [np.array([int(m) for m in h[4].split()], dtype=np.int64) for h in hrows]))
    return out


# evaluation

def evaluate_predictions(stored: list[StoredPrediction], ds: Dataset, squared: bool = False) -> tuple[list, dict]:
    """Per-scenario rows (with the constant-velocity baseline) and a summary dict."""
    rows, reports, by_label = [], [], {m: [] for m in MANEUVERS}
    cv_ade, cv_fde = [], []
    tau = ds.config.tau
    for sp in stored:
        if not 0 <= sp.index < len(ds):
            raise DataError(f"prediction index {sp.index} not in dataset of {len(ds)}")
        gt = ds.Y[sp.index]
        rep = evaluate_prediction(sp.samples.mean(axis=0), sp.hypotheses, gt, squared)
        cv = constant_velocity(ds.xi[sp.index], gt.shape[1], tau)
        label = MANEUVERS[int(ds.label_index[sp.index])]
        a, f = float(ade(cv, gt, squared)), float(fde(cv, gt, squared=squared))
        rows.append([sp.index, label, *rep.as_row(), a, f])
        reports.append(rep)
        by_label[label].append(rep)
        cv_ade.append(a)
        cv_fde.append(f)
    summary = {
        "n": len(reports),
        "overall": average_reports(reports),
        "by_label": {k: average_reports(v) for k, v in by_label.items() if v},
        "constant_velocity": {"ade": float(np.mean(cv_ade)) if cv_ade else math.nan,
                              "fde": float(np.mean(cv_fde)) if cv_fde else math.nan},
        "squared": squared,
    }
    return rows, summary


REPORT_HEADER = ["index", "label", *MetricReport.columns(), "cv_ade", "cv_fde"]


def kl_diagnostic(stored: list[StoredPrediction], ds: Dataset, bins: int = 32):
    """Per-token KL between ground-truth and generated endpoint sets."""
    truth: dict[int, list] = {}
    generated: dict[int, list] = {}
    for sp in stored:
        truth.setdefault(sp.token, []).append(ds.Y[sp.index][:, -1])
        generated.setdefault(sp.token, []).extend(sp.samples[:, :, -1])
    return cluster_kl_report({q: np.array(v) for q, v in truth.items()},
                             {q: np.array(v) for q, v in generated.items()}, bins)


# ablation over the codebook size

def run_ablation(train_ds: Dataset, eval_ds: Dataset, cfg: RunConfig, grid, indices=None) -> list[list]:
    """Retrain context and denoiser for each ``Q`` and evaluate; one row per ``Q``."""
    rows = []
    for Q in grid:
        cq = replace(cfg, context=replace(cfg.context, Q=int(Q)))
        context, _ = run_context_training(train_ds, cq)
        den, _ = run_diffusion_training(train_ds, context, cq)
        preds = predict_dataset(eval_ds, context, den, cq, indices)
        avg = average_reports(p.report for _, p in preds)
        usage = context.codebook.usage
        rows.append([int(Q), *[avg[c] for c in MetricReport.columns()], perplexity(usage),
                     dead_fraction(usage, cq.context.dead_threshold)])
    return rows


ABLATION_HEADER = ["Q", *MetricReport.columns(), "perplexity", "dead_fraction"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest(command: str, cfg: RunConfig, config_hash: str | None, inputs: dict, outputs: list[str],
             extra: dict | None = None) -> dict:
    """Run record. Output locations are stored relative to the output, so reruns compare byte for byte."""
    return {
        "command": command,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "config_file_sha256": config_hash,
        "seeds": cfg.seeds(),
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in sorted(inputs.items())},
        "outputs": sorted(outputs),
        **(extra or {}),
    }


def write_json(path, obj) -> None:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v
    Path(path).write_text(json.dumps(clean(obj), indent=2, sort_keys=True) + "\n")
