from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trajdiff import pipeline as pl
from trajdiff.scenario_gen import generate_dataset
from trajdiff.schedules import build_linear_schedule

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]
DESK_CONFIG = REPO / "configs" / "desk.cfg"


@pytest.fixture(scope="session")
def schedule():
    return build_linear_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Desk:
    """Context + denoiser trained once on the desk config, plus a held-out set."""

    def __init__(self):
        self.cfg, _ = pl.load_config(DESK_CONFIG)
        self.train = generate_dataset(self.cfg.gen)
        self.test = generate_dataset(replace(self.cfg.gen, seed=self.cfg.gen.seed + 1, n_scenarios=150))
        self.context, self.context_trace = pl.run_context_training(self.train, self.cfg)
        self.den, self.den_trace = pl.run_diffusion_training(self.train, self.context, self.cfg)
        self._preds = None

    @property
    def preds(self):
        if self._preds is None:
            self._preds = pl.predict_dataset(self.test, self.context, self.den, self.cfg)
        return self._preds


@pytest.fixture(scope="session")
def desk():
    return Desk()


TINY_CONFIG = """
seed = 3
gen.n_scenarios = 60
context.Q = 4
context.hidden = 16
context.latent_dim = 4
context.learning_rate = 1e-3
context.epochs = 2
train.batch_size = 32
train.learning_rate = 1e-3
train.epochs = 2
train.probe_size = 32
denoiser.hidden = 16
schedule.T = 100
"""


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CONFIG)
    return p


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` logs one PASS/FAIL line for acceptance criterion ``n``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
