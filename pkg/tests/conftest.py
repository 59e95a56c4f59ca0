import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from magmap.ingest import merge_observations, preprocess
from magmap.mapping import GridSpec, build_compromise, build_intermediate, generate_grid
from magmap.sim import CAMPAIGN_TRAIN, CAMPAIGN_VALIDATE, load_environment, survey_campaign

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary (and print it)."""

    def _report(number, name, ok, detail):
        line = f"[{number:>2}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _report


@dataclass
class Campaign:
    """Four training and four held-out flights at 2 Hz plus the intermediate map."""

    train: list
    val: list
    observations: object
    intermediate: object
    build_seconds: float
    compromise: object = None
    extra: dict = field(default_factory=dict)


def _campaign(bias_sd, seed, series):
    env = load_environment()
    t0 = time.perf_counter()
    train_logs = survey_campaign(env, CAMPAIGN_TRAIN, bias_sd=bias_sd, seed=seed, series=series, first=0)
    val_logs = survey_campaign(env, CAMPAIGN_VALIDATE, bias_sd=bias_sd, seed=seed + 1, series=series, first=10)
    train = [preprocess(log, 2.0) for log in train_logs]
    val = [preprocess(log, 2.0) for log in val_logs]
    obs = merge_observations(train)
    inter = build_intermediate(obs)
    comp = build_compromise(inter, generate_grid(GridSpec()), GridSpec())
    return Campaign(train, val, obs, inter, time.perf_counter() - t0, comp)


@pytest.fixture(scope="session")
def env():
    return load_environment()


@pytest.fixture(scope="session")
def quiet_campaign():
    """Sensor noise and spikes only; no flight-to-flight bias."""
    return _campaign(bias_sd=0.0, seed=2101, series=7)


@pytest.fixture(scope="session")
def biased_campaign():
    """Per-flight constant biases drawn with SD 0.5 uT per axis."""
    return _campaign(bias_sd=0.5, seed=2201, series=6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
