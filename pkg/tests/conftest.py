"""Shared fixtures: the five-seed reference experiment and the acceptance report."""
import time

import pytest

from gsde.config import ExperimentConfig
from gsde.data import reference_benchmark
from gsde.driver import run_experiment

REFERENCE_SEEDS = [0, 1, 2, 3, 4]
_REPORT: list[str] = []


def reference_config(**ablation) -> ExperimentConfig:
    cfg = ExperimentConfig(seeds=list(REFERENCE_SEEDS))
    for k, v in ablation.items():
        setattr(cfg.ablation, k, v)
    return cfg.validate()


def _run_reference(cfg):
    source, target = reference_benchmark()
    start = time.perf_counter()
    results = [run_experiment(cfg, source, target, seed) for seed in cfg.seeds]
    return results, time.perf_counter() - start


@pytest.fixture(scope="session")
def reference_experiment():
    """Default configuration on rotated two-moons, N = 5, 1000 iterations per run, 5 seeds."""
    return _run_reference(reference_config())


@pytest.fixture(scope="session")
def no_reinit_experiment():
    return _run_reference(reference_config(no_reinit=True))


@pytest.fixture(scope="session")
def acceptance_report():
    def record(criterion: int, ok: bool, detail: str) -> None:
        _REPORT.append(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(_REPORT[-1])
    return record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
