import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from remamba import ssm
from remamba.compression import ScorerParams

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def small_model(seed=0, layers=2, H=6, Hp=8, N=4, V=16):
    return ssm.MambaLM.init(ssm.ModelConfig(layers, H, Hp, N, V), seed)


def randomize_theta(model, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        layer.theta.data[...] = scale * rng.standard_normal(layer.theta.shape)
    return model


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def scorer():
    return ScorerParams.init(6, 1)


# -- acceptance summary ---------------------------------------------------------

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::test_criterion_", 1)[1]
        notes = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        _CRITERIA[name] = ("PASS" if report.passed else report.outcome.upper(), notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_", 1)[0])):
        outcome, notes = _CRITERIA[name]
        number, label = name.split("_", 1)
        line = f"criterion {number} ({label.replace('_', ' ')}): {outcome}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))
