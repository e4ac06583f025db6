"""Shared fixtures: 64-bit default precision, tiny toy data and trained tiny models."""

from __future__ import annotations

import pytest

from jmvae import tensor as T
from jmvae.data import make_toy
from jmvae.models import build_model
from jmvae.training import TrainConfig, train

from helpers import TINY_ARCH


@pytest.fixture(autouse=True)
def _float64():
    with T.precision("float64"):
        yield


@pytest.fixture(scope="session")
def tiny_data():
    """4-pixel, 2-class toy data small enough for latent quadrature."""
    return make_toy(2, 4, 500, 0.1, 0), make_toy(2, 4, 50, 0.1, 1)


def _train_tiny(variant, tiny_data, alpha):
    tr, _ = tiny_data
    h = build_model(variant, tr.x_spec, tr.w_spec, TINY_ARCH, alpha=alpha, seed=0)
    cfg = TrainConfig(epochs=100, batch_size=50, warmup_epochs=25, alpha=alpha, seed=0, precision="float64")
    return train(h, tr, cfg)[0]


@pytest.fixture(scope="session")
def tiny_trained(tiny_data):
    """jmvae-kl with latent dim 1 trained for 100 epochs at 64-bit."""
    return _train_tiny("jmvae-kl", tiny_data, 0.1)


@pytest.fixture(scope="session")
def tiny_zero_trained(tiny_data):
    return _train_tiny("jmvae-zero", tiny_data, 0.0)


# -- acceptance reporting ----------------------------------------------------------------

_VERDICTS: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _VERDICTS.append((str(mark.args[0]), "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, verdict, detail in sorted(_VERDICTS, key=lambda v: int(v[0])):
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}")
