"""Shared fixtures: a small grid and its KLE basis, built once per session."""

import numpy as np
import pytest

from aquinv.grid import Grid
from aquinv.kle import CovarianceSpec, build_basis

SMALL = Grid(height_cells=11, width_cells=21)


@pytest.fixture(scope="session")
def small_grid():
    return SMALL


@pytest.fixture(scope="session")
def small_basis():
    return build_basis(SMALL, CovarianceSpec(), 0.95)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TOY = Grid(height_cells=13, width_cells=25)


@pytest.fixture(scope="session")
def toy_runs():
    """Eight forward runs on a 13 x 25 grid, as a SimulationSet."""
    from aquinv.evaluators import sample_prior
    from aquinv.forward import ForwardConfig, ForwardModel
    from aquinv.grid import unpack
    from aquinv.nn.data import SimulationSet, inputs_for

    basis = build_basis(TOY, CovarianceSpec(), 0.9)
    model = ForwardModel(ForwardConfig(grid=TOY), basis)
    params = [unpack(p, basis.n_kl) for p in sample_prior(8, basis.n_kl, 0)]
    outs = [model.run(p) for p in params]
    images, cells, n_release = inputs_for(TOY, [p.source for p in params], 7)
    return SimulationSet(np.array([o.log_k for o in outs]), images, np.array([o.head for o in outs]),
                         np.array([o.concentrations for o in outs]), cells, n_release)


@pytest.fixture(scope="session")
def toy_spec():
    from aquinv.nn.network import NetworkSpec

    return NetworkSpec(init_features=8, blocks=(2, 2, 2), growth=8, height=13, width=25)


# acceptance criteria: one pass/fail line each in the terminal summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(f"{k} {v}" for k, v in item.user_properties)
    status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
    _CRITERIA[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
