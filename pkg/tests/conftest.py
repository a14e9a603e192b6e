import functools

import numpy as np
import pytest

from landfill.cli import BUILTIN_CASES, CaseConfig
from landfill.oracle import solve_hjb
from landfill.synthesis import build_geometry

MONOD = CaseConfig(name="monod", mu_bar=1.0, Ks=2.0, Ki=None, a=0.1, M=1.3, S1_bar=0.15, S2_bar=0.05)
ALL_CASES = {**BUILTIN_CASES, MONOD.name: MONOD}

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict = {}


@functools.lru_cache(maxsize=None)
def geometry(name):
    cfg = ALL_CASES[name]
    return build_geometry(cfg.params, cfg.target)


@functools.lru_cache(maxsize=None)
def value_grid(name, n=128):
    cfg = ALL_CASES[name]
    return solve_hjb(cfg.params, cfg.target, n=n)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
