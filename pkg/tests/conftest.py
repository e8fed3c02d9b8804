import functools
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fragchoice.fixed_point import rate_from_solution, solve_FPsi, stationary_law
from fragchoice.rules import parse_rule

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@functools.lru_cache(maxsize=None)
def solved(rule_text, tol=1e-10):
    rule = parse_rule(rule_text)
    return rule, solve_FPsi(rule, tol=tol)


@functools.lru_cache(maxsize=None)
def psi_rate(rule_text):
    rule, F = solved(rule_text)
    return rate_from_solution(rule, F)


@functools.lru_cache(maxsize=None)
def psi_law(rule_text):
    return stationary_law(psi_rate(rule_text))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
