"""The diagnostics harness is itself under test: determinism, slack-tolerance
behavior, and zero failures at default tolerances."""

import dataclasses

import pytest

from splatroom.diagnostics import (ALL_CHECKS, SLOW_CHECKS, run_equivalence_suite,
                                   run_gradient_suite)


@pytest.fixture(scope="module")
def gradient_reports():
    return run_gradient_suite(seed=42)


@pytest.fixture(scope="module")
def equivalence_reports():
    return run_equivalence_suite(seed=42)


def test_gradient_suite_deterministic(gradient_reports):
    again = run_gradient_suite(seed=42)
    for a, b in zip(gradient_reports, again):
        assert a.name == b.name
        assert a.max_abs == b.max_abs
        assert a.max_rel == b.max_rel
        assert a.n_probes == b.n_probes


def test_gradient_suite_passes_at_default_tolerances(gradient_reports):
    failures = [r.name for r in gradient_reports if not r.passed]
    assert failures == []


def test_gradient_suite_probe_budget(gradient_reports):
    assert sum(r.n_probes for r in gradient_reports) >= 200


def test_equivalence_suite_passes(equivalence_reports):
    failures = [r.name for r in equivalence_reports if not r.passed]
    assert failures == []


def test_infinite_tolerance_always_passes(gradient_reports):
    for rep in gradient_reports:
        relaxed = dataclasses.replace(rep, tolerance=float("inf"))
        assert relaxed.max_rel <= relaxed.tolerance


def test_every_check_has_unique_name(gradient_reports, equivalence_reports):
    names = [r.name for r in gradient_reports + equivalence_reports]
    assert len(names) == len(set(names))
    # the slow end-to-end checks are registered with their test locations
    assert len(ALL_CHECKS) == len(names)
    assert all(isinstance(loc, str) for loc in SLOW_CHECKS.values())


def test_report_line_format(gradient_reports):
    line = gradient_reports[0].line()
    assert line.startswith("[PASS]") or line.startswith("[FAIL]")
    assert "tol" in line
