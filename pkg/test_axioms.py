"""
Runs the axiom battery at a reduced trial count.
"""

import json

import pytest

import axioms
from axioms import AxiomCheck, expected_bins_1000, format_report, report_json, run_battery


@pytest.mark.parametrize("check", axioms.CHECKS, ids=lambda c: c.__name__)
def test_check_passes(check):
    result = check(scale=0.1, seed=0)
    assert result.passed, f"{result.name}: {result.detail}"


def test_expected_bins():
    bins = expected_bins_1000()
    assert bins[:10] == list(range(1, 11))
    assert bins[-1] == 1000
    assert 990 in bins and 850 in bins


def test_battery_reports_raising_checks(monkeypatch):
    def broken(scale=1.0, seed=0):
        raise RuntimeError("boom")

    def fine(scale=1.0, seed=0):
        return AxiomCheck("fine", True, "ok")

    monkeypatch.setattr(axioms, "CHECKS", [fine, broken])
    results = run_battery()
    assert [(r.name, r.passed) for r in results] == [("fine", True), ("broken", False)]
    assert "RuntimeError" in results[1].detail

    report = format_report(results)
    assert "✅ PASS: fine: ok" in report
    assert "❌ FAIL: broken" in report
    assert "Total: 1/2 checks passed" in report
    assert json.loads(report_json(results))["all_passed"] is False
