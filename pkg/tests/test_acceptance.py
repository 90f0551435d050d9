import math
from types import SimpleNamespace

import pytest

from kdsde.components import (
    CRITERIA,
    ErrorStatus,
    FailStatus,
    MeasureFlow,
    NumericError,
    PassStatus,
    UnknownComponentError,
    acceptance_suite,
    criterion,
    run_suite,
)
from kdsde.constants import Tier


def test_registry():
    assert {f'A{k}' for k in range(1, 12)} <= set(CRITERIA)
    for entry in CRITERIA.values():
        assert entry.description
        assert entry.threshold > 0


def test_unknown_criterion():
    with pytest.raises(UnknownComponentError):
        run_suite(names=['A99'])


def test_unknown_tier():
    with pytest.raises(UnknownComponentError):
        run_suite(tier='huge', names=['A2'])


@pytest.mark.parametrize('name', ['A2', 'A3'])
def test_exact_criteria_pass(name):
    result, = run_suite(names=[name], seed=1)
    assert result.passed
    assert result.status is PassStatus
    assert result.row(Tier.FAST) == (name, Tier.FAST, result.observed, result.threshold, 'PASS')


def test_cir_criterion():
    result, = run_suite(names=['A10'], particles=2000)
    assert result.passed
    assert result.details['frozen_max'] == 0.0


def test_tolerance_override_fails():
    result, = run_suite(names=['A1'], particles=2000, tolerance_override=0.0)
    assert result.threshold == 0.0
    assert result.observed > 0
    assert result.status is FailStatus


def test_errors_are_reported(monkeypatch):
    monkeypatch.setattr('kdsde.components.acceptance.CRITERIA', dict(CRITERIA))

    @criterion('A0', 'always raises')
    def broken(ctx):
        raise NumericError("overflow")

    result, = run_suite(names=['A0'])
    assert math.isinf(result.observed)
    assert not result.passed
    assert result.status is ErrorStatus
    assert 'A0' not in CRITERIA


def test_acceptance_suite_tier():
    with pytest.raises(UnknownComponentError):
        acceptance_suite(tier='huge')


def test_lipschitz_stability_uses_five_fresh_seeds(monkeypatch):
    seeds = []

    def solve(coeffs, gamma, config):
        seeds.append(config.seed)
        return SimpleNamespace(flow=MeasureFlow.constant(gamma, config.grid))

    monkeypatch.setattr('kdsde.components.acceptance.picard_solve', solve)
    result, = run_suite(names=['A5'], particles=50, seed=4)
    assert result.passed
    assert len(result.details['fresh']) == 5
    assert sorted(set(seeds)) == [4, 104, 105, 106, 107, 108]
