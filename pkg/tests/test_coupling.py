import numpy as np
import pytest

from kdsde.components import (
    InvalidArgumentError,
    MeasureFlow,
    ParticleEnsemble,
    SimulationOptions,
    SubProbMeasure,
    TimeGrid,
    boundary_decay_check,
    build_projection_coupling,
    c2_terms,
    fit_c2_constant,
    fit_decay_constant,
    interval,
    pw_bound_terms,
    pw_rows,
)
from kdsde.components.killed_sde import brownian, mean_field
from kdsde.constants import Regime

GRID = TimeGrid(0.2, 4)
OPTIONS = SimulationOptions(dt=0.01)


def _initial(domain, x, n):
    return ParticleEnsemble.from_points(domain, np.full(n, x))


def _perturbed(domain, n=1000):
    coeffs = mean_field(lam=1.0)
    flow1 = MeasureFlow.constant(SubProbMeasure.dirac(domain, [0.5]), GRID)
    flow2 = MeasureFlow.constant(SubProbMeasure.dirac(domain, [0.8]), GRID)
    start = _initial(domain, 0.5, n)
    return build_projection_coupling(coeffs, flow1, flow2, 17, (start, start), OPTIONS)


def test_identical_systems(unit_interval, dirac):
    flow = MeasureFlow.constant(dirac(0.5), GRID)
    start = _initial(unit_interval, 0.5, 500)
    coupling = build_projection_coupling(brownian(), flow, flow, (4, 4), (start, start), OPTIONS)
    np.testing.assert_array_equal(coupling.positions1, coupling.positions2)
    np.testing.assert_array_equal(coupling.tau1, coupling.tau2)
    assert not np.any(coupling.regime == Regime.SECOND_DEAD)
    for row in pw_rows(coupling):
        assert row['lhs'] == pytest.approx(0.0, abs=1e-12)
        assert row['direct'] == 0.0
        assert row['killed1'] == 0.0 and row['killed2'] == 0.0
        assert row['pass']


def test_regimes_and_marginals(unit_interval):
    coupling = _perturbed(unit_interval)
    assert coupling.regime.shape == (len(GRID), len(coupling))
    for k in range(len(GRID)):
        both = coupling.alive1[k] & coupling.alive2[k]
        np.testing.assert_array_equal(coupling.regime[k] == Regime.BOTH_ALIVE, both)
        for which in (1, 2):
            paired = coupling.marginal(k, which)
            raw = coupling.output(k, which)
            assert paired.mass == pytest.approx(raw.mass)
            np.testing.assert_array_equal(paired.locations[paired.alive], raw.locations[raw.alive])


def test_second_dead_regime(unit_interval):
    coupling = _perturbed(unit_interval)
    k = len(GRID) - 1
    t = GRID.nodes[k]
    second_dead = coupling.regime[k] == Regime.SECOND_DEAD
    assert np.all(coupling.tau2[second_dead] < coupling.tau1[second_dead])
    assert np.all(coupling.tau2[second_dead] <= t)
    assert not np.any(unit_interval.contains(coupling.second[k, second_dead]))


def test_pw_bound_holds(unit_interval):
    coupling = _perturbed(unit_interval)
    rows = pw_rows(coupling)
    assert len(rows) == len(GRID)
    assert rows[0]['lhs'] == pytest.approx(0.0, abs=1e-12)
    for row in rows:
        assert row['pass']
        assert row['direct'] >= 0 and row['stderr'] >= 0


def test_pw_terms_band_width():
    domain = interval(0.0, 1.0, r0=0.25)
    coupling = _perturbed(domain, n=300)
    terms = pw_bound_terms(coupling, len(GRID) - 1)
    assert set(terms) >= {'t', 'lhs', 'coarsening_error', 'direct', 'killed1', 'killed2', 'stderr'}
    assert terms['t'] == pytest.approx(0.2)


def test_mismatched_seeds(unit_interval, dirac):
    flow = MeasureFlow.constant(dirac(0.5), GRID)
    start = _initial(unit_interval, 0.5, 10)
    with pytest.raises(InvalidArgumentError):
        build_projection_coupling(brownian(), flow, flow, (1, 2), (start, start), OPTIONS)


def test_mismatched_grids(unit_interval, dirac):
    start = _initial(unit_interval, 0.5, 10)
    with pytest.raises(InvalidArgumentError):
        build_projection_coupling(brownian(), MeasureFlow.constant(dirac(0.5), GRID),
                                  MeasureFlow.constant(dirac(0.5), TimeGrid(0.2, 2)), 1, (start, start), OPTIONS)


def test_boundary_decay_on_boundary(unit_interval):
    result = boundary_decay_check(brownian(), unit_interval, [0.0], 0.05, trials=10, c=1.0)
    assert result == {'lhs': 0.0, 'rhs': 0.0, 'stderr': 0.0, 'ratio': 0.0, 'passed': True}


def test_boundary_decay_fitted_constant(unit_interval):
    options = SimulationOptions(dt=1e-3, bridge_correction=True)
    points = [[0.04], [0.02]]
    c = fit_decay_constant(brownian(), unit_interval, points, 0.05, trials=2000, seed=1, options=options)
    assert c > 0
    for x in points:
        result = boundary_decay_check(brownian(), unit_interval, x, 0.05, trials=2000, c=c, seed=1,
                                      options=options)
        assert result['passed']
        assert result['ratio'] <= c + 1e-12


def test_c2_terms_identical(unit_interval, dirac):
    flow = MeasureFlow.constant(dirac(0.5), GRID)
    start = _initial(unit_interval, 0.5, 100)
    coupling = build_projection_coupling(brownian(), flow, flow, 2, (start, start), OPTIONS)
    terms = c2_terms(coupling, np.zeros(len(GRID)), lambda t: 1.0)
    np.testing.assert_allclose(terms['lhs'], 0.0)
    np.testing.assert_allclose(terms['integral'], 0.0)
    assert fit_c2_constant(terms) == 1.0


def test_fit_c2_constant():
    terms = {'lhs': np.array([0.1, 0.2]), 'initial': np.array([0.1, 0.1]), 'integral': np.array([0.0, 0.0])}
    assert fit_c2_constant(terms) == pytest.approx(4.0)
    terms['lhs'] = np.array([0.0, 0.3])
    terms['initial'] = np.zeros(2)
    assert fit_c2_constant(terms) == np.inf

