import numpy as np
import pytest

from kdsde.components import (
    InvalidArgumentError,
    LyapunovV,
    MeasureFlow,
    SubProbMeasure,
    TimeGrid,
    TransportSolverOptions,
    distance,
    flow_metric,
    interval,
    node_distances,
    reference_lp_cost,
    solve_plan,
    w1,
    w1_hat,
    weighted_variation,
)


def _random_measure(domain, rng, atoms):
    points = domain.sample_interior(atoms, rng)
    weights = rng.dirichlet(np.ones(atoms)) * rng.uniform(0.2, 1.0)
    return SubProbMeasure(domain, points, weights)


def test_w1_hat_identical(unit_interval, rng):
    mu = _random_measure(unit_interval, rng, 6)
    assert w1_hat(mu, mu) == pytest.approx(0.0, abs=1e-12)
    assert w1(mu, mu) == pytest.approx(0.0, abs=1e-12)


def test_w1_hat_direct_match(dirac):
    assert w1_hat(dirac(0.2), dirac(0.5)) == pytest.approx(0.3)


def test_w1_hat_against_zero(dirac, unit_interval):
    assert w1_hat(dirac(0.1, 0.5), SubProbMeasure.zero(unit_interval)) == pytest.approx(0.05)


def test_w1_via_boundary(dirac, unit_interval):
    assert w1(dirac(0.2), dirac(0.9)) == pytest.approx(0.3)
    assert w1(dirac(0.5, 0.5), SubProbMeasure.zero(unit_interval)) == pytest.approx(0.25)


def test_truncation():
    wide = interval(0.0, 10.0)
    mu = SubProbMeasure.dirac(wide, [3.0])
    nu = SubProbMeasure.dirac(wide, [6.0])
    assert w1(mu, nu) == pytest.approx(3.0)
    assert w1_hat(mu, nu) == pytest.approx(1.0)


def test_both_zero(unit_interval):
    zero = SubProbMeasure.zero(unit_interval)
    plan = solve_plan(zero, zero)
    assert plan.cost == 0.0


def test_plan_marginals(unit_interval, rng):
    mu = _random_measure(unit_interval, rng, 5)
    nu = _random_measure(unit_interval, rng, 7)
    plan = solve_plan(mu, nu)
    assert plan.check_marginals()
    assert plan.recompute_cost(truncated=True) == pytest.approx(plan.cost, rel=1e-9)
    summary = plan.summary()
    assert summary['to_boundary'] + summary['matched'] == pytest.approx(mu.mass, abs=1e-9)
    assert summary['from_boundary'] + summary['matched'] == pytest.approx(nu.mass, abs=1e-9)


@pytest.mark.parametrize('truncated', [True, False])
def test_matches_reference_lp(unit_disc, rng, truncated):
    for _ in range(5):
        mu = _random_measure(unit_disc, rng, 4)
        nu = _random_measure(unit_disc, rng, 3)
        exact = solve_plan(mu, nu, truncated=truncated).cost
        assert exact == pytest.approx(reference_lp_cost(mu, nu, truncated=truncated), abs=1e-9)


def test_sinkhorn_close_to_exact(dirac):
    options = TransportSolverOptions(method='sinkhorn')
    plan = solve_plan(dirac(0.2), dirac(0.5), options=options)
    assert plan.stats['method'] == 'sinkhorn'
    assert plan.cost == pytest.approx(0.3, abs=0.02)


def test_coarsening_error_reported(unit_interval, rng):
    mu = SubProbMeasure.empirical(unit_interval, rng.uniform(0.0, 1.0, size=600))
    nu = SubProbMeasure.empirical(unit_interval, rng.uniform(0.0, 1.0, size=600))
    exact = solve_plan(mu, nu)
    coarse = solve_plan(mu, nu, options=TransportSolverOptions(max_atoms=100))
    assert coarse.stats['coarsening_error'] > 0
    assert abs(coarse.cost - exact.cost) <= coarse.stats['coarsening_error'] + 1e-9


def test_different_domains(dirac):
    other = SubProbMeasure.dirac(interval(0.0, 2.0), [0.5])
    with pytest.raises(InvalidArgumentError):
        w1_hat(dirac(0.5), other)


def test_weighted_variation_shared_atoms(unit_interval):
    V = LyapunovV.quadratic(1)
    mu = SubProbMeasure.dirac(unit_interval, [0.5], 0.7)
    nu = SubProbMeasure.dirac(unit_interval, [0.5], 0.4)
    assert weighted_variation(mu, nu, V) == pytest.approx(0.375)
    assert weighted_variation(mu, mu, V) == 0.0


def test_weighted_variation_binned(dirac):
    V = LyapunovV.constant(1)
    assert weighted_variation(dirac(0.2), dirac(0.8), V, bins=4) == pytest.approx(2.0)
    with pytest.raises(InvalidArgumentError):
        weighted_variation(dirac(0.2), dirac(0.8), V)


def test_distance_dispatch(dirac):
    assert distance(dirac(0.2), dirac(0.5), 'w1_hat') == pytest.approx(0.3)
    with pytest.raises(InvalidArgumentError):
        distance(dirac(0.2), dirac(0.5), 'weighted_variation')
    with pytest.raises(InvalidArgumentError):
        distance(dirac(0.2), dirac(0.5), 'hellinger')


def test_flow_metric(dirac):
    grid = TimeGrid(1.0, 2)
    f1 = MeasureFlow.constant(dirac(0.2), grid)
    f2 = MeasureFlow.constant(dirac(0.5), grid)
    assert flow_metric(f1, f1, 'w1_hat', theta=1.0) == pytest.approx(0.0, abs=1e-12)
    assert flow_metric(f1, f2, 'w1_hat', theta=0.0) == pytest.approx(0.3)
    assert flow_metric(f1, f2, 'w1_hat', theta=5.0) == pytest.approx(0.3)
    with pytest.raises(InvalidArgumentError):
        flow_metric(f1, f2, 'w1_hat', theta=-1.0)


def test_flow_metric_discounts_late_nodes(dirac):
    grid = TimeGrid(1.0, 1)
    f1 = MeasureFlow(grid, [dirac(0.5), dirac(0.2)])
    f2 = MeasureFlow(grid, [dirac(0.5), dirac(0.5)])
    assert flow_metric(f1, f2, 'w1_hat', theta=2.0) == pytest.approx(0.3 * np.exp(-2.0))


def test_node_distances_threads(dirac):
    grid = TimeGrid(1.0, 3)
    f1 = MeasureFlow(grid, [dirac(0.5), dirac(0.4), dirac(0.3), dirac(0.2)])
    f2 = MeasureFlow.constant(dirac(0.5), grid)
    np.testing.assert_allclose(node_distances(f1, f2, 'w1_hat', threads=2),
                               node_distances(f1, f2, 'w1_hat'))
    np.testing.assert_allclose(node_distances(f1, f2, 'w1_hat'), [0.0, 0.1, 0.2, 0.3], atol=1e-12)


def test_node_distances_grid_mismatch(dirac):
    f1 = MeasureFlow.constant(dirac(0.5), TimeGrid(1.0, 2))
    f2 = MeasureFlow.constant(dirac(0.5), TimeGrid(1.0, 3))
    with pytest.raises(InvalidArgumentError):
        node_distances(f1, f2, 'w1_hat')
