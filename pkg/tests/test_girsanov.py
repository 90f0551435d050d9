import numpy as np
import pytest

from kdsde.components import (
    BaseRun,
    IndeterminateRatioError,
    InvalidArgumentError,
    LyapunovV,
    MeasureFlow,
    ParticleEnsemble,
    PicardConfig,
    SimulationOptions,
    SingularityError,
    SubProbMeasure,
    TimeGrid,
    calibrate_v_constant,
    moment_bound_check,
    picard_solve,
    reweight_flow,
    v_contraction_check,
    v_node_distances,
)
from kdsde.components.girsanov import capped
from kdsde.components.killed_sde import brownian, expression, linear, lyapunov_feedback, mass_coupled, simulate_flow

GRID = TimeGrid(0.2, 4)
OPTIONS = SimulationOptions(dt=0.01)


def _flows(dirac):
    return MeasureFlow.constant(dirac(0.5), GRID), MeasureFlow.constant(dirac(0.5, 0.5), GRID)


def _base(coeffs, flow, domain, n=2000, seed=5):
    initial = ParticleEnsemble.from_points(domain, np.full(n, 0.5))
    return BaseRun(coeffs, flow, initial, seed, OPTIONS)


def test_replay_is_exact(unit_interval, dirac):
    flow1, _ = _flows(dirac)
    base = _base(mass_coupled(), flow1, unit_interval, n=200)
    _, again = base.replay()
    for mu, nu in zip(base.output, again):
        np.testing.assert_array_equal(mu.locations, nu.locations)
        np.testing.assert_array_equal(mu.alive, nu.alive)


def test_same_flow_gives_unit_weights(unit_interval, dirac):
    flow1, _ = _flows(dirac)
    base = _base(mass_coupled(), flow1, unit_interval, n=300)
    reweighted = reweight_flow(mass_coupled(), flow1, flow1, base)
    np.testing.assert_allclose(reweighted.weights, 1.0)
    np.testing.assert_allclose(reweighted.ess(), 300)
    np.testing.assert_allclose(v_node_distances(base.output, reweighted.flow, LyapunovV.constant(1)), 0.0,
                               atol=1e-12)


def test_weights_are_a_martingale(unit_interval, dirac):
    flow1, flow2 = _flows(dirac)
    coeffs = mass_coupled(coupling=0.5)
    reweighted = reweight_flow(coeffs, flow1, flow2, _base(coeffs, flow1, unit_interval))
    rows = reweighted.martingale_rows()
    assert rows[0]['mean_R'] == 1.0
    for row in rows:
        assert abs(row['mean_R'] - 1.0) <= 5 * row['stderr'] + 1e-12
        assert 0 < row['ess'] <= 2000
    assert np.all(reweighted.xi_sup[1:] == pytest.approx(0.25))


def test_reweighted_flow_matches_direct_run(unit_interval, dirac):
    flow1, flow2 = _flows(dirac)
    coeffs = mass_coupled(coupling=2.0)
    n = 4000
    reweighted = reweight_flow(coeffs, flow1, flow2, _base(coeffs, flow1, unit_interval, n=n))
    initial = ParticleEnsemble.from_points(unit_interval, np.full(n, 0.5))
    _, direct = simulate_flow(coeffs, flow2, initial, OPTIONS)
    assert reweighted.flow[-1].mass == pytest.approx(direct[-1].mass, abs=0.05)
    assert reweighted.flow[-1].first_moment() == pytest.approx(direct[-1].first_moment(), abs=0.05)


def test_singular_diffusion(unit_interval, dirac):
    flow1, flow2 = _flows(dirac)
    coeffs = mass_coupled(sigma=0.0)
    with pytest.raises(SingularityError):
        reweight_flow(coeffs, flow1, flow2, _base(coeffs, flow1, unit_interval, n=10))


def test_measure_dependent_noise(unit_interval, dirac):
    flow1, flow2 = _flows(dirac)
    coeffs = expression(drift=['0'], diffusion=[['1 + mu(y)']])
    base = _base(coeffs, flow1, unit_interval, n=10)
    with pytest.raises(InvalidArgumentError):
        reweight_flow(coeffs, flow1, flow2, base)


def test_v_node_distances(dirac):
    flow1, flow2 = _flows(dirac)
    np.testing.assert_allclose(v_node_distances(flow1, flow2, LyapunovV.constant(1)), 0.5)
    with pytest.raises(InvalidArgumentError):
        v_node_distances(flow1, MeasureFlow.constant(dirac(0.5), TimeGrid(0.2, 2)), LyapunovV.constant(1))


def test_capped():
    V = capped(LyapunovV.quadratic(1, cap=2.0))
    np.testing.assert_allclose(V(np.array([[0.0], [3.0]])), [1.0, 2.0])
    plain = LyapunovV.quadratic(1)
    assert capped(plain) is plain


def test_v_contraction_with_calibrated_constant(dirac):
    flow1, flow2 = _flows(dirac)
    coeffs = mass_coupled()
    V = LyapunovV.constant(1)
    C = calibrate_v_constant(coeffs, dirac(0.5), flow1, flow2, V, lambdas=[1.0, 10.0], particles=1000,
                             seed=2, options=OPTIONS)
    assert C > 0
    for lam in (1.0, 10.0):
        result = v_contraction_check(coeffs, dirac(0.5), flow1, flow2, V, lam, C, particles=1000, seed=2,
                                     options=OPTIONS)
        assert result['passed']
        assert result['rho'] == pytest.approx(0.5)


def test_v_contraction_needs_ratio_below_one_at_large_lambda(half_line):
    grid = TimeGrid(0.02, 4)
    options = SimulationOptions(dt=0.001)
    gamma = SubProbMeasure.dirac(half_line, [0.5])
    flow1 = MeasureFlow.constant(gamma, grid)
    flow2 = MeasureFlow.constant(SubProbMeasure.dirac(half_line, [0.5], 0.99), grid)
    coeffs = mass_coupled(coupling=100.0)
    V = LyapunovV.constant(1)
    large = v_contraction_check(coeffs, gamma, flow1, flow2, V, 100.0, 1e6, particles=2000, seed=3,
                                options=options)
    assert large['rho'] == pytest.approx(0.01)
    assert large['lhs'] <= large['rhs']
    assert large['ratio'] >= 1.0
    assert not large['contracting']
    assert not large['passed']
    small = v_contraction_check(coeffs, gamma, flow1, flow2, V, 10.0, 1e6, particles=2000, seed=3,
                                options=options)
    assert small['ratio'] >= 1.0
    assert small['passed']


def test_uncapped_distances_reported(half_line):
    V = LyapunovV.quadratic(1, cap=10.0)
    near = SubProbMeasure.atoms(half_line, [[0.5], [1.0]], [0.5, 0.5])
    far = SubProbMeasure.atoms(half_line, [[0.5], [4.0]], [0.5, 0.5])
    for mu in (near, far):
        grid = TimeGrid(0.1, 1)
        f1 = MeasureFlow.constant(mu, grid)
        f2 = MeasureFlow.constant(mu.reweighted(mu.weights * 0.5), grid)
        capped_d = v_node_distances(f1, f2, capped(V))
        raw_d = v_node_distances(f1, f2, V)
        if mu is near:
            np.testing.assert_allclose(capped_d, raw_d)
        else:
            assert np.all(raw_d > capped_d)
            np.testing.assert_allclose(raw_d, 0.25 * (1.25 + 17.0))


def test_v_contraction_indeterminate(dirac):
    flow1, _ = _flows(dirac)
    with pytest.raises(IndeterminateRatioError):
        v_contraction_check(mass_coupled(), dirac(0.5), flow1, flow1, LyapunovV.constant(1), 1.0, 1.0,
                            particles=10, options=OPTIONS)


def _moment_config(T=0.2, M=4, particles=200):
    return PicardConfig(particles=particles, dt=0.01, T=T, M=M, max_iter=3, seed=0)


def _atoms(domain, points):
    return SubProbMeasure.atoms(domain, [[x] for x in points], [1.0 / len(points)] * len(points))


def test_moment_bound_explicit(half_line):
    gamma = _atoms(half_line, [0.5, 1.0])
    V = LyapunovV.quadratic(1)
    result = moment_bound_check(linear(), V, gamma, config=_moment_config(), bound=1e6)
    assert result['passed']
    assert len(result['rows']) == 2
    assert result['observed'] >= 1.0
    strict = moment_bound_check(linear(), V, gamma, config=_moment_config(), bound=0.5)
    assert not strict['passed']


def test_moment_bound_on_bounded_domain(unit_interval):
    gamma = _atoms(unit_interval, [0.9, 0.1, 0.5])
    config = _moment_config(particles=500)
    result = moment_bound_check(brownian(), LyapunovV.quadratic(1), gamma, p=1.0, config=config)
    # started in order of V(X_0), each ratio bounded by sup V / V(X_0) <= 2
    assert [row['x0'] for row in result['rows']] == [[0.1], [0.5], [0.9]]
    assert all(1.0 <= row['ratio'] <= 2.0 for row in result['rows'])
    assert result['span'] < 10
    first = result['rows'][0]
    assert result['bound'] == pytest.approx(first['ratio'] + 3 * first['stderr'])
    assert moment_bound_check(brownian(), LyapunovV.quadratic(1), gamma, p=1.0, config=config, bound=2.0)['passed']


def test_moment_bound_fails_for_outward_drift(half_line):
    gamma = _atoms(half_line, [0.5, 1.0, 5.0])
    result = moment_bound_check(linear(beta=-3.0), LyapunovV.quadratic(1), gamma, p=2.0,
                                config=_moment_config(T=1.0, M=10, particles=500))
    ratios = [row['ratio'] for row in result['rows']]
    assert result['span'] >= 10
    assert ratios[-1] > 2 * ratios[0]
    assert not result['passed']


def test_moment_bound_explicit_starts(half_line):
    result = moment_bound_check(linear(), LyapunovV.quadratic(1), SubProbMeasure.dirac(half_line, [1.0]),
                                config=_moment_config(), starts=[[3.0], [0.5]])
    assert [row['x0'] for row in result['rows']] == [[0.5], [3.0]]


def test_picard_in_weighted_variation(dirac):
    config = PicardConfig(particles=1000, dt=0.01, T=0.5, M=5, tol=1e-3, max_iter=30, seed=1)
    result = picard_solve(mass_coupled(coupling=0.5), dirac(0.5), config)
    assert result.converged
    assert result.metric == 'weighted_variation'
    assert result.distances[-1] < 1e-3
    assert result.flow[0].mass == pytest.approx(1.0)
    assert result.verdict()['final_distance_uncapped'] == result.distances[-1]
