import numpy as np
import pytest

from kdsde.components import (
    AbsorbedBrownianMotion,
    CoefficientSpec,
    InvalidArgumentError,
    LyapunovV,
    MeasureFlow,
    NoiseStreams,
    NumericError,
    ParticleEnsemble,
    SimulationOptions,
    SubProbMeasure,
    TimeGrid,
    UnknownComponentError,
    coefficient_from_spec,
    simulate_flow,
    step_killed,
    sup_moment_ratios,
    validate_hypotheses,
)
from kdsde.components.killed_sde import (
    brownian,
    cir_square,
    constant_drift,
    expression,
    linear,
    mass_coupled,
    mean_field,
)


def _ensemble(domain, x, n):
    return ParticleEnsemble.from_points(domain, np.full(n, x))


def test_no_noise_no_drift(unit_interval, dirac):
    coeffs = brownian(sigma=0.0)
    ens = _ensemble(unit_interval, 0.3, 10)
    for _ in range(20):
        ens = step_killed(ens, coeffs, dirac(0.5), 0.01)
    np.testing.assert_allclose(ens.positions, 0.3)
    assert ens.alive.all()
    assert np.all(np.isinf(ens.exit_times))


def test_start_on_boundary(unit_interval, dirac):
    ens = ParticleEnsemble.from_points(unit_interval, [0.0, 0.5])
    assert not ens.alive[0]
    assert ens.exit_times[0] == 0.0
    for _ in range(50):
        ens = step_killed(ens, brownian(), dirac(0.5), 0.01)
    assert ens.positions[0, 0] == 0.0
    assert ens.exit_times[0] == 0.0


def test_freeze_at_exit_lands_on_boundary(unit_interval, dirac):
    coeffs = brownian()
    ens = _ensemble(unit_interval, 0.5, 2000)
    streams = NoiseStreams(7, 2000)
    exit_seen = np.full(2000, np.inf)
    for _ in range(100):
        before = ens
        ens = step_killed(ens, coeffs, dirac(0.5), 0.01, streams=streams)
        newly = before.alive & ~ens.alive
        assert np.all(ens.exit_times[newly] >= before.t)
        assert np.all(ens.exit_times[newly] <= ens.t + 1e-12)
        # once set, an exit time never changes
        known = np.isfinite(exit_seen)
        np.testing.assert_array_equal(ens.exit_times[known], exit_seen[known])
        exit_seen = ens.exit_times.copy()
    dead = ~ens.alive
    assert dead.any()
    assert np.all(np.isin(ens.positions[dead, 0], [0.0, 1.0]))
    assert np.all(unit_interval.contains(ens.positions[ens.alive]))


def test_indicator_gated_leaves_particles_outside(unit_interval, dirac):
    ens = _ensemble(unit_interval, 0.5, 1000)
    streams = NoiseStreams(3, 1000)
    for _ in range(100):
        ens = step_killed(ens, brownian(), dirac(0.5), 0.01, semantics='indicator_gated', streams=streams)
    dead = ~ens.alive
    assert dead.any()
    assert np.any(unit_interval.signed_distance(ens.positions[dead]) < 0)


def test_unknown_semantics(unit_interval, dirac):
    with pytest.raises(InvalidArgumentError):
        step_killed(_ensemble(unit_interval, 0.5, 2), brownian(), dirac(0.5), 0.01, semantics='reflect')


def test_non_finite_drift(unit_interval, dirac):
    coeffs = expression(drift=['1 / (x - 0.5)'])
    with pytest.raises(NumericError):
        step_killed(_ensemble(unit_interval, 0.5, 2), coeffs, dirac(0.5), 0.01)


def test_common_random_numbers():
    streams = NoiseStreams(11, 100)
    ids = np.array([3, 17, 42])
    np.testing.assert_array_equal(streams.normals(5, ids), streams.normals(5)[ids])
    assert not np.array_equal(streams.normals(5), streams.normals(6))
    np.testing.assert_array_equal(streams.normals(5), NoiseStreams(11, 100).normals(5))


def test_interaction_free_ignores_flow(unit_interval, dirac):
    grid = TimeGrid(0.1, 2)
    initial = _ensemble(unit_interval, 0.5, 500)
    options = SimulationOptions(dt=0.01)
    _, flow1 = simulate_flow(linear(), MeasureFlow.constant(dirac(0.2), grid), initial, options,
                             NoiseStreams(1, 500))
    _, flow2 = simulate_flow(linear(), MeasureFlow.constant(dirac(0.8, 0.5), grid), initial, options,
                             NoiseStreams(1, 500))
    for mu, nu in zip(flow1, flow2):
        np.testing.assert_array_equal(mu.locations, nu.locations)
        np.testing.assert_array_equal(mu.alive, nu.alive)


def test_flow_depends_on_input_with_interaction(unit_interval, dirac):
    grid = TimeGrid(0.1, 2)
    initial = _ensemble(unit_interval, 0.5, 200)
    coeffs = mean_field(lam=1.0)
    _, flow1 = simulate_flow(coeffs, MeasureFlow.constant(dirac(0.2), grid), initial,
                             SimulationOptions(dt=0.01), NoiseStreams(1, 200))
    _, flow2 = simulate_flow(coeffs, MeasureFlow.constant(dirac(0.9), grid), initial,
                             SimulationOptions(dt=0.01), NoiseStreams(1, 200))
    assert not np.array_equal(flow1[-1].locations, flow2[-1].locations)


def test_absorbed_brownian_survival(unit_interval, dirac):
    n = 20000
    grid = TimeGrid(0.1, 4)
    options = SimulationOptions(dt=1e-4, bridge_correction=True)
    summary, flow = simulate_flow(brownian(), MeasureFlow.constant(dirac(0.5), grid),
                                  _ensemble(unit_interval, 0.5, n), options, NoiseStreams(2024, n))
    oracle = AbsorbedBrownianMotion(x0=0.5)
    for t, mass in zip(grid.nodes[1:], flow.masses()[1:]):
        assert abs(mass - oracle.survival(t)) <= 0.01
    assert np.all(np.diff(flow.masses()) <= 0)
    stats = summary.exit_statistics()
    assert stats['killed_fraction'] == pytest.approx(1 - flow.masses()[-1])


def test_inward_drift_never_exits(half_line, unit_interval):
    grid = TimeGrid(1.0, 5)
    coeffs = constant_drift(drift=1.0, sigma=0.0)
    gamma = SubProbMeasure.dirac(half_line, [0.5])
    _, flow = simulate_flow(coeffs, MeasureFlow.constant(gamma, grid), _ensemble(half_line, 0.5, 10),
                            SimulationOptions(dt=0.01))
    np.testing.assert_allclose(flow.masses(), 1.0)
    np.testing.assert_allclose(flow[-1].locations[:, 0], 1.5)


def test_simulate_bad_step(unit_interval, dirac):
    grid = TimeGrid(1.0, 10)
    with pytest.raises(InvalidArgumentError):
        simulate_flow(brownian(), MeasureFlow.constant(dirac(0.5), grid), _ensemble(unit_interval, 0.5, 2),
                      SimulationOptions(dt=0.03))


def test_cir_semantics(half_line):
    n = 2000
    grid = TimeGrid(0.5, 5)
    coeffs = cir_square()
    gamma = SubProbMeasure.dirac(half_line, [1.0])
    flow_in = MeasureFlow.constant(gamma, grid)
    start = _ensemble(half_line, 0.0, n)
    gated, _ = simulate_flow(coeffs, flow_in, start, SimulationOptions(dt=1e-3, semantics='indicator_gated'),
                             NoiseStreams(5, n))
    frozen, _ = simulate_flow(coeffs, flow_in, start, SimulationOptions(dt=1e-3), NoiseStreams(5, n))
    assert gated.positive_fraction(grid.M) >= 0.99
    assert frozen.positive_fraction(grid.M) == 0.0
    assert np.all(frozen.node_positions == 0.0)


def test_running_sup_tracking(unit_interval, dirac):
    grid = TimeGrid(0.1, 2)
    V = LyapunovV.quadratic(1)
    summary, _ = simulate_flow(brownian(), MeasureFlow.constant(dirac(0.5), grid),
                               _ensemble(unit_interval, 0.5, 100), SimulationOptions(dt=0.01),
                               NoiseStreams(0, 100), track=V)
    assert np.all(summary.running_sup >= 1.25 - 1e-12)


def test_sup_moment_ratios(unit_interval, dirac):
    grid = TimeGrid(0.1, 2)
    rows = sup_moment_ratios(linear(), MeasureFlow.constant(dirac(0.5), grid), [[0.5], [0.2]],
                             LyapunovV.quadratic(1), p=2, n_particles=200, options=SimulationOptions(dt=0.01))
    assert len(rows) == 2
    for row in rows:
        assert row['ratio'] >= 1.0
        assert row['stderr'] >= 0.0


def test_validate_dissipative(unit_interval):
    report = validate_hypotheses(linear(beta=1.0, K=0.0), unit_interval, samples=100)
    assert report.passed
    assert report['ellipticity'].worst_ratio == pytest.approx(1.0)


def test_validate_violation(unit_interval):
    report = validate_hypotheses(linear(beta=-2.0, K=1.0), unit_interval, samples=100)
    assert not report.passed
    row = report['monotonicity']
    assert not row.passed
    assert 'x' in row.witness and 'y' in row.witness


def test_validate_measure_lipschitz(unit_interval):
    report = validate_hypotheses(mass_coupled(beta=1.0, coupling=0.5), unit_interval, samples=50)
    assert report['measure_lipschitz'].passed
    assert report['noise_independent'].passed


def test_coefficient_from_spec():
    coeffs = coefficient_from_spec(CoefficientSpec(family='mean_field', params={'beta': 2.0}, K=5.0))
    assert coeffs.K_fn(0.0) == 5.0
    with pytest.raises(UnknownComponentError):
        coefficient_from_spec(CoefficientSpec(family='heston'))
    with pytest.raises(InvalidArgumentError):
        coefficient_from_spec(CoefficientSpec(family='linear', params={'gamma': 1.0}))


def test_ensemble_from_measure_deficit(unit_interval):
    gamma = SubProbMeasure.dirac(unit_interval, [0.5], 0.5)
    ens = ParticleEnsemble.from_measure(gamma, 4000, NoiseStreams(9, 4000))
    assert ens.alive.mean() == pytest.approx(0.5, abs=0.05)
    assert np.all(ens.positions[~ens.alive, 0] == 0.0)


def test_ensemble_from_equal_weight_cloud(unit_interval):
    gamma = SubProbMeasure.uniform_grid(unit_interval, 0.0, 1.0, 8)
    ens = ParticleEnsemble.from_measure(gamma, 8, NoiseStreams(0, 8))
    np.testing.assert_array_equal(ens.positions, gamma.locations)
