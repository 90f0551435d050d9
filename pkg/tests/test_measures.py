import numpy as np
import pytest

from kdsde.components import (
    GriddedField,
    InvalidArgumentError,
    LyapunovV,
    MeasureFlow,
    SubProbMeasure,
    TimeGrid,
    coarsen,
    first_moment,
    integrate,
    kato_budget_check,
    kato_class,
    lpq_norm,
    restrict_to_O,
)


def test_restrict_all_interior(unit_interval):
    mu = restrict_to_O(unit_interval, np.array([0.1, 0.3, 0.6, 0.9]))
    assert len(mu) == 4
    np.testing.assert_allclose(mu.weights, 0.25)
    assert mu.mass == pytest.approx(1.0)


def test_restrict_boundary_atoms_dead(unit_interval):
    mu = restrict_to_O(unit_interval, np.array([0.0, 0.3, 1.0, 0.9]))
    assert mu.mass == pytest.approx(0.5)
    # dead atoms never contribute to functionals
    assert mu.integrate(lambda x: np.ones(x.shape[0])) == pytest.approx(0.5)


def test_restrict_alive_flags(unit_interval):
    mu = restrict_to_O(unit_interval, np.array([0.2, 0.4]), alive=np.array([True, False]))
    assert mu.mass == pytest.approx(0.5)


def test_restrict_no_interior(unit_interval):
    mu = restrict_to_O(unit_interval, np.array([0.0, 1.0]))
    assert mu.mass == 0.0
    assert mu.first_moment() == 0.0


def test_integrate(dirac, unit_interval):
    assert integrate(dirac(0.5), lambda x: x[:, 0] ** 2) == pytest.approx(0.25)
    assert integrate(SubProbMeasure.zero(unit_interval), lambda x: 1.0 / x[:, 0]) == 0.0


def test_integrate_monte_carlo(unit_interval, rng):
    n = 100000
    mu = SubProbMeasure.empirical(unit_interval, rng.uniform(0.0, 1.0, size=n))
    assert abs(mu.integrate(lambda x: x[:, 0]) - 0.5) <= 3 * np.sqrt(1 / 12) / np.sqrt(n)


def test_integrate_not_finite(dirac):
    from kdsde.components import EvaluationError
    with pytest.raises(EvaluationError):
        dirac(0.5).integrate(lambda x: np.full(x.shape[0], np.nan))


def test_first_moment(dirac, unit_interval):
    assert first_moment(dirac(0.5)) == pytest.approx(0.5)
    assert first_moment(SubProbMeasure.zero(unit_interval)) == 0.0
    mu = SubProbMeasure.atoms(unit_interval, [0.2, 0.8], [0.5, 0.25])
    assert first_moment(mu) == pytest.approx(0.3)


def test_mass_above_one(unit_interval):
    with pytest.raises(InvalidArgumentError):
        SubProbMeasure.atoms(unit_interval, [0.2, 0.8], [0.7, 0.7])


def test_negative_weight(unit_interval):
    with pytest.raises(InvalidArgumentError):
        SubProbMeasure.atoms(unit_interval, [0.2], [-0.1])


def test_uniform_grid(unit_interval):
    mu = SubProbMeasure.uniform_grid(unit_interval, 0.0, 1.0, 4, mass=0.5)
    np.testing.assert_allclose(mu.locations[:, 0], [0.125, 0.375, 0.625, 0.875])
    assert mu.mass == pytest.approx(0.5)


def test_measure_save_load(unit_interval, tmp_path):
    mu = SubProbMeasure.atoms(unit_interval, [0.2, 0.5, 1.0], [0.25, 0.25, 0.25])
    path = str(tmp_path / 'mu.txt')
    mu.save(path)
    back = SubProbMeasure.load(path, unit_interval)
    np.testing.assert_array_equal(back.locations, mu.locations)
    np.testing.assert_array_equal(back.alive, mu.alive)
    assert back.mass == pytest.approx(0.5)


def test_coarsen_bound(unit_interval, rng):
    mu = SubProbMeasure.empirical(unit_interval, rng.uniform(0.0, 1.0, size=1000))
    coarse, err = coarsen(mu, 50)
    assert len(coarse) == 50
    assert coarse.mass == pytest.approx(mu.mass)
    assert coarse.first_moment() == pytest.approx(mu.first_moment())
    assert 0 < err < 0.05


def test_coarsen_small_is_identity(dirac):
    coarse, err = coarsen(dirac(0.4), 10)
    assert err == 0.0
    assert len(coarse) == 1


def test_time_grid():
    grid = TimeGrid(1.0, 4)
    assert len(grid) == 5
    assert grid.step == pytest.approx(0.25)
    assert TimeGrid.from_step(1.0, 0.25) == grid
    with pytest.raises(InvalidArgumentError):
        TimeGrid.from_step(1.0, 0.3)


def test_flow_mass_non_increasing(dirac, unit_interval):
    grid = TimeGrid(1.0, 1)
    MeasureFlow(grid, [dirac(0.5), dirac(0.5, 0.5)])
    with pytest.raises(InvalidArgumentError):
        MeasureFlow(grid, [dirac(0.5, 0.5), dirac(0.5)])


def test_flow_save_load(dirac, unit_interval, tmp_path):
    flow = MeasureFlow(TimeGrid(1.0, 2), [dirac(0.5), dirac(0.4, 0.8), dirac(0.3, 0.5)])
    names = flow.save(str(tmp_path / 'flow'))
    assert names[-1] == 'flow.json'
    back = MeasureFlow.load(str(tmp_path / 'flow'), unit_interval)
    assert back.grid == flow.grid
    np.testing.assert_allclose(back.masses(), [1.0, 0.8, 0.5])


def test_flow_in_cng(dirac):
    flow = MeasureFlow.constant(dirac(0.5), TimeGrid(1.0, 3))
    assert flow.in_cng(1.0)
    assert not flow.in_cng(0.4)


def test_lyapunov_quadratic(rng):
    V = LyapunovV.quadratic(1, eps=1.0)
    ok, ratio = V.check(rng.uniform(-5, 5, size=(200, 1)), rng)
    assert ok
    assert ratio <= 1.0
    np.testing.assert_allclose(V(np.array([[0.0], [2.0]])), [1.0, 5.0])


def test_lyapunov_truncated():
    V = LyapunovV.quadratic(1, cap=3.0)
    np.testing.assert_allclose(V.truncated(np.array([[0.0], [2.0]])), [1.0, 3.0])


def test_lpq_norm_constant():
    times = np.array([0.0, 1.0])
    field = GriddedField.from_function(lambda t, x: np.ones(x.shape[0]), times, [-4.0], [4.0], [800])
    assert lpq_norm(field, 4.0, 4.0) == pytest.approx(2 ** 0.25, rel=1e-6)
    zero = GriddedField.from_function(lambda t, x: np.zeros(x.shape[0]), times, [-4.0], [4.0], [800])
    assert lpq_norm(zero, 4.0, 4.0) == 0.0


def test_first_moment_sup(dirac):
    flow = MeasureFlow(TimeGrid(1.0, 2), [dirac(0.5), dirac(0.8, 0.5), dirac(0.2, 0.5)])
    assert flow.first_moment_sup() == pytest.approx(0.5)


def test_kato_budget_check():
    times = np.array([0.0, 1.0])
    field = GriddedField.from_function(lambda t, x: np.ones(x.shape[0]), times, [-4.0], [4.0], [800])
    report = kato_budget_check(field, 4.0, 4.0, 2.0)
    assert report['in_class']
    assert report['passed']
    assert report['norm'] == pytest.approx(2 ** 0.25, rel=1e-6)
    assert not kato_budget_check(field, 4.0, 4.0, 1.0)['passed']
    outside = kato_budget_check(field, 2.5, 2.5, 10.0)
    assert not outside['in_class']
    assert not outside['passed']


def test_lpq_norm_bad_exponent():
    field = GriddedField(np.array([0.0]), [0.0], [1.0], np.ones((1, 10)))
    with pytest.raises(InvalidArgumentError):
        lpq_norm(field, 1.0, 2.0)


def test_kato_class():
    assert kato_class(4.0, 8.0, 1)
    assert not kato_class(2.0, 2.0, 1)
