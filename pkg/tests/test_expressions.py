import numpy as np
import pytest

from kdsde.components import ConfigError, Expression, SubProbMeasure


def test_arithmetic():
    e = Expression('x^2 + t')
    np.testing.assert_allclose(e(1.0, np.array([[2.0], [0.5]])), [5.0, 1.25])
    assert not e.uses_measure


def test_min_max_operators():
    np.testing.assert_allclose(Expression('x ∧ 1')(0.0, np.array([[2.0], [0.5]])), [1.0, 0.5])
    np.testing.assert_allclose(Expression('x ∨ 1')(0.0, np.array([[2.0], [0.5]])), [2.0, 1.0])
    np.testing.assert_allclose(Expression('min(x, 1) + max(x, 0)')(0.0, np.array([[2.0]])), [3.0])


def test_functions_and_constants():
    e = Expression('sin(pi * x) + exp(0) + sqrt(abs(x))')
    np.testing.assert_allclose(e(0.0, np.array([[0.5], [4.0]])), [3.0 - 1 + np.sqrt(0.5), 3.0], atol=1e-12)


def test_measure_integral(unit_interval):
    mu = SubProbMeasure.atoms(unit_interval, [0.2, 0.6], [0.25, 0.5])
    e = Expression('-x + mu(x - y)')
    assert e.uses_measure
    # -x + 0.75 x - (0.05 + 0.3)
    np.testing.assert_allclose(e(0.0, np.array([[1.0], [0.0]]), mu), [-0.6, -0.35])


def test_measure_integral_without_measure():
    np.testing.assert_allclose(Expression('1 + mu(y)')(0.0, np.array([[0.3]])), [1.0])


def test_several_dimensions():
    e = Expression('x0 * x1', dim=2)
    np.testing.assert_allclose(e(0.0, np.array([[2.0, 3.0]])), [6.0])


@pytest.mark.parametrize('source', [
    'z',
    'x +',
    'y',
    'mu(mu(y))',
    'open(x)',
    '[x]',
    'x if t else 1',
    'x0',
])
def test_rejected(source):
    with pytest.raises(ConfigError):
        Expression(source)
