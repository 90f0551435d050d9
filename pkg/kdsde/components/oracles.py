"""
Closed-form references for Brownian motion (generator 1/2 d^2/dx^2) killed on
leaving (0, L), by expansion in the Dirichlet eigenfunctions sin(k pi x / L).
"""
import math
from typing import Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid

from kdsde.components.exceptions import InvalidArgumentError
from kdsde.components.geometry import Domain
from kdsde.components.measures import SubProbMeasure

__all__ = (
    'AbsorbedBrownianMotion',
)


class AbsorbedBrownianMotion:
    """
    Started either at the point ``x0`` or from the uniform law on ``uniform``.
    """

    def __init__(self, length: float = 1.0, x0: Optional[float] = None,
                 uniform: Optional[Tuple[float, float]] = None, terms: int = 50):
        if (x0 is None) == (uniform is None):
            raise InvalidArgumentError("give exactly one of a starting point or a uniform start")
        if not length > 0:
            raise InvalidArgumentError(f"interval length({length}) must be positive")
        self.length = float(length)
        self.terms = int(terms)
        k = np.arange(1, self.terms + 1)
        self._freq = k * math.pi / self.length
        if x0 is not None:
            if not 0 <= x0 <= self.length:
                raise InvalidArgumentError(f"start {x0} is outside [0, {self.length}]")
            self._coef = (2.0 / self.length) * np.sin(self._freq * x0)
        else:
            a, b = uniform
            # 2/L int_a^b sin(k pi x / L) dx / (b - a)
            self._coef = (2.0 / self.length) * (np.cos(self._freq * a) - np.cos(self._freq * b)) \
                / (self._freq * (b - a))

    def _decay(self, t: float) -> np.ndarray:
        return np.exp(-0.5 * self._freq ** 2 * t)

    def density(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        modes = np.sin(np.multiply.outer(x, self._freq))
        return np.maximum(modes @ (self._coef * self._decay(t)), 0.0)

    def survival(self, t: float) -> float:
        # int_0^L sin(k pi x / L) dx = (1 - cos(k pi)) / freq
        integrals = (1.0 - np.cos(self._freq * self.length)) / self._freq
        return float(np.sum(self._coef * self._decay(t) * integrals))

    def expectation(self, t: float, f, points: int = 20001) -> float:
        """E[f(X_t); t < tau] by quadrature of the density"""
        x = np.linspace(0.0, self.length, points)
        return float(trapezoid(self.density(t, x) * f(x), x))

    def band_expectation(self, t: float, r0: float) -> float:
        """E[r0 ^ dist(X_t, boundary); t < tau]"""
        return self.expectation(t, lambda x: np.minimum(r0, np.minimum(x, self.length - x)))

    def measure(self, domain: Domain, t: float, atoms: int = 2000) -> SubProbMeasure:
        """midpoint discretization of the sub-probability law at time t"""
        h = self.length / atoms
        x = (np.arange(atoms) + 0.5) * h
        w = self.density(t, x) * h
        total = w.sum()
        target = self.survival(t)
        if total > 0:
            w *= target / total
        return SubProbMeasure(domain, x[:, None], w)
