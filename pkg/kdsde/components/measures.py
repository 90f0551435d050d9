"""
Sub-probability measures on the closure of a domain, realized as weighted atom
clouds, and flows of them on a uniform time grid.

Atoms keep their location after they die (killed particles stay at their exit
point) but carry no mass under any functional of O.
"""
import json
import math
import os
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.signal import fftconvolve

from kdsde.constants import DomainKind, FLOAT_FORMAT, MASS_TOL
from kdsde.components.exceptions import (
    EvaluationError,
    InvalidArgumentError,
    ResolutionError,
)
from kdsde.components.geometry import Domain
from kdsde.log import sde_logger
from kdsde.typedefs import PointLike

__all__ = (
    'SubProbMeasure',
    'TimeGrid',
    'MeasureFlow',
    'LyapunovV',
    'GriddedField',
    'restrict_to_O',
    'integrate',
    'first_moment',
    'coarsen',
    'lpq_norm',
    'kato_class',
    'kato_budget_check',
)

_FLOW_INDEX = 'flow.json'
_BALL_SUBSAMPLES = 4


class SubProbMeasure:
    """
    Atoms ``locations[i]`` with weights ``weights[i]``. An atom counts for O
    only when it is flagged alive and lies strictly inside the domain.
    """

    def __init__(self,
                 domain: Domain,
                 locations: np.ndarray,
                 weights: np.ndarray,
                 alive: Optional[np.ndarray] = None,
                 check_mass: bool = True,
                 ):
        locations = np.array(locations, dtype=float)
        if locations.ndim == 1:
            locations = locations.reshape(-1, domain.dim)
        weights = np.array(weights, dtype=float).reshape(-1)
        if locations.shape[0] != weights.shape[0]:
            raise InvalidArgumentError("locations and weights differ in length")
        if locations.shape[0] and locations.shape[1] != domain.dim:
            raise InvalidArgumentError(f"atoms of dimension {locations.shape[1]} on a {domain.dim}-d domain")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise InvalidArgumentError("atom weights must be finite and non-negative")
        if alive is None:
            alive = np.ones(weights.shape[0], dtype=bool)
        alive = np.array(alive, dtype=bool).reshape(-1)
        if locations.shape[0]:
            alive = alive & domain._contains(locations)
        self.domain = domain
        self.locations = locations
        self.weights = weights
        self.alive = alive
        self.locations.setflags(write=False)
        self.weights.setflags(write=False)
        self.alive.setflags(write=False)
        if check_mass and self.mass > 1 + MASS_TOL:
            raise InvalidArgumentError(f"sub-probability measure with mass {self.mass!r} > 1")

    @classmethod
    def zero(cls, domain: Domain) -> 'SubProbMeasure':
        return cls(domain, np.empty((0, domain.dim)), np.empty(0))

    @classmethod
    def dirac(cls, domain: Domain, x: PointLike, weight: float = 1.0) -> 'SubProbMeasure':
        return cls(domain, np.asarray(x, dtype=float).reshape(1, domain.dim), [weight])

    @classmethod
    def atoms(cls, domain: Domain, points: Sequence, weights: Sequence, **kwargs) -> 'SubProbMeasure':
        return cls(domain, np.asarray(points, dtype=float).reshape(-1, domain.dim), weights, **kwargs)

    @classmethod
    def empirical(cls, domain: Domain, points: np.ndarray, alive: Optional[np.ndarray] = None) -> 'SubProbMeasure':
        points = np.asarray(points, dtype=float).reshape(-1, domain.dim)
        n = points.shape[0]
        if n == 0:
            raise InvalidArgumentError("empirical measure of an empty ensemble")
        return cls(domain, points, np.full(n, 1.0 / n), alive)

    @classmethod
    def uniform_grid(cls, domain: Domain, lower: float, upper: float, n: int,
                     mass: float = 1.0) -> 'SubProbMeasure':
        """
        equal-mass midpoint discretization of the uniform law on (lower, upper)
        """
        if domain.dim != 1:
            raise InvalidArgumentError("uniform grid measures are one-dimensional")
        points = lower + (np.arange(n) + 0.5) * (upper - lower) / n
        return cls(domain, points[:, None], np.full(n, mass / n))

    def __len__(self):
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def effective_weights(self) -> np.ndarray:
        return np.where(self.alive, self.weights, 0.0)

    @property
    def mass(self) -> float:
        return float(np.sum(self.effective_weights))

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        if not np.any(self.alive):
            return 0.0
        x = self.locations[self.alive]
        values = np.asarray(f(x), dtype=float).reshape(-1)
        if values.shape[0] != x.shape[0]:
            values = np.broadcast_to(values, (x.shape[0],))
        bad = ~np.isfinite(values)
        if np.any(bad):
            i = int(np.flatnonzero(self.alive)[np.argmax(bad)])
            raise EvaluationError(f"integrand is not finite at atom {i}",
                                  atom=i, location=self.locations[i].tolist())
        return float(np.dot(self.weights[self.alive], values))

    def first_moment(self) -> float:
        return self.integrate(lambda x: np.linalg.norm(x, axis=1))

    def restricted(self) -> 'SubProbMeasure':
        """the same measure with dead atoms dropped"""
        keep = self.alive
        return SubProbMeasure(self.domain, self.locations[keep], self.weights[keep], check_mass=False)

    def reweighted(self, weights: np.ndarray, check_mass: bool = False) -> 'SubProbMeasure':
        return SubProbMeasure(self.domain, self.locations, weights, self.alive, check_mass=check_mass)

    def shares_atoms(self, other: 'SubProbMeasure') -> bool:
        return (self.locations.shape == other.locations.shape
                and np.array_equal(self.locations, other.locations))

    def save(self, path: str):
        table = np.column_stack([self.locations, self.weights, self.alive.astype(float)])
        header = ' '.join([f'x{k}' for k in range(self.dim)] + ['weight', 'alive'])
        np.savetxt(path, table, fmt=FLOAT_FORMAT, header=header)

    @classmethod
    def load(cls, path: str, domain: Domain, check_mass: bool = True) -> 'SubProbMeasure':
        table = np.loadtxt(path, ndmin=2)
        if table.size == 0:
            return cls.zero(domain)
        if table.shape[1] != domain.dim + 2:
            raise InvalidArgumentError(f"{path}: expected {domain.dim + 2} columns, got {table.shape[1]}")
        return cls(domain, table[:, :domain.dim], table[:, domain.dim], table[:, domain.dim + 1] > 0.5,
                   check_mass=check_mass)

    def __repr__(self):
        return f"SubProbMeasure(atoms={len(self)}, mass={self.mass:.6g})"


def restrict_to_O(domain: Domain, points: np.ndarray, alive: Optional[np.ndarray] = None) -> SubProbMeasure:
    return SubProbMeasure.empirical(domain, points, alive)


def integrate(mu: SubProbMeasure, f: Callable[[np.ndarray], np.ndarray]) -> float:
    return mu.integrate(f)


def first_moment(mu: SubProbMeasure) -> float:
    return mu.first_moment()


def coarsen(mu: SubProbMeasure, max_atoms: int) -> Tuple[SubProbMeasure, float]:
    """
    Aggregate the live atoms of ``mu`` into at most ``max_atoms`` atoms.

    Returns the coarse measure and the cost of the aggregation plan, which
    bounds the W1 (hence the truncated) distance between the two measures.
    """
    x = mu.locations[mu.alive]
    w = mu.weights[mu.alive]
    if x.shape[0] <= max_atoms:
        return mu.restricted(), 0.0
    if mu.dim == 1:
        order = np.argsort(x[:, 0], kind='stable')
        labels = np.empty(x.shape[0], dtype=int)
        labels[order] = np.arange(x.shape[0]) * max_atoms // x.shape[0]
    else:
        lo, hi = x.min(axis=0), x.max(axis=0)
        per_axis = max(1, int(math.floor(max_atoms ** (1.0 / mu.dim))))
        cells = np.floor((x - lo) / np.maximum(hi - lo, 1e-300) * per_axis).astype(int)
        cells = np.clip(cells, 0, per_axis - 1)
        _, labels = np.unique(cells, axis=0, return_inverse=True)
        labels = labels.reshape(-1)
    n_groups = int(labels.max()) + 1
    group_w = np.bincount(labels, weights=w, minlength=n_groups)
    centers = np.stack([np.bincount(labels, weights=w * x[:, k], minlength=n_groups)
                        for k in range(mu.dim)], axis=1)
    centers /= np.maximum(group_w, 1e-300)[:, None]
    if mu.domain.kind == DomainKind.GENERIC:
        # barycenters may leave a non-convex domain: use the closest member atom
        for g in range(n_groups):
            members = np.flatnonzero(labels == g)
            j = members[np.argmin(np.linalg.norm(x[members] - centers[g], axis=1))]
            centers[g] = x[j]
    displacement = float(np.dot(w, np.linalg.norm(x - centers[labels], axis=1)))
    sde_logger.debug(f"coarsened {x.shape[0]} atoms to {n_groups}, displacement {displacement:.3g}")
    return SubProbMeasure(mu.domain, centers, group_w, check_mass=False), displacement


class TimeGrid:
    def __init__(self, T: float, M: int):
        if not T > 0 or M < 1:
            raise InvalidArgumentError(f"time grid needs T > 0 and M >= 1, got T={T}, M={M}")
        self.T = float(T)
        self.M = int(M)

    @classmethod
    def from_step(cls, T: float, dt: float) -> 'TimeGrid':
        M = int(round(T / dt))
        if M < 1 or abs(M * dt - T) > 1e-9 * T:
            raise InvalidArgumentError(f"step {dt} does not divide the horizon {T}")
        return cls(T, M)

    @property
    def step(self) -> float:
        return self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)

    def __len__(self):
        return self.M + 1

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and self.M == other.M and self.T == other.T

    def __repr__(self):
        return f"TimeGrid(T={self.T}, M={self.M})"


class MeasureFlow:
    def __init__(self, grid: TimeGrid, snapshots: List[SubProbMeasure], check_mass: bool = True):
        if len(snapshots) != len(grid):
            raise InvalidArgumentError(f"flow has {len(snapshots)} snapshots for {len(grid)} grid nodes")
        self.grid = grid
        self.snapshots = list(snapshots)
        if check_mass:
            masses = self.masses()
            rises = np.diff(masses) > 1e-12
            if np.any(rises):
                k = int(np.argmax(rises)) + 1
                raise InvalidArgumentError(f"flow mass increases at node {k}", masses=masses[k - 1:k + 1].tolist())

    @classmethod
    def constant(cls, gamma: SubProbMeasure, grid: TimeGrid) -> 'MeasureFlow':
        return cls(grid, [gamma] * len(grid))

    @property
    def domain(self) -> Domain:
        return self.snapshots[0].domain

    def __len__(self):
        return len(self.snapshots)

    def __getitem__(self, k: int) -> SubProbMeasure:
        return self.snapshots[k]

    def __iter__(self) -> Iterator[SubProbMeasure]:
        return iter(self.snapshots)

    def masses(self) -> np.ndarray:
        return np.array([mu.mass for mu in self.snapshots])

    def first_moment_sup(self) -> float:
        return max(mu.first_moment() for mu in self.snapshots)

    def in_cng(self, N: float) -> bool:
        """membership in the class sup_t exp(-N t) |mu_t|_1 <= N"""
        moments = np.array([mu.first_moment() for mu in self.snapshots])
        return bool(np.all(np.exp(-N * self.grid.nodes) * moments <= N))

    def save(self, directory: str) -> List[str]:
        os.makedirs(directory, exist_ok=True)
        names = []
        for k, mu in enumerate(self.snapshots):
            name = f'node_{k:05d}.txt'
            mu.save(os.path.join(directory, name))
            names.append(name)
        with open(os.path.join(directory, _FLOW_INDEX), 'w') as f:
            json.dump({'T': self.grid.T, 'M': self.grid.M, 'nodes': names}, f, indent=2, sort_keys=True)
        return names + [_FLOW_INDEX]

    @classmethod
    def load(cls, directory: str, domain: Domain, check_mass: bool = True) -> 'MeasureFlow':
        with open(os.path.join(directory, _FLOW_INDEX)) as f:
            index = json.load(f)
        snapshots = [SubProbMeasure.load(os.path.join(directory, name), domain, check_mass)
                     for name in index['nodes']]
        return cls(TimeGrid(index['T'], index['M']), snapshots, check_mass)


class LyapunovV:
    """
    A C2 function V >= 1 of class V(K, eps): the gradient and Hessian of V on
    the ball B(x, eps) are bounded by K V(x). ``cap`` truncates V where a
    bounded functional is needed.
    """

    def __init__(self,
                 value_fn: Callable[[np.ndarray], np.ndarray],
                 gradient_fn: Callable[[np.ndarray], np.ndarray],
                 hessian_fn: Callable[[np.ndarray], np.ndarray],
                 K: float,
                 eps: float,
                 cap: Optional[float] = None,
                 name: str = 'custom',
                 ):
        if not (K > 0 and eps > 0):
            raise InvalidArgumentError("class constants K and eps must be positive")
        self.value_fn = value_fn
        self.gradient_fn = gradient_fn
        self.hessian_fn = hessian_fn
        self.K = float(K)
        self.eps = float(eps)
        self.cap = cap
        self.name = name

    @classmethod
    def quadratic(cls, dim: int = 1, eps: float = 1.0, cap: Optional[float] = None) -> 'LyapunovV':
        # sup over r >= 0 of (2 r + 2 eps + 2) / (1 + r^2)
        c = 2.0 + 2.0 * eps
        r = (-c + math.sqrt(c * c + 4.0)) / 2.0 if c > 0 else 0.0
        r = max(r, 0.0)
        K = (2.0 * r + c) / (1.0 + r * r)
        return cls(lambda x: 1.0 + np.sum(np.asarray(x) ** 2, axis=1),
                   lambda x: 2.0 * np.asarray(x),
                   lambda x: np.broadcast_to(2.0 * np.eye(dim), (np.asarray(x).shape[0], dim, dim)),
                   K=K, eps=eps, cap=cap, name='quadratic')

    @classmethod
    def constant(cls, dim: int = 1) -> 'LyapunovV':
        return cls(lambda x: np.ones(np.asarray(x).shape[0]),
                   lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                   lambda x: np.zeros((np.asarray(x).shape[0], dim, dim)),
                   K=1.0, eps=1.0, name='constant')

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.value_fn(np.atleast_2d(x)), dtype=float).reshape(-1)

    def truncated(self, x: np.ndarray) -> np.ndarray:
        v = self(x)
        return v if self.cap is None else np.minimum(v, self.cap)

    def check(self, points: np.ndarray, rng: np.random.Generator, n_inner: int = 16) -> Tuple[bool, float]:
        """
        spot-check V >= 1 and the class inequality at the given points;
        returns the verdict and the worst observed ratio to K V(x)
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        v = self(points)
        if np.any(v < 1 - 1e-12):
            return False, math.inf
        n, d = points.shape
        direction = rng.standard_normal((n, n_inner, d))
        direction /= np.linalg.norm(direction, axis=2)[..., None]
        radius = self.eps * rng.random((n, n_inner)) ** (1.0 / d)
        y = (points[:, None, :] + radius[..., None] * direction).reshape(-1, d)
        grad = np.linalg.norm(self.gradient_fn(y), axis=1)
        hess = np.linalg.norm(np.asarray(self.hessian_fn(y)), ord=2, axis=(1, 2))
        worst = (grad + hess).reshape(n, n_inner).max(axis=1)
        ratio = float(np.max(worst / (self.K * v)))
        return ratio <= 1 + 1e-12, ratio

    def __repr__(self):
        return f"LyapunovV({self.name}, K={self.K:.6g}, eps={self.eps}, cap={self.cap})"


class GriddedField:
    """
    Values of a function on [0, T] x box, sampled at the time nodes and at the
    centres of a regular spatial cell grid. ``values`` has shape
    ``(len(times),) + shape``.
    """

    def __init__(self, times: np.ndarray, lower: PointLike, upper: PointLike, values: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 1 + self.lower.shape[0] or self.values.shape[0] != self.times.shape[0]:
            raise InvalidArgumentError(f"field values of shape {self.values.shape} do not match the grid")

    @classmethod
    def from_function(cls, fn: Callable[[float, np.ndarray], np.ndarray], times: np.ndarray,
                      lower: PointLike, upper: PointLike, shape: Sequence[int]) -> 'GriddedField':
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        axes = [lower[k] + (np.arange(n) + 0.5) * (upper[k] - lower[k]) / n for k, n in enumerate(shape)]
        mesh = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, len(shape))
        values = np.stack([np.asarray(fn(t, mesh), dtype=float).reshape(tuple(shape)) for t in times])
        return cls(times, lower, upper, values)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / np.asarray(self.values.shape[1:])


def _unit_ball_kernel(spacing: np.ndarray) -> np.ndarray:
    # volume of the unit ball inside each cell, cells centred on offsets k * h
    reach = np.ceil(1.0 / spacing).astype(int) + 1
    offsets = [np.arange(-r, r + 1) * h for r, h in zip(reach, spacing)]
    sub = (np.arange(_BALL_SUBSAMPLES) + 0.5) / _BALL_SUBSAMPLES - 0.5
    fraction = np.zeros(tuple(2 * r + 1 for r in reach))
    for shift in np.stack(np.meshgrid(*([sub] * len(spacing)), indexing='ij'), axis=-1).reshape(-1, len(spacing)):
        coords = np.meshgrid(*[o + s * h for o, s, h in zip(offsets, shift, spacing)], indexing='ij')
        fraction += sum(c ** 2 for c in coords) <= 1.0 + 1e-12
    return fraction / _BALL_SUBSAMPLES ** len(spacing) * float(np.prod(spacing))


def lpq_norm(field: GriddedField, p: float, q: float) -> float:
    """
    sup over cell centres z of (int_0^T (int_{B(z,1)} |f|^p dx)^(q/p) dt)^(1/q)
    """
    if not (1 < p < math.inf and 1 < q < math.inf):
        raise InvalidArgumentError(f"exponents must satisfy 1 < p, q < inf, got p={p}, q={q}")
    spacing = field.spacing
    if np.any(spacing > 1.0):
        raise ResolutionError(f"grid spacing {spacing.tolist()} is coarser than the unit ball")
    kernel = _unit_ball_kernel(spacing)
    power = np.abs(field.values) ** p
    axes = tuple(range(1, power.ndim))
    local = fftconvolve(power, kernel[None, ...], mode='same', axes=axes)
    local = np.maximum(local, 0.0)
    integrand = local ** (q / p)
    if field.times.shape[0] > 1:
        in_time = trapezoid(integrand, x=field.times, axis=0)
    else:
        in_time = integrand[0]
    return float(np.max(in_time) ** (1.0 / q))


def kato_class(p: float, q: float, d: int) -> bool:
    return p > 2 and q > 2 and d / p + 2.0 / q < 1


def kato_budget_check(field: GriddedField, p: float, q: float, budget: float) -> dict:
    norm = lpq_norm(field, p, q)
    in_class = kato_class(p, q, field.dim)
    return {'norm': norm, 'budget': budget, 'in_class': in_class,
            'passed': bool(in_class and norm <= budget)}
