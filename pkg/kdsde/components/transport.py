"""
Transport distances between sub-probability measures on a domain.

Mass present on one side only is routed to a boundary reservoir: the plan is
solved on the measures extended with one dummy atom each, carrying the other
side's O-mass. The cost of sending an atom at x to the reservoir is its
(truncated) boundary distance; the literal variant charges nothing.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import ot
from pydantic import BaseModel, Field
from scipy.optimize import linprog

from kdsde.constants import (
    BoundaryCost,
    DEFAULT_SINKHORN_ITER,
    DEFAULT_SINKHORN_REG,
    EXACT_SOLVER_MAX_ATOMS,
    MARGINAL_TOL,
    MetricKind,
    SolverMethod,
    WEIGHT_QUANTUM,
)
from kdsde.components.exceptions import InternalSolverError, InvalidArgumentError
from kdsde.components.measures import LyapunovV, MeasureFlow, SubProbMeasure, coarsen
from kdsde.log import transport_logger
from kdsde.typedefs import StatsDict

__all__ = (
    'BOUNDARY',
    'TransportSolverOptions',
    'TransportPlan',
    'ground_cost',
    'reservoir_cost',
    'solve_plan',
    'w1_hat',
    'w1',
    'weighted_variation',
    'distance',
    'node_distances',
    'flow_metric',
    'reference_lp_cost',
)

BOUNDARY = -1

_EMD_MAX_ITER = 1_000_000


class TransportSolverOptions(BaseModel):
    method: str = SolverMethod.AUTO
    sinkhorn_reg: float = Field(DEFAULT_SINKHORN_REG, gt=0)
    max_iter: int = Field(DEFAULT_SINKHORN_ITER, gt=0)
    max_atoms: Optional[int] = None
    boundary_cost: str = BoundaryCost.CLOSURE


def ground_cost(x: np.ndarray, y: np.ndarray, truncated: bool) -> np.ndarray:
    c = ot.dist(x, y, metric='euclidean')
    return np.minimum(c, 1.0) if truncated else c


def reservoir_cost(mu: SubProbMeasure, x: np.ndarray, truncated: bool, boundary_cost: str) -> np.ndarray:
    if boundary_cost == BoundaryCost.INTERIOR:
        return np.zeros(x.shape[0])
    if boundary_cost != BoundaryCost.CLOSURE:
        raise InvalidArgumentError(f"unknown boundary cost convention {boundary_cost!r}")
    rho = mu.domain._boundary_distance(x) if x.shape[0] else np.zeros(0)
    return np.minimum(rho, 1.0) if truncated else rho


class TransportPlan:
    """
    A plan between the live atoms of ``source`` and ``target``. ``matrix`` has
    one extra row and column for the reservoir.
    """

    def __init__(self,
                 source: SubProbMeasure,
                 target: SubProbMeasure,
                 matrix: np.ndarray,
                 cost_matrix: np.ndarray,
                 stats: StatsDict,
                 ):
        self.source = source
        self.target = target
        self.matrix = matrix
        self.cost_matrix = cost_matrix
        self.stats = stats

    @property
    def cost(self) -> float:
        return float(np.sum(self.matrix * self.cost_matrix))

    @property
    def pairs(self) -> List[Tuple[int, int, float]]:
        n, m = self.matrix.shape[0] - 1, self.matrix.shape[1] - 1
        rows, cols = np.nonzero(self.matrix > 0)
        return [(int(i) if i < n else BOUNDARY, int(j) if j < m else BOUNDARY, float(self.matrix[i, j]))
                for i, j in zip(rows, cols) if not (i == n and j == m)]

    def check_marginals(self, tol: float = MARGINAL_TOL) -> bool:
        rows = self.matrix[:-1].sum(axis=1)
        cols = self.matrix[:, :-1].sum(axis=0)
        return bool(np.all(np.abs(rows - self.source.weights) <= tol)
                    and np.all(np.abs(cols - self.target.weights) <= tol))

    def recompute_cost(self, truncated: bool, boundary_cost: str = BoundaryCost.CLOSURE) -> float:
        cost = _augmented_cost(self.source, self.target, truncated, boundary_cost)
        return float(np.sum(self.matrix * cost))

    def summary(self) -> dict:
        n = self.matrix.shape[0] - 1
        m = self.matrix.shape[1] - 1
        return {'cost': self.cost,
                'source_atoms': n,
                'target_atoms': m,
                'to_boundary': float(self.matrix[:n, m].sum()),
                'from_boundary': float(self.matrix[n, :m].sum()),
                'matched': float(self.matrix[:n, :m].sum())}


def _quantize(w: np.ndarray) -> np.ndarray:
    return np.round(w / WEIGHT_QUANTUM) * WEIGHT_QUANTUM


def _augmented_cost(mu: SubProbMeasure, nu: SubProbMeasure, truncated: bool, boundary_cost: str) -> np.ndarray:
    n, m = len(mu), len(nu)
    cost = np.zeros((n + 1, m + 1))
    if n and m:
        cost[:n, :m] = ground_cost(mu.locations, nu.locations, truncated)
    cost[:n, m] = reservoir_cost(mu, mu.locations, truncated, boundary_cost)
    cost[n, :m] = reservoir_cost(nu, nu.locations, truncated, boundary_cost)
    return cost


def _check_same_domain(mu: SubProbMeasure, nu: SubProbMeasure):
    if mu.domain is not nu.domain and mu.domain.describe() != nu.domain.describe():
        raise InvalidArgumentError("measures live on different domains",
                                   first=mu.domain.describe(), second=nu.domain.describe())


def _live_atoms(mu: SubProbMeasure) -> SubProbMeasure:
    keep = mu.alive & (mu.weights > 0)
    return SubProbMeasure(mu.domain, mu.locations[keep], _quantize(mu.weights[keep]), check_mass=False)


def solve_plan(mu: SubProbMeasure,
               nu: SubProbMeasure,
               truncated: bool = True,
               options: Optional[TransportSolverOptions] = None,
               ) -> TransportPlan:
    options = options or TransportSolverOptions()
    _check_same_domain(mu, nu)
    coarsening_error = 0.0
    if options.max_atoms is not None:
        mu, err_mu = coarsen(mu, options.max_atoms)
        nu, err_nu = coarsen(nu, options.max_atoms)
        coarsening_error = err_mu + err_nu
    src, dst = _live_atoms(mu), _live_atoms(nu)
    n, m = len(src), len(dst)
    cost = _augmented_cost(src, dst, truncated, options.boundary_cost)
    a = np.append(src.weights, dst.weights.sum())
    b = np.append(dst.weights, src.weights.sum())
    stats = {'source_atoms': n, 'target_atoms': m, 'coarsening_error': coarsening_error}

    if n == 0 and m == 0:
        stats.update(method=SolverMethod.EXACT, result_code=1)
        return TransportPlan(src, dst, np.zeros((1, 1)), cost, stats)

    method = options.method
    if method == SolverMethod.AUTO:
        method = SolverMethod.EXACT if max(n, m) <= EXACT_SOLVER_MAX_ATOMS else SolverMethod.SINKHORN
        if method == SolverMethod.SINKHORN:
            transport_logger.warning(f"{n}x{m} atoms exceed the exact solver limit, using sinkhorn")

    if method == SolverMethod.EXACT:
        matrix, log = ot.emd(a, b, cost, numItermax=_EMD_MAX_ITER, log=True)
        code = int(log.get('result_code', 1))
        if code in (0, 2):
            raise InternalSolverError(f"network simplex failed: {log.get('warning')}", result_code=code)
        if code == 3:
            transport_logger.warning(f"network simplex hit its iteration limit on {n}x{m} atoms")
        stats.update(method=method, result_code=code)
    elif method == SolverMethod.SINKHORN:
        matrix, log = ot.sinkhorn(a, b, cost, options.sinkhorn_reg, numItermax=options.max_iter, log=True)
        primal = float(np.sum(matrix * cost))
        with np.errstate(divide='ignore'):
            alpha = options.sinkhorn_reg * np.log(np.maximum(log['u'], 1e-300))
            beta = options.sinkhorn_reg * np.log(np.maximum(log['v'], 1e-300))
        dual = float(np.dot(a, alpha) + np.dot(b, beta))
        stats.update(method=method, reg=options.sinkhorn_reg,
                     duality_gap=abs(primal - dual),
                     marginal_error=float(np.abs(matrix.sum(axis=1) - a).max()),
                     iterations=len(log.get('err', [])))
    else:
        raise InvalidArgumentError(f"unknown solver method {method!r}")

    plan = TransportPlan(src, dst, matrix, cost, stats)
    transport_logger.debug(f"plan {n}x{m} via {method}: cost={plan.cost:.6g}")
    return plan


def w1_hat(mu: SubProbMeasure, nu: SubProbMeasure, options: Optional[TransportSolverOptions] = None) -> float:
    return solve_plan(mu, nu, truncated=True, options=options).cost


def w1(mu: SubProbMeasure, nu: SubProbMeasure, options: Optional[TransportSolverOptions] = None) -> float:
    return solve_plan(mu, nu, truncated=False, options=options).cost


def weighted_variation(mu: SubProbMeasure,
                       nu: SubProbMeasure,
                       V: LyapunovV,
                       bins: Optional[Union[int, Sequence[np.ndarray]]] = None,
                       ) -> float:
    """
    sup over |f| <= V of |mu(f) - nu(f)|, exact for measures on common atoms;
    independent clouds must be binned onto a common partition first
    """
    _check_same_domain(mu, nu)
    if mu.shares_atoms(nu):
        diff = np.abs(mu.effective_weights - nu.effective_weights)
        used = diff > 0
        if not np.any(used):
            return 0.0
        return float(np.dot(V(mu.locations[used]), diff[used]))
    if bins is None:
        raise InvalidArgumentError("weighted variation of clouds without shared atoms needs a binning")
    x_mu, x_nu = mu.locations[mu.alive], nu.locations[nu.alive]
    both = np.concatenate([x_mu, x_nu])
    if both.shape[0] == 0:
        return 0.0
    span = [(lo, hi if hi > lo else lo + 1.0) for lo, hi in zip(both.min(axis=0), both.max(axis=0))]
    h_mu, edges = np.histogramdd(x_mu, bins=bins, range=span, weights=mu.weights[mu.alive])
    h_nu, _ = np.histogramdd(x_nu, bins=edges, weights=nu.weights[nu.alive])
    centers = np.stack(np.meshgrid(*[0.5 * (e[1:] + e[:-1]) for e in edges], indexing='ij'), axis=-1)
    centers = centers.reshape(-1, mu.dim)
    return float(np.dot(V(centers), np.abs(h_mu - h_nu).reshape(-1)))


def distance(mu: SubProbMeasure,
             nu: SubProbMeasure,
             metric: str,
             V: Optional[LyapunovV] = None,
             options: Optional[TransportSolverOptions] = None,
             ) -> float:
    if metric == MetricKind.W1_HAT:
        return w1_hat(mu, nu, options)
    if metric == MetricKind.W1:
        return w1(mu, nu, options)
    if metric == MetricKind.WEIGHTED_VARIATION:
        if V is None:
            raise InvalidArgumentError("weighted variation needs a Lyapunov function")
        return weighted_variation(mu, nu, V)
    raise InvalidArgumentError(f"unknown metric {metric!r}")


def node_distances(f1: MeasureFlow,
                   f2: MeasureFlow,
                   metric: str,
                   V: Optional[LyapunovV] = None,
                   options: Optional[TransportSolverOptions] = None,
                   threads: int = 1,
                   ) -> np.ndarray:
    if f1.grid != f2.grid:
        raise InvalidArgumentError(f"flows live on different grids: {f1.grid} and {f2.grid}")

    def node(k: int) -> float:
        return distance(f1[k], f2[k], metric, V, options)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(node, range(len(f1)))))
    return np.array([node(k) for k in range(len(f1))])


def flow_metric(f1: MeasureFlow,
                f2: MeasureFlow,
                metric: str,
                theta: float,
                V: Optional[LyapunovV] = None,
                options: Optional[TransportSolverOptions] = None,
                threads: int = 1,
                ) -> float:
    if theta < 0:
        raise InvalidArgumentError(f"theta({theta}) must be non-negative")
    d = node_distances(f1, f2, metric, V, options, threads)
    return float(np.max(np.exp(-theta * f1.grid.nodes) * d))


def reference_lp_cost(mu: SubProbMeasure,
                      nu: SubProbMeasure,
                      truncated: bool = True,
                      boundary_cost: str = BoundaryCost.CLOSURE,
                      ) -> float:
    """
    Brute-force value of the transport problem over plans on the closure,
    with explicit boundary atoms at the nearest boundary point of every atom.
    Meant for small instances only.
    """
    _check_same_domain(mu, nu)
    src, dst = _live_atoms(mu), _live_atoms(nu)
    n, m = len(src), len(dst)
    if n == 0 and m == 0:
        return 0.0
    domain = mu.domain
    boundary = np.concatenate([domain._closest_boundary_point(x) for x in (src.locations, dst.locations)
                               if x.shape[0]])
    k = boundary.shape[0]

    def cost_to_boundary(x: np.ndarray) -> np.ndarray:
        if boundary_cost == BoundaryCost.INTERIOR:
            return np.zeros((x.shape[0], k))
        return ground_cost(x, boundary, truncated)

    # variables: src x dst, src x boundary, boundary x dst
    c = np.concatenate([
        ground_cost(src.locations, dst.locations, truncated).reshape(-1) if n and m else np.zeros(0),
        cost_to_boundary(src.locations).reshape(-1),
        cost_to_boundary(dst.locations).T.reshape(-1),
    ])
    n_vars = c.shape[0]
    a_eq = np.zeros((n + m, n_vars))
    off_sb = n * m
    off_bd = off_sb + n * k
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
        a_eq[i, off_sb + i * k:off_sb + (i + 1) * k] = 1.0
    for j in range(m):
        a_eq[n + j, j:n * m:m] = 1.0
        a_eq[n + j, off_bd + j:off_bd + k * m:m] = 1.0
    b_eq = np.concatenate([src.weights, dst.weights])
    result = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method='highs')
    if not result.success:
        raise InternalSolverError(f"reference LP failed: {result.message}")
    return float(result.fun)
