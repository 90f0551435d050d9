"""
Coupling by projection of two synchronously driven killed ensembles, and the
per-node terms bounding the truncated distance between their O-distributions.
"""
import math
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from kdsde.constants import DEFAULT_COARSEN_ATOMS, Regime, STAT_SIGMAS
from kdsde.components.exceptions import InvalidArgumentError
from kdsde.components.geometry import Domain
from kdsde.components.killed_sde import (
    CoefficientField,
    ParticleEnsemble,
    SimulationOptions,
    simulate_flow,
    step_killed,
)
from kdsde.components.measures import MeasureFlow, SubProbMeasure, TimeGrid
from kdsde.components.rng import NoiseStreams
from kdsde.components.transport import TransportSolverOptions, solve_plan
from kdsde.log import diag_logger
from kdsde.typedefs import PointLike

__all__ = (
    'ProjectionCoupling',
    'build_projection_coupling',
    'pw_bound_terms',
    'pw_rows',
    'boundary_decay_check',
    'fit_decay_constant',
    'c2_terms',
    'fit_c2_constant',
)


class ProjectionCoupling:
    """
    Paired states per grid node: ``first[k, i]`` and ``second[k, i]`` with the
    regime of particle i at node k. The raw trajectories are kept alongside.
    """

    def __init__(self,
                 domain: Domain,
                 grid: TimeGrid,
                 positions1: np.ndarray,
                 positions2: np.ndarray,
                 alive1: np.ndarray,
                 alive2: np.ndarray,
                 tau1: np.ndarray,
                 tau2: np.ndarray,
                 at_tau12: Tuple[np.ndarray, np.ndarray],
                 ):
        self.domain = domain
        self.grid = grid
        self.positions1 = positions1
        self.positions2 = positions2
        self.alive1 = alive1
        self.alive2 = alive2
        self.tau1 = tau1
        self.tau2 = tau2
        self.at_tau12 = at_tau12
        self._pair()

    def _pair(self):
        nodes = self.grid.nodes
        n_nodes, n, d = self.positions1.shape
        self.regime = np.empty((n_nodes, n), dtype=int)
        self.first = np.empty_like(self.positions1)
        self.second = np.empty_like(self.positions2)
        for k, t in enumerate(nodes):
            x1, x2 = self.positions1[k], self.positions2[k]
            both = self.alive1[k] & self.alive2[k]
            second_dead = ~both & (self.tau2 < self.tau1) & (self.tau2 <= t)
            first_dead = ~both & ~second_dead
            self.regime[k] = np.where(both, Regime.BOTH_ALIVE,
                                      np.where(second_dead, Regime.SECOND_DEAD, Regime.FIRST_DEAD))
            self.first[k] = x1
            self.second[k] = x2
            if np.any(second_dead):
                self.second[k, second_dead] = self.domain._project_to_boundary(x1[second_dead])
            if np.any(first_dead):
                self.first[k, first_dead] = self.domain._project_to_boundary(x2[first_dead])

    def __len__(self):
        return self.positions1.shape[1]

    def marginal(self, k: int, which: int = 1) -> SubProbMeasure:
        states = self.first[k] if which == 1 else self.second[k]
        return SubProbMeasure.empirical(self.domain, states)

    def output(self, k: int, which: int = 1) -> SubProbMeasure:
        if which == 1:
            return SubProbMeasure.empirical(self.domain, self.positions1[k], self.alive1[k])
        return SubProbMeasure.empirical(self.domain, self.positions2[k], self.alive2[k])


def build_projection_coupling(coeffs: CoefficientField,
                              flow1: MeasureFlow,
                              flow2: MeasureFlow,
                              shared_seed: Union[int, Tuple[int, int]],
                              initials: Tuple[ParticleEnsemble, ParticleEnsemble],
                              options: Optional[SimulationOptions] = None,
                              coeffs2: Optional[CoefficientField] = None,
                              ) -> ProjectionCoupling:
    """
    Drive both ensembles with identical noise, stepping them in lock-step so
    the positions at the first of the two exit times are recorded.
    """
    if isinstance(shared_seed, tuple):
        if shared_seed[0] != shared_seed[1]:
            raise InvalidArgumentError(f"coupled ensembles need one seed, got {shared_seed}")
        shared_seed = shared_seed[0]
    if flow1.grid != flow2.grid:
        raise InvalidArgumentError("flows live on different grids")
    first, second = initials
    if len(first) != len(second):
        raise InvalidArgumentError("coupled ensembles differ in size")
    coeffs2 = coeffs2 or coeffs
    options = options or SimulationOptions()
    grid = flow1.grid
    substeps = int(round(grid.step / options.dt))
    if substeps < 1 or abs(substeps * options.dt - grid.step) > 1e-9 * grid.step:
        raise InvalidArgumentError(f"step {options.dt} does not divide the grid step {grid.step}")
    streams = NoiseStreams(shared_seed, len(first), coeffs.noise_dim)
    domain = first.domain
    n = len(first)

    e1, e2 = first.copy(), second.copy()
    pos1 = np.empty((len(grid), n, domain.dim))
    pos2 = np.empty_like(pos1)
    alive1 = np.empty((len(grid), n), dtype=bool)
    alive2 = np.empty_like(alive1)
    pos1[0], pos2[0], alive1[0], alive2[0] = e1.positions, e2.positions, e1.alive, e2.alive
    at1, at2 = e1.positions.copy(), e2.positions.copy()
    pending = e1.alive & e2.alive
    for k in range(grid.M):
        for _ in range(substeps):
            e1 = step_killed(e1, coeffs, flow1[k], options.dt, options.semantics, streams, options.bridge_correction)
            e2 = step_killed(e2, coeffs2, flow2[k], options.dt, options.semantics, streams,
                             options.bridge_correction)
            ended = pending & ~(e1.alive & e2.alive)
            if np.any(ended):
                at1[ended] = e1.positions[ended]
                at2[ended] = e2.positions[ended]
                pending &= ~ended
        pos1[k + 1], pos2[k + 1], alive1[k + 1], alive2[k + 1] = e1.positions, e2.positions, e1.alive, e2.alive
    at1[pending] = e1.positions[pending]
    at2[pending] = e2.positions[pending]
    diag_logger.debug(f"coupled {n} pairs, {int(pending.sum())} pairs survive together")
    return ProjectionCoupling(domain, grid, pos1, pos2, alive1, alive2,
                              e1.exit_times.copy(), e2.exit_times.copy(), (at1, at2))


def pw_bound_terms(coupling: ProjectionCoupling,
                   t_index: int,
                   options: Optional[TransportSolverOptions] = None,
                   ) -> Dict[str, float]:
    """
    The three averages bounding the truncated distance at node ``t_index``,
    the transport-computed left side and the standard error of the sum.
    """
    domain = coupling.domain
    r0 = domain.r0
    t = coupling.grid.nodes[t_index]
    x1, x2 = coupling.positions1[t_index], coupling.positions2[t_index]
    tau1, tau2 = coupling.tau1, coupling.tau2
    both = coupling.alive1[t_index] & coupling.alive2[t_index]
    a1 = np.where(both[:, None], x1, coupling.at_tau12[0])
    a2 = np.where(both[:, None], x2, coupling.at_tau12[1])
    direct = np.minimum(np.linalg.norm(a1 - a2, axis=1), 1.0)

    def band(x):
        return np.minimum(r0, np.maximum(domain._signed_distance(x), 0.0)) / r0

    killed2 = band(x1) * (np.minimum(t, tau1) >= tau2)
    killed1 = band(x2) * (np.minimum(t, tau2) >= tau1)
    total = direct + killed1 + killed2
    options = options or TransportSolverOptions(max_atoms=DEFAULT_COARSEN_ATOMS)
    plan = solve_plan(coupling.output(t_index, 1), coupling.output(t_index, 2), truncated=True, options=options)
    n = total.shape[0]
    return {
        't': float(t),
        'lhs': plan.cost,
        'coarsening_error': float(plan.stats.get('coarsening_error', 0.0)),
        'direct': float(direct.mean()),
        'killed1': float(killed1.mean()),
        'killed2': float(killed2.mean()),
        'stderr': float(total.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
    }


def pw_rows(coupling: ProjectionCoupling, options: Optional[TransportSolverOptions] = None,
            sigmas: float = STAT_SIGMAS) -> List[Dict[str, float]]:
    rows = []
    for k in range(len(coupling.grid)):
        terms = pw_bound_terms(coupling, k, options)
        bound = terms['direct'] + terms['killed1'] + terms['killed2']
        terms['pass'] = terms['lhs'] - terms['coarsening_error'] <= bound + sigmas * terms['stderr'] + 1e-12
        rows.append(terms)
    return rows


def _decay_sample(coeffs: CoefficientField, domain: Domain, x: PointLike, t: float, trials: int, seed: int,
                  options: SimulationOptions, mu_flow: Optional[MeasureFlow]) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(1, domain.dim)
    if mu_flow is None:
        mu_flow = MeasureFlow.constant(SubProbMeasure(domain, x, [1.0]), TimeGrid(t, 1))
    initial = ParticleEnsemble(domain, np.repeat(x, trials, axis=0))
    streams = NoiseStreams(seed, trials, coeffs.noise_dim)
    summary, _ = simulate_flow(coeffs, mu_flow, initial, options, streams)
    final = summary.node_positions[-1]
    rho = np.where(summary.node_alive[-1], np.maximum(domain._signed_distance(final), 0.0), 0.0)
    return np.minimum(domain.r0, rho)


def boundary_decay_check(coeffs: CoefficientField,
                         domain: Domain,
                         x: PointLike,
                         t: float,
                         trials: int,
                         c: float,
                         seed: int = 0,
                         options: Optional[SimulationOptions] = None,
                         mu_flow: Optional[MeasureFlow] = None,
                         sigmas: float = STAT_SIGMAS,
                         ) -> Dict[str, float]:
    """
    E[r0 ^ dist(X_t, boundary)] from x against c dist(x, boundary)
    """
    options = options or SimulationOptions()
    rho_x = float(domain._boundary_distance(np.asarray(x, dtype=float).reshape(1, domain.dim))[0])
    if rho_x == 0:
        return {'lhs': 0.0, 'rhs': 0.0, 'stderr': 0.0, 'ratio': 0.0, 'passed': True}
    values = _decay_sample(coeffs, domain, x, t, trials, seed, options, mu_flow)
    lhs = float(values.mean())
    stderr = float(values.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    rhs = c * rho_x
    return {'lhs': lhs, 'rhs': rhs, 'stderr': stderr, 'ratio': lhs / rho_x,
            'passed': lhs <= rhs + sigmas * stderr}


def fit_decay_constant(coeffs: CoefficientField,
                       domain: Domain,
                       points: List[PointLike],
                       t: float,
                       trials: int,
                       seed: int = 0,
                       options: Optional[SimulationOptions] = None,
                       mu_flow: Optional[MeasureFlow] = None,
                       ) -> float:
    """largest observed ratio E[r0 ^ dist(X_t)] / dist(x) over the calibration points"""
    options = options or SimulationOptions()
    ratios = []
    for x in points:
        rho_x = float(domain._boundary_distance(np.asarray(x, dtype=float).reshape(1, domain.dim))[0])
        if rho_x > 0:
            ratios.append(float(_decay_sample(coeffs, domain, x, t, trials, seed, options, mu_flow).mean()) / rho_x)
    c = max(ratios) if ratios else 1.0
    diag_logger.info(f"fitted boundary decay constant c={c:.4g} on {len(ratios)} points")
    return c


def c2_terms(coupling: ProjectionCoupling,
             input_distances: np.ndarray,
             K_fn: Callable[[float], float],
             ) -> Dict[str, np.ndarray]:
    """
    Per node: the averaged truncated gap at t ^ tau12, the initial gap and the
    time integral of K times the squared input distance.
    """
    nodes = coupling.grid.nodes
    lhs = np.empty(len(nodes))
    stderr = np.empty(len(nodes))
    for k in range(len(nodes)):
        both = coupling.alive1[k] & coupling.alive2[k]
        a1 = np.where(both[:, None], coupling.positions1[k], coupling.at_tau12[0])
        a2 = np.where(both[:, None], coupling.positions2[k], coupling.at_tau12[1])
        gap = np.minimum(np.linalg.norm(a1 - a2, axis=1), 1.0)
        lhs[k] = gap.mean()
        stderr[k] = gap.std(ddof=1) / math.sqrt(gap.shape[0]) if gap.shape[0] > 1 else 0.0
    initial = float(np.minimum(np.linalg.norm(coupling.positions1[0] - coupling.positions2[0], axis=1), 1.0).mean())
    integrand = np.array([K_fn(t) for t in nodes]) * np.asarray(input_distances) ** 2
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(nodes))])
    return {'lhs': lhs, 'stderr': stderr, 'initial': np.full(len(nodes), initial), 'integral': integral}


def fit_c2_constant(terms: Dict[str, np.ndarray]) -> float:
    """smallest c >= 1 with lhs <= sqrt(c) initial + sqrt(c integral) at every node"""
    scale = terms['initial'] + np.sqrt(terms['integral'])
    with np.errstate(divide='ignore', invalid='ignore'):
        needed = np.where(scale > 0, (terms['lhs'] / scale) ** 2, np.where(terms['lhs'] > 0, np.inf, 0.0))
    return float(max(1.0, np.max(needed)))
