"""
Picard iteration of the solution map Phi on measure flows.

Every application of Phi integrates the same initial ensemble with the same
noise streams, so Phi is a deterministic map on flows and successive iterate
distances measure contraction rather than resampling noise.
"""
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from kdsde.constants import (
    BOUNDARY_TOL,
    DEFAULT_COARSEN_ATOMS,
    DomainKind,
    INDETERMINATE_FACTOR,
    METRIC_FOR_HYPOTHESIS,
    MetricKind,
    Semantics,
    THETA_SCHEDULE,
    THETA_TARGET_RATIO,
)
from kdsde.components.exceptions import (
    IndeterminateRatioError,
    InvalidArgumentError,
    InvalidTestFunctionError,
    NonConvergenceError,
)
from kdsde.components.geometry import Domain
from kdsde.components.killed_sde import (
    CoefficientField,
    ParticleEnsemble,
    SimulationOptions,
    TrajectorySummary,
    simulate_flow,
)
from kdsde.components.measures import MeasureFlow, SubProbMeasure, TimeGrid
from kdsde.components.rng import NoiseStreams
from kdsde.components.transport import TransportSolverOptions, node_distances
from kdsde.helpers import Stopwatch
from kdsde.log import solver_logger
from kdsde.utils import write_csv

__all__ = (
    'PicardConfig',
    'TraceRow',
    'PicardResult',
    'DirichletTestFunction',
    'apply_phi',
    'picard_solve',
    'estimate_contraction',
    'contraction_ratios',
    'select_theta',
    'self_consistency',
    'fokker_planck_residual',
)


def _default_transport():
    return TransportSolverOptions(max_atoms=DEFAULT_COARSEN_ATOMS)


class PicardConfig(BaseModel):
    theta: Optional[float] = None
    tol: float = Field(1e-3, gt=0)
    max_iter: int = Field(20, ge=1)
    particles: int = Field(10000, gt=0)
    dt: float = Field(1e-3, gt=0)
    T: float = Field(1.0, gt=0)
    M: int = Field(10, ge=1)
    metric: Optional[str] = None
    semantics: str = Semantics.FREEZE_AT_EXIT
    bridge_correction: bool = False
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    transport: TransportSolverOptions = Field(default_factory=_default_transport)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.M)

    @property
    def simulation(self) -> SimulationOptions:
        return SimulationOptions(dt=self.dt, semantics=self.semantics, bridge_correction=self.bridge_correction)

    def metric_for(self, coeffs: CoefficientField) -> str:
        expected = METRIC_FOR_HYPOTHESIS[coeffs.hypothesis]
        metric = self.metric or expected
        if metric != expected:
            raise InvalidArgumentError(
                f"hypothesis {coeffs.hypothesis} contracts in {expected}, not in {metric}")
        return metric


class TraceRow:
    def __init__(self, iteration: int, node_distances: np.ndarray, nodes: np.ndarray, wall_time: float = 0.0,
                 uncapped: Optional[np.ndarray] = None):
        self.iteration = iteration
        self.node_distances = node_distances
        self.nodes = nodes
        self.wall_time = wall_time
        # weighted variation under the untruncated V, next to the capped one
        self.uncapped = uncapped

    def distance(self, theta: float, uncapped: bool = False) -> float:
        d = self.uncapped if uncapped else self.node_distances
        return float(np.max(np.exp(-theta * self.nodes) * d))

    def __repr__(self):
        return f"TraceRow({self.iteration}, sup={float(np.max(self.node_distances)):.4g})"


class PicardResult:
    def __init__(self,
                 flow: MeasureFlow,
                 trace: List[TraceRow],
                 theta: float,
                 converged: bool,
                 metric: str,
                 summary: Optional[TrajectorySummary] = None,
                 ):
        self.flow = flow
        self.trace = trace
        self.theta = theta
        self.converged = converged
        self.metric = metric
        self.summary = summary

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def distances(self) -> List[float]:
        return [row.distance(self.theta) for row in self.trace]

    def ratios(self) -> List[float]:
        d = self.distances
        return [d[i] / d[i - 1] if d[i - 1] > 0 else 0.0 for i in range(1, len(d))]

    def write_trace(self, path: str) -> str:
        return write_csv(path, ('iteration', 'theta', 'distance'),
                         [(row.iteration, self.theta, row.distance(self.theta)) for row in self.trace])

    def write_timing(self, path: str) -> str:
        return write_csv(path, ('iteration', 'wall_time'), [(row.iteration, row.wall_time) for row in self.trace])

    def verdict(self) -> Dict[str, object]:
        verdict = {'converged': self.converged, 'iterations': self.iterations, 'theta': self.theta,
                   'metric': self.metric, 'final_distance': self.distances[-1] if self.trace else 0.0}
        if self.trace and self.trace[-1].uncapped is not None:
            verdict['final_distance_uncapped'] = self.trace[-1].distance(self.theta, uncapped=True)
        return verdict


class DirichletTestFunction:
    """A C2 function on the closure vanishing on the boundary."""

    def __init__(self,
                 f: Callable[[np.ndarray], np.ndarray],
                 gradient: Callable[[np.ndarray], np.ndarray],
                 hessian: Callable[[np.ndarray], np.ndarray],
                 name: str = 'custom',
                 ):
        self.f = f
        self.gradient = gradient
        self.hessian = hessian
        self.name = name

    @classmethod
    def sine_mode(cls, domain: Domain, k: int = 1) -> 'DirichletTestFunction':
        """sin(k pi (x - a) / (b - a)) on a bounded interval (a, b)"""
        if domain.kind != DomainKind.INTERVAL or not (math.isfinite(domain.lower) and math.isfinite(domain.upper)):
            raise InvalidArgumentError("sine modes need a bounded interval")
        a, w = domain.lower, k * math.pi / (domain.upper - domain.lower)
        return cls(lambda x: np.sin(w * (x[:, 0] - a)),
                   lambda x: (w * np.cos(w * (x[:, 0] - a)))[:, None],
                   lambda x: (-w * w * np.sin(w * (x[:, 0] - a)))[:, None, None],
                   name=f'sine[{k}]')

    @classmethod
    def zero(cls, dim: int = 1) -> 'DirichletTestFunction':
        return cls(lambda x: np.zeros(x.shape[0]),
                   lambda x: np.zeros_like(x),
                   lambda x: np.zeros((x.shape[0], dim, dim)),
                   name='zero')

    def check(self, domain: Domain, samples: int = 64, seed: int = 0):
        rng = np.random.Generator(np.random.Philox(seed))
        points = domain.sample_boundary(samples, rng)
        values = np.abs(np.asarray(self.f(points), dtype=float))
        if np.any(values > BOUNDARY_TOL):
            i = int(np.argmax(values))
            raise InvalidTestFunctionError(f"test function {self.name} does not vanish on the boundary",
                                           point=points[i].tolist(), value=float(values[i]))


def apply_phi(coeffs: CoefficientField,
              flow: MeasureFlow,
              initial: ParticleEnsemble,
              config: PicardConfig,
              ) -> Tuple[TrajectorySummary, MeasureFlow]:
    streams = NoiseStreams(config.seed, len(initial), coeffs.noise_dim)
    return simulate_flow(coeffs, flow, initial, config.simulation, streams)


def _initial_ensemble(coeffs: CoefficientField, gamma: SubProbMeasure, config: PicardConfig) -> ParticleEnsemble:
    return ParticleEnsemble.from_measure(gamma, config.particles,
                                         NoiseStreams(config.seed, config.particles, coeffs.noise_dim))


def select_theta(first: np.ndarray, second: np.ndarray, nodes: np.ndarray,
                 schedule: Sequence[float] = THETA_SCHEDULE) -> float:
    """
    smallest theta of the schedule at which the weighted distance of the
    second pair of iterates is below the target fraction of the first
    """
    for theta in schedule:
        weight = np.exp(-theta * nodes)
        denominator = float(np.max(weight * first))
        if denominator == 0:
            return theta
        if float(np.max(weight * second)) / denominator < THETA_TARGET_RATIO:
            return theta
    solver_logger.warning(f"no theta in {tuple(schedule)} reaches the target ratio, using {schedule[-1]}")
    return schedule[-1]


def picard_solve(coeffs: CoefficientField, gamma: SubProbMeasure, config: PicardConfig) -> PicardResult:
    metric = config.metric_for(coeffs)
    if metric == MetricKind.WEIGHTED_VARIATION:
        from kdsde.components.girsanov import picard_solve_reweighted
        return picard_solve_reweighted(coeffs, gamma, config)

    grid = config.grid
    nodes = grid.nodes
    if gamma.mass == 0:
        solver_logger.info("initial law has no mass, the zero flow is the fixed point")
        zero = MeasureFlow.constant(gamma, grid)
        return PicardResult(zero, [TraceRow(1, np.zeros(len(grid)), nodes)], config.theta or 0.0, True, metric)

    initial = _initial_ensemble(coeffs, gamma, config)
    previous = MeasureFlow.constant(gamma, grid)
    trace: List[TraceRow] = []
    theta = config.theta
    summary = None
    watch = Stopwatch()
    for n in range(1, config.max_iter + 1):
        summary, current = apply_phi(coeffs, previous, initial, config)
        d = node_distances(current, previous, metric, options=config.transport, threads=config.threads)
        trace.append(TraceRow(n, d, nodes, watch.lap(f'iteration {n}')))
        if theta is None and n >= 2:
            theta = select_theta(trace[-2].node_distances, d, nodes)
            solver_logger.info(f"selected theta={theta}")
        distance = trace[-1].distance(theta or 0.0)
        solver_logger.info(f"iteration {n}: {metric} distance {distance:.6g}")
        previous = current
        if distance < config.tol and n >= 2:
            theta = 0.0 if theta is None else theta
            solver_logger.info(f"converged after {n} iterations")
            return PicardResult(current, trace, theta, True, metric, summary)

    theta = 0.0 if theta is None else theta
    rows = [{'iteration': r.iteration, 'distance': r.distance(theta)} for r in trace]
    raise NonConvergenceError(f"no convergence within {config.max_iter} iterations", trace=rows, theta=theta)


def _contraction_node_distances(coeffs: CoefficientField, gamma1: SubProbMeasure, gamma2: SubProbMeasure,
                                config: PicardConfig):
    metric = config.metric_for(coeffs)
    grid = config.grid
    first = _initial_ensemble(coeffs, gamma1, config)
    second = _initial_ensemble(coeffs, gamma2, config)
    _, mu1 = apply_phi(coeffs, MeasureFlow.constant(gamma1, grid), first, config)
    _, mu2 = apply_phi(coeffs, MeasureFlow.constant(gamma2, grid), second, config)
    _, phi1 = apply_phi(coeffs, mu1, first, config)
    _, phi2 = apply_phi(coeffs, mu2, first, config)
    inputs = node_distances(mu1, mu2, metric, options=config.transport, threads=config.threads)
    outputs = node_distances(phi1, phi2, metric, options=config.transport, threads=config.threads)
    return inputs, outputs, grid.nodes


def _ratio(inputs: np.ndarray, outputs: np.ndarray, nodes: np.ndarray, theta: float, tol: float) -> float:
    weight = np.exp(-theta * nodes)
    denominator = float(np.max(weight * inputs))
    if denominator < INDETERMINATE_FACTOR * tol:
        raise IndeterminateRatioError(f"input flows are {denominator:.3g} apart, below {INDETERMINATE_FACTOR}*tol",
                                      theta=theta)
    return float(np.max(weight * outputs)) / denominator


def estimate_contraction(coeffs: CoefficientField, gamma1: SubProbMeasure, gamma2: SubProbMeasure,
                         config: PicardConfig) -> float:
    """
    Empirical Lipschitz constant of Phi at weight theta: the input flows are
    Phi applied to the constant flows of gamma1 and gamma2, and both outputs
    are integrated from the same initial ensemble.
    """
    inputs, outputs, nodes = _contraction_node_distances(coeffs, gamma1, gamma2, config)
    return _ratio(inputs, outputs, nodes, config.theta or 0.0, config.tol)


def contraction_ratios(coeffs: CoefficientField, gamma1: SubProbMeasure, gamma2: SubProbMeasure,
                       config: PicardConfig, thetas: Sequence[float] = THETA_SCHEDULE) -> Dict[float, float]:
    inputs, outputs, nodes = _contraction_node_distances(coeffs, gamma1, gamma2, config)
    return {theta: _ratio(inputs, outputs, nodes, theta, config.tol) for theta in thetas}


def self_consistency(coeffs: CoefficientField, gamma: SubProbMeasure, result: PicardResult,
                     config: PicardConfig) -> float:
    """distance between the fixed point and one more application of Phi under a fresh seed"""
    fresh = config.copy(update={'seed': (config.seed + 1) % (2 ** 64)})
    initial = _initial_ensemble(coeffs, gamma, fresh)
    _, again = apply_phi(coeffs, result.flow, initial, fresh)
    d = node_distances(again, result.flow, result.metric, options=config.transport, threads=config.threads)
    return float(np.max(np.exp(-result.theta * config.grid.nodes) * d))


def fokker_planck_residual(flow: MeasureFlow, coeffs: CoefficientField, f: DirichletTestFunction) -> float:
    """
    max over nodes of |mu_t(f) - mu_0(f) - int_0^t mu_s(L f) ds| with the
    time integral by the trapezoid rule over the grid nodes
    """
    f.check(flow.domain)
    nodes = flow.grid.nodes
    values = np.empty(len(flow))
    generator = np.empty(len(flow))
    for k, mu in enumerate(flow):
        values[k] = mu.integrate(f.f)
        if mu.mass == 0:
            generator[k] = 0.0
            continue
        x = mu.locations[mu.alive]
        lf = coeffs.generator(nodes[k], x, mu, f.gradient(x), f.hessian(x))
        generator[k] = float(np.dot(mu.weights[mu.alive], lf))
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (generator[1:] + generator[:-1]) * np.diff(nodes))])
    residual = np.abs(values - values[0] - integral)
    solver_logger.debug(f"Fokker-Planck residual per node: {residual.tolist()}")
    return float(np.max(residual))
