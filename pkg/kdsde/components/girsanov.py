"""
Realizing the solution map under a second flow by exponential reweighting of
paths simulated under a first one. Both realizations live on the same atoms,
so their weighted-variation distance is evaluated exactly.
"""
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from kdsde.constants import ESS_REFRESH_FRACTION, LARGE_LAMBDA, MOMENT_SPAN, MetricKind, STAT_SIGMAS
from kdsde.components.exceptions import (
    IndeterminateRatioError,
    InvalidArgumentError,
    NonConvergenceError,
    SingularityError,
)
from kdsde.components.killed_sde import (
    CoefficientField,
    ParticleEnsemble,
    SimulationOptions,
    TrajectorySummary,
    simulate_flow,
    sup_moment_ratios,
)
from kdsde.components.measures import LyapunovV, MeasureFlow, SubProbMeasure
from kdsde.components.picard import PicardConfig, PicardResult, TraceRow, picard_solve, select_theta
from kdsde.components.rng import NoiseStreams
from kdsde.components.transport import weighted_variation
from kdsde.helpers import Stopwatch
from kdsde.log import diag_logger, solver_logger
from kdsde.typedefs import PointLike, ScalarField

__all__ = (
    'BaseRun',
    'ReweightedFlow',
    'reweight_flow',
    'v_node_distances',
    'v_contraction_check',
    'calibrate_v_constant',
    'moment_bound_check',
    'picard_solve_reweighted',
)

_SINGULAR_TOL = 1e-12
_UNSHARED_BINS = 64


def _require_measure_free_noise(coeffs: CoefficientField):
    if coeffs.diffusion_depends_on_measure:
        raise InvalidArgumentError("noise has to be distribution independent for reweighting",
                                   coefficients=coeffs.name)


def capped(V: LyapunovV) -> LyapunovV:
    if V.cap is None:
        return V
    return LyapunovV(V.truncated, V.gradient_fn, V.hessian_fn, V.K, V.eps, name=f'{V.name}^{V.cap:g}')


class BaseRun:
    """
    A trajectory set driven under ``flow``. Nothing but the seed is stored:
    ``replay`` regenerates the run bit for bit from the counter-based streams.
    """

    def __init__(self,
                 coeffs: CoefficientField,
                 flow: MeasureFlow,
                 initial: ParticleEnsemble,
                 seed: int,
                 options: Optional[SimulationOptions] = None,
                 ):
        self.coeffs = coeffs
        self.flow = flow
        self.initial = initial
        self.seed = seed
        self.options = options or SimulationOptions()
        self.summary, self.output = self.replay()

    @property
    def streams(self) -> NoiseStreams:
        return NoiseStreams(self.seed, len(self.initial), self.coeffs.noise_dim)

    def replay(self, observer=None):
        return simulate_flow(self.coeffs, self.flow, self.initial, self.options, self.streams, observer=observer)

    def __len__(self):
        return len(self.initial)


class ReweightedFlow:
    """
    ``log_weights[k, i]`` is log R at node k for particle i; weights stop
    accumulating once the particle is killed.
    """

    def __init__(self, base: BaseRun, log_weights: np.ndarray, xi_sup: np.ndarray):
        self.base = base
        self.log_weights = log_weights
        self.xi_sup = xi_sup
        summary = base.summary
        n = len(base)
        snapshots = [SubProbMeasure(base.flow.domain, summary.node_positions[k], np.exp(log_weights[k]) / n,
                                    summary.node_alive[k], check_mass=False)
                     for k in range(len(summary.grid))]
        self.flow = MeasureFlow(summary.grid, snapshots, check_mass=False)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def mean_weight(self) -> np.ndarray:
        return self.weights.mean(axis=1)

    def weight_stderr(self) -> np.ndarray:
        n = self.log_weights.shape[1]
        return self.weights.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(self.log_weights))

    def ess(self) -> np.ndarray:
        """(sum R)^2 / sum R^2 per node"""
        w = self.weights
        return w.sum(axis=1) ** 2 / np.sum(w * w, axis=1)

    def martingale_rows(self, sigmas: float = STAT_SIGMAS) -> List[Dict[str, float]]:
        mean, err = self.mean_weight(), self.weight_stderr()
        ess = self.ess()
        return [{'t': float(t), 'mean_R': float(mean[k]), 'stderr': float(err[k]), 'ess': float(ess[k]),
                 'pass': bool(abs(mean[k] - 1.0) <= sigmas * err[k] + 1e-12)}
                for k, t in enumerate(self.flow.grid.nodes)]


def _xi(coeffs: CoefficientField, t: float, x: np.ndarray, mu1: SubProbMeasure, mu2: SubProbMeasure) -> np.ndarray:
    """sigma* (sigma sigma*)^-1 (b(x, mu2) - b(x, mu1))"""
    db = coeffs.drift(t, x, mu2) - coeffs.drift(t, x, mu1)
    s = coeffs.diffusion(t, x, mu1)
    a = np.einsum('nim,njm->nij', s, s)
    det = np.linalg.det(a)
    scale = np.maximum(np.einsum('nii->n', a) ** a.shape[1], 1.0)
    bad = np.abs(det) <= _SINGULAR_TOL * scale
    if np.any(bad):
        i = int(np.argmax(bad))
        raise SingularityError(f"degenerate diffusion at {x[i].tolist()} (t={t!r})", point=x[i].tolist(), t=t)
    return np.einsum('nim,ni->nm', s, np.linalg.solve(a, db[..., None])[..., 0])


def reweight_flow(coeffs: CoefficientField,
                  flow1: MeasureFlow,
                  flow2: MeasureFlow,
                  base: BaseRun,
                  ) -> ReweightedFlow:
    """
    Realize Phi applied to ``flow2`` on the atoms of ``base``, which was driven
    under ``flow1``.
    """
    _require_measure_free_noise(coeffs)
    if flow1.grid != flow2.grid or flow1.grid != base.flow.grid:
        raise InvalidArgumentError("flows and base run live on different grids")
    n = len(base)
    nodes = len(flow1.grid)
    log_r = np.zeros(n)
    log_weights = np.zeros((nodes, n))
    xi_sup = np.zeros(nodes)
    streams = base.streams
    dt = base.options.dt

    def observe(step, t, k, before, after):
        live = np.flatnonzero(before.alive)
        if live.size:
            x = before.positions[live]
            xi = _xi(coeffs, t, x, flow1[k], flow2[k])
            dw = streams.normals(step, before.ids[live]) * math.sqrt(dt)
            log_r[before.ids[live]] += np.sum(xi * dw, axis=1) - 0.5 * np.sum(xi * xi, axis=1) * dt
            xi_sup[k + 1] = max(xi_sup[k + 1], float(np.max(np.linalg.norm(xi, axis=1))))
        log_weights[k + 1] = log_r

    base.replay(observe)
    reweighted = ReweightedFlow(base, log_weights, xi_sup)
    diag_logger.debug(f"reweighted {n} paths, min ESS {float(reweighted.ess().min()):.1f}")
    return reweighted


def v_node_distances(f1: MeasureFlow, f2: MeasureFlow, V: LyapunovV) -> np.ndarray:
    """node-wise weighted variation, binned where the flows do not share atoms"""
    if f1.grid != f2.grid:
        raise InvalidArgumentError("flows live on different grids")
    out = np.empty(len(f1))
    for k in range(len(f1)):
        shared = f1[k].shares_atoms(f2[k])
        out[k] = weighted_variation(f1[k], f2[k], V, bins=None if shared else _UNSHARED_BINS)
    return out


def _integral_factor(lam: float, T: float) -> float:
    # sup over t <= T of (int_0^t exp(-2 lam (t - s)) ds)^(1/2)
    if lam == 0:
        return math.sqrt(T)
    return math.sqrt((1.0 - math.exp(-2.0 * lam * T)) / (2.0 * lam))


def _v_terms(coeffs: CoefficientField, gamma: SubProbMeasure, flow1: MeasureFlow, flow2: MeasureFlow,
             V: LyapunovV, lam: float, particles: int, seed: int,
             options: Optional[SimulationOptions]) -> Dict[str, float]:
    _require_measure_free_noise(coeffs)
    nodes = flow1.grid.nodes
    weight = np.exp(-lam * nodes)
    rho = float(np.max(weight * v_node_distances(flow1, flow2, V)))
    if rho == 0:
        raise IndeterminateRatioError("input flows coincide in the weighted variation", lam=lam)
    initial = ParticleEnsemble.from_measure(gamma, particles, NoiseStreams(seed, particles, coeffs.noise_dim))
    base = BaseRun(coeffs, flow1, initial, seed, options)
    second = reweight_flow(coeffs, flow1, flow2, base)
    out = v_node_distances(base.output, second.flow, V)
    summary = base.summary
    stderr = 0.0
    k = int(np.argmax(weight * out))
    if particles > 1:
        v = V(summary.node_positions[k]) * summary.node_alive[k]
        terms = v * np.abs(second.weights[k] - 1.0)
        stderr = float(weight[k] * terms.std(ddof=1) / math.sqrt(particles))
    return {'lhs': float(np.max(weight * out)), 'rho': rho, 'stderr': stderr,
            'factor': _integral_factor(lam, float(nodes[-1]))}


def calibrate_v_constant(coeffs: CoefficientField,
                         gamma: SubProbMeasure,
                         flow1: MeasureFlow,
                         flow2: MeasureFlow,
                         V: LyapunovV,
                         lambdas: Sequence[float] = (1.0, 10.0, 100.0),
                         particles: int = 10000,
                         seed: int = 0,
                         options: Optional[SimulationOptions] = None,
                         ) -> float:
    """largest C with lhs = C rho_lambda factor over the calibration lambdas"""
    best = 0.0
    for lam in lambdas:
        terms = _v_terms(coeffs, gamma, flow1, flow2, V, lam, particles, seed, options)
        best = max(best, terms['lhs'] / (terms['rho'] * terms['factor']))
    diag_logger.info(f"calibrated weighted-variation constant C={best:.4g}")
    return best


def v_contraction_check(coeffs: CoefficientField,
                        gamma: SubProbMeasure,
                        flow1: MeasureFlow,
                        flow2: MeasureFlow,
                        V: LyapunovV,
                        lam: float,
                        C: float,
                        particles: int = 10000,
                        seed: int = 0,
                        options: Optional[SimulationOptions] = None,
                        sigmas: float = STAT_SIGMAS,
                        large_lambda: float = LARGE_LAMBDA,
                        ) -> Dict[str, float]:
    """
    sup_t e^{-lam t} |Phi mu1_t - Phi mu2_t|_V on shared atoms against
    C rho_lam(mu1, mu2) (int_0^t e^{-2 lam (t - s)} ds)^(1/2). From
    ``large_lambda`` on, the ratio lhs / rho_lam must also be below one.
    """
    terms = _v_terms(coeffs, gamma, flow1, flow2, V, lam, particles, seed, options)
    rhs = C * terms['rho'] * terms['factor']
    ratio = terms['lhs'] / terms['rho']
    bounded = terms['lhs'] <= rhs + sigmas * terms['stderr'] + 1e-12
    contracting = lam < large_lambda or ratio < 1.0
    result = {'lambda': lam, 'lhs': terms['lhs'], 'rhs': rhs, 'rho': terms['rho'],
              'ratio': ratio, 'stderr': terms['stderr'], 'contracting': contracting,
              'passed': bounded and contracting}
    diag_logger.info(f"weighted-variation contraction at lambda={lam}: ratio {result['ratio']:.4g}")
    return result


def moment_bound_check(coeffs: CoefficientField,
                       V: ScalarField,
                       gamma: SubProbMeasure,
                       p: float = 2.0,
                       config: Optional[PicardConfig] = None,
                       starts: Optional[Sequence[PointLike]] = None,
                       bound: Optional[float] = None,
                       sigmas: float = STAT_SIGMAS,
                       ) -> Dict[str, object]:
    """
    Solve the fixed point started from ``gamma`` and estimate
    E[sup_t V(X_t)^p] / V(X_0)^p for particles started at each live atom of
    ``gamma`` (or at ``starts``). Without a bound, the bound is fitted at the
    start with the smallest V(X_0); the check passes when no start exceeds it
    within the slack, so a ratio growing with V(X_0) fails.
    """
    config = config or PicardConfig()
    flow = picard_solve(coeffs, gamma, config).flow
    if starts is None:
        starts = np.unique(gamma.locations[gamma.alive], axis=0)
    points = np.asarray(starts, dtype=float).reshape(-1, gamma.domain.dim)
    v0 = np.asarray(V(points), dtype=float).reshape(-1)
    order = np.argsort(v0, kind='stable')
    rows = sup_moment_ratios(coeffs, flow, points[order], V, p, config.particles, config.simulation, config.seed)
    span = float(v0[order[-1]] / v0[order[0]])
    if span < MOMENT_SPAN:
        diag_logger.warning(f"starting points span V(X_0) by {span:.3g}x, less than {MOMENT_SPAN:g}x")
    if bound is None:
        bound = rows[0]['ratio'] + sigmas * rows[0]['stderr']
    observed = max(row['ratio'] for row in rows)
    passed = all(row['ratio'] - sigmas * row['stderr'] <= bound for row in rows)
    diag_logger.info(f"moment ratios {[round(row['ratio'], 4) for row in rows]} against bound {bound:.4g}")
    return {'rows': rows, 'observed': observed, 'bound': bound, 'span': span, 'passed': passed}


def _uncapped_distances(f1: MeasureFlow, f2: MeasureFlow, raw: LyapunovV, V: LyapunovV,
                        capped_distances: np.ndarray) -> np.ndarray:
    if raw is V:
        return capped_distances
    return v_node_distances(f1, f2, raw)


def picard_solve_reweighted(coeffs: CoefficientField, gamma: SubProbMeasure, config: PicardConfig) -> PicardResult:
    """
    Picard iteration in the weighted variation: one base run realizes every
    iterate by reweighting against the previous flow. When the effective
    sample size of a new iterate drops below the refresh fraction, the base
    is redrawn under the current iterate and the previous one re-realized on
    it, so consecutive iterates always share atoms.
    """
    _require_measure_free_noise(coeffs)
    grid = config.grid
    nodes = grid.nodes
    raw = coeffs.V or LyapunovV.constant(coeffs.dim)
    V = capped(raw)
    metric = MetricKind.WEIGHTED_VARIATION
    if gamma.mass == 0:
        solver_logger.info("initial law has no mass, the zero flow is the fixed point")
        zeros = np.zeros(len(grid))
        return PicardResult(MeasureFlow.constant(gamma, grid), [TraceRow(1, zeros, nodes, uncapped=zeros)],
                            config.theta or 0.0, True, metric)

    n = config.particles
    initial = ParticleEnsemble.from_measure(gamma, n, NoiseStreams(config.seed, n, coeffs.noise_dim))
    previous_input = MeasureFlow.constant(gamma, grid)
    base = BaseRun(coeffs, previous_input, initial, config.seed, config.simulation)
    previous = base.output
    d = v_node_distances(previous, previous_input, V)
    trace = [TraceRow(1, d, nodes, uncapped=_uncapped_distances(previous, previous_input, raw, V, d))]
    theta = config.theta
    watch = Stopwatch()
    summary: Optional[TrajectorySummary] = base.summary
    for it in range(2, config.max_iter + 1):
        current = reweight_flow(coeffs, base.flow, previous, base)
        ess = float(current.ess().min())
        if ess < ESS_REFRESH_FRACTION * n:
            solver_logger.warning(f"iteration {it}: ESS {ess:.0f} below {ESS_REFRESH_FRACTION:g}N, refreshing base")
            base = BaseRun(coeffs, previous, initial, config.seed, config.simulation)
            current_flow = base.output
            previous_flow = reweight_flow(coeffs, base.flow, previous_input, base).flow
        else:
            current_flow = current.flow
            previous_flow = previous
        summary = base.summary
        d = v_node_distances(current_flow, previous_flow, V)
        trace.append(TraceRow(it, d, nodes, watch.lap(f'iteration {it}'),
                              uncapped=_uncapped_distances(current_flow, previous_flow, raw, V, d)))
        if theta is None:
            theta = select_theta(trace[-2].node_distances, d, nodes)
            solver_logger.info(f"selected theta={theta}")
        distance = trace[-1].distance(theta)
        solver_logger.info(f"iteration {it}: weighted variation {distance:.6g}")
        previous_input, previous = previous, current_flow
        if distance < config.tol:
            return PicardResult(current_flow, trace, theta, True, metric, summary)

    theta = 0.0 if theta is None else theta
    rows = [{'iteration': r.iteration, 'distance': r.distance(theta)} for r in trace]
    raise NonConvergenceError(f"no convergence within {config.max_iter} iterations", trace=rows, theta=theta)
