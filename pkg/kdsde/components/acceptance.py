"""
Registered acceptance experiments. Every criterion reports one normalized
``observed`` value and passes when it does not exceed its threshold.
"""
import math
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from kdsde.constants import DEFAULT_COARSEN_ATOMS, MetricKind, STAT_SIGMAS, Semantics, SolverMethod, Tier
from kdsde.components.coupling import build_projection_coupling, boundary_decay_check, pw_rows
from kdsde.components.exceptions import KdsdeError, UnknownComponentError
from kdsde.components.geometry import interval
from kdsde.components.girsanov import BaseRun, moment_bound_check, reweight_flow, v_contraction_check, \
    calibrate_v_constant
from kdsde.components.killed_sde import (
    COEFFICIENT_FAMILIES,
    ParticleEnsemble,
    SimulationOptions,
    simulate_flow,
)
from kdsde.components.measures import LyapunovV, MeasureFlow, SubProbMeasure, TimeGrid
from kdsde.components.oracles import AbsorbedBrownianMotion
from kdsde.components.picard import DirichletTestFunction, PicardConfig, fokker_planck_residual, picard_solve
from kdsde.components.rng import NoiseStreams
from kdsde.components.status import ErrorStatus, status_of
from kdsde.components.transport import (
    TransportSolverOptions,
    node_distances,
    reference_lp_cost,
    w1,
    w1_hat,
)
from kdsde.log import diag_logger

__all__ = (
    'SuiteContext',
    'CriterionResult',
    'CRITERIA',
    'criterion',
    'run_suite',
    'acceptance_suite',
)

CRITERIA: Dict[str, 'Criterion'] = {}

_SIZES = {Tier.FAST: 10 ** 4, Tier.FULL: 10 ** 5}


class SuiteContext:
    def __init__(self, tier: str = Tier.FAST, seed: int = 0, threads: int = 1, particles: Optional[int] = None):
        if tier not in _SIZES:
            raise UnknownComponentError(f"unknown tier {tier!r}")
        self.tier = tier
        self.seed = seed
        self.threads = threads
        self._particles = particles

    @property
    def particles(self) -> int:
        return self._particles or _SIZES[self.tier]

    def sized(self, fast: int, full: int) -> int:
        if self._particles:
            return self._particles
        return fast if self.tier == Tier.FAST else full

    @property
    def transport(self) -> TransportSolverOptions:
        return TransportSolverOptions(max_atoms=DEFAULT_COARSEN_ATOMS)


class CriterionResult:
    def __init__(self, name: str, observed: float, threshold: float, details: Optional[dict] = None,
                 error: Optional[KdsdeError] = None):
        self.name = name
        self.observed = observed
        self.threshold = threshold
        self.details = details or {}
        self.error = error

    @property
    def passed(self) -> bool:
        return self.error is None and self.observed <= self.threshold

    @property
    def status(self):
        return ErrorStatus if self.error is not None else status_of(self.passed)

    def row(self, tier: str) -> tuple:
        return self.name, tier, self.observed, self.threshold, self.status.reason

    def __repr__(self):
        return f"CriterionResult({self.name}, {self.observed:.4g} <= {self.threshold:g}: {self.status.reason})"


class Criterion:
    def __init__(self, name: str, description: str, threshold: float, fn: Callable[[SuiteContext], tuple]):
        self.name = name
        self.description = description
        self.threshold = threshold
        self.fn = fn

    def run(self, ctx: SuiteContext, tolerance_override: Optional[float] = None) -> CriterionResult:
        threshold = self.threshold if tolerance_override is None else tolerance_override
        try:
            observed, details = self.fn(ctx)
        except KdsdeError as e:
            diag_logger.error(f"criterion {self.name} raised {e}")
            return CriterionResult(self.name, math.inf, threshold, error=e)
        result = CriterionResult(self.name, float(observed), threshold, details)
        diag_logger.info(f"{self.name} [{ctx.tier}] observed {result.observed:.6g} "
                         f"threshold {threshold:g}: {result.status.reason}")
        return result


def criterion(name: str, description: str, threshold: float = 1.0):
    def decorator(fn):
        CRITERIA[name] = Criterion(name, description, threshold, fn)
        return fn

    return decorator


def _absorbed_setup():
    domain = interval(0.0, 1.0)
    return domain, COEFFICIENT_FAMILIES['brownian'](dim=1)


def _monotone_setup():
    domain = interval(-1.0, 1.0)
    return domain, COEFFICIENT_FAMILIES['mean_field'](beta=1.0, lam=0.25)


def _monotone_config(ctx: SuiteContext, seed: Optional[int] = None) -> PicardConfig:
    return PicardConfig(theta=20.0, tol=1e-4, max_iter=8, particles=ctx.particles, dt=1e-3, T=1.0, M=10,
                        seed=ctx.seed if seed is None else seed, threads=ctx.threads, transport=ctx.transport)


@criterion('A1', 'absorbed Brownian motion against the sine series')
def absorbed_diffusion(ctx: SuiteContext):
    domain, coeffs = _absorbed_setup()
    n = ctx.particles
    grid = TimeGrid(0.1, 4)
    gamma = SubProbMeasure.dirac(domain, [0.5])
    initial = ParticleEnsemble(domain, np.full((n, 1), 0.5))
    options = SimulationOptions(dt=1e-4, bridge_correction=True)
    _, flow = simulate_flow(coeffs, MeasureFlow.constant(gamma, grid), initial, options,
                            NoiseStreams(ctx.seed, n))
    oracle = AbsorbedBrownianMotion(1.0, x0=0.5)
    details = {}
    worst = 0.0
    for k in (1, 2, 4):
        t = float(grid.nodes[k])
        mass_error = abs(flow[k].mass - oracle.survival(t))
        distance = w1_hat(flow[k], oracle.measure(domain, t), ctx.transport)
        details[f't={t:g}'] = {'mass_error': mass_error, 'w1_hat': distance}
        worst = max(worst, mass_error / 0.01, distance / 0.01)
    return worst, details


def _random_measure(rng: np.random.Generator, domain, max_atoms: int) -> SubProbMeasure:
    k = int(rng.integers(1, max_atoms + 1))
    return SubProbMeasure(domain, domain.sample_interior(k, rng), rng.dirichlet(np.ones(k)) * rng.random())


@criterion('A2', 'flow solver against the brute-force linear program', threshold=1e-8)
def transport_oracle(ctx: SuiteContext):
    rng = np.random.Generator(np.random.Philox(ctx.seed))
    domain = interval(0.0, 1.0, r0=0.5)
    exact = TransportSolverOptions(method=SolverMethod.EXACT)
    worst = 0.0
    for _ in range(200):
        mu, nu = _random_measure(rng, domain, 4), _random_measure(rng, domain, 4)
        worst = max(worst,
                    abs(w1_hat(mu, nu, exact) - reference_lp_cost(mu, nu, truncated=True)),
                    abs(w1(mu, nu, exact) - reference_lp_cost(mu, nu, truncated=False)))
    return worst, {'instances': 200}


@criterion('A3', 'symmetry and triangle inequality of the truncated distance', threshold=1e-8)
def metric_axioms(ctx: SuiteContext):
    rng = np.random.Generator(np.random.Philox(ctx.seed + 1))
    domain = interval(0.0, 1.0, r0=0.5)
    exact = TransportSolverOptions(method=SolverMethod.EXACT)
    worst = 0.0
    for _ in range(500):
        a, b, c = (_random_measure(rng, domain, 5) for _ in range(3))
        ab, ba = w1_hat(a, b, exact), w1_hat(b, a, exact)
        ac, bc = w1_hat(a, c, exact), w1_hat(b, c, exact)
        worst = max(worst, abs(ab - ba), ac - ab - bc)
    return worst, {'triples': 500}


@criterion('A4', 'geometric Picard contraction for the monotone mean-field model')
def picard_contraction(ctx: SuiteContext):
    domain, coeffs = _monotone_setup()
    config = _monotone_config(ctx)
    gamma = SubProbMeasure.uniform_grid(domain, -0.5, 0.5, config.particles)
    result = picard_solve(coeffs, gamma, config)
    ratios = result.ratios()[1:]
    worst = max(ratios) / 0.8 if ratios else 0.0
    return worst, {'iterations': result.iterations, 'distances': result.distances, 'ratios': ratios}


@criterion('A5', 'Lipschitz stability of the fixed point in the initial law', threshold=0.2)
def lipschitz_stability(ctx: SuiteContext):
    domain, coeffs = _monotone_setup()
    n = ctx.particles
    gamma1 = SubProbMeasure.uniform_grid(domain, -0.5, 0.5, n)
    gamma2 = SubProbMeasure.uniform_grid(domain, -0.4, 0.6, n)
    base = w1_hat(gamma1, gamma2, ctx.transport)

    def ratio(seed: int) -> float:
        config = _monotone_config(ctx, seed)
        f1 = picard_solve(coeffs, gamma1, config).flow
        f2 = picard_solve(coeffs, gamma2, config).flow
        return float(np.max(node_distances(f1, f2, MetricKind.W1_HAT, options=ctx.transport))) / base

    c = ratio(ctx.seed)
    fresh = [ratio(ctx.seed + 100 + i) for i in range(5)]
    spread = max(abs(r - c) / c for r in fresh) if c > 0 else 0.0
    return spread, {'calibrated': c, 'fresh': fresh}


@criterion('A6', 'uniform moment bound along the fixed point')
def moment_bound(ctx: SuiteContext):
    n = ctx.sized(2000, 10 ** 5)
    domain = interval(0.0, math.inf)
    coeffs = COEFFICIENT_FAMILIES['lyapunov_feedback'](beta=1.0, lam=0.5, cap=10.0)
    config = PicardConfig(tol=1e-3, max_iter=10, particles=n, dt=1e-3, T=1.0, M=10, seed=ctx.seed)
    gamma = SubProbMeasure.atoms(domain, [[0.5], [1.0], [5.0]], [1 / 3] * 3)
    feedback = moment_bound_check(coeffs, LyapunovV.quadratic(1), gamma, p=2.0, config=config)
    m_domain, m_coeffs = _monotone_setup()
    m_gamma = SubProbMeasure.atoms(m_domain, [[0.08], [0.25], [0.8]], [1 / 3] * 3)
    square = moment_bound_check(m_coeffs, lambda x: np.sum(x * x, axis=1), m_gamma, p=2.0,
                                config=_monotone_config(ctx).copy(update={'particles': n}))
    worst = 0.0
    for check in (feedback, square):
        for row in check['rows']:
            worst = max(worst, (row['ratio'] - STAT_SIGMAS * row['stderr']) / check['bound'])
    return worst, {'feedback': feedback['rows'], 'square': square['rows'],
                   'bounds': [feedback['bound'], square['bound']]}


@criterion('A7', 'coupling by projection bounds the truncated distance at every node')
def projection_bound(ctx: SuiteContext):
    domain, coeffs = _monotone_setup()
    n = ctx.particles
    grid = TimeGrid(1.0, 10)
    gamma = SubProbMeasure.uniform_grid(domain, -0.5, 0.5, n)
    shifted = SubProbMeasure.uniform_grid(domain, -0.4, 0.6, n)
    initial = ParticleEnsemble.from_measure(gamma, n, NoiseStreams(ctx.seed, n))
    coupling = build_projection_coupling(coeffs, MeasureFlow.constant(gamma, grid),
                                         MeasureFlow.constant(shifted, grid), ctx.seed,
                                         (initial, initial), SimulationOptions(dt=1e-3))
    rows = pw_rows(coupling, ctx.transport)
    worst = max(row['lhs'] - row['coarsening_error'] - row['direct'] - row['killed1'] - row['killed2']
                - STAT_SIGMAS * row['stderr'] for row in rows)
    return worst, {'rows': rows}


@criterion('A8', 'boundary decay of the killed distance near the boundary')
def boundary_decay(ctx: SuiteContext):
    domain, coeffs = _absorbed_setup()
    trials = ctx.sized(10 ** 5, 10 ** 6)
    points = [0.04, 0.02, 0.01] if ctx.tier == Tier.FAST else [0.04, 0.02, 0.01, 0.005]
    t = 0.05
    # series constant plus an allowance for the time discretization
    c = 1.1 * max(AbsorbedBrownianMotion(1.0, x0=x).band_expectation(t, domain.r0) / x for x in points)
    options = SimulationOptions(dt=1e-4, bridge_correction=True)
    worst = 0.0
    rows = []
    for x in points:
        check = boundary_decay_check(coeffs, domain, [x], t, trials, c, seed=ctx.seed, options=options)
        rows.append(check)
        worst = max(worst, (check['lhs'] - STAT_SIGMAS * check['stderr']) / check['rhs'])
    return worst, {'c': c, 'rows': rows}


@criterion('A9', 'reweighted realization agrees with direct simulation')
def girsanov_consistency(ctx: SuiteContext):
    domain = interval(0.0, 1.0)
    coeffs = COEFFICIENT_FAMILIES['mass_coupled'](beta=1.0, coupling=0.5)
    n = ctx.particles
    grid = TimeGrid(0.5, 5)
    options = SimulationOptions(dt=1e-3)
    gamma = SubProbMeasure.uniform_grid(domain, 0.25, 0.75, n)
    flow1 = MeasureFlow.constant(gamma, grid)
    flow2 = MeasureFlow.constant(gamma.reweighted(gamma.weights * 0.6), grid)
    initial = ParticleEnsemble.from_measure(gamma, n, NoiseStreams(ctx.seed, n))
    base = BaseRun(coeffs, flow1, initial, ctx.seed, options)
    second = reweight_flow(coeffs, flow1, flow2, base)
    _, direct = simulate_flow(coeffs, flow2, initial, options, NoiseStreams(ctx.seed + 1, n))
    gap = node_distances(second.flow, direct, MetricKind.W1_HAT, options=ctx.transport)
    consistency = float(np.max(gap)) * math.sqrt(n) / 5.0
    rows = second.martingale_rows()
    martingale = max((abs(r['mean_R'] - 1.0) / (STAT_SIGMAS * r['stderr']) if r['stderr'] > 0 else 0.0)
                     for r in rows)
    V = LyapunovV.constant(1)
    C = calibrate_v_constant(coeffs, gamma, flow1, flow2, V, particles=n, seed=ctx.seed + 2, options=options)
    ratios = [v_contraction_check(coeffs, gamma, flow1, flow2, V, lam, C, particles=n, seed=ctx.seed,
                                  options=options)['ratio'] for lam in (1.0, 10.0, 100.0)]
    decreasing = 0.0 if all(b < a for a, b in zip(ratios, ratios[1:])) else 2.0
    return max(consistency, martingale, decreasing), {'w1_hat': gap.tolist(), 'mean_R': rows, 'ratios': ratios}


@criterion('A10', 'indicator gating revives the squared CIR process at zero')
def cir_counterexample(ctx: SuiteContext):
    n = ctx.sized(10 ** 4, 10 ** 4)
    domain = interval(0.0, math.inf)
    coeffs = COEFFICIENT_FAMILIES['cir_square']()
    grid = TimeGrid(0.5, 5)
    flow = MeasureFlow.constant(SubProbMeasure.zero(domain), grid)
    initial = ParticleEnsemble(domain, np.zeros((n, 1)))
    gated, _ = simulate_flow(coeffs, flow, initial, SimulationOptions(dt=1e-3, semantics=Semantics.INDICATOR_GATED),
                             NoiseStreams(ctx.seed, n))
    frozen, _ = simulate_flow(coeffs, flow, initial, SimulationOptions(dt=1e-3), NoiseStreams(ctx.seed, n))
    positive = gated.positive_fraction(-1)
    moved = float(np.max(np.abs(frozen.node_positions)))
    return max((1.0 - positive) / 0.01, 2.0 if moved > 0 else 0.0), {'positive_fraction': positive,
                                                                        'frozen_max': moved}


@criterion('A11', 'Fokker-Planck identity for absorbed and interacting flows')
def fokker_planck(ctx: SuiteContext):
    domain, coeffs = _absorbed_setup()
    n = ctx.particles
    grid = TimeGrid(0.1, 10)
    gamma = SubProbMeasure.uniform_grid(domain, 0.0, 1.0, n)
    initial = ParticleEnsemble.from_measure(gamma, n, NoiseStreams(ctx.seed, n))
    _, flow = simulate_flow(coeffs, MeasureFlow.constant(gamma, grid), initial, SimulationOptions(dt=1e-4),
                            NoiseStreams(ctx.seed, n))
    absorbed = fokker_planck_residual(flow, coeffs, DirichletTestFunction.sine_mode(domain, 1))

    m_domain, m_coeffs = _monotone_setup()
    config = _monotone_config(ctx)
    fixed = picard_solve(m_coeffs, SubProbMeasure.uniform_grid(m_domain, -0.5, 0.5, n), config).flow
    interacting = fokker_planck_residual(fixed, m_coeffs, DirichletTestFunction.sine_mode(m_domain, 1))
    return max(absorbed / 0.01, interacting / 0.02), {'absorbed': absorbed, 'interacting': interacting}


def run_suite(tier: str = Tier.FAST,
              seed: int = 0,
              threads: int = 1,
              names: Optional[Sequence[str]] = None,
              tolerance_override: Optional[float] = None,
              particles: Optional[int] = None,
              ) -> List[CriterionResult]:
    ctx = SuiteContext(tier, seed, threads, particles)
    selected = sorted(CRITERIA, key=lambda s: int(s[1:])) if names is None else list(names)
    unknown = [name for name in selected if name not in CRITERIA]
    if unknown:
        raise UnknownComponentError(f"unknown acceptance criteria {unknown}", known=sorted(CRITERIA))
    return [CRITERIA[name].run(ctx, tolerance_override) for name in selected]


def acceptance_suite(tier: str = Tier.FAST, seed: int = 0, threads: int = 1,
                     tolerance_override: Optional[float] = None) -> List[CriterionResult]:
    """every registered criterion at the given tier"""
    return run_suite(tier, seed, threads, tolerance_override=tolerance_override)
