import os
from typing import Any, Dict, List, Optional, Sequence, Type

import numpy as np

from kdsde.constants import MetricKind
from kdsde.components.acceptance import run_suite
from kdsde.components.config import ExperimentConfig
from kdsde.components.coupling import build_projection_coupling, pw_rows
from kdsde.components.girsanov import BaseRun, capped, reweight_flow, v_node_distances
from kdsde.components.killed_sde import ParticleEnsemble, simulate_flow, validate_hypotheses
from kdsde.components.measures import LyapunovV, MeasureFlow
from kdsde.components.picard import fokker_planck_residual, picard_solve
from kdsde.components.rng import NoiseStreams
from kdsde.components.status import BaseStatus, PassStatus, status_of
from kdsde.components.transport import solve_plan, weighted_variation
from kdsde.log import app_logger
from kdsde.utils import serialize_json_data, write_csv, write_manifest

__all__ = (
    'BaseCommandHandler',
    'SimulateHandler',
    'PicardHandler',
    'CoupleHandler',
    'DistHandler',
    'GirsanovCheckHandler',
    'ValidateHandler',
    'FpResidualHandler',
    'AcceptHandler',
)

FP_TOLERANCE = 0.01


class BaseCommandHandler:
    """
    One experiment command. ``handle`` computes and writes its outputs through
    the helpers below, which keep track of every file for the manifest.
    """
    command: str = None

    def __init__(self, config: ExperimentConfig, out_dir: Optional[str] = None):
        self.config = config
        self.out_dir = out_dir or config.output.directory
        self.files: List[str] = []
        self.extra: Dict[str, Any] = {}
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_csv(self, name: str, columns: Sequence[str], rows) -> str:
        self.files.append(name)
        return write_csv(self.path(name), columns, rows)

    def write_json(self, name: str, data: Any) -> str:
        self.files.append(name)
        with open(self.path(name), 'w') as f:
            f.write(serialize_json_data(data))
            f.write('\n')
        return self.path(name)

    def save_flow(self, flow: MeasureFlow, name: str = 'flow'):
        if self.config.output.save_flow:
            self.files.extend(os.path.join(name, f) for f in flow.save(self.path(name)))

    def initial_ensemble(self, gamma, coeffs) -> ParticleEnsemble:
        n = self.config.solver.particles
        return ParticleEnsemble.from_measure(gamma, n, NoiseStreams(self.config.seed, n, coeffs.noise_dim))

    def handle(self) -> Type[BaseStatus]:
        raise NotImplementedError

    def manifest(self, status: Type[BaseStatus]) -> str:
        extra = dict(self.extra, command=self.command, status=status.reason)
        return write_manifest(self.out_dir, self.files, self.config, self.config.seed, extra)


class SimulateHandler(BaseCommandHandler):
    command = 'simulate'

    def handle(self):
        cfg = self.config
        domain = cfg.build_domain()
        coeffs = cfg.build_coefficients()
        gamma = cfg.build_initial(domain)
        flow_in = MeasureFlow.constant(gamma, cfg.grid.grid)
        initial = self.initial_ensemble(gamma, coeffs)
        summary, flow = simulate_flow(coeffs, flow_in, initial, cfg.simulation,
                                      NoiseStreams(cfg.seed, len(initial), coeffs.noise_dim))
        self.write_csv('masses.csv', ('t', 'mass', 'first_moment'),
                       [(t, mu.mass, mu.first_moment()) for t, mu in zip(flow.grid.nodes, flow)])
        stats = summary.exit_statistics()
        self.write_csv('exits.csv', ('killed_fraction', 'mean_exit_time'),
                       [(stats['killed_fraction'], stats['mean_exit_time'])])
        self.save_flow(flow)
        return PassStatus


class PicardHandler(BaseCommandHandler):
    command = 'picard'

    def handle(self):
        cfg = self.config
        domain = cfg.build_domain()
        coeffs = cfg.build_coefficients()
        result = picard_solve(coeffs, cfg.build_initial(domain), cfg.picard_config())
        self.write_csv('trace.csv', ('iteration', 'theta', 'distance'),
                       [(r.iteration, result.theta, r.distance(result.theta)) for r in result.trace])
        # wall times stay out of the manifest
        result.write_timing(self.path('trace_timing.csv'))
        self.write_json('verdict.json', result.verdict())
        self.save_flow(result.flow)
        return status_of(result.converged)


class CoupleHandler(BaseCommandHandler):
    command = 'couple'

    def handle(self):
        cfg = self.config
        domain = cfg.build_domain()
        coeffs = cfg.build_coefficients()
        gamma1 = cfg.build_initial(domain)
        gamma2 = cfg.build_initial(domain, second=True)
        grid = cfg.grid.grid
        initial = self.initial_ensemble(gamma1, coeffs)
        coupling = build_projection_coupling(coeffs, MeasureFlow.constant(gamma1, grid),
                                             MeasureFlow.constant(gamma2, grid), cfg.seed, (initial, initial),
                                             cfg.simulation, coeffs2=cfg.build_coefficients(second=True))
        rows = pw_rows(coupling, cfg.solver.transport)
        self.write_csv('couple.csv', ('t', 'w1hat_lhs', 'direct', 'killed1', 'killed2', 'pass_flag'),
                       [(r['t'], r['lhs'], r['direct'], r['killed1'], r['killed2'], r['pass']) for r in rows])
        return status_of(all(r['pass'] for r in rows))


class DistHandler(BaseCommandHandler):
    command = 'dist'

    def handle(self):
        cfg = self.config
        domain = cfg.build_domain()
        mu = cfg.build_initial(domain)
        nu = cfg.build_initial(domain, second=True)
        metric = cfg.solver.metric or MetricKind.W1_HAT
        if metric == MetricKind.WEIGHTED_VARIATION:
            V = capped(cfg.build_coefficients().V or LyapunovV.constant(domain.dim))
            value = weighted_variation(mu, nu, V, bins=None if mu.shares_atoms(nu) else 64)
            row = (metric, value, 'exact' if mu.shares_atoms(nu) else 'binned', 0.0)
        else:
            plan = solve_plan(mu, nu, truncated=metric == MetricKind.W1_HAT, options=cfg.solver.transport)
            row = (metric, plan.cost, plan.stats['method'], plan.stats['coarsening_error'])
        self.write_csv('dist.csv', ('metric', 'distance', 'method', 'coarsening_error'), [row])
        return PassStatus


class GirsanovCheckHandler(BaseCommandHandler):
    command = 'girsanov-check'

    def handle(self):
        cfg = self.config
        domain = cfg.build_domain()
        coeffs = cfg.build_coefficients()
        grid = cfg.grid.grid
        gamma1 = cfg.build_initial(domain)
        gamma2 = cfg.build_initial(domain, second=True)
        flow1, flow2 = MeasureFlow.constant(gamma1, grid), MeasureFlow.constant(gamma2, grid)
        base = BaseRun(coeffs, flow1, self.initial_ensemble(gamma1, coeffs), cfg.seed, cfg.simulation)
        second = reweight_flow(coeffs, flow1, flow2, base)
        raw = coeffs.V or LyapunovV.constant(domain.dim)
        v_dist = v_node_distances(base.output, second.flow, capped(raw))
        v_raw = v_node_distances(base.output, second.flow, raw)
        rows = second.martingale_rows()
        self.write_csv('girsanov.csv', ('t', 'mean_R', 'ess', 'v_dist', 'v_dist_uncapped', 'pass'),
                       [(r['t'], r['mean_R'], r['ess'], float(d), float(u), r['pass'])
                        for r, d, u in zip(rows, v_dist, v_raw)])
        self.extra['xi_sup'] = float(np.max(second.xi_sup))
        return status_of(all(r['pass'] for r in rows))


class ValidateHandler(BaseCommandHandler):
    command = 'validate'

    def handle(self):
        cfg = self.config
        report = validate_hypotheses(cfg.build_coefficients(), cfg.build_domain(), seed=cfg.seed, T=cfg.grid.T)
        self.write_csv('hypotheses.csv', ('name', 'worst_ratio', 'worst_excess', 'pass'),
                       [(r.name, r.worst_ratio, r.worst_excess, r.passed) for r in report.rows])
        return status_of(report.passed)


class FpResidualHandler(BaseCommandHandler):
    command = 'fp-residual'

    def handle(self):
        cfg = self.config
        domain = cfg.build_domain()
        coeffs = cfg.build_coefficients()
        gamma = cfg.build_initial(domain)
        f = cfg.test_function.build(domain)
        if coeffs.interaction_free:
            initial = self.initial_ensemble(gamma, coeffs)
            _, flow = simulate_flow(coeffs, MeasureFlow.constant(gamma, cfg.grid.grid), initial, cfg.simulation,
                                    NoiseStreams(cfg.seed, len(initial), coeffs.noise_dim))
        else:
            flow = picard_solve(coeffs, gamma, cfg.picard_config()).flow
        residual = fokker_planck_residual(flow, coeffs, f)
        threshold = FP_TOLERANCE if cfg.tolerance_override is None else cfg.tolerance_override
        passed = residual <= threshold
        self.write_csv('fp_residual.csv', ('test_function', 'residual', 'threshold', 'pass'),
                       [(f.name, residual, threshold, passed)])
        return status_of(passed)


class AcceptHandler(BaseCommandHandler):
    command = 'accept'

    def handle(self):
        cfg = self.config
        results = run_suite(cfg.tier, cfg.seed, cfg.solver.threads, tolerance_override=cfg.tolerance_override)
        self.write_csv('acceptance.csv', ('criterion', 'tier', 'observed', 'threshold', 'status'),
                       [r.row(cfg.tier) for r in results])
        for r in results:
            app_logger.info(f"{r.name}: {r.status.reason} ({r.observed:.6g} <= {r.threshold:g})")
        return status_of(all(r.passed for r in results))
