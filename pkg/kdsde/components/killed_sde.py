"""
Killed Euler-Maruyama integration against a frozen measure flow.

Two killing semantics are supported. ``freeze_at_exit`` stops a particle at the
point where its step chord crosses the boundary. ``indicator_gated`` only gates
the increment by the indicator of the current position; a particle that steps
out of O stops wherever it landed.
"""
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from kdsde.constants import (
    HypothesisTag,
    METRIC_FOR_HYPOTHESIS,
    MetricKind,
    Semantics,
    STAT_SIGMAS,
    VIOLATION_SLACK,
)
from kdsde.components.exceptions import (
    InvalidArgumentError,
    NumericError,
    UnknownComponentError,
)
from kdsde.components.expressions import Expression
from kdsde.components.geometry import Domain
from kdsde.components.measures import LyapunovV, MeasureFlow, SubProbMeasure, TimeGrid
from kdsde.components.rng import NoiseStreams, Purpose
from kdsde.log import sde_logger
from kdsde.typedefs import DiffusionFn, DriftFn, PointLike, ScalarField

__all__ = (
    'Companion',
    'CoefficientField',
    'CoefficientSpec',
    'COEFFICIENT_FAMILIES',
    'register_family',
    'coefficient_from_spec',
    'ParticleEnsemble',
    'SimulationOptions',
    'TrajectorySummary',
    'step_killed',
    'simulate_flow',
    'HypothesisRow',
    'HypothesisReport',
    'validate_hypotheses',
    'sup_moment_ratios',
)

_PAIR_CHUNK = 1 << 22


class Companion:
    """
    A latent process Y integrated on the whole space without gating; the
    particle position is ``transform(Y)``.
    """

    def __init__(self,
                 drift: Callable[[float, np.ndarray], np.ndarray],
                 diffusion: Callable[[float, np.ndarray], np.ndarray],
                 transform: Callable[[np.ndarray], np.ndarray],
                 lift: Callable[[np.ndarray], np.ndarray],
                 ):
        self.drift = drift
        self.diffusion = diffusion
        self.transform = transform
        self.lift = lift


class CoefficientField:
    """
    The pair (b, sigma) with its hypothesis metadata.

    ``drift(t, x, mu)`` returns ``(n, d)`` and ``diffusion(t, x, mu)`` returns
    ``(n, d, m)`` for positions ``x`` of shape ``(n, d)``. ``singular_drift`` is
    the part b0 of the decomposition b = b0 + b1 (zero when not given).
    """

    def __init__(self,
                 drift: DriftFn,
                 diffusion: DiffusionFn,
                 dim: int = 1,
                 noise_dim: int = 1,
                 hypothesis: str = HypothesisTag.A,
                 K: Union[float, Callable[[float], float]] = 1.0,
                 alpha: Union[float, Callable[[float], float]] = 1.0,
                 kappa: float = 0.0,
                 K_growth: Optional[float] = None,
                 singular_drift: Optional[DriftFn] = None,
                 diffusion_depends_on_measure: bool = False,
                 interaction_free: bool = False,
                 companion: Optional[Companion] = None,
                 V: Optional[LyapunovV] = None,
                 K_lyapunov: Optional[float] = None,
                 name: str = 'custom',
                 ):
        if hypothesis not in METRIC_FOR_HYPOTHESIS:
            raise InvalidArgumentError(f"unknown hypothesis tag {hypothesis!r}")
        self._drift = drift
        self._diffusion = diffusion
        self.dim = int(dim)
        self.noise_dim = int(noise_dim)
        self.hypothesis = hypothesis
        self.K_fn = K if callable(K) else (lambda t, _k=float(K): _k)
        self.alpha_fn = alpha if callable(alpha) else (lambda m, _a=float(alpha): _a)
        self.kappa = float(kappa)
        self.K_growth = K_growth
        self.singular_drift = singular_drift
        self.diffusion_depends_on_measure = diffusion_depends_on_measure
        self.interaction_free = interaction_free
        self.companion = companion
        self.V = V
        self.K_lyapunov = K_lyapunov
        self.name = name

    @property
    def metric(self) -> str:
        return METRIC_FOR_HYPOTHESIS[self.hypothesis]

    def drift(self, t: float, x: np.ndarray, mu: Optional[SubProbMeasure]) -> np.ndarray:
        return np.asarray(self._drift(t, x, mu), dtype=float).reshape(x.shape[0], self.dim)

    def diffusion(self, t: float, x: np.ndarray, mu: Optional[SubProbMeasure]) -> np.ndarray:
        out = np.asarray(self._diffusion(t, x, mu), dtype=float)
        return np.broadcast_to(out, (x.shape[0], self.dim, self.noise_dim))

    def regular_drift(self, t: float, x: np.ndarray, mu: Optional[SubProbMeasure]) -> np.ndarray:
        b = self.drift(t, x, mu)
        if self.singular_drift is not None:
            b = b - np.asarray(self.singular_drift(t, x, mu), dtype=float).reshape(b.shape)
        return b

    def generator(self, t: float, x: np.ndarray, mu: Optional[SubProbMeasure],
                  gradient: np.ndarray, hessian: np.ndarray) -> np.ndarray:
        """L f = 1/2 tr(sigma sigma* Hess f) + b . grad f at the points x"""
        s = self.diffusion(t, x, mu)
        a = np.einsum('nim,njm->nij', s, s)
        return 0.5 * np.einsum('nij,nij->n', a, hessian) + np.einsum('ni,ni->n', self.drift(t, x, mu), gradient)

    def __repr__(self):
        return f"CoefficientField({self.name}, hypothesis={self.hypothesis}, d={self.dim}, m={self.noise_dim})"


def _constant_diffusion(sigma: Union[float, Sequence], dim: int, noise_dim: int) -> np.ndarray:
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        if dim != noise_dim:
            raise InvalidArgumentError("a scalar diffusion needs as many noise as space dimensions")
        s = s * np.eye(dim)
    return s.reshape(dim, noise_dim)


def _live(mu: Optional[SubProbMeasure]) -> Tuple[np.ndarray, np.ndarray]:
    if mu is None or not np.any(mu.alive):
        return np.zeros((0, 1 if mu is None else mu.dim)), np.zeros(0)
    return mu.locations[mu.alive], mu.weights[mu.alive]


class _TruncatedDistanceIntegral:
    """x -> int (1 ^ |x - y|) mu(dy), sorted prefix sums in one dimension"""

    def __init__(self):
        self._cache: Dict[int, Any] = {}

    def _prepared(self, mu: SubProbMeasure):
        key = id(mu)
        if key not in self._cache:
            y, w = _live(mu)
            if len(self._cache) >= 4:
                self._cache.pop(next(iter(self._cache)))
            if y.shape[1] == 1:
                order = np.argsort(y[:, 0], kind='stable')
                ys, ws = y[order, 0], w[order]
                self._cache[key] = (mu, ys, np.concatenate([[0.0], np.cumsum(ws)]),
                                    np.concatenate([[0.0], np.cumsum(ws * ys)]))
            else:
                self._cache[key] = (mu, y, w, None)
        return self._cache[key]

    def __call__(self, x: np.ndarray, mu: Optional[SubProbMeasure]) -> np.ndarray:
        if mu is None or not np.any(mu.alive):
            return np.zeros(x.shape[0])
        _, ys, cw, cwy = self._prepared(mu)
        if cwy is None:
            out = np.zeros(x.shape[0])
            chunk = max(1, _PAIR_CHUNK // max(ys.shape[0], 1))
            for s in range(0, x.shape[0], chunk):
                dist = np.linalg.norm(x[s:s + chunk, None, :] - ys[None, :, :], axis=2)
                out[s:s + chunk] = np.minimum(dist, 1.0) @ cw
            return out
        xs = x[:, 0]
        i_far_lo = np.searchsorted(ys, xs - 1.0, side='right')
        i_mid = np.searchsorted(ys, xs, side='right')
        i_far_hi = np.searchsorted(ys, xs + 1.0, side='left')
        total = cw[-1]
        far = cw[i_far_lo] + (total - cw[i_far_hi])
        below = xs * (cw[i_mid] - cw[i_far_lo]) - (cwy[i_mid] - cwy[i_far_lo])
        above = (cwy[i_far_hi] - cwy[i_mid]) - xs * (cw[i_far_hi] - cw[i_mid])
        return far + below + above


COEFFICIENT_FAMILIES: Dict[str, Callable[..., CoefficientField]] = {}


def register_family(name: str):
    def decorator(fn):
        COEFFICIENT_FAMILIES[name] = fn
        return fn
    return decorator


@register_family('brownian')
def brownian(dim: int = 1, sigma: float = 1.0, **meta) -> CoefficientField:
    s = _constant_diffusion(sigma, dim, dim)
    meta.setdefault('K', 0.0)
    return CoefficientField(lambda t, x, mu: np.zeros_like(x), lambda t, x, mu: s,
                            dim=dim, noise_dim=dim, interaction_free=True, name='brownian', **meta)


@register_family('constant_drift')
def constant_drift(drift: Union[float, Sequence[float]] = 0.0, dim: int = 1, sigma: float = 1.0,
                   **meta) -> CoefficientField:
    c = np.broadcast_to(np.asarray(drift, dtype=float), (dim,))
    s = _constant_diffusion(sigma, dim, dim)
    meta.setdefault('K', 1.0)
    return CoefficientField(lambda t, x, mu: np.broadcast_to(c, x.shape), lambda t, x, mu: s,
                            dim=dim, noise_dim=dim, interaction_free=True, name='constant_drift', **meta)


@register_family('linear')
def linear(beta: float = 1.0, dim: int = 1, sigma: float = 1.0, **meta) -> CoefficientField:
    s = _constant_diffusion(sigma, dim, dim)
    meta.setdefault('K', max(0.0, -2.0 * beta))
    return CoefficientField(lambda t, x, mu: -beta * x, lambda t, x, mu: s,
                            dim=dim, noise_dim=dim, interaction_free=True, name='linear', **meta)


@register_family('mean_field')
def mean_field(beta: float = 1.0, lam: float = 0.25, kernel: str = 'truncated_distance',
               bandwidth: float = 1.0, dim: int = 1, sigma: float = 1.0, **meta) -> CoefficientField:
    """b(x, mu) = -beta x + lam int k(x - y) mu(dy)"""
    s = _constant_diffusion(sigma, dim, dim)
    if kernel == 'truncated_distance':
        integral = _TruncatedDistanceIntegral()

        def drift(t, x, mu):
            return -beta * x + lam * integral(x, mu)[:, None]
    elif kernel == 'linear':
        def drift(t, x, mu):
            y, w = _live(mu)
            if not w.shape[0]:
                return -beta * x
            return -beta * x + lam * (x * w.sum() - w @ y)
    elif kernel == 'gaussian':
        def drift(t, x, mu):
            y, w = _live(mu)
            out = -beta * x
            chunk = max(1, _PAIR_CHUNK // max(y.shape[0], 1))
            for a in range(0, x.shape[0], chunk):
                diff = x[a:a + chunk, None, :] - y[None, :, :]
                k = np.exp(-np.sum(diff ** 2, axis=2) / (2 * bandwidth ** 2)) * w
                out[a:a + chunk] += lam * np.einsum('nk,nkd->nd', k, diff)
            return out
    else:
        raise UnknownComponentError(f"unknown interaction kernel {kernel!r}")
    meta.setdefault('K', max(0.0, -2.0 * beta) + 3.0 * abs(lam))
    meta.setdefault('K_growth', max(0.0, -2.0 * beta) + 2.0 * abs(lam) + float(np.sum(s ** 2)) + 1.0)
    return CoefficientField(drift, lambda t, x, mu: s, dim=dim, noise_dim=dim,
                            interaction_free=(lam == 0), name=f'mean_field[{kernel}]', **meta)


@register_family('mass_coupled')
def mass_coupled(beta: float = 1.0, coupling: float = 0.5, dim: int = 1, sigma: float = 1.0,
                 **meta) -> CoefficientField:
    """b(x, mu) = -beta x + coupling mu(O)"""
    s = _constant_diffusion(sigma, dim, dim)

    def drift(t, x, mu):
        mass = 0.0 if mu is None else mu.mass
        return -beta * x + coupling * mass

    meta.setdefault('hypothesis', HypothesisTag.E)
    meta.setdefault('kappa', abs(coupling) * math.sqrt(dim))
    meta.setdefault('V', LyapunovV.constant(dim))
    return CoefficientField(drift, lambda t, x, mu: s, dim=dim, noise_dim=dim,
                            interaction_free=(coupling == 0), name='mass_coupled', **meta)


@register_family('lyapunov_feedback')
def lyapunov_feedback(beta: float = 1.0, lam: float = 0.5, cap: float = 10.0, dim: int = 1,
                      sigma: float = 1.0, eps: float = 1.0, **meta) -> CoefficientField:
    """b(x, mu) = -beta x + lam mu(V ^ cap) with V = 1 + |x|^2"""
    s = _constant_diffusion(sigma, dim, dim)
    V = LyapunovV.quadratic(dim, eps=eps, cap=cap)

    def drift(t, x, mu):
        feedback = 0.0 if mu is None else mu.integrate(V.truncated)
        return -beta * x + lam * feedback

    meta.setdefault('hypothesis', HypothesisTag.E)
    meta.setdefault('kappa', abs(lam) * math.sqrt(dim) * cap)
    meta.setdefault('V', V)
    meta.setdefault('K_lyapunov', 2.0 * abs(beta) + abs(lam) * cap + V.K * abs(lam) * cap * eps + 1.0)
    return CoefficientField(drift, lambda t, x, mu: s, dim=dim, noise_dim=dim,
                            interaction_free=(lam == 0), name='lyapunov_feedback', **meta)


@register_family('cir_square')
def cir_square(**meta) -> CoefficientField:
    """b = 2 sqrt(x), sigma = 2 x on (0, inf), realized through X = Y^2 with a CIR process Y"""
    companion = Companion(
        drift=lambda t, y: 1.0 - 0.5 * y,
        diffusion=lambda t, y: y[:, :, None],
        transform=lambda y: y ** 2,
        lift=lambda x: np.sqrt(np.maximum(x, 0.0)),
    )
    meta.setdefault('K', 4.0)
    return CoefficientField(lambda t, x, mu: 2.0 * np.sqrt(np.maximum(x, 0.0)),
                            lambda t, x, mu: 2.0 * x[:, :, None],
                            dim=1, noise_dim=1, interaction_free=True, companion=companion,
                            name='cir_square', **meta)


@register_family('expression')
def expression(drift: Sequence[str] = ('0',), diffusion: Sequence[Sequence[str]] = (('1',),),
               dim: int = 1, **meta) -> CoefficientField:
    drift_exprs = [Expression(src, dim) for src in (drift if isinstance(drift, (list, tuple)) else [drift])]
    rows = diffusion if isinstance(diffusion, (list, tuple)) else [[diffusion]]
    rows = [r if isinstance(r, (list, tuple)) else [r] for r in rows]
    diff_exprs = [[Expression(src, dim) for src in row] for row in rows]
    if len(drift_exprs) != dim or len(diff_exprs) != dim:
        raise InvalidArgumentError(f"expression coefficients need {dim} drift and diffusion rows")
    noise_dim = len(diff_exprs[0])
    if any(len(row) != noise_dim for row in diff_exprs):
        raise InvalidArgumentError("diffusion rows differ in length")

    def b(t, x, mu):
        return np.stack([e(t, x, mu) for e in drift_exprs], axis=1)

    def s(t, x, mu):
        return np.stack([np.stack([e(t, x, mu) for e in row], axis=1) for row in diff_exprs], axis=1)

    uses_measure = any(e.uses_measure for e in drift_exprs)
    sigma_uses_measure = any(e.uses_measure for row in diff_exprs for e in row)
    return CoefficientField(b, s, dim=dim, noise_dim=noise_dim,
                            diffusion_depends_on_measure=sigma_uses_measure,
                            interaction_free=not (uses_measure or sigma_uses_measure),
                            name='expression', **meta)


class CoefficientSpec(BaseModel):
    family: str = 'brownian'
    params: Dict[str, Any] = {}
    hypothesis: Optional[str] = None
    K: Optional[float] = None
    alpha: Optional[float] = None
    kappa: Optional[float] = None
    K_growth: Optional[float] = None


def coefficient_from_spec(spec: CoefficientSpec, dim: int = 1) -> CoefficientField:
    if spec.family not in COEFFICIENT_FAMILIES:
        raise UnknownComponentError(f"unknown coefficient family {spec.family!r}",
                                    known=sorted(COEFFICIENT_FAMILIES))
    params = dict(spec.params)
    if spec.family != 'cir_square':
        params.setdefault('dim', dim)
    for key in ('hypothesis', 'K', 'alpha', 'kappa', 'K_growth'):
        value = getattr(spec, key)
        if value is not None:
            params[key] = value
    try:
        return COEFFICIENT_FAMILIES[spec.family](**params)
    except TypeError as e:
        raise InvalidArgumentError(f"bad parameters for coefficient family {spec.family!r}: {e}")


class ParticleEnsemble:
    """
    N particles with alive flags and exit times. ``ids`` index the rows of the
    noise blocks, so a sub-ensemble keeps receiving its own noise.
    """

    def __init__(self,
                 domain: Domain,
                 positions: np.ndarray,
                 alive: Optional[np.ndarray] = None,
                 exit_times: Optional[np.ndarray] = None,
                 ids: Optional[np.ndarray] = None,
                 t: float = 0.0,
                 step: int = 0,
                 latent: Optional[np.ndarray] = None,
                 log_weights: Optional[np.ndarray] = None,
                 ):
        positions = np.array(positions, dtype=float).reshape(-1, domain.dim)
        n = positions.shape[0]
        if n == 0:
            raise InvalidArgumentError("an ensemble needs at least one particle")
        inside = domain._contains(positions)
        self.domain = domain
        self.positions = positions
        self.alive = inside if alive is None else (np.array(alive, dtype=bool) & inside)
        if exit_times is None:
            exit_times = np.where(self.alive, np.inf, t)
        self.exit_times = np.array(exit_times, dtype=float)
        self.ids = np.arange(n) if ids is None else np.asarray(ids, dtype=int)
        self.t = float(t)
        self.step = int(step)
        self.latent = latent
        self.log_weights = log_weights

    @classmethod
    def from_points(cls, domain: Domain, points: PointLike) -> 'ParticleEnsemble':
        return cls(domain, np.asarray(points, dtype=float).reshape(-1, domain.dim))

    @classmethod
    def from_measure(cls, gamma: SubProbMeasure, n: int, streams: NoiseStreams) -> 'ParticleEnsemble':
        """
        Use the atoms of ``gamma`` directly when it is an equal-weight cloud of
        n atoms; otherwise draw n particles, the mass deficit starting dead.
        """
        domain = gamma.domain
        if len(gamma) == n and n > 0 and np.allclose(gamma.weights, 1.0 / n, rtol=0, atol=1e-15):
            return cls(domain, gamma.locations, gamma.alive)
        u = streams.generator(Purpose.INITIAL).random(n)
        cum = np.cumsum(gamma.effective_weights)
        idx = np.searchsorted(cum, u, side='right')
        dead = idx >= len(gamma)
        anchor = domain.anchor if domain.anchor is not None else np.zeros(domain.dim)
        positions = np.empty((n, domain.dim))
        positions[~dead] = gamma.locations[idx[~dead]]
        positions[dead] = anchor
        return cls(domain, positions, ~dead)

    def __len__(self):
        return self.positions.shape[0]

    def copy(self) -> 'ParticleEnsemble':
        return ParticleEnsemble(self.domain, self.positions.copy(), self.alive.copy(), self.exit_times.copy(),
                                self.ids.copy(), self.t, self.step,
                                None if self.latent is None else self.latent.copy(),
                                None if self.log_weights is None else self.log_weights.copy())

    def measure(self) -> SubProbMeasure:
        return SubProbMeasure.empirical(self.domain, self.positions, self.alive)

    def __repr__(self):
        return f"ParticleEnsemble(n={len(self)}, alive={int(self.alive.sum())}, t={self.t:.6g})"


class SimulationOptions(BaseModel):
    dt: float = Field(1e-3, gt=0)
    semantics: str = Semantics.FREEZE_AT_EXIT
    bridge_correction: bool = False


class TrajectorySummary:
    def __init__(self,
                 grid: TimeGrid,
                 node_positions: np.ndarray,
                 node_alive: np.ndarray,
                 exit_times: np.ndarray,
                 initial_positions: np.ndarray,
                 running_sup: Optional[np.ndarray] = None,
                 ):
        self.grid = grid
        self.node_positions = node_positions
        self.node_alive = node_alive
        self.exit_times = exit_times
        self.initial_positions = initial_positions
        self.running_sup = running_sup

    def exit_statistics(self) -> Dict[str, float]:
        finite = np.isfinite(self.exit_times)
        return {'killed_fraction': float(finite.mean()),
                'mean_exit_time': float(self.exit_times[finite].mean()) if finite.any() else math.inf}

    def positive_fraction(self, node: int) -> float:
        return float(np.mean(self.node_positions[node, :, 0] > 0))


def _check_finite(values: np.ndarray, ids: np.ndarray, t: float, what: str):
    bad = ~np.isfinite(values.reshape(values.shape[0], -1)).all(axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NumericError(f"{what} is not finite for particle {int(ids[i])} at t={t!r}",
                           particle=int(ids[i]), t=t)


def _step_companion(ensemble: ParticleEnsemble, coeffs: CoefficientField, dt: float,
                    streams: NoiseStreams) -> ParticleEnsemble:
    comp = coeffs.companion
    y = ensemble.latent if ensemble.latent is not None else comp.lift(ensemble.positions)
    t = ensemble.t
    xi = streams.normals(ensemble.step, ensemble.ids)
    drift = np.asarray(comp.drift(t, y), dtype=float).reshape(y.shape)
    diff = np.asarray(comp.diffusion(t, y), dtype=float).reshape(y.shape[0], y.shape[1], -1)
    y_new = y + drift * dt + np.einsum('nim,nm->ni', diff, xi) * math.sqrt(dt)
    _check_finite(y_new, ensemble.ids, t, 'companion state')
    out = ensemble.copy()
    out.latent = y_new
    out.positions = np.asarray(comp.transform(y_new), dtype=float).reshape(ensemble.positions.shape)
    out.alive = ensemble.domain._contains(out.positions)
    out.t = t + dt
    out.step = ensemble.step + 1
    return out


def step_killed(ensemble: ParticleEnsemble,
                coeffs: CoefficientField,
                mu_t: Optional[SubProbMeasure],
                dt: float,
                semantics: str = Semantics.FREEZE_AT_EXIT,
                streams: Optional[NoiseStreams] = None,
                bridge_correction: bool = False,
                ) -> ParticleEnsemble:
    """advance every live particle by one Euler-Maruyama step of size dt"""
    if not dt > 0:
        raise InvalidArgumentError(f"step size({dt}) must be positive")
    if mu_t is not None and mu_t.domain is not ensemble.domain \
            and mu_t.domain.describe() != ensemble.domain.describe():
        raise InvalidArgumentError("measure and ensemble live on different domains")
    if semantics not in (Semantics.FREEZE_AT_EXIT, Semantics.INDICATOR_GATED):
        raise InvalidArgumentError(f"unknown killing semantics {semantics!r}")
    streams = streams or NoiseStreams(0, int(ensemble.ids.max()) + 1, coeffs.noise_dim)
    if semantics == Semantics.INDICATOR_GATED and coeffs.companion is not None:
        return _step_companion(ensemble, coeffs, dt, streams)

    domain = ensemble.domain
    t = ensemble.t
    out = ensemble.copy()
    out.t = t + dt
    out.step = ensemble.step + 1
    moving = np.flatnonzero(ensemble.alive)
    if moving.size == 0:
        return out
    x = ensemble.positions[moving]
    ids = ensemble.ids[moving]
    xi = streams.normals(ensemble.step, ids)
    b = coeffs.drift(t, x, mu_t)
    _check_finite(b, ids, t, 'drift')
    s = coeffs.diffusion(t, x, mu_t)
    _check_finite(s, ids, t, 'diffusion')
    x_new = x + b * dt + np.einsum('nim,nm->ni', s, xi) * math.sqrt(dt)
    _check_finite(x_new, ids, t, 'position')

    exited = ~domain._contains(x_new)
    if semantics == Semantics.INDICATOR_GATED:
        out.positions[moving] = x_new
        out.alive[moving[exited]] = False
        out.exit_times[moving[exited]] = t + dt
        return out

    frac = np.ones(moving.size)
    if np.any(exited):
        frac[exited] = domain.chord_exit(x[exited], x_new[exited])
        hit = x[exited] + frac[exited, None] * (x_new[exited] - x[exited])
        x_new[exited] = domain._closest_boundary_point(hit)
    if bridge_correction:
        survivors = np.flatnonzero(~exited)
        if survivors.size:
            xs, ys = x[survivors], x_new[survivors]
            rho0 = np.maximum(domain._signed_distance(xs), 0.0)
            rho1 = np.maximum(domain._signed_distance(ys), 0.0)
            normal = domain.distance_gradient(xs)
            a_nn = np.sum(np.einsum('nim,ni->nm', s[survivors], normal) ** 2, axis=1)
            with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
                p_cross = np.where(a_nn > 0, np.exp(-2.0 * rho0 * rho1 / (a_nn * dt)), 0.0)
            u = streams.uniforms(ensemble.step, ids[survivors])
            killed = survivors[u < p_cross]
            if killed.size:
                r0, r1 = rho0[u < p_cross], rho1[u < p_cross]
                f = np.where(r0 + r1 > 0, r0 / np.maximum(r0 + r1, 1e-300), 0.0)
                hit = x[killed] + f[:, None] * (x_new[killed] - x[killed])
                x_new[killed] = domain._closest_boundary_point(hit)
                frac[killed] = f
                exited[killed] = True
    out.positions[moving] = x_new
    out.alive[moving[exited]] = False
    out.exit_times[moving[exited]] = t + frac[exited] * dt
    return out


def simulate_flow(coeffs: CoefficientField,
                  mu_flow: MeasureFlow,
                  initial: ParticleEnsemble,
                  options: Optional[SimulationOptions] = None,
                  streams: Optional[NoiseStreams] = None,
                  track: Optional[ScalarField] = None,
                  observer: Optional[Callable[[int, float, int, ParticleEnsemble, ParticleEnsemble], None]] = None,
                  ) -> Tuple[TrajectorySummary, MeasureFlow]:
    """
    Integrate the ensemble over the grid of ``mu_flow`` with the measure
    argument frozen at the latest grid snapshot. Returns the trajectory summary
    and the induced flow of O-distributions.
    """
    options = options or SimulationOptions()
    grid = mu_flow.grid
    dt = options.dt
    if dt > grid.step * (1 + 1e-12):
        raise InvalidArgumentError(f"step {dt} exceeds the grid step {grid.step}")
    substeps = int(round(grid.step / dt))
    if abs(substeps * dt - grid.step) > 1e-9 * grid.step:
        raise InvalidArgumentError(f"step {dt} does not divide the grid step {grid.step}")
    streams = streams or NoiseStreams(0, len(initial), coeffs.noise_dim)
    if streams.noise_dim != coeffs.noise_dim:
        streams = streams.with_size(streams.n_particles, coeffs.noise_dim)

    domain = initial.domain
    n = len(initial)
    ensemble = initial.copy()
    positions = np.empty((len(grid), n, domain.dim))
    alive = np.empty((len(grid), n), dtype=bool)
    positions[0], alive[0] = ensemble.positions, ensemble.alive
    running = None if track is None else np.asarray(track(ensemble.positions), dtype=float).copy()
    snapshots = [SubProbMeasure.empirical(domain, ensemble.positions, ensemble.alive)]

    for k in range(grid.M):
        mu_k = mu_flow[k]
        for _ in range(substeps):
            before = ensemble
            ensemble = step_killed(before, coeffs, mu_k, dt, options.semantics, streams, options.bridge_correction)
            if observer is not None:
                observer(before.step, before.t, k, before, ensemble)
            if running is not None:
                np.maximum(running, track(ensemble.positions), out=running)
        positions[k + 1], alive[k + 1] = ensemble.positions, ensemble.alive
        snapshots.append(SubProbMeasure.empirical(domain, ensemble.positions, ensemble.alive))
        sde_logger.debug(f"node {k + 1}/{grid.M}: alive fraction {ensemble.alive.mean():.4f}")

    frozen = options.semantics == Semantics.FREEZE_AT_EXIT or coeffs.companion is None
    summary = TrajectorySummary(grid, positions, alive, ensemble.exit_times.copy(),
                                initial.positions.copy(), running)
    return summary, MeasureFlow(grid, snapshots, check_mass=frozen)


class HypothesisRow:
    def __init__(self, name: str, worst_ratio: float, worst_excess: float, witness: Dict[str, Any]):
        self.name = name
        self.worst_ratio = worst_ratio
        self.worst_excess = worst_excess
        self.witness = witness

    @property
    def passed(self) -> bool:
        return self.worst_excess <= VIOLATION_SLACK

    def as_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'worst_ratio': self.worst_ratio, 'worst_excess': self.worst_excess,
                'passed': self.passed, 'witness': self.witness}

    def __repr__(self):
        return f"HypothesisRow({self.name}, ratio={self.worst_ratio:.4g}, passed={self.passed})"


class HypothesisReport:
    def __init__(self, coeffs: CoefficientField, rows: List[HypothesisRow]):
        self.coeffs = coeffs
        self.rows = rows

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def __getitem__(self, name: str) -> HypothesisRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)


def _random_measure(domain: Domain, rng: np.random.Generator, max_atoms: int = 5) -> SubProbMeasure:
    k = int(rng.integers(1, max_atoms + 1))
    points = domain.sample_interior(k, rng)
    weights = rng.dirichlet(np.ones(k)) * rng.uniform(0.5, 1.0)
    return SubProbMeasure(domain, points, weights)


def _worst(name: str, lhs: np.ndarray, rhs: np.ndarray, witnesses: List[Dict[str, Any]]) -> HypothesisRow:
    excess = lhs - rhs
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    i = int(np.argmax(excess))
    return HypothesisRow(name, float(np.max(ratio)), float(excess[i]), witnesses[i])


def validate_hypotheses(coeffs: CoefficientField,
                        domain: Domain,
                        samples: int = 200,
                        seed: int = 0,
                        T: float = 1.0,
                        ) -> HypothesisReport:
    """
    Monte Carlo falsification of the declared hypotheses: every inequality is
    evaluated on random samples and its worst ratio and excess reported.
    """
    from kdsde.components.transport import distance

    rng = NoiseStreams(seed, 1).generator(Purpose.VALIDATION)
    rows: List[HypothesisRow] = []
    tag = coeffs.hypothesis

    if tag in (HypothesisTag.A, HypothesisTag.B):
        lhs, rhs, wit = [], [], []
        glhs, grhs, gwit = [], [], []
        for _ in range(samples):
            t = float(rng.uniform(0, T))
            x, y = domain.sample_interior(2, rng)
            mu, nu = _random_measure(domain, rng), _random_measure(domain, rng)
            bx = coeffs.drift(t, x[None], mu)[0]
            by = coeffs.drift(t, y[None], nu)[0]
            sx = coeffs.diffusion(t, x[None], mu)[0]
            sy = coeffs.diffusion(t, y[None], nu)[0]
            dist = distance(mu, nu, coeffs.metric)
            lhs.append(2 * np.dot(bx - by, x - y) + np.sum((sx - sy) ** 2))
            rhs.append(coeffs.K_fn(t) * (np.sum((x - y) ** 2) + dist ** 2))
            wit.append({'t': t, 'x': x.tolist(), 'y': y.tolist(), 'distance': dist})
            if coeffs.K_growth is not None:
                extra = mu.first_moment() ** 2 if tag == HypothesisTag.B else 0.0
                glhs.append(2 * np.dot(bx, x) + np.sum(sx ** 2))
                grhs.append(coeffs.K_growth * (1 + np.sum(x ** 2) + extra))
                gwit.append({'t': t, 'x': x.tolist()})
        rows.append(_worst('monotonicity', np.array(lhs), np.array(rhs), wit))
        if glhs:
            rows.append(_worst('growth', np.array(glhs), np.array(grhs), gwit))

        band = domain.sample_interior(samples * 4, rng, scale=domain.r0)
        band = band[domain._in_band(band)][:samples]
        if band.shape[0]:
            mu = _random_measure(domain, rng)
            t = float(rng.uniform(0, T))
            s = coeffs.diffusion(t, band, mu)
            grad = domain.distance_gradient(band)
            normal_var = np.sum(np.einsum('nim,ni->nm', s, grad) ** 2, axis=1)
            alpha = coeffs.alpha_fn(mu.first_moment())
            with np.errstate(divide='ignore'):
                inv = np.where(normal_var > 0, 1.0 / normal_var, np.inf)
            wit = [{'x': p.tolist()} for p in band]
            rows.append(_worst('ellipticity', inv, np.full(band.shape[0], alpha), wit))
            l_rho = coeffs.generator(t, band, mu, grad, domain.distance_hessian(band))
            rows.append(_worst('boundary_generator', l_rho, np.full(band.shape[0], alpha), wit))

    if tag == HypothesisTag.E:
        V = coeffs.V or LyapunovV.constant(coeffs.dim)
        x = domain.sample_interior(samples, rng)
        mu = _random_measure(domain, rng)
        t = float(rng.uniform(0, T))
        s = coeffs.diffusion(t, x, mu)
        a = np.einsum('nim,njm->nij', s, s)
        eig = np.linalg.eigvalsh(a)[:, 0]
        with np.errstate(divide='ignore'):
            inverse_norm = np.where(eig > 0, 1.0 / eig, np.inf)
        wit = [{'x': p.tolist(), 'min_eigenvalue': float(e)} for p, e in zip(x, eig)]
        rows.append(_worst('invertibility', inverse_norm, np.full(samples, coeffs.alpha_fn(0.0)), wit))

        lhs, rhs, nlhs, wit = [], [], [], []
        for _ in range(samples):
            mu = _random_measure(domain, rng)
            nu = mu.reweighted(rng.dirichlet(np.ones(len(mu))) * rng.uniform(0.5, 1.0), check_mass=True)
            t = float(rng.uniform(0, T))
            pts = domain.sample_interior(8, rng)
            diff = np.linalg.norm(coeffs.drift(t, pts, mu) - coeffs.drift(t, pts, nu), axis=1).max()
            vdist = distance(mu, nu, MetricKind.WEIGHTED_VARIATION, V=V)
            sdiff = np.abs(coeffs.diffusion(t, pts, mu) - coeffs.diffusion(t, pts, nu)).max()
            lhs.append(diff)
            rhs.append(coeffs.kappa * vdist)
            nlhs.append(sdiff)
            wit.append({'t': t, 'v_distance': vdist})
        rows.append(_worst('measure_lipschitz', np.array(lhs), np.array(rhs), wit))
        rows.append(_worst('noise_independent', np.array(nlhs), np.zeros(samples), wit))

        if coeffs.K_lyapunov is not None and coeffs.V is not None:
            lhs, rhs, wit = [], [], []
            for _ in range(samples):
                mu = _random_measure(domain, rng)
                t = float(rng.uniform(0, T))
                x = domain.sample_interior(1, rng)
                b1 = coeffs.regular_drift(t, x, mu)[0]
                direction = rng.standard_normal((8, coeffs.dim))
                direction /= np.linalg.norm(direction, axis=1)[:, None]
                ball = np.concatenate([x, x + V.eps * rng.random((8, 1)) * direction])
                local = np.max(np.linalg.norm(V.gradient_fn(ball), axis=1)
                               + np.linalg.norm(np.asarray(V.hessian_fn(ball)), ord=2, axis=(1, 2)))
                lhs.append(np.dot(b1, V.gradient_fn(x)[0]) + V.eps * np.linalg.norm(b1) * local)
                rhs.append(coeffs.K_lyapunov * (V(x)[0] + mu.integrate(V)))
                wit.append({'t': t, 'x': x[0].tolist()})
            rows.append(_worst('lyapunov_drift', np.array(lhs), np.array(rhs), wit))

    for row in rows:
        sde_logger.info(f"hypothesis {row.name}: worst ratio {row.worst_ratio:.4g}, "
                        f"{'PASS' if row.passed else 'FAIL'}")
    return HypothesisReport(coeffs, rows)


def sup_moment_ratios(coeffs: CoefficientField,
                      mu_flow: MeasureFlow,
                      starts: Sequence[PointLike],
                      W: ScalarField,
                      p: float = 1.0,
                      n_particles: int = 1000,
                      options: Optional[SimulationOptions] = None,
                      seed: int = 0,
                      ) -> List[Dict[str, float]]:
    """
    E[sup_t W(X_t)^p] / W(X_0)^p for particles started at each given point,
    with its standard error
    """
    domain = mu_flow.domain
    rows = []
    for x0 in starts:
        x0 = np.asarray(x0, dtype=float).reshape(1, domain.dim)
        initial = ParticleEnsemble(domain, np.repeat(x0, n_particles, axis=0))
        streams = NoiseStreams(seed, n_particles, coeffs.noise_dim)
        summary, _ = simulate_flow(coeffs, mu_flow, initial, options, streams, track=W)
        w0 = float(np.asarray(W(x0)).reshape(-1)[0]) ** p
        values = summary.running_sup ** p / w0
        rows.append({'x0': x0[0].tolist(), 'ratio': float(values.mean()),
                     'stderr': float(values.std(ddof=1) / math.sqrt(n_particles)) if n_particles > 1 else 0.0,
                     'bound_sigmas': STAT_SIGMAS})
    return rows
