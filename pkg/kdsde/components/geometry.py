"""
Open domains O with their signed boundary distance, boundary projection and
the boundary band {x in closure(O): dist(x, boundary) <= r0}.

Points are handled as ``(n, d)`` arrays internally. A scalar (or, in one
dimension, a flat array of scalars) is accepted as well and the result comes
back in the same shape.
"""
import math
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from kdsde.constants import BOUNDARY_TOL, DomainKind
from kdsde.components.exceptions import (
    AmbiguousProjectionError,
    DomainViolationError,
    InvalidArgumentError,
    UnknownComponentError,
)
from kdsde.typedefs import PointLike

__all__ = (
    'Domain',
    'IntervalDomain',
    'BallDomain',
    'HalfSpaceDomain',
    'GenericDomain',
    'DomainSpec',
    'interval',
    'ball',
    'half_space',
    'generic',
    'domain_from_spec',
    'boundary_distance',
    'project_to_boundary',
    'in_band',
)

_FD_STEP = 1e-5
_BISECTION_STEPS = 60


def _as_points(x: PointLike, dim: int) -> Tuple[np.ndarray, str]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1), 'scalar'
    if arr.ndim == 1:
        if dim == 1:
            return arr.reshape(-1, 1), 'flat'
        if arr.shape[0] != dim:
            raise InvalidArgumentError(f"point of dimension {arr.shape[0]} given to a {dim}-d domain")
        return arr.reshape(1, dim), 'point'
    if arr.shape[1] != dim:
        raise InvalidArgumentError(f"points of dimension {arr.shape[1]} given to a {dim}-d domain")
    return arr, 'batch'


def _restore_values(values: np.ndarray, shape_kind: str):
    if shape_kind in ('scalar', 'point'):
        return values[0].item() if values.dtype != bool else bool(values[0])
    return values


def _restore_points(points: np.ndarray, shape_kind: str):
    if shape_kind == 'scalar':
        return float(points[0, 0])
    if shape_kind == 'point':
        return points[0]
    if shape_kind == 'flat':
        return points[:, 0]
    return points


class Domain:
    """
    Base class of all domains. Subclasses provide ``signed_distance`` and
    ``closest_boundary_point``; everything else is derived.
    """
    kind: str = None

    def __init__(self, dim: int, r0: float, anchor: Optional[PointLike], tol: float = BOUNDARY_TOL):
        if not 0 < r0:
            raise InvalidArgumentError(f"band width r0({r0}) must be positive")
        self.dim = int(dim)
        self.r0 = float(r0)
        self.tol = float(tol)
        self.anchor = None if anchor is None else np.asarray(anchor, dtype=float).reshape(self.dim)

    def _check_anchor(self):
        if self.anchor is not None and abs(self._signed_distance(self.anchor[None, :])[0]) > self.tol:
            raise InvalidArgumentError(f"anchor point {self.anchor.tolist()} is not on the boundary")

    # signed distance: > 0 inside O, 0 on the boundary, < 0 outside
    def _signed_distance(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _closest_boundary_point(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def signed_distance(self, x: PointLike):
        pts, kind = _as_points(x, self.dim)
        return _restore_values(self._signed_distance(pts), kind)

    def _contains(self, pts: np.ndarray) -> np.ndarray:
        return self._signed_distance(pts) > self.tol

    def contains(self, x: PointLike):
        """
        strict membership in O, points within tol of the boundary count as boundary
        """
        pts, kind = _as_points(x, self.dim)
        return _restore_values(self._contains(pts), kind)

    def _boundary_distance(self, pts: np.ndarray) -> np.ndarray:
        sd = self._signed_distance(pts)
        outside = sd < -self.tol
        if np.any(outside):
            i = int(np.argmax(outside))
            raise DomainViolationError(
                f"point {pts[i].tolist()} lies outside the closure of the domain",
                signed_distance=float(sd[i]))
        return np.maximum(sd, 0.0)

    def boundary_distance(self, x: PointLike):
        pts, kind = _as_points(x, self.dim)
        return _restore_values(self._boundary_distance(pts), kind)

    def _in_band(self, pts: np.ndarray) -> np.ndarray:
        return self._boundary_distance(pts) <= self.r0

    def in_band(self, x: PointLike):
        pts, kind = _as_points(x, self.dim)
        return _restore_values(self._in_band(pts), kind)

    def closest_boundary_point(self, x: PointLike):
        pts, kind = _as_points(x, self.dim)
        return _restore_points(self._closest_boundary_point(pts), kind)

    def _project_to_boundary(self, pts: np.ndarray) -> np.ndarray:
        band = self._in_band(pts)
        out = np.empty_like(pts)
        if np.any(band):
            out[band] = self._closest_boundary_point(pts[band])
        if not np.all(band):
            if self.anchor is None:
                raise InvalidArgumentError("domain has no anchor point for out-of-band projection")
            out[~band] = self.anchor
        return out

    def project_to_boundary(self, x: PointLike):
        pts, kind = _as_points(x, self.dim)
        return _restore_points(self._project_to_boundary(pts), kind)

    def distance_gradient(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        grad = np.empty_like(pts)
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = _FD_STEP
            grad[:, k] = (self._signed_distance(pts + e) - self._signed_distance(pts - e)) / (2 * _FD_STEP)
        return grad

    def distance_hessian(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = pts.shape[0]
        hess = np.empty((n, self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = _FD_STEP
            hess[:, :, k] = (self.distance_gradient(pts + e) - self.distance_gradient(pts - e)) / (2 * _FD_STEP)
        return 0.5 * (hess + np.transpose(hess, (0, 2, 1)))

    def chord_exit(self, start: np.ndarray, end: np.ndarray) -> np.ndarray:
        """
        fraction s in [0, 1] such that start + s (end - start) lies on the
        boundary, for chords running from inside O to outside (or onto) it
        """
        lo = np.zeros(start.shape[0])
        hi = np.ones(start.shape[0])
        for _ in range(_BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            inside = self._signed_distance(start + mid[:, None] * (end - start)) > 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return hi

    def sample_interior(self, n: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        raise NotImplementedError

    def sample_boundary(self, n: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {'kind': self.kind, 'dim': self.dim, 'r0': self.r0,
                'anchor': None if self.anchor is None else self.anchor.tolist()}

    def __repr__(self):
        return f"{self.__class__.__name__}({self.describe()})"


class IntervalDomain(Domain):
    kind = DomainKind.INTERVAL

    def __init__(self, lower: float, upper: float, r0: float = 1.0,
                 anchor: Optional[PointLike] = None, tol: float = BOUNDARY_TOL):
        if not lower < upper:
            raise InvalidArgumentError(f"empty interval ({lower}, {upper})")
        if math.isinf(lower) and math.isinf(upper):
            raise InvalidArgumentError("interval needs at least one finite endpoint")
        self.lower = float(lower)
        self.upper = float(upper)
        if anchor is None:
            anchor = self.lower if math.isfinite(self.lower) else self.upper
        super().__init__(1, r0, anchor, tol)
        self._check_anchor()

    def _signed_distance(self, pts):
        x = pts[:, 0]
        return np.minimum(x - self.lower, self.upper - x)

    def _closest_boundary_point(self, pts):
        x = pts[:, 0]
        # midpoint ties go to the lower endpoint
        near_lower = (x - self.lower) <= (self.upper - x)
        return np.where(near_lower, self.lower, self.upper)[:, None]

    def distance_gradient(self, pts):
        x = np.atleast_2d(pts)[:, 0]
        return np.where((x - self.lower) <= (self.upper - x), 1.0, -1.0)[:, None]

    def distance_hessian(self, pts):
        return np.zeros((np.atleast_2d(pts).shape[0], 1, 1))

    def chord_exit(self, start, end):
        x, y = start[:, 0], end[:, 0]
        step = y - x
        with np.errstate(divide='ignore', invalid='ignore'):
            through_lower = (y - self.lower) <= (self.upper - y)
            frac = np.where(through_lower, (x - self.lower) / -step, (self.upper - x) / step)
        return np.clip(np.nan_to_num(frac, nan=1.0, posinf=1.0, neginf=0.0), 0.0, 1.0)

    def sample_interior(self, n, rng, scale=1.0):
        if math.isfinite(self.lower) and math.isfinite(self.upper):
            x = rng.uniform(self.lower, self.upper, size=n)
        elif math.isfinite(self.lower):
            x = self.lower + rng.exponential(scale, size=n)
        else:
            x = self.upper - rng.exponential(scale, size=n)
        return x[:, None]

    def sample_boundary(self, n, rng, scale=1.0):
        ends = [e for e in (self.lower, self.upper) if math.isfinite(e)]
        return np.asarray(ends)[rng.integers(0, len(ends), size=n)][:, None]

    def describe(self):
        desc = super().describe()
        desc.update(lower=self.lower, upper=self.upper)
        return desc


class BallDomain(Domain):
    kind = DomainKind.BALL

    def __init__(self, center: PointLike, radius: float, r0: float = 1.0,
                 anchor: Optional[PointLike] = None, tol: float = BOUNDARY_TOL):
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if radius <= 0:
            raise InvalidArgumentError(f"ball radius({radius}) must be positive")
        self.center = center
        self.radius = float(radius)
        if anchor is None:
            anchor = center.copy()
            anchor[0] += radius
        super().__init__(center.shape[0], r0, anchor, tol)
        self._check_anchor()

    def _signed_distance(self, pts):
        return self.radius - np.linalg.norm(pts - self.center, axis=1)

    def _closest_boundary_point(self, pts):
        diff = pts - self.center
        norm = np.linalg.norm(diff, axis=1)
        degenerate = norm < 1e-15
        safe = np.where(degenerate, 1.0, norm)
        out = self.center + self.radius * diff / safe[:, None]
        # every boundary point is nearest to the center: use the anchor
        out[degenerate] = self.anchor
        return out

    def distance_gradient(self, pts):
        diff = np.atleast_2d(pts) - self.center
        norm = np.maximum(np.linalg.norm(diff, axis=1), 1e-15)
        return -diff / norm[:, None]

    def distance_hessian(self, pts):
        diff = np.atleast_2d(pts) - self.center
        norm = np.maximum(np.linalg.norm(diff, axis=1), 1e-15)
        u = diff / norm[:, None]
        eye = np.eye(self.dim)[None, :, :]
        return -(eye - u[:, :, None] * u[:, None, :]) / norm[:, None, None]

    def chord_exit(self, start, end):
        p = start - self.center
        v = end - start
        a = np.einsum('ij,ij->i', v, v)
        b = 2 * np.einsum('ij,ij->i', p, v)
        c = np.einsum('ij,ij->i', p, p) - self.radius ** 2
        disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
        with np.errstate(divide='ignore', invalid='ignore'):
            frac = (-b + disc) / (2 * a)
        return np.clip(np.nan_to_num(frac, nan=1.0), 0.0, 1.0)

    def sample_interior(self, n, rng, scale=1.0):
        direction = rng.standard_normal((n, self.dim))
        direction /= np.linalg.norm(direction, axis=1)[:, None]
        r = self.radius * rng.random(n) ** (1.0 / self.dim)
        return self.center + r[:, None] * direction

    def sample_boundary(self, n, rng, scale=1.0):
        direction = rng.standard_normal((n, self.dim))
        direction /= np.linalg.norm(direction, axis=1)[:, None]
        return self.center + self.radius * direction

    def describe(self):
        desc = super().describe()
        desc.update(center=self.center.tolist(), radius=self.radius)
        return desc


class HalfSpaceDomain(Domain):
    kind = DomainKind.HALF_SPACE

    def __init__(self, normal: PointLike, offset: float, r0: float = 1.0,
                 anchor: Optional[PointLike] = None, tol: float = BOUNDARY_TOL):
        normal = np.atleast_1d(np.asarray(normal, dtype=float))
        length = np.linalg.norm(normal)
        if length == 0:
            raise InvalidArgumentError("half-space normal must be non-zero")
        self.normal = normal / length
        self.offset = float(offset) / length
        if anchor is None:
            anchor = self.offset * self.normal
        super().__init__(normal.shape[0], r0, anchor, tol)
        self._check_anchor()

    def _signed_distance(self, pts):
        return pts @ self.normal - self.offset

    def _closest_boundary_point(self, pts):
        return pts - self._signed_distance(pts)[:, None] * self.normal

    def distance_gradient(self, pts):
        return np.tile(self.normal, (np.atleast_2d(pts).shape[0], 1))

    def distance_hessian(self, pts):
        return np.zeros((np.atleast_2d(pts).shape[0], self.dim, self.dim))

    def chord_exit(self, start, end):
        s0 = self._signed_distance(start)
        s1 = self._signed_distance(end)
        with np.errstate(divide='ignore', invalid='ignore'):
            frac = s0 / (s0 - s1)
        return np.clip(np.nan_to_num(frac, nan=1.0), 0.0, 1.0)

    def sample_boundary(self, n, rng, scale=1.0):
        pts = self.anchor + scale * rng.standard_normal((n, self.dim))
        return self._closest_boundary_point(pts)

    def sample_interior(self, n, rng, scale=1.0):
        return self.sample_boundary(n, rng, scale) + rng.exponential(scale, size=n)[:, None] * self.normal

    def describe(self):
        desc = super().describe()
        desc.update(normal=self.normal.tolist(), offset=self.offset)
        return desc


class GenericDomain(Domain):
    """
    A domain given by callables. ``projection_fn`` marks rows without a unique
    nearest boundary point with NaN. Domains that only need membership (the
    distribution independent noise setting) may pass ``membership_fn`` alone.
    """
    kind = DomainKind.GENERIC

    def __init__(self, dim: int,
                 signed_distance_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 projection_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 membership_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 r0: float = 1.0,
                 anchor: Optional[PointLike] = None,
                 bounding_box: Optional[Tuple[PointLike, PointLike]] = None,
                 tol: float = BOUNDARY_TOL):
        if signed_distance_fn is None and membership_fn is None:
            raise InvalidArgumentError("generic domain needs a signed distance or a membership test")
        self._sd_fn = signed_distance_fn
        self._proj_fn = projection_fn
        self._member_fn = membership_fn
        self.bounding_box = None if bounding_box is None else (
            np.asarray(bounding_box[0], dtype=float), np.asarray(bounding_box[1], dtype=float))
        super().__init__(dim, r0, anchor, tol)
        if self._sd_fn is not None:
            self._check_anchor()

    def _signed_distance(self, pts):
        if self._sd_fn is None:
            raise InvalidArgumentError("generic domain was declared without a distance function")
        return np.asarray(self._sd_fn(pts), dtype=float).reshape(-1)

    def _contains(self, pts):
        if self._member_fn is not None:
            return np.asarray(self._member_fn(pts), dtype=bool).reshape(-1)
        return super()._contains(pts)

    def _closest_boundary_point(self, pts):
        if self._proj_fn is None:
            raise InvalidArgumentError("generic domain was declared without a projection")
        out = np.asarray(self._proj_fn(pts), dtype=float).reshape(pts.shape)
        bad = np.isnan(out).any(axis=1)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise AmbiguousProjectionError(f"no unique nearest boundary point for {pts[i].tolist()}")
        return out

    def chord_exit(self, start, end):
        if self._sd_fn is not None:
            return super().chord_exit(start, end)
        lo = np.zeros(start.shape[0])
        hi = np.ones(start.shape[0])
        for _ in range(_BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            inside = self._contains(start + mid[:, None] * (end - start))
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return hi

    def sample_interior(self, n, rng, scale=1.0):
        if self.bounding_box is None:
            raise InvalidArgumentError("generic domain sampling needs a bounding box")
        lo, hi = self.bounding_box
        found: List[np.ndarray] = []
        count = 0
        while count < n:
            cand = rng.uniform(lo, hi, size=(max(n, 16), self.dim))
            cand = cand[self._contains(cand)]
            found.append(cand)
            count += cand.shape[0]
        return np.concatenate(found)[:n]

    def sample_boundary(self, n, rng, scale=1.0):
        if self._proj_fn is None:
            raise InvalidArgumentError("generic domain boundary sampling needs a projection")
        return self._closest_boundary_point(self.sample_interior(n, rng, scale))


def interval(lower: float, upper: float, r0: float = 1.0, anchor: Optional[float] = None,
             tol: float = BOUNDARY_TOL) -> IntervalDomain:
    return IntervalDomain(lower, upper, r0=r0, anchor=anchor, tol=tol)


def ball(center: PointLike, radius: float, r0: float = 1.0, anchor: Optional[PointLike] = None,
         tol: float = BOUNDARY_TOL) -> BallDomain:
    return BallDomain(center, radius, r0=r0, anchor=anchor, tol=tol)


def half_space(normal: PointLike, offset: float, r0: float = 1.0, anchor: Optional[PointLike] = None,
               tol: float = BOUNDARY_TOL) -> HalfSpaceDomain:
    return HalfSpaceDomain(normal, offset, r0=r0, anchor=anchor, tol=tol)


def generic(dim: int, signed_distance_fn=None, projection_fn=None, membership_fn=None,
            r0: float = 1.0, anchor: Optional[PointLike] = None, bounding_box=None,
            tol: float = BOUNDARY_TOL) -> GenericDomain:
    return GenericDomain(dim, signed_distance_fn=signed_distance_fn, projection_fn=projection_fn,
                         membership_fn=membership_fn, r0=r0, anchor=anchor,
                         bounding_box=bounding_box, tol=tol)


class DomainSpec(BaseModel):
    kind: str = DomainKind.INTERVAL
    lower: Optional[float] = 0.0
    upper: Optional[float] = 1.0
    center: Optional[List[float]] = None
    radius: Optional[float] = None
    normal: Optional[List[float]] = None
    offset: Optional[float] = None
    r0: float = Field(1.0, gt=0, le=1)
    anchor: Optional[List[float]] = None
    tol: float = Field(BOUNDARY_TOL, gt=0)


def domain_from_spec(spec: DomainSpec) -> Domain:
    anchor = spec.anchor
    try:
        if spec.kind == DomainKind.INTERVAL:
            return interval(spec.lower, spec.upper, r0=spec.r0,
                            anchor=None if anchor is None else anchor[0], tol=spec.tol)
        if spec.kind == DomainKind.BALL:
            return ball(spec.center, spec.radius, r0=spec.r0, anchor=anchor, tol=spec.tol)
        if spec.kind == DomainKind.HALF_SPACE:
            return half_space(spec.normal, spec.offset, r0=spec.r0, anchor=anchor, tol=spec.tol)
    except TypeError as e:
        raise InvalidArgumentError(f"incomplete {spec.kind} domain: {e}")
    raise UnknownComponentError(f"domain kind({spec.kind}) cannot be built from a config file")


def boundary_distance(domain: Domain, x: PointLike):
    return domain.boundary_distance(x)


def project_to_boundary(domain: Domain, x: PointLike):
    return domain.project_to_boundary(x)


def in_band(domain: Domain, x: PointLike):
    return domain.in_band(x)
