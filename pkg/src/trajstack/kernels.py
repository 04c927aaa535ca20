"""Correlation kernels and positive-definite Gram assembly.

Three kernel families are supported:

* ``matern``   -- Matern correlation on planar distances, parameters
  (phi, nu) for decay and smoothness.
* ``gneiting`` -- non-separable space-time correlation
  ``(phi1*dt^2+1)^-1 * exp(-phi2*ds/sqrt(1+phi1*dt^2))`` on pairs of
  (time, planar location) points, positive definite even when the same
  location is revisited at different times.
* ``sqexp``    -- squared-exponential temporal correlation
  ``exp(-xi^2*dt^2)``.

Gram matrices are built from the upper triangle and mirrored, so symmetry
is exact.  The diagonal is exactly 1 before jitter.  Cholesky failures
escalate through the jitter ladder 1e-10 -> 1e-8 -> 1e-6; the applied
jitter is recorded on the result.  All functions are pure and the module
keeps no global state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._bessel import kv
from .errors import NumericalRankError, ParameterDomainError

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class SpaceTimePoint:
    """A time stamp paired with a planar location."""

    t: float
    s: tuple[float, float]

    def __post_init__(self):
        if not (math.isfinite(self.t) and all(math.isfinite(c) for c in self.s)):
            raise ParameterDomainError("space-time point must have finite coordinates")


def _check_positive(**params: float) -> None:
    for name, value in params.items():
        if not (math.isfinite(value) and value > 0):
            raise ParameterDomainError(f"{name} must be a positive finite real, got {value!r}")


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family together with its fixed hyperparameters."""

    family: str
    params: tuple[float, ...]

    @classmethod
    def matern(cls, phi: float, nu: float) -> "KernelSpec":
        _check_positive(phi=phi, nu=nu)
        return cls("matern", (float(phi), float(nu)))

    @classmethod
    def gneiting(cls, phi1: float, phi2: float) -> "KernelSpec":
        _check_positive(phi1=phi1, phi2=phi2)
        return cls("gneiting", (float(phi1), float(phi2)))

    @classmethod
    def sqexp(cls, xi: float) -> "KernelSpec":
        _check_positive(xi=xi)
        return cls("sqexp", (float(xi),))

    def __post_init__(self):
        if self.family not in ("matern", "gneiting", "sqexp"):
            raise ParameterDomainError(f"unknown kernel family {self.family!r}")

    def label(self) -> str:
        return f"{self.family}({', '.join(f'{p:g}' for p in self.params)})"


def matern_corr(d, phi: float, nu: float):
    """Matern correlation (2^(1-nu)/Gamma(nu)) (d/phi)^nu K_nu(d/phi).

    Exactly 1 at d=0 (the analytic limit).  Vectorized over d.
    """
    _check_positive(phi=phi, nu=nu)
    d = np.asarray(d, dtype=float)
    if not np.isfinite(d).all() or (d < 0).any():
        raise ParameterDomainError("distances must be finite and nonnegative")
    scalar = d.ndim == 0
    x = np.atleast_1d(d / phi)
    out = np.ones_like(x)
    # Below ~1e-8 the correlation equals its small-argument expansion to
    # machine precision, and x^nu * K_nu(x) would overflow for large nu.
    tiny = (x > 0) & (x <= 1e-8)
    if tiny.any() and nu < 1.0:
        coef = math.gamma(1.0 - nu) / math.gamma(1.0 + nu)
        out[tiny] = 1.0 - coef * (x[tiny] / 2.0) ** (2.0 * nu)
    body = x > 1e-8
    if body.any():
        xb = x[body]
        out[body] = (2.0 ** (1.0 - nu) / math.gamma(nu)) * xb**nu * kv(nu, xb)
    return float(out[0]) if scalar else out


def _as_time_loc(point) -> tuple[float, np.ndarray]:
    if isinstance(point, SpaceTimePoint):
        return point.t, np.asarray(point.s, dtype=float)
    t, s = point
    return float(t), np.asarray(s, dtype=float)


def gneiting_st_corr(p, q, phi1: float, phi2: float) -> float:
    """Non-separable space-time correlation between two points.

    Points are ``SpaceTimePoint`` or ``(t, (sx, sy))`` pairs.
    """
    _check_positive(phi1=phi1, phi2=phi2)
    tp, sp = _as_time_loc(p)
    tq, sq = _as_time_loc(q)
    if not (math.isfinite(tp) and math.isfinite(tq) and np.isfinite(sp).all() and np.isfinite(sq).all()):
        raise ParameterDomainError("space-time points must be finite")
    dt2 = (tp - tq) ** 2
    ds = float(np.linalg.norm(sp - sq))
    denom = phi1 * dt2 + 1.0
    return (1.0 / denom) * math.exp(-phi2 * ds / math.sqrt(denom))


def sqexp_corr(t: float, t_other: float, xi: float) -> float:
    """Squared-exponential temporal correlation exp(-xi^2 (t-t')^2)."""
    _check_positive(xi=xi)
    if not (math.isfinite(t) and math.isfinite(t_other)):
        raise ParameterDomainError("times must be finite")
    return math.exp(-(xi**2) * (t - t_other) ** 2)


# ---------------------------------------------------------------------------
# vectorized point handling
# ---------------------------------------------------------------------------


def as_point_array(spec: KernelSpec, points) -> np.ndarray:
    """Normalize heterogeneous point inputs into the family's array layout.

    matern -> (n, 2) locations; sqexp -> (n,) times;
    gneiting -> (n, 3) rows of [t, sx, sy].
    """
    if isinstance(points, np.ndarray) and points.dtype != object:
        arr = np.asarray(points, dtype=float)
    else:
        points = list(points)
        if len(points) == 0:
            raise ParameterDomainError("points must be non-empty")
        if spec.family == "gneiting":
            rows = []
            for p in points:
                t, s = _as_time_loc(p)
                rows.append((t, s[0], s[1]))
            arr = np.asarray(rows, dtype=float)
        else:
            arr = np.asarray(points, dtype=float)
    if spec.family == "sqexp":
        arr = arr.reshape(-1)
    elif spec.family == "matern":
        arr = arr.reshape(len(arr), -1)
        if arr.shape[1] != 2:
            raise ParameterDomainError("matern points must be planar (x, y) locations")
    else:
        arr = arr.reshape(len(arr), -1)
        if arr.shape[1] != 3:
            raise ParameterDomainError("gneiting points must be (t, sx, sy) rows")
    if arr.size == 0:
        raise ParameterDomainError("points must be non-empty")
    if not np.isfinite(arr).all():
        raise ParameterDomainError("points must be finite")
    return arr


def _pair_corr(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Correlation for aligned point rows a[i] vs b[i]."""
    if spec.family == "matern":
        phi, nu = spec.params
        d = np.sqrt(((a - b) ** 2).sum(axis=-1))
        return matern_corr(d, phi, nu)
    if spec.family == "sqexp":
        (xi,) = spec.params
        return np.exp(-(xi**2) * (a - b) ** 2)
    phi1, phi2 = spec.params
    dt2 = (a[..., 0] - b[..., 0]) ** 2
    ds = np.sqrt((a[..., 1] - b[..., 1]) ** 2 + (a[..., 2] - b[..., 2]) ** 2)
    denom = phi1 * dt2 + 1.0
    return (1.0 / denom) * np.exp(-phi2 * ds / np.sqrt(denom))


def cross_corr(spec: KernelSpec, points_a, points_b) -> np.ndarray:
    """Rectangular correlation matrix between two point sets."""
    a = as_point_array(spec, points_a)
    b = as_point_array(spec, points_b)
    if spec.family == "sqexp":
        return _pair_corr(spec, a[:, None], b[None, :])
    return _pair_corr(spec, a[:, None, :], b[None, :, :])


def corr_matrix(spec: KernelSpec, points) -> np.ndarray:
    """Square correlation matrix: upper triangle evaluated once, mirrored.

    Diagonal is exactly 1; no jitter is applied here.
    """
    a = as_point_array(spec, points)
    n = len(a)
    m = np.eye(n)
    if n > 1:
        iu, ju = np.triu_indices(n, 1)
        if spec.family == "sqexp":
            vals = _pair_corr(spec, a[iu], a[ju])
        else:
            vals = _pair_corr(spec, a[iu, :], a[ju, :])
        m[iu, ju] = vals
        m[ju, iu] = vals
    return m


def _separation(spec: KernelSpec, a: np.ndarray) -> np.ndarray:
    if spec.family == "sqexp":
        return np.abs(a[:, None] - a[None, :])
    if spec.family == "matern":
        diff = a[:, None, :] - a[None, :, :]
        return np.sqrt((diff**2).sum(axis=-1))
    diff = a[:, None, :] - a[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


@dataclass(frozen=True)
class GramResult:
    """A positive-definite Gram matrix with its Cholesky factor.

    ``matrix`` includes the applied jitter (0.0 when none was needed) and
    ``chol`` is its lower-triangular factor.
    """

    matrix: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0
    spec: KernelSpec | None = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def chol_with_jitter(matrix: np.ndarray, jitter: bool = True,
                     what: str = "matrix") -> tuple[np.ndarray, np.ndarray, float]:
    """Cholesky with the escalating jitter ladder.

    Returns (possibly jittered matrix, lower factor, applied jitter).
    Raises NumericalRankError when the ladder is exhausted or jitter is off.
    """
    ladder = JITTER_LADDER if jitter else JITTER_LADDER[:1]
    for eps in ladder:
        candidate = matrix if eps == 0.0 else matrix + eps * np.eye(len(matrix))
        try:
            lower = np.linalg.cholesky(candidate)
        except np.linalg.LinAlgError:
            continue
        return candidate, lower, eps
    raise NumericalRankError(f"{what} is not positive definite (jitter ladder exhausted)")


def gram(points, spec: KernelSpec, jitter: bool = True) -> GramResult:
    """Assemble the correlation Gram matrix and factor it.

    Near-singular matrices are rescued by the jitter ladder when ``jitter``
    is enabled; otherwise, or if the ladder is exhausted, a
    NumericalRankError names the closest pair of points.
    """
    a = as_point_array(spec, points)
    m = corr_matrix(spec, a)
    try:
        matrix, lower, eps = chol_with_jitter(m, jitter=jitter, what="gram matrix")
    except NumericalRankError:
        sep = _separation(spec, a)
        np.fill_diagonal(sep, np.inf)
        i, j = np.unravel_index(np.argmin(sep), sep.shape)
        raise NumericalRankError(
            f"gram matrix for {spec.label()} is numerically rank deficient; "
            f"closest points are #{min(i, j)} and #{max(i, j)} "
            f"at separation {sep[i, j]:.3e}"
        ) from None
    return GramResult(matrix=matrix, chol=lower, jitter=eps, spec=spec)
