"""Discrete-time trajectory model.

One response per epoch t = 1..T at location gamma(t); revisited locations
are mapped onto a reduced set of distinct sites through a 0/1 selector so
the latent field never carries a singular covariance.  Time-varying
coefficients and the latent field both follow random walks, which turns
the whole model into one augmented Gaussian system with autoregressive
prior blocks.  The posterior precision is block tridiagonal in the
epoch-interleaved ordering, and that is how it is solved.

The non-spatial baseline (time-varying regression with no latent field)
reuses the same machinery with the field removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import cho_solve

from .bayes import (
    ArRandomWalkCov,
    AugmentedSystem,
    IdentityCov,
    NigPosterior,
    RowGroup,
    StudentTPredictive,
    TridiagStructure,
    nig_posterior,
)
from .data import TrajectoryDataset
from .errors import ConfigurationError, DataValidationError, ParameterDomainError
from .kernels import KernelSpec, chol_with_jitter, corr_matrix, cross_corr

DEDUP_EPS = 1e-9


@dataclass(frozen=True)
class LocationIndex:
    """Distinct visited sites and the epoch -> site selector."""

    distinct: np.ndarray      # (n_distinct, 2), first-occurrence order
    epoch_site: np.ndarray    # (T,) index into distinct per epoch
    eps: float = DEDUP_EPS

    @property
    def n_epochs(self) -> int:
        return len(self.epoch_site)

    @property
    def n_distinct(self) -> int:
        return len(self.distinct)

    def b_matrix(self) -> np.ndarray:
        """The T x (n T) selector with entry (t, n (t-1) + j) = 1."""
        T, n = self.n_epochs, self.n_distinct
        b = np.zeros((T, n * T))
        b[np.arange(T), n * np.arange(T) + self.epoch_site] = 1.0
        return b

    def map_latent(self, z: np.ndarray) -> np.ndarray:
        """w_t = z_t(site(t)) for z laid out as (T, n_distinct)."""
        z = np.asarray(z, dtype=float).reshape(self.n_epochs, self.n_distinct)
        return z[np.arange(self.n_epochs), self.epoch_site]


def dedup_locations(points, eps: float = DEDUP_EPS) -> LocationIndex:
    """First-occurrence dedup: two points are the same site when their
    max-coordinate distance is <= eps."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        raise DataValidationError("no locations to index")
    distinct: list[np.ndarray] = []
    idx = np.empty(len(points), dtype=int)
    for i, pt in enumerate(points):
        for j, site in enumerate(distinct):
            if np.abs(pt - site).max() <= eps:
                idx[i] = j
                break
        else:
            idx[i] = len(distinct)
            distinct.append(pt)
    return LocationIndex(distinct=np.asarray(distinct), epoch_site=idx, eps=eps)


@dataclass(frozen=True)
class DiscreteTrajSpec:
    """Hyperparameters fixed per candidate model."""

    delta_beta: float
    delta_z: float
    kernel: KernelSpec
    W_p: Optional[np.ndarray] = None  # coefficient correlation, identity default
    a_sigma: float = 2.0
    b_sigma: float = 2.0

    def __post_init__(self):
        for name in ("delta_beta", "delta_z", "a_sigma", "b_sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterDomainError(f"{name} must be positive, got {v!r}")

    def coef_corr(self, p: int) -> np.ndarray:
        if self.W_p is None:
            return np.eye(p)
        w = np.asarray(self.W_p, dtype=float)
        if w.shape != (p, p):
            raise ConfigurationError("W_p shape disagrees with covariate count")
        return w

    def label(self) -> str:
        return (f"discrete[{self.kernel.label()}, db={self.delta_beta:g}, "
                f"dz={self.delta_z:g}]")


def _check_epochs(data: TrajectoryDataset) -> None:
    t = data.t
    if len(t) == 0:
        raise DataValidationError("empty dataset")
    if len(t) > 1:
        gaps = np.diff(t)
        if (gaps <= 0).any():
            raise ConfigurationError("epochs must be strictly increasing")
        if not np.allclose(gaps, gaps[0], rtol=1e-8, atol=1e-12):
            raise ConfigurationError(
                "discrete-time model needs equally spaced epochs; resample upstream"
            )


def _interleave_permutation(T: int, p: int, n: int) -> np.ndarray:
    """Canonical index (beta stacked over epochs, then z) of each solver
    position in the epoch-interleaved ordering."""
    k = p + n
    sol2can = np.empty(T * k, dtype=int)
    for t in range(T):
        base = t * k
        sol2can[base:base + p] = t * p + np.arange(p)
        sol2can[base + p:base + k] = p * T + t * n + np.arange(n)
    return sol2can


def build_system_discrete(data: TrajectoryDataset, spec: DiscreteTrajSpec,
                          solver: str = "tridiag") -> tuple[AugmentedSystem, LocationIndex]:
    """Assemble the augmented system (responses, selector, random-walk priors).

    Prior covariance blocks are kept in factored autoregressive form; the
    tridiag solver never touches a dense S or its inverse.
    """
    _check_epochs(data)
    T = data.n
    p = data.p
    index = dedup_locations(data.locations)
    n = index.n_distinct
    dim = (p + n) * T
    observed = np.flatnonzero(data.observed_mask)
    if len(observed) == 0:
        raise DataValidationError("no observed responses to fit")

    w_p = spec.coef_corr(p)
    kernel_gram = corr_matrix(spec.kernel, index.distinct)

    x_data = np.zeros((len(observed), dim))
    for row, t in enumerate(observed):
        if p:
            x_data[row, t * p:(t + 1) * p] = data.X[t]
        x_data[row, p * T + t * n + index.epoch_site[t]] = 1.0

    groups = [RowGroup(y=data.y[observed], cov=IdentityCov(len(observed)),
                       kind="data", X=x_data)]
    cov_beta = None
    if p:
        cov_beta = ArRandomWalkCov(w_p, n_epochs=T, delta=spec.delta_beta)
        groups.append(RowGroup(y=np.zeros(p * T), cov=cov_beta, kind="prior",
                               cols=slice(0, p * T)))
    cov_z = ArRandomWalkCov(kernel_gram, n_epochs=T, delta=spec.delta_z)
    groups.append(RowGroup(y=np.zeros(n * T), cov=cov_z, kind="prior",
                           cols=slice(p * T, dim)))

    structure = None
    if solver == "tridiag":
        k = p + n
        prec_beta = cov_beta.base_precision() if p else np.zeros((0, 0))
        prec_z = cov_z.base_precision()
        diag_blocks = np.zeros((T, k, k))
        obs_set = set(observed.tolist())
        for t in range(T):
            c = 2.0 if t < T - 1 else 1.0
            if p:
                diag_blocks[t, :p, :p] = c * prec_beta
            diag_blocks[t, p:, p:] = c * prec_z
            if t in obs_set:
                a = np.zeros(k)
                if p:
                    a[:p] = data.X[t]
                a[p + index.epoch_site[t]] += 1.0
                diag_blocks[t] += np.outer(a, a)
        coupler = np.zeros((k, k))
        if p:
            coupler[:p, :p] = -prec_beta
        coupler[p:, p:] = -prec_z
        structure = TridiagStructure(
            diag_blocks=diag_blocks, coupler=coupler,
            sol2can=_interleave_permutation(T, p, n),
        )
    system = AugmentedSystem(groups=tuple(groups), dim=dim, solver=solver,
                             structure=structure)
    return system, index


@dataclass(frozen=True)
class FittedDiscrete:
    """Posterior plus the cached pieces needed for prediction."""

    post: NigPosterior
    index: LocationIndex
    spec: DiscreteTrajSpec
    p: int
    kernel_chol: np.ndarray = field(repr=False)

    @property
    def n_epochs(self) -> int:
        return self.index.n_epochs

    def beta_path(self) -> np.ndarray:
        """(T, p) posterior means of the coefficients."""
        T, p = self.n_epochs, self.p
        return self.post.m[: p * T].reshape(T, p)

    def z_path(self) -> np.ndarray:
        """(T, n_distinct) posterior means of the latent field."""
        T, p = self.n_epochs, self.p
        return self.post.m[p * T:].reshape(T, self.index.n_distinct)

    def beta_last(self) -> np.ndarray:
        return self.beta_path()[-1]

    def z_last(self) -> np.ndarray:
        return self.z_path()[-1]


def fit_discrete(data: TrajectoryDataset, spec: DiscreteTrajSpec,
                 solver: str = "tridiag") -> FittedDiscrete:
    """Thin composition: build the augmented system, run the conjugate update."""
    system, index = build_system_discrete(data, spec, solver=solver)
    post = nig_posterior(system, spec.a_sigma, spec.b_sigma)
    gram = corr_matrix(spec.kernel, index.distinct)
    _, chol, _ = chol_with_jitter(gram, what="site kernel gram")
    return FittedDiscrete(post=post, index=index, spec=spec, p=data.p,
                          kernel_chol=chol)


class DiscretePrediction(NamedTuple):
    y: StudentTPredictive
    z: StudentTPredictive
    beta: StudentTPredictive


def _kriging_parts(fit: FittedDiscrete, locations: np.ndarray):
    """Correlation-space kriging weights and residual variance at new sites."""
    k0 = cross_corr(fit.spec.kernel, fit.index.distinct, locations)
    sol = cho_solve((fit.kernel_chol, True), k0)
    resid = 1.0 - np.einsum("ij,ij->j", k0, sol)
    return sol, np.maximum(resid, 0.0)


def predict_next_discrete(fit: FittedDiscrete, x_next, location_next) -> DiscretePrediction:
    """Predictive laws of (y, z, beta) at the next epoch and its location.

    The latent field at the new location is kriged from the last filtered
    means; plugged-in posterior means are used for the location terms, and
    the scale carries the measurement floor, the coefficient step and the
    kriging residual.  The posterior covariance of the plugged-in means is
    deliberately not added (the documented plug-in convention), so these
    scales are mildly anti-conservative.
    """
    x_next = np.asarray(x_next, dtype=float).reshape(-1)
    if len(x_next) != fit.p:
        raise ConfigurationError("covariate vector length disagrees with the fit")
    location = np.asarray(location_next, dtype=float).reshape(1, 2)
    sol, resid = _kriging_parts(fit, location)
    spec = fit.spec
    scale_sigma = fit.post.b_star / fit.post.a_star
    dof = 2.0 * fit.post.a_star
    w_p = spec.coef_corr(fit.p)

    z_loc = float(sol[:, 0] @ fit.z_last())
    z_var = spec.delta_z**2 * float(resid[0])
    beta_loc = fit.beta_last()
    beta_scale = scale_sigma * spec.delta_beta**2 * w_p

    y_loc = float(x_next @ beta_loc) + z_loc
    y_var = scale_sigma * (
        1.0 + spec.delta_beta**2 * float(x_next @ w_p @ x_next) + z_var
    )
    return DiscretePrediction(
        y=StudentTPredictive(dof, np.array([y_loc]), np.array([[y_var]])),
        z=StudentTPredictive(dof, np.array([z_loc]),
                             np.array([[scale_sigma * z_var]])),
        beta=StudentTPredictive(dof, beta_loc, beta_scale),
    )


def predict_epochs_discrete(fit: FittedDiscrete, X_new, locations_new):
    """Per-point marginal predictive t laws for later epochs.

    Returns (dof, means, variance_scales); each point is treated with the
    same next-epoch law, kriged from the final filtered field.
    """
    X_new = np.asarray(X_new, dtype=float).reshape(-1, fit.p) if fit.p else \
        np.zeros((len(np.atleast_2d(locations_new)), 0))
    locations_new = np.atleast_2d(np.asarray(locations_new, dtype=float))
    sol, resid = _kriging_parts(fit, locations_new)
    spec = fit.spec
    w_p = spec.coef_corr(fit.p)
    scale_sigma = fit.post.b_star / fit.post.a_star
    means = X_new @ fit.beta_last() + sol.T @ fit.z_last()
    coef_term = spec.delta_beta**2 * np.einsum("ij,jk,ik->i", X_new, w_p, X_new) \
        if fit.p else 0.0
    var = scale_sigma * (1.0 + coef_term + spec.delta_z**2 * resid)
    return 2.0 * fit.post.a_star, means, var


def fitted_signal_draws(fit: FittedDiscrete, data: TrajectoryDataset,
                        n_draws: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Posterior draws of the noiseless signal at the observed epochs.

    Returns ((draws, n_obs) signals, (draws,) sigma^2), the inputs for the
    information criteria.
    """
    from .bayes import sample_nig

    theta, sigma2 = sample_nig(fit.post, n_draws, seed)
    T, p, n = fit.n_epochs, fit.p, fit.index.n_distinct
    obs = np.flatnonzero(data.observed_mask)
    sites = fit.index.epoch_site[obs]
    z = theta[:, p * T:].reshape(-1, T, n)
    signal = z[:, obs, sites]
    if p:
        beta = theta[:, : p * T].reshape(-1, T, p)
        signal = signal + np.einsum("stp,tp->st", beta[:, obs], data.X[obs])
    return signal, sigma2


# ---------------------------------------------------------------------------
# non-spatial baseline: time-varying regression, no latent field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NsdlmSpec:
    """Baseline with random-walk coefficients only."""

    delta_beta: float
    W_p: Optional[np.ndarray] = None
    a_sigma: float = 2.0
    b_sigma: float = 2.0

    def __post_init__(self):
        for name in ("delta_beta", "a_sigma", "b_sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterDomainError(f"{name} must be positive, got {v!r}")

    def coef_corr(self, p: int) -> np.ndarray:
        if self.W_p is None:
            return np.eye(p)
        return np.asarray(self.W_p, dtype=float)

    def label(self) -> str:
        return f"nsdlm[db={self.delta_beta:g}]"


@dataclass(frozen=True)
class FittedNsdlm:
    post: NigPosterior
    spec: NsdlmSpec
    p: int
    n_epochs: int

    def beta_path(self) -> np.ndarray:
        return self.post.m.reshape(self.n_epochs, self.p)

    def beta_last(self) -> np.ndarray:
        return self.beta_path()[-1]


def fit_nsdlm(data: TrajectoryDataset, spec: NsdlmSpec) -> FittedNsdlm:
    _check_epochs(data)
    if data.p == 0:
        raise ConfigurationError("the non-spatial baseline needs covariates")
    T, p = data.n, data.p
    observed = np.flatnonzero(data.observed_mask)
    if len(observed) == 0:
        raise DataValidationError("no observed responses to fit")
    w_p = spec.coef_corr(p)
    x_data = np.zeros((len(observed), p * T))
    for row, t in enumerate(observed):
        x_data[row, t * p:(t + 1) * p] = data.X[t]
    cov_beta = ArRandomWalkCov(w_p, n_epochs=T, delta=spec.delta_beta)
    groups = (
        RowGroup(y=data.y[observed], cov=IdentityCov(len(observed)), kind="data",
                 X=x_data),
        RowGroup(y=np.zeros(p * T), cov=cov_beta, kind="prior", cols=slice(0, p * T)),
    )
    prec = cov_beta.base_precision()
    diag_blocks = np.zeros((T, p, p))
    obs_set = set(observed.tolist())
    for t in range(T):
        c = 2.0 if t < T - 1 else 1.0
        diag_blocks[t] = c * prec
        if t in obs_set:
            diag_blocks[t] += np.outer(data.X[t], data.X[t])
    structure = TridiagStructure(diag_blocks=diag_blocks, coupler=-prec,
                                 sol2can=np.arange(p * T))
    system = AugmentedSystem(groups=groups, dim=p * T, solver="tridiag",
                             structure=structure)
    post = nig_posterior(system, spec.a_sigma, spec.b_sigma)
    return FittedNsdlm(post=post, spec=spec, p=p, n_epochs=T)


def predict_epochs_nsdlm(fit: FittedNsdlm, X_new):
    """Per-point marginal predictive t laws from the baseline."""
    X_new = np.asarray(X_new, dtype=float).reshape(-1, fit.p)
    w_p = fit.spec.coef_corr(fit.p)
    scale_sigma = fit.post.b_star / fit.post.a_star
    means = X_new @ fit.beta_last()
    coef_term = fit.spec.delta_beta**2 * np.einsum("ij,jk,ik->i", X_new, w_p, X_new)
    var = scale_sigma * (1.0 + coef_term)
    return 2.0 * fit.post.a_star, means, var


def fitted_signal_draws_nsdlm(fit: FittedNsdlm, data: TrajectoryDataset,
                              n_draws: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Posterior signal draws for the baseline (trend only)."""
    from .bayes import sample_nig

    theta, sigma2 = sample_nig(fit.post, n_draws, seed)
    obs = np.flatnonzero(data.observed_mask)
    beta = theta.reshape(-1, fit.n_epochs, fit.p)
    signal = np.einsum("stp,tp->st", beta[:, obs], data.X[obs])
    return signal, sigma2


def fitted_signal(fit: FittedDiscrete, data: TrajectoryDataset) -> np.ndarray:
    """Posterior-mean signal at the observed epochs."""
    obs = np.flatnonzero(data.observed_mask)
    sites = fit.index.epoch_site[obs]
    signal = fit.z_path()[obs, sites]
    if fit.p:
        signal = signal + (data.X[obs] * fit.beta_path()[obs]).sum(axis=1)
    return signal


def fitted_signal_nsdlm(fit: FittedNsdlm, data: TrajectoryDataset) -> np.ndarray:
    obs = np.flatnonzero(data.observed_mask)
    return (data.X[obs] * fit.beta_path()[obs]).sum(axis=1)
