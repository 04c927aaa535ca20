"""Forward-filtered Bayesian dynamic linear model with unknown noise scale.

Model per epoch t:

    y_t = F_t theta_t + eta_t,        eta_t ~ N(0, sigma^2 V_t)
    theta_t = G_t theta_{t-1} + w_t,  w_t   ~ N(0, sigma^2 S_t)

with sigma^2 ~ InvGamma(n0/2, n0 s0/2) and theta_0 | sigma^2 ~ N(m0,
sigma^2 S0).  Filtering keeps the joint Normal-Inverse-Gamma form exactly,
so no sampling is involved.  ``V_t`` is assumed diagonal and handled by
pre-whitening the observation rows; the recursions below use V = I.

The spatial adaptation stacks a p-dimensional trend with an n-dimensional
latent field over fixed locations; ``no_trend_matern_model`` builds the
trend-free special case driven by a Matern kernel that the diagnostics
module studies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import cho_solve

from .errors import ConfigurationError, NumericalRankError, ParameterDomainError
from .kernels import KernelSpec, corr_matrix, cross_corr
from .bayes import StudentTPredictive


@dataclass(frozen=True)
class DlmState:
    """Filtered state after epoch t: sigma^2 | D_t ~ IG(n_t/2, n_t s_t/2),
    theta_t | sigma^2, D_t ~ N(m, sigma^2 W)."""

    t: int
    n_t: float
    s_t: float
    m: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        if self.s_t <= 0 or self.n_t <= 0:
            raise ParameterDomainError("n_t and s_t must stay positive")


MatrixLike = Union[np.ndarray, Callable[[int], np.ndarray]]


@dataclass(frozen=True)
class DlmSpec:
    """Constant or per-epoch system matrices plus the NIG prior."""

    F: MatrixLike
    G: MatrixLike
    S: MatrixLike
    n_sigma: float
    s_sigma: float
    m0: np.ndarray
    S0: np.ndarray
    V_diag: Optional[np.ndarray] = None  # diagonal observation scale, default I

    def at(self, name: str, t: int) -> np.ndarray:
        thing = getattr(self, name)
        return np.asarray(thing(t) if callable(thing) else thing, dtype=float)

    def initial_state(self) -> DlmState:
        return DlmState(t=0, n_t=float(self.n_sigma), s_t=float(self.s_sigma),
                        m=np.asarray(self.m0, dtype=float).copy(),
                        W=np.asarray(self.S0, dtype=float).copy())


def _sym(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def filter_step(state: DlmState, y_t: np.ndarray, F_t: np.ndarray,
                G_t: np.ndarray, S_t: np.ndarray) -> DlmState:
    """One exact filtering update.

    R = G W G' + S, Q = F R F' + I, f = F G m,
    m+ = G m + R F' Q^-1 (y - f), W+ = R - R F' Q^-1 F R,
    n+ = n + len(y), (n s)+ = n s + (y-f)' Q^-1 (y-f).
    """
    y_t = np.atleast_1d(np.asarray(y_t, dtype=float))
    F_t = np.atleast_2d(np.asarray(F_t, dtype=float))
    G_t = np.atleast_2d(np.asarray(G_t, dtype=float))
    S_t = np.atleast_2d(np.asarray(S_t, dtype=float))
    n = len(y_t)
    R = _sym(G_t @ state.W @ G_t.T + S_t)
    FR = F_t @ R
    Q = _sym(FR @ F_t.T + np.eye(n))
    try:
        L_q = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise NumericalRankError("innovation covariance Q_t is not positive definite") from None
    f = F_t @ (G_t @ state.m)
    innov = y_t - f
    q_innov = cho_solve((L_q, True), innov)
    m_new = G_t @ state.m + FR.T @ q_innov
    W_new = _sym(R - FR.T @ cho_solve((L_q, True), FR))
    n_new = state.n_t + n
    ns_new = state.n_t * state.s_t + float(innov @ q_innov)
    return DlmState(t=state.t + 1, n_t=n_new, s_t=ns_new / n_new, m=m_new, W=W_new)


def filter_series(spec: DlmSpec, ys) -> DlmState:
    """Run the filter over a sequence of epoch observations."""
    state = spec.initial_state()
    for i, y in enumerate(ys, start=1):
        F = spec.at("F", i)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if spec.V_diag is not None:
            root = np.sqrt(np.asarray(spec.V_diag, dtype=float))
            y = y / root
            F = F / root[:, None]
        state = filter_step(state, y, F, spec.at("G", i), spec.at("S", i))
    return state


def spatial_predict(state: DlmState, locations, new_locations, X0,
                    kernel: KernelSpec, delta_z: float, p: int) -> StudentTPredictive:
    """Posterior predictive of y at new locations given the filtered state.

    The state vector is (trend of length p, latent field over ``locations``);
    the latent field is kriged to ``new_locations`` with the fitted kernel.
    """
    locations = np.asarray(locations, dtype=float)
    new_locations = np.atleast_2d(np.asarray(new_locations, dtype=float))
    n = len(locations)
    n0 = len(new_locations)
    if len(state.m) != p + n:
        raise ConfigurationError(
            f"state dimension {len(state.m)} does not match trend {p} + field {n}; "
            "kernel/location configuration disagrees with the fit"
        )
    X0 = np.zeros((n0, 0)) if p == 0 else np.atleast_2d(np.asarray(X0, dtype=float))
    if X0.shape != (n0, p):
        raise ConfigurationError("explanatory matrix shape disagrees with new locations")

    C = delta_z**2 * corr_matrix(kernel, locations)
    C0 = delta_z**2 * cross_corr(kernel, locations, new_locations)
    C00 = delta_z**2 * corr_matrix(kernel, new_locations)
    try:
        L_c = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise NumericalRankError("latent-field covariance over observed locations "
                                 "is not positive definite") from None
    krig = cho_solve((L_c, True), C0).T  # rows: C0' C^-1
    loc = X0 @ state.m[:p] + krig @ state.m[p:]
    scale = state.s_t * _sym(
        np.eye(n0) + X0 @ state.W[:p, :p] @ X0.T + C00 - krig @ C0
    )
    return StudentTPredictive(dof=state.n_t, loc=loc, scale=scale)


def forecast(state: DlmState, F_next: np.ndarray, G_next: np.ndarray,
             S_next: np.ndarray, h: int = 1) -> StudentTPredictive:
    """h-step-ahead marginal forecast of y.

    Steps beyond the first propagate (m, W) through the evolution with no
    data update, reusing the supplied matrices each step, then apply the
    one-step forecast law.
    """
    if h < 1:
        raise ConfigurationError("forecast horizon must be at least 1")
    F_next = np.atleast_2d(np.asarray(F_next, dtype=float))
    G_next = np.atleast_2d(np.asarray(G_next, dtype=float))
    S_next = np.atleast_2d(np.asarray(S_next, dtype=float))
    m = state.m
    W = state.W
    for _ in range(h - 1):
        m = G_next @ m
        W = _sym(G_next @ W @ G_next.T + S_next)
    n = F_next.shape[0]
    loc = F_next @ (G_next @ m)
    scale = state.s_t * _sym(
        np.eye(n) + F_next @ (G_next @ W @ G_next.T + S_next) @ F_next.T
    )
    return StudentTPredictive(dof=state.n_t, loc=loc, scale=scale)


def no_trend_matern_model(locations, kernel: KernelSpec, alpha: float,
                          delta_z: float, n_sigma: float = 1.0,
                          s_sigma: float = 1.0) -> DlmSpec:
    """Trend-free latent-field model: y_t = z_t + eta, z_t = alpha z_{t-1} + w_t,
    w_t ~ N(0, sigma^2 delta_z^2 K), prior z_0 ~ N(0, sigma^2 K)."""
    locations = np.asarray(locations, dtype=float)
    n = len(locations)
    K = corr_matrix(kernel, locations)
    return DlmSpec(
        F=np.eye(n),
        G=alpha * np.eye(n),
        S=delta_z**2 * K,
        n_sigma=n_sigma,
        s_sigma=s_sigma,
        m0=np.zeros(n),
        S0=K.copy(),
    )
