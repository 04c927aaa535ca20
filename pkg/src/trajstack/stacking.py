"""Predictive stacking over grids of conjugate candidate models.

Workflow: split the data into folds, collect each candidate's validation
predictions (posterior predictive means and log densities), choose simplex
weights either by least squares on the means (exact active-set quadratic
program with a KKT certificate) or by maximizing the pooled log score
(monotone multiplicative updates), then refit every candidate on all data
and expose the weighted mixture predictive.  Bayesian model averaging over
the closed-form evidences is available as the baseline weighting.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp, stdtr, gammaincc, gammainccinv

try:  # candidate fits are many small factorizations: BLAS threading only
    # oversubscribes, so it is pinned to one thread inside the fit loops
    from threadpoolctl import threadpool_limits as _blas_limit
except ImportError:  # pragma: no cover - optional dependency
    def _blas_limit(*args, **kwargs):
        return nullcontext()

from . import continuous as _continuous
from . import discrete as _discrete
from .bayes import NigPosterior, StudentTPredictive, t_logpdf_scalar
from .data import TrajectoryDataset
from .errors import (
    ConfigurationError,
    DataValidationError,
    ParameterDomainError,
    TrajstackError,
)

SIMPLEX_TOL = 1e-10


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    """Cross-validation layout: random K-fold or expanding window."""

    scheme: str
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("random_k_fold", "expanding_window"):
            raise ConfigurationError(f"unknown fold scheme {self.scheme!r}")
        if self.k < 2:
            raise ConfigurationError("fold count must be at least 2")


def make_folds(data, plan: FoldPlan) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train, validation) index pairs.

    Random folds partition a permutation, so every index is validated
    exactly once.  Expanding windows cut time-ordered indices into K
    contiguous blocks, each trained on all strictly earlier indices; the
    first block has no training data and is skipped.
    """
    n = data if isinstance(data, (int, np.integer)) else data.n
    if plan.k > n:
        raise ConfigurationError(f"cannot make {plan.k} folds from {n} points")
    if plan.scheme == "random_k_fold":
        rng = np.random.default_rng(plan.seed)
        perm = rng.permutation(n)
        blocks = np.array_split(perm, plan.k)
        all_idx = np.arange(n)
        return [
            (np.setdiff1d(all_idx, np.sort(b)), np.sort(b)) for b in blocks
        ]
    blocks = np.array_split(np.arange(n), plan.k)
    folds = []
    for b in blocks:
        if b[0] == 0:
            continue  # nothing strictly earlier to train on
        folds.append((np.arange(b[0]), b))
    return folds


# ---------------------------------------------------------------------------
# weight solvers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StackingResult:
    """Simplex weights with the achieved objective and fold bookkeeping."""

    weights: np.ndarray
    objective: float
    mode: str
    kkt: dict = field(default_factory=dict, compare=False)
    records: tuple = field(default=(), compare=False)
    dropped: tuple[int, ...] = ()
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if abs(w.sum() - 1.0) > SIMPLEX_TOL or (w < -SIMPLEX_TOL).any():
            raise ParameterDomainError("stacking weights left the simplex")


def _solve_support_qp(H: np.ndarray, c: np.ndarray, support: np.ndarray):
    """Equality-constrained QP on the given support: min a'Ha - 2c'a with
    sum(a)=1.  Returns (a_support, multiplier)."""
    m = len(support)
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = 2.0 * H[np.ix_(support, support)]
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    rhs = np.concatenate([2.0 * c[support], [1.0]])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:m], sol[m]


def stack_means(P: np.ndarray, y: np.ndarray) -> StackingResult:
    """Least-squares stacking: minimize ||y - P a||^2 over the simplex.

    Exact primal active-set solve; a vanishing ridge breaks ties toward
    the minimum-norm (uniform-leaning) optimum.  The returned result
    carries a KKT certificate over the unridged objective.
    """
    P = np.asarray(P, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if P.ndim != 2 or P.shape[0] != len(y):
        raise ConfigurationError("prediction matrix and targets disagree")
    if not np.isfinite(P).all() or not np.isfinite(y).all():
        raise ParameterDomainError("stack_means requires finite inputs")
    n, G = P.shape
    if G == 1:
        obj = float(((y - P[:, 0]) ** 2).sum())
        return StackingResult(np.array([1.0]), obj, "means",
                              kkt={"passed": True, "max_violation": 0.0})
    H = P.T @ P
    c = P.T @ y
    ridge = 1e-10 * max(np.trace(H) / G, 1.0)
    H_r = H + ridge * np.eye(G)

    best_vertex = int(np.argmin(((y[:, None] - P) ** 2).sum(axis=0)))
    a = np.zeros(G)
    a[best_vertex] = 1.0
    support = [best_vertex]
    for _ in range(50 * G + 100):
        idx = np.array(support)
        a_new_s, _mu = _solve_support_qp(H_r, c, idx)
        if (a_new_s >= -1e-13).all():
            a = np.zeros(G)
            a[idx] = np.maximum(a_new_s, 0.0)
            a /= a.sum()
            grad = 2.0 * (H_r @ a - c)
            mu = grad[idx].mean()
            off = [g for g in range(G) if g not in support]
            if not off:
                break
            viol = grad[off] - mu
            worst = int(np.argmin(viol))
            if viol[worst] >= -1e-11 * max(1.0, np.abs(grad).max()):
                break
            support.append(off[worst])
        else:
            a_new = np.zeros(G)
            a_new[idx] = a_new_s
            move = a_new - a
            blocking = [(g, a[g] / (a[g] - a_new[g])) for g in idx
                        if a_new[g] < -1e-13 and a[g] > a_new[g]]
            g_block, alpha = min(blocking, key=lambda kv: kv[1])
            a = np.maximum(a + min(alpha, 1.0) * move, 0.0)
            a[g_block] = 0.0
            a /= a.sum()
            support.remove(g_block)
    weights = np.where(a < 1e-12, 0.0, a)
    weights /= weights.sum()
    objective = float(((y - P @ weights) ** 2).sum())
    kkt = verify_kkt_means(P, y, weights)
    return StackingResult(weights, objective, "means", kkt=kkt)


def verify_kkt_means(P: np.ndarray, y: np.ndarray, weights: np.ndarray,
                     tol: float = 1e-6) -> dict:
    """KKT certificate for the simplex least-squares problem.

    Active candidates must share the gradient value; zero-weight
    candidates must not have a smaller one.
    """
    P = np.asarray(P, dtype=float)
    grad = 2.0 * P.T @ (P @ weights - np.asarray(y, dtype=float))
    scale = max(1.0, float(np.abs(grad).max()))
    active = weights > 1e-9
    mu = grad[active].mean()
    active_spread = float(np.abs(grad[active] - mu).max()) if active.any() else 0.0
    inactive_gap = float((grad[~active] - mu).min()) if (~active).any() else 0.0
    max_violation = max(active_spread, -min(inactive_gap, 0.0)) / scale
    return {"passed": max_violation <= tol, "max_violation": max_violation,
            "multiplier": float(mu)}


def _logscore_newton_on_face(R: np.ndarray, a: np.ndarray,
                             iters: int = 100) -> np.ndarray:
    """Damped Newton ascent of sum_i log(R a)_i over the simplex face spanned
    by the active coordinates of ``a``; coordinates forced to the boundary
    are zeroed.  Returns weights of the same length as ``a``."""
    n = R.shape[0]
    a = a.copy()
    active = a > 0
    for _ in range(iters):
        idx = np.flatnonzero(active)
        if len(idx) <= 1:
            break
        sub = R[:, idx]
        cur = a[idx]
        q = sub @ cur
        invq = 1.0 / q
        g = sub.T @ invq
        grad = g[:-1] - g[-1]
        if np.abs(grad).max() <= 1e-12 * n:
            break
        diff = sub[:, :-1] - sub[:, -1:]
        w = diff * invq[:, None]
        hess = w.T @ w
        ridge = 1e-13 * max(np.trace(hess), 1.0)
        try:
            step = np.linalg.solve(hess + ridge * np.eye(len(grad)), grad)
        except np.linalg.LinAlgError:
            break
        direction = np.append(step, -step.sum())
        f0 = float(np.log(q).sum())
        t = 1.0
        moved = False
        for _ in range(60):
            trial = cur + t * direction
            if trial.min() >= -1e-16:
                trial = np.maximum(trial, 0.0)
                q_t = sub @ trial
                if q_t.min() > 0.0 and float(np.log(q_t).sum()) >= f0:
                    cur = trial / trial.sum()
                    moved = True
                    break
            t /= 2.0
        if not moved:
            break
        a[:] = 0.0
        a[idx] = cur
        dropped = idx[cur <= 1e-15]
        if len(dropped):
            active[dropped] = False
            a[dropped] = 0.0
            a /= a.sum()
    return a


def stack_distributions(L: np.ndarray, max_iter: int = 2000,
                        gap_tol: float = 1e-9) -> StackingResult:
    """Log-score stacking: maximize sum_i log sum_g a_g exp(L_ig) over the
    simplex.

    A monotone multiplicative phase (responsibility averaging) localizes
    the support, then an active-set Newton polish drives the solution to
    optimality.  Concavity gives a certificate: with gradient
    g_h = sum_i p_ih / q_i the optimality gap is bounded by max_h g_h - n,
    and iteration ends once the bound falls below ``gap_tol`` (absolute,
    in log-score units).  -inf entries are hard zero densities; a row with
    no support under every model is a data error.  Ties keep the uniform
    starting point.
    """
    L = np.asarray(L, dtype=float)
    if L.ndim != 2:
        raise ConfigurationError("log-density matrix must be 2-D")
    if np.isnan(L).any() or (L == np.inf).any():
        raise ParameterDomainError("log densities must be finite or -inf")
    n, G = L.shape
    dead_rows = np.flatnonzero(np.all(L == -np.inf, axis=1))
    if dead_rows.size:
        raise DataValidationError(
            f"validation row {int(dead_rows[0])} has zero density under every model"
        )
    if G == 1:
        return StackingResult(np.array([1.0]), float(L[:, 0].sum()), "distributions")

    shift = L.max(axis=1)
    dens = np.exp(L - shift[:, None])  # rows peak at 1

    def objective(weights):
        with np.errstate(divide="ignore"):
            return float(shift.sum() + np.log(dens @ weights).sum())

    a = np.full(G, 1.0 / G)
    gap = np.inf
    for _ in range(max_iter):
        q = dens @ a
        g = dens.T @ (1.0 / q)
        gap = float(g.max()) - n
        if gap <= gap_tol:
            break
        a = a * g / n
        a = np.maximum(a, 0.0)
        a /= a.sum()

    if gap > gap_tol:
        # active-set Newton polish on the localized support
        for _ in range(4 * G):
            support = np.flatnonzero(a > 1e-12)
            sub = _logscore_newton_on_face(dens[:, support], a[support] / a[support].sum())
            a = np.zeros(G)
            live = sub > 0
            a[support[live]] = sub[live] / sub[live].sum()
            q = dens @ a
            g = dens.T @ (1.0 / q)
            gap = float(g.max()) - n
            if gap <= gap_tol:
                break
            worst = int(np.argmax(g))
            if a[worst] == 0.0:
                a[worst] = 1e-6
                a /= a.sum()

    snapped = np.where(a < 1e-10, 0.0, a)
    snapped /= snapped.sum()
    if objective(snapped) >= objective(a) - 1e-12 * max(1.0, abs(objective(a))):
        a = snapped
    return StackingResult(a, objective(a), "distributions")


def bma_weights(log_evidences, prior=None) -> np.ndarray:
    """Posterior model probabilities from log evidences (log-sum-exp safe)."""
    log_ev = np.asarray(log_evidences, dtype=float)
    if not np.isfinite(log_ev).all():
        raise ParameterDomainError("log evidences must be finite")
    if prior is None:
        log_prior = np.zeros(len(log_ev))
    else:
        prior = np.asarray(prior, dtype=float)
        if abs(prior.sum() - 1.0) > 1e-9 or (prior < 0).any():
            raise ParameterDomainError("model prior must lie on the simplex")
        with np.errstate(divide="ignore"):
            log_prior = np.log(prior)
    score = log_ev + log_prior
    return np.exp(score - logsumexp(score))


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------


def _t_cdf(x: float, dof: float, loc: float, var: float) -> float:
    sd = math.sqrt(var) if var > 0 else 0.0
    if sd == 0.0:
        return 1.0 if x >= loc else 0.0
    return float(stdtr(dof, (x - loc) / sd))


@dataclass(frozen=True)
class MixturePredictive:
    """Weighted mixture of univariate Student-t laws (one prediction point)."""

    weights: np.ndarray
    dofs: np.ndarray
    locs: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if abs(w.sum() - 1.0) > 1e-8 or (w < -SIMPLEX_TOL).any():
            raise ParameterDomainError("mixture weights must lie on the simplex")

    @classmethod
    def from_components(cls, weights, components: Sequence[StudentTPredictive],
                        coord: int = 0) -> "MixturePredictive":
        dofs, locs, vars_ = [], [], []
        for comp in components:
            dof, loc, var = comp.marginals()
            dofs.append(dof)
            locs.append(loc[coord])
            vars_.append(var[coord])
        return cls(np.asarray(weights, float), np.asarray(dofs),
                   np.asarray(locs), np.asarray(vars_))

    def logpdf(self, x: float) -> float:
        parts = []
        for w, dof, loc, var in zip(self.weights, self.dofs, self.locs, self.vars):
            if w == 0.0:
                continue
            parts.append(math.log(w) + float(t_logpdf_scalar(x, dof, loc, var)))
        return float(logsumexp(parts))

    def mean(self) -> float:
        if (self.dofs[self.weights > 0] <= 1).any():
            raise ParameterDomainError("mixture mean needs every dof > 1")
        return float(self.weights @ self.locs)

    def variance(self) -> float:
        live = self.weights > 0
        if (self.dofs[live] <= 2).any():
            raise ParameterDomainError("mixture variance needs every dof > 2")
        comp_var = self.vars * self.dofs / (self.dofs - 2.0)
        mu = self.mean()
        return float(self.weights @ (comp_var + (self.locs - mu) ** 2))

    def cdf(self, x: float) -> float:
        return float(sum(
            w * _t_cdf(x, dof, loc, var)
            for w, dof, loc, var in zip(self.weights, self.dofs, self.locs, self.vars)
            if w > 0
        ))

    def quantile(self, q: float, tol: float = 1e-10) -> float:
        """Monotone bisection on the mixture CDF (no moments needed)."""
        if not 0.0 < q < 1.0:
            raise ParameterDomainError("quantile level must be inside (0, 1)")
        sds = np.sqrt(np.maximum(self.vars, 1e-30))
        lo = float((self.locs - 50.0 * sds).min())
        hi = float((self.locs + 50.0 * sds).max())
        while self.cdf(lo) > q:
            lo -= (hi - lo)
        while self.cdf(hi) < q:
            hi += (hi - lo)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) < q:
                lo = mid
            else:
                hi = mid
            if hi - lo <= tol * max(1.0, abs(mid)):
                break
        return 0.5 * (lo + hi)


def stacked_mixture(weights, components: Sequence[StudentTPredictive],
                    coord: int = 0) -> MixturePredictive:
    """Mixture predictive from per-candidate Student-t components."""
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(components):
        raise ConfigurationError("one weight per component is required")
    dims = {c.dim for c in components}
    if len(dims) != 1:
        raise ConfigurationError("components must share their dimension")
    return MixturePredictive.from_components(weights, components, coord=coord)


@dataclass(frozen=True)
class SigmaSquaredMixture:
    """Stacked posterior of the noise variance: mixture of inverse gammas."""

    weights: np.ndarray
    a_stars: np.ndarray
    b_stars: np.ndarray

    def mean(self) -> float:
        if (self.a_stars[self.weights > 0] <= 1).any():
            raise ParameterDomainError("mixture mean needs every a_star > 1")
        return float(self.weights @ (self.b_stars / (self.a_stars - 1.0)))

    def cdf(self, x: float) -> float:
        if x <= 0:
            return 0.0
        return float(sum(
            w * gammaincc(a, b / x)
            for w, a, b in zip(self.weights, self.a_stars, self.b_stars) if w > 0
        ))

    def quantile(self, q: float) -> float:
        if not 0.0 < q < 1.0:
            raise ParameterDomainError("quantile level must be inside (0, 1)")
        singles = [b / gammainccinv(a, q) for a, b in zip(self.a_stars, self.b_stars)]
        lo, hi = min(singles) * 0.5, max(singles) * 2.0 + 1e-12
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) < q:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        alpha = (1.0 - level) / 2.0
        return self.quantile(alpha), self.quantile(1.0 - alpha)


# ---------------------------------------------------------------------------
# end-to-end stacking runs
# ---------------------------------------------------------------------------

CandidateSpec = Union[_discrete.DiscreteTrajSpec, _continuous.ContinuousTrajSpec,
                      _discrete.NsdlmSpec]


def candidate_grid(specs: Sequence[CandidateSpec]) -> tuple[CandidateSpec, ...]:
    """Validate a candidate collection: non-empty, homogeneous, distinct."""
    specs = tuple(specs)
    if not specs:
        raise ConfigurationError("candidate grid is empty")
    kinds = {type(s) for s in specs}
    if len(kinds) != 1:
        raise ConfigurationError("candidate grid must hold one model family")
    if len(set(specs)) != len(specs):
        raise ConfigurationError("candidate grid entries must be distinct")
    return specs


def continuous_grid(phi1s, phi2s, xis, delta_betas, delta_zs,
                    a_sigma: float = 2.0, b_sigma: float = 2.0):
    """Cross product of continuous-model hyperparameters."""
    return candidate_grid([
        _continuous.ContinuousTrajSpec(delta_beta=db, delta_z=dz, phi1=p1,
                                       phi2=p2, xi=xi, a_sigma=a_sigma,
                                       b_sigma=b_sigma)
        for p1 in phi1s for p2 in phi2s for xi in xis
        for db in delta_betas for dz in delta_zs
    ])


def discrete_grid(phis, nus, delta_betas, delta_zs,
                  a_sigma: float = 2.0, b_sigma: float = 2.0):
    """Cross product of discrete-model hyperparameters (Matern kernel)."""
    from .kernels import KernelSpec

    return candidate_grid([
        _discrete.DiscreteTrajSpec(delta_beta=db, delta_z=dz,
                                   kernel=KernelSpec.matern(phi, nu),
                                   a_sigma=a_sigma, b_sigma=b_sigma)
        for phi in phis for nu in nus for db in delta_betas for dz in delta_zs
    ])


def _fit_and_predict(spec, train: TrajectoryDataset, times, locations, X_new):
    """(dof, means, vars, fit) for one candidate on one training set."""
    if isinstance(spec, _continuous.ContinuousTrajSpec):
        fit = _continuous.fit_continuous(train, spec)
        pred = _continuous.predict_points_continuous(fit, times, locations, X_new,
                                                     marginal_only=True)
        dof, loc, var = pred.y.marginals()
        return dof, loc, var, fit
    if isinstance(spec, _discrete.DiscreteTrajSpec):
        fit = _discrete.fit_discrete(train, spec)
        dof, loc, var = _discrete.predict_epochs_discrete(fit, X_new, locations)
        return dof, loc, var, fit
    if isinstance(spec, _discrete.NsdlmSpec):
        fit = _discrete.fit_nsdlm(train, spec)
        dof, loc, var = _discrete.predict_epochs_nsdlm(fit, X_new)
        return dof, loc, var, fit
    raise ConfigurationError(f"unsupported candidate spec {type(spec).__name__}")


def _evidence_of(fit) -> float:
    from .bayes import evidence_from_posterior

    spec = fit.spec
    return evidence_from_posterior(fit.post, spec.a_sigma, spec.b_sigma)


@dataclass(frozen=True)
class FoldRecord:
    fold: int
    valid_idx: np.ndarray
    means: np.ndarray      # (n_valid, G) with NaN for failed candidates
    logdens: np.ndarray


@dataclass(frozen=True)
class FinalPredictions:
    """Per-candidate predictive marginals at the requested points."""

    dofs: np.ndarray       # (G,)
    means: np.ndarray      # (n0, G)
    vars: np.ndarray       # (n0, G)
    z_means: Optional[np.ndarray] = None
    z_vars: Optional[np.ndarray] = None

    def mixtures(self, weights) -> list[MixturePredictive]:
        weights = np.asarray(weights, dtype=float)
        return [
            MixturePredictive(weights, self.dofs, self.means[i], self.vars[i])
            for i in range(self.means.shape[0])
        ]

    def stacked_mean(self, weights) -> np.ndarray:
        return self.means @ np.asarray(weights, dtype=float)

    def stacked_z_mean(self, weights) -> np.ndarray:
        if self.z_means is None:
            raise ConfigurationError("latent predictions were not collected")
        return self.z_means @ np.asarray(weights, dtype=float)


@dataclass(frozen=True)
class StackingRun:
    """Everything a stacking pass produces.

    ``final``, ``posteriors`` and ``sigma2`` are indexed by the surviving
    candidates (``keep``); weight vectors cover the full grid with zeros at
    dropped entries.
    """

    labels: tuple[str, ...]
    means: Optional[StackingResult]
    distributions: Optional[StackingResult]
    bma: Optional[np.ndarray]
    log_evidences: Optional[np.ndarray]
    dropped: tuple[int, ...]
    keep: tuple[int, ...]
    records: tuple[FoldRecord, ...]
    final: Optional[FinalPredictions]
    sigma2: Optional[SigmaSquaredMixture]
    posteriors: tuple[NigPosterior, ...] = field(default=(), repr=False)
    fitted_signals: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def weights_for(self, mode: str) -> np.ndarray:
        if mode == "bma":
            if self.bma is None:
                raise ConfigurationError("model-averaging weights were not computed")
            return self.bma
        result = {"means": self.means, "distributions": self.distributions}.get(mode)
        if result is None:
            raise ConfigurationError(f"mode {mode!r} was not solved in this run")
        return result.weights

    def _kept_weights(self, mode: str) -> np.ndarray:
        w = self.weights_for(mode)[list(self.keep)]
        return w / w.sum()

    def final_mixtures(self, mode: str) -> list[MixturePredictive]:
        if self.final is None:
            raise ConfigurationError("no prediction points were requested")
        return self.final.mixtures(self._kept_weights(mode))

    def stacked_mean(self, mode: str) -> np.ndarray:
        if self.final is None:
            raise ConfigurationError("no prediction points were requested")
        return self.final.stacked_mean(self._kept_weights(mode))

    def stacked_z_mean(self, mode: str) -> np.ndarray:
        if self.final is None:
            raise ConfigurationError("no prediction points were requested")
        return self.final.stacked_z_mean(self._kept_weights(mode))

    def sigma2_mixture(self, mode: str) -> SigmaSquaredMixture:
        if self.sigma2 is None:
            raise ConfigurationError("no candidate posteriors survived")
        return SigmaSquaredMixture(weights=self._kept_weights(mode),
                                   a_stars=self.sigma2.a_stars,
                                   b_stars=self.sigma2.b_stars)

    def stacked_fitted_signal(self, mode: str) -> np.ndarray:
        """Weighted posterior-mean signal at the observed points."""
        if not self.fitted_signals:
            raise ConfigurationError("fitted signals were not collected")
        stacked = np.stack(self.fitted_signals, axis=1)
        return stacked @ self._kept_weights(mode)


def run_stacking(data: TrajectoryDataset, grid, plan: FoldPlan,
                 mode: str = "both", predict_points=None,
                 collect_latent: bool = False, threads: int = 1,
                 compute_bma: bool = True,
                 exact_final_scale: bool = False) -> StackingRun:
    """Fit candidates per fold, solve stacking weights, refit on all data.

    ``predict_points`` is an optional (times, locations, X) triple for the
    final mixture predictive.  Candidates that fail numerically on any fold
    are dropped with a warning and the weight problem is solved over the
    survivors.  Deterministic for a fixed plan seed, also under threads.
    """
    if mode not in ("means", "distributions", "both"):
        raise ConfigurationError(f"unknown stacking mode {mode!r}")
    grid = candidate_grid(grid)
    obs = data.observed()
    folds = make_folds(obs, plan)
    G = len(grid)
    labels = tuple(spec.label() for spec in grid)

    failures: dict[int, str] = {}
    if isinstance(grid[0], _continuous.ContinuousTrajSpec):
        with _blas_limit(limits=1, user_api="blas"):
            batched = _continuous.batch_fold_predictions(obs, grid, folds)
        fold_means = [means for means, _, _ in batched]
        fold_logd = [logd for _, logd, _ in batched]
        for _, _, fold_failures in batched:
            for g, why in fold_failures.items():
                failures.setdefault(g, why)
    else:
        tasks = []
        for f, (tr, va) in enumerate(folds):
            train = obs.subset(tr)
            times = obs.t[va]
            locs = obs.locations[va]
            x_new = obs.X[va]
            for g, spec in enumerate(grid):
                tasks.append((f, g, spec, train, times, locs, x_new))

        def eval_task(task):
            f, g, spec, train, times, locs, x_new = task
            try:
                dof, loc, var, _ = _fit_and_predict(spec, train, times, locs, x_new)
                return f, g, dof, loc, var, None
            except TrajstackError as exc:
                return f, g, None, None, None, exc

        with _blas_limit(limits=1, user_api="blas"):
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    outcomes = list(pool.map(eval_task, tasks))
            else:
                outcomes = [eval_task(t) for t in tasks]

        fold_means = [np.full((len(va), G), np.nan) for _, va in folds]
        fold_logd = [np.full((len(va), G), np.nan) for _, va in folds]
        for f, g, dof, loc, var, err in outcomes:
            if err is not None:
                failures.setdefault(g, str(err))
                continue
            fold_means[f][:, g] = loc
            fold_logd[f][:, g] = t_logpdf_scalar(obs.y[folds[f][1]], dof, loc, var)

    dropped = tuple(sorted(failures))
    for g, why in failures.items():
        warnings.warn(f"candidate {labels[g]} dropped: {why}", stacklevel=2)
    keep = np.array([g for g in range(G) if g not in failures], dtype=int)
    if keep.size == 0:
        raise ConfigurationError("every candidate failed during cross-validation")

    records = tuple(
        FoldRecord(fold=f, valid_idx=folds[f][1], means=fold_means[f],
                   logdens=fold_logd[f])
        for f in range(len(folds))
    )
    P = np.vstack([r.means for r in records])[:, keep]
    L = np.vstack([r.logdens for r in records])[:, keep]
    y_valid = np.concatenate([obs.y[r.valid_idx] for r in records])

    def expand(result: StackingResult, mode_name: str) -> StackingResult:
        full = np.zeros(G)
        full[keep] = result.weights
        return StackingResult(full, result.objective, mode_name, kkt=result.kkt,
                              records=records, dropped=dropped, labels=labels)

    means_result = expand(stack_means(P, y_valid), "means") \
        if mode in ("means", "both") else None
    dist_result = expand(stack_distributions(L), "distributions") \
        if mode in ("distributions", "both") else None

    # final refits on all observed data
    final_fits: list = [None] * G
    with _blas_limit(limits=1, user_api="blas"):
        for g in keep:
            final_fits[g] = _fit_and_predict_final(grid[g], obs)
    log_ev = None
    bma = None
    if compute_bma:
        log_ev = np.full(G, -np.inf)
        for g in keep:
            log_ev[g] = _evidence_of(final_fits[g])
        bma = np.zeros(G)
        bma[keep] = bma_weights(log_ev[keep])

    sigma2 = SigmaSquaredMixture(
        weights=(dist_result or means_result).weights[keep] if (dist_result or means_result) else None,
        a_stars=np.array([final_fits[g].post.a_star for g in keep]),
        b_stars=np.array([final_fits[g].post.b_star for g in keep]),
    ) if keep.size else None

    final = None
    if predict_points is not None:
        times0, locs0, x0 = predict_points
        dofs = np.empty(len(keep))
        means0 = np.empty((len(np.atleast_1d(times0)), len(keep)))
        vars0 = np.empty_like(means0)
        z_means0 = np.empty_like(means0) if collect_latent else None
        z_vars0 = np.empty_like(means0) if collect_latent else None
        for col, g in enumerate(keep):
            dof, loc, var, z_loc, z_var = _predict_final(final_fits[g], times0,
                                                         locs0, x0,
                                                         exact=exact_final_scale)
            dofs[col] = dof
            means0[:, col] = loc
            vars0[:, col] = var
            if collect_latent:
                z_means0[:, col] = z_loc
                z_vars0[:, col] = z_var
        final = FinalPredictions(dofs=dofs, means=means0, vars=vars0,
                                 z_means=z_means0, z_vars=z_vars0)

    posteriors = tuple(final_fits[g].post for g in keep)
    fitted = tuple(_fitted_signal_of(final_fits[g], obs) for g in keep)
    return StackingRun(labels=labels, means=means_result,
                       distributions=dist_result, bma=bma, log_evidences=log_ev,
                       dropped=dropped, keep=tuple(int(g) for g in keep),
                       records=records, final=final, sigma2=sigma2,
                       posteriors=posteriors, fitted_signals=fitted)


def _fitted_signal_of(fit, obs: TrajectoryDataset) -> np.ndarray:
    if isinstance(fit, _continuous.FittedContinuous):
        return _continuous.fitted_signal(fit)
    if isinstance(fit, _discrete.FittedDiscrete):
        return _discrete.fitted_signal(fit, obs)
    return _discrete.fitted_signal_nsdlm(fit, obs)


def _fit_and_predict_final(spec, obs: TrajectoryDataset):
    if isinstance(spec, _continuous.ContinuousTrajSpec):
        return _continuous.fit_continuous(obs, spec)
    if isinstance(spec, _discrete.DiscreteTrajSpec):
        return _discrete.fit_discrete(obs, spec)
    if isinstance(spec, _discrete.NsdlmSpec):
        return _discrete.fit_nsdlm(obs, spec)
    raise ConfigurationError(f"unsupported candidate spec {type(spec).__name__}")


def _predict_final(fit, times, locations, X_new, exact: bool = False):
    if isinstance(fit, _continuous.FittedContinuous):
        pred = _continuous.predict_points_continuous(fit, times, locations, X_new,
                                                     marginal_only=True,
                                                     exact_scale=exact)
        dof, loc, var = pred.y.marginals()
        _, z_loc, z_var = pred.z.marginals()
        return dof, loc, var, z_loc, z_var
    if isinstance(fit, _discrete.FittedDiscrete):
        dof, loc, var = _discrete.predict_epochs_discrete(fit, X_new, locations)
        sol, resid = _discrete._kriging_parts(fit, np.atleast_2d(locations))
        z_loc = sol.T @ fit.z_last()
        z_var = (fit.post.b_star / fit.post.a_star) * fit.spec.delta_z**2 * resid
        return dof, loc, var, z_loc, z_var
    dof, loc, var = _discrete.predict_epochs_nsdlm(fit, X_new)
    zeros = np.zeros_like(loc)
    return dof, loc, var, zeros, zeros
