"""Evaluation metrics: squared errors, relative errors, log scores, and the
deviance/widely-applicable information criteria computed from exact
conjugate posterior draws (no chains, no convergence diagnostics)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, ParameterDomainError


@dataclass
class MetricReport:
    """Named metrics with their replicate-level values.

    Non-finite replicate values are kept but flagged, so summaries never
    silently average over failures.
    """

    values: dict = field(default_factory=dict)

    def add(self, name: str, value: float) -> None:
        self.values.setdefault(name, []).append(float(value))

    def replicates(self, name: str) -> list:
        return list(self.values[name])

    def summary(self, how: str = "mean") -> dict:
        out = {}
        for name, vals in self.values.items():
            arr = np.asarray(vals, dtype=float)
            finite = np.isfinite(arr)
            stat = float(getattr(np, how)(arr[finite])) if finite.any() else math.nan
            out[name] = {"value": stat, "replicates": len(arr),
                         "flagged": int((~finite).sum())}
        return out

    def rows(self, how: str = "mean") -> list:
        return [[name, info["value"], info["replicates"], info["flagged"]]
                for name, info in self.summary(how).items()]


def _aligned(a, b):
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if len(a) != len(b):
        raise ParameterDomainError("prediction and truth lengths disagree")
    if len(a) == 0:
        raise ParameterDomainError("need at least one value")
    return a, b


def mspe(pred_means, truths) -> float:
    """Mean squared prediction error."""
    p, t = _aligned(pred_means, truths)
    return float(((p - t) ** 2).mean())


def mse_z(pred_means, truths) -> float:
    """Mean squared error of the latent-process estimates."""
    return mspe(pred_means, truths)


def rmse_relative(estimates, truths) -> float:
    """Relative mean squared error: sum (est-true)^2 / sum true^2.

    Scalars use the single-parameter form (est-true)^2 / true^2.
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape:
        raise ParameterDomainError("estimate and truth shapes disagree")
    denom = float((tru**2).sum())
    if denom <= 0.0:
        raise ParameterDomainError("relative error undefined for all-zero truth")
    return float(((est - tru) ** 2).sum()) / denom


def mlpd(log_densities) -> float:
    """Mean log predictive density.

    -inf entries (zero predictive density) are excluded with a warning that
    reports how many were dropped; NaN or +inf entries are invalid.
    """
    ld = np.asarray(log_densities, dtype=float).reshape(-1)
    if len(ld) == 0:
        raise ParameterDomainError("need at least one log density")
    if np.isnan(ld).any() or (ld == np.inf).any():
        raise ParameterDomainError("log densities must be finite or -inf")
    bad = ld == -np.inf
    if bad.any():
        warnings.warn(f"mlpd: excluded {int(bad.sum())} zero-density points",
                      stacklevel=2)
        ld = ld[~bad]
        if len(ld) == 0:
            raise ParameterDomainError("every point had zero predictive density")
    return float(ld.mean())


def dic(theta_draws, sigma2_draws, log_lik: Callable, point_estimate: str = "mean") -> float:
    """Deviance information criterion.

    ``log_lik(theta, sigma2)`` returns the observed-data log likelihood.
    The plug-in uses the posterior mean of the draws (the documented
    choice) and the effective parameter count is
    p_D = 2 (log p(y|theta_bar) - mean_s log p(y|theta_s)).
    """
    theta_draws = np.asarray(theta_draws, dtype=float)
    sigma2_draws = np.asarray(sigma2_draws, dtype=float).reshape(-1)
    if theta_draws.ndim != 2 or len(theta_draws) != len(sigma2_draws):
        raise ConfigurationError("draw arrays must align as (S, dim) and (S,)")
    if len(sigma2_draws) < 100:
        raise ConfigurationError("DIC needs at least 100 posterior draws")
    if point_estimate != "mean":
        raise ConfigurationError("only the posterior-mean plug-in is supported")
    theta_bar = theta_draws.mean(axis=0)
    sigma2_bar = float(sigma2_draws.mean())
    lp_bar = float(log_lik(theta_bar, sigma2_bar))
    mean_lp = float(np.mean([
        log_lik(theta_draws[s], float(sigma2_draws[s]))
        for s in range(len(sigma2_draws))
    ]))
    p_d = 2.0 * (lp_bar - mean_lp)
    return -2.0 * lp_bar + 2.0 * p_d


def waic(pointwise_loglik) -> float:
    """Widely applicable information criterion from a (draws x points)
    pointwise log-likelihood matrix.

    lppd = sum_i log mean_s exp(L_si) (log-sum-exp stabilized),
    p_W = sum_i var_s(L_si) with the unbiased variance.
    """
    L = np.asarray(pointwise_loglik, dtype=float)
    if L.ndim != 2:
        raise ConfigurationError("pointwise log likelihood must be (draws, points)")
    S = L.shape[0]
    if S < 2:
        raise ConfigurationError("WAIC needs at least 2 posterior draws")
    lppd = float((logsumexp(L, axis=0) - math.log(S)).sum())
    p_w = float(L.var(axis=0, ddof=1).sum())
    return -2.0 * (lppd - p_w)


def gaussian_pointwise_loglik(signal_draws, sigma2_draws, y) -> np.ndarray:
    """(S, n) matrix of per-point Gaussian measurement log likelihoods
    evaluated at posterior draws of the fitted signal and noise scale."""
    signal_draws = np.asarray(signal_draws, dtype=float)
    sigma2_draws = np.asarray(sigma2_draws, dtype=float).reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    if signal_draws.shape[0] != sigma2_draws.shape[0]:
        raise ConfigurationError("draw counts disagree")
    return (
        -0.5 * np.log(2.0 * math.pi * sigma2_draws)
        - 0.5 * (y - signal_draws) ** 2 / sigma2_draws
    )
