"""Empirical checks of the asymptotic behavior of the latent-field model.

``variance_term_EA`` evaluates the closed-form variance component of the
latent-process prediction error at a new site after t filtering epochs:

    E_A = sigma*^2 ( delta'^2 h(chi, s0) + g(chi, s0) )
    h   = 1 - k' K^-1 k
    g   = (K^-1 k)' R_t (R_t + I)^-2 R_t (K^-1 k)

with the recursion R_t = alpha^2 W_{t-1} + delta'^2 K', W_t = R_t - R_t
(R_t+I)^-1 R_t started at W_0 = K'.  When the outer and recursion kernels
coincide everything commutes, so large-n cases run in the eigenbasis of K.

``sigma_concentration_check`` fits the trend-free latent-field model on
matched simulations over growing n and reports how the posterior of the
noise scale tightens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import gammainccinv

from .errors import ConfigurationError, ParameterDomainError
from .kernels import KernelSpec, chol_with_jitter, corr_matrix, cross_corr
from .simulate import stream


@dataclass(frozen=True)
class VarianceTermInput:
    """Inputs of the variance term: sites, target, filter parameters.

    ``kernel`` drives both the recursion and the kriging weights;
    ``kernel_true`` overrides the kriging kernel for the asymmetric reading.
    """

    locations: np.ndarray
    target: np.ndarray
    alpha: float
    delta_z_prime: float
    kernel: KernelSpec
    sigma_star: float
    epoch: int
    kernel_true: Optional[KernelSpec] = None

    def __post_init__(self):
        locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "target",
                           np.asarray(self.target, dtype=float).reshape(2))
        if self.epoch < 1:
            raise ConfigurationError("epoch must be at least 1")
        if self.delta_z_prime <= 0 or self.sigma_star <= 0:
            raise ParameterDomainError("scales must be positive")


def variance_term_EA(inp: VarianceTermInput, method: str = "auto") -> float:
    """Closed-form variance component at the target site.

    ``method``: "dense" runs the literal matrix recursion, "eigen" the
    equivalent spectral recursion (matched kernels only), "auto" picks.
    """
    matched = inp.kernel_true is None or inp.kernel_true == inp.kernel
    if method == "auto":
        method = "eigen" if (matched and len(inp.locations) > 64) else "dense"
    if method == "eigen" and not matched:
        raise ConfigurationError("eigen method needs matched kernels")

    k_true = inp.kernel_true or inp.kernel
    k_vec = cross_corr(k_true, inp.locations, inp.target[None, :])[:, 0]
    gram_true = corr_matrix(k_true, inp.locations)
    d2 = inp.delta_z_prime**2
    a2 = inp.alpha**2

    if method == "eigen":
        lam, vecs = np.linalg.eigh(gram_true)
        lam = np.maximum(lam, 1e-12)
        u = vecs.T @ k_vec
        w = lam.copy()
        for _ in range(inp.epoch):
            r = a2 * w + d2 * lam
            w = r - r**2 / (r + 1.0)
        h = 1.0 - float((u**2 / lam).sum())
        g = float((u**2 * r**2 / ((r + 1.0) ** 2 * lam**2)).sum())
        return inp.sigma_star**2 * (d2 * max(h, 0.0) + g)

    gram_prime = gram_true if matched else corr_matrix(inp.kernel, inp.locations)
    _, chol_true, _ = chol_with_jitter(gram_true, what="site gram")
    v = cho_solve((chol_true, True), k_vec)
    h = 1.0 - float(k_vec @ v)
    w = gram_prime.copy()
    n = len(w)
    for _ in range(inp.epoch):
        r = a2 * w + d2 * gram_prime
        q = r + np.eye(n)
        _, chol_q, _ = chol_with_jitter(q, what="innovation matrix")
        w = r - r @ cho_solve((chol_q, True), r)
        w = (w + w.T) / 2.0
    u = np.linalg.solve(q, r @ v)
    g = float(u @ u)
    return inp.sigma_star**2 * (d2 * max(h, 0.0) + g)


def variance_term_profile(inp: VarianceTermInput, epochs) -> dict[int, float]:
    """The variance term at several epochs, sharing one eigendecomposition.

    Requires matched kernels (the eigen recursion).  ``inp.epoch`` is
    ignored in favor of the requested list.
    """
    if inp.kernel_true is not None and inp.kernel_true != inp.kernel:
        raise ConfigurationError("profile evaluation needs matched kernels")
    epochs = sorted(set(int(t) for t in epochs))
    if not epochs or epochs[0] < 1:
        raise ConfigurationError("epochs must be positive")
    gram = corr_matrix(inp.kernel, inp.locations)
    k_vec = cross_corr(inp.kernel, inp.locations, inp.target[None, :])[:, 0]
    lam, vecs = np.linalg.eigh(gram)
    lam = np.maximum(lam, 1e-12)
    u = vecs.T @ k_vec
    h = max(1.0 - float((u**2 / lam).sum()), 0.0)
    d2 = inp.delta_z_prime**2
    a2 = inp.alpha**2
    out = {}
    w = lam.copy()
    r = None
    for t in range(1, epochs[-1] + 1):
        r = a2 * w + d2 * lam
        w = r - r**2 / (r + 1.0)
        if t in epochs:
            g = float((u**2 * r**2 / ((r + 1.0) ** 2 * lam**2)).sum())
            out[t] = inp.sigma_star**2 * (d2 * h + g)
    return out


@dataclass(frozen=True)
class ConcentrationRow:
    n: int
    median_posterior_mean: float
    median_interval_width: float
    replicates: int


@dataclass(frozen=True)
class ConcentrationReport:
    rows: tuple[ConcentrationRow, ...]
    level: float
    widths_decreasing: Optional[bool]

    def csv_rows(self) -> list[dict]:
        return [
            {"n": r.n, "median_posterior_mean": r.median_posterior_mean,
             "median_interval_width": r.median_interval_width,
             "replicates": r.replicates}
            for r in self.rows
        ]


def _ig_interval_width(a: float, b: float, level: float) -> float:
    lo_q = (1.0 - level) / 2.0
    lo = b / gammainccinv(a, lo_q)
    hi = b / gammainccinv(a, 1.0 - lo_q)
    return float(abs(lo - hi))


def sigma_concentration_check(n_list, replicates: int, seed: int,
                              kernel: KernelSpec = None, alpha: float = 1.0,
                              delta_z: float = 1.0, n_epochs: int = 4,
                              sigma_star: float = 1.0, level: float = 0.95,
                              fit_kernel: KernelSpec = None,
                              fit_delta_z: float = None) -> ConcentrationReport:
    """Posterior concentration of the noise scale on matched simulations.

    For each n, locations are scattered uniformly on the unit square and
    the trend-free latent-field model is filtered over ``n_epochs``.
    ``fit_kernel``/``fit_delta_z`` let the filter run at deliberately
    mis-specified (equivalence-paired) values.  The verdict reports whether
    the median credible-interval width shrinks monotonically in n; it is
    omitted for degenerate designs (a single n or a single replicate).
    """
    kernel = kernel or KernelSpec.matern(0.5, 1.0)
    fit_kernel = fit_kernel or kernel
    fit_delta_z = delta_z if fit_delta_z is None else fit_delta_z
    n_list = list(n_list)
    rows = []
    for n in n_list:
        means, widths = [], []
        for rep in range(replicates):
            loc_rng = stream(seed + 1000 * rep, "locations")
            locations = loc_rng.uniform(0.0, 1.0, size=(n, 2))
            state_rng = stream(seed + 1000 * rep, "states")
            noise_rng = stream(seed + 1000 * rep, "noise")

            gram_star = corr_matrix(kernel, locations)
            _, chol_star, _ = chol_with_jitter(gram_star, what="site gram")
            z = chol_star @ state_rng.standard_normal(n) * sigma_star
            gram_fit = gram_star if fit_kernel == kernel else \
                corr_matrix(fit_kernel, locations)
            lam, vecs = np.linalg.eigh(gram_fit)
            lam = np.maximum(lam, 1e-12)

            # filter in the eigenbasis of the fitted kernel
            m = np.zeros(n)
            w = lam.copy()
            n_t = 1.0
            ns_t = 1.0
            d2 = fit_delta_z**2
            for _ in range(n_epochs):
                z = alpha * z + sigma_star * delta_z * (
                    chol_star @ state_rng.standard_normal(n))
                y = z + sigma_star * noise_rng.standard_normal(n)
                yt = vecs.T @ y
                r = alpha**2 * w + d2 * lam
                q = r + 1.0
                f = alpha * m
                innov = yt - f
                m = f + (r / q) * innov
                w = r - r**2 / q
                n_t += n
                ns_t += float((innov**2 / q).sum())
            a_post, b_post = n_t / 2.0, ns_t / 2.0
            means.append(b_post / (a_post - 1.0))
            widths.append(_ig_interval_width(a_post, b_post, level))
        rows.append(ConcentrationRow(
            n=int(n), median_posterior_mean=float(np.median(means)),
            median_interval_width=float(np.median(widths)),
            replicates=replicates,
        ))
    verdict = None
    if len(n_list) >= 2 and replicates >= 2:
        seq = [r.median_interval_width for r in rows]
        verdict = all(b < a for a, b in zip(seq, seq[1:]))
    return ConcentrationReport(rows=tuple(rows), level=level,
                               widths_decreasing=verdict)
