"""Independent oracles shared by the test suite.

Everything here recomputes expected values from first principles (grids,
importance sampling, quadrature, brute-force conditioning) without reusing
the library's solution paths.
"""

import math

import numpy as np
from scipy.linalg import solve_triangular


def is_oracle_moments(X, y, S, a_prior, b_prior, n_draws=80_000, seed=0):
    """Self-normalized importance-sampling moments of (theta, sigma2).

    Target density (up to a constant):  N(y; X theta, sigma2 S) *
    InvGamma(sigma2; a, b), i.e. the full augmented system including the
    prior-absorbing rows.  Returns means, variances and their MC standard
    errors.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    S = np.asarray(S, float)
    rows, dim = X.shape
    rng = np.random.default_rng(seed)
    L_S = np.linalg.cholesky(S)
    Xw = solve_triangular(L_S, X, lower=True)
    yw = solve_triangular(L_S, y, lower=True)
    logdet_S = 2.0 * np.log(np.diag(L_S)).sum()

    # pilot proposal from ordinary least squares on the whitened system
    theta_hat, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ theta_hat
    s2_hat = max(float(resid @ resid) / max(rows, 1), b_prior / a_prior, 1e-3)
    cov_hat = s2_hat * np.linalg.inv(Xw.T @ Xw)

    def run(theta_loc, theta_cov, logs2_loc, logs2_sd, n):
        L_q = np.linalg.cholesky(theta_cov * 9.0)
        z = rng.standard_normal((n, dim))
        theta = theta_loc + z @ L_q.T
        logq_theta = -0.5 * (z**2).sum(axis=1) - np.log(np.diag(L_q)).sum()
        logs2 = logs2_loc + logs2_sd * rng.standard_normal(n)
        s2 = np.exp(logs2)
        logq_s2 = -0.5 * ((logs2 - logs2_loc) / logs2_sd) ** 2 - np.log(logs2_sd) - logs2
        resid = yw[None, :] - theta @ Xw.T
        quad = (resid**2).sum(axis=1)
        loglik = -0.5 * rows * np.log(2 * np.pi * s2) - 0.5 * logdet_S - 0.5 * quad / s2
        logprior = a_prior * np.log(b_prior) - math.lgamma(a_prior) \
            - (a_prior + 1) * np.log(s2) - b_prior / s2
        logw = loglik + logprior - logq_theta - logq_s2
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum()
        return theta, s2, w

    theta, s2, w = run(theta_hat, cov_hat, np.log(s2_hat), 2.0, n_draws)
    mean_t = w @ theta
    mean_s2 = w @ s2
    cov_t = ((theta - mean_t).T * w) @ (theta - mean_t)
    var_s2 = w @ (s2 - mean_s2) ** 2
    # refined pass centered on the pilot posterior
    theta, s2, w = run(mean_t, cov_t + 1e-12 * np.eye(dim), np.log(mean_s2),
                       1.0, n_draws)

    def weighted(h):
        mu = w @ h
        se = np.sqrt((w**2 * (h - mu) ** 2).sum())
        return mu, se

    out = {}
    means, mean_ses, vars_, var_ses = [], [], [], []
    for j in range(dim):
        mu, se = weighted(theta[:, j])
        v, vse = weighted((theta[:, j] - mu) ** 2)
        means.append(mu)
        mean_ses.append(se)
        vars_.append(v)
        var_ses.append(vse)
    out["theta_mean"] = np.array(means)
    out["theta_mean_se"] = np.array(mean_ses)
    out["theta_var"] = np.array(vars_)
    out["theta_var_se"] = np.array(var_ses)
    out["sigma2_mean"], out["sigma2_mean_se"] = weighted(s2)
    mu = out["sigma2_mean"]
    out["sigma2_var"], out["sigma2_var_se"] = weighted((s2 - mu) ** 2)
    out["ess"] = 1.0 / (w**2).sum()
    return out


def t_density_integral_2d(logpdf_point, center=(0.0, 0.0), n_r=220, n_th=220):
    """Integral of a bivariate density over R^2.

    Polar Gauss-Legendre quadrature around ``center`` with the radial
    tan-substitution r = tan(v); polynomial (heavy) tails integrate to
    machine precision.  ``logpdf_point(x, y)`` evaluates one point.
    """
    vr, wr = np.polynomial.legendre.leggauss(n_r)
    vt, wt = np.polynomial.legendre.leggauss(n_th)
    v = 0.25 * np.pi * (vr + 1.0)          # (0, pi/2)
    wv = 0.25 * np.pi * wr
    th = np.pi * (vt + 1.0)                # (0, 2pi)
    wth = np.pi * wt
    r = np.tan(v)
    jac = r / np.cos(v) ** 2
    cx, cy = center
    total = 0.0
    for rv, jv, wvi in zip(r, jac, wv):
        x = cx + rv * np.cos(th)
        y = cy + rv * np.sin(th)
        vals = np.array([np.exp(logpdf_point(a, b)) for a, b in zip(x, y)])
        total += wvi * jv * (wth * vals).sum()
    return float(total)


def scalar_evidence_quadrature(x, y, s_data, s_prior, a_prior, b_prior,
                               n_theta=400, n_sigma=400):
    """Nested quadrature of the scalar-model evidence
    p(y) = II N(y; x theta, s2 s_data) N(theta; 0, s2 s_prior)
           InvGamma(s2; a, b) dtheta ds2."""
    log_s2 = np.linspace(-14, 14, n_sigma)
    s2 = np.exp(log_s2)
    total = np.zeros(n_sigma)
    for i, v in enumerate(s2):
        sd_post = math.sqrt(v) * math.sqrt(s_data * s_prior / (s_data + s_prior) + 1e-300)
        grid = np.linspace(-12, 12, n_theta) * max(sd_post, math.sqrt(v)) \
            + y * s_prior / (s_prior + s_data)
        lik = (
            np.exp(-0.5 * (y - x * grid) ** 2 / (v * s_data))
            / math.sqrt(2 * math.pi * v * s_data)
            * np.exp(-0.5 * grid**2 / (v * s_prior))
            / math.sqrt(2 * math.pi * v * s_prior)
        )
        total[i] = np.trapezoid(lik, grid)
    ig = (
        b_prior**a_prior
        / math.gamma(a_prior)
        * s2 ** (-(a_prior + 1))
        * np.exp(-b_prior / s2)
    )
    # integrate over log s2: ds2 = s2 dlog_s2
    return float(np.log(np.trapezoid(total * ig * s2, log_s2)))


def conditional_gaussian(mu, cov, obs_idx, obs_vals, new_idx):
    """Brute-force conditional law of a joint Gaussian."""
    mu = np.asarray(mu, float)
    cov = np.asarray(cov, float)
    oo = cov[np.ix_(obs_idx, obs_idx)]
    no = cov[np.ix_(new_idx, obs_idx)]
    nn = cov[np.ix_(new_idx, new_idx)]
    sol = np.linalg.solve(oo, obs_vals - mu[obs_idx])
    cond_mean = mu[new_idx] + no @ sol
    cond_cov = nn - no @ np.linalg.solve(oo, no.T)
    return cond_mean, cond_cov


def simplex_grid(n_models, step=1e-3):
    """All simplex points with the given resolution (G in {1,2,3})."""
    if n_models == 1:
        return np.array([[1.0]])
    ticks = np.arange(0.0, 1.0 + step / 2, step)
    if n_models == 2:
        return np.column_stack([ticks, 1.0 - ticks])
    grids = []
    for a in ticks:
        b = ticks[ticks <= 1.0 - a + step / 2]
        g = np.column_stack([np.full(len(b), a), b, 1.0 - a - b])
        grids.append(g)
    pts = np.vstack(grids)
    return np.clip(pts, 0.0, 1.0)
