"""Synthetic data generators for the three model families.

Reproducibility contract: every generator draws from named counter-based
(Philox) streams, one per component ("path", "covariates", "states",
"noise", "subsample"), so changing the training size re-slices the same
underlying realization instead of reshuffling it.  All generators keep a
truth record (latent values, coefficient paths, noiseless signals) so
estimation error metrics never need re-simulation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import TrajectoryDataset
from .errors import ConfigurationError, ParameterDomainError
from .kernels import KernelSpec, chol_with_jitter, corr_matrix

_STREAMS = {"path": 11, "covariates": 13, "states": 17, "noise": 19,
            "subsample": 23, "locations": 29}


def stream(seed: int, name: str) -> np.random.Generator:
    """Named counter-based substream of a master seed."""
    if name not in _STREAMS:
        raise ConfigurationError(f"unknown stream {name!r}")
    return np.random.Generator(np.random.Philox(key=[int(seed), _STREAMS[name]]))


def random_walk_trajectory(n_steps: int, seed) -> np.ndarray:
    """Planar random walk started at the origin with unit-variance
    standard-normal increments per coordinate."""
    if n_steps < 1:
        raise ConfigurationError("trajectory needs at least one step")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "path")
    return np.cumsum(rng.standard_normal((n_steps, 2)), axis=0)


@dataclass(frozen=True)
class SimConfig:
    """Shared knobs of the generators; family-specific fields noted inline."""

    family: str                       # continuous_dgp | discrete_dgp | dlm_dgp
    n: int                            # training size (epochs for discrete/dlm)
    p: int = 2
    sigma: float = 1.0
    delta_beta: float = 1.0
    delta_z: float = 1.0
    phi1: float = 0.5                 # continuous kernel
    phi2: float = 0.5
    xi: float = 0.5
    matern_phi: float = 1.0 / 7.0     # discrete / dlm kernel
    matern_nu: float = 1.0
    seed: int = 0
    trajectory_length: int = 300      # continuous: pool to subsample from
    n_heldout: int = 100
    n_epochs: int = 20                # dlm: epochs
    covariate_seed: Optional[int] = None  # fixed-design covariates shared
    #                                       across replicates when set

    def __post_init__(self):
        if self.family not in ("continuous_dgp", "discrete_dgp", "dlm_dgp"):
            raise ConfigurationError(f"unknown generator family {self.family!r}")
        if self.n < 1 or self.p < 0:
            raise ConfigurationError("sizes must be positive")
        if self.sigma < 0:
            raise ParameterDomainError("sigma must be nonnegative")


@dataclass(frozen=True)
class ContinuousTruth:
    z_train: np.ndarray
    z_heldout: np.ndarray
    beta_train: np.ndarray      # (n, p)
    beta_heldout: np.ndarray
    signal_train: np.ndarray
    signal_heldout: np.ndarray
    sigma: float


@dataclass(frozen=True)
class SimulatedContinuous:
    train: TrajectoryDataset
    heldout: Optional[TrajectoryDataset]  # None when n_heldout = 0
    truth: ContinuousTruth


def simulate_continuous(config: SimConfig) -> SimulatedContinuous:
    """Trajectory in-fill generator.

    One long trajectory is realized (path, latent process, coefficient
    processes, covariates, noise) and the training and held-out sets are
    disjoint subsamples of it, so different n share the same realization.
    """
    if config.family != "continuous_dgp":
        raise ConfigurationError("config family must be continuous_dgp")
    total = config.trajectory_length
    if config.n + config.n_heldout > total:
        raise ConfigurationError("n plus held-out points exceed the trajectory pool")
    path = random_walk_trajectory(total, stream(config.seed, "path"))
    times = np.arange(1.0, total + 1)
    pts = np.column_stack([times, path])

    state_rng = stream(config.seed, "states")
    z_gram = corr_matrix(KernelSpec.gneiting(config.phi1, config.phi2), pts)
    _, z_chol, _ = chol_with_jitter(z_gram, what="latent-process gram")
    z = config.sigma * config.delta_z * (z_chol @ state_rng.standard_normal(total))

    beta = np.zeros((total, config.p))
    if config.p:
        b_gram = corr_matrix(KernelSpec.sqexp(config.xi), times)
        _, b_chol, _ = chol_with_jitter(b_gram, what="coefficient gram")
        beta = config.sigma * config.delta_beta * (
            b_chol @ state_rng.standard_normal((total, config.p))
        )

    cov_seed = config.seed if config.covariate_seed is None else config.covariate_seed
    x = stream(cov_seed, "covariates").normal(0.0, 2.0, size=(total, config.p))
    signal = (x * beta).sum(axis=1) + z
    noise = stream(config.seed, "noise").standard_normal(total)
    y = signal + config.sigma * noise

    # held-out targets are drawn first so every training size n of the same
    # seed is scored on the identical excluded points
    perm = stream(config.seed, "subsample").permutation(total)
    held_idx = np.sort(perm[: config.n_heldout])
    train_idx = np.sort(perm[config.n_heldout: config.n_heldout + config.n])

    def cut(idx):
        return TrajectoryDataset(t=times[idx], locations=path[idx], y=y[idx],
                                 X=x[idx])

    truth = ContinuousTruth(
        z_train=z[train_idx], z_heldout=z[held_idx],
        beta_train=beta[train_idx], beta_heldout=beta[held_idx],
        signal_train=signal[train_idx], signal_heldout=signal[held_idx],
        sigma=config.sigma,
    )
    heldout = cut(held_idx) if len(held_idx) else None
    return SimulatedContinuous(train=cut(train_idx), heldout=heldout,
                               truth=truth)


@dataclass(frozen=True)
class DiscreteTruth:
    beta: np.ndarray            # (T+1, p) coefficient path incl. next epoch
    z: np.ndarray               # (T+1, n_sites+1) latent field over sites + next
    signal: np.ndarray          # (T,) noiseless signal at the observed epochs
    next_location: np.ndarray
    next_x: np.ndarray
    next_signal: float
    next_y: float
    sigma: float


@dataclass(frozen=True)
class SimulatedDiscrete:
    data: TrajectoryDataset
    truth: DiscreteTruth


def simulate_discrete(config: SimConfig) -> SimulatedDiscrete:
    """Epoch generator: random-walk trajectory, random-walk coefficients,
    random-walk latent field with a Matern innovation kernel, plus the
    next-epoch prediction target."""
    if config.family != "discrete_dgp":
        raise ConfigurationError("config family must be discrete_dgp")
    T = config.n
    path = random_walk_trajectory(T + 1, stream(config.seed, "path"))
    sites = path  # random-walk sites are distinct almost surely
    kernel = KernelSpec.matern(config.matern_phi, config.matern_nu)
    gram = corr_matrix(kernel, sites)
    _, chol, _ = chol_with_jitter(gram, what="site gram")

    rng = stream(config.seed, "states")
    beta = np.zeros((T + 2, config.p))
    z = np.zeros((T + 2, T + 1))
    beta[0] = rng.normal(0.0, 2.0, size=config.p)
    z[0] = rng.normal(0.0, 2.0, size=T + 1)
    for t in range(1, T + 2):
        beta[t] = beta[t - 1] + config.sigma * config.delta_beta * \
            rng.standard_normal(config.p)
        z[t] = z[t - 1] + config.sigma * config.delta_z * \
            (chol @ rng.standard_normal(T + 1))

    cov_seed = config.seed if config.covariate_seed is None else config.covariate_seed
    x = stream(cov_seed, "covariates").normal(0.0, 2.0, size=(T + 1, config.p))
    noise = stream(config.seed, "noise").standard_normal(T + 1)
    epochs = np.arange(T + 1)
    signal_all = (x * beta[1:]).sum(axis=1) + z[1:][epochs, epochs]
    y_all = signal_all + config.sigma * noise

    data = TrajectoryDataset(t=np.arange(1.0, T + 1), locations=path[:T],
                             y=y_all[:T], X=x[:T])
    truth = DiscreteTruth(
        beta=beta[1:], z=z[1:], signal=signal_all[:T],
        next_location=path[T], next_x=x[T],
        next_signal=float(signal_all[T]), next_y=float(y_all[T]),
        sigma=config.sigma,
    )
    return SimulatedDiscrete(data=data, truth=truth)


@dataclass(frozen=True)
class DlmTruth:
    beta: np.ndarray            # (T+1, p)
    z: np.ndarray               # (T+1, n + n_new)
    signals: np.ndarray         # (T, n) noiseless signals at training locations
    next_signal: np.ndarray     # (n + n_new,) next-epoch signal everywhere
    sigma: float


@dataclass(frozen=True)
class SimulatedDlm:
    locations: np.ndarray       # (n, 2) training locations on the unit square
    new_locations: np.ndarray   # (n_new, 2) extra prediction locations
    ys: np.ndarray              # (T, n)
    xs: np.ndarray              # (T, n, p)
    next_x: np.ndarray          # (n + n_new, p) covariates at T+1
    truth: DlmTruth


def simulate_dlm(config: SimConfig) -> SimulatedDlm:
    """Panel generator: n fixed locations on the unit square observed over
    T epochs, identity evolution, Matern innovations for the latent field."""
    if config.family != "dlm_dgp":
        raise ConfigurationError("config family must be dlm_dgp")
    n, T, p = config.n, config.n_epochs, config.p
    loc_rng = stream(config.seed, "locations")
    locations = loc_rng.uniform(0.0, 1.0, size=(n, 2))
    new_locations = loc_rng.uniform(0.0, 1.0, size=(config.n_heldout, 2))
    everywhere = np.vstack([locations, new_locations])
    kernel = KernelSpec.matern(config.matern_phi, config.matern_nu)
    _, chol, _ = chol_with_jitter(corr_matrix(kernel, everywhere),
                                  what="panel site gram")

    rng = stream(config.seed, "states")
    m = len(everywhere)
    beta = np.zeros((T + 2, p))
    z = np.zeros((T + 2, m))
    beta[0] = rng.normal(0.0, 2.0, size=p)
    z[0] = rng.normal(0.0, 2.0, size=m)
    for t in range(1, T + 2):
        beta[t] = beta[t - 1] + config.sigma * config.delta_beta * \
            rng.standard_normal(p)
        z[t] = z[t - 1] + config.sigma * config.delta_z * \
            (chol @ rng.standard_normal(m))

    cov_rng = stream(
        config.seed if config.covariate_seed is None else config.covariate_seed,
        "covariates")
    xs = cov_rng.normal(0.0, 2.0, size=(T, n, p))
    next_x = cov_rng.normal(0.0, 2.0, size=(m, p))
    noise = stream(config.seed, "noise").standard_normal((T, n))
    signals = np.einsum("tnp,tp->tn", xs, beta[1:T + 1]) + z[1:T + 1, :n]
    ys = signals + config.sigma * noise
    next_signal = next_x @ beta[T + 1] + z[T + 1]
    truth = DlmTruth(beta=beta[1:], z=z[1:], signals=signals,
                     next_signal=next_signal, sigma=config.sigma)
    return SimulatedDlm(locations=locations, new_locations=new_locations,
                        ys=ys, xs=xs, next_x=next_x, truth=truth)
