import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import simplex_grid
from trajstack.bayes import StudentTPredictive
from trajstack.data import TrajectoryDataset
from trajstack.errors import (
    ConfigurationError,
    DataValidationError,
    ParameterDomainError,
)
from trajstack.stacking import (
    FoldPlan,
    MixturePredictive,
    SigmaSquaredMixture,
    bma_weights,
    candidate_grid,
    continuous_grid,
    discrete_grid,
    make_folds,
    run_stacking,
    stack_distributions,
    stack_means,
    stacked_mixture,
    verify_kkt_means,
)


# -- folds -------------------------------------------------------------------


def test_random_folds_partition():
    folds = make_folds(10, FoldPlan("random_k_fold", 5, seed=3))
    seen = np.concatenate([v for _, v in folds])
    assert sorted(seen.tolist()) == list(range(10))
    for tr, va in folds:
        assert len(np.intersect1d(tr, va)) == 0
        assert len(tr) + len(va) == 10


def test_expanding_window_trains_strictly_earlier():
    folds = make_folds(12, FoldPlan("expanding_window", 4))
    assert len(folds) == 3  # first block skipped
    for tr, va in folds:
        assert tr.max() < va.min()
        assert np.array_equal(tr, np.arange(va.min()))


def test_fold_seed_changes_partition_but_not_property():
    f1 = make_folds(9, FoldPlan("random_k_fold", 3, seed=1))
    f2 = make_folds(9, FoldPlan("random_k_fold", 3, seed=2))
    v1 = [v.tolist() for _, v in f1]
    v2 = [v.tolist() for _, v in f2]
    assert v1 != v2
    assert sorted(sum(v2, [])) == list(range(9))


def test_fold_plan_validation():
    with pytest.raises(ConfigurationError):
        FoldPlan("bogus", 5)
    with pytest.raises(ConfigurationError):
        FoldPlan("random_k_fold", 1)
    with pytest.raises(ConfigurationError):
        make_folds(3, FoldPlan("random_k_fold", 5))


# -- stacking of means -------------------------------------------------------


def test_stack_means_single_model():
    res = stack_means(np.array([[1.0], [2.0]]), np.array([1.1, 1.9]))
    assert res.weights == pytest.approx([1.0])


def test_stack_means_recovers_exact_column():
    rng = np.random.default_rng(0)
    y = rng.normal(size=30)
    P = np.column_stack([y, y + rng.normal(size=30), y - 2.0])
    res = stack_means(P, y)
    assert res.weights == pytest.approx([1.0, 0.0, 0.0], abs=1e-8)
    assert res.objective == pytest.approx(0.0, abs=1e-12)
    assert res.kkt["passed"]


def test_stack_means_symmetric_pair_averages():
    rng = np.random.default_rng(1)
    y = rng.normal(size=25)
    c = rng.normal(size=25)
    P = np.column_stack([y + c, y - c])
    res = stack_means(P, y)
    assert res.weights == pytest.approx([0.5, 0.5], abs=1e-7)
    assert res.objective == pytest.approx(0.0, abs=1e-10)


def test_stack_means_identical_columns_tie_break_uniform():
    rng = np.random.default_rng(2)
    y = rng.normal(size=20)
    col = y + rng.normal(size=20)
    res = stack_means(np.column_stack([col, col, col]), y)
    assert res.weights == pytest.approx([1 / 3] * 3, abs=1e-5)


def test_stack_means_matches_grid_search():
    rng = np.random.default_rng(3)
    for G in (2, 3):
        for trial in range(5):
            y = rng.normal(size=18)
            P = y[:, None] + rng.normal(size=(18, G)) * rng.uniform(0.2, 2.0, G)
            res = stack_means(P, y)
            grid = simplex_grid(G, step=1e-3)
            grid_obj = (((y[:, None] - P @ grid.T) ** 2).sum(axis=0)).min()
            assert res.objective <= grid_obj + 1e-6
            assert res.kkt["passed"], res.kkt


def test_stack_means_rejects_nonfinite():
    with pytest.raises(ParameterDomainError):
        stack_means(np.array([[np.nan], [1.0]]), np.array([0.0, 1.0]))


def test_kkt_certificate_flags_bad_weights():
    rng = np.random.default_rng(4)
    y = rng.normal(size=15)
    P = np.column_stack([y, -y])
    bad = verify_kkt_means(P, y, np.array([0.0, 1.0]))
    assert not bad["passed"]


# -- stacking of distributions ----------------------------------------------


def test_stack_distributions_single_model():
    res = stack_distributions(np.array([[-1.0], [-2.0]]))
    assert res.weights == pytest.approx([1.0])
    assert res.objective == pytest.approx(-3.0)


def test_stack_distributions_dominant_model():
    rng = np.random.default_rng(5)
    L = np.column_stack([rng.normal(-1.0, 0.1, 40), rng.normal(-3.0, 0.1, 40)])
    res = stack_distributions(L)
    assert res.weights[0] > 0.999
    assert res.weights == pytest.approx([1.0, 0.0], abs=1e-3)


def test_stack_distributions_identical_columns_stay_uniform():
    L = np.tile(np.linspace(-3, -1, 10)[:, None], (1, 3))
    res = stack_distributions(L)
    assert res.weights == pytest.approx([1 / 3] * 3, abs=1e-9)


def test_stack_distributions_matches_grid_search():
    rng = np.random.default_rng(6)
    for G in (2, 3):
        for trial in range(5):
            L = rng.normal(-1.5, 1.0, size=(25, G))
            res = stack_distributions(L)
            grid = simplex_grid(G, step=1e-3)
            with np.errstate(divide="ignore"):
                objs = np.array([
                    np.log(np.exp(L) @ w + 1e-300).sum() for w in grid
                ])
            assert res.objective >= objs.max() - 1e-5


def test_stack_distributions_objective_not_worse_than_best_vertex():
    rng = np.random.default_rng(7)
    L = rng.normal(-2.0, 1.5, size=(30, 4))
    res = stack_distributions(L)
    assert res.objective >= L.sum(axis=0).max() - 1e-9


def test_stack_distributions_concave_stability_under_permutation():
    rng = np.random.default_rng(8)
    L = rng.normal(-2.0, 1.0, size=(20, 3))
    res1 = stack_distributions(L)
    perm = [2, 0, 1]
    res2 = stack_distributions(L[:, perm])
    assert res1.objective == pytest.approx(res2.objective, abs=1e-8)
    assert res2.weights[perm.index(0)] == pytest.approx(res1.weights[0], abs=1e-5)


def test_stack_distributions_hard_zeros():
    L = np.array([[-1.0, -np.inf], [-2.0, -np.inf], [-1.5, -1.0]])
    res = stack_distributions(L)
    assert res.weights[0] > 0.5


def test_stack_distributions_dead_row_raises():
    with pytest.raises(DataValidationError, match="row 1"):
        stack_distributions(np.array([[-1.0, -2.0], [-np.inf, -np.inf]]))


# -- model averaging ---------------------------------------------------------


def test_bma_weights_basic():
    assert bma_weights([0.0, 0.0, 0.0]) == pytest.approx([1 / 3] * 3)
    assert bma_weights([0.0, -np.log(3.0)]) == pytest.approx([0.75, 0.25])
    shifted = bma_weights(np.array([0.0, -np.log(3.0)]) + 1000.0)
    assert shifted == pytest.approx([0.75, 0.25])


def test_bma_weights_with_prior():
    w = bma_weights([0.0, 0.0], prior=[0.9, 0.1])
    assert w == pytest.approx([0.9, 0.1])
    with pytest.raises(ParameterDomainError):
        bma_weights([0.0, np.inf])


# -- mixtures ----------------------------------------------------------------


def test_mixture_single_component_equals_component():
    comp = StudentTPredictive(5.0, np.array([1.0]), np.array([[2.0]]))
    mix = stacked_mixture([1.0], [comp])
    from trajstack.bayes import t_logdensity

    for x in (-1.0, 1.0, 3.0):
        assert mix.logpdf(x) == pytest.approx(t_logdensity([x], comp), rel=1e-12)
    assert mix.mean() == pytest.approx(1.0)
    assert mix.variance() == pytest.approx(2.0 * 5 / 3)


def test_mixture_mean_is_weighted_location():
    comps = [
        StudentTPredictive(4.0, np.array([0.0]), np.array([[1.0]])),
        StudentTPredictive(6.0, np.array([2.0]), np.array([[0.5]])),
    ]
    mix = stacked_mixture([0.3, 0.7], comps)
    assert mix.mean() == pytest.approx(0.7 * 2.0)


def test_mixture_logpdf_is_logsumexp_identity():
    comps = [
        StudentTPredictive(4.0, np.array([0.0]), np.array([[1.0]])),
        StudentTPredictive(3.0, np.array([1.5]), np.array([[0.7]])),
    ]
    w = np.array([0.4, 0.6])
    mix = stacked_mixture(w, comps)
    from trajstack.bayes import t_logdensity

    x = 0.8
    manual = np.logaddexp(
        np.log(w[0]) + t_logdensity([x], comps[0]),
        np.log(w[1]) + t_logdensity([x], comps[1]),
    )
    assert mix.logpdf(x) == pytest.approx(manual, rel=1e-12)


def test_mixture_moment_requests_respect_dof():
    comp = StudentTPredictive(1.0, np.array([0.0]), np.array([[1.0]]))
    mix = stacked_mixture([1.0], [comp])
    with pytest.raises(ParameterDomainError):
        mix.mean()
    with pytest.raises(ParameterDomainError):
        mix.variance()
    # quantiles need no moments
    assert mix.quantile(0.5) == pytest.approx(0.0, abs=1e-8)


def test_mixture_quantiles_match_monte_carlo():
    rng = np.random.default_rng(9)
    w = np.array([0.35, 0.65])
    dofs = np.array([5.0, 12.0])
    locs = np.array([-1.0, 2.0])
    vars_ = np.array([0.8, 1.5])
    mix = MixturePredictive(w, dofs, locs, vars_)
    n = 1_000_000
    pick = rng.random(n) < w[0]
    draws = np.where(
        pick,
        locs[0] + np.sqrt(vars_[0]) * rng.standard_t(dofs[0], n),
        locs[1] + np.sqrt(vars_[1]) * rng.standard_t(dofs[1], n),
    )
    for q in (0.025, 0.5, 0.975):
        assert mix.quantile(q) == pytest.approx(np.quantile(draws, q), abs=0.01)


def test_mixture_cdf_quantile_roundtrip():
    mix = MixturePredictive(np.array([0.5, 0.5]), np.array([3.0, 8.0]),
                            np.array([0.0, 4.0]), np.array([1.0, 2.0]))
    for q in (0.1, 0.5, 0.9):
        assert mix.cdf(mix.quantile(q)) == pytest.approx(q, abs=1e-8)


def test_sigma2_mixture_interval_and_mean():
    mix = SigmaSquaredMixture(np.array([1.0]), np.array([10.0]), np.array([9.0]))
    assert mix.mean() == pytest.approx(1.0)
    lo, hi = mix.interval(0.95)
    assert mix.cdf(lo) == pytest.approx(0.025, abs=1e-6)
    assert mix.cdf(hi) == pytest.approx(0.975, abs=1e-6)
    assert lo < 1.0 < hi


# -- end-to-end runs ---------------------------------------------------------


def continuous_data(rng, n=24, p=2):
    t = np.sort(rng.uniform(0, 20, n))
    locs = np.cumsum(rng.standard_normal((n, 2)), axis=0) * 0.4
    X = rng.normal(0, 2, size=(n, p))
    y = (X * rng.normal(size=p)).sum(axis=1) + rng.normal(size=n)
    return TrajectoryDataset(t=t, locations=locs, y=y, X=X)


def test_run_stacking_single_candidate_weight_one():
    rng = np.random.default_rng(10)
    data = continuous_data(rng)
    grid = continuous_grid([0.5], [0.5], [0.5], [1.0], [1.0])
    run = run_stacking(data, grid, FoldPlan("random_k_fold", 4, seed=0),
                       predict_points=(data.t[:3], data.locations[:3], data.X[:3]))
    assert run.means.weights == pytest.approx([1.0])
    assert run.distributions.weights == pytest.approx([1.0])
    assert run.bma == pytest.approx([1.0])
    mixes = run.final_mixtures("means")
    assert len(mixes) == 3


def test_run_stacking_weights_and_records_shapes():
    rng = np.random.default_rng(11)
    data = continuous_data(rng, n=20)
    grid = continuous_grid([1.0, 0.2], [0.5], [0.5], [1.0], [1.0, 0.3])
    run = run_stacking(data, grid, FoldPlan("random_k_fold", 5, seed=1))
    assert len(run.labels) == 4
    assert run.means.weights.sum() == pytest.approx(1.0, abs=1e-10)
    assert run.distributions.weights.sum() == pytest.approx(1.0, abs=1e-10)
    total_valid = sum(len(r.valid_idx) for r in run.records)
    assert total_valid == 20
    assert run.log_evidences.shape == (4,)


def test_run_stacking_threaded_matches_serial():
    rng = np.random.default_rng(12)
    data = continuous_data(rng, n=18)
    grid = continuous_grid([1.0, 0.2], [0.5], [0.5], [1.0], [1.0])
    plan = FoldPlan("random_k_fold", 3, seed=5)
    run1 = run_stacking(data, grid, plan, threads=1)
    run2 = run_stacking(data, grid, plan, threads=4)
    assert run1.means.weights == pytest.approx(run2.means.weights, abs=1e-14)
    assert run1.distributions.objective == pytest.approx(
        run2.distributions.objective, abs=1e-12)


def test_run_stacking_discrete_family_expanding_window():
    rng = np.random.default_rng(13)
    T, p = 18, 1
    locs = np.cumsum(rng.standard_normal((T, 2)), axis=0)
    X = rng.normal(0, 2, size=(T, p))
    y = rng.normal(size=T)
    data = TrajectoryDataset(t=np.arange(1.0, T + 1), locations=locs, y=y, X=X)
    grid = discrete_grid([1.0, 1 / 7], [1.0], [1.0], [1.0])
    run = run_stacking(data, grid, FoldPlan("expanding_window", 6))
    assert run.means.weights.sum() == pytest.approx(1.0)
    assert run.sigma2 is not None
    mix = run.sigma2_mixture("distributions")
    lo, hi = mix.interval(0.95)
    assert 0 < lo < hi


def test_run_stacking_objective_beats_every_vertex():
    rng = np.random.default_rng(14)
    data = continuous_data(rng, n=22)
    grid = continuous_grid([1.0, 0.2], [0.5], [0.5, 2.0], [1.0], [1.0])
    run = run_stacking(data, grid, FoldPlan("random_k_fold", 4, seed=2))
    P = np.vstack([r.means for r in run.records])
    y = np.concatenate([data.y[r.valid_idx] for r in run.records])
    vertex_best = (((y[:, None] - P) ** 2).sum(axis=0)).min()
    assert run.means.objective <= vertex_best + 1e-9
    L = np.vstack([r.logdens for r in run.records])
    assert run.distributions.objective >= L.sum(axis=0).max() - 1e-9


@pytest.mark.acceptance
def test_oracle_candidate_keeps_stacked_mspe_close():
    # with the generating hyperparameters inside the grid, stacked MSPE
    # stays within 10% of the oracle candidate's MSPE (median over 20 reps)
    from trajstack.metrics import mspe
    from trajstack.simulate import SimConfig, simulate_continuous
    from trajstack.continuous import (ContinuousTrajSpec, fit_continuous,
                                      predict_points_continuous)

    oracle = ContinuousTrajSpec(delta_beta=1.0, delta_z=1.0, phi1=0.5,
                                phi2=0.5, xi=0.5)
    grid = candidate_grid([
        oracle,
        ContinuousTrajSpec(delta_beta=3.0, delta_z=3.0, phi1=1.0, phi2=1.0, xi=1.0),
        ContinuousTrajSpec(delta_beta=1 / 3, delta_z=1 / 3, phi1=0.2, phi2=0.2,
                           xi=0.2),
        ContinuousTrajSpec(delta_beta=3.0, delta_z=1 / 3, phi1=0.2, phi2=1.0,
                           xi=0.5),
    ])
    ratios = []
    for seed in range(20):
        sim = simulate_continuous(SimConfig(family="continuous_dgp", n=200,
                                            seed=seed))
        held = sim.heldout
        run = run_stacking(sim.train, grid,
                           FoldPlan("random_k_fold", 20, seed=seed),
                           predict_points=(held.t, held.locations, held.X),
                           compute_bma=False)
        stacked = mspe(run.stacked_mean("means"), sim.truth.signal_heldout)
        fit = fit_continuous(sim.train, oracle)
        pred = predict_points_continuous(fit, held.t, held.locations, held.X,
                                         marginal_only=True)
        oracle_mspe = mspe(pred.y.loc, sim.truth.signal_heldout)
        ratios.append(stacked / oracle_mspe)
    assert float(np.median(ratios)) <= 1.10


@given(seed=st.integers(0, 10_000), n=st.integers(5, 40), G=st.integers(1, 6))
@settings(max_examples=25, deadline=None)
def test_property_weights_stay_on_simplex(seed, n, G):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=n)
    P = y[:, None] + rng.normal(size=(n, G))
    res = stack_means(P, y)
    assert abs(res.weights.sum() - 1.0) <= 1e-10
    assert (res.weights >= 0).all()
    best_vertex = (((y[:, None] - P) ** 2).sum(axis=0)).min()
    assert res.objective <= best_vertex + 1e-9

    L = rng.normal(-2.0, 1.0, size=(n, G))
    dres = stack_distributions(L)
    assert abs(dres.weights.sum() - 1.0) <= 1e-10
    assert (dres.weights >= 0).all()
    assert dres.objective >= L.sum(axis=0).max() - 1e-9


@given(seed=st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_property_mixture_cdf_monotone(seed):
    rng = np.random.default_rng(seed)
    G = int(rng.integers(1, 4))
    w = rng.dirichlet(np.ones(G))
    mix = MixturePredictive(w, rng.uniform(1.0, 20.0, G),
                            rng.normal(0, 2, G), rng.uniform(0.1, 3.0, G))
    xs = np.sort(rng.normal(0, 4, 8))
    cdfs = [mix.cdf(float(x)) for x in xs]
    assert all(b >= a - 1e-12 for a, b in zip(cdfs, cdfs[1:]))
    assert 0.0 <= cdfs[0] and cdfs[-1] <= 1.0
