import json
import os

import numpy as np
import pytest

from trajstack.cli import load_config, main, read_predictions_csv, run
from trajstack.data import read_trajectory_csv, write_trajectory_csv
from trajstack.errors import ConfigurationError, DataValidationError


def write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# -- CSV ingestion -----------------------------------------------------------


def test_csv_roundtrip_bit_identical(tmp_path):
    src = tmp_path / "data.csv"
    write(src, "t,x,y,response,slope\n"
               "1.0,0.25,0.5,1.5,0.1\n"
               "2.0,0.5,0.75,-2.25,0.2\n"
               "3.0,1.0,1.25,,0.3\n")
    first = read_trajectory_csv(src)
    out = tmp_path / "echo.csv"
    write_trajectory_csv(out, first)
    second = read_trajectory_csv(out)
    assert np.array_equal(first.t, second.t)
    assert np.array_equal(first.locations, second.locations)
    assert np.array_equal(first.y, second.y, equal_nan=True)
    assert np.array_equal(first.X, second.X)
    assert first.covariates == second.covariates == ("slope",)
    assert list(first.target_indices) == [2]


def test_csv_unsorted_rows_autosort_with_warning(tmp_path):
    src = tmp_path / "data.csv"
    write(src, "t,x,y,response\n2,0,0,1\n1,1,1,2\n")
    with pytest.warns(UserWarning, match="auto-sorting"):
        data = read_trajectory_csv(src)
    assert list(data.t) == [1.0, 2.0]


def test_csv_malformed_cell_is_row_addressed(tmp_path):
    src = tmp_path / "data.csv"
    write(src, "t,x,y,response\n1,0,0,1\n2,zap,0,1\n")
    with pytest.raises(DataValidationError, match="row 3.*zap"):
        read_trajectory_csv(src)


def test_csv_duplicate_time_rejected(tmp_path):
    src = tmp_path / "data.csv"
    write(src, "t,x,y,response\n1,0,0,1\n1,1,1,2\n")
    with pytest.raises(DataValidationError, match="duplicate"):
        read_trajectory_csv(src)


def test_csv_missing_required_column(tmp_path):
    src = tmp_path / "data.csv"
    write(src, "t,x,response\n1,0,1\n")
    with pytest.raises(DataValidationError, match="'y'"):
        read_trajectory_csv(src)


# -- config validation -------------------------------------------------------


def test_config_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "run.toml"
    write(cfg, "[simulate]\nfamily = 'continuous_dgp'\nn = 10\nbogus = 1\n")
    with pytest.raises(ConfigurationError, match="bogus"):
        load_config(cfg)


def test_config_unknown_section_rejected(tmp_path):
    cfg = tmp_path / "run.toml"
    write(cfg, "[nonsense]\nx = 1\n")
    with pytest.raises(ConfigurationError, match="nonsense"):
        load_config(cfg)


def test_missing_covariate_column_named(tmp_path):
    data = tmp_path / "data.csv"
    write(data, "t,x,y,response\n1,0,0,1\n2,1,1,2\n3,0,1,1\n")
    cfg = tmp_path / "run.toml"
    write(cfg, f"""
[data]
path = '{data}'
[model]
family = 'continuous'
[model.params]
phi1 = 0.5
phi2 = 0.5
xi = 0.5
delta_beta = 1.0
delta_z = 1.0
""")
    with pytest.raises(ConfigurationError, match="covariate"):
        run("fit", load_config(cfg), out_dir=str(tmp_path))


# -- commands ----------------------------------------------------------------


def simulate_config(tmp_path, n=25, seed=3, family="continuous_dgp"):
    cfg = tmp_path / "sim.toml"
    write(cfg, f"""
[simulate]
family = '{family}'
n = {n}
seed = {seed}
[output]
prefix = 'sim'
""")
    return cfg


def test_simulate_writes_ingestible_files(tmp_path):
    manifest = run("simulate", load_config(simulate_config(tmp_path)),
                   out_dir=str(tmp_path))
    data = read_trajectory_csv(manifest["written"]["data"])
    assert data.n == 25
    heldout = read_trajectory_csv(manifest["written"]["heldout"])
    assert heldout.n == 100


def test_fit_command_writes_summary(tmp_path):
    sim = run("simulate", load_config(simulate_config(tmp_path)),
              out_dir=str(tmp_path))
    cfg = tmp_path / "fit.toml"
    write(cfg, f"""
[data]
path = '{sim["written"]["data"]}'
[model]
family = 'continuous'
[model.params]
phi1 = 0.5
phi2 = 0.5
xi = 0.5
delta_beta = 1.0
delta_z = 1.0
[output]
prefix = 'fit'
""")
    manifest = run("fit", load_config(cfg), out_dir=str(tmp_path))
    with open(manifest["written"]["fit"]) as fh:
        payload = json.load(fh)
    assert payload["posterior"]["a_star"] == 2.0 + 25 / 2
    assert payload["numerics"]["applied_jitter"] in (0.0, 1e-10, 1e-8, 1e-6)


def stack_config(tmp_path, data_path, prefix="st", points=None, k=5):
    cfg = tmp_path / f"{prefix}.toml"
    predict = ""
    if points is not None:
        predict = f"[predict]\npoints = '{points}'\nmode = 'distributions'\n"
    write(cfg, f"""
[data]
path = '{data_path}'
[model]
family = 'continuous'
[grid]
phi1 = [1.0, 0.2]
phi2 = [0.5]
xi = [0.5]
delta_beta = [1.0]
delta_z = [1.0, 0.33]
[folds]
scheme = 'random_k_fold'
k = {k}
seed = 0
{predict}
[output]
prefix = '{prefix}'
""")
    return cfg


def test_stack_command_single_candidate_weight_one(tmp_path):
    sim = run("simulate", load_config(simulate_config(tmp_path)),
              out_dir=str(tmp_path))
    cfg = tmp_path / "one.toml"
    write(cfg, f"""
[data]
path = '{sim["written"]["data"]}'
[model]
family = 'continuous'
[grid]
phi1 = [0.5]
phi2 = [0.5]
xi = [0.5]
delta_beta = [1.0]
delta_z = [1.0]
[folds]
k = 4
[output]
prefix = 'one'
""")
    manifest = run("stack", load_config(cfg), out_dir=str(tmp_path))
    with open(manifest["written"]["stack"]) as fh:
        payload = json.load(fh)
    assert payload["weights"]["means"] == [1.0]
    assert payload["weights"]["distributions"] == [1.0]
    assert payload["weights"]["bma"] == [1.0]


def test_end_to_end_predict_metrics_self_consistency(tmp_path):
    sim = run("simulate", load_config(simulate_config(tmp_path, n=30, seed=7)),
              out_dir=str(tmp_path))
    cfg = stack_config(tmp_path, sim["written"]["data"], prefix="e2e",
                       points=sim["written"]["heldout"])
    manifest = run("predict", load_config(cfg), out_dir=str(tmp_path))
    preds = read_predictions_csv(manifest["written"]["predictions"])
    with open(manifest["written"]["report"]) as fh:
        report = json.load(fh)
    # MSPE in the report equals the value recomputed from emitted files
    from trajstack.metrics import mspe

    recomputed = mspe(preds["mean"], preds["response"])
    assert report["metrics"]["mspe"] == pytest.approx(recomputed, rel=1e-9)

    # metrics command on the emitted files agrees as well
    mcfg = tmp_path / "metrics.toml"
    write(mcfg, f"""
[metrics]
predictions = '{manifest["written"]["predictions"]}'
truth = '{sim["written"]["heldout"]}'
[output]
prefix = 'score'
""")
    m_manifest = run("metrics", load_config(mcfg), out_dir=str(tmp_path))
    with open(m_manifest["written"]["metrics"]) as fh:
        lines = fh.read().strip().splitlines()
    got = dict(line.split(",") for line in lines[1:])
    assert float(got["mspe"]) == pytest.approx(report["metrics"]["mspe"], rel=1e-9)
    assert "mlpd" in got and "coverage" in got


def test_predict_blank_rows_are_targets(tmp_path):
    data = tmp_path / "data.csv"
    rng = np.random.default_rng(0)
    rows = ["t,x,y,response,s"]
    for i in range(20):
        resp = "" if i in (5, 11) else f"{rng.normal():.6f}"
        rows.append(f"{i + 1}.0,{rng.normal():.5f},{rng.normal():.5f},{resp},"
                    f"{rng.normal():.5f}")
    write(data, "\n".join(rows) + "\n")
    cfg = stack_config(tmp_path, data, prefix="tgt", k=4)
    manifest = run("predict", load_config(cfg), out_dir=str(tmp_path))
    preds = read_predictions_csv(manifest["written"]["predictions"])
    assert len(preds["t"]) == 2
    assert sorted(preds["t"]) == [6.0, 12.0]
    assert np.isnan(preds["response"]).all()
    assert np.isnan(preds["logdens"]).all()


def test_determinism_same_config_same_bytes(tmp_path):
    sim_cfg = load_config(simulate_config(tmp_path, n=20, seed=9))
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    run("simulate", sim_cfg, out_dir=str(out_a))
    run("simulate", sim_cfg, out_dir=str(out_b))
    for name in ("sim_data.csv", "sim_truth.csv"):
        with open(out_a / name, "rb") as fa, open(out_b / name, "rb") as fb:
            assert fa.read() == fb.read()


def test_diagnose_command_variance_decay(tmp_path):
    cfg = tmp_path / "diag.toml"
    write(cfg, """
[diagnose]
mode = 'variance_decay'
n_list = [20, 60]
targets_per_draw = 2
epochs = 2
[output]
prefix = 'd'
""")
    manifest = run("diagnose", load_config(cfg), out_dir=str(tmp_path))
    with open(manifest["written"]["summary"]) as fh:
        summary = json.load(fh)
    assert "decreasing" in summary


def test_main_error_path_writes_machine_readable_json(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    write(cfg, "[data]\npath = 'missing.csv'\n[model]\nfamily = 'continuous'\n")
    code = main(["fit", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err
    payload = json.loads(err.strip())
    assert payload["error"] in ("DataValidationError", "ConfigurationError")
    assert payload["operation"] == "fit"
    with open(tmp_path / "error.json") as fh:
        assert json.load(fh)["error"] == payload["error"]


def test_main_success_returns_zero(tmp_path, capsys):
    cfg = simulate_config(tmp_path, n=15, seed=2)
    code = main(["simulate", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert json.loads(out.strip())["command"] == "simulate"


def test_discrete_simulate_and_stack(tmp_path):
    cfg = simulate_config(tmp_path, n=14, seed=4, family="discrete_dgp")
    manifest = run("simulate", load_config(cfg), out_dir=str(tmp_path))
    data_path = manifest["written"]["data"]
    scfg = tmp_path / "dstack.toml"
    write(scfg, f"""
[data]
path = '{data_path}'
[model]
family = 'discrete'
[grid]
phi = [1.0, 0.14]
nu = [1.0]
delta_beta = [1.0]
delta_z = [1.0]
[folds]
scheme = 'expanding_window'
k = 5
[output]
prefix = 'dst'
""")
    manifest = run("stack", load_config(scfg), out_dir=str(tmp_path))
    with open(manifest["written"]["stack"]) as fh:
        payload = json.load(fh)
    assert abs(sum(payload["weights"]["means"]) - 1.0) < 1e-9


@pytest.mark.acceptance
def test_heldout_interval_coverage_on_matched_simulation(tmp_path):
    # matched-model mixture intervals cover held-out responses at roughly
    # the nominal rate
    cfg = simulate_config(tmp_path, n=200, seed=5)
    sim = run("simulate", load_config(cfg), out_dir=str(tmp_path))
    pcfg = tmp_path / "cov.toml"
    write(pcfg, f"""
[data]
path = '{sim["written"]["data"]}'
[model]
family = 'continuous'
[grid]
phi1 = [0.5]
phi2 = [0.5]
xi = [0.5]
delta_beta = [1.0]
delta_z = [1.0]
[folds]
k = 10
[predict]
points = '{sim["written"]["heldout"]}'
[output]
prefix = 'cov'
""")
    manifest = run("predict", load_config(pcfg), out_dir=str(tmp_path))
    with open(manifest["written"]["report"]) as fh:
        report = json.load(fh)
    assert 0.90 <= report["metrics"]["coverage"] <= 0.99
