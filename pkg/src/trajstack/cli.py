"""Batch command-line front door.

Subcommands (all driven by a TOML config; see ``CONFIG_SCHEMA``):

* ``simulate`` -- generate a synthetic trajectory dataset + truth record
* ``fit``      -- fit one candidate model, write a posterior summary JSON
* ``stack``    -- cross-validated stacking weights (+ BMA) over a grid
* ``predict``  -- stacked mixture predictions with 95% intervals
* ``metrics``  -- score an emitted predictions file against a truth file
* ``diagnose`` -- variance-decay / noise-concentration trend reports

Outputs are written atomically (temp file + rename) into ``--out`` with
all numerics fixed to 12 significant digits, so identical config + seed
gives byte-identical artifacts.  Errors exit nonzero after writing a
machine-readable error JSON naming the failing module and operation.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version-dependent import
    import tomli as tomllib

import numpy as np

from . import continuous as _continuous
from . import discrete as _discrete
from . import diagnostics as _diagnostics
from . import metrics as _metrics
from . import simulate as _simulate
from .data import TrajectoryDataset, read_trajectory_csv, write_trajectory_csv
from .errors import ConfigurationError, DataValidationError, TrajstackError
from .kernels import KernelSpec
from .stacking import FoldPlan, continuous_grid, discrete_grid, run_stacking

ingest_csv = read_trajectory_csv

CONFIG_SCHEMA = {
    "simulate": {"family", "n", "p", "sigma", "delta_beta", "delta_z", "phi1",
                 "phi2", "xi", "matern_phi", "matern_nu", "seed",
                 "trajectory_length", "n_heldout", "n_epochs"},
    "data": {"path"},
    "model": {"family", "params"},
    "model.params": {"phi1", "phi2", "xi", "phi", "nu", "delta_beta", "delta_z",
                     "a_sigma", "b_sigma"},
    "grid": {"phi1", "phi2", "xi", "phi", "nu", "delta_beta", "delta_z",
             "a_sigma", "b_sigma"},
    "folds": {"scheme", "k", "seed"},
    "predict": {"points", "mode", "level"},
    "metrics": {"predictions", "truth"},
    "diagnose": {"mode", "n_list", "replicates", "seed", "epochs", "alpha",
                 "delta_z", "phi", "nu", "targets_per_draw"},
    "output": {"prefix"},
}


def _fmt(value: float) -> str:
    if isinstance(value, float) and math.isnan(value):
        return ""
    return f"{value:.12g}"


def _round12(obj):
    if isinstance(obj, float):
        return float(f"{obj:.12g}")
    if isinstance(obj, dict):
        return {k: _round12(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round12(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_round12(float(v)) for v in obj.reshape(-1)]
    if isinstance(obj, (np.floating,)):
        return float(f"{float(obj):.12g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: str, payload: dict) -> None:
    _write_atomic(path, json.dumps(_round12(payload), indent=2, sort_keys=True) + "\n")


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            cell if isinstance(cell, str) else _fmt(float(cell)) for cell in row
        ))
    _write_atomic(path, "\n".join(lines) + "\n")


def load_config(path: str) -> dict:
    """Parse and schema-validate the TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            config = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config parse error: {exc}") from None
    _validate_keys(config, "")
    return config


def _validate_keys(section: dict, prefix: str) -> None:
    if prefix == "":
        allowed = set(CONFIG_SCHEMA)
        for key, value in section.items():
            if key not in allowed:
                raise ConfigurationError(f"unknown config section {key!r}")
            if not isinstance(value, dict):
                raise ConfigurationError(f"config section {key!r} must be a table")
            _validate_keys(value, key)
        return
    allowed = CONFIG_SCHEMA.get(prefix, set())
    for key, value in section.items():
        full = f"{prefix}.{key}"
        if full in CONFIG_SCHEMA and isinstance(value, dict):
            _validate_keys(value, full)
            continue
        if key not in allowed:
            raise ConfigurationError(f"unknown config key {full!r}")


def _require(config: dict, section: str) -> dict:
    if section not in config:
        raise ConfigurationError(f"config section [{section}] is required")
    return config[section]


def _prefix(config: dict, out_dir: str) -> str:
    prefix = config.get("output", {}).get("prefix", "run")
    return os.path.join(out_dir, prefix)


def _load_data(config: dict) -> TrajectoryDataset:
    data_cfg = _require(config, "data")
    if "path" not in data_cfg:
        raise ConfigurationError("config key data.path is required")
    data = read_trajectory_csv(data_cfg["path"])
    _check_covariates(config, data)
    return data


def _check_covariates(config: dict, data: TrajectoryDataset) -> None:
    # a model section may reference covariates; all configured models use
    # every covariate column, so only presence is validated here
    model = config.get("model")
    if model and data.p == 0 and model.get("family") in ("continuous", "nsdlm"):
        raise ConfigurationError(
            f"model family {model['family']!r} needs covariate columns, "
            "none found in the data file"
        )


_FAMILY_PARAMS = {
    "continuous": ("phi1", "phi2", "xi", "delta_beta", "delta_z"),
    "discrete": ("phi", "nu", "delta_beta", "delta_z"),
    "nsdlm": ("delta_beta",),
}


def _single_spec(family: str, params: dict):
    params = dict(params)
    a_sigma = float(params.pop("a_sigma", 2.0))
    b_sigma = float(params.pop("b_sigma", 2.0))
    if family not in _FAMILY_PARAMS:
        raise ConfigurationError(f"unknown model family {family!r}")
    needed = _FAMILY_PARAMS[family]
    missing = [k for k in needed if k not in params]
    if missing:
        raise ConfigurationError(
            f"model.params missing {missing} for family {family!r}")
    stray = sorted(k for k in params if k not in needed)
    if stray:
        raise ConfigurationError(
            f"model.params has keys {stray} not used by family {family!r}")
    vals = {k: float(params[k]) for k in needed}
    if family == "continuous":
        return _continuous.ContinuousTrajSpec(
            delta_beta=vals["delta_beta"], delta_z=vals["delta_z"],
            phi1=vals["phi1"], phi2=vals["phi2"], xi=vals["xi"],
            a_sigma=a_sigma, b_sigma=b_sigma)
    if family == "discrete":
        return _discrete.DiscreteTrajSpec(
            delta_beta=vals["delta_beta"], delta_z=vals["delta_z"],
            kernel=KernelSpec.matern(vals["phi"], vals["nu"]),
            a_sigma=a_sigma, b_sigma=b_sigma)
    return _discrete.NsdlmSpec(delta_beta=vals["delta_beta"],
                               a_sigma=a_sigma, b_sigma=b_sigma)


def _grid_from_config(family: str, grid_cfg: dict):
    grid_cfg = dict(grid_cfg)
    a_sigma = grid_cfg.pop("a_sigma", 2.0)
    b_sigma = grid_cfg.pop("b_sigma", 2.0)

    def lst(key):
        if key not in grid_cfg:
            raise ConfigurationError(f"grid.{key} is required for {family!r}")
        v = grid_cfg.pop(key)
        return list(v) if isinstance(v, (list, tuple)) else [v]

    if family == "continuous":
        grid = continuous_grid(lst("phi1"), lst("phi2"), lst("xi"),
                               lst("delta_beta"), lst("delta_z"),
                               a_sigma=a_sigma, b_sigma=b_sigma)
    elif family == "discrete":
        grid = discrete_grid(lst("phi"), lst("nu"), lst("delta_beta"),
                             lst("delta_z"), a_sigma=a_sigma, b_sigma=b_sigma)
    else:
        raise ConfigurationError(f"stacking grids support families "
                                 f"'continuous' and 'discrete', not {family!r}")
    if grid_cfg:
        raise ConfigurationError(
            f"grid has keys {sorted(grid_cfg)} not used by family {family!r}")
    return grid


def _fold_plan(config: dict) -> FoldPlan:
    folds = _require(config, "folds")
    return FoldPlan(scheme=folds.get("scheme", "random_k_fold"),
                    k=int(folds.get("k", 10)), seed=int(folds.get("seed", 0)))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(config: dict, out_dir: str, seed: int | None, threads: int) -> dict:
    sim_cfg = dict(_require(config, "simulate"))
    if seed is not None:
        sim_cfg["seed"] = seed
    family = sim_cfg.get("family")
    if family == "dlm_dgp":
        raise ConfigurationError(
            "the panel generator has no trajectory CSV form; use the library API"
        )
    cfg = _simulate.SimConfig(**sim_cfg)
    prefix = _prefix(config, out_dir)
    written = {}
    if family == "continuous_dgp":
        sim = _simulate.simulate_continuous(cfg)
        write_trajectory_csv(prefix + "_data.csv", sim.train)
        write_trajectory_csv(prefix + "_heldout.csv", sim.heldout)
        rows = [
            [t, z, s] for t, z, s in zip(sim.heldout.t, sim.truth.z_heldout,
                                         sim.truth.signal_heldout)
        ]
        _write_csv(prefix + "_truth.csv", ["t", "z", "signal"], rows)
        written = {"data": prefix + "_data.csv",
                   "heldout": prefix + "_heldout.csv",
                   "truth": prefix + "_truth.csv"}
    else:
        sim = _simulate.simulate_discrete(cfg)
        write_trajectory_csv(prefix + "_data.csv", sim.data)
        epochs = np.arange(sim.data.n)
        rows = [
            [sim.data.t[i], sim.truth.z[i, i], sim.truth.signal[i]]
            for i in epochs
        ]
        rows.append([sim.data.n + 1.0, sim.truth.z[-1, -1], sim.truth.next_signal])
        _write_csv(prefix + "_truth.csv", ["t", "z", "signal"], rows)
        written = {"data": prefix + "_data.csv", "truth": prefix + "_truth.csv"}
    return {"command": "simulate", "written": written}


def cmd_fit(config: dict, out_dir: str, seed: int | None, threads: int) -> dict:
    data = _load_data(config)
    model = _require(config, "model")
    family = model.get("family")
    spec = _single_spec(family, model.get("params", {}))
    if family == "continuous":
        fit = _continuous.fit_continuous(data, spec)
    elif family == "discrete":
        fit = _discrete.fit_discrete(data, spec)
    else:
        fit = _discrete.fit_nsdlm(data, spec)
    post = fit.post
    sd = np.sqrt(post.diag_sigma() * post.b_star / max(post.a_star - 1.0, 1e-12))
    payload = {
        "command": "fit",
        "model": spec.label(),
        "n_obs": post.n_obs,
        "posterior": {
            "a_star": post.a_star,
            "b_star": post.b_star,
            "sigma2_mean": post.b_star / (post.a_star - 1.0)
            if post.a_star > 1 else None,
            "coefficient_count": len(post.m),
            "theta_mean_head": post.m[: min(10, len(post.m))].tolist(),
            "theta_sd_head": sd[: min(10, len(sd))].tolist(),
        },
        "numerics": {
            "condition_estimate": post.meta.get("condition_estimate"),
            "applied_jitter": post.meta.get("jitter", 0.0),
            "warnings": post.meta.get("warnings", []),
        },
    }
    prefix = _prefix(config, out_dir)
    _write_json(prefix + "_fit.json", payload)
    return {"command": "fit", "written": {"fit": prefix + "_fit.json"}}


def _stacking_run(config: dict, seed: int | None, threads: int,
                  predict_points=None, collect_latent=False):
    data = _load_data(config)
    model = _require(config, "model")
    family = model.get("family")
    grid = _grid_from_config(family, _require(config, "grid"))
    plan = _fold_plan(config)
    if seed is not None:
        plan = FoldPlan(scheme=plan.scheme, k=plan.k, seed=seed)
    # predictions use the fully marginalized scale so emitted intervals
    # carry nominal coverage
    run = run_stacking(data, grid, plan, predict_points=predict_points,
                       collect_latent=collect_latent, threads=threads,
                       exact_final_scale=predict_points is not None)
    return data, run


def _run_payload(run) -> dict:
    return {
        "labels": list(run.labels),
        "weights": {
            "means": run.means.weights.tolist() if run.means else None,
            "distributions": run.distributions.weights.tolist()
            if run.distributions else None,
            "bma": run.bma.tolist() if run.bma is not None else None,
        },
        "objectives": {
            "means": run.means.objective if run.means else None,
            "distributions": run.distributions.objective
            if run.distributions else None,
        },
        "kkt": run.means.kkt if run.means else None,
        "log_evidences": run.log_evidences.tolist()
        if run.log_evidences is not None else None,
        "dropped": [run.labels[g] for g in run.dropped],
    }


def cmd_stack(config: dict, out_dir: str, seed: int | None, threads: int) -> dict:
    data, run = _stacking_run(config, seed, threads)
    prefix = _prefix(config, out_dir)
    payload = {"command": "stack", **_run_payload(run)}
    _write_json(prefix + "_stack.json", payload)
    rows = []
    obs = data.observed()
    for record in run.records:
        for j, idx in enumerate(record.valid_idx):
            row = [record.fold, obs.t[idx], obs.y[idx]]
            row += list(record.means[j])
            rows.append(row)
    header = ["fold", "t", "y"] + [f"mean_{i}" for i in range(len(run.labels))]
    _write_csv(prefix + "_folds.csv", header, rows)
    return {"command": "stack", "written": {"stack": prefix + "_stack.json",
                                            "folds": prefix + "_folds.csv"}}


def _prediction_targets(config: dict, data: TrajectoryDataset):
    predict_cfg = config.get("predict", {})
    points = predict_cfg.get("points", "targets")
    if points == "targets":
        idx = data.target_indices
        if len(idx) == 0:
            raise ConfigurationError(
                "no blank-response rows to predict; give predict.points a file"
            )
        sub = data.subset(idx)
        return sub.t, sub.locations, sub.X, np.full(len(idx), np.nan)
    target = read_trajectory_csv(points)
    return target.t, target.locations, target.X, target.y


def cmd_predict(config: dict, out_dir: str, seed: int | None, threads: int) -> dict:
    data = _load_data(config)
    predict_cfg = config.get("predict", {})
    mode = predict_cfg.get("mode", "distributions")
    level = float(predict_cfg.get("level", 0.95))
    if not 0.0 < level < 1.0:
        raise ConfigurationError("predict.level must be inside (0, 1)")
    times, locs, x_new, y_true = _prediction_targets(config, data)
    _, run = _stacking_run(config, seed, threads,
                           predict_points=(times, locs, x_new),
                           collect_latent=True)
    mixtures = run.final_mixtures(mode)
    alpha = (1.0 - level) / 2.0
    rows = []
    logdens = []
    for i, mix in enumerate(mixtures):
        mean = mix.mean()
        lo = mix.quantile(alpha)
        hi = mix.quantile(1.0 - alpha)
        ld = mix.logpdf(float(y_true[i])) if math.isfinite(y_true[i]) else math.nan
        logdens.append(ld)
        rows.append([times[i], locs[i, 0], locs[i, 1], y_true[i], mean, lo, hi, ld])
    header = ["t", "x", "y", "response", "mean",
              f"q{100 * alpha:g}", f"q{100 * (1 - alpha):g}", "logdens"]
    prefix = _prefix(config, out_dir)
    _write_csv(prefix + "_predictions.csv", header, rows)

    report = {"command": "predict", "mode": mode, "level": level,
              **_run_payload(run)}
    finite = np.isfinite(y_true)
    if finite.any():
        means = np.array([r[4] for r in rows])
        report["metrics"] = {
            "mspe": _metrics.mspe(means[finite], y_true[finite]),
            "mlpd": _metrics.mlpd(np.array(logdens)[finite]),
            "coverage": float(np.mean([
                rows[i][5] <= y_true[i] <= rows[i][6]
                for i in np.flatnonzero(finite)
            ])),
        }
    _write_json(prefix + "_report.json", report)
    return {"command": "predict",
            "written": {"predictions": prefix + "_predictions.csv",
                        "report": prefix + "_report.json"}}


def read_predictions_csv(path: str) -> dict[str, np.ndarray]:
    """Re-ingest an emitted predictions file into column arrays."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = {name: np.array([
        float(r[i]) if r[i] != "" else np.nan for r in rows
    ]) for i, name in enumerate(header)}
    if "mean" not in cols or "t" not in cols:
        raise DataValidationError(f"{path}: not a predictions file")
    return cols


def cmd_metrics(config: dict, out_dir: str, seed: int | None, threads: int) -> dict:
    metrics_cfg = _require(config, "metrics")
    for key in ("predictions", "truth"):
        if key not in metrics_cfg:
            raise ConfigurationError(f"config key metrics.{key} is required")
    preds = read_predictions_csv(metrics_cfg["predictions"])
    with open(metrics_cfg["truth"], encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    truth_cols = {name: np.array([
        float(r[i]) if r[i].strip() != "" else np.nan for r in rows
    ]) for i, name in enumerate(header)}
    if "t" not in truth_cols:
        raise DataValidationError("truth file needs a t column")
    truth_key = "signal" if "signal" in truth_cols else "response"
    order = {t: i for i, t in enumerate(truth_cols["t"])}
    missing = [t for t in preds["t"] if t not in order]
    if missing:
        raise DataValidationError(
            f"truth file lacks {len(missing)} predicted time stamps")
    idx = np.array([order[t] for t in preds["t"]])
    truths = truth_cols[truth_key][idx]
    if not np.isfinite(truths).all():
        raise DataValidationError(
            "truth file has blank values at predicted time stamps")
    out_rows = [["mspe", _metrics.mspe(preds["mean"], truths)]]
    if "z" in truth_cols and "z_mean" in preds:
        out_rows.append(["mse_z", _metrics.mse_z(preds["z_mean"],
                                                 truth_cols["z"][idx])])
    if "logdens" in preds and np.isfinite(preds["logdens"]).any():
        finite = np.isfinite(preds["logdens"])
        out_rows.append(["mlpd", _metrics.mlpd(preds["logdens"][finite])])
    q_cols = sorted(k for k in preds if k.startswith("q"))
    if "response" in preds and len(q_cols) == 2:
        finite = np.isfinite(preds["response"])
        if finite.any():
            lo, hi = preds[q_cols[0]][finite], preds[q_cols[1]][finite]
            resp = preds["response"][finite]
            covered = (np.minimum(lo, hi) <= resp) & (resp <= np.maximum(lo, hi))
            out_rows.append(["coverage", float(covered.mean())])
    prefix = _prefix(config, out_dir)
    _write_csv(prefix + "_metrics.csv", ["metric", "value"], out_rows)
    return {"command": "metrics",
            "written": {"metrics": prefix + "_metrics.csv"}}


def cmd_diagnose(config: dict, out_dir: str, seed: int | None, threads: int) -> dict:
    diag = dict(_require(config, "diagnose"))
    mode = diag.get("mode", "concentration")
    run_seed = int(diag.get("seed", 0) if seed is None else seed)
    prefix = _prefix(config, out_dir)
    if mode == "concentration":
        report = _diagnostics.sigma_concentration_check(
            n_list=list(diag.get("n_list", [50, 200])),
            replicates=int(diag.get("replicates", 5)),
            seed=run_seed,
            n_epochs=int(diag.get("epochs", 4)),
            alpha=float(diag.get("alpha", 1.0)),
            delta_z=float(diag.get("delta_z", 1.0)),
            kernel=KernelSpec.matern(float(diag.get("phi", 0.5)),
                                     float(diag.get("nu", 1.0))),
        )
        rows = [[r["n"], r["median_posterior_mean"], r["median_interval_width"],
                 r["replicates"]] for r in report.csv_rows()]
        _write_csv(prefix + "_diagnose.csv",
                   ["n", "median_posterior_mean", "median_interval_width",
                    "replicates"], rows)
        verdict = {"widths_decreasing": report.widths_decreasing}
    elif mode == "variance_decay":
        n_list = list(diag.get("n_list", [50, 200, 800]))
        draws = int(diag.get("targets_per_draw", 5))
        kernel = KernelSpec.matern(float(diag.get("phi", 0.5)),
                                   float(diag.get("nu", 1.0)))
        rows = []
        for n in n_list:
            vals = []
            for rep in range(draws):
                rng = _simulate.stream(run_seed + rep, "locations")
                locs = rng.uniform(0, 1, size=(int(n), 2))
                target = rng.uniform(0, 1, size=2)
                inp = _diagnostics.VarianceTermInput(
                    locations=locs, target=target,
                    alpha=float(diag.get("alpha", 1.0)),
                    delta_z_prime=float(diag.get("delta_z", 1.0)),
                    kernel=kernel, sigma_star=1.0,
                    epoch=int(diag.get("epochs", 2)),
                )
                vals.append(_diagnostics.variance_term_EA(inp))
            rows.append([int(n), float(np.median(vals)), draws])
        _write_csv(prefix + "_diagnose.csv",
                   ["n", "median_variance_term", "draws"], rows)
        medians = [r[1] for r in rows]
        verdict = {"decreasing": all(b < a for a, b in zip(medians, medians[1:]))}
    else:
        raise ConfigurationError(f"unknown diagnose mode {mode!r}")
    _write_json(prefix + "_diagnose.json",
                {"command": "diagnose", "mode": mode, **verdict})
    return {"command": "diagnose",
            "written": {"diagnose": prefix + "_diagnose.csv",
                        "summary": prefix + "_diagnose.json"}}


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "stack": cmd_stack,
    "predict": cmd_predict,
    "metrics": cmd_metrics,
    "diagnose": cmd_diagnose,
}


def run(command: str, config: dict, out_dir: str = ".", seed: int | None = None,
        threads: int = 1) -> dict:
    """Execute one subcommand; returns the artifact manifest."""
    if command not in COMMANDS:
        raise ConfigurationError(f"unknown command {command!r}")
    return COMMANDS[command](config, out_dir, seed, threads)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="trajstack",
        description="Conjugate Bayesian trajectory models with predictive stacking",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel candidate fits")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
        manifest = run(args.command, config, out_dir=args.out, seed=args.seed,
                       threads=args.threads)
    except TrajstackError as exc:
        payload = {
            "error": type(exc).__name__,
            "module": type(exc).__module__,
            "operation": args.command,
            "message": str(exc),
        }
        try:
            _write_json(os.path.join(args.out, "error.json"), payload)
        except OSError:
            pass
        print(json.dumps(payload), file=sys.stderr)
        return 1
    print(json.dumps(_round12(manifest), sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
