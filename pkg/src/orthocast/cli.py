"""Command-line pipeline: synth -> train -> rdd -> evaluate, plus checks.

One JSON config file drives every stage; command-line flags win over the
file.  All commands are reproducible from (config, seed): rerunning writes
byte-identical files.  Exit codes: 0 success, 2 config error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .encodings import LINEAR, check_encoding_kind, encoded_dim
from .errors import ConfigError, DataError, NumericalError
from .evaluation import (
    MetricsReport,
    baseline_cate_fn,
    cate_histogram,
    convergence_sweep,
    draw_population_sample,
    fit_direct_baseline,
    forecast_metrics,
    forecast_predictions,
    forecaster_cate_fn,
    load_baseline,
    oracle_cate_rmse,
    orthogonality_check,
    random_direction_pair,
    rloss_hessian_check,
    save_baseline,
)
from .learners import (
    BINARY_CE,
    MSE,
    RLOSS,
    SOFTMAX_CE,
    LearnerSpec,
    fit_mlp,
    gradient_check,
)
from .orthogonal import (
    empirical_rloss,
    fit_causal_forecaster,
    fit_nuisance,
    load_forecaster,
    residualize,
    save_forecaster,
    split_sample,
)
from .rdd import RddConfig, build_causal_test_set, load_test_set, save_test_set, score_predictions
from .synthetic import SynthConfig, generate
from .timeseries import FeaturizerConfig, load_dataset, save_dataset

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "encoding": "one_hot",
    "jobs": 1,
    "synth": {
        "n_series": 2000,
        "L": 24,
        "tau": 8,
        "d": 5,
        "p_s": 2,
        "p_x": 2,
        "theta_form": "monotone_decreasing",
        "confounding_strength": 2.0,
        "noise_y": 0.25,
        "noise_t": 1.0,
        "ar_coeff": 0.7,
        "rdd_step_mode": True,
        "min_run": 4,
        "weekday_effect": 0.0,
    },
    "featurizer": {
        "lag_window_k": 8,
        "pre_tau_lags": 4,
        "include_aggregates": True,
        "normalize": True,
        "include_time": True,
    },
    "learners": {
        "m": {"kind": "ridge", "ridge_lambda": 1e-3},
        "e": {"kind": "mlp", "mlp_hidden": [32], "mlp_epochs": 40, "mlp_batch": 256, "mlp_lr": 0.05},
        "theta": {"kind": "ridge", "ridge_lambda": 1e-3},
        "direct": {"kind": "ridge", "ridge_lambda": 1e-3},
    },
    "rdd": {
        "h": 14,
        "kernel": "triangular",
        "ridge_lambda": None,
        "min_side": 3,
        "trim_q": 0.025,
        "weekday_correction": False,
        "weekday_mode": "active",
        "comparable_grouping": "all",
    },
    "eval": {"n_contexts": 500, "grid_seed": 1234, "histogram_bins": 40},
    "sweep": {"ns": [500, 2000, 8000], "n_train_seeds": 3},
    "check": {"n_zeta": 100, "n_pairs": 20, "n_samples": 100000, "fd_step": 1e-4},
    "io": {},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, dict) and isinstance(out[key], dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None, args: argparse.Namespace) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            config = _deep_merge(config, json.loads(file_path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid config JSON: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    if getattr(args, "encoding", None) is not None:
        config["encoding"] = check_encoding_kind(args.encoding)
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        config["jobs"] = args.jobs
    return config


def synth_config(config: dict) -> SynthConfig:
    try:
        return SynthConfig(
            encoding=config["encoding"], seed=config["seed"], **config["synth"]
        )
    except TypeError as exc:
        raise ConfigError(f"invalid synth section: {exc}") from exc


def featurizer_config(config: dict) -> FeaturizerConfig:
    try:
        return FeaturizerConfig(**config["featurizer"])
    except TypeError as exc:
        raise ConfigError(f"invalid featurizer section: {exc}") from exc


def rdd_config(config: dict) -> RddConfig:
    try:
        return RddConfig(**config["rdd"])
    except TypeError as exc:
        raise ConfigError(f"invalid rdd section: {exc}") from exc


def learner_specs(config: dict, d: int) -> dict[str, LearnerSpec]:
    encoding = config["encoding"]
    q = encoded_dim(encoding, d) if encoding != LINEAR else 1
    if encoding == LINEAR:
        e_loss = MSE
    elif encoding == "one_hot":
        e_loss = SOFTMAX_CE
    else:
        e_loss = BINARY_CE
    roles = {
        "m": {"loss": MSE, "output_dim": 1},
        "e": {"loss": e_loss, "output_dim": q},
        "theta": {"loss": RLOSS, "output_dim": q},
        "direct": {"loss": MSE, "output_dim": 1},
    }
    specs = {}
    for role, fixed in roles.items():
        section = dict(config["learners"].get(role, {}))
        section.pop("loss", None)
        section.pop("output_dim", None)
        if "mlp_hidden" in section:
            section["mlp_hidden"] = tuple(section["mlp_hidden"])
        section.setdefault("seed", config["seed"])
        try:
            specs[role] = LearnerSpec(**fixed, **section)
        except TypeError as exc:
            raise ConfigError(f"invalid learners.{role} section: {exc}") from exc
    if encoding == LINEAR and specs["e"].kind == "mlp":
        specs["e"] = replace(specs["e"], kind="ridge")
    return specs


def _out_dir(args, config) -> Path:
    out = getattr(args, "out", None) or config["io"].get("out_dir") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = load_config(args.config, args)
    cfg = synth_config(config)
    out = _out_dir(args, config)
    ds, _oracle = generate(cfg)
    data_path = out / "dataset.jsonl"
    save_dataset(ds, data_path, format="jsonl")
    # config + seed fully determine the oracle; the descriptor reconstructs it
    descriptor = {"synth": config["synth"], "encoding": config["encoding"], "seed": config["seed"]}
    (out / "oracle.json").write_text(json.dumps(descriptor, sort_keys=True) + "\n")
    print(
        f"wrote {data_path} n_series={cfg.n_series} L={cfg.L} d={cfg.d} "
        f"encoding={cfg.encoding} seed={cfg.seed}"
    )
    return 0


def _train_once(config: dict, ds, seed: int, cross_fit: bool):
    featurizer = featurizer_config(config)
    specs = learner_specs(config, ds.d)
    m_spec = replace(specs["m"], seed=seed)
    e_spec = replace(specs["e"], seed=seed)
    theta_spec = replace(specs["theta"], seed=seed)
    forecaster = fit_causal_forecaster(
        ds, featurizer, m_spec, e_spec, theta_spec,
        encoding=config["encoding"], seed=seed, cross_fit=cross_fit,
    )
    baseline = fit_direct_baseline(ds, replace(specs["direct"], seed=seed), featurizer)
    return forecaster, baseline


def cmd_train(args) -> int:
    config = load_config(args.config, args)
    ds = load_dataset(args.data, format="jsonl")
    if args.encoding is None:
        config["encoding"] = ds.encoding_kind
    out = _out_dir(args, config)
    seed = config["seed"]
    forecaster, baseline = _train_once(config, ds, seed, args.cross_fit)

    # report the fitted effect-model loss against the zero-effect baseline
    member = forecaster.members[0] if hasattr(forecaster, "members") else forecaster
    _, s2 = split_sample(ds, seed)
    samples = residualize(s2, member.nuisance)
    fitted_loss = empirical_rloss(member.theta, samples)
    zero_loss = float(np.mean(np.array([smp.y_tilde for smp in samples]) ** 2))

    model_path = out / "forecaster.json"
    save_forecaster(forecaster, model_path)
    save_baseline(baseline, out / "baseline.json")
    print(
        f"wrote {model_path} effect_loss={fitted_loss:.6f} zero_effect_loss={zero_loss:.6f}"
    )
    if fitted_loss > zero_loss:
        print("warning: fitted effect loss above the zero-effect baseline")
    return 0


def cmd_rdd(args) -> int:
    config = load_config(args.config, args)
    ds = load_dataset(args.data, format="jsonl")
    cfg = rdd_config(config)
    out = _out_dir(args, config)
    test = build_causal_test_set(ds, cfg)
    csv_path = out / "causal_test_set.csv"
    save_test_set(test, csv_path)
    if test.n_estimated == 0:
        print(f"wrote {csv_path} (empty: no eligible switches)")
    else:
        eligible_fraction = test.n_estimated / test.n_switches if test.n_switches else 0.0
        print(
            f"wrote {csv_path} entries={len(test.entries)} "
            f"switches={test.n_switches} estimated={test.n_estimated} "
            f"eligible_fraction={eligible_fraction:.3f} retention={test.retention:.3f} "
            f"trim_bounds=({test.trim_bounds[0]:.6g}, {test.trim_bounds[1]:.6g})"
        )
    return 0


def _oracle_from_descriptor(path: Path):
    descriptor = json.loads(path.read_text())
    cfg = SynthConfig(
        encoding=descriptor["encoding"], seed=descriptor["seed"], **descriptor["synth"]
    )
    _, oracle = generate(cfg)
    return oracle


def _evaluate_pair(config: dict, ds, forecaster, baseline, test, oracle):
    n_contexts = config["eval"]["n_contexts"]
    grid_seed = config["eval"]["grid_seed"]
    reports = []
    for tag, model, cate_fn in (
        ("orthogonal", forecaster, forecaster_cate_fn(forecaster)),
        ("direct", baseline, baseline_cate_fn(baseline)),
    ):
        preds, truths = forecast_predictions(model, ds)
        rmse, mae = forecast_metrics(preds, truths)
        rdd_rmse = rdd_mae = float("nan")
        n_entries = 0
        if test is not None and test.entries:
            series_by_id = {s.id: s for s in ds.series}

            def rdd_predictor(series_id, t_i, t_before, t_after, _fn=cate_fn):
                series = series_by_id[series_id]
                if t_i <= series.tau:
                    # model contexts exist only after the cutoff; the entry
                    # is skipped and counted by score_predictions
                    raise DataError("switch before the forecast cutoff")
                return _fn(series, t_i, t_before, t_after)

            rdd_rmse, rdd_mae, _ = score_predictions(test, rdd_predictor)
            n_entries = len(test.entries)
        oracle_rmse = float("nan")
        if oracle is not None:
            oracle_rmse = oracle_cate_rmse(cate_fn, ds, oracle, n_contexts, grid_seed)
        reports.append(
            MetricsReport(
                rmse=rmse,
                mae=mae,
                rdd_rmse=rdd_rmse,
                rdd_mae=rdd_mae,
                oracle_cate_rmse=oracle_rmse,
                n_points=len(preds),
                n_entries=n_entries,
                model_tag=tag,
            )
        )
    return reports


def cmd_evaluate(args) -> int:
    config = load_config(args.config, args)
    ds = load_dataset(args.data, format="jsonl")
    if args.encoding is None:
        config["encoding"] = ds.encoding_kind
    out = _out_dir(args, config)
    test = load_test_set(args.testset) if args.testset else None
    oracle = None
    if args.oracle:
        oracle_path = Path(args.oracle)
        if not oracle_path.exists():
            raise DataError(f"oracle descriptor not found: {args.oracle}")
        oracle = _oracle_from_descriptor(oracle_path)

    all_reports: list[MetricsReport] = []
    if args.seeds is not None and args.seeds > 1:
        for k in range(args.seeds):
            forecaster, baseline = _train_once(config, ds, config["seed"] + k, args.cross_fit)
            all_reports.extend(_evaluate_pair(config, ds, forecaster, baseline, test, oracle))
    else:
        if args.model:
            forecaster = load_forecaster(args.model)
            baseline_path = Path(args.model).with_name("baseline.json")
            if not baseline_path.exists():
                raise DataError(f"baseline artifact not found next to model: {baseline_path}")
            baseline = load_baseline(baseline_path)
        else:
            forecaster, baseline = _train_once(config, ds, config["seed"], args.cross_fit)
        all_reports.extend(_evaluate_pair(config, ds, forecaster, baseline, test, oracle))

    csv_lines = [",".join(MetricsReport.CSV_FIELDS)]
    for report in all_reports:
        csv_lines.append(",".join(str(v) for v in report.to_csv_row()))
    text_lines = [r.to_text() for r in all_reports]
    if args.seeds is not None and args.seeds > 1:
        for tag in ("orthogonal", "direct"):
            group = [r for r in all_reports if r.model_tag == tag]
            for metric in ("rmse", "mae", "rdd_rmse", "rdd_mae", "oracle_cate_rmse"):
                values = np.array([getattr(r, metric) for r in group])
                if np.all(np.isfinite(values)):
                    text_lines.append(
                        f"{tag} {metric}: {values.mean():.6f} +/- {values.std(ddof=1):.6f} "
                        f"({len(values)} seeds)"
                    )
    (out / "metrics.csv").write_text("\n".join(csv_lines) + "\n")
    report_text = "\n".join(text_lines) + "\n"
    (out / "metrics.txt").write_text(report_text)
    print(report_text, end="")
    return 0


def cmd_check(args) -> int:
    config = load_config(args.config, args)
    out = _out_dir(args, config)
    check_cfg = config["check"]
    fd_step = args.fd_step if args.fd_step is not None else check_cfg["fd_step"]
    rng = np.random.default_rng(config["seed"])
    lines: list[str] = []
    rows: list[tuple] = []
    failed = False

    # 1. rank-one loss Hessian in the nuisance outputs
    worst_rel = 0.0
    worst_second = 0.0
    for _ in range(check_cfg["n_zeta"]):
        d = int(rng.integers(1, 9))
        zeta = rng.normal(size=d)
        result = rloss_hessian_check(zeta, fd_step=max(fd_step, 1e-6))
        rel = abs(result.fd_top_eigenvalue - result.analytic_eigenvalue) / result.analytic_eigenvalue
        worst_rel = max(worst_rel, rel)
        worst_second = max(
            worst_second, result.second_eigenvalue_magnitude / result.analytic_eigenvalue
        )
    hessian_ok = worst_rel <= 1e-4 and worst_second <= 1e-6
    failed |= not hessian_ok
    lines.append(
        f"[{'PASS' if hessian_ok else 'FAIL'}] hessian rank-1: worst_rel={worst_rel:.3e} "
        f"worst_second_ratio={worst_second:.3e}"
    )
    rows.append(("hessian_rank1", hessian_ok, worst_rel, worst_second))

    # 2. orthogonality of the residualized loss vs the naive loss
    synth = synth_config(config)
    n_samples = int(check_cfg["n_samples"])
    per_series = synth.L - synth.tau
    needed = max(2, -(-n_samples // per_series))
    ds_cfg = replace(synth, n_series=needed, rdd_step_mode=False)
    _, oracle = generate(ds_cfg)
    sample = draw_population_sample(oracle, n_samples)
    q = sample.t_enc.shape[1]
    ortho_hits = naive_hits = 0
    n_pairs = int(check_cfg["n_pairs"])
    for k in range(n_pairs):
        pair = random_direction_pair(sample.features.shape[1], q, seed=1000 + k)
        est, se = orthogonality_check(sample, pair, fd_step=fd_step, loss="rloss")
        if abs(est) <= 3.0 * se:
            ortho_hits += 1
        est_naive, se_naive = orthogonality_check(sample, pair, fd_step=fd_step, loss="naive")
        if abs(est_naive) > 5.0 * se_naive:
            naive_hits += 1
    ortho_ok = ortho_hits >= int(0.9 * n_pairs)
    naive_ok = naive_hits >= int(0.9 * n_pairs)
    failed |= not (ortho_ok and naive_ok)
    lines.append(
        f"[{'PASS' if ortho_ok else 'FAIL'}] orthogonality (residualized): "
        f"{ortho_hits}/{n_pairs} within 3 SE"
    )
    lines.append(
        f"[{'PASS' if naive_ok else 'FAIL'}] naive-loss contrast: "
        f"{naive_hits}/{n_pairs} exceed 5 SE"
    )
    rows.append(("orthogonality_rloss", ortho_ok, ortho_hits, n_pairs))
    rows.append(("orthogonality_naive_contrast", naive_ok, naive_hits, n_pairs))

    # 3. gradient check of the net on every loss
    spec = LearnerSpec(
        kind="mlp", loss=MSE, output_dim=3, mlp_hidden=(8,), mlp_epochs=1, mlp_batch=16,
        mlp_lr=1e-3, seed=config["seed"],
    )
    X = rng.normal(size=(16, 5))
    for loss_kind in (MSE, SOFTMAX_CE, BINARY_CE, RLOSS):
        model = fit_mlp(X, _check_targets(loss_kind, rng, 16, 3), replace(spec, loss=loss_kind))
        targets = _check_targets(loss_kind, rng, 16, 3)
        err = gradient_check(model, loss_kind, (X, targets), fd_step=min(fd_step, 1e-5) if fd_step <= 1e-3 else fd_step)
        ok = err <= 1e-4
        failed |= not ok
        lines.append(f"[{'PASS' if ok else 'FAIL'}] gradient check {loss_kind}: max_rel_err={err:.3e}")
        rows.append((f"gradient_{loss_kind}", ok, err, 1e-4))

    report = "\n".join(lines) + "\n"
    (out / "check_report.txt").write_text(report)
    with (out / "check_report.csv").open("w") as fh:
        fh.write("check,passed,value,reference\n")
        for name, ok, value, ref in rows:
            fh.write(f"{name},{int(ok)},{value},{ref}\n")
    print(report, end="")
    return 4 if failed else 0


def _check_targets(loss_kind: str, rng: np.random.Generator, n: int, q: int):
    if loss_kind == MSE:
        return rng.normal(size=(n, q))
    if loss_kind == SOFTMAX_CE:
        targets = np.zeros((n, q))
        targets[np.arange(n), rng.integers(0, q, size=n)] = 1.0
        return targets
    if loss_kind == BINARY_CE:
        return (rng.random(size=(n, q)) < 0.5).astype(float)
    return rng.normal(size=n), rng.normal(size=(n, q))


def cmd_sweep(args) -> int:
    config = load_config(args.config, args)
    out = _out_dir(args, config)
    synth = replace(synth_config(config), rdd_step_mode=False)
    specs = learner_specs(config, synth.d)
    result = convergence_sweep(
        synth,
        config["sweep"]["ns"],
        featurizer_config(config),
        specs["m"],
        specs["e"],
        specs["theta"],
        specs["direct"],
        n_train_seeds=config["sweep"]["n_train_seeds"],
        n_contexts=config["eval"]["n_contexts"],
        grid_seed=config["eval"]["grid_seed"],
    )
    lines = ["n_series,rmse_orthogonal,se_orthogonal,rmse_direct,se_direct"]
    for row in result.rows:
        lines.append(
            f"{row.n_series},{row.rmse_orthogonal!r},{row.se_orthogonal!r},"
            f"{row.rmse_direct!r},{row.se_direct!r}"
        )
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    for row in result.rows:
        print(
            f"N={row.n_series}: orthogonal={row.rmse_orthogonal:.4f}"
            f"+/-{row.se_orthogonal:.4f} direct={row.rmse_direct:.4f}+/-{row.se_direct:.4f}"
        )
    if result.aborted:
        print(f"sweep aborted early: {result.error} (partial results written)")
        return 4
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orthocast", description="causal time-series forecasting pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags win over the file)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument(
            "--encoding", choices=["one-hot", "one_hot", "cumulative", "linear"], default=None
        )
        p.add_argument("--jobs", type=int, default=None, help="worker bound for per-series stages")
        p.add_argument("--out", default=None, help="output directory")

    p_synth = sub.add_parser("synth", help="generate a synthetic confounded dataset")
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="fit the causal forecaster and the direct baseline")
    common(p_train)
    p_train.add_argument("--data", required=True, help="dataset JSONL path")
    p_train.add_argument("--cross-fit", action="store_true", help="two-fold averaged forecaster")
    p_train.set_defaults(func=cmd_train)

    p_rdd = sub.add_parser("rdd", help="build the switch-based causal test set")
    common(p_rdd)
    p_rdd.add_argument("--data", required=True)
    p_rdd.set_defaults(func=cmd_rdd)

    p_eval = sub.add_parser("evaluate", help="score forecasts and causal effects")
    common(p_eval)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--model", default=None, help="forecaster artifact (omit to train)")
    p_eval.add_argument("--testset", default=None, help="causal test set CSV")
    p_eval.add_argument("--oracle", default=None, help="oracle descriptor JSON")
    p_eval.add_argument("--seeds", type=int, default=None, help="train/evaluate over k seeds")
    p_eval.add_argument("--cross-fit", action="store_true")
    p_eval.set_defaults(func=cmd_evaluate)

    p_check = sub.add_parser("check", help="numerical verification report")
    common(p_check)
    p_check.add_argument("--fd-step", type=float, default=None)
    p_check.set_defaults(func=cmd_check)

    p_sweep = sub.add_parser("sweep", help="sample-size convergence sweep")
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
