"""
cli.py - Command-line entry point: generate, train, eval and repro runs driven
by one JSON config file.

    run_nsindy.py generate --config=run.json
    run_nsindy.py train --config=run.json --n_max=50 --set=train.lr0=0.02
    run_nsindy.py eval --config=run.json --metrics=mse,hamiltonian --horizon=100
    run_nsindy.py repro table1

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""
import json
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from absl import app, flags, logging

from nsindy import data, evaluate, train, utils
from nsindy.autodiff import AutodiffError
from nsindy.data import DataError
from nsindy.integrate import IntegrationError, solve_ivp
from nsindy.models import ModelError, StructureError
from nsindy.params import (DESK, FULL, REPRO_TABLES, ConfigError, ReproRow, RunConfig, ScaleParams,
                           load_config, output_root, parse_config, parse_override, scale_name)

FLAGS = flags.FLAGS

COMMANDS = ("generate", "train", "eval", "repro")
METRICS = ("mse", "dEdt", "dSdt", "hamiltonian")
RUNTIME_ERRORS = (DataError, IntegrationError, AutodiffError, StructureError, train.TrainingError, OSError)

flags.DEFINE_string("config", None, "Path to the JSON run config")
flags.DEFINE_integer("seed", None, "Override the config seed")
flags.DEFINE_string("output_dir", None, "Override the output directory (for repro, the output root)")
flags.DEFINE_integer("n_max", None, "Override train.n_max")
flags.DEFINE_boolean("no_prune", False, "Disable magnitude pruning")
flags.DEFINE_integer("threads", 1, "Torch threads; 1 makes runs bit-reproducible", lower_bound=1)
flags.DEFINE_float("horizon", None, "Rollout horizon in seconds for eval traces")
flags.DEFINE_list("metrics", None, f"Metrics to evaluate, subset of {list(METRICS)}")
flags.DEFINE_string("report", None, "Report directory for eval (default: the config output_dir)")
flags.DEFINE_enum("scale", "desk", ["desk", "full"], "Default counts and repro iteration counts")
flags.DEFINE_multi_string("set", [], "Override a config entry, key.path=value")


def _scale():
    return FULL if FLAGS.scale == "full" else DESK


def _overrides(for_repro=False):
    out = [parse_override(text) for text in FLAGS.set]
    if FLAGS.seed is not None:
        out.append(("seed", FLAGS.seed))
    if FLAGS.output_dir is not None and not for_repro:
        out.append(("output_dir", FLAGS.output_dir))
    if FLAGS.n_max is not None:
        out.append(("train.n_max", FLAGS.n_max))
    if FLAGS.no_prune:
        out.append(("train.prune_enabled", False))
    return out


def _load_cfg() -> RunConfig:
    if FLAGS.config is None:
        raise app.UsageError("--config is required", exitcode=2)
    return load_config(FLAGS.config, _overrides(), _scale())


def _summary(dataset: data.Dataset) -> str:
    counts = dataset.counts()
    return (f"{dataset.system}: train/val/test = {counts.get('train')}/{counts.get('val')}/{counts.get('test')}, "
            f"{dataset.num_samples} samples at dt={dataset.dt:g}")


def cmd_generate(cfg: RunConfig) -> Path:
    utils.log_step(0, "Init", True)
    dataset = data.generate(cfg.system, cfg.counts, cfg.seed)
    utils.log_step(1, "Dataset generation")
    data.save(dataset, cfg.dataset)
    utils.log_step(2, "Dataset write")
    utils.log_artifacts(cfg.dataset, "dataset")
    print(f"[nsindy] {_summary(dataset)} -> {cfg.dataset}")
    utils.save_run(cfg.dataset / "timings.json")
    return cfg.dataset


def load_or_generate(cfg: RunConfig) -> data.Dataset:
    if (cfg.dataset / "meta.json").exists():
        dataset = data.load(cfg.dataset)
        if dataset.system != cfg.system.name:
            raise ConfigError("dataset", f"{cfg.dataset} holds {dataset.system!r}, config asks for {cfg.system.name!r}")
        if dataset.counts() != cfg.counts or dataset.seed != cfg.seed:
            logging.warning("dataset %s has counts %s seed %d, config asks for %s seed %d; using the dataset",
                            cfg.dataset, dataset.counts(), dataset.seed, cfg.counts, cfg.seed)
        return dataset
    logging.info("no dataset at %s, generating it", cfg.dataset)
    dataset = data.generate(cfg.system, cfg.counts, cfg.seed)
    data.save(dataset, cfg.dataset)
    return dataset


def _score(cfg: RunConfig, model, report: evaluate.FitReport):
    if model.dictionary is None:
        return None
    truth = evaluate.truth_matrix(cfg.system, model.dictionary, model.kind)
    if truth is None:
        return None
    names = model.dictionary.with_var_names(cfg.system.var_names).names()
    score = evaluate.score_coefficients(model.xi, truth, names)
    report.score = asdict(score)
    report.metrics["max_abs_err"] = score.max_abs_err
    report.metrics["support_exact"] = float(score.support_exact)
    return score


def cmd_train(cfg: RunConfig) -> Path:
    utils.log_step(0, "Init", True)
    dataset = load_or_generate(cfg)
    utils.log_step(1, "Dataset load")
    model = cfg.build_model()
    report = train.train_loop(dataset, model, cfg.train, report_dir=cfg.output_dir)
    utils.log_step(2, "Training")

    score = _score(cfg, model, report)
    if report.damping is not None and cfg.system.damping is not None:
        report.metrics["delta_abs_err"] = abs(report.damping - cfg.system.damping)
    report.config = cfg.to_dict()
    evaluate.write_report(report, cfg.output_dir)
    torch.save(model.state_dict(), cfg.output_dir / "model.pt")
    with open(cfg.output_dir / "config.json", "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)

    for line in report.equations:
        print(f"[nsindy] {line}")
    if score is not None:
        utils.log_quality("coefficients", {"support_exact": score.support_exact, "max_abs_err": score.max_abs_err})
        print(f"[nsindy] support exact: {score.support_exact}, max abs error: {score.max_abs_err:.3g}")
    utils.log_artifacts(cfg.output_dir, "report")
    utils.save_run(cfg.output_dir / "timings.json")
    return cfg.output_dir


def _default_metrics(kind: str) -> List[str]:
    if kind == "generic":
        return ["mse", "dEdt", "dSdt"]
    if kind in ("hamiltonian", "port_hamiltonian"):
        return ["mse", "hamiltonian"]
    return ["mse"]


def _check_metrics(metrics: List[str], kind: str):
    for metric in metrics:
        if metric not in METRICS:
            raise app.UsageError(f"unknown metric {metric!r}, expected one of {list(METRICS)}", exitcode=2)
        if metric in ("dEdt", "dSdt") and kind != "generic":
            raise app.UsageError(f"metric {metric} needs a generic model, report holds a {kind} model", exitcode=2)
        if metric == "hamiltonian" and kind not in ("hamiltonian", "port_hamiltonian"):
            raise app.UsageError(f"metric hamiltonian needs a hamiltonian model, report holds a {kind} model",
                                 exitcode=2)


def load_trained(cfg: RunConfig, report_dir: Path):
    report = evaluate.read_report(report_dir)
    if report.model_kind != cfg.model.kind:
        raise ConfigError("model.kind", f"report holds a {report.model_kind} model, config builds {cfg.model.kind}")
    model = cfg.build_model()
    model.load_state_dict(torch.load(report_dir / "model.pt"))
    model.eval()
    return report, model


def _trace_grid(cfg: RunConfig, horizon: Optional[float]) -> torch.Tensor:
    t_final = horizon if horizon is not None else cfg.system.t_final
    steps = int(round(t_final / cfg.system.dt))
    return torch.arange(steps + 1, dtype=torch.float64) * cfg.system.dt


def cmd_eval(cfg: RunConfig, report_dir: Path, metrics: Optional[List[str]], horizon: Optional[float]) -> Path:
    utils.log_step(0, "Init", True)
    report, model = load_trained(cfg, report_dir)
    metrics = metrics or _default_metrics(model.kind)
    _check_metrics(metrics, model.kind)
    if horizon is not None and not horizon > 0:
        raise app.UsageError(f"--horizon must be positive, got {horizon}", exitcode=2)
    dataset = data.load(cfg.dataset)
    dataset.check_dimension(model.n)
    test = dataset.split("test")
    utils.log_step(1, "Model and dataset load")

    if "mse" in metrics:
        series = evaluate.time_instant_mse(model, test, dataset.times, cfg.solver)
        evaluate.write_series(report_dir / "mse.tsv", series)
        half = series.values[len(series) // 2:]
        report.metrics["mse_median_second_half"] = float(np.median(half))
        if series.partial:
            logging.warning("mse series is partial, failed trajectories %s", series.failures)
        utils.log_step(2, "Time-instantaneous MSE")

    trace_metrics = [m for m in metrics if m != "mse"]
    if trace_metrics:
        times = _trace_grid(cfg, horizon)
        states = solve_ivp(model, test[0, 0], times, cfg.solver).states
        if "hamiltonian" in trace_metrics:
            trace = evaluate.hamiltonian_trace(model, states, times)
            evaluate.write_series(report_dir / "hamiltonian.tsv", trace)
            report.metrics["hamiltonian_drift"] = evaluate.relative_drift(trace)
            print(f"[nsindy] relative H drift over {float(times[-1]):g}s: {report.metrics['hamiltonian_drift']:.3g}")
        if "dEdt" in trace_metrics or "dSdt" in trace_metrics:
            de, ds = evaluate.energy_entropy_rates(model, states, times)
            evaluate.write_series(report_dir / "dEdt.tsv", de)
            evaluate.write_series(report_dir / "dSdt.tsv", ds)
            report.metrics["max_abs_dEdt"] = float(np.abs(de.values).max())
            report.metrics["min_dSdt"] = float(ds.values.min())
        utils.log_step(3, "Rollout traces")

    evaluate.write_report(report, report_dir)
    utils.log_artifacts(report_dir, "eval")
    utils.save_run(report_dir / "eval_timings.json")
    return report_dir


def _relative_errors(score: evaluate.CoefficientScore) -> float:
    worst = 0.0
    for row in score.rows:
        if row["truth"] == 0.0:
            return float("inf")
        worst = max(worst, row["error"] / abs(row["truth"]))
    return worst


def _row_rollout(cfg: RunConfig, model, dataset: data.Dataset, horizon: float):
    times = _trace_grid(cfg, horizon)
    states = solve_ivp(model, dataset.split("test")[0, 0], times, cfg.solver).states
    return times, states


def _run_row(row: ReproRow, table: str, scale: int, rootdir) -> Dict:
    """Train every model of a row; returns the row record with its checks."""
    record = {"row": row.label, "checks": {}, "fits": {}}
    kinds = [row.kind] + (["plain"] if row.paired_plain else [])
    fits = {}
    for kind in kinds:
        cfg = parse_config(row.config(scale, kind, rootdir=rootdir), _overrides(for_repro=True), scale)
        dataset = load_or_generate(cfg)
        model = cfg.build_model()
        report = train.train_loop(dataset, model, cfg.train, report_dir=cfg.output_dir)
        score = _score(cfg, model, report)
        report.config = cfg.to_dict()
        evaluate.write_report(report, cfg.output_dir)
        torch.save(model.state_dict(), cfg.output_dir / "model.pt")
        utils.log_artifacts(cfg.output_dir, f"{row.label}/{kind}")
        fits[kind] = (cfg, model, report, score, dataset)
        record["fits"][kind] = {"equations": report.equations, "metrics": report.metrics}
        utils.log_step(len(record["fits"]), f"{table}/{row.label} {kind} fit")

    cfg, model, report, score, dataset = fits[row.kind]
    checks = record["checks"]
    if score is not None:
        checks["support_exact"] = score.support_exact
        if row.relative:
            checks["relative_error"] = _relative_errors(score) <= row.coeff_tol
        else:
            checks["max_abs_err"] = score.max_abs_err <= row.coeff_tol
        record["max_abs_err"] = score.max_abs_err
        record["terms"] = score.rows
    if row.delta_tol is not None:
        record["delta"] = report.damping
        checks["delta"] = abs(report.damping - cfg.system.damping) <= row.delta_tol

    if row.drift_tol is not None:
        times, states = _row_rollout(cfg, model, dataset, row.horizon)
        drift = evaluate.relative_drift(evaluate.hamiltonian_trace(model, states, times))
        record["hamiltonian_drift"] = drift
        checks["hamiltonian_drift"] = drift <= row.drift_tol
        if "plain" in fits:
            p_cfg, p_model, _, _, _ = fits["plain"]
            try:
                _, p_states = _row_rollout(p_cfg, p_model, dataset, row.horizon)
                p_drift = evaluate.relative_drift(evaluate.true_hamiltonian_trace(cfg.system, p_states, times))
            except IntegrationError as e:
                logging.warning("%s plain rollout failed: %s", row.label, e)
                p_drift = float("inf")
            record["plain_hamiltonian_drift"] = p_drift
            checks["plain_drift_larger"] = p_drift >= 10 * drift

    if row.kind == "generic":
        times, states = _row_rollout(cfg, model, dataset, None)
        de, ds = evaluate.energy_entropy_rates(model, states, times)
        with torch.no_grad():
            f = model(times, states)
            rate_scale = float((model.potential_gradient(states).abs() * f.abs()).sum(-1).max())
        record["max_abs_dEdt"] = float(np.abs(de.values).max())
        record["min_dSdt"] = float(ds.values.min())
        checks["dEdt"] = record["max_abs_dEdt"] <= 1e-10 * max(rate_scale, 1.0)
        checks["dSdt"] = record["min_dSdt"] >= -1e-12
        if "plain" in fits:
            p_cfg, p_model, _, _, _ = fits["plain"]
            try:
                _, p_states = _row_rollout(p_cfg, p_model, dataset, None)
                p_de, _ = evaluate.reference_energy_entropy_rates(cfg.system, p_model, p_states, times)
                record["plain_max_abs_dEdt"] = float(np.abs(p_de.values).max())
            except IntegrationError as e:
                logging.warning("%s plain rollout failed: %s", row.label, e)
    return record


def cmd_repro(table: str) -> int:
    if table not in REPRO_TABLES:
        raise app.UsageError(f"unknown table {table!r}, expected one of {sorted(REPRO_TABLES)}", exitcode=2)
    scale = _scale()
    rootdir = Path(FLAGS.output_dir) if FLAGS.output_dir else output_root()
    utils.log_step(0, "Init", True)
    records, failed = [], 0
    for row in REPRO_TABLES[table]:
        try:
            record = _run_row(row, table, scale, rootdir)
            passed = bool(record["checks"]) and all(record["checks"].values())
        except RUNTIME_ERRORS as e:
            logging.error("%s/%s failed: %s", table, row.label, e)
            record, passed = {"row": row.label, "error": str(e), "checks": {}}, False
        record["passed"] = passed
        failed += not passed
        records.append(record)
        for kind, fit in record.get("fits", {}).items():
            for line in fit["equations"]:
                print(f"[nsindy] {row.label} ({kind}) identified: {line}")
        for term in record.get("terms", []):
            print(f"         [nsindy] {term['term']}: identified {term['learned']:.6f}, "
                  f"ground truth {term['truth']:.6f}")
        detail = ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in record["checks"].items())
        utils.log_result(f"{table}/{row.label}", passed, detail or record.get("error", ""))
        utils.log_quality(row.label, record)

    summary = ScaleParams(scale, rootdir=rootdir).reprodir(f"summary-{table}.json")
    summary.parent.mkdir(parents=True, exist_ok=True)
    with open(summary, "w") as f:
        json.dump({"table": table, "scale": scale_name(scale), "rows": records}, f, indent=2, default=str)
    utils.save_run(ScaleParams(scale, rootdir=rootdir).measuredir() / f"repro-{table}.json")
    return 1 if failed else 0


def main(argv):
    args = argv[1:]
    if not args or args[0] not in COMMANDS:
        raise app.UsageError(f"expected a command, one of {list(COMMANDS)}", exitcode=2)
    command, rest = args[0], args[1:]
    utils.reset_run()
    utils.set_threads(FLAGS.threads)
    try:
        if command == "repro":
            if len(rest) != 1:
                raise app.UsageError("repro takes one table name", exitcode=2)
            return cmd_repro(rest[0])
        if rest:
            raise app.UsageError(f"unexpected arguments {rest}", exitcode=2)
        cfg = _load_cfg()
        if command == "generate":
            cmd_generate(cfg)
        elif command == "train":
            cmd_train(cfg)
        else:
            report_dir = Path(FLAGS.report) if FLAGS.report else cfg.output_dir
            cmd_eval(cfg, report_dir, FLAGS.metrics, FLAGS.horizon)
        return 0
    except (ConfigError, ModelError) as e:
        if isinstance(e, StructureError):
            logging.error("%s", e)
            return 1
        raise app.UsageError(str(e), exitcode=2) from e
    except FileNotFoundError as e:
        logging.error("%s", e)
        return 1
    except RUNTIME_ERRORS as e:
        logging.error("%s", e)
        return 1


def execute(argv) -> int:
    """Parse flags from argv and run a command; returns the exit code."""
    FLAGS.unparse_flags()
    try:
        remaining = FLAGS(list(argv))
    except flags.Error as e:
        logging.error("%s", e)
        return 2
    try:
        return main(remaining)
    except app.UsageError as e:
        logging.error("%s", e)
        return e.exitcode
