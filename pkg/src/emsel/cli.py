"""Command-line surface: analyze, simulate, perturb.

Exit codes: 0 success, 2 validation error, 3 numerical failure. All file
writes are atomic (write temp, rename); identical invocation and seed give
byte-identical report bodies, with timing confined to the manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .dataset import ColumnSchema, Dataset, DesignSpec, center_columns, expand_interactions, load_csv
from .errors import NumericalError, ValidationError
from .nuisance import ForestParams, estimate_nuisance
from .pivot import AnalysisConfig, SelectiveReport, selective_analysis, snooping_analysis
from .robinson import (FixedModelInference, estimate_ate, fixed_model_inference,
                       naive_linear_model, transform, univariate_screening)
from .simulation import SimConfig, perturbation_experiment, run_study

METHODS = ("naive-linear", "full", "univariate", "selective", "snooping")
DEFAULT_GAMMAS = (0.15, 0.2, 0.25, 0.3, 0.35)

PRESETS = {
    "table1-row1": dict(s_t=0, f_t="lin", s_y=5, f_y="lin", s_delta=5, f_delta="lin",
                        sigma=0.25, noise="normal", n=1000, p=25, nuisance_method="rf"),
}


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return ""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            raise NumericalError("refusing to write NaN into a report")
        return format(v, ".10g")
    return str(v)


def atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _report_csv(names, estimates, p_values, ci_low, ci_high) -> str:
    lines = ["name,estimate,p_value,ci_low,ci_high,stars"]
    for k, name in enumerate(names):
        cell = name if ("," not in name) else f'"{name}"'
        lines.append(",".join([cell, _fmt(float(estimates[k])), _fmt(float(p_values[k])),
                               _fmt(float(ci_low[k])), _fmt(float(ci_high[k])),
                               stars(float(p_values[k]))]))
    return "\n".join(lines) + "\n"


def fixed_report_csv(fmi: FixedModelInference) -> str:
    return _report_csv(fmi.names, fmi.coefficients, fmi.p_values, fmi.ci_lower, fmi.ci_upper)


def selective_report_csv(rep: SelectiveReport) -> str:
    rows = rep.rows
    return _report_csv([r.name for r in rows], [r.estimate for r in rows],
                       [r.p_value for r in rows], [r.ci_low for r in rows],
                       [r.ci_high for r in rows])


def _json_safe(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _json_safe(obj.item())
    return obj


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, config: dict, seed: int,
                   input_paths: list[str], wall_clock: float, warnings: list[str],
                   artifacts: list[str]) -> None:
    manifest = {
        "command": command,
        "config": _json_safe(config),
        "seed": seed,
        "version": __version__,
        "input_digests": {p: _digest(p) for p in input_paths},
        "wall_clock_s": wall_clock,
        "warnings": warnings,
        "artifacts": artifacts,
    }
    atomic_write(os.path.join(out_dir, "manifest.json"),
                 json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_lambda_rule(text: str) -> dict:
    out = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key == "mult":
            out["lambda_multiplier"] = float(value)
        elif key == "draws":
            out["lambda_draws"] = int(value)
        elif key == "scale":
            if value not in ("kkt2", "direct"):
                raise ValidationError("lambda rule scale must be kkt2 or direct")
            out["lambda_scale"] = value
        else:
            raise ValidationError(f"unknown lambda rule field {key!r}")
    return out


def cmd_analyze(args) -> int:
    schema = ColumnSchema(
        outcome=args.outcome, treatment=args.treatment,
        covariates=tuple(args.covariates.split(",")) if args.covariates else None)
    t0 = time.monotonic()
    warnings: list[str] = []
    d, n_dropped = load_csv(args.csv, schema)
    if n_dropped:
        warnings.append(f"dropped {n_dropped} rows with missing values")

    if args.interactions:
        d = expand_interactions(d, DesignSpec.all_columns(d, include_interactions=True))
    methods = list(METHODS) if args.method == "all" else [args.method]

    if args.lam is not None and args.lam <= 0 and ("selective" in methods or "snooping" in methods):
        raise ValidationError("selection event undefined at λ=0")

    rule = _parse_lambda_rule(args.lambda_rule) if args.lambda_rule else {}
    config = AnalysisConfig(level=args.level, sigma=args.sigma, lam=args.lam,
                            seed=args.seed, **rule)

    os.makedirs(args.out_dir, exist_ok=True)
    artifacts: list[str] = []
    needs_transform = any(m != "naive-linear" for m in methods)
    tr = None
    if needs_transform:
        nf = estimate_nuisance(
            d, args.nuisance, "two_fold" if args.cross_fit == "2fold" else "none",
            seed=args.seed,
            forest_params=ForestParams(n_trees=args.rf_trees, min_node_size=args.rf_nodesize))
        xc, _ = center_columns(d.x)
        dc = Dataset(x=xc, t=d.t, y=d.y, covariate_names=d.covariate_names)
        tr = transform(dc, nf, center=args.center_drop_alpha)

    for method in methods:
        if method == "naive-linear":
            body = fixed_report_csv(naive_linear_model(d, args.level))
            diag = {"method": method}
        elif method == "full":
            body = fixed_report_csv(fixed_model_inference(tr, list(range(tr.p)), args.level))
            ate, ci = estimate_ate(tr, args.level)
            diag = {"method": method, "ate": ate, "ate_ci": list(ci)}
        elif method == "univariate":
            body = fixed_report_csv(univariate_screening(tr, args.level))
            diag = {"method": method}
        else:
            analyze = selective_analysis if method == "selective" else snooping_analysis
            rep = analyze(tr, config)
            if rep.note:
                warnings.append(f"{method}: {rep.note}")
            body = selective_report_csv(rep)
            diag = {"method": method, "sigma_used": rep.sigma_used,
                    "lambda_used": rep.lambda_used, "model": list(rep.model),
                    **rep.diagnostics}
            if method == "selective":
                diag["truncation"] = [
                    {"name": r.name, "trunc_low": r.trunc_low, "trunc_high": r.trunc_high,
                     "pivot_value": r.pivot_value} for r in rep.rows]
        report_path = os.path.join(args.out_dir, f"report_{method}.csv")
        diag_path = os.path.join(args.out_dir, f"diagnostics_{method}.json")
        atomic_write(report_path, body)
        atomic_write(diag_path, json.dumps(_json_safe(diag), indent=2, sort_keys=True) + "\n")
        artifacts += [report_path, diag_path]

    write_manifest(args.out_dir, "analyze", vars(args), args.seed, [args.csv],
                   time.monotonic() - t0, warnings, artifacts)
    return 0


def _setting_key(cfg: SimConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]

SIM_COLUMNS = ("s_t,f_t,s_y,f_y,s_delta,f_delta,sigma,noise,"
               "model_size,num_significant,fcr,stie,fsr,bias_mu_t,ate_coverage_error,"
               "reps,failed")


def _sim_row(cfg: SimConfig, m) -> str:
    vals = [cfg.s_t, cfg.f_t, cfg.s_y, cfg.f_y, cfg.s_delta, cfg.f_delta, cfg.sigma,
            cfg.noise, m.mean_model_size, m.mean_num_significant, m.fcr, m.stie, m.fsr,
            m.bias_mu_t, m.ate_coverage_error, m.reps_used, m.n_failed]
    return ",".join(_fmt(v) if isinstance(v, float) else str(v) for v in vals)


def load_sim_settings(config_path: str) -> list[SimConfig]:
    with open(config_path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"invalid simulation config: {e}") from e
    entries = raw["settings"] if isinstance(raw, dict) and "settings" in raw else raw
    if isinstance(entries, dict):
        entries = [entries]
    shared = {k: v for k, v in raw.items() if k != "settings"} if isinstance(raw, dict) else {}
    settings = []
    problems = []
    for i, entry in enumerate(entries):
        merged = dict(shared)
        merged.update(entry)
        preset = merged.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                problems.append(f"setting {i}: unknown preset {preset!r}")
                continue
            base = dict(PRESETS[preset])
            base.update(merged)
            merged = base
        try:
            settings.append(SimConfig(**merged))
        except (TypeError, ValidationError) as e:
            problems.append(f"setting {i}: {e}")
    if problems:
        raise ValidationError("invalid simulation config:\n  " + "\n  ".join(problems))
    if not settings:
        raise ValidationError("simulation config contains no settings")
    return settings


def cmd_simulate(args) -> int:
    t0 = time.monotonic()
    settings = load_sim_settings(args.config)
    if args.seed is not None:
        settings = [replace(cfg, seed=args.seed) for cfg in settings]
    os.makedirs(args.out_dir, exist_ok=True)
    rows_dir = os.path.join(args.out_dir, "rows")
    os.makedirs(rows_dir, exist_ok=True)

    artifacts = []
    warnings = []
    for cfg in settings:
        row_path = os.path.join(rows_dir, _setting_key(cfg) + ".csv")
        if os.path.exists(row_path):
            warnings.append(f"setting {_setting_key(cfg)} already complete; skipped")
            continue
        metrics = run_study(cfg, jobs=args.jobs)
        if metrics.n_failed:
            warnings.append(f"setting {_setting_key(cfg)}: {metrics.n_failed} replications failed")
        atomic_write(row_path, _sim_row(cfg, metrics) + "\n")
        artifacts.append(row_path)

    lines = [SIM_COLUMNS]
    for cfg in settings:
        with open(os.path.join(rows_dir, _setting_key(cfg) + ".csv")) as fh:
            lines.append(fh.read().strip())
    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    atomic_write(metrics_path, "\n".join(lines) + "\n")
    artifacts.append(metrics_path)
    write_manifest(args.out_dir, "simulate", {"config": args.config, "jobs": args.jobs},
                   args.seed if args.seed is not None else settings[0].seed,
                   [args.config], time.monotonic() - t0, warnings, artifacts)
    return 0


def cmd_perturb(args) -> int:
    t0 = time.monotonic()
    gammas = [float(g) for g in args.gammas.split(",")] if args.gammas else list(DEFAULT_GAMMAS)
    if any(g <= 0 for g in gammas):
        raise ValidationError("gammas must be positive")
    n_values = [int(v) for v in args.n.split(",")]
    os.makedirs(args.out_dir, exist_ok=True)
    lines = ["gamma,n,fcp_selective,fcp_naive"]
    for gamma in gammas:
        for n in n_values:
            res = perturbation_experiment(gamma, n, reps=args.reps, seed=args.seed,
                                          level=args.level)
            lines.append(",".join([_fmt(gamma), str(n), _fmt(res.fcp_selective),
                                   _fmt(res.fcp_naive)]))
    out_path = os.path.join(args.out_dir, "perturbation.csv")
    atomic_write(out_path, "\n".join(lines) + "\n")
    write_manifest(args.out_dir, "perturb", vars(args), args.seed, [],
                   time.monotonic() - t0, [], [out_path])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emsel",
                                     description="Selective inference for effect modification")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out-dir", default="emsel-out")

    pa = sub.add_parser("analyze", parents=[common], help="analyze a CSV dataset")
    pa.add_argument("--csv", required=True)
    pa.add_argument("--outcome", required=True)
    pa.add_argument("--treatment", required=True)
    pa.add_argument("--covariates", default=None,
                    help="comma-separated names (default: all remaining columns)")
    pa.add_argument("--method", choices=METHODS + ("all",), default="all")
    pa.add_argument("--nuisance", choices=("rf", "lasso", "zero"), default="rf")
    pa.add_argument("--cross-fit", choices=("none", "2fold"), default="none")
    pa.add_argument("--rf-trees", type=int, default=500)
    pa.add_argument("--rf-nodesize", type=int, default=20)
    pa.add_argument("--lambda", dest="lam", type=float, default=None)
    pa.add_argument("--lambda-rule", default=None, help="mult=1.1,draws=200[,scale=kkt2]")
    pa.add_argument("--sigma", type=float, default=None)
    pa.add_argument("--level", type=float, default=0.05)
    pa.add_argument("--interactions", action="store_true")
    pa.add_argument("--center-drop-alpha", action="store_true")
    pa.set_defaults(func=cmd_analyze)

    ps = sub.add_parser("simulate", parents=[common], help="run simulation settings")
    ps.add_argument("--config", required=True)
    ps.set_defaults(func=cmd_simulate, seed=None)

    pp = sub.add_parser("perturb", parents=[common], help="perturbation phase-transition study")
    pp.add_argument("--gammas", default=None, help="comma-separated, default paper grid")
    pp.add_argument("--n", default="500,2000,8000")
    pp.add_argument("--reps", type=int, default=100)
    pp.add_argument("--level", type=float, default=0.10)
    pp.set_defaults(func=cmd_perturb)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
