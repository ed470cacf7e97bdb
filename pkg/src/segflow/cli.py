"""Command-line experiment orchestration.

Usage::

    segflow run <config.json> [--out DIR] [--threads N] [--seed S]
    segflow list
    segflow validate <config.json>

Exit codes: 0 success, 2 configuration error, 3 numeric blowup, 4 a
statistical check failed.  ``--threads`` (or the SEGFLOW_THREADS environment
variable) sizes the worker pool used by ``full-suite``; every task derives
its randomness from ``(seed, task index)`` and results fold in task order,
so thread count and scheduling never change any output.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .assumptions import (
    check_dissipativity,
    check_ellipticity,
    gaussian_pair_sampler,
    gaussian_segment_sampler,
)
from .config import ExperimentConfig, parse_config, parse_config_dict
from .errors import ConfigError, NumericBlowupError, SegflowError
from .ergodic import EnsembleConfig, RateFit, ergodicity_curve, sample_invariant
from .limits import (
    CenteredObservable,
    CorrectorConfig,
    DiscreteCorrectorConfig,
    clt_test,
    lil_run,
    rescaled_path_nodes,
    slln_pathwise,
    slln_variance_decay,
    variance_D,
    variance_D_discrete,
)
from .registry import registry_list
from .reports import ReportRecord, input_digest, jsonable, payload_digest, write_report
from .rng import RngStream, derive_seed
from .segments import constant_segment
from .semigroup import kernel_registry

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BLOWUP = 3
EXIT_STATISTICAL = 4


def _initial_segment(model, num):
    return constant_segment(num["initial_value"], model.delay, num["dt"], dim=model.dim)


def _stationary_sample(cfg: ExperimentConfig, model, num):
    ens = EnsembleConfig(
        n_traj=num["stat_n_traj"],
        burn_in=num["burn_in"],
        thinning=num["thinning"],
        step=num["dt"],
        master_seed=derive_seed(cfg.seed, 0),
        samples_per_traj=num["samples_per_traj"],
    )
    return sample_invariant(model, ens, _initial_segment(model, num)), ens


def _rate_fit(cfg: ExperimentConfig, model, num, stationary) -> RateFit:
    ens = EnsembleConfig(
        n_traj=num["rate_n_traj"],
        burn_in=num["burn_in"],
        thinning=num["thinning"],
        step=num["dt"],
        master_seed=derive_seed(cfg.seed, 1),
        samples_per_traj=1,
    )
    start = constant_segment(num["rate_initial_value"], model.delay, num["dt"], dim=model.dim)
    return ergodicity_curve(
        model, start, stationary, num["rate_t_grid"], cfg.metric, ens,
        cap=min(stationary.n // 2, 512),
    )


def _ratefit_payload(fit: RateFit) -> dict:
    return {
        "c_hat": fit.c_hat,
        "beta_hat": fit.beta_hat,
        "r_squared": fit.r_squared,
        "se_beta": fit.se_beta,
        "times": fit.times,
        "values": fit.values,
        "noise_floor": fit.noise_floor,
        "n_dropped": fit.n_dropped,
        "flagged": fit.flagged,
        "note": fit.note,
    }


def _run_assumptions(cfg: ExperimentConfig, model, num):
    rng = RngStream(cfg.seed).child(4)
    pair_sampler = gaussian_pair_sampler(model, num["dt"], scale=num["sample_scale"])
    seg_sampler = gaussian_segment_sampler(model, num["dt"], scale=num["sample_scale"])
    dis = check_dissipativity(model, pair_sampler, num["n_pairs"], rng.child(0))
    failures = []
    payload = {"dissipativity": jsonable(vars(dis))}
    if not dis.passed:
        failures.append(f"dissipativity margin violated: max_g={dis.max_g:g}")
    try:
        ell = check_ellipticity(model, seg_sampler, num["n_samples"], rng.child(1))
        payload["ellipticity"] = jsonable(vars(ell))
        if not ell.passed:
            failures.append("ellipticity bounds violated")
    except SegflowError as exc:
        payload["ellipticity"] = {"error": str(exc)}
        failures.append(f"ellipticity check failed: {exc}")
    return payload, {}, failures


def _run_ergodicity(cfg: ExperimentConfig, model, num):
    stationary, ens_cfg = _stationary_sample(cfg, model, num)
    ens = EnsembleConfig(
        n_traj=num["n_traj"],
        burn_in=num["burn_in"],
        thinning=num["thinning"],
        step=num["dt"],
        master_seed=derive_seed(cfg.seed, 1),
        samples_per_traj=1,
    )
    fit = ergodicity_curve(
        model,
        _initial_segment(model, num),
        stationary,
        num["t_grid"],
        cfg.metric,
        ens,
        mode=num["mode"],
        coupling=num["coupling"],
        cap=num["assignment_cap"],
        block=num["block"],
        floor_factor=num["floor_factor"],
    )
    payload = {
        "rate_fit": _ratefit_payload(fit),
        "stationary_atoms": stationary.n,
        "ensemble": num["n_traj"],
    }
    rows = []
    for t, w in zip(fit.times, fit.values):
        fitted = fit.c_hat * math.exp(-fit.beta_hat * t) if not fit.flagged else float("nan")
        rows.append((float(t), float(w), float(np.log(w)), float(fitted)))
    failures = []
    if fit.flagged or not (fit.beta_hat > 0):
        failures.append(f"ergodicity rate not resolved: {fit.note or 'beta_hat <= 0'}")
    return payload, {"ergodicity": rows}, failures


def _centered_observable(cfg: ExperimentConfig, stationary) -> CenteredObservable:
    return CenteredObservable.from_stationary(cfg.build_observable(), stationary)


def _run_slln(cfg: ExperimentConfig, model, num):
    stationary, _ = _stationary_sample(cfg, model, num)
    f = _centered_observable(cfg, stationary)
    xi = _initial_segment(model, num)
    report = slln_variance_decay(
        model, xi, f, num["t_grid"], num["replicas"], RngStream(cfg.seed).child(2)
    )
    payload = {
        "mu_f": f.mu_f,
        "mu_f_se": f.mu_f_se,
        "times": report.times,
        "sq_errors": report.sq_errors,
        "ses": report.ses,
        "exponent": report.exponent,
        "exponent_ci": list(report.exponent_ci),
        "zero_signal": report.zero_signal,
        "passed": report.passed,
    }
    failures = []
    if not report.passed and not report.zero_signal:
        failures.append(f"variance decay exponent {report.exponent:.3f} above the -0.75 gate")
    if num["pathwise_horizon"] > 0:
        pw = slln_pathwise(
            model, xi, f, num["eps"], num["pathwise_horizon"],
            num["pathwise_replicas"], RngStream(cfg.seed).child(5),
        )
        payload["pathwise"] = {
            "eps": pw.eps,
            "c_eps": pw.c_eps,
            "statistic_quantiles": pw.statistic_quantiles,
            "exceedance_quantiles": pw.exceedance_quantiles,
            "late_to_mid_ratio_median": pw.late_to_mid_ratio_median,
        }
    rows = []
    if not report.zero_signal and math.isfinite(report.exponent):
        logc = float(np.mean(np.log(report.sq_errors) - report.exponent * np.log(report.times)))
        for t, mse in zip(report.times, report.sq_errors):
            rows.append((float(t), float(mse), float(math.exp(logc) * t**report.exponent)))
    else:
        rows = [(float(t), float(m), float("nan")) for t, m in zip(report.times, report.sq_errors)]
    return payload, {"slln": rows}, failures


def _run_clt(cfg: ExperimentConfig, model, num):
    stationary, _ = _stationary_sample(cfg, model, num)
    f = _centered_observable(cfg, stationary)
    rate = _rate_fit(cfg, model, num, stationary)
    failures = []
    if rate.flagged:
        return (
            {"rate_fit": _ratefit_payload(rate)},
            {"clt": []},
            [f"rate fit unusable: {rate.note}"],
        )
    ccfg = CorrectorConfig(
        rate_fit=rate,
        t_max=num["t_max"],
        replicas=num["inner_replicas"],
        tail_fraction=num["tail_fraction"],
    )
    var = variance_D(
        model, f, stationary, ccfg, RngStream(cfg.seed).child(3),
        outer_replicas=num["outer_replicas"], max_atoms=num["max_atoms"],
    )
    xi = _initial_segment(model, num)
    report = clt_test(
        model, f, xi, num["t_grid"], num["replicas"], var.d_f,
        RngStream(cfg.seed).child(2), n_boot=num["n_boot"],
    )
    payload = {
        "rate_fit": _ratefit_payload(rate),
        "variance": jsonable(vars(var)),
        "times": report.times,
        "statistics": report.statistics,
        "ses": report.ses,
        "d_f": report.d_f,
        "replicas": report.replicas,
    }
    if report.statistics[-1] > report.statistics[0] + 2.0 * math.hypot(report.ses[0], report.ses[-1]):
        failures.append("distribution distance failed to decay along the time grid")
    bound0 = report.statistics[0] * report.times[0] ** 0.25
    rows = [
        (float(t), float(s), float(bound0 * t**-0.25))
        for t, s in zip(report.times, report.statistics)
    ]
    return payload, {"clt": rows}, failures


def _default_checkpoints(n_min: int, n_max: int) -> list[int]:
    pts = []
    n = max(n_min, 16)
    while n < n_max:
        pts.append(int(n))
        n *= 2
    pts.append(int(n_max))
    return sorted(set(pts))


def _run_lil(cfg: ExperimentConfig, model, num):
    stationary, _ = _stationary_sample(cfg, model, num)
    f = _centered_observable(cfg, stationary)
    rate = _rate_fit(cfg, model, num, stationary)
    if rate.flagged:
        return (
            {"rate_fit": _ratefit_payload(rate)},
            {"lil": []},
            [f"rate fit unusable: {rate.note}"],
        )
    dcfg = DiscreteCorrectorConfig(
        rate_fit=rate,
        k_max=num["k_max"],
        replicas=num["inner_replicas"],
        tail_fraction=num["tail_fraction"],
    )
    var = variance_D_discrete(
        model, f, stationary, dcfg, RngStream(cfg.seed).child(3),
        outer_replicas=num["outer_replicas"], max_atoms=num["max_atoms"],
    )
    payload = {"rate_fit": _ratefit_payload(rate), "variance": jsonable(vars(var))}
    if not (var.d_sq > 0):
        payload["error"] = f"discrete variance estimate not positive: {var.d_sq:g}"
        return payload, {"lil": []}, ["discrete variance constant is not positive"]
    d_hat = math.sqrt(var.d_sq)
    checkpoints = num["checkpoints"] or _default_checkpoints(num["n_min"], num["n_max"])
    xi = _initial_segment(model, num)
    report = lil_run(
        model, f, xi, num["n_max"], d_hat, checkpoints,
        RngStream(cfg.seed).child(2), n_min=num["n_min"],
    )
    endpoints_again = np.array(
        [rescaled_path_nodes(report.f_cumsum, int(n), d_hat)[int(n)] for n in report.n_grid]
    )
    identity_exact = bool(np.array_equal(endpoints_again, report.endpoint_values))
    payload.update(
        {
            "d_hat": d_hat,
            "n_grid": report.n_grid,
            "normalized_sums": report.normalized_sums,
            "running_max": report.running_max,
            "running_min": report.running_min,
            "sup_norm_of_lambda": report.sup_norm_of_lambda,
            "endpoint_values": report.endpoint_values,
            "endpoint_identity_exact": identity_exact,
        }
    )
    failures = []
    if not identity_exact:
        failures.append("rescaled-path endpoint identity violated")
    rows = [
        (int(n), float(s), float(mx), float(mn), float(d_hat), float(-d_hat))
        for n, s, mx, mn in zip(
            report.n_grid, report.normalized_sums, report.running_max, report.running_min
        )
    ]
    return payload, {"lil": rows}, failures


_RUNNERS = {
    "assumptions": _run_assumptions,
    "ergodicity": _run_ergodicity,
    "slln": _run_slln,
    "clt": _run_clt,
    "lil": _run_lil,
}

_SUITE_PRESETS = {
    "smoke": {
        "assumptions": {"n_pairs": 100, "n_samples": 100},
        "ergodicity": {
            "n_traj": 192, "stat_n_traj": 96, "samples_per_traj": 4,
            "t_grid": [0.5, 1.0, 2.0, 3.0], "assignment_cap": 96,
        },
        "slln": {"replicas": 100, "t_grid": [2.0, 4.0, 8.0, 16.0, 32.0]},
        "clt": {
            "replicas": 500, "t_grid": [4.0, 16.0], "rate_n_traj": 128,
            "inner_replicas": 16, "outer_replicas": 8, "max_atoms": 48,
            "stat_n_traj": 48, "t_max": 4.0, "n_boot": 50,
        },
        "lil": {
            "n_max": 2048, "inner_replicas": 16, "outer_replicas": 8,
            "max_atoms": 32, "stat_n_traj": 48, "rate_n_traj": 128, "k_max": 6,
        },
    },
    "desk": {
        "assumptions": {},
        "ergodicity": {"n_traj": 4096, "stat_n_traj": 512},
        "slln": {"replicas": 1000},
        "clt": {"replicas": 2000, "t_grid": [16.0, 64.0, 256.0], "max_atoms": 256},
        "lil": {"n_max": 100000, "max_atoms": 256},
    },
}


def _run_full_suite(cfg: ExperimentConfig, model, num, threads: int):
    preset = _SUITE_PRESETS[num["scale"]]
    tasks = []
    for i, kind in enumerate(("assumptions", "ergodicity", "slln", "clt", "lil")):
        sub_raw = {
            "kind": kind,
            "seed": derive_seed(cfg.seed, 100 + i),
            "model": {"name": cfg.model_name, "params": cfg.model_params},
            "observable": {"name": cfg.observable_name, "params": cfg.observable_params},
            "metric": {"p": cfg.metric.p, "gamma": cfg.metric.gamma},
            "numerics": {"dt": num["dt"], **preset[kind]},
        }
        tasks.append((kind, parse_config_dict(sub_raw)))

    def run_one(task):
        kind, sub_cfg = task
        sub_model = sub_cfg.build_model()
        sub_num = sub_cfg.resolved_numerics(sub_model)
        payload, series, failures = _RUNNERS[kind](sub_cfg, sub_model, sub_num)
        return kind, sub_cfg, payload, series, failures

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, tasks))
    else:
        results = [run_one(t) for t in tasks]

    payload = {}
    series = {}
    failures = []
    for kind, sub_cfg, sub_payload, sub_series, sub_failures in results:
        payload[kind] = {
            "config": sub_cfg.echo(sub_cfg.build_model()),
            "payload": sub_payload,
            "digest": payload_digest(sub_payload),
        }
        for name, rows in sub_series.items():
            series[f"{kind}/{name}"] = rows
        failures.extend(f"{kind}: {msg}" for msg in sub_failures)
    return payload, series, failures


def run_experiment(cfg: ExperimentConfig, threads: int = 1, out_dir=None) -> ReportRecord:
    """Execute the configured experiment and return its report record.

    When ``out_dir`` is given, the report JSON and every per-series CSV are
    written there as well.
    """
    model = cfg.build_model()
    num = cfg.resolved_numerics(model)
    t0 = time.perf_counter()
    if cfg.kind == "full-suite":
        payload, series, failures = _run_full_suite(cfg, model, num, threads)
    else:
        payload, series, failures = _RUNNERS[cfg.kind](cfg, model, num)
    wall = time.perf_counter() - t0
    chash = cfg.config_hash(model)
    record = ReportRecord(
        kind=cfg.kind,
        config_echo=cfg.echo(model),
        config_hash=chash,
        input_digest=input_digest(chash, __version__),
        payload=payload,
        seed=cfg.seed,
        wall_clock=wall,
        series=series,
        failures=failures,
    )
    if out_dir is not None:
        write_report(record, out_dir)
    return record


def _threads_from(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("SEGFLOW_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SEGFLOW_THREADS is not an integer: {env!r}")
    return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="segflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a JSON config")
    run_p.add_argument("config")
    run_p.add_argument("--out", default=None, help="output directory (default: from config or '.')")
    run_p.add_argument("--threads", type=int, default=None)
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")

    sub.add_parser("list", help="list built-in models, observables and kernels")

    val_p = sub.add_parser("validate", help="parse a config and echo its effective values")
    val_p.add_argument("config")

    args = parser.parse_args(argv)

    try:
        if args.command == "list":
            listing = registry_list()
            print("models:")
            for name in listing.models:
                print(f"  {name}")
            print("observables:")
            for name in listing.observables:
                print(f"  {name}")
            print("synthetic kernels:")
            for name in sorted(kernel_registry()):
                print(f"  {name}")
            return EXIT_OK

        cfg = parse_config(args.config)
        if args.command == "validate":
            model = cfg.build_model()
            print(json.dumps(cfg.echo(model), indent=2, sort_keys=True))
            return EXIT_OK

        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        threads = _threads_from(args)
        out_dir = args.out or cfg.output_dir or "."
        record = run_experiment(cfg, threads=threads, out_dir=out_dir)
        path = Path(out_dir) / "report.json"
        print(f"report: {path}")
        print(f"payload digest: {record.digest}")
        for msg in record.failures:
            print(f"FAIL: {msg}", file=sys.stderr)
        return EXIT_STATISTICAL if record.failures else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericBlowupError as exc:
        print(f"numeric blowup: {exc}", file=sys.stderr)
        return EXIT_BLOWUP


if __name__ == "__main__":
    sys.exit(main())
