"""Command-line interface.

Verbs: ``forecast``, ``truth``, ``assimilate``, ``mc``, ``evaluate``,
``validate``.  Every verb writes CSV files plus ``manifest.json`` into
``--out-dir``.  Exit status: 0 success, 1 invalid input, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assimilation import FilterError
from .harness import (
    FILTER,
    FORECAST,
    HarnessError,
    forecast_equivalence,
    generate_twin_truth,
    metric_pairs,
    run_assimilation,
    run_forecast,
    run_monte_carlo,
)
from .metrics import (
    METRIC_NAMES,
    MetricsError,
    metrics_from_arrays,
    write_metrics_csv,
    write_report_csv,
    write_scatter_csv,
)
from .scenario import ConfigError, Scenario, default_scenario_path, load_scenario
from .sensors import (
    DoseRecord,
    SensorError,
    ThresholdPolicy,
    read_observations_csv,
    write_observations_csv,
)
from .windfield import WindDataError, read_wind_csv

logger = logging.getLogger("puffassim")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
INVALID_INPUT = (ConfigError, WindDataError, SensorError, MetricsError, HarnessError, FileNotFoundError)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, scenario: Scenario | None, inputs: dict[str, Path],
                    **extra) -> None:
    manifest = {
        "command": command,
        "config": str(scenario.source.name) if scenario and scenario.source else None,
        "config_sha256": scenario.digest if scenario else None,
        "seed": scenario.seed if scenario else None,
        "particles": scenario.particles if scenario else None,
        "inputs": {k: _sha256(p) for k, p in sorted(inputs.items())},
        "versions": {"puffassim": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _scenario(args) -> Scenario:
    sc = load_scenario(args.config or default_scenario_path())
    sc = sc.with_overrides(seed=args.seed, particles=args.particles)
    if sc.particles < 2:
        raise ConfigError(f"--particles must be >= 2, got {sc.particles}")
    return sc


def _winds(args, sc: Scenario):
    if getattr(args, "winds", None):
        return read_wind_csv(args.winds), Path(args.winds)
    return sc.wind_observations(), sc.winds_file


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_doses(path: Path, array, doses: np.ndarray) -> None:
    recs = [DoseRecord(s.sampler_id, s.line, k, float(doses[i, k]), "predicted")
            for i, s in enumerate(array) for k in range(doses.shape[1])]
    write_observations_csv(path, recs)


def _write_diagnostics(path: Path, diagnostics) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "ess", "resampled", "underflow_flag", "min_w", "max_w"])
        for d in diagnostics:
            w.writerow([d.k, repr(d.ess), int(d.resampled), int(d.underflow), repr(d.min_w), repr(d.max_w)])


def _write_snapshot(path: Path, ens) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["particle", "weight", "release", "x_m", "y_m", "z_m", "sigma_h_m", "sigma_z_m", "off_domain"])
        st = ens.state
        for i in range(ens.N):
            for r in range(st.mass.shape[1]):
                w.writerow([i, repr(float(ens.weights[i])), r, repr(float(st.x[i, r])), repr(float(st.y[i, r])),
                            repr(float(st.z[i, r])), repr(float(st.sigma_h[i, r])),
                            repr(float(st.sigma_z[i, r])), int(st.off[i, r])])


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_forecast(args) -> int:
    sc = _scenario(args)
    winds, wind_path = _winds(args, sc)
    out = _out_dir(args)
    res = run_forecast(sc, winds)
    _write_doses(out / "forecast.csv", res.array, res.forecast)
    _write_manifest(out, "forecast", sc, {"winds": wind_path})
    print(f"forecast: {len(res.array)} samplers x {res.forecast.shape[1]} bags -> {out / 'forecast.csv'}")
    return EXIT_OK


def cmd_truth(args) -> int:
    sc = _scenario(args)
    winds, wind_path = _winds(args, sc)
    out = _out_dir(args)
    records, truth = generate_twin_truth(sc, winds, seed=args.truth_seed, direction_bias=args.bias_deg,
                                         noise_sigma=args.noise)
    write_observations_csv(out / "observations.csv", records)
    _write_doses(out / "truth_doses.csv", sc.sampler_array(), truth)
    t = sc.truth
    _write_manifest(out, "truth", sc, {"winds": wind_path},
                    truth_seed=t.seed if args.truth_seed is None else args.truth_seed,
                    direction_bias_deg=t.direction_bias if args.bias_deg is None else args.bias_deg,
                    noise_sigma=t.noise_sigma if args.noise is None else args.noise)
    print(f"truth: {len(records)} bag readings -> {out / 'observations.csv'}")
    return EXIT_OK


def _print_metrics(reports: dict[str, object]) -> None:
    print(f"{'source':<28}" + "".join(f"{m:>12}" for m in METRIC_NAMES) + f"{'n':>6}")
    for name, rep in reports.items():
        if rep is None:
            print(f"{name:<28}  (no pairs above the observation cutoff)")
            continue
        vals = "".join(f"{100 * rep.value(m):>11.2f}%" if m.startswith("FAC") else f"{rep.value(m):>12.4g}"
                       for m in METRIC_NAMES)
        print(f"{name:<28}{vals}{rep.n:>6}")


def cmd_assimilate(args) -> int:
    sc = _scenario(args)
    winds, wind_path = _winds(args, sc)
    obs = read_observations_csv(args.observations)
    out = _out_dir(args)
    res = run_assimilation(sc, obs, winds, workers=args.threads)
    _write_doses(out / "forecast.csv", res.array, res.forecast)
    _write_doses(out / "pf_estimates.csv", res.array, res.estimates)
    _write_diagnostics(out / "diagnostics.csv", res.diagnostics)
    reports = {f"{src}_{split}": rep for (src, split), rep in res.metrics.items() if rep is not None}
    write_metrics_csv(out / "metrics.csv", reports)
    rows = (metric_pairs(sc, res.array, obs, res.forecast, sc.test_lines, FORECAST)
            + metric_pairs(sc, res.array, obs, res.estimates, sc.test_lines, FILTER))
    write_scatter_csv(out / "scatter.csv", rows)
    if args.snapshot:
        _write_snapshot(out / "ensemble.csv", res.final_ensemble)
    _write_manifest(out, "assimilate", sc, {"winds": wind_path, "observations": Path(args.observations)})
    _print_metrics({f"{src} ({split})": rep for (src, split), rep in res.metrics.items()})
    return EXIT_OK


def cmd_mc(args) -> int:
    sc = _scenario(args)
    winds, wind_path = _winds(args, sc)
    inputs = {"winds": wind_path}
    obs = None
    if args.observations:
        obs = read_observations_csv(args.observations)
        inputs["observations"] = Path(args.observations)
    out = _out_dir(args)
    runs = args.runs if args.runs is not None else sc.monte_carlo.runs
    mc = run_monte_carlo(sc, runs, obs, winds, workers=args.threads)
    write_report_csv(out / "report.csv", mc.forecast_report, mc.intervals)
    with (out / "runs.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "seed", *METRIC_NAMES, "n"])
        for r, (seed, rep) in enumerate(zip(mc.run_seeds, mc.run_reports)):
            w.writerow([r, seed, *(repr(rep.value(m)) for m in METRIC_NAMES), rep.n])
    if obs is None:
        write_observations_csv(out / "observations.csv", mc.observations)
    rows = (metric_pairs(sc, mc.array, mc.observations, mc.forecast, sc.test_lines, FORECAST)
            + metric_pairs(sc, mc.array, mc.observations, mc.best_estimates, sc.test_lines, FILTER))
    write_scatter_csv(out / "scatter.csv", rows)
    _write_manifest(out, "mc", sc, inputs, runs=runs, best_run=mc.best_run)
    print(f"{'metric':<6}{'process model':>16}{'particle filter':>18}{'95% CI':>26}")
    for m in METRIC_NAMES:
        ci = mc.intervals[m]
        fmt = (lambda v: f"{100 * v:.2f}%") if m.startswith("FAC") else (lambda v: f"{v:.4g}")
        print(f"{m:<6}{fmt(mc.forecast_report.value(m)):>16}{fmt(ci.point):>18}"
              f"{fmt(ci.lower) + ' - ' + fmt(ci.upper):>26}")
    return EXIT_OK


def _read_doses(path: Path) -> dict[tuple[str, int], DoseRecord]:
    return {(r.sampler_id, r.window): r for r in read_observations_csv(path)}


def cmd_evaluate(args) -> int:
    observed = _read_doses(Path(args.observed))
    predicted = _read_doses(Path(args.predicted))
    policy = ThresholdPolicy(args.floor, args.cutoff)
    lines = set(args.lines) if args.lines else None
    do, dp = [], []
    for key, o in observed.items():
        if lines is not None and o.line not in lines:
            continue
        if key not in predicted:
            raise SensorError(f"{args.predicted}: no prediction for sampler {key[0]} window {key[1]}")
        if o.dosage < policy.observed_cutoff:
            continue
        do.append(o.dosage)
        dp.append(max(predicted[key].dosage, policy.predicted_floor))
    if not do:
        raise MetricsError("no observation clears the cutoff; nothing to evaluate")
    rep = metrics_from_arrays(do, dp)
    if args.out_dir:
        out = _out_dir(args)
        write_metrics_csv(out / "metrics.csv", {"evaluated": rep})
        _write_manifest(out, "evaluate", None, {"observed": Path(args.observed),
                                                "predicted": Path(args.predicted)})
    _print_metrics({"evaluated": rep})
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = _scenario(args)
    winds, _ = _winds(args, sc)
    array = sc.sampler_array()
    xmin, xmax, ymin, ymax = sc.grid.bounds
    problems = []
    for o in winds:
        if not (xmin <= o.position[0] <= xmax and ymin <= o.position[1] <= ymax):
            problems.append(f"wind station {o.station_id} lies outside the grid")
    for s in array:
        if not (xmin <= s.position[0] <= xmax and ymin <= s.position[1] <= ymax):
            problems.append(f"sampler {s.sampler_id} lies outside the grid")
    for r in sc.releases:
        if not (xmin <= r.position[0] <= xmax and ymin <= r.position[1] <= ymax):
            problems.append(f"release at {r.position} lies outside the grid")
    if problems:
        for p in sorted(set(problems)):
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {len(array)} samplers, {len(sc.releases)} release(s), {sc.cycles} windows, "
          f"grid {sc.grid.nx}x{sc.grid.ny}")
    if args.self_test:
        gap = forecast_equivalence(sc, winds)
        status = "ok" if gap <= 1e-9 else "FAILED"
        print(f"self-test: forecast vs degenerate filter, max relative gap {gap:.3g} ({status})")
        if gap > 1e-9:
            return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the scenario)")
    common.add_argument("--particles", type=int, default=None, help="particle count N")
    common.add_argument("--out-dir", default="out", help="output directory (default: ./out)")
    common.add_argument("--threads", type=int, default=1, help="worker count")
    common.add_argument("-v", "--verbose", action="store_true")

    scen = argparse.ArgumentParser(add_help=False)
    scen.add_argument("--config", help="scenario YAML (default: bundled trial-6 scenario)")
    scen.add_argument("--winds", help="wind observation CSV (default: the scenario's)")

    p = argparse.ArgumentParser(prog="puffassim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("forecast", parents=[common, scen], help="nominal process-model run")
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("truth", parents=[common, scen], help="generate twin-experiment observations")
    s.add_argument("--truth-seed", type=int, default=None)
    s.add_argument("--bias-deg", type=float, default=None, help="truth wind-direction bias")
    s.add_argument("--noise", type=float, default=None, help="relative observation noise sigma")
    s.set_defaults(func=cmd_truth)

    s = sub.add_parser("assimilate", parents=[common, scen], help="particle-filter run")
    s.add_argument("--observations", required=True, help="observation CSV")
    s.add_argument("--snapshot", action="store_true", help="also dump the final ensemble")
    s.set_defaults(func=cmd_assimilate)

    s = sub.add_parser("mc", parents=[common, scen], help="Monte Carlo batch of filter runs")
    s.add_argument("--runs", type=int, default=None)
    s.add_argument("--observations", help="observation CSV (default: generate twin truth)")
    s.set_defaults(func=cmd_mc)

    s = sub.add_parser("evaluate", parents=[common], help="metrics between two dose CSV files")
    s.add_argument("observed")
    s.add_argument("predicted")
    s.add_argument("--lines", type=int, nargs="*", help="restrict to these sampler lines")
    s.add_argument("--floor", type=float, default=1.0)
    s.add_argument("--cutoff", type=float, default=10.0)
    s.set_defaults(func=cmd_evaluate, out_dir=None)

    s = sub.add_parser("validate", parents=[common, scen], help="lint a scenario")
    s.add_argument("--self-test", action="store_true",
                   help="also check the forecast against a degenerate filter run")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except INVALID_INPUT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FilterError, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
