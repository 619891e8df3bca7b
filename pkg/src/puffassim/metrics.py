"""Dispersion-model evaluation statistics and Monte Carlo confidence intervals.

The six statistics compare observed (``Do``) and predicted (``Dp``) dosages:

* FB   = (mean Do - mean Dp) / (0.5 (mean Do + mean Dp))
* MG   = exp(mean ln Do - mean ln Dp)
* NMSE = mean (Do - Dp)^2 / (mean Do * mean Dp)
* VG   = exp(mean (ln Do - ln Dp)^2)
* FAC2, FAC3 = fraction of pairs with Dp/Do inside [1/2, 2] and [1/3, 3]

FAC bands are inclusive.  FAC values are fractions here and percentages
in the written report.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

METRIC_NAMES = ("FB", "MG", "NMSE", "VG", "FAC2", "FAC3")
REPORT_HEADER = ["metric", "process_model", "particle_filter", "ci_lo", "ci_hi"]
SCATTER_HEADER = ["sampler_id", "window_k", "observed", "predicted", "source"]


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class PairedSample:
    Do: float
    Dp: float


@dataclass(frozen=True)
class MetricReport:
    FB: float
    MG: float
    NMSE: float
    VG: float
    FAC2: float
    FAC3: float
    n: int

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def value(self, name: str) -> float:
        return getattr(self, name)


@dataclass(frozen=True)
class ConfidenceInterval:
    statistic: str
    point: float
    lower: float
    upper: float
    level: float = 0.95


def metrics_from_arrays(observed, predicted) -> MetricReport:
    do = np.asarray(observed, dtype=float).ravel()
    dp = np.asarray(predicted, dtype=float).ravel()
    if do.shape != dp.shape:
        raise MetricsError("observed and predicted differ in length")
    if do.size == 0:
        raise MetricsError("no pairs to evaluate")
    if not (np.all(do > 0) and np.all(dp > 0)):
        raise MetricsError("dosages must be strictly positive (apply thresholds first)")
    mo, mp = do.mean(), dp.mean()
    log_ratio = np.log(do) - np.log(dp)
    ratio = dp / do
    with np.errstate(over="ignore"):
        vg = float(np.exp(np.mean(log_ratio ** 2)))
    return MetricReport(
        FB=float((mo - mp) / (0.5 * (mo + mp))),
        MG=float(np.exp(np.mean(np.log(do)) - np.mean(np.log(dp)))),
        NMSE=float(np.mean((do - dp) ** 2) / (mo * mp)),
        VG=vg,
        FAC2=float(np.mean((ratio >= 0.5) & (ratio <= 2.0))),
        FAC3=float(np.mean((ratio >= 1.0 / 3.0) & (ratio <= 3.0))),
        n=int(do.size),
    )


def compute_metrics(pairs: Sequence[PairedSample]) -> MetricReport:
    return metrics_from_arrays([p.Do for p in pairs], [p.Dp for p in pairs])


def confidence_interval(samples: Sequence[float], level: float = 0.95, statistic: str = "",
                        method: str = "normal", rng: np.random.Generator | None = None,
                        n_boot: int = 2000) -> ConfidenceInterval:
    """Interval for the mean of per-run values.

    ``method="normal"`` gives mean +/- z * s / sqrt(n) with the sample
    standard deviation; ``method="bootstrap"`` gives the percentile
    interval of resampled means (needs ``rng``).
    """
    if not 0.0 < level < 1.0:
        raise MetricsError(f"confidence level must lie in (0, 1), got {level}")
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise MetricsError("need at least 2 samples for an interval")
    mean = float(x.mean())
    if method == "normal":
        z = NormalDist().inv_cdf(0.5 + level / 2.0)
        half = z * float(x.std(ddof=1)) / np.sqrt(x.size)
        lo, hi = mean - half, mean + half
    elif method == "bootstrap":
        if rng is None:
            raise MetricsError("bootstrap intervals need a random generator")
        idx = rng.integers(0, x.size, size=(n_boot, x.size))
        means = x[idx].mean(axis=1)
        lo, hi = np.quantile(means, [0.5 - level / 2.0, 0.5 + level / 2.0])
        lo, hi = min(float(lo), mean), max(float(hi), mean)
    else:
        raise MetricsError(f"unknown interval method {method!r}")
    return ConfidenceInterval(statistic, mean, float(lo), float(hi), level)


def _fmt(name: str, value: float) -> str:
    if name in ("FAC2", "FAC3"):
        return f"{100.0 * value:.2f}%"
    return f"{value:.6g}"


def write_report_csv(path: str | Path, process_model: MetricReport,
                     particle_filter: dict[str, ConfidenceInterval]) -> None:
    """Table-style report: one row per statistic."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for name in METRIC_NAMES:
            ci = particle_filter[name]
            w.writerow([name, _fmt(name, process_model.value(name)), _fmt(name, ci.point),
                        _fmt(name, ci.lower), _fmt(name, ci.upper)])


def read_report_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics_csv(path: str | Path, reports: dict[str, MetricReport]) -> None:
    """Per-source metrics (used by ``evaluate`` and single runs)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", *METRIC_NAMES, "n"])
        for source, rep in reports.items():
            w.writerow([source, *(_fmt(m, rep.value(m)) for m in METRIC_NAMES), rep.n])


def write_scatter_csv(path: str | Path, rows: Iterable[tuple[str, int, float, float, str]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_HEADER)
        for sid, k, do, dp, source in rows:
            w.writerow([sid, k, repr(float(do)), repr(float(dp)), source])
