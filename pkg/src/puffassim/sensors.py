"""Bag-sampler lines, dose records, threshold rules and the train/test split."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

OBS_CSV_HEADER = ["sampler_id", "line", "window_k", "dose_ppt_hr"]
SAMPLER_CSV_HEADER = ["sampler_id", "line", "x_m", "y_m", "z_m"]

OBSERVED = "observed"
PREDICTED = "predicted"


class SensorError(ValueError):
    pass


@dataclass(frozen=True)
class Sampler:
    sampler_id: str
    line: int
    position: tuple[float, float, float]
    windows: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class LineGeometry:
    """A straight line of evenly spaced samplers.

    ``anchor`` is the first sampler; ``heading`` is the compass bearing
    (degrees clockwise from north) along which the line extends.
    """

    line: int
    anchor: tuple[float, float]
    heading: float = 90.0
    count: int = 30
    spacing: float = 250.0
    delay: float = 0.0
    height: float = 1.5


@dataclass(frozen=True)
class SamplerGeometry:
    lines: tuple[LineGeometry, ...]
    bags: int = 12
    bag_duration: float = 900.0
    explicit: tuple[tuple[str, int, float, float, float], ...] = ()


@dataclass(frozen=True)
class SamplerArray:
    samplers: tuple[Sampler, ...]

    def __len__(self):
        return len(self.samplers)

    def __iter__(self):
        return iter(self.samplers)

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.samplers], dtype=float)

    @property
    def lines(self) -> np.ndarray:
        return np.array([s.line for s in self.samplers], dtype=int)

    @property
    def ids(self) -> list[str]:
        return [s.sampler_id for s in self.samplers]

    def index(self) -> dict[str, int]:
        return {s.sampler_id: i for i, s in enumerate(self.samplers)}


@dataclass(frozen=True)
class DoseRecord:
    sampler_id: str
    line: int
    window: int
    dosage: float
    kind: str = OBSERVED

    def __post_init__(self):
        if not self.dosage >= 0:
            raise SensorError(f"negative or missing dosage for {self.sampler_id} window {self.window}")
        if self.kind not in (OBSERVED, PREDICTED):
            raise SensorError(f"unknown record kind {self.kind!r}")


@dataclass(frozen=True)
class ThresholdPolicy:
    predicted_floor: float = 1.0
    observed_cutoff: float = 10.0

    def __post_init__(self):
        if not self.predicted_floor > 0:
            raise ValueError("predicted floor must be > 0")
        if not self.observed_cutoff > self.predicted_floor:
            raise ValueError("observed cutoff must exceed the predicted floor")


def bag_schedule(bags: int, duration: float, delay: float) -> tuple[tuple[float, float], ...]:
    return tuple((delay + k * duration, delay + (k + 1) * duration) for k in range(bags))


def build_sampler_lines(geometry: SamplerGeometry) -> SamplerArray:
    samplers = []
    line_delay = {g.line: g.delay for g in geometry.lines}
    if geometry.explicit:
        for sid, line, x, y, z in geometry.explicit:
            sched = bag_schedule(geometry.bags, geometry.bag_duration, line_delay.get(line, 0.0))
            samplers.append(Sampler(str(sid), int(line), (float(x), float(y), float(z)), sched))
    else:
        for g in geometry.lines:
            rad = np.deg2rad(g.heading)
            ex, ey = np.sin(rad), np.cos(rad)
            sched = bag_schedule(geometry.bags, geometry.bag_duration, g.delay)
            for n in range(g.count):
                pos = (g.anchor[0] + n * g.spacing * ex, g.anchor[1] + n * g.spacing * ey, g.height)
                samplers.append(Sampler(f"L{g.line}S{n + 1:02d}", g.line, pos, sched))
    seen: dict[tuple, str] = {}
    for s in samplers:
        key = tuple(round(c, 6) for c in s.position)
        if key in seen:
            raise SensorError(f"samplers {seen[key]} and {s.sampler_id} overlap at {s.position}")
        seen[key] = s.sampler_id
    if len({s.sampler_id for s in samplers}) != len(samplers):
        raise SensorError("duplicate sampler ids")
    return SamplerArray(tuple(samplers))


def observe(truth_doses: np.ndarray, array: SamplerArray, noise_sigma: float,
            rng: np.random.Generator) -> list[DoseRecord]:
    """Bag readings from true doses with multiplicative Gaussian noise.

    ``truth_doses`` has shape (samplers, bags): the noiseless dose of each
    bag, i.e. :func:`~puffassim.puff.accumulate_dose` over the true
    concentration series.  Noise is drawn sampler by sampler, bag by bag.
    """
    truth_doses = np.asarray(truth_doses, dtype=float)
    if truth_doses.shape[0] != len(array):
        raise SensorError("truth doses do not match the sampler array")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    factors = 1.0 + noise_sigma * rng.standard_normal(truth_doses.shape)
    noisy = np.maximum(0.0, truth_doses * factors)
    out = []
    for s, row in zip(array, noisy):
        for k, d in enumerate(row):
            out.append(DoseRecord(s.sampler_id, s.line, k, float(d), OBSERVED))
    return out


def apply_thresholds(pairs: Sequence[tuple[DoseRecord, DoseRecord]],
                     policy: ThresholdPolicy = ThresholdPolicy()) -> list[tuple[DoseRecord, DoseRecord]]:
    """Drop pairs observed below the cutoff; raise predictions to the floor."""
    out = []
    for obs, pred in pairs:
        if obs.dosage < policy.observed_cutoff:
            continue
        if pred.dosage < policy.predicted_floor:
            pred = replace(pred, dosage=policy.predicted_floor)
        out.append((obs, pred))
    return out


def threshold_arrays(observed: np.ndarray, predicted: np.ndarray, policy: ThresholdPolicy):
    """Array form of :func:`apply_thresholds`.

    Returns the keep mask over ``observed`` and the floored predictions
    (any shape broadcasting against ``observed``).
    """
    keep = np.asarray(observed) >= policy.observed_cutoff
    return keep, np.maximum(predicted, policy.predicted_floor)


def split_train_test(records: Iterable[DoseRecord], train_lines=frozenset({1, 2}),
                     test_lines=frozenset({3})) -> tuple[list[DoseRecord], list[DoseRecord]]:
    train_lines, test_lines = set(train_lines), set(test_lines)
    train, test = [], []
    for r in records:
        if r.line in train_lines:
            train.append(r)
        elif r.line in test_lines:
            test.append(r)
        elif r.line in (1, 2, 3):
            # a known line outside both sets belongs to neither partition
            continue
        else:
            raise SensorError(f"record for {r.sampler_id} is on unknown line {r.line}")
    return train, test


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_observations_csv(path: str | Path, records: Iterable[DoseRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_CSV_HEADER)
        for r in records:
            w.writerow([r.sampler_id, r.line, r.window, repr(float(r.dosage))])


def read_observations_csv(path: str | Path) -> list[DoseRecord]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(OBS_CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise SensorError(f"{path}: line 1: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(DoseRecord(row["sampler_id"], int(row["line"]), int(row["window_k"]),
                                      float(row["dose_ppt_hr"]), OBSERVED))
            except (TypeError, ValueError) as exc:
                raise SensorError(f"{path}: line {lineno}: {exc}") from None
    return out


def read_sampler_csv(path: str | Path) -> tuple[tuple[str, int, float, float, float], ...]:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SAMPLER_CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise SensorError(f"{path}: line 1: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((row["sampler_id"], int(row["line"]), float(row["x_m"]),
                             float(row["y_m"]), float(row["z_m"])))
            except (TypeError, ValueError) as exc:
                raise SensorError(f"{path}: line {lineno}: {exc}") from None
    return tuple(rows)
