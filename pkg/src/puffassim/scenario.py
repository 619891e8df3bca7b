"""Scenario configuration.

A scenario is one YAML file (see ``data/dp26_trial6.yaml`` for the full
schema with comments).  Data files it names are resolved relative to the
YAML file.  Errors carry the file name and line of the offending key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .assimilation import FilterSpec, LikelihoodSpec, TransportModel
from .puff import DiffusionSpec, ReleaseSpec
from .sensors import (
    LineGeometry,
    SamplerArray,
    SamplerGeometry,
    ThresholdPolicy,
    build_sampler_lines,
    read_sampler_csv,
)
from .windfield import GridSpec, WindObservation, WindPerturbationSpec, read_wind_csv

DEFAULT_SCENARIO = "dp26_trial6.yaml"


class ConfigError(ValueError):
    """Invalid scenario file; the message names file and line."""


@dataclass(frozen=True)
class TruthSpec:
    """How the twin-experiment truth departs from the nominal winds."""

    direction_bias: float = 10.0
    speed_bias: float = 0.0
    perturb: bool = False
    noise_sigma: float = 0.1
    seed: int = 7


@dataclass(frozen=True)
class MonteCarloSpec:
    runs: int = 50
    level: float = 0.95
    method: str = "normal"


@dataclass(frozen=True)
class Scenario:
    grid: GridSpec
    releases: tuple[ReleaseSpec, ...]
    diffusion: DiffusionSpec
    samplers: SamplerGeometry
    winds_file: Path | None
    perturbation: WindPerturbationSpec = WindPerturbationSpec()
    likelihood: LikelihoodSpec = LikelihoodSpec()
    thresholds: ThresholdPolicy = ThresholdPolicy()
    duration: float = 12600.0
    cadence: float = 900.0
    particles: int = 100
    seed: int = 0
    model_dt: float = 60.0
    samples_per_step: int = 6
    relax_iterations: int = 50
    relaxation: float = 1.0
    resample_fraction: float = 0.5
    train_lines: frozenset = frozenset({1, 2})
    test_lines: frozenset = frozenset({3})
    truth: TruthSpec = TruthSpec()
    monte_carlo: MonteCarloSpec = MonteCarloSpec()
    source: Path | None = None
    digest: str = ""

    def __post_init__(self):
        cycles = self.duration / self.cadence
        if self.cadence <= 0 or abs(cycles - round(cycles)) > 1e-9:
            raise ValueError("assimilation cadence must divide the trial duration")
        if self.particles < 2:
            raise ValueError("particle count must be >= 2")

    @property
    def cycles(self) -> int:
        return int(round(self.duration / self.cadence))

    def sampler_array(self) -> SamplerArray:
        return build_sampler_lines(self.samplers)

    def transport_model(self, array: SamplerArray | None = None) -> TransportModel:
        array = array or self.sampler_array()
        return TransportModel(
            grid=self.grid, diffusion=self.diffusion, releases=self.releases,
            receptors=array.positions, dt=self.model_dt, samples_per_step=self.samples_per_step,
            relax_iterations=self.relax_iterations, relaxation=self.relaxation,
        )

    def filter_spec(self, update: bool = True) -> FilterSpec:
        return FilterSpec(self.perturbation, self.likelihood, self.thresholds,
                          self.resample_fraction, update)

    def wind_observations(self) -> list[WindObservation]:
        if self.winds_file is None:
            raise ConfigError("scenario names no wind file")
        return read_wind_csv(self.winds_file)

    def with_overrides(self, **kw) -> "Scenario":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


# ---------------------------------------------------------------------------
# YAML with line numbers
# ---------------------------------------------------------------------------

class _Node(dict):
    """Mapping that remembers the source line of each key."""

    lines: dict


def _plain(node, lines: dict, path: tuple):
    if isinstance(node, yaml.MappingNode):
        out = _Node()
        out.lines = {}
        for k, v in node.value:
            key = k.value
            out.lines[key] = k.start_mark.line + 1
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _plain(v, lines, path + (key,))
        return out
    if isinstance(node, yaml.SequenceNode):
        items = []
        for i, v in enumerate(node.value):
            lines[path + (i,)] = v.start_mark.line + 1
            items.append(_plain(v, lines, path + (i,)))
        return items
    return yaml.safe_load(yaml.serialize(node))


class _Reader:
    def __init__(self, path: Path, text: str):
        self.path = path
        self.lines: dict[tuple, int] = {}
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark
            line = mark.line + 1 if mark else 0
            raise ConfigError(f"{path}: line {line}: {exc.problem}") from None
        if node is None or not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{path}: line 1: scenario must be a mapping")
        self.data = _plain(node, self.lines, ())

    def fail(self, path: tuple, msg: str):
        line = 0
        for n in range(len(path), 0, -1):
            if path[:n] in self.lines:
                line = self.lines[path[:n]]
                break
        dotted = ".".join(str(p) for p in path)
        raise ConfigError(f"{self.path}: line {line}: {dotted}: {msg}")

    def get(self, path: tuple, default: Any = ..., kind=float):
        cur = self.data
        for p in path:
            if isinstance(cur, dict) and p in cur:
                cur = cur[p]
            elif isinstance(cur, list) and isinstance(p, int) and p < len(cur):
                cur = cur[p]
            else:
                if default is ...:
                    self.fail(path, "required key is missing")
                return default
        if kind is None:
            return cur
        try:
            if kind is bool:
                if not isinstance(cur, bool):
                    raise ValueError(f"expected true/false, got {cur!r}")
                return cur
            if kind is int and isinstance(cur, float) and not cur.is_integer():
                raise ValueError(f"expected an integer, got {cur!r}")
            return kind(cur)
        except (TypeError, ValueError) as exc:
            self.fail(path, str(exc))

    def build(self, path: tuple, factory, *args, **kwargs):
        try:
            return factory(*args, **kwargs)
        except (TypeError, ValueError) as exc:
            self.fail(path, str(exc))


def _file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: line 0: cannot read scenario: {exc.strerror}") from None
    r = _Reader(path, text)
    base = path.parent

    g = ("grid",)
    cell = r.get(g + ("cell_m",))
    if not cell > 0:
        r.fail(g + ("cell_m",), f"cell size must be > 0, got {cell}")
    grid = r.build(g, GridSpec.from_bounds, r.get(g + ("xmin",)), r.get(g + ("xmax",)),
                   r.get(g + ("ymin",)), r.get(g + ("ymax",)), cell)

    rel_items = r.get(("releases",), kind=None)
    if not isinstance(rel_items, list) or not rel_items:
        r.fail(("releases",), "expected a non-empty list of releases")
    releases = []
    for i in range(len(rel_items)):
        p = ("releases", i)
        releases.append(r.build(p, ReleaseSpec, r.get(p + ("mass_kg",)),
                                (r.get(p + ("x_m",)), r.get(p + ("y_m",)), r.get(p + ("z_m",))),
                                r.get(p + ("start_s",), 0.0), r.get(p + ("initial_sigma_m",), 1.0)))

    d = ("diffusion",)
    diffusion = r.build(d, DiffusionSpec, r.get(d + ("a_h",), 1.5), r.get(d + ("a_z",), 0.3),
                        r.get(d + ("sigma_z_max_m",), 500.0))

    s = ("samplers",)
    line_items = r.get(s + ("lines",), [], kind=None)
    lines = []
    for i in range(len(line_items)):
        p = s + ("lines", i)
        lines.append(r.build(p, LineGeometry, r.get(p + ("line",), kind=int),
                             (r.get(p + ("anchor_x_m",)), r.get(p + ("anchor_y_m",))),
                             r.get(p + ("heading_deg",), 90.0), r.get(p + ("count",), 30, int),
                             r.get(p + ("spacing_m",), 250.0), r.get(p + ("delay_s",), 0.0),
                             r.get(p + ("height_m",), 1.5)))
    explicit = ()
    coords = r.get(s + ("coordinates_file",), None, kind=str)
    if coords:
        try:
            explicit = read_sampler_csv(base / coords)
        except (OSError, ValueError) as exc:
            r.fail(s + ("coordinates_file",), str(exc))
    if not lines and not explicit:
        r.fail(s, "define sampler lines or a coordinates_file")
    geometry = SamplerGeometry(tuple(lines), r.get(s + ("bags",), 12, int),
                               r.get(s + ("bag_duration_s",), 900.0), explicit)
    try:
        build_sampler_lines(geometry)
    except ValueError as exc:
        r.fail(s, str(exc))

    winds = r.get(("winds", "file"), None, kind=str)
    winds_file = (base / winds) if winds else None
    if winds_file is not None and not winds_file.exists():
        r.fail(("winds", "file"), f"file not found: {winds_file}")

    pt = ("perturbation",)
    perturbation = r.build(pt, WindPerturbationSpec, r.get(pt + ("speed_sigma_ms",), 0.5),
                           r.get(pt + ("direction_sigma_deg",), 5.0))
    lk = ("likelihood",)
    likelihood = r.build(lk, LikelihoodSpec, r.get(lk + ("mode",), "pooled", str),
                         r.get(lk + ("fixed_variance",), 1.0), r.get(lk + ("variance_floor",), 1.0))
    th = ("thresholds",)
    thresholds = r.build(th, ThresholdPolicy, r.get(th + ("predicted_floor",), 1.0),
                         r.get(th + ("observed_cutoff",), 10.0))
    tr = ("truth",)
    truth = TruthSpec(r.get(tr + ("direction_bias_deg",), 10.0), r.get(tr + ("speed_bias_ms",), 0.0),
                      r.get(tr + ("perturb",), False, bool), r.get(tr + ("noise_sigma",), 0.1),
                      r.get(tr + ("seed",), 7, int))
    if truth.noise_sigma < 0:
        r.fail(tr + ("noise_sigma",), "must be >= 0")
    mc = ("monte_carlo",)
    monte_carlo = MonteCarloSpec(r.get(mc + ("runs",), 50, int), r.get(mc + ("ci_level",), 0.95),
                                 r.get(mc + ("ci_method",), "normal", str))
    if monte_carlo.runs < 2:
        r.fail(mc + ("runs",), "need at least 2 runs")
    if not 0 < monte_carlo.level < 1:
        r.fail(mc + ("ci_level",), "must lie in (0, 1)")
    if monte_carlo.method not in ("normal", "bootstrap"):
        r.fail(mc + ("ci_method",), "expected 'normal' or 'bootstrap'")

    m = ("model",)
    f = ("filter",)
    train = frozenset(int(x) for x in r.get(f + ("train_lines",), [1, 2], kind=None))
    test = frozenset(int(x) for x in r.get(f + ("test_lines",), [3], kind=None))
    if train & test:
        r.fail(f + ("test_lines",), "train and test lines overlap")

    digest_paths = [path] + ([winds_file] if winds_file else []) + ([base / coords] if coords else [])
    scenario = r.build(
        (), Scenario, grid=grid, releases=tuple(releases), diffusion=diffusion, samplers=geometry,
        winds_file=winds_file, perturbation=perturbation, likelihood=likelihood, thresholds=thresholds,
        duration=r.get(("trial_duration_s",), 12600.0), cadence=r.get(("cadence_s",), 900.0),
        particles=r.get(("particles",), 100, int), seed=r.get(("seed",), 0, int),
        model_dt=r.get(m + ("dt_s",), 60.0), samples_per_step=r.get(m + ("samples_per_step",), 6, int),
        relax_iterations=r.get(m + ("relax_iterations",), 50, int),
        relaxation=r.get(m + ("relaxation",), 1.0),
        resample_fraction=r.get(f + ("resample_fraction",), 0.5),
        train_lines=train, test_lines=test, truth=truth, monte_carlo=monte_carlo,
        source=path, digest=_file_digest(digest_paths),
    )
    if not 0 < scenario.relaxation <= 1:
        r.fail(m + ("relaxation",), "must lie in (0, 1]")
    if scenario.model_dt <= 0 or scenario.samples_per_step < 1:
        r.fail(m, "dt_s must be > 0 and samples_per_step >= 1")
    check_alignment(scenario, r)
    return scenario


def check_alignment(scenario: Scenario, reader: _Reader | None = None) -> None:
    """Every bag must coincide with one assimilation window inside the trial."""
    geom = scenario.samplers
    problems = []
    if abs(geom.bag_duration - scenario.cadence) > 1e-9:
        problems.append(f"bag duration {geom.bag_duration} differs from cadence {scenario.cadence}")
    for g in geom.lines:
        q = g.delay / scenario.cadence
        if abs(q - round(q)) > 1e-9:
            problems.append(f"line {g.line} delay {g.delay} is not a multiple of the cadence")
        if g.delay + geom.bags * geom.bag_duration > scenario.duration + 1e-9:
            problems.append(f"line {g.line} bags run past the trial end")
    if problems:
        if reader is not None:
            reader.fail(("samplers",), "; ".join(problems))
        raise ConfigError("; ".join(problems))


def default_scenario_path() -> Path:
    return Path(str(resources.files("puffassim") / "data" / DEFAULT_SCENARIO))


def default_scenario() -> Scenario:
    return load_scenario(default_scenario_path())


def bag_cycle_map(scenario: Scenario, array: SamplerArray) -> np.ndarray:
    """Cycle index at which each (sampler, bag) closes; shape (samplers, bags)."""
    ends = np.array([[w[1] for w in s.windows] for s in array], dtype=float)
    return np.rint(ends / scenario.cadence).astype(int) - 1
