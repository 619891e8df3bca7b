"""Gridded surface wind fields built from station observations.

Station readings are converted to (u, v) components, spread onto a regular
grid by inverse-distance-squared weighting, then nudged toward zero
divergence by a few sweeps of a least-change relaxation.  Observation
perturbation (the meteorological data error the filter samples) lives here
too.

Directions follow the meteorological convention: the direction the wind
blows *from*, clockwise from north.  ``u = -speed*sin(dir)``,
``v = -speed*cos(dir)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

WIND_CSV_HEADER = ["station_id", "x_m", "y_m", "z_m", "time_s", "speed_ms", "dir_deg"]


class WindDataError(ValueError):
    """Raised for missing or malformed wind input."""


@dataclass(frozen=True)
class WindObservation:
    station_id: str
    position: tuple[float, float, float]
    time: float
    speed: float
    direction: float

    def __post_init__(self):
        if not np.isfinite(self.speed) or self.speed < 0:
            raise WindDataError(f"station {self.station_id}: speed must be >= 0, got {self.speed}")
        if not np.isfinite(self.direction):
            raise WindDataError(f"station {self.station_id}: direction is not finite")
        object.__setattr__(self, "direction", float(self.direction) % 360.0)

    @property
    def uv(self) -> tuple[float, float]:
        return speed_dir_to_uv(self.speed, self.direction)


@dataclass(frozen=True)
class WindPerturbationSpec:
    """Standard deviations of the wind data error model."""

    speed_sigma: float = 0.5
    direction_sigma: float = 5.0

    def __post_init__(self):
        if self.speed_sigma < 0 or self.direction_sigma < 0:
            raise ValueError("perturbation sigmas must be >= 0")

    @property
    def is_zero(self) -> bool:
        return self.speed_sigma == 0 and self.direction_sigma == 0


@dataclass(frozen=True)
class GridSpec:
    """Cell-centred horizontal grid geometry.

    ``origin`` is the centre of cell (0, 0); cell (i, j) sits at
    ``origin + (i*dx, j*dy)`` with ``i`` along x.
    """

    origin: tuple[float, float]
    dx: float
    dy: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs nx, ny >= 2")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError("cell size must be positive")

    @classmethod
    def from_bounds(cls, xmin: float, xmax: float, ymin: float, ymax: float, cell: float) -> "GridSpec":
        nx = int(round((xmax - xmin) / cell)) + 1
        ny = int(round((ymax - ymin) / cell)) + 1
        return cls(origin=(xmin, ymin), dx=cell, dy=cell, nx=nx, ny=ny)

    @property
    def x(self) -> np.ndarray:
        return self.origin[0] + self.dx * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return self.origin[1] + self.dy * np.arange(self.ny)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        x, y = self.x, self.y
        return float(x[0]), float(x[-1]), float(y[0]), float(y[-1])

    def contains(self, x, y):
        xmin, xmax, ymin, ymax = self.bounds
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)


@dataclass(frozen=True)
class WindGrid:
    """Horizontal wind on a :class:`GridSpec`; ``u`` and ``v`` have shape (ny, nx)."""

    spec: GridSpec
    u: np.ndarray
    v: np.ndarray
    valid_time: float = 0.0
    adjustment_distance: float = field(default=0.0, compare=False)

    def __post_init__(self):
        shape = (self.spec.ny, self.spec.nx)
        if self.u.shape != shape or self.v.shape != shape:
            raise ValueError(f"wind arrays must have shape {shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("wind grid contains non-finite values")

    @classmethod
    def uniform(cls, spec: GridSpec, u: float, v: float, valid_time: float = 0.0) -> "WindGrid":
        shape = (spec.ny, spec.nx)
        return cls(spec, np.full(shape, float(u)), np.full(shape, float(v)), valid_time)

    def divergence_norm(self) -> float:
        return float(np.sqrt(np.sum(divergence(self.u, self.v, self.spec.dx, self.spec.dy) ** 2)))


class WindSample(NamedTuple):
    u: float
    v: float
    clamped: bool


# ---------------------------------------------------------------------------
# Conventions
# ---------------------------------------------------------------------------

def speed_dir_to_uv(speed, direction):
    rad = np.deg2rad(direction)
    return -speed * np.sin(rad), -speed * np.cos(rad)


def uv_to_speed_dir(u, v):
    speed = np.hypot(u, v)
    direction = np.rad2deg(np.arctan2(-u, -v)) % 360.0
    return speed, direction


# ---------------------------------------------------------------------------
# Perturbation
# ---------------------------------------------------------------------------

def perturb_observations(
    obs: Sequence[WindObservation],
    spec: WindPerturbationSpec,
    rng: np.random.Generator,
) -> list[WindObservation]:
    """Draw one realisation of the observation error model.

    Each reading gets independent Gaussian speed and direction errors;
    negative speeds are clamped to zero.  Draw order is speed then
    direction for each station in list order, so a given generator state
    always yields the same realisation.
    """
    if not obs:
        raise WindDataError("no wind data")
    speeds = np.array([o.speed for o in obs])
    dirs = np.array([o.direction for o in obs])
    new_speed, new_dir = perturb_arrays(speeds, dirs, spec, rng)
    return [
        replace(o, speed=float(s), direction=float(d))
        for o, s, d in zip(obs, new_speed, new_dir)
    ]


def perturb_arrays(speeds: np.ndarray, dirs: np.ndarray, spec: WindPerturbationSpec,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    draws = rng.standard_normal((len(speeds), 2))
    new_speed = np.maximum(0.0, speeds + spec.speed_sigma * draws[:, 0])
    new_dir = np.mod(dirs + spec.direction_sigma * draws[:, 1], 360.0)
    return new_speed, new_dir


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------

def idw_weights(stations_xy: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Row-normalised inverse-distance-squared weights, shape (ny*nx, n_stations).

    A cell closer than half a cell to a station copies that station
    exactly (the nearest one if several qualify).
    """
    stations_xy = np.asarray(stations_xy, dtype=float).reshape(-1, 2)
    gx, gy = np.meshgrid(spec.x, spec.y)
    cells = np.column_stack([gx.ravel(), gy.ravel()])
    d2 = ((cells[:, None, :] - stations_xy[None, :, :]) ** 2).sum(-1)
    half = 0.5 * min(spec.dx, spec.dy)
    snap = d2 < half * half
    with np.errstate(divide="ignore", invalid="ignore"):
        w = 1.0 / d2
        w[~np.isfinite(w)] = 0.0
        w /= w.sum(axis=1, keepdims=True)
    snapped = snap.any(axis=1)
    if snapped.any():
        nearest = np.argmin(d2[snapped], axis=1)
        w[snapped] = 0.0
        w[np.flatnonzero(snapped), nearest] = 1.0
    return w


def interpolate_uv(weights: np.ndarray, u_st: np.ndarray, v_st: np.ndarray,
                   spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Apply IDW weights to station components.

    ``u_st``/``v_st`` may carry a leading batch axis; the result then has
    shape (batch, ny, nx).  Rows are reduced independently, so the result
    for one member does not depend on batch size.
    """
    u_st = np.asarray(u_st, dtype=float)
    v_st = np.asarray(v_st, dtype=float)
    lead = u_st.shape[:-1]
    u = (weights * u_st[..., None, :]).sum(-1).reshape(lead + (spec.ny, spec.nx))
    v = (weights * v_st[..., None, :]).sum(-1).reshape(lead + (spec.ny, spec.nx))
    return u, v


def interpolate_field(obs: Sequence[WindObservation], grid_spec: GridSpec) -> WindGrid:
    if not obs:
        raise WindDataError("no wind data")
    xy = np.array([o.position[:2] for o in obs], dtype=float)
    uv = np.array([o.uv for o in obs], dtype=float)
    w = idw_weights(xy, grid_spec)
    u, v = interpolate_uv(w, uv[:, 0], uv[:, 1], grid_spec)
    return WindGrid(grid_spec, u, v, valid_time=max(o.time for o in obs))


# ---------------------------------------------------------------------------
# Mass consistency
# ---------------------------------------------------------------------------

def divergence(u: np.ndarray, v: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Central-difference divergence at interior cells; shape (..., ny-2, nx-2)."""
    dudx = (u[..., 1:-1, 2:] - u[..., 1:-1, :-2]) / (2.0 * dx)
    dvdy = (v[..., 2:, 1:-1] - v[..., :-2, 1:-1]) / (2.0 * dy)
    return dudx + dvdy


def _divergence_adjoint(r: np.ndarray, dx: float, dy: float, shape) -> tuple[np.ndarray, np.ndarray]:
    gu = np.zeros(shape)
    gv = np.zeros(shape)
    cx = r / (2.0 * dx)
    cy = r / (2.0 * dy)
    gu[..., 1:-1, 2:] += cx
    gu[..., 1:-1, :-2] -= cx
    gv[..., 2:, 1:-1] += cy
    gv[..., :-2, 1:-1] -= cy
    return gu, gv


def relax_divergence(u: np.ndarray, v: np.ndarray, dx: float, dy: float,
                     iterations: int = 50, relaxation: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Jacobi sweeps on the least-change divergence correction.

    The adjusted field is ``u0 - D^T lam`` with ``lam`` iterated toward
    ``(D D^T) lam = D u0``.  Every row of ``D D^T`` has the same diagonal
    ``c`` and its spectrum lies in [0, 2c], so for ``0 < relaxation <= 1``
    each sweep multiplies the divergence by a symmetric operator of norm
    <= 1: the L2 divergence can never grow.  Works on batched arrays.
    """
    if not 0.0 < relaxation <= 1.0 and iterations > 0:
        raise ValueError("relaxation must lie in (0, 1]")
    u = np.array(u, dtype=float, copy=True)
    v = np.array(v, dtype=float, copy=True)
    diag = 1.0 / (2.0 * dx * dx) + 1.0 / (2.0 * dy * dy)
    step = relaxation / diag
    for _ in range(iterations):
        r = divergence(u, v, dx, dy)
        gu, gv = _divergence_adjoint(r, dx, dy, u.shape)
        u -= step * gu
        v -= step * gv
    return u, v


def adjust_mass_consistency(grid: WindGrid, iterations: int = 50, relaxation: float = 1.0) -> WindGrid:
    """Reduce the grid's discrete divergence while staying near the input.

    The returned grid records the L2 distance from the input field in
    ``adjustment_distance``.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations == 0:
        return grid
    u, v = relax_divergence(grid.u, grid.v, grid.spec.dx, grid.spec.dy, iterations, relaxation)
    dist = float(np.sqrt(np.sum((u - grid.u) ** 2 + (v - grid.v) ** 2)))
    return WindGrid(grid.spec, u, v, grid.valid_time, adjustment_distance=dist)


# ---------------------------------------------------------------------------
# Lookup
# ---------------------------------------------------------------------------

def bilinear(spec: GridSpec, u: np.ndarray, v: np.ndarray, x, y):
    """Vectorised bilinear lookup of cell-centre values.

    ``u``/``v`` are (ny, nx) or (batch, ny, nx); ``x``/``y`` are scalars,
    or arrays whose leading axis matches the batch axis.  Points outside
    the grid are clamped to the boundary.  Returns ``(u, v, clamped)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    fx = (x - spec.origin[0]) / spec.dx
    fy = (y - spec.origin[1]) / spec.dy
    clamped = (fx < 0) | (fx > spec.nx - 1) | (fy < 0) | (fy > spec.ny - 1)
    fx = np.clip(fx, 0.0, spec.nx - 1)
    fy = np.clip(fy, 0.0, spec.ny - 1)
    i0 = np.minimum(np.floor(fx).astype(int), spec.nx - 2)
    j0 = np.minimum(np.floor(fy).astype(int), spec.ny - 2)
    tx = fx - i0
    ty = fy - j0

    def lookup(f):
        if f.ndim == 2:
            g = lambda jj, ii: f[jj, ii]  # noqa: E731
        else:
            b = np.arange(f.shape[0]).reshape((-1,) + (1,) * (i0.ndim - 1))
            g = lambda jj, ii: f[b, jj, ii]  # noqa: E731
        return ((1 - tx) * (1 - ty) * g(j0, i0) + tx * (1 - ty) * g(j0, i0 + 1)
                + (1 - tx) * ty * g(j0 + 1, i0) + tx * ty * g(j0 + 1, i0 + 1))

    return lookup(u), lookup(v), clamped


def sample_wind_at(grid: WindGrid, position: Sequence[float]) -> WindSample:
    u, v, clamped = bilinear(grid.spec, grid.u, grid.v, position[0], position[1])
    if clamped:
        logger.warning("wind lookup at (%.1f, %.1f) is outside the grid; clamped", position[0], position[1])
    return WindSample(float(u), float(v), bool(clamped))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def read_wind_csv(path: str | Path) -> list[WindObservation]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(WIND_CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise WindDataError(f"{path}: line 1: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(WindObservation(
                    station_id=row["station_id"],
                    position=(float(row["x_m"]), float(row["y_m"]), float(row["z_m"])),
                    time=float(row["time_s"]),
                    speed=float(row["speed_ms"]),
                    direction=float(row["dir_deg"]),
                ))
            except (TypeError, ValueError) as exc:
                raise WindDataError(f"{path}: line {lineno}: {exc}") from None
    if not out:
        raise WindDataError(f"{path}: no wind data")
    return out


def write_wind_csv(path: str | Path, obs: Iterable[WindObservation]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WIND_CSV_HEADER)
        for o in obs:
            w.writerow([o.station_id, *(repr(float(c)) for c in o.position),
                        repr(float(o.time)), repr(float(o.speed)), repr(float(o.direction))])


def group_by_epoch(obs: Iterable[WindObservation]) -> dict[float, list[WindObservation]]:
    epochs: dict[float, list[WindObservation]] = {}
    for o in obs:
        epochs.setdefault(float(o.time), []).append(o)
    for k in epochs:
        epochs[k].sort(key=lambda o: o.station_id)
    return dict(sorted(epochs.items()))


def observations_at(epochs: dict[float, list[WindObservation]], t: float) -> list[WindObservation]:
    """Readings of the latest epoch at or before ``t`` (winds are held piecewise constant)."""
    times = [e for e in epochs if e <= t + 1e-9]
    if not times:
        times = [next(iter(epochs))]
    return epochs[times[-1]]
