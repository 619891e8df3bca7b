"""Gaussian puff transport, diffusion and receptor concentrations.

A release becomes a single puff that is advected by the local wind,
grows by Fickian diffusion (sigma^2 += a^2 dt) and reflects perfectly at
the ground.  The scalar functions (:func:`advect_diffuse_step`,
:func:`concentration_at`) define the model; the ``*_batch`` kernels are
the same arithmetic over arrays of puffs, used by the ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .windfield import WindGrid, bilinear

TWO_PI_32 = (2.0 * np.pi) ** 1.5

# SF6 tracer and dry air near the surface.
SF6_MOLAR_MASS = 0.14606  # kg/mol
AIR_DENSITY = 1.225  # kg/m^3
AIR_MOLAR_MASS = 0.028964  # kg/mol


@dataclass(frozen=True)
class ReleaseSpec:
    mass: float
    position: tuple[float, float, float]
    start_time: float = 0.0
    initial_sigma: float = 1.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"release mass must be > 0, got {self.mass}")
        if self.position[2] < 0:
            raise ValueError("release height must be >= 0")
        if not self.initial_sigma > 0:
            raise ValueError("initial_sigma must be > 0")


@dataclass(frozen=True)
class DiffusionSpec:
    """Fickian growth coefficients (m s^-1/2) and the sigma_z cap (m)."""

    a_h: float = 1.5
    a_z: float = 0.3
    sigma_z_max: float = 500.0

    def __post_init__(self):
        if not (self.a_h > 0 and self.a_z > 0 and self.sigma_z_max > 0):
            raise ValueError("diffusion coefficients and cap must be > 0")


@dataclass(frozen=True)
class Puff:
    mass: float
    centroid: tuple[float, float, float]
    sigma_h: float
    sigma_z: float
    age: float = 0.0
    off_domain: bool = False

    def __post_init__(self):
        if self.mass < 0:
            raise ValueError("puff mass must be >= 0")
        if not (self.sigma_h > 0 and self.sigma_z > 0):
            raise ValueError("puff sigmas must be > 0")
        if self.centroid[2] < 0:
            raise ValueError("puff centroid must be at or above ground")


def release(spec: ReleaseSpec) -> Puff:
    return Puff(
        mass=spec.mass,
        centroid=tuple(float(c) for c in spec.position),
        sigma_h=spec.initial_sigma,
        sigma_z=spec.initial_sigma,
        age=0.0,
    )


def grow_sigmas(sigma_h, sigma_z, diffusion: DiffusionSpec, dt):
    sh = np.sqrt(sigma_h * sigma_h + diffusion.a_h * diffusion.a_h * dt)
    sz = np.minimum(diffusion.sigma_z_max, np.sqrt(sigma_z * sigma_z + diffusion.a_z * diffusion.a_z * dt))
    # the cap never shrinks a puff that started above it
    sz = np.maximum(sz, sigma_z)
    return sh, sz


def advect_diffuse_step(puff: Puff, grid: WindGrid, dt: float,
                        diffusion: DiffusionSpec = DiffusionSpec()) -> Puff:
    """Move a puff by the wind at its centroid and grow it over ``dt`` seconds.

    A puff that leaves the grid is flagged ``off_domain`` and from then on
    contributes nothing at any receptor.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if puff.off_domain:
        return replace(puff, age=puff.age + dt)
    u, v, _ = bilinear(grid.spec, grid.u, grid.v, puff.centroid[0], puff.centroid[1])
    x = puff.centroid[0] + float(u) * dt
    y = puff.centroid[1] + float(v) * dt
    sh, sz = grow_sigmas(puff.sigma_h, puff.sigma_z, diffusion, dt)
    off = not bool(grid.spec.contains(x, y))
    return replace(puff, centroid=(x, y, puff.centroid[2]), sigma_h=float(sh), sigma_z=float(sz),
                   age=puff.age + dt, off_domain=off)


def kernel(mass, cx, cy, cz, sigma_h, sigma_z, rx, ry, rz):
    """Reflected Gaussian concentration (kg/m^3); broadcasts over all arguments."""
    sh2 = sigma_h * sigma_h
    sz2 = sigma_z * sigma_z
    dx = rx - cx
    dy = ry - cy
    horiz = np.exp(-(dx * dx + dy * dy) / (2.0 * sh2))
    vert = np.exp(-((rz - cz) ** 2) / (2.0 * sz2)) + np.exp(-((rz + cz) ** 2) / (2.0 * sz2))
    return mass / (TWO_PI_32 * sh2 * sigma_z) * horiz * vert


def concentration_at(puff: Puff, receptor: Sequence[float]) -> float:
    if puff.off_domain or puff.mass == 0:
        return 0.0
    cx, cy, cz = puff.centroid
    return float(kernel(puff.mass, cx, cy, cz, puff.sigma_h, puff.sigma_z, *receptor))


def total_concentration(puffs: Sequence[Puff], receptor: Sequence[float]) -> float:
    return sum(concentration_at(p, receptor) for p in puffs)


def kg_m3_to_ppt(c):
    """Mass concentration of SF6 to parts-per-trillion by volume."""
    return c / SF6_MOLAR_MASS * (AIR_MOLAR_MASS / AIR_DENSITY) * 1e12


def accumulate_dose(times, concentrations, window: tuple[float, float]) -> float:
    """Trapezoidal dose in ppt-hr over ``window`` from a ppt time series.

    ``times`` are seconds.  Window edges that fall between samples are
    linearly interpolated; a window reaching outside the series is an
    error.
    """
    t = np.asarray(times, dtype=float)
    c = np.asarray(concentrations, dtype=float)
    start, end = window
    if t.size < 2 or end < start or start < t[0] - 1e-9 or end > t[-1] + 1e-9:
        raise ValueError(f"window {window} is not covered by the concentration series")
    inside = (t > start) & (t < end)
    tt = np.concatenate([[start], t[inside], [end]])
    cc = np.concatenate([[np.interp(start, t, c)], c[inside], [np.interp(end, t, c)]])
    dose = float(np.sum(0.5 * (cc[1:] + cc[:-1]) * np.diff(tt))) / 3600.0
    return max(dose, 0.0)


# ---------------------------------------------------------------------------
# Batched state
# ---------------------------------------------------------------------------

@dataclass
class PuffBatch:
    """Puffs for many model members as arrays of shape (members, releases).

    ``active`` marks puffs already released; ``off`` marks puffs that have
    left the domain.
    """

    mass: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    sigma_h: np.ndarray
    sigma_z: np.ndarray
    age: np.ndarray
    active: np.ndarray
    off: np.ndarray

    FIELDS = ("mass", "x", "y", "z", "sigma_h", "sigma_z", "age", "active", "off")

    @classmethod
    def initial(cls, releases: Sequence[ReleaseSpec], members: int) -> "PuffBatch":
        shape = (members, len(releases))
        rel = lambda f: np.tile(np.array([f(r) for r in releases], dtype=float), (members, 1))  # noqa: E731
        return cls(
            mass=rel(lambda r: r.mass),
            x=rel(lambda r: r.position[0]),
            y=rel(lambda r: r.position[1]),
            z=rel(lambda r: r.position[2]),
            sigma_h=rel(lambda r: r.initial_sigma),
            sigma_z=rel(lambda r: r.initial_sigma),
            age=np.zeros(shape),
            active=np.zeros(shape, dtype=bool),
            off=np.zeros(shape, dtype=bool),
        )

    @property
    def members(self) -> int:
        return self.mass.shape[0]

    def take(self, idx) -> "PuffBatch":
        return PuffBatch(**{f: getattr(self, f)[idx].copy() for f in self.FIELDS})

    def copy(self) -> "PuffBatch":
        return self.take(slice(None))

    @classmethod
    def concat(cls, parts: Sequence["PuffBatch"]) -> "PuffBatch":
        return cls(**{f: np.concatenate([getattr(p, f) for p in parts]) for f in cls.FIELDS})

    def puffs(self, member: int) -> list[Puff]:
        out = []
        for r in range(self.mass.shape[1]):
            if not self.active[member, r]:
                continue
            out.append(Puff(
                mass=float(self.mass[member, r]),
                centroid=(float(self.x[member, r]), float(self.y[member, r]), float(self.z[member, r])),
                sigma_h=float(self.sigma_h[member, r]),
                sigma_z=float(self.sigma_z[member, r]),
                age=float(self.age[member, r]),
                off_domain=bool(self.off[member, r]),
            ))
        return out


def activate(batch: PuffBatch, start_times: np.ndarray, t: float) -> None:
    batch.active |= (start_times[None, :] <= t + 1e-9)


def step_velocity(batch: PuffBatch, spec, u_grid: np.ndarray, v_grid: np.ndarray):
    """Wind at each puff centroid; ``u_grid``/``v_grid`` are (members, ny, nx)."""
    u, v, _ = bilinear(spec, u_grid, v_grid, batch.x, batch.y)
    moving = batch.active & ~batch.off
    return np.where(moving, u, 0.0), np.where(moving, v, 0.0)


def advance_batch(batch: PuffBatch, vel_u: np.ndarray, vel_v: np.ndarray,
                  diffusion: DiffusionSpec, dt: float) -> PuffBatch:
    """State after ``dt`` seconds at fixed velocity; the batch is not modified."""
    live = batch.active & ~batch.off
    sh, sz = grow_sigmas(batch.sigma_h, batch.sigma_z, diffusion, dt)
    return PuffBatch(
        mass=batch.mass,
        x=batch.x + vel_u * dt,
        y=batch.y + vel_v * dt,
        z=batch.z,
        sigma_h=np.where(live, sh, batch.sigma_h),
        sigma_z=np.where(live, sz, batch.sigma_z),
        age=np.where(batch.active, batch.age + dt, batch.age),
        active=batch.active,
        off=batch.off,
    )


def batch_concentration(batch: PuffBatch, receptors: np.ndarray) -> np.ndarray:
    """Summed concentration (kg/m^3) at receptors, shape (members, n_receptors)."""
    live = batch.active & ~batch.off
    mass = np.where(live, batch.mass, 0.0)
    r = receptors
    c = kernel(mass[:, :, None], batch.x[:, :, None], batch.y[:, :, None], batch.z[:, :, None],
               batch.sigma_h[:, :, None], batch.sigma_z[:, :, None],
               r[None, None, :, 0], r[None, None, :, 1], r[None, None, :, 2])
    return c.sum(axis=1)


def integrate_window(batch: PuffBatch, u_grid: np.ndarray, v_grid: np.ndarray, spec,
                     diffusion: DiffusionSpec, start_times: np.ndarray, receptors: np.ndarray,
                     t0: float, t1: float, dt: float = 60.0, samples_per_step: int = 6):
    """Advance puffs from ``t0`` to ``t1`` and integrate receptor dose.

    Transport uses steps of ``dt`` (the last one shortened to land on
    ``t1``).  Within each step the wind is frozen at the step-start
    centroid, so intermediate states follow exactly from
    :func:`advance_batch`; concentrations are sampled ``samples_per_step``
    times per step and integrated with the trapezoid rule.

    Returns the advanced batch and doses in ppt-hr, shape (members, receptors).
    """
    if not t1 > t0:
        raise ValueError("window end must follow its start")
    receptors = np.asarray(receptors, dtype=float).reshape(-1, 3)
    dose = np.zeros((batch.members, receptors.shape[0]))
    batch = batch.copy()
    activate(batch, start_times, t0)
    c_prev = batch_concentration(batch, receptors)
    t = t0
    while t < t1 - 1e-9:
        h = min(dt, t1 - t)
        activate(batch, start_times, t)
        vu, vv = step_velocity(batch, spec, u_grid, v_grid)
        for j in range(1, samples_per_step + 1):
            state = advance_batch(batch, vu, vv, diffusion, h * j / samples_per_step)
            c = batch_concentration(state, receptors)
            dose += 0.5 * (c_prev + c) * (h / samples_per_step)
            c_prev = c
        batch = state
        batch.off = batch.off | (batch.active & ~spec.contains(batch.x, batch.y))
        t += h
    return batch, kg_m3_to_ppt(dose) / 3600.0
