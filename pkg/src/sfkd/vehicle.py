"""Kinematic bicycle plant with friction/wind coupling, scenarios and reference paths."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MU_RANGE = (0.3, 0.9)
WIND_MAX = 8.0


class VehicleState(NamedTuple):
    px: float
    py: float
    psi: float
    v: float


class ControlInput(NamedTuple):
    delta: float
    a: float


class EnvInput(NamedTuple):
    mu: float
    w: float


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.7  # m
    mu_ref: float = 0.9  # friction at which steering/traction are unattenuated
    k_wind: float = 0.05  # lateral drift per unit wind speed
    delta_max: float = 0.5  # rad
    a_max: float = 3.0  # m/s^2
    v_max: float = 15.0  # m/s

    def saturate(self, u):
        u = np.asarray(u, dtype=float)
        lim = np.array([self.delta_max, self.a_max])
        return np.clip(u, -lim, lim)


DEFAULT_PARAMS = VehicleParams()


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=float), 2.0 * math.pi)


def check_env(e) -> None:
    mu, w = float(e[0]), float(e[1])
    if not (MU_RANGE[0] - 1e-12 <= mu <= MU_RANGE[1] + 1e-12) or abs(w) > WIND_MAX + 1e-12:
        raise ValueError(f"environment {tuple(e)} outside mu in {MU_RANGE}, |w| <= {WIND_MAX}")


def step_bicycle(x, u, e, dt: float, params: VehicleParams = DEFAULT_PARAMS) -> VehicleState:
    """Advance the plant one explicit-Euler step.

    Steering and acceleration are attenuated by ``min(1, mu / mu_ref)``; wind
    adds a lateral drift ``k_wind * w`` to the y-velocity.  Speed is clamped to
    ``[0, v_max]``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    e = np.asarray(e, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u)) and np.all(np.isfinite(e))):
        raise ValueError(f"non-finite input to step_bicycle: x={x}, u={u}, e={e}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if abs(u[0]) > params.delta_max + 1e-12 or abs(u[1]) > params.a_max + 1e-12:
        raise ValueError(f"control {tuple(u)} exceeds saturation limits")
    check_env(e)
    return VehicleState(*step_bicycle_array(x, u, e, dt, params))


def step_bicycle_array(x, u, e, dt: float, params: VehicleParams = DEFAULT_PARAMS) -> np.ndarray:
    """Unchecked vectorised update; rows of ``x``, ``u``, ``e`` are independent."""
    px, py, psi, v = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    grip = np.minimum(1.0, e[..., 0] / params.mu_ref)
    delta_eff = u[..., 0] * grip
    a_eff = u[..., 1] * grip
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (4,)))
    out[..., 0] = px + dt * v * np.cos(psi)
    out[..., 1] = py + dt * (v * np.sin(psi) + params.k_wind * e[..., 1])
    out[..., 2] = wrap_angle(psi + dt * v / params.wheelbase * np.tan(delta_eff))
    out[..., 3] = np.clip(v + dt * a_eff, 0.0, params.v_max)
    return out


# --------------------------------------------------------------------------- scenarios

ENV_A = EnvInput(0.9, 0.0)
ENV_B = EnvInput(0.5, 4.0)
ENV_C = EnvInput(0.3, 8.0)
S2_PRE = EnvInput(0.7, 0.0)
S2_POST = EnvInput(0.35, 0.0)


@dataclass(frozen=True)
class Scenario:
    """Piecewise-constant environment schedule.

    ``breakpoints[i]`` is the start time of ``levels[i]``; the first breakpoint
    is 0.  When ``cycle_period`` is set the schedule repeats with that period.
    """

    id: str
    breakpoints: tuple[float, ...]
    levels: tuple[EnvInput, ...]
    duration: float = 60.0
    cycle_period: float | None = None

    def __post_init__(self):
        if len(self.breakpoints) != len(self.levels) or self.breakpoints[0] != 0.0:
            raise ValueError("breakpoints must start at 0 and match levels")
        for e in self.levels:
            check_env(e)

    @property
    def distinct_levels(self) -> list[EnvInput]:
        return list(dict.fromkeys(self.levels))


def make_scenario(sid: str, duration: float = 60.0) -> Scenario:
    if sid == "S1":
        return Scenario("S1", (0.0,), (ENV_A,), duration)
    if sid == "S2":
        return Scenario("S2", (0.0, 5.0), (S2_PRE, S2_POST), duration)
    if sid == "S3":
        seq = (ENV_A, ENV_B, ENV_C, ENV_B, ENV_A)
        return Scenario("S3", tuple(3.0 * i for i in range(len(seq))), seq, duration, cycle_period=15.0)
    raise ValueError(f"unknown scenario {sid!r}; expected S1, S2 or S3")


# slack so that t = k * dt lands on the segment it names despite round-off
_T_EPS = 1e-9


def scenario_env(s: Scenario, t: float) -> EnvInput:
    """Environment in force at time ``t`` (right-continuous at switches)."""
    if not math.isfinite(t) or t < -_T_EPS or t > s.duration + _T_EPS:
        raise ValueError(f"t={t} outside [0, {s.duration}] for scenario {s.id}")
    tt = max(t, 0.0)
    if s.cycle_period is not None:
        tt = tt - s.cycle_period * math.floor(tt / s.cycle_period + _T_EPS)
        tt = max(tt, 0.0)
    idx = 0
    for i, b in enumerate(s.breakpoints):
        if tt + _T_EPS >= b:
            idx = i
    return s.levels[idx]


def switch_times(s: Scenario) -> list[float]:
    """Times in (0, duration) at which the environment actually changes."""
    period = s.cycle_period or s.duration
    out = []
    c = 0
    while c * period < s.duration:
        for b in s.breakpoints:
            t = round(c * period + b, 9)
            if 0.0 < t < s.duration and scenario_env(s, t) != scenario_env(s, t - 1e-6):
                out.append(t)
        c += 1
    return out


# --------------------------------------------------------------------------- reference path


@dataclass(frozen=True)
class PathConfig:
    """Constant-speed lane along +x with an optional sinusoidal lateral profile."""

    speed: float = 5.0
    amplitude: float = 1.0
    wavelength: float = 50.0
    kind: str = "sine"  # "sine" | "straight"

    def lateral(self, px):
        if self.kind == "straight" or self.amplitude == 0.0:
            return np.zeros_like(np.asarray(px, dtype=float))
        return self.amplitude * np.sin(2.0 * math.pi * np.asarray(px, dtype=float) / self.wavelength)

    def slope(self, px):
        if self.kind == "straight" or self.amplitude == 0.0:
            return np.zeros_like(np.asarray(px, dtype=float))
        k = 2.0 * math.pi / self.wavelength
        return self.amplitude * k * np.cos(k * np.asarray(px, dtype=float))


def reference_state(path: PathConfig, t) -> VehicleState | np.ndarray:
    """Reference pose at time ``t``; vectorised when ``t`` is an array."""
    tt = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(tt)) or np.any(tt < 0):
        raise ValueError(f"reference time must be finite and >= 0, got {t}")
    px = path.speed * tt
    out = np.stack(
        [px, path.lateral(px), np.arctan(path.slope(px)), np.full_like(px, path.speed)], axis=-1
    )
    if out.ndim == 1:
        return VehicleState(*map(float, out))
    return out


def lateral_deviation(path: PathConfig, px, py, iters: int = 8) -> np.ndarray:
    """Absolute perpendicular distance from (px, py) to the path curve.

    The nearest curve point lies within ``|py - f(px)|`` of ``px`` along the
    lane, so that window is scanned at 1/32 of a wavelength and the best
    sample is refined by Newton steps on the squared distance, each step
    limited to the scan spacing.
    """
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    if path.kind == "straight" or path.amplitude == 0.0:
        return np.abs(py)
    k = 2.0 * math.pi / path.wavelength
    amp = path.amplitude
    shape = np.broadcast_shapes(px.shape, py.shape)
    qx, qy = np.broadcast_to(px, shape).reshape(-1), np.broadcast_to(py, shape).reshape(-1)
    spacing = path.wavelength / 32.0
    dist = lambda s, x, y: np.hypot(s - x, amp * np.sin(k * s) - y)
    out = np.empty(qx.shape)
    for i, (x, y) in enumerate(zip(qx, qy)):
        reach = abs(y - amp * math.sin(k * x))
        n = max(3, int(math.ceil(2.0 * reach / spacing)) + 1)
        grid = np.linspace(x - reach, x + reach, n)
        s = grid[np.argmin(dist(grid, x, y))]
        best = float(dist(s, x, y))
        for _ in range(iters):
            f, f1, f2 = amp * math.sin(k * s), amp * k * math.cos(k * s), -amp * k * k * math.sin(k * s)
            g = (s - x) + (f - y) * f1
            h = 1.0 + f1 * f1 + (f - y) * f2
            step = g / h if h > 1e-9 else math.copysign(spacing, g)
            s -= max(-spacing, min(spacing, step))
            best = min(best, float(dist(s, x, y)))
        out[i] = best
    return out.reshape(shape)
