"""Trajectory dataset generation and CSV serialization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vehicle import (
    DEFAULT_PARAMS,
    MU_RANGE,
    WIND_MAX,
    VehicleParams,
    make_scenario,
    scenario_env,
    step_bicycle_array,
)

CSV_COLUMNS = [
    "segment_id", "k", "px", "py", "psi", "v", "delta", "a", "mu", "w",
    "px_next", "py_next", "psi_next", "v_next",
]


@dataclass(frozen=True)
class DatasetConfig:
    """Dataset generation settings.

    ``mix`` entries are scenario ids (``S1``, ``S2``, ``S3``) or ``box``, which
    draws one constant environment per segment uniformly from the admissible
    (mu, w) box.
    """

    n_segments: int = 200
    length: int = 50
    dt: float = 0.1
    mix: tuple[str, ...] = ("S1", "S2", "box")
    cutoff_hz: float = 1.0
    v0_range: tuple[float, float] = (2.0, 8.0)
    psi0_range: tuple[float, float] = (-0.3, 0.3)
    params: VehicleParams = DEFAULT_PARAMS


LARGE_SCALE = DatasetConfig(n_segments=8000, length=50, mix=("S1", "S2"))


@dataclass
class Dataset:
    """Chained segments stored as arrays of shape (segments, length, dim)."""

    x: np.ndarray
    u: np.ndarray
    e: np.ndarray
    x_next: np.ndarray
    dt: float

    @property
    def n_segments(self) -> int:
        return self.x.shape[0]

    @property
    def segment_length(self) -> int:
        return self.x.shape[1]

    def flat(self):
        """(x, u, e, x_next) with segments concatenated along the first axis."""
        return tuple(a.reshape(-1, a.shape[-1]) for a in (self.x, self.u, self.e, self.x_next))

    def __len__(self) -> int:
        return self.x.shape[0] * self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.u[idx], self.e[idx], self.x_next[idx], self.dt)

    def split(self, holdout_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        perm = np.random.default_rng(seed).permutation(self.n_segments)
        n_hold = max(1, int(round(holdout_fraction * self.n_segments)))
        return self.subset(np.sort(perm[n_hold:])), self.subset(np.sort(perm[:n_hold]))


def _filter_gain(dt: float, cutoff_hz: float) -> float:
    tau = 1.0 / (2.0 * math.pi * cutoff_hz)
    return dt / (dt + tau)


def generate_dataset(cfg: DatasetConfig, seed: int) -> Dataset:
    """Roll out the plant under low-pass-filtered uniform random controls."""
    if cfg.n_segments <= 0 or cfg.length <= 0:
        raise ValueError("dataset needs at least one segment of at least one step")
    if not cfg.mix:
        raise ValueError("scenario mix is empty")
    rng = np.random.default_rng(seed)
    p = cfg.params
    lim = np.array([p.delta_max, p.a_max])
    gain = _filter_gain(cfg.dt, cfg.cutoff_hz)
    S, L = cfg.n_segments, cfg.length
    X = np.empty((S, L, 4))
    U = np.empty((S, L, 2))
    E = np.empty((S, L, 2))
    Xn = np.empty((S, L, 4))
    scenarios = {sid: make_scenario(sid) for sid in cfg.mix if sid != "box"}
    for s in range(S):
        kind = cfg.mix[rng.integers(len(cfg.mix))]
        if kind == "box":
            env = np.array([rng.uniform(*MU_RANGE), rng.uniform(-WIND_MAX, WIND_MAX)])
            envs = np.tile(env, (L, 1))
        else:
            sc = scenarios[kind]
            t0 = rng.uniform(0.0, max(sc.duration - L * cfg.dt, 0.0))
            envs = np.array([scenario_env(sc, min(t0 + k * cfg.dt, sc.duration)) for k in range(L)])
        x = np.array([0.0, 0.0, rng.uniform(*cfg.psi0_range), rng.uniform(*cfg.v0_range)])
        u = rng.uniform(-lim, lim)
        for k in range(L):
            u = u + gain * (rng.uniform(-lim, lim) - u)
            xn = step_bicycle_array(x, u, envs[k], cfg.dt, p)
            X[s, k], U[s, k], E[s, k], Xn[s, k] = x, u, envs[k], xn
            x = xn
    return Dataset(X, U, E, Xn, cfg.dt)


def write_dataset_csv(d: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for s in range(d.n_segments):
            for k in range(d.segment_length):
                vals = [*d.x[s, k], *d.u[s, k], *d.e[s, k], *d.x_next[s, k]]
                w.writerow([s, k] + [f"{v:.17g}" for v in vals])


def read_dataset_csv(path: str | Path, dt: float = 0.1) -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected dataset header {header}")
        rows = [list(map(float, row)) for row in r]
    arr = np.array(rows)
    seg = arr[:, 0].astype(int)
    S = seg.max() + 1
    L = len(arr) // S
    if S * L != len(arr):
        raise ValueError("segments have unequal length")
    arr = arr[np.lexsort((arr[:, 1], seg))].reshape(S, L, -1)
    return Dataset(arr[..., 2:6], arr[..., 6:8], arr[..., 8:10], arr[..., 10:14], dt)
