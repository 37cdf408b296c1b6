"""Closed-loop episodes, metrics, the disturbance sweep and soundness rollouts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import DatasetConfig, generate_dataset
from .model import SfkdModel
from .mppi import ControllerState, MppiConfig, control_step
from .stability import IssCertificate, iss_trajectory_bound, violation_rate
from .vehicle import (
    DEFAULT_PARAMS,
    PathConfig,
    VehicleParams,
    lateral_deviation,
    make_scenario,
    reference_state,
    scenario_env,
    step_bicycle,
    switch_times,
)

METHOD_TAGS = {"full": "SFKD", "no_fiber": "SFKD-Fiber", "no_contr": "SFKD-Contr"}

EPISODE_COLUMNS = (
    "method", "scenario", "seed", "checkpoint", "failed",
    "t", "px", "py", "psi", "v", "ref_px", "ref_py", "ref_psi", "ref_v",
    "delta", "a", "mu", "w", "lat_dev", "err_norm", "threshold", "min_cost", "mean_cost", "ess",
)
_META = EPISODE_COLUMNS[:5]
_NUM = EPISODE_COLUMNS[5:]


@dataclass(frozen=True)
class EvalConfig:
    duration: float = 60.0
    dt: float = 0.1
    path: PathConfig = field(default_factory=PathConfig)
    mppi: MppiConfig = field(default_factory=MppiConfig)
    monitor_window: int = 20  # steps between re-anchoring the monitored latent rollout
    init_offset: float = 0.1  # max initial lateral offset (m), drawn per episode
    rollout_dtype: str = "float32"
    params: VehicleParams = DEFAULT_PARAMS

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))


LARGE_EVAL = EvalConfig(mppi=MppiConfig(M=1500))


@dataclass
class EpisodeLog:
    method: str
    scenario: str
    seed: int
    checkpoint: str
    failed: bool
    data: dict[str, np.ndarray]  # one array per numeric column

    def __len__(self) -> int:
        return len(self.data["t"])

    def __getitem__(self, key: str) -> np.ndarray:
        return self.data[key]

    def rows(self):
        meta = [self.method, self.scenario, self.seed, self.checkpoint, int(self.failed)]
        for i in range(len(self)):
            yield meta + [f"{self.data[c][i]:.17g}" for c in _NUM]


def write_episodes_csv(logs: list[EpisodeLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        for log in logs:
            w.writerows(log.rows())


def read_episodes_csv(path: str | Path) -> list[EpisodeLog]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != EPISODE_COLUMNS:
            raise ValueError(f"unexpected episode header {header}")
        groups: dict[tuple, list[list[str]]] = {}
        for row in r:
            groups.setdefault(tuple(row[:5]), []).append(row[5:])
    out = []
    for (method, scen, seed, ckpt, failed), rows in groups.items():
        arr = np.array(rows, dtype=float)
        out.append(EpisodeLog(method, scen, int(seed), ckpt, bool(int(failed)),
                              {c: arr[:, i].copy() for i, c in enumerate(_NUM)}))
    return out


# --------------------------------------------------------------------------- episodes


class _LatentMonitor:
    """Tracks ``||encode(x, e) - z_hat||`` for a model rollout re-anchored every ``window`` steps.

    Positions are expressed relative to the anchor; on an environment
    switch the rolled latent is carried over by decode/re-encode.
    """

    def __init__(self, m: SfkdModel, window: int):
        self.m, self.window = m, window
        self.anchor = None
        self.z_hat = None
        self.e = None

    def _enc(self, x, e):
        xr = np.array(x, dtype=float)
        xr[:2] -= self.anchor
        return self.m.encode_batch(xr, np.asarray(e, dtype=float))[0]

    def observe(self, k: int, x, e) -> float:
        e = np.asarray(e, dtype=float)
        if k % self.window == 0:
            self.anchor = np.array(x[:2], dtype=float)
            self.z_hat = self._enc(x, e)
        elif self.e is not None and not np.array_equal(e, self.e):
            self.z_hat = self.m.encode_batch(self.m.decode_raw(self.z_hat[None]), e)[0]
        self.e = e
        return float(np.linalg.norm(self._enc(x, e) - self.z_hat))

    def advance(self, u) -> None:
        psi = self.m.embed(self.e)
        self.z_hat = self.m.step_latent(self.z_hat[None], np.asarray(u, dtype=float)[None], psi)[0]


def run_episode(
    m: SfkdModel,
    scenario: str,
    cfg: EvalConfig,
    seed: int,
    delta_max: float,
    method: str = "SFKD",
    checkpoint: str = "",
) -> EpisodeLog:
    """Closed-loop MPPI episode on the true plant; deterministic per seed."""
    sc = make_scenario(scenario, cfg.duration)
    rng = np.random.default_rng(seed)
    ctrl_model = m.astype(np.dtype(cfg.rollout_dtype))
    ctrl = ControllerState.initial(cfg.mppi, int(rng.integers(2**63)))
    monitor = _LatentMonitor(m, cfg.monitor_window)
    x = np.array(reference_state(cfg.path, 0.0))
    x[1] += rng.uniform(-cfg.init_offset, cfg.init_offset)
    n = cfg.steps
    data = {c: np.empty(n) for c in _NUM}
    failed = False
    for k in range(n):
        t = k * cfg.dt
        e = np.array(scenario_env(sc, t))
        err = monitor.observe(k, x, e)
        u, ctrl, res = control_step(ctrl, ctrl_model, x, e, cfg.path, t, cfg.mppi)
        u = np.asarray(u, dtype=float)
        failed |= not res.ok
        ref = reference_state(cfg.path, t)
        row = (t, *x, *ref, *u, *e, float(lateral_deviation(cfg.path, x[0], x[1])), err, delta_max,
               res.min_cost, res.mean_cost, res.ess)
        for c, v in zip(_NUM, row):
            data[c][k] = v
        monitor.advance(u)
        x = np.array(step_bicycle(x, u, e, cfg.dt, cfg.params))
    return EpisodeLog(method, scenario, seed, checkpoint, failed, data)


def run_episodes(m, scenario, cfg, seeds, delta_max, method="SFKD", checkpoint="") -> list[EpisodeLog]:
    return [run_episode(m, scenario, cfg, s, delta_max, method, checkpoint) for s in seeds]


# --------------------------------------------------------------------------- metrics


@dataclass
class MetricsRow:
    method: str
    scenario: str
    rmse_mean: float
    rmse_std: float
    smooth_mean: float
    smooth_std: float
    viol_rate: float
    viol_std: float
    episodes: int
    failures: int

    COLUMNS = ("method", "scenario", "rmse_mean", "rmse_std", "smooth_mean", "smooth_std",
               "viol_rate", "viol_std", "episodes", "failures")

    def as_row(self) -> list:
        return [getattr(self, c) if isinstance(getattr(self, c), (str, int)) else f"{getattr(self, c):.17g}"
                for c in self.COLUMNS]


def compute_metrics(logs: list[EpisodeLog]) -> MetricsRow:
    """Table-style summary; failed episodes are counted but excluded."""
    if not logs:
        raise ValueError("no episode logs")
    if len({(l.method, l.scenario) for l in logs}) != 1:
        raise ValueError("logs mix methods or scenarios")
    ok = [l for l in logs if not l.failed]
    if not ok:
        return MetricsRow(logs[0].method, logs[0].scenario, *([float("nan")] * 6), 0, len(logs))
    rmse = np.array([np.sqrt(np.mean(l["lat_dev"] ** 2)) for l in ok])
    dt = np.array([l["t"][1] - l["t"][0] for l in ok])
    rates = [np.abs(np.diff(l["delta"])) / h for l, h in zip(ok, dt)]
    smooth_ep = np.array([r.mean() for r in rates])
    exceed = [l["err_norm"] > l["threshold"] for l in ok]
    viol_ep = np.array([e.mean() for e in exceed])
    return MetricsRow(
        ok[0].method, ok[0].scenario,
        float(rmse.mean()), float(rmse.std()),
        float(np.concatenate(rates).mean()), float(smooth_ep.std()),
        float(np.concatenate(exceed).mean()), float(viol_ep.std()),
        len(ok), len(logs) - len(ok),
    )


def write_metrics_csv(rows: list[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRow.COLUMNS)
        for r in rows:
            w.writerow(r.as_row())


def metrics_by_cell(logs: list[EpisodeLog]) -> list[MetricsRow]:
    cells: dict[tuple[str, str], list[EpisodeLog]] = {}
    for l in logs:
        cells.setdefault((l.method, l.scenario), []).append(l)
    return [compute_metrics(v) for _, v in sorted(cells.items())]


# --------------------------------------------------------------------------- recovery


@dataclass
class RecoveryEvent:
    t_switch: float
    pre_level: float
    steps_to_recover: int | None  # None when not back below 2x within the window


def recovery_events(log: EpisodeLog, window: int = 5, pre_steps: int = 10, factor: float = 2.0) -> list[RecoveryEvent]:
    """For each switch: the mean deviation over ``pre_steps`` before it and the
    first step ``j in 1..window`` after it at which deviation is below
    ``factor`` times that level."""
    sc = make_scenario(log.scenario, duration=float(log["t"][-1]) + (log["t"][1] - log["t"][0]))
    dt = log["t"][1] - log["t"][0]
    lat = log["lat_dev"]
    out = []
    for ts in switch_times(sc):
        k = int(round(ts / dt))
        if k < pre_steps or k + window >= len(lat):
            continue
        pre = float(lat[k - pre_steps:k].mean())
        hit = next((j for j in range(1, window + 1) if lat[k + j] < factor * pre), None)
        out.append(RecoveryEvent(float(ts), pre, hit))
    return out


# --------------------------------------------------------------------------- open-loop rollouts


def random_rollout_inputs(n: int, steps: int, seed: int, mix=("box",), v0_range=(2.0, 8.0)):
    """Plant trajectories under filtered random controls: ``(X (n, steps+1, 4), U, E)``."""
    d = generate_dataset(DatasetConfig(n_segments=n, length=steps, mix=tuple(mix), v0_range=v0_range), seed)
    X = np.concatenate([d.x, d.x_next[:, -1:]], axis=1)
    return X, d.u, d.e


def model_rollout(m: SfkdModel, z0: np.ndarray, U: np.ndarray, E: np.ndarray, disturbance=None) -> np.ndarray:
    """Latent trajectories ``(n, steps+1, r)``; ``disturbance`` ``(n, r)`` is added every step."""
    n, steps = U.shape[:2]
    levels, idx = np.unique(E.reshape(-1, E.shape[-1]), axis=0, return_inverse=True)
    idx = idx.reshape(n, steps)
    psi = m.embed(levels)
    ops = [m.operators(p) for p in psi]
    A = np.stack([o[0] for o in ops])
    B = np.stack([o[1] for o in ops])
    Z = np.empty((n, steps + 1, m.r))
    Z[:, 0] = z0
    for k in range(steps):
        z, u, j = Z[:, k], U[:, k], idx[:, k]
        nxt = np.einsum("nij,nj->ni", A[j], z) + np.einsum("nij,nj->ni", B[j], u) + m.residual_batch(z, u, psi[j])
        if disturbance is not None:
            nxt += disturbance
        Z[:, k + 1] = nxt
    return Z


@dataclass
class SweepRow:
    dbar: float
    violation_rate: float
    iss_bound: float


def sweep_dbar(
    m: SfkdModel,
    cert: IssCertificate,
    dbars,
    n_rollouts: int = 50,
    steps: int = 100,
    seed: int = 0,
    scenario_mix=("S3",),
) -> list[SweepRow]:
    """Violation rate of injected-disturbance rollouts against ``c2 dbar / (1 - alpha)``.

    Each rollout gets a fixed random unit direction; the perturbed latent
    trajectory receives ``dbar`` times that direction every step and is
    compared with the undisturbed one under identical inputs.
    """
    X, U, E = random_rollout_inputs(n_rollouts, steps, seed, scenario_mix)
    z0 = m.encode_batch(X[:, 0], E[:, 0])
    nominal = model_rollout(m, z0, U, E)
    rng = np.random.default_rng(seed + 1)
    dirs = rng.standard_normal((n_rollouts, m.r))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    out = []
    for db in dbars:
        c = replace(cert, dbar=float(db))
        bound = c.c2 * db / (1.0 - c.alpha)
        if db == 0:
            out.append(SweepRow(0.0, 0.0, 0.0))
            continue
        pert = model_rollout(m, z0, U, E, db * dirs)
        err = np.linalg.norm(pert[:, 1:] - nominal[:, 1:], axis=2)
        out.append(SweepRow(float(db), violation_rate(err, bound), float(bound)))
    return out


def write_sweep_csv(rows_by_method: dict[str, list[SweepRow]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "dbar", "violation_rate", "iss_bound"])
        for method, rows in rows_by_method.items():
            for r in rows:
                w.writerow([method, f"{r.dbar:.17g}", f"{r.violation_rate:.17g}", f"{r.iss_bound:.17g}"])


@dataclass
class SoundnessResult:
    err: np.ndarray  # (n, steps+1) ||e_k^z||
    d_norm: np.ndarray  # (n, steps) realised ||d_k||
    bound: np.ndarray  # (n, steps+1) trajectory bound
    conforming: np.ndarray  # (n, steps+1) all d_j <= dbar for j < k
    step_conforming: np.ndarray  # (n, steps+1) d_{k-1} <= dbar (per-step reading)

    @property
    def violations(self) -> int:
        return int(np.count_nonzero((self.err > self.bound) & self.conforming))

    @property
    def step_violations(self) -> int:
        return int(np.count_nonzero((self.err > self.bound) & self.step_conforming))


def soundness_rollouts(m: SfkdModel, cert: IssCertificate, n: int = 100, steps: int = 200, seed: int = 0,
                       v0_range=(1.0, 3.0)) -> SoundnessResult:
    """Open-loop model-vs-plant check of the ISS trajectory bound.

    Each rollout holds one environment drawn from the admissible box.
    ``e_k^z = encode(x_k, e) - z_hat_k`` with ``z_hat_0 = encode(x_0, e)``
    and ``d_k = encode(x_{k+1}, e) - F(encode(x_k, e), u_k)``.
    """
    X, U, E = random_rollout_inputs(n, steps, seed, ("box",), v0_range)
    Ztrue = np.stack([m.encode_batch(X[:, k], E[:, min(k, steps - 1)]) for k in range(steps + 1)], axis=1)
    Zhat = model_rollout(m, Ztrue[:, 0], U, E)
    err = np.linalg.norm(Ztrue - Zhat, axis=2)
    flat = lambda a: a.reshape(n * steps, 1, *a.shape[2:])
    one = model_rollout(m, Ztrue[:, :-1].reshape(n * steps, -1), flat(U), flat(E))[:, 1].reshape(n, steps, -1)
    d_norm = np.linalg.norm(Ztrue[:, 1:] - one, axis=2)
    ok = d_norm <= cert.dbar
    conforming = np.ones((n, steps + 1), dtype=bool)
    conforming[:, 1:] = np.cumprod(ok, axis=1).astype(bool)
    step_conf = np.ones((n, steps + 1), dtype=bool)
    step_conf[:, 1:] = ok
    bound = np.stack([iss_trajectory_bound(cert, e0, np.arange(steps + 1)) for e0 in err[:, 0]])
    return SoundnessResult(err, d_norm, bound, conforming, step_conf)


# --------------------------------------------------------------------------- trace


def write_trace_csv(logs: dict[str, EpisodeLog], path: str | Path) -> None:
    """Lateral deviation against time for one episode per method."""
    methods = list(logs)
    first = logs[methods[0]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mu", "w"] + methods)
        for i in range(len(first)):
            w.writerow([f"{first['t'][i]:.17g}", f"{first['mu'][i]:.17g}", f"{first['w'][i]:.17g}"]
                       + [f"{logs[mm]['lat_dev'][i]:.17g}" for mm in methods])
