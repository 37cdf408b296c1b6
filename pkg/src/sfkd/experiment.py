"""Experiment settings and the train / certify / evaluate pipeline steps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import harness as H
from .config import apply_overrides, read_kv
from .dataset import LARGE_SCALE, Dataset, DatasetConfig
from .model import SfkdModel, load_checkpoint, save_checkpoint
from .stability import IssCertificate, ResidualBoundEstimate, certify, estimate_dbar
from .trainer import TrainConfig, TrainLog, env_grid, train

DEFAULT_SWEEP = tuple(round(0.1 * i, 10) for i in range(1, 11))


@dataclass(frozen=True)
class ExperimentConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: H.EvalConfig = field(default_factory=H.EvalConfig)
    holdout: float = 0.1  # fraction of segments kept out of training for the dbar estimate
    dbar_quantile: float = 0.995
    episodes: int = 20
    sweep_dbar: tuple[float, ...] = DEFAULT_SWEEP
    sweep_rollouts: int = 50
    sweep_steps: int = 100
    soundness_rollouts: int = 100
    soundness_steps: int = 200

    def large_scale(self) -> "ExperimentConfig":
        return replace(self, data=LARGE_SCALE, eval=replace(self.eval, mppi=H.LARGE_EVAL.mppi), episodes=200)


def load_config(path: str | Path | None, large_scale: bool = False) -> ExperimentConfig:
    """Defaults, then ``--paper-scale``, then the ``key = value`` file on top."""
    cfg = ExperimentConfig()
    if large_scale:
        cfg = cfg.large_scale()
    if path is not None:
        cfg = apply_overrides(cfg, read_kv(path), strict=True)
    return cfg


# --------------------------------------------------------------------------- training


def train_checkpoint(
    d: Dataset, cfg: ExperimentConfig, ablation: str, seed: int, path: str | Path | None = None
) -> tuple[SfkdModel, TrainLog, ResidualBoundEstimate]:
    """Train on all but a held-out split, estimate dbar on the split, optionally save."""
    fit, held = d.split(cfg.holdout, seed)
    tcfg = replace(cfg.train, ablation=ablation, seed=seed)
    m, _, log = train(fit, tcfg)
    est = estimate_dbar(m, held, cfg.dbar_quantile)
    if path is not None:
        save_checkpoint(m, path, checkpoint_extra(tcfg, est))
    return m, log, est


def checkpoint_extra(tcfg: TrainConfig, est: ResidualBoundEstimate) -> dict:
    return {
        "ablation": tcfg.ablation,
        "seed": tcfg.seed,
        "dbar": est.dbar,
        "dbar_quantile": est.quantile,
        "dbar_samples": est.sample_count,
        "rho0": est.rho0,
        "eta_max": est.eta_max,
    }


@dataclass
class Certified:
    model: SfkdModel
    cert: IssCertificate
    extra: dict
    name: str

    @property
    def method(self) -> str:
        return H.METHOD_TAGS[self.extra.get("ablation", "full")]


def load_certified(path: str | Path, dbar: float | None = None, grid: int = 9) -> Certified:
    m, extra = load_checkpoint(path)
    if dbar is None:
        if "dbar" not in extra:
            raise ValueError(f"{path} carries no dbar estimate; pass one explicitly")
        dbar = float(extra["dbar"])
    return Certified(m, certify(m, dbar, env_grid(grid)), extra, Path(path).name)


# --------------------------------------------------------------------------- evaluation


def episode_seeds(seed: int, count: int) -> list[int]:
    return [seed + i for i in range(count)]


def evaluate(c: Certified, scenario: str, cfg: ExperimentConfig, seed: int) -> list[H.EpisodeLog]:
    return H.run_episodes(
        c.model, scenario, cfg.eval, episode_seeds(seed, cfg.episodes), c.cert.ultimate, c.method, c.name
    )


def sweep(c: Certified, cfg: ExperimentConfig, seed: int) -> list[H.SweepRow]:
    return H.sweep_dbar(c.model, c.cert, cfg.sweep_dbar, cfg.sweep_rollouts, cfg.sweep_steps, seed)


def write_operators_csv(m: SfkdModel, grid: np.ndarray, path: str | Path) -> None:
    """Every entry of A(e) and B(e) at each grid environment."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mu", "w", "matrix", "i", "j", "value"])
        for e in grid:
            A, B = m.operators(m.embed(e).reshape(-1))
            for name, M in (("A", A), ("B", B)):
                for (i, j), v in np.ndenumerate(M):
                    w.writerow([f"{e[0]:.17g}", f"{e[1]:.17g}", name, i, j, f"{v:.17g}"])
