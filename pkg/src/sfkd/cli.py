"""Command-line entry point: ``sfkd <verb> [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness as H
from .config import flatten, write_kv
from .dataset import generate_dataset, read_dataset_csv, write_dataset_csv
from .experiment import (
    evaluate,
    load_certified,
    load_config,
    sweep,
    train_checkpoint,
    write_operators_csv,
)
from .model import load_checkpoint
from .stability import certificate_text, write_certificate_csv, write_violation_csv
from .trainer import env_grid

ABLATION_FLAGS = {"full": "full", "no-fiber": "no_fiber", "no-contr": "no_contr"}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--config", type=Path, help="key = value overrides (dotted keys, e.g. train.epochs = 10)")
    p.add_argument("--paper-scale", action="store_true", help="larger dataset, M = 1500, 200 episodes")


def _dataset(args, cfg):
    if getattr(args, "data", None):
        return read_dataset_csv(args.data, cfg.data.dt)
    return generate_dataset(cfg.data, args.seed)


def cmd_generate(args, cfg) -> None:
    write_dataset_csv(generate_dataset(cfg.data, args.seed), args.out)


def cmd_train(args, cfg) -> None:
    d = _dataset(args, cfg)
    _, log, est = train_checkpoint(d, cfg, ABLATION_FLAGS[args.ablation], args.seed, args.out)
    log.write_csv(args.log or args.out.with_suffix(".csv"))
    r = log.records[-1]
    print(f"{args.out}: l_pred {r.l_pred:.4e}  max |A| {r.max_specnorm_A:.4f}  max |J| {r.max_jac_norm:.3f}  dbar {est.dbar:.4g}")


def cmd_certify(args, cfg) -> None:
    c = load_certified(args.checkpoint, args.dbar, args.grid)
    text = certificate_text(c.cert, extra={"checkpoint": c.name, "method": c.method})
    Path(f"{args.out}.txt").write_text(text)
    write_certificate_csv(c.cert, f"{args.out}.csv")
    if args.rollouts:
        res = H.soundness_rollouts(c.model, c.cert, args.rollouts, cfg.soundness_steps, args.seed)
        write_violation_csv(res.err[0], res.bound[0], f"{args.out}_violations.csv")
        print(f"open-loop check: {res.violations} violations on conforming steps "
              f"({res.conforming.mean():.3f} of steps conforming)")
    sys.stdout.write(text)


def cmd_evaluate(args, cfg) -> None:
    c = load_certified(args.checkpoint)
    logs = [log for s in args.scenario for log in evaluate(c, s, cfg, args.seed)]
    H.write_episodes_csv(logs, args.out)


def cmd_metrics(args, cfg) -> None:
    logs = [log for p in args.episodes for log in H.read_episodes_csv(p)]
    rows = H.metrics_by_cell(logs)
    H.write_metrics_csv(rows, args.out)


def cmd_sweep(args, cfg) -> None:
    out = {}
    for p in args.checkpoint:
        c = load_certified(p)
        out[c.method] = sweep(c, cfg, args.seed)
    H.write_sweep_csv(out, args.out)


def cmd_trace(args, cfg) -> None:
    logs = {}
    for p in args.checkpoint:
        c = load_certified(p)
        logs[c.method] = H.run_episode(c.model, args.scenario, cfg.eval, args.seed, c.cert.ultimate, c.method, c.name)
    H.write_trace_csv(logs, args.out)


def cmd_dump(args, cfg) -> None:
    m, _ = load_checkpoint(args.checkpoint)
    write_operators_csv(m, env_grid(args.grid), args.out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sfkd", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="simulate a training dataset")
    p.add_argument("--out", type=Path, default=Path("dataset.csv"))
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model and estimate dbar on a held-out split")
    p.add_argument("--data", type=Path, help="dataset CSV (generated from --seed when omitted)")
    p.add_argument("--ablation", choices=sorted(ABLATION_FLAGS), default="full")
    p.add_argument("--out", type=Path, default=Path("model.ckpt"))
    p.add_argument("--log", type=Path, help="per-epoch CSV (default: checkpoint path with .csv)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("certify", help="write the certificate text and grid CSV")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--dbar", type=float, help="override the stored dbar")
    p.add_argument("--grid", type=int, default=33, help="grid points per environment axis")
    p.add_argument("--rollouts", type=int, default=0, help="also run this many open-loop soundness rollouts")
    p.add_argument("--out", default="certificate")
    p.set_defaults(fn=cmd_certify)

    p = sub.add_parser("evaluate", help="closed-loop episodes to an episode CSV")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--scenario", nargs="+", choices=("S1", "S2", "S3"), default=["S1", "S2", "S3"])
    p.add_argument("--out", type=Path, default=Path("episodes.csv"))
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("metrics", help="summary table from episode CSVs")
    p.add_argument("episodes", type=Path, nargs="+")
    p.add_argument("--out", type=Path, default=Path("metrics.csv"))
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("sweep-dbar", help="violation rate against injected latent disturbance")
    p.add_argument("checkpoint", type=Path, nargs="+")
    p.add_argument("--out", type=Path, default=Path("sweep.csv"))
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("trace", help="lateral deviation against time, one episode per checkpoint")
    p.add_argument("checkpoint", type=Path, nargs="+")
    p.add_argument("--scenario", choices=("S1", "S2", "S3"), default="S3")
    p.add_argument("--out", type=Path, default=Path("trace.csv"))
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("dump-operators", help="A(e) and B(e) entries over an environment grid")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--grid", type=int, default=9)
    p.add_argument("--out", type=Path, default=Path("operators.csv"))
    p.set_defaults(fn=cmd_dump)

    for p in sub.choices.values():
        _common(p)
        p.add_argument("--dump-config", type=Path, help="write the resolved configuration here")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, large_scale=args.paper_scale)
    if args.dump_config:
        write_kv(flatten(cfg), args.dump_config)
    args.fn(args, cfg)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
