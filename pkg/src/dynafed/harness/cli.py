"""Command-line entry point.

Exit codes: 0 success, 1 validation/config/parse error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import DynafedError, ValidationError
from ..federation import dirichlet_partition, iid_partition
from ..numerics.rng import Rng
from ..orchestration import CSV_HEADER, run_dynafed, run_fedavg, run_fedprox
from ..synthesis import Trajectory, datasyn, noise_candidate, trajectory_fidelity
from .. import theory
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .data import blobs_task, load_idx
from .selftest import max_error, run_selftest

log = logging.getLogger("dynafed")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_task(cfg: ExperimentConfig):
    """(train, test) for the configured task."""
    t = cfg.task
    if t.kind == "blobs":
        b = t.blobs
        return blobs_task(b.spec(), cfg.seed, b.test_per_class)
    idx = t.idx
    if not (idx.train_images and idx.train_labels and idx.test_images and idx.test_labels):
        raise ValidationError("task.kind 'idx' needs all four task.idx paths")
    train = load_idx(idx.train_images, idx.train_labels)
    test = load_idx(idx.test_images, idx.test_labels, K=train.K)
    return train, test


def make_partition(cfg: ExperimentConfig, train):
    rng = Rng(cfg.seed).split("partition")
    if cfg.partition.kind == "iid":
        return iid_partition(train.n, cfg.run.clients, rng)
    return dirichlet_partition(train.labels, cfg.run.clients, cfg.partition.alpha, rng, K=train.K)


def write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for m in metrics:
            w.writerow([m.round, m.phase, repr(m.test_loss), repr(m.test_acc), repr(m.pre_ft_acc),
                        repr(m.post_ft_acc), f"{m.wall_ms:.3f}"])


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _outdir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_partition(cfg, args):
    train, _ = load_task(cfg)
    part = make_partition(cfg, train)
    stats = part.stats(train.labels, train.K)
    stats.update(seed=cfg.seed, alpha=cfg.partition.alpha, kind=cfg.partition.kind)
    text = json.dumps(stats, indent=2, sort_keys=True)
    if args.out or args.write:
        write_json(_outdir(cfg, args) / "partition.json", stats)
    print(text)
    return 0


def cmd_train(cfg, args):
    train, test = load_task(cfg)
    part = make_partition(cfg, train)
    rc = cfg.run_config()
    out = _outdir(cfg, args)
    (out / "config.yaml").write_text(dump_config(cfg))
    if args.algo == "fedavg":
        res = run_fedavg(rc, train, part, test)
    elif args.algo == "fedprox":
        res = run_fedprox(rc, train, part, test, cfg.run.mu_prox)
    else:
        res = run_dynafed(rc, train, part, test)
    write_metrics(out / "metrics.csv", res.metrics)
    save_checkpoint(res.final, out / "final.dyna")
    save_checkpoint(res.trajectory, out / "trajectory.dyna")
    summary = {"algo": args.algo, "seed": cfg.seed, "final_acc": res.metrics[-1].test_acc}
    if res.synth is not None:
        save_checkpoint(res.dsyn, out / "dsyn.dyna")
        res.synth.write_log(out / "synth_log.csv")
        summary["synth_skipped"] = res.synth.skipped
    write_json(out / "summary.json", summary)
    print(f"{args.algo} seed {cfg.seed}: final accuracy {summary['final_acc']:.4f} -> {out}")
    return 0


def _trajectory(path) -> Trajectory:
    traj = load_checkpoint(path)
    if not isinstance(traj, Trajectory):
        raise ValidationError(f"{path} does not hold a trajectory")
    return traj


def cmd_synth(cfg, args):
    traj = _trajectory(args.trajectory)
    if args.prefix is not None:
        traj = Trajectory(traj.checkpoints[: args.prefix], traj.rounds[: args.prefix])
    out = _outdir(cfg, args)
    res = datasyn(traj, cfg.synth, Rng(cfg.seed).split("synth"))
    save_checkpoint(res.dataset, out / "dsyn.dyna")
    res.write_log(out / "synth_log.csv")
    l = res.losses
    k = max(1, len(l) // 10)
    summary = {"algo": "datasyn", "seed": cfg.seed, "final_acc": None, "skipped": res.skipped,
               "loss_first": float(l[:k].mean()), "loss_last": float(l[-k:].mean())}
    write_json(out / "summary.json", summary)
    print(f"datasyn: mean loss {summary['loss_first']:.4g} (first {k}) -> {summary['loss_last']:.4g} (last {k})")
    return 0


def cmd_fidelity(cfg, args):
    traj = _trajectory(args.trajectory)
    dsyn = load_checkpoint(args.dsyn)
    if not hasattr(dsyn, "Ylogits"):
        raise ValidationError(f"{args.dsyn} does not hold a synthetic dataset")
    cands = {"dsyn": dsyn, "noise": noise_candidate(dsyn.n, dsyn.d, dsyn.K, Rng(cfg.seed).split("noise"))}
    rows = trajectory_fidelity(traj, cfg.synth, cands)
    out = _outdir(cfg, args)
    with open(out / "fidelity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "mean", "per_segment"])
        for r in rows:
            w.writerow([r.name, repr(r.mean), " ".join(repr(v) for v in r.per_segment)])
    for r in rows:
        print(f"{r.name:>8s}  mean {r.mean:.6g}  over {len(r.per_segment)} segments")
    if len(rows) == 2 and rows[0].per_segment:
        frac = float(np.mean(np.array(rows[0].per_segment) < np.array(rows[1].per_segment)))
        print(f"dsyn closer than noise on {100 * frac:.1f}% of segments")
    return 0


def cmd_theory(cfg, args):
    th = cfg.theory
    root = Rng(cfg.seed).split("theory")
    task = theory.make_quadratic_task(root.split("task"), d=th.d, cond=th.cond, M=th.clients,
                                      samples=th.samples, noise=th.noise, hetero=th.hetero)
    sur = theory.biased_surrogate(task, th.delta, th.epsilon, root.split("surrogate"))
    probes = theory.convex_probes(task, root.split("probes"), n=th.probes)
    est = theory.estimate_assumptions(task, sur, probes)
    sched = theory.ScheduleConfig(th.c, th.gamma, th.tau1, th.tau2)
    seeds = [cfg.seed * 1000 + i for i in range(th.seeds)]
    res = theory.run_convex_convergence(task, sched, sur, th.T, seeds, delta=est.delta)
    slope = theory.fit_loglog_slope(res.mean, th.window)
    out = _outdir(cfg, args)
    res.write_csv(out / "theory_series.csv")
    summ = theory.summary(res, est, slope, algo="theory", seed=cfg.seed, final_acc=None,
                          mu=task.mu, L_smooth=task.L_smooth)
    write_json(out / "summary.json", summ)
    print(f"tail log-log slope {slope:.4f}; delta {est.delta:.4g}, epsilon {est.epsilon:.4g}, "
          f"delta*L/mu {est.delta * task.L_smooth / task.mu:.4g}")
    return 0


def cmd_selftest(cfg, args):
    rows = run_selftest(cfg.seed)
    for metric, sp, ex, ey in rows:
        print(f"{metric:>14s}  s'={sp}  dX {ex:.3e}  dY {ey:.3e}")
    worst = max_error(rows)
    print(f"max relative meta-gradient error {worst:.3e}")
    if not worst < 1e-4:
        print("selftest FAILED: meta-gradient disagrees with finite differences", file=sys.stderr)
        return 2
    return 0


COMMANDS = {
    "partition": cmd_partition,
    "train": cmd_train,
    "synth": cmd_synth,
    "fidelity": cmd_fidelity,
    "theory": cmd_theory,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dynafed", description="Federated learning with trajectory-matched synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sp = sub.add_parser("partition", parents=[common], help="emit partition statistics as JSON")
    sp.add_argument("--write", action="store_true", help="also write partition.json to the output dir")
    sp = sub.add_parser("train", parents=[common], help="run a full federated training")
    sp.add_argument("--algo", choices=("fedavg", "fedprox", "dynafed"), required=True)
    sp = sub.add_parser("synth", parents=[common], help="learn a synthetic dataset from a saved trajectory")
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--prefix", type=int, help="use only the first PREFIX checkpoints")
    sp = sub.add_parser("fidelity", parents=[common], help="per-segment matching distance table")
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--dsyn", required=True)
    sub.add_parser("theory", parents=[common], help="convex convergence rate and assumption constants")
    sub.add_parser("selftest", parents=[common], help="meta-gradient finite-difference suite")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DynafedError, ArithmeticError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
