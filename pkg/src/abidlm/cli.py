"""Command-line entry point: ``abidlm <command> [options]``.

Every command writes into ``--out-dir`` and finishes by atomically writing
``run_manifest.json`` listing the files it produced.  Failures exit nonzero
with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dlm import (DlmSpec, dlm_prior_draw, ffbs, forward_filter, read_observations, smoothing_marginal,
                  student_t_intervals, write_observations, y_from_dlm_batch)
from .evaluate import (coverage_report, interval_rows, read_intervals, read_truth, write_intervals, write_report,
                       write_truth)
from .flow import FlowError, load_checkpoint, save_checkpoint
from .rng import Rng
from .trainer import BlockPlan, TrainConfig, TrainingError, sample_blocked, train_blocked, write_trace

MANIFEST = "run_manifest.json"


class CliError(Exception):
    pass


class Run:
    """Output bookkeeping for one command invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.inputs: list[str] = []
        self.extra: dict = {}
        self.t0 = time.monotonic()

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if str(p) not in self.outputs:
            self.outputs.append(str(p))
        return p

    def uses(self, *paths) -> None:
        self.inputs += [str(p) for p in paths if p]

    def finish(self) -> None:
        manifest = {
            "command": self.args.command,
            "config": self.args.config,
            "seed": self.args.seed,
            "threads": self.args.threads,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "tool_version": __version__,
            "duration_s": round(time.monotonic() - self.t0, 3),
            **self.extra,
        }
        path = self.out / MANIFEST
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=1) + "\n")
        os.replace(tmp, path)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise CliError(f"{path}: invalid JSON ({err})") from None


def cmd_simulate(args, run: Run) -> None:
    rng = Rng(args.seed)
    design_rng, prior_rng, y_rng = rng.spawn(3)
    T, p = args.T, args.p
    n = args.n if isinstance(args.n, list) else [args.n] * T
    if len(n) != T or T < 1 or p < 1 or min(n) < 0:
        raise CliError(f"invalid dimensions T={T}, p={p}, n={n}")
    X = []
    for nt in n:
        x = design_rng.normal((nt, p))
        if args.intercept and p > 1:
            x[:, 0] = 1.0
        X.append(x)
    spec = DlmSpec.standard(X, a0=args.a0, b0=args.b0, m0=np.zeros(p))
    beta, sigma2 = dlm_prior_draw(spec, prior_rng)
    y = [yt[0] for yt in y_from_dlm_batch(beta[None], np.array([sigma2]), spec.X, spec.V, y_rng)]
    spec.save(run.path("spec.json"))
    write_truth(run.path("truth.csv"), beta, sigma2)
    write_observations(run.path("observations.csv"), y)


def _spec_and_data(args, run: Run):
    spec = DlmSpec.load(args.spec)
    y = read_observations(args.data, spec)
    run.uses(args.spec, args.data)
    return spec, y


def cmd_ffbs(args, run: Run) -> None:
    spec, y = _spec_and_data(args, run)
    fs = forward_filter(spec, y)
    sm = smoothing_marginal(fs, spec)
    f_lo, f_hi = student_t_intervals(fs.m, fs.M, fs.a, fs.b, args.level)
    s_lo, s_hi = sm.intervals(args.level)
    rows = interval_rows(f_lo, fs.m, f_hi, "FF") + interval_rows(s_lo, sm.s, s_hi, "FFBS")
    write_intervals(run.path("intervals.csv"), rows)
    draws = ffbs(spec, y, Rng(args.seed), args.L)
    draws.save(run.path("draws.npz"))
    run.extra["L"] = args.L


def _plan_from_args(args, spec: DlmSpec) -> BlockPlan:
    if isinstance(args.plan, dict):
        return BlockPlan.from_dict(args.plan)
    if args.plan:
        return BlockPlan.from_dict(_load_json(args.plan))
    if args.block_sizes:
        return BlockPlan.from_sizes([int(s) for s in args.block_sizes.split(",")])
    return BlockPlan.single(spec.T)


def _train_config(args) -> TrainConfig:
    base = dict(args.train or {})
    for key in ("n_iter", "batch_size", "alpha", "hidden"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    base["seed"] = args.seed
    return TrainConfig.from_dict(base)


def cmd_train(args, run: Run) -> None:
    spec = DlmSpec.load(args.spec)
    run.uses(args.spec, args.plan if isinstance(args.plan, str) else None)
    plan = _plan_from_args(args, spec)
    cfg = _train_config(args)
    ckpt_dir = run.out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    signature = {"train": cfg.to_dict(), "plan": plan.to_dict(), "prior": args.prior}

    def ckpt_name(b: int) -> str:
        return f"checkpoints/block_{b + 1:03d}.json"

    def existing(b: int):
        path = run.out / ckpt_name(b)
        if args.fresh or not path.exists():
            return None
        try:
            net = load_checkpoint(path)
        except (FlowError, ValueError, KeyError):
            return None
        return net if net.meta.get("signature") == signature else None

    def done(b: int, result) -> None:
        result.net.meta["signature"] = signature
        save_checkpoint(result.net, run.out / ckpt_name(b))
        write_trace(run.out / f"traces/block_{b + 1:03d}.csv", result.trace)
        partial = run.out / f"checkpoints/block_{b + 1:03d}.partial.json"
        if partial.exists():
            partial.unlink()

    def progress(b: int, j: int, value: float, net) -> None:
        if args.checkpoint_every and j % args.checkpoint_every == 0:
            snap = net.copy()
            snap.meta.update({"signature": signature, "iteration": j})
            save_checkpoint(snap, run.out / f"checkpoints/block_{b + 1:03d}.partial.json")

    (run.out / "traces").mkdir(exist_ok=True)
    resumed = [b for b in range(len(plan.blocks)) if existing(b) is not None]
    try:
        train_blocked(spec, plan, cfg, prior=args.prior, threads=args.threads, skip=existing, on_done=done,
                      on_progress=progress)
    except TrainingError as err:
        save_checkpoint(err.last_net, run.out / "checkpoints" / "failed_last_finite.json")
        raise
    for b in range(len(plan.blocks)):
        run.path(ckpt_name(b))
        if (run.out / f"traces/block_{b + 1:03d}.csv").exists():
            run.path(f"traces/block_{b + 1:03d}.csv")
    run.extra.update({"blocks": plan.to_dict(), "resumed_blocks": [b + 1 for b in resumed], "train": cfg.to_dict()})


def _checkpoint_paths(args) -> list[Path]:
    paths = []
    for item in args.checkpoints:
        p = Path(item)
        paths += sorted(p.glob("block_*[0-9].json")) if p.is_dir() else [p]
    if not paths:
        raise CliError("no checkpoints found")
    return paths


def cmd_sample(args, run: Run) -> None:
    spec, y = _spec_and_data(args, run)
    paths = _checkpoint_paths(args)
    run.uses(*paths)
    nets = [load_checkpoint(p) for p in paths]
    nets.sort(key=lambda n: n.meta.get("block", [0])[0])
    covered = [e for n in nets for e in range(n.meta["block"][0], n.meta["block"][1] + 1)]
    if covered != list(range(1, spec.T + 1)):
        raise CliError(f"checkpoints cover epochs {covered[:3]}..., spec has T={spec.T}")
    draws = sample_blocked(nets, spec, y, args.L, Rng(args.seed))
    q = ((1 - args.level) / 2, (1 + args.level) / 2)
    lo, hi = np.quantile(draws.beta, q, axis=0)
    write_intervals(run.path("intervals.csv"), interval_rows(lo, draws.beta.mean(axis=0), hi, "ABI"))
    draws.save(run.path("draws.npz"))
    run.extra["L"] = args.L


def cmd_timesheet(args, run: Run) -> None:
    from .timesheet import preprocess_trajectories, build_timesheet, scale_covariates, write_bundle
    from .timesheet.pipeline import observed_spec
    from .timesheet.preprocess import PreprocessRules, read_records, write_records, write_trajectories
    from .timesheet.synthetic import SyntheticConfig, imputed_fraction, synthetic_records

    if args.records:
        records = read_records(args.records)
        run.uses(args.records)
    else:
        records = synthetic_records(Rng(args.seed), SyntheticConfig(n_subjects=args.subjects))
        write_records(run.path("records.csv"), records)
    trajs = preprocess_trajectories(records, PreprocessRules())
    write_trajectories(run.path("trajectories.csv"), trajs)
    ts = build_timesheet(trajs, utc_offset_hours=args.utc_offset)
    ts, _ = scale_covariates(ts)
    for p in write_bundle(ts, run.out / "bundle"):
        run.path(str(p.relative_to(run.out)))
    spec, y = observed_spec(ts, args.a0, args.b0)
    spec.save(run.path("spec.json"))
    write_observations(run.path("observations.csv"), y)
    run.extra.update({"rows": ts.n_rows, "imputed_fraction": imputed_fraction(ts)})


def cmd_impute(args, run: Run) -> None:
    import csv
    from .dlm import DrawSet
    from .timesheet import impute_covariates, impute_outcomes, read_bundle
    from .timesheet.pipeline import imputation_coverage, imputed_designs

    ts = read_bundle(args.bundle)
    run.uses(args.bundle, args.draws)
    imp = impute_covariates(ts, r_s=args.r_s)
    X_u = imputed_designs(ts, imp)
    with open(run.path("imputed_covariates.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "date", "start", "t", "lat", "lon", "radius_m"] + ts.columns)
        for t in range(ts.T):
            for i, r in enumerate(imp.rows[t]):
                w.writerow(list(ts.keys[r]) + [t + 1] + [repr(float(v)) for v in imp.coords[t][i]]
                           + [repr(float(imp.radius[t][i]))] + [repr(float(v)) for v in imp.X[t][i]])
    report = {"r_s": args.r_s, "cells": imp.n_cells, "dropped": [list(c) for c in imp.dropped]}
    if args.draws:
        draws = DrawSet.load(args.draws)
        if draws.beta.shape[1:] != (ts.T, len(ts.columns) + 1):
            raise CliError(f"draws have shape {draws.beta.shape[1:]}, timesheet needs ({ts.T}, {len(ts.columns) + 1})")
        out = impute_outcomes(draws, X_u, None, Rng(args.seed), args.level)
        with open(run.path("imputed_outcomes.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "date", "start", "t", "lower", "mean", "upper"])
            for t in range(ts.T):
                for i, r in enumerate(imp.rows[t]):
                    w.writerow(list(ts.keys[r]) + [t + 1, repr(float(out.lower[t][i])), repr(float(out.mean[t][i])),
                                                   repr(float(out.upper[t][i]))])
    if args.coverage_check:
        res = imputation_coverage(ts, Rng(args.seed).spawn(2)[1], L=args.L, r_s=args.r_s, level=args.level)
        report.update({"coverage": res.coverage, "coverage_cells": res.n_cells,
                       "imputed_fraction": res.imputed_fraction})
    run.path("imputation_report.json").write_text(json.dumps(report, indent=1) + "\n")
    run.extra["r_s"] = args.r_s


def cmd_evaluate(args, run: Run) -> None:
    rows = []
    for path in args.intervals:
        rows += read_intervals(path)
    run.uses(*args.intervals, args.truth)
    try:
        report = coverage_report(rows, read_truth(args.truth))
    except KeyError as err:
        raise CliError(str(err.args[0])) from None
    write_report(report, run.path("report.json"), run.path("report.csv"))


COMMANDS = {
    "simulate": cmd_simulate,
    "ffbs": cmd_ffbs,
    "train": cmd_train,
    "sample": cmd_sample,
    "timesheet": cmd_timesheet,
    "impute": cmd_impute,
    "evaluate": cmd_evaluate,
}


def _int_list(text: str):
    vals = [int(v) for v in str(text).split(",")]
    return vals[0] if len(vals) == 1 else vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys provide option defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--threads", type=int, default=1)

    parser = argparse.ArgumentParser(prog="abidlm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw a synthetic DLM dataset")
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--p", type=int, default=4)
    p.add_argument("--n", type=_int_list, default=10, help="rows per epoch, or a comma list per epoch")
    p.add_argument("--a0", type=float, default=3.0)
    p.add_argument("--b0", type=float, default=1.0)
    p.add_argument("--intercept", action="store_true", help="make the first design column constant 1")

    p = sub.add_parser("ffbs", parents=[common], help="exact filtering/smoothing intervals and joint draws")
    p.add_argument("--spec", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--L", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("train", parents=[common], help="train one flow per epoch block")
    p.add_argument("--spec", required=True)
    p.add_argument("--plan", help="JSON with 'blocks' [[start, end], ...] or 'sizes', optional 'depths'")
    p.add_argument("--block-sizes", help="comma list of block lengths")
    p.add_argument("--n-iter", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--prior", choices=["inflate", "bridge"], default="inflate")
    p.add_argument("--fresh", action="store_true", help="ignore existing block checkpoints")
    p.add_argument("--checkpoint-every", type=int, default=0, help="write a partial checkpoint every k iterations")
    p.set_defaults(train=None)

    p = sub.add_parser("sample", parents=[common], help="amortized posterior draws from trained blocks")
    p.add_argument("--spec", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files or directories")
    p.add_argument("--L", type=int, default=10_000)
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("timesheet", parents=[common], help="records CSV to timesheet bundle and DLM spec")
    p.add_argument("--records", help="record CSV; a synthetic study is generated when omitted")
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--utc-offset", type=float, default=0.0, help="hours added to UTC for the time-of-day column")
    p.add_argument("--a0", type=float, default=3.0)
    p.add_argument("--b0", type=float, default=1.0)

    p = sub.add_parser("impute", parents=[common], help="impute covariates and outcomes of unobserved cells")
    p.add_argument("--bundle", required=True)
    p.add_argument("--draws", help="posterior draws (npz) over the bundle's design")
    p.add_argument("--r-s", type=float, default=200.0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--L", type=int, default=2000)
    p.add_argument("--coverage-check", action="store_true", help="run the synthetic-truth coverage check")

    p = sub.add_parser("evaluate", parents=[common], help="coverage report of interval tables against truth")
    p.add_argument("--intervals", nargs="+", required=True)
    p.add_argument("--truth", required=True)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _load_json(args.config)
        section = cfg.get(args.command, cfg)
        explicit = {a.split("=")[0].lstrip("-").replace("-", "_") for a in (argv or sys.argv[1:]) if a.startswith("--")}
        for key, val in section.items():
            key = key.replace("-", "_")
            if key == "train" or key not in explicit:
                setattr(args, key, val)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        run = Run(args)
        COMMANDS[args.command](args, run)
        run.finish()
        return 0
    except SystemExit:
        raise
    except Exception as err:  # reported as machine-readable JSON
        payload = {"error": type(err).__name__, "message": str(err)}
        for attr in ("epoch", "index", "iteration"):
            if getattr(err, attr, None) is not None:
                payload[attr] = getattr(err, attr)
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
