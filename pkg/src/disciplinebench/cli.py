"""Command-line entry point.

Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 config error. Failures
print one line to stderr: ``error=<Class> message=<text>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import diagnostics as dg
from . import harness as h
from . import policy_core as pc
from . import trainers as tr
from .market_sim import REGIMES, ConfigError, NetworkPolicy, read_traces, regime_width

TRAINABLE = ("prior",) + h.METHOD_STAGES


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="default",
                   help="YAML config path, or a preset name: default, ci (default: %(default)s)")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--seeds", help="seed list, e.g. 1..10 or 1,4,7")
    p.add_argument("--out", help="run directory (overrides the config)")
    p.add_argument("--stage", action="append", help="ladder stage; repeat or comma-separate")
    p.add_argument("--workers", type=int, help="parallel seeds")
    p.add_argument("--log-level", default="WARNING")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disciplinebench",
                                     description="Discipline-stability benchmark for pricing and bidding learners.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write Fixed RM self-play (or uniform-vs-RM) traces")
    _common(p)
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--policy-a", choices=("fixed_rm", "uniform"), default="fixed_rm")

    p = sub.add_parser("fit-prior", help="fit the trace prior; from --traces files or a fresh bootstrap")
    _common(p)
    p.add_argument("--traces", help="directory of seed<k>.jsonl.gz files")
    p.add_argument("--regime", choices=("NC", "CA"), default="CA")

    p = sub.add_parser("train", help="train one ladder stage (see --stage)")
    _common(p)

    p = sub.add_parser("ladder", help="run the full learner ladder and its reports")
    _common(p)

    p = sub.add_parser("variants", help="retrain teacher and student on each market variant")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a saved Hotel A checkpoint against Fixed RM")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--regime", choices=REGIMES, default="CA")
    p.add_argument("--episodes", type=int, default=2000)

    for name, what in (("diagnose-aliasing", "aliasing"), ("diagnose-oracle", "oracle")):
        p = sub.add_parser(name, help=f"{what} diagnostics on Fixed RM self-play traces")
        _common(p)
        p.add_argument("--traces", help="directory of seed<k>.jsonl.gz files (default: simulate fresh)")

    p = sub.add_parser("deploy-matrix", help="frozen NC/CA matchups (trains teacher and student as needed)")
    _common(p)

    p = sub.add_parser("bidding", help="bidding suite across variants")
    _common(p)

    p = sub.add_parser("report", help="rebuild every table from a manifest without re-simulating")
    p.add_argument("manifest", help="manifest.yaml or its run directory")
    p.add_argument("--log-level", default="WARNING")
    return parser


def _plan(args) -> h.ExperimentPlan:
    plan = h.load_plan(args.config)
    kw = {}
    if args.seed is not None and args.seeds:
        raise ConfigError("give --seed or --seeds, not both")
    if args.seed is not None:
        kw["seeds"] = (args.seed,)
    elif args.seeds:
        kw["seeds"] = h.parse_seeds(args.seeds)
    if args.out:
        kw["out_dir"] = args.out
    if args.workers:
        kw["workers"] = args.workers
    if args.stage:
        kw["stages"] = tuple(s.strip() for part in args.stage for s in part.split(",") if s.strip())
    return replace(plan, **kw).validate()


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _summary(manifest: h.RunManifest, root) -> None:
    _emit({"status": manifest.status, "run_dir": str(root), "config_fingerprint": manifest.config_fingerprint,
           "reports": sorted(manifest.reports), "checkpoints": len(manifest.checkpoints)})


def cmd_simulate(args, parser):
    plan = _plan(args)
    _summary(h.simulate(plan, args.episodes, args.policy_a), plan.out_dir)


def cmd_fit_prior(args, parser):
    plan = _plan(args)
    root = Path(plan.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cfg = plan.market_config
    for seed in plan.seeds:
        if args.traces:
            path = Path(args.traces) / f"seed{seed}.jsonl.gz"
            if not path.exists():
                raise ConfigError(f"no trace file for seed {seed}: {path}")
            traces = read_traces(path, cfg)
        else:
            traces, _ = tr.collect_prior_traces(cfg, plan.train, h.stage_seed(seed, "prior-data"))
        fit = tr.fit_prior(traces, cfg, plan.train, h.stage_seed(seed, "prior-fit"), regime=args.regime)
        out = pc.save_model(root / "checkpoints" / "prior" / f"seed{seed}.bin", fit.model)
        _emit({"seed": seed, "heldout_nll": fit.heldout_nll, "checkpoint": str(out)})


def cmd_ladder(args, parser):
    plan = _plan(args)
    _summary(h.run_ladder(plan), plan.out_dir)


def cmd_train(args, parser):
    if not args.stage:
        parser.error("train needs --stage (one of: " + ", ".join(TRAINABLE) + ")")
    plan = _plan(args)
    bad = [s for s in plan.stages if s not in TRAINABLE]
    if bad:
        raise ConfigError(f"not a trainable stage: {bad}")
    _summary(h.run_ladder(plan), plan.out_dir)


def cmd_variants(args, parser):
    plan = _plan(args)
    _summary(h.run_variants(plan), plan.out_dir)


def cmd_eval(args, parser):
    plan = _plan(args)
    params = pc.load_model(args.checkpoint)
    width = regime_width(args.regime, plan.market_config)
    if params.sizes[0] != width:
        raise ConfigError(f"checkpoint input width {params.sizes[0]} does not match regime "
                          f"{args.regime} ({width})")
    policy = NetworkPolicy(params, args.regime, greedy=False)
    rows = []
    for seed in plan.seeds:
        traces = tr.evaluate(policy, plan.market_config, args.episodes, h.stage_seed(seed, "eval"))
        a, b = dg.business_metrics(traces, 0), dg.business_metrics(traces, 1)
        ha, hb = dg.price_histogram(traces, 0), dg.price_histogram(traces, 1)
        rows.append({"seed": seed, "revpar_a": a.revpar, "revpar_b": b.revpar, "occ_a": a.occupancy,
                     "adr_a": a.adr, "l1": dg.l1_distance(ha, hb), "js": dg.js_divergence(ha, hb),
                     "delta_out": dg.delta_out(a, b)})
        _emit(rows[-1])
    root = Path(plan.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "eval.json").write_text(json.dumps(rows, sort_keys=True, indent=1))


def _diagnose(which):
    def run(args, parser):
        plan = _plan(args)
        _summary(h.run_diagnostics(plan, (which,), args.traces), plan.out_dir)
    return run


def cmd_deploy(args, parser):
    plan = replace(_plan(args), stages=("deployment",))
    _summary(h.run_ladder(plan), plan.out_dir)


def cmd_bidding(args, parser):
    plan = _plan(args)
    _summary(h.run_bidding_suite(plan), plan.out_dir)


def cmd_report(args, parser):
    path = Path(args.manifest)
    if not (path / "manifest.yaml").exists() and not path.is_file():
        raise ConfigError(f"no manifest at {path}")
    m = h.report(path)
    _summary(m, path if path.is_dir() else path.parent)


COMMANDS = {
    "simulate": cmd_simulate, "fit-prior": cmd_fit_prior, "train": cmd_train, "ladder": cmd_ladder,
    "variants": cmd_variants, "eval": cmd_eval, "diagnose-aliasing": _diagnose("aliasing"),
    "diagnose-oracle": _diagnose("oracle"), "deploy-matrix": cmd_deploy, "bidding": cmd_bidding,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, parser)
    except ConfigError as exc:
        print(f"error=ConfigError message={str(exc)!r}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - one-line failure for scripts
        print(f"error={type(exc).__name__} message={str(exc)!r}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
