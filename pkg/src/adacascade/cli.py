"""Command line interface.

Exit status is 0 on success, 2 when inputs fail validation and 1 on any
other error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import CascadeError, ValidationError
from .learners import TrainConfig
from .policy import OverheadSpec, TrainedPolicy, train_bottom_up
from .runtime import compare_terminal_only, evaluate_dataset
from .sweep import SweepConfig, SweepResult, emit_report, run_sweep, select_operating_point
from .traces import (
    LossSpec,
    agreement_statistics,
    generate_synthetic,
    load_synth_config,
    load_topology,
    load_traces,
    reference_config,
    save_topology,
    save_traces,
    split,
)

log = logging.getLogger("adacascade")


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _overhead(args):
    return OverheadSpec(default=args.overhead_linear) if args.overhead_linear is not None else OverheadSpec()


def _load(args):
    topo = load_topology(args.topology)
    return load_traces(args.traces, topo, LossSpec(args.loss_topk))


def cmd_validate(args):
    ds = _load(args)
    _emit({"n": len(ds), "stages": list(ds.topology.stages), "loss_k": ds.loss_spec.k,
           "agreement": agreement_statistics(ds)})


def cmd_synth(args):
    if args.reference:
        cfg = reference_config()
    elif args.config:
        cfg = load_synth_config(args.config)
    else:
        raise ValidationError("give a synth config file or --reference")
    if args.seed is not None or args.n is not None:
        d = cfg.to_dict()
        d["seed"] = cfg.seed if args.seed is None else args.seed
        d["n"] = cfg.n if args.n is None else args.n
        cfg = type(cfg).from_dict(d)
    ds = generate_synthetic(cfg)
    save_traces(ds, args.output)
    if args.topology_out:
        save_topology(ds.topology, args.topology_out)
    log.info("wrote %d examples to %s", len(ds), args.output)


def cmd_train(args):
    ds = _load(args)
    train, test = split(ds, args.split, args.seed)
    policy = train_bottom_up(train, args.lam, _overhead(args))
    policy.save(args.output)
    _emit({"lambda": args.lam, "digest": policy.digest, "pruned": sorted(policy.pruned),
           "train": evaluate_dataset(policy, train).to_dict(),
           "test": evaluate_dataset(policy, test).to_dict()})


def cmd_eval(args):
    ds = _load(args)
    policy = TrainedPolicy.load(args.policy, ds.topology)
    m = evaluate_dataset(policy, ds)
    out = m.to_dict()
    out["speedup"] = m.speedup
    out["terminal_only"] = compare_terminal_only(ds).to_dict()
    _emit(out)


def cmd_sweep(args):
    cfg_path = Path(args.config)
    try:
        doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{cfg_path}: not valid JSON ({exc})") from exc
    base = cfg_path.parent
    try:
        topo = load_topology(base / doc["topology"])
        k = args.loss_topk if args.loss_topk_given else doc.get("loss_topk", 1)
        ds = load_traces(base / doc["traces"], topo, LossSpec(k))
    except KeyError as exc:
        raise ValidationError(f"sweep config lacks {exc}") from exc
    overhead_linear = args.overhead_linear if args.overhead_linear is not None else doc.get("overhead_linear")
    config = SweepConfig(
        lambda_values=doc.get("lambda_values"),
        budget=doc.get("budget"),
        tolerance=doc.get("tolerance"),
        seed=args.seed if args.seed_given else doc.get("seed", 0),
        split=args.split if args.split_given else doc.get("split", 0.5),
        overhead=OverheadSpec(default=overhead_linear),
        train=TrainConfig(**doc.get("train", {})),
    )
    result = run_sweep(ds, topo, config)
    result.save(args.output)
    summary = {"points": len(result.points), "pareto": result.pareto, "output": str(args.output)}
    if config.budget is not None or config.tolerance is not None:
        summary["operating_point"] = select_operating_point(result, config.budget, config.tolerance).to_dict()
    _emit(summary)


def cmd_report(args):
    sweep = SweepResult.load(args.sweep)
    paths = emit_report(sweep, args.output)
    _emit({k: str(v) for k, v in paths.items()})


class _Given(argparse.Action):
    """Store the value and remember that it was passed explicitly."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        setattr(namespace, self.dest + "_given", True)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, action=_Given, help="split / sampling seed")
    common.add_argument("--split", type=float, default=0.5, action=_Given, help="training fraction")
    common.add_argument("--loss-topk", type=int, default=1, action=_Given, help="top-k of the indicator loss")
    common.add_argument("--overhead-linear", type=float, default=None,
                        help="overhead of a linear policy (default: 8%% of the cheapest stage)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.set_defaults(seed_given=False, split_given=False, loss_topk_given=False)

    p = argparse.ArgumentParser(prog="adacascade", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="check a trace file against a topology")
    s.add_argument("traces")
    s.add_argument("topology")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic traces")
    s.add_argument("config", nargs="?")
    s.add_argument("--reference", action="store_true", help="use the built-in reference configuration")
    s.add_argument("--n", type=int)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--topology-out")
    s.set_defaults(func=cmd_synth, seed=None)

    s = sub.add_parser("train", parents=[common], help="train a policy for one lambda")
    s.add_argument("traces")
    s.add_argument("topology")
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a trained policy on traces")
    s.add_argument("traces")
    s.add_argument("topology")
    s.add_argument("--policy", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="sweep lambda and collect baselines")
    s.add_argument("--config", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", parents=[common], help="write CSV/JSON reports for a sweep")
    s.add_argument("--sweep", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (CascadeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
