"""Command-line pipeline: dataset -> pretrain -> elasticize -> train -> profile -> search -> serve.

Every command prints one JSON object per line on stdout and writes its files
under ``--out``.  Failures print a single JSON error line on stderr and exit
with a nonzero status.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Sequence

from . import persist
from .data import make_blobs
from .elastic import TrainConfig, default_bins, pretrain_toy, train_supernet
from .engine import accuracy
from .evalcache import DEFAULT_DEPTH_CAP, GroupEvaluator
from .graph import ChainSpec, count_subnets, elasticize, toy_chain, uniform_chain
from .latsim import CONDITION_SCALES, DEVICE_PRESETS, make_edge_dataset, make_env, profile_blocks, subnet_latency
from .rng import np_stream
from .runtime import DEFAULT_LEVELS, MemoryWeightStore, ServeConfig, build_pool, make_researcher, serve_loop
from .search import STRATEGIES, SearchConfig, exhaustive_oracle

SCENARIOS = ("flat", "x2", "x2-back", "x3", *CONDITION_SCALES)


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message, code=2)


def _emit(obj: dict):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _emit_error(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": message}, sort_keys=True) + "\n")
    raise SystemExit(code)


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _meta(args: argparse.Namespace) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())
            if k not in ("out", "func")}


def _chain(n_layers: int, dim: int, widths: Sequence[int] | None, input_dim: int, n_classes: int
           ) -> ChainSpec:
    if widths is None:
        return toy_chain(n_layers, dim, input_dim, n_classes)
    return uniform_chain(n_layers, dim, widths, input_dim, n_classes)


def scenario_events(name: str, event_at: float) -> list[tuple[float, float]]:
    if name == "flat":
        return []
    if name == "x2":
        return [(event_at, 2.0)]
    if name == "x2-back":
        return [(event_at, 2.0), (2 * event_at, 1.0)]
    if name == "x3":
        return [(event_at, 3.0)]
    if name in CONDITION_SCALES:
        return [(event_at, CONDITION_SCALES[name][0])]
    raise CliError(f"unknown scenario {name!r}")


# -- commands -------------------------------------------------------------------------

def cmd_dataset(args):
    out = Path(args.out)
    if args.kind == "blobs":
        data = make_blobs(args.n_per_class, args.classes, args.dim, args.separation,
                          np_stream(args.seed, "blobs"))
        persist.save_dataset(data, out)
        _emit({"command": "dataset", "kind": "blobs", "rows": len(data), "out": str(out)})
    else:
        if args.base is None:
            raise CliError("dirichlet-shift needs --base")
        base = persist.load_dataset(args.base)
        edge = make_edge_dataset(base, args.alpha, args.size, args.seed)
        persist.save_dataset(edge.data, out, {"alpha": repr(args.alpha)})
        _emit({"command": "dataset", "kind": "dirichlet-shift", "rows": len(edge.data),
               "class_proportions": [float(p) for p in edge.class_proportions], "out": str(out)})


def cmd_pretrain(args):
    data = persist.load_dataset(args.data)
    chain = _chain(args.layers, args.width_dim, args.widths, data.dim, data.n_classes)
    train, hold = data.split(args.holdout, np_stream(args.seed, "split"))
    model = pretrain_toy(train, args.epochs, args.lr, args.seed, chain, args.batch_size)
    acc = accuracy(model.forward(hold.X), hold.y) if len(hold) else float("nan")
    sizes = persist.save_model(model, args.out, _meta(args))
    _emit({"command": "pretrain", "holdout_accuracy": acc, "params": chain.param_size, "files": sizes})


def cmd_elasticize(args):
    from .elastic import init_supernet_weights

    model = persist.load_model(args.model)
    graph = elasticize(model.chain, args.gamma, args.max_merge, args.shrink_rates)
    weights = init_supernet_weights(model, graph, args.seed, args.init)
    sizes = persist.save_bundle(graph, weights, args.out, {"command": "elasticize", "args": _meta(args)})
    _emit({"command": "elasticize", "positions": graph.n, "variants": len(graph.variants),
           "subnets": str(count_subnets(graph)), "files": sizes})


def cmd_train(args):
    graph, weights, meta = persist.load_bundle(args.bundle)
    data = persist.load_dataset(args.data)
    eval_data = persist.load_dataset(args.eval_data) if args.eval_data else None
    from .latsim import mac_latency_table

    table = mac_latency_table(graph, DEVICE_PRESETS[args.env_preset])
    config = TrainConfig(args.distill_epochs, args.tune_epochs, args.lr_distill, args.lr_tune,
                         args.batch_size, args.eval_samples, default_bins(graph, table), args.seed)
    weights, report = train_supernet(None, graph, config, data, eval_data, table, weights=weights)
    out = Path(args.out)
    sizes = persist.save_bundle(graph, weights, out, {"command": "train", "args": _meta(args),
                                                      "parent": meta.get("provenance_sha256")})
    persist.save_report(report, config.latency_bins, out / "report.csv")
    for rec in report:
        _emit({"command": "train", "epoch": rec.epoch, "phase": rec.phase,
               "loss": None if math.isnan(rec.loss) else rec.loss,
               "bins": [[b.low, b.high, b.mean_accuracy, b.count] for b in rec.bins]})
    _emit({"command": "train", "files": sizes})


def cmd_profile(args):
    graph, _ = persist.load_descriptor(args.bundle)
    env = make_env(graph, args.env_preset, noise_fraction=args.noise)
    table = profile_blocks(graph, env, args.runs, args.seed, args.at)
    persist.save_table(table, args.out)
    _emit({"command": "profile", "entries": len(table.entries), "timing_calls": table.timing_calls,
           "all_original_ms": subnet_latency(table, graph.all_original()), "out": str(args.out)})


def _budget(args, graph, table) -> float:
    if args.budget_ms is not None:
        return args.budget_ms
    return args.budget_frac * subnet_latency(table, graph.all_original())


def cmd_search(args):
    graph, weights, _ = persist.load_bundle(args.bundle)
    table = persist.load_table(args.table)
    if not table.covers(graph):
        raise CliError(f"{args.table}: latency table does not cover every block of the bundle")
    data = persist.load_dataset(args.data)
    T = _budget(args, graph, table)
    evaluator = GroupEvaluator(weights, data, table, args.depth_cap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.strategy == "oracle":
        best = exhaustive_oracle(graph, table, T, evaluator)
        history = []
    else:
        cfg = SearchConfig(T, args.delta_frac * T, args.population, args.iters, args.seed)
        result = STRATEGIES[args.strategy](graph, table, cfg, evaluator)
        best, history = result.best, result.history
        persist.save_history(history, out / "history.csv")
        pool_delta = (args.pool_delta_frac if args.pool_delta_frac is not None else args.delta_frac) * T
        pool = build_pool(history, (T - pool_delta, T + pool_delta), args.levels, T)
        persist.save_pool(pool, out / "pool.csv")
    persist.save_eval_reports(evaluator.reports, out / "evals.csv")
    doc = {"strategy": args.strategy, "T_budget": T, "arch": best.arch, "latency": best.latency,
           "accuracy": best.accuracy, "evaluations": evaluator.evaluated,
           "block_forwards": evaluator.block_forwards, "naive_forwards": evaluator.naive_forwards}
    persist._write_text(out / "best.json", persist.dumps_json(doc))
    persist.write_jsonl(persist.jsonl_path(out / "best.json"), [doc])
    _emit({"command": "search", **doc})


def cmd_serve(args):
    graph, weights, _ = persist.load_bundle(args.bundle)
    table = persist.load_table(args.table)
    pool = persist.load_pool(args.pool)
    if not pool.entries:
        raise CliError(f"{args.pool}: pool is empty")
    T = args.budget_ms if args.budget_ms is not None else pool.T_budget
    preset = args.env_preset or table.device_id
    if preset not in DEVICE_PRESETS:
        raise CliError(f"{args.table}: unknown device {preset!r}; pass --env-preset")
    env = make_env(graph, preset, scenario_events(args.scenario, args.event_at), args.noise)
    research = None
    if args.data:
        data = persist.load_dataset(args.data)
        evaluator = GroupEvaluator(weights, data, table, args.depth_cap)

        def factory():
            return SearchConfig(T, args.delta_frac * T, args.population, args.iters, args.seed)

        research = make_researcher(graph, env, evaluator, factory, args.runs, args.levels,
                                   args.pool_delta_frac * T, args.seed)
        # evaluation shares the evaluator; its latency table only shapes the prefix tree
    config = ServeConfig(T, args.duration, args.interval, seed=args.seed)
    records = serve_loop(env, pool, MemoryWeightStore(weights), table, config, research)
    persist.save_events(records, args.out)
    actions = [r.action for r in records]
    _emit({"command": "serve", "requests": len(records), "swaps": actions.count("swap"),
           "researches": sum(a.startswith("research") for a in actions),
           "final_arch": records[-1].arch if records else None, "out": str(args.out)})


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elastinet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = command("dataset", cmd_dataset, "generate a toy dataset")
    sp.add_argument("kind", choices=("blobs", "dirichlet-shift"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-per-class", type=int, default=800)
    sp.add_argument("--classes", type=int, default=16)
    sp.add_argument("--dim", type=int, default=8)
    sp.add_argument("--separation", type=float, default=3.0)
    sp.add_argument("--base", help="dataset to resample (dirichlet-shift)")
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--size", type=int, default=1000)

    sp = command("pretrain", cmd_pretrain, "train the chain model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--layers", type=int, default=10)
    sp.add_argument("--width-dim", type=int, default=16, help="feature dimension between layers")
    sp.add_argument("--widths", type=_ints, default=None)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--holdout", type=float, default=0.2)

    sp = command("elasticize", cmd_elasticize, "build the supernet bundle")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gamma", type=float, default=0.25)
    sp.add_argument("--max-merge", type=int, default=2)
    sp.add_argument("--shrink-rates", type=_floats, default=(0.5, 0.25))
    sp.add_argument("--init", choices=("random", "prune"), default="random")

    sp = command("train", cmd_train, "distill and tune the branches")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--eval-data")
    sp.add_argument("--eval-samples", type=int, default=40)
    sp.add_argument("--distill-epochs", type=int, default=30)
    sp.add_argument("--tune-epochs", type=int, default=30)
    sp.add_argument("--lr-distill", type=float, default=0.01)
    sp.add_argument("--lr-tune", type=float, default=0.001)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--env-preset", choices=sorted(DEVICE_PRESETS), default="xiaomi12")

    sp = command("profile", cmd_profile, "profile block latencies on a simulated device")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--env-preset", choices=sorted(DEVICE_PRESETS), default="xiaomi12")
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--runs", type=int, default=9)
    sp.add_argument("--at", type=float, default=0.0, help="wall time of the profiling run")

    sp = command("search", cmd_search, "search a subnet under a latency budget")
    sp.add_argument("strategy", choices=(*STRATEGIES, "oracle"))
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--table", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    budget = sp.add_mutually_exclusive_group()
    budget.add_argument("--budget-ms", type=float)
    budget.add_argument("--budget-frac", type=float, default=0.7,
                        help="budget as a fraction of the all-original latency")
    sp.add_argument("--delta-frac", type=float, default=0.1)
    sp.add_argument("--pool-delta-frac", type=float)
    sp.add_argument("--population", type=int, default=50)
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--depth-cap", type=int, default=DEFAULT_DEPTH_CAP)
    sp.add_argument("--levels", type=int, default=DEFAULT_LEVELS)

    sp = command("serve", cmd_serve, "simulate serving with runtime adaptation")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--table", required=True)
    sp.add_argument("--pool", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--env-preset", choices=sorted(DEVICE_PRESETS), help="defaults to the table's device")
    sp.add_argument("--scenario", choices=SCENARIOS, default="flat")
    sp.add_argument("--event-at", type=float, default=2000.0)
    sp.add_argument("--duration", type=float, default=6000.0)
    sp.add_argument("--interval", type=float, default=100.0)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--budget-ms", type=float)
    sp.add_argument("--data", help="evaluation data; enables re-search")
    sp.add_argument("--delta-frac", type=float, default=0.1, help="re-search window half-width / budget")
    sp.add_argument("--pool-delta-frac", type=float, default=0.6, help="rebuilt pool half-width / budget")
    sp.add_argument("--population", type=int, default=30)
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--depth-cap", type=int, default=DEFAULT_DEPTH_CAP)
    sp.add_argument("--levels", type=int, default=DEFAULT_LEVELS)
    sp.add_argument("--runs", type=int, default=9)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except persist.FormatError as exc:
        _emit_error("FormatError", str(exc))
    except (CliError, ValueError, KeyError, RuntimeError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        _emit_error(type(exc).__name__, str(msg))
    return 0


if __name__ == "__main__":
    sys.exit(main())
