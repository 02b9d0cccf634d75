"""Small trained supernets shared by the test modules."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from elastinet.data import Dataset, make_blobs
from elastinet.elastic import SupernetWeights, TrainConfig, pretrain_toy, train_supernet
from elastinet.graph import SupernetGraph, elasticize, toy_chain
from elastinet.latsim import LatencyTable, mac_latency_table
from elastinet.rng import np_stream

@dataclass
class Toy:
    graph: SupernetGraph
    weights: SupernetWeights
    table: LatencyTable
    train: Dataset
    eval: Dataset


CLASSES = 16


def toy_data(n_per_class: int = 800, seed: int = 0, separation: float = 3.0) -> Dataset:
    # 16 classes on +-3 e_k in 8 dims: every feature direction matters, so
    # narrower branches cost accuracy and accuracy tracks latency
    return make_blobs(n_per_class, CLASSES, 8, separation, np_stream(seed, "blobs"))


@lru_cache(maxsize=None)
def trained_toy(n_blocks: int, max_merge: int, rates: tuple[float, ...], seed: int = 0,
                distill_epochs: int = 8, tune_epochs: int = 4, n_per_class: int = 800) -> Toy:
    data = toy_data(n_per_class, seed)
    chain = toy_chain(n_blocks, 16, 8, CLASSES)
    model = pretrain_toy(data, epochs=10, lr=0.05, seed=seed, chain=chain)
    graph = elasticize(chain, 1.0, max_merge, rates)
    table = mac_latency_table(graph)
    cfg = TrainConfig(distill_epochs, tune_epochs, eval_subnet_samples=0, seed=seed)
    weights, _ = train_supernet(model, graph, cfg, data, latency_table=table)
    eval_data = toy_data(100, seed + 1000)
    return Toy(graph, weights, table, data, eval_data)


@dataclass
class ServeSetup:
    toy: Toy
    env: object
    table: LatencyTable
    pool: object
    T: float
    evaluator: object


def serve_setup(events=(), T_frac: float = 0.8, delta_frac: float = 0.6, levels: int = 20,
                device: str = "xiaomi12", noise: float = 0.0) -> ServeSetup:
    """A trained 10-block supernet, its device profile and a wide pool around ``T_frac`` of full."""
    from elastinet.evalcache import GroupEvaluator
    from elastinet.latsim import make_env, profile_blocks, subnet_latency
    from elastinet.runtime import build_pool
    from elastinet.search import SearchConfig, evolutionary_search

    toy = trained_toy(10, 2, (0.5, 0.25))
    env = make_env(toy.graph, device, list(events), noise)
    table = profile_blocks(toy.graph, env, runs_per_block=3)
    T = T_frac * subnet_latency(table, toy.graph.all_original())
    ev = GroupEvaluator(toy.weights, toy.eval, table)
    cfg = SearchConfig(T, delta_frac * T, population=30, search_times=10)
    result = evolutionary_search(toy.graph, table, cfg, ev)
    pool = build_pool(result.history, cfg.window, levels, T)
    return ServeSetup(toy, env, table, pool, T, ev)


def cli(*argv) -> dict:
    """Run one CLI command in-process and return its JSON summary."""
    import contextlib
    import io
    import json

    from elastinet.cli import main

    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main([str(a) for a in argv])
    assert code in (0, None), code
    return json.loads(out.getvalue().splitlines()[-1])


def cli_pipeline(work) -> list[list[str]]:
    """A small end-to-end run under ``work``; returns the commands it issued."""
    w = str(work)
    steps = [
        ["dataset", "blobs", "--out", f"{w}/train.csv", "--n-per-class", 60, "--seed", 1],
        ["dataset", "blobs", "--out", f"{w}/eval.csv", "--n-per-class", 20, "--seed", 2],
        ["dataset", "dirichlet-shift", "--base", f"{w}/eval.csv", "--out", f"{w}/edge.csv",
         "--alpha", 0.5, "--size", 200, "--seed", 3],
        ["pretrain", "--data", f"{w}/train.csv", "--out", f"{w}/model", "--layers", 4, "--epochs", 3],
        ["elasticize", "--model", f"{w}/model", "--out", f"{w}/bundle", "--gamma", 0.5],
        ["train", "--bundle", f"{w}/bundle", "--data", f"{w}/train.csv", "--eval-data", f"{w}/eval.csv",
         "--out", f"{w}/trained", "--distill-epochs", 2, "--tune-epochs", 1, "--eval-samples", 10],
        ["profile", "--bundle", f"{w}/trained", "--out", f"{w}/table.txt", "--noise", 0.1, "--runs", 5],
        ["search", "guided", "--bundle", f"{w}/trained", "--table", f"{w}/table.txt",
         "--data", f"{w}/edge.csv", "--out", f"{w}/search", "--budget-frac", 0.8,
         "--pool-delta-frac", 0.6, "--population", 20, "--iters", 4],
        ["search", "oracle", "--bundle", f"{w}/trained", "--table", f"{w}/table.txt",
         "--data", f"{w}/edge.csv", "--out", f"{w}/oracle", "--budget-frac", 0.8],
        ["serve", "--bundle", f"{w}/trained", "--table", f"{w}/table.txt", "--pool", f"{w}/search/pool.csv",
         "--out", f"{w}/flat.csv", "--scenario", "flat", "--duration", 2000],
        ["serve", "--bundle", f"{w}/trained", "--table", f"{w}/table.txt", "--pool", f"{w}/search/pool.csv",
         "--out", f"{w}/x2.csv", "--scenario", "x2", "--noise", 0.05, "--duration", 4000],
    ]
    for argv in steps:
        cli(*argv)
    return [[str(a) for a in s] for s in steps]


class Memo:
    """Caches accuracies by arch so repeated seeded runs share evaluation work."""

    def __init__(self, inner):
        self.inner = inner
        self.cache = {}

    def __call__(self, encs):
        fresh = [e for e in dict.fromkeys(encs) if e not in self.cache]
        if fresh:
            self.cache.update(zip(fresh, self.inner(fresh)))
        return [self.cache[e] for e in encs]
