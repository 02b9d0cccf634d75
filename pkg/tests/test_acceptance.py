"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the lines are repeated in the
terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""
import math
import shutil
import statistics
import sys
import tempfile
import time
from functools import lru_cache
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from elastinet.elastic import (  # noqa: E402
    TrainConfig,
    mean_subnet_accuracy,
    original_params_hash,
    pretrain_toy,
    train_supernet,
)
from elastinet.engine import (  # noqa: E402
    BottleneckBlockParams,
    block_backward,
    block_forward,
    cross_entropy_loss,
    distillation_loss,
    variant_backward,
    variant_forward,
)
from elastinet.evalcache import group_evaluate, naive_evaluate  # noqa: E402
from elastinet.graph import (  # noqa: E402
    count_subnets,
    elasticize,
    enumerate_subnets,
    sample_uniform_subnet,
    toy_chain,
    uniform_chain,
)
from elastinet.latsim import make_env, profile_blocks, simulate_inference, subnet_latency  # noqa: E402
from elastinet.rng import py_stream  # noqa: E402
from elastinet.runtime import MemoryWeightStore, ServeConfig, make_researcher, serve_loop, swap_events  # noqa: E402
from elastinet.search import (  # noqa: E402
    NoFeasibleSubnetError,
    SearchConfig,
    evaluations_to_reach,
    evolutionary_search,
    exhaustive_oracle,
    nearby_init,
    plain_evolutionary,
)
from elastinet.evalcache import GroupEvaluator  # noqa: E402
from toys import Memo, cli_pipeline, serve_setup, toy_data, trained_toy  # noqa: E402

RESULTS: list[str] = []


def report(n: int, title: str, ok: bool, detail: str):
    line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- search fixtures ------------------------------------------------------------------

# (blocks, max_merge, shrink rates) -> subnet count: 115, 389, 1316, 2378, 3927, 274
SEARCH_GRAPHS = [(4, 2, (0.5, 0.25)), (5, 2, (0.5, 0.25)), (6, 2, (0.5, 0.25)), (9, 1, (0.5,)),
                 (7, 1, (0.5, 0.25)), (10, 2, ())]
BUDGET_FRACS = (0.6, 0.8)
SEEDS = range(20)
POPULATION, ITERS = 50, 20


@lru_cache(maxsize=None)
def search_case(spec):
    """Trained toy, memoized evaluator, and budgets placed on the accuracy/latency frontier.

    The budget for fraction f is the latency of the most accurate subnet not
    slower than f of the full model, so the in-budget optimum sits at the budget.
    """
    toy = trained_toy(*spec)
    ev = Memo(GroupEvaluator(toy.weights, toy.eval, toy.table))
    subs = list(enumerate_subnets(toy.graph))
    acc = ev(subs)
    lat = [subnet_latency(toy.table, s) for s in subs]
    full = subnet_latency(toy.table, toy.graph.all_original())
    budgets = []
    for frac in BUDGET_FRACS:
        best = max((a, -l) for a, l in zip(acc, lat) if l <= frac * full)
        if -best[1] not in budgets:
            budgets.append(-best[1])
    return toy, ev, budgets


def run_seeds(strategy, toy, ev, T, oracle_acc):
    hits, evals = 0, []
    for seed in SEEDS:
        cfg = SearchConfig(T, population=POPULATION, search_times=ITERS, seed=seed)
        try:
            r = strategy(toy.graph, toy.table, cfg, ev)
        except NoFeasibleSubnetError:
            evals.append(math.inf)
            continue
        hits += abs(r.best.accuracy - oracle_acc) <= 1e-9
        n = evaluations_to_reach(r.history, oracle_acc, T)
        evals.append(math.inf if n is None else n)
    return hits, evals


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_1_oracle_equivalence():
    lines, ok = [], True
    for spec in SEARCH_GRAPHS:
        toy, ev, budgets = search_case(spec)
        n = count_subnets(toy.graph)
        t0 = time.perf_counter()
        parts = []
        for T in budgets:
            oracle = exhaustive_oracle(toy.graph, toy.table, T, ev)
            hits, _ = run_seeds(evolutionary_search, toy, ev, T, oracle.accuracy)
            ok &= hits >= 18
            parts.append(f"{hits}/20 at T={T:.2f}")
        secs = time.perf_counter() - t0
        ok &= 100 <= n <= 5000 and secs <= 120
        lines.append(f"{n} subnets {', '.join(parts)} in {secs:.0f}s")
    ok &= len(SEARCH_GRAPHS) >= 5
    report(1, "guided search matches exhaustive oracle", ok, "; ".join(lines))


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_2_search_efficiency():
    cap = POPULATION + ITERS * POPULATION // 2
    lines, ok = [], True
    for spec in (SEARCH_GRAPHS[0], SEARCH_GRAPHS[4]):
        toy, ev, budgets = search_case(spec)
        for T in budgets:
            oracle = exhaustive_oracle(toy.graph, toy.table, T, ev)
            _, guided = run_seeds(evolutionary_search, toy, ev, T, oracle.accuracy)
            _, plain = run_seeds(plain_evolutionary, toy, ev, T, oracle.accuracy)
            mg, mp = statistics.median(guided), statistics.median(plain)
            ok &= mg < mp < cap
            lines.append(f"{count_subnets(toy.graph)} subnets T={T:.2f}: guided {mg} < plain {mp} < cap {cap}")
    report(2, "median evaluations to optimum", ok, "; ".join(lines))


# -- 3 ---------------------------------------------------------------------------------

REUSE_FRACS = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
REUSE_SIZES = (100, 200)
DEPTH_CAP = 8


def distinct_prefixes(encs):
    return len({e.choices[:k] for e in encs for k in range(1, len(e.choices) + 1)})


def test_criterion_3_reuse_evaluation():
    toy = trained_toy(10, 2, (0.5, 0.25))
    full = subnet_latency(toy.table, toy.graph.all_original())
    exact, peak_ok, rows, worst = True, True, [], 0.0
    for size in REUSE_SIZES:
        for frac in REUSE_FRACS:
            ratios, bounds = [], []
            for seed in range(5):
                cfg = SearchConfig(frac * full, population=size, seed=seed)
                encs = [c.enc for c in nearby_init(toy.graph, toy.table, cfg)]
                reuse = group_evaluate(encs, toy.eval, toy.weights, toy.table, DEPTH_CAP)
                naive = naive_evaluate(encs, toy.eval, toy.weights)
                exact &= reuse.accuracies == naive.accuracies and len(encs) == size
                peak_ok &= reuse.peak_cached_features <= DEPTH_CAP
                ratios.append(reuse.block_forward_count / reuse.naive_forward_count)
                bounds.append(distinct_prefixes(encs) * reuse.batches_loaded / reuse.naive_forward_count)
            worst = max(worst, max(ratios))
            rows.append(f"n={size} T={frac:.1f}full ratio {statistics.mean(ratios):.3f} "
                        f"(max {max(ratios):.3f}, prefix bound {statistics.mean(bounds):.3f})")
    saving_ok = worst <= 0.70
    detail = (f"bitwise equal {exact}, peak<=cap {peak_ok}, worst ratio {worst:.3f}; " + "; ".join(rows))
    report(3, "reuse evaluation exact and saves >=30% forwards", exact and peak_ok and saving_ok, detail)


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_4_latency_additivity():
    graph = elasticize(toy_chain(10))
    env = make_env(graph, "pixel2")
    table = profile_blocks(graph, env, runs_per_block=3)
    rng = py_stream(4, "additivity")
    mismatches = 0
    for _ in range(1000):
        enc = sample_uniform_subnet(graph, rng)
        mismatches += subnet_latency(table, enc) != simulate_inference(enc, env, 0.0)
    noisy = make_env(graph, "xiaomi12", noise_fraction=0.10)
    jit = profile_blocks(graph, noisy, runs_per_block=99, seed=7)
    dev = max(abs(jit[k] / noisy.base_block_cost[k] - 1) for k in graph.keys())
    report(4, "latency table additivity", mismatches == 0 and dev <= 0.03,
           f"{mismatches}/1000 mismatches, max jittered deviation {dev:.4f} (<= 0.03)")


# -- 5 ---------------------------------------------------------------------------------

def _rel(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b)))


def _numeric(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = f()
        arr[idx] = old - eps
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def _params(rng, d_in, h, d_out, linear_out=False):
    return BottleneckBlockParams(rng.normal(0, 0.7, (d_in, h)), rng.normal(0, 0.3, h),
                                 rng.normal(0, 0.7, (h, d_out)), rng.normal(0, 0.3, d_out), linear_out)


def gradient_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    d_in, h, d_out = (int(v) for v in rng.integers(2, 6, 3))
    p = _params(rng, d_in, h, d_out, bool(seed % 2))
    x = rng.normal(size=(4, d_in))
    up = rng.normal(size=(4, d_out))
    grads, dx = block_backward(p, x, up)
    f = lambda: float(np.sum(block_forward(p, x) * up))  # noqa: E731
    for name in ("W1", "b1", "W2", "b2"):
        worst = max(worst, _rel(grads[name], _numeric(f, getattr(p, name))))
    worst = max(worst, _rel(dx, _numeric(f, x)))
    layers = [_params(rng, 4, 5, 4), _params(rng, 4, 3, 4)]
    xv, teacher = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    g_loss = lambda: distillation_loss([teacher], [variant_forward(layers, xv)])[0]  # noqa: E731
    _, (g_out,) = distillation_loss([teacher], [variant_forward(layers, xv)])
    vgrads, vdx = variant_backward(layers, xv, g_out)
    for k, q in enumerate(layers):
        for name in ("W1", "b1", "W2", "b2"):
            worst = max(worst, _rel(vgrads[k][name], _numeric(g_loss, getattr(q, name))))
    worst = max(worst, _rel(vdx, _numeric(g_loss, xv)))
    logits, labels = rng.normal(0, 3, (5, 4)), rng.integers(0, 4, 5)
    _, g = cross_entropy_loss(logits, labels)
    worst = max(worst, _rel(g, _numeric(lambda: cross_entropy_loss(logits, labels)[0], logits)))
    return worst


PHASES = {"two-phase": (15, 15), "distill-only": (30, 0), "tune-only": (0, 30)}


def test_criterion_5_elastification_training():
    worst = max(gradient_check(s) for s in range(60))
    data = toy_data(800, seed=0)
    eval_data = toy_data(100, seed=1000)
    chain = toy_chain(10, 16, 8, 16)
    model = pretrain_toy(data, epochs=10, lr=0.05, seed=0, chain=chain)
    graph = elasticize(chain)
    rng = py_stream(1, "phase-eval")
    subnets = [sample_uniform_subnet(graph, rng) for _ in range(60)]
    accs, times, hashes = {}, {}, set()
    reference = None
    for name, (d, t) in PHASES.items():
        cfg = TrainConfig(d, t, lr_distill=0.01, lr_tune=0.001, eval_subnet_samples=0)
        t0 = time.perf_counter()
        weights, _ = train_supernet(model, graph, cfg, data)
        times[name] = time.perf_counter() - t0
        reference = reference or original_params_hash(weights)
        hashes.add(original_params_hash(weights))
        accs[name] = mean_subnet_accuracy(weights, graph, eval_data, subnets)
    ok = (worst <= 1e-4 and hashes == {reference}
          and accs["two-phase"] >= accs["distill-only"] and accs["two-phase"] >= accs["tune-only"]
          and max(times.values()) <= 300)
    detail = (f"60 gradient seeds worst rel err {worst:.2e}; original hash unchanged {hashes == {reference}}; "
              + ", ".join(f"{k} acc {accs[k]:.4f} ({times[k]:.0f}s)" for k in PHASES))
    report(5, "elastification training", ok, detail)


# -- 6 ---------------------------------------------------------------------------------

def _serve(events, research):
    s = serve_setup(events, T_frac=1.0)
    researcher = None
    if research:
        researcher = make_researcher(s.toy.graph, s.env, s.evaluator,
                                     lambda: SearchConfig(s.T, population=30, search_times=10),
                                     runs_per_block=3, pool_delta=0.6 * s.T)
    cfg = ServeConfig(s.T, duration=6000.0, request_interval=100.0)
    return s, cfg, serve_loop(s.env, s.pool, MemoryWeightStore(s.toy.weights), s.table, cfg, researcher)


def test_criterion_6_dynamic_update():
    s, cfg, x2 = _serve([(2000.0, 2.0)], research=False)
    swaps = swap_events(x2)
    x2_ok = (len(swaps) == 1 and 2000.0 <= swaps[0].t <= 2000.0 + cfg.cycle_period
             and s.pool.get(swaps[0].arch).latency * 2 <= s.T
             and all(r.observed_ms <= s.T for r in x2 if r.t > swaps[0].t))
    s3, cfg3, x3 = _serve([(2000.0, 3.0)], research=True)
    kinds = [r.action for r in x3]
    k = kinds.index("research") if "research" in kinds else None
    x3_ok = k is not None and all(r.observed_ms <= s3.T for r in x3[k + 1:])
    _, _, flat = _serve([], research=True)
    flat_ok = swap_events(flat) == [] and all(r.action == "keep" for r in flat)
    detail = (f"x2: swap at t={swaps[0].t if swaps else None} (event 2000, cycle {cfg.cycle_period:.0f}) "
              f"{'ok' if x2_ok else 'not ok'}; x3: research at t={x3[k].t if k is not None else None}, "
              f"post-research max latency {max((r.observed_ms for r in x3[k + 1:]), default=math.nan):.2f} "
              f"vs T {s3.T:.2f}; flat: {len(swap_events(flat))} swaps")
    report(6, "runtime adaptation", x2_ok and x3_ok and flat_ok, detail)


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_7_combinatorics():
    checked, bad = [], []
    for n in range(1, 11):
        for m in range(0, min(3, n - 1) + 1):
            for rates in ((), (0.5,), (0.5, 0.25)):
                g = elasticize(uniform_chain(n, 16), 1.0, m, rates)
                c = count_subnets(g)
                if c > 10_000:
                    continue
                if sum(1 for _ in enumerate_subnets(g)) != c:
                    bad.append((n, m, rates))
                checked.append(c)
    ref = count_subnets(elasticize(uniform_chain(4, 16), 1.0, 2, (0.5, 0.25)))
    report(7, "subnet counting", not bad and ref == 115 and 115 in checked,
           f"{len(checked)} graphs up to {max(checked)} subnets enumerated, mismatches {bad}, reference {ref}")


# -- 8 ---------------------------------------------------------------------------------

def _snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_cli_determinism():
    work = Path(tempfile.mkdtemp(prefix="elastinet-det-"))
    try:
        steps = cli_pipeline(work)
        first = _snapshot(work)
        shutil.rmtree(work)
        cli_pipeline(work)
        second = _snapshot(work)
    finally:
        shutil.rmtree(work, ignore_errors=True)
    diff = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    commands = sorted({s[0] for s in steps})
    report(8, "CLI determinism", not diff and len(first) > 0,
           f"{len(first)} files from commands {', '.join(commands)}; differing: {diff or 'none'}")


if __name__ == "__main__":
    failed = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
