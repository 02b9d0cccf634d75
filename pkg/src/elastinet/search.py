"""Latency-guided subnet search plus unguided baselines and an exhaustive oracle."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .graph import (
    SubnetEncoding,
    SupernetGraph,
    VariantKey,
    count_subnets,
    enumerate_subnets,
    sample_uniform_subnet,
)
from .latsim import LatencyTable, subnet_latency
from .rng import py_stream

Evaluator = Callable[[Sequence[SubnetEncoding]], Sequence[float]]
Window = tuple[float, float]

ORACLE_CAP = 10_000
MUTATION_RETRIES = 10


class EmptyWindowError(RuntimeError):
    pass


class NoFeasibleSubnetError(RuntimeError):
    pass


class SearchSpaceTooLarge(RuntimeError):
    pass


@dataclass
class SearchConfig:
    T_budget: float
    delta_T: float | None = None
    population: int = 50
    search_times: int = 20
    seed: int = 0
    keep_fraction: float = 0.5
    init_attempts: int = 200
    # annealing extensions
    t0: float = 0.02
    cooling: float = 0.97

    def __post_init__(self):
        if self.delta_T is None:
            self.delta_T = 0.1 * self.T_budget
        if self.delta_T < 0:
            raise ValueError("delta_T must be non-negative")
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")

    @property
    def window(self) -> Window:
        return (self.T_budget - self.delta_T, self.T_budget + self.delta_T)


@dataclass
class Candidate:
    enc: SubnetEncoding
    latency: float
    accuracy: float | None = None

    @property
    def arch(self) -> str:
        return self.enc.arch


@dataclass
class HistoryRecord:
    generation: int
    arch: str
    latency: float
    accuracy: float


@dataclass
class SearchResult:
    best: Candidate
    history: list[HistoryRecord]
    chain: list[Candidate] = field(default_factory=list)

    @property
    def evaluations(self) -> int:
        return len(self.history)

    def pool_tuples(self) -> list[tuple[str, float, float]]:
        return [(h.arch, h.latency, h.accuracy) for h in self.history]


def rank_key(c: Candidate, T_budget: float = math.inf):
    """Sort key: in-budget first, then higher accuracy, lower latency, lexicographic arch."""
    return (c.latency > T_budget, -(c.accuracy if c.accuracy is not None else -math.inf),
            c.latency, c.arch)


def in_window(latency: float, window: Window) -> bool:
    return window[0] <= latency <= window[1]


def window_distance(latency: float, window: Window) -> float:
    lo, hi = window
    if latency < lo:
        return lo - latency
    if latency > hi:
        return latency - hi
    return 0.0


# -- moves ------------------------------------------------------------------------

def replace_branch(enc: SubnetEncoding, graph: SupernetGraph, key: VariantKey) -> SubnetEncoding:
    """Insert variant ``key``, dropping overlapped choices and refilling the rest with originals."""
    v = graph.variants[key]
    before, after = [], []
    lo, hi = v.start, v.stop
    for c in enc.choices:
        c_stop = graph.variants[c].stop
        if c_stop <= v.start:
            before.append(c)
        elif c[0] >= v.stop:
            after.append(c)
        else:
            lo, hi = min(lo, c[0]), max(hi, c_stop)
    fill_left = [(p, 0) for p in range(lo, v.start)]
    fill_right = [(p, 0) for p in range(v.stop, hi)]
    return SubnetEncoding(tuple(before + fill_left + [key] + fill_right + after))


def neighbors(enc: SubnetEncoding, graph: SupernetGraph) -> list[SubnetEncoding]:
    """All single-branch replacements of ``enc``."""
    present = set(enc.choices)
    return [replace_branch(enc, graph, key) for key in graph.keys() if key not in present]


def random_mutate(enc: SubnetEncoding, graph: SupernetGraph, rng: random.Random) -> SubnetEncoding:
    present = set(enc.choices)
    keys = [k for k in graph.keys() if k not in present]
    if not keys:
        return enc
    return replace_branch(enc, graph, rng.choice(keys))


def nearby_mutate(enc: SubnetEncoding, graph: SupernetGraph, table: LatencyTable, window: Window,
                  rng: random.Random) -> SubnetEncoding:
    """Random branch replacement, steered back toward the latency window if it leaves it.

    On a miss every other single-branch replacement is scanned and one of those
    closest to the window (distance 0 when inside) is returned.
    """
    child = random_mutate(enc, graph, rng)
    if child is enc or in_window(subnet_latency(table, child), window):
        return child
    return _closest_neighbor(enc, graph, table, window, rng)


def _closest_neighbor(enc, graph, table, window, rng):
    options = neighbors(enc, graph)
    dist = [window_distance(subnet_latency(table, o), window) for o in options]
    best = min(dist)
    return rng.choice([o for o, d in zip(options, dist) if d == best])


def nearby_init(graph: SupernetGraph, table: LatencyTable, config: SearchConfig,
                rng: random.Random | None = None) -> list[Candidate]:
    """Distinct uniformly sampled subnets whose latency lies in the search window.

    Rejection sampling runs for ``init_attempts * population`` draws; when the
    window is too sparse to fill the population that way, in-window mutations of
    the subnets already found top it up.  Fewer than ``population`` candidates
    are returned only when no more distinct ones turn up.
    """
    rng = rng if rng is not None else py_stream(config.seed, "init")
    window = config.window
    found: dict[str, SubnetEncoding] = {}
    attempts = config.init_attempts * config.population
    for _ in range(attempts):
        if len(found) >= config.population:
            break
        enc = sample_uniform_subnet(graph, rng)
        if enc.arch not in found and in_window(subnet_latency(table, enc), window):
            found[enc.arch] = enc
    if not found:
        # walk from the full model toward the window before giving up
        enc = graph.all_original()
        for _ in range(4 * graph.n):
            if in_window(subnet_latency(table, enc), window):
                found[enc.arch] = enc
                break
            enc = _closest_neighbor(enc, graph, table, window, rng)
    if not found:
        raise EmptyWindowError(f"empty latency window [{window[0]:.4g}, {window[1]:.4g}]")
    stale = 0
    while len(found) < config.population and stale < attempts // 10:
        parent = rng.choice(list(found.values()))
        child = nearby_mutate(parent, graph, table, window, rng)
        if child.arch not in found and in_window(subnet_latency(table, child), window):
            found[child.arch] = child
            stale = 0
        else:
            stale += 1
    return [Candidate(e, subnet_latency(table, e)) for e in found.values()]


def uniform_init(graph: SupernetGraph, table: LatencyTable, config: SearchConfig,
                 rng: random.Random) -> list[Candidate]:
    found: dict[str, SubnetEncoding] = {}
    for _ in range(config.init_attempts * config.population):
        if len(found) >= min(config.population, count_subnets(graph)):
            break
        enc = sample_uniform_subnet(graph, rng)
        found.setdefault(enc.arch, enc)
    return [Candidate(e, subnet_latency(table, e)) for e in found.values()]


# -- search loops ------------------------------------------------------------------

class _Ledger:
    """Evaluation cache: every arch is evaluated at most once and logged in order."""

    def __init__(self, table: LatencyTable, evaluator: Evaluator):
        self.table = table
        self.evaluator = evaluator
        self.seen: dict[str, Candidate] = {}
        self.history: list[HistoryRecord] = []

    def evaluate(self, encs: Iterable[SubnetEncoding], generation: int) -> list[Candidate]:
        encs = list(encs)
        fresh = [e for e in dict.fromkeys(encs) if e.arch not in self.seen]
        if fresh:
            accs = self.evaluator(fresh)
            for e, a in zip(fresh, accs):
                c = Candidate(e, subnet_latency(self.table, e), float(a))
                self.seen[e.arch] = c
                self.history.append(HistoryRecord(generation, e.arch, c.latency, c.accuracy))
        return [self.seen[e.arch] for e in encs]

    def best(self, T_budget: float) -> Candidate:
        feasible = [c for c in self.seen.values() if c.latency <= T_budget]
        if not feasible:
            raise NoFeasibleSubnetError("no subnet within budget")
        return min(feasible, key=lambda c: rank_key(c, T_budget))


def _evolve(graph: SupernetGraph, table: LatencyTable, config: SearchConfig, evaluator: Evaluator,
            init: list[Candidate], mutate: Callable[[SubnetEncoding], SubnetEncoding]) -> SearchResult:
    ledger = _Ledger(table, evaluator)
    population = ledger.evaluate([c.enc for c in init], 0)
    T = config.T_budget
    for generation in range(1, config.search_times + 1):
        population = sorted({c.arch: c for c in population}.values(), key=lambda c: rank_key(c, T))
        n_keep = max(1, math.ceil(config.keep_fraction * len(population)))
        survivors = population[:n_keep]
        n_children = max(config.population - n_keep, 1)
        children: list[SubnetEncoding] = []
        taken = set()
        for k in range(n_children):
            parent = survivors[k % len(survivors)].enc
            child = mutate(parent)
            for _ in range(MUTATION_RETRIES):
                if child.arch not in ledger.seen and child.arch not in taken:
                    break
                child = mutate(parent)
            taken.add(child.arch)
            children.append(child)
        population = survivors + ledger.evaluate(children, generation)
    return SearchResult(ledger.best(T), ledger.history)


def evolutionary_search(graph: SupernetGraph, table: LatencyTable, config: SearchConfig,
                        evaluator: Evaluator) -> SearchResult:
    """Window-guided evolution: nearby init, keep the top fraction, one nearby mutation each.

    Elitist: survivors carry over, so the best candidate is never lost.
    """
    rng = py_stream(config.seed, "guided")
    init = nearby_init(graph, table, config, rng)
    window = config.window
    return _evolve(graph, table, config, evaluator, init,
                   lambda e: nearby_mutate(e, graph, table, window, rng))


def plain_evolutionary(graph: SupernetGraph, table: LatencyTable, config: SearchConfig,
                       evaluator: Evaluator) -> SearchResult:
    rng = py_stream(config.seed, "plain")
    init = uniform_init(graph, table, config, rng)
    return _evolve(graph, table, config, evaluator, init, lambda e: random_mutate(e, graph, rng))


def simulated_annealing(graph: SupernetGraph, table: LatencyTable, config: SearchConfig,
                        evaluator: Evaluator) -> SearchResult:
    """Single chain over nearby mutations; temperature ``t0 * cooling**k``.

    ``t0 == 0`` is a greedy climb and ``t0 == inf`` a random walk.  The chain of
    accepted states is returned alongside the usual history.
    """
    rng = py_stream(config.seed, "anneal")
    window = config.window
    ledger = _Ledger(table, evaluator)
    start_cfg = SearchConfig(config.T_budget, config.delta_T, 2, 0, config.seed,
                             init_attempts=config.init_attempts * config.population // 2)
    current = ledger.evaluate([nearby_init(graph, table, start_cfg, rng)[0].enc], 0)[0]
    chain = [current]
    for step in range(1, config.search_times + 1):
        temperature = config.t0 * config.cooling ** (step - 1) if math.isfinite(config.t0) else math.inf
        proposal_enc = nearby_mutate(current.enc, graph, table, window, rng)
        for _ in range(MUTATION_RETRIES):
            if proposal_enc.arch not in ledger.seen:
                break
            proposal_enc = nearby_mutate(current.enc, graph, table, window, rng)
        proposal = ledger.evaluate([proposal_enc], step)[0]
        delta = proposal.accuracy - current.accuracy
        if delta >= 0:
            accept = True
        elif temperature > 0:
            accept = rng.random() < math.exp(delta / temperature)
        else:
            accept = False
        if accept:
            current = proposal
            chain.append(current)
    return SearchResult(ledger.best(config.T_budget), ledger.history, chain)


def exhaustive_oracle(graph: SupernetGraph, table: LatencyTable, T_budget: float,
                      evaluator: Evaluator, cap: int = ORACLE_CAP, chunk: int = 500) -> Candidate:
    """Evaluate every subnet within budget and return the best under the global tie rule."""
    total = count_subnets(graph)
    if total > cap:
        raise SearchSpaceTooLarge(f"{total} subnets exceed the oracle cap of {cap}")
    feasible = [e for e in enumerate_subnets(graph) if subnet_latency(table, e) <= T_budget]
    if not feasible:
        raise NoFeasibleSubnetError("no subnet within budget")
    best: Candidate | None = None
    for lo in range(0, len(feasible), chunk):
        part = feasible[lo:lo + chunk]
        for e, a in zip(part, evaluator(part)):
            c = Candidate(e, subnet_latency(table, e), float(a))
            if best is None or rank_key(c) < rank_key(best):
                best = c
    return best


def evaluations_to_reach(history: Sequence[HistoryRecord], target_accuracy: float, T_budget: float,
                         tol: float = 1e-9) -> int | None:
    """1-based number of evaluations until an in-budget subnet hits ``target_accuracy``."""
    for k, h in enumerate(history, start=1):
        if h.latency <= T_budget and h.accuracy >= target_accuracy - tol:
            return k
    return None


STRATEGIES = {
    "guided": evolutionary_search,
    "plain": plain_evolutionary,
    "anneal": simulated_annealing,
}
