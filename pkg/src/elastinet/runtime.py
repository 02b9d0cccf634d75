"""Serving-time adaptation: subnet pool, latency monitor, block paging, re-search."""
from __future__ import annotations

import logging
import math
import statistics
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .engine import BottleneckBlockParams, Linear, MissingBlockError, subnet_forward
from .graph import SubnetEncoding, VariantKey, key_str
from .latsim import EnvProfile, LatencyTable, simulate_inference, subnet_latency
from .rng import np_stream

log = logging.getLogger(__name__)

DEFAULT_LEVELS = 10
MONITOR_WINDOW = 5
UPWARD_DEADBAND = 0.05


# -- pool -------------------------------------------------------------------------

@dataclass
class PoolEntry:
    arch: str
    latency: float
    accuracy: float
    relative_latency: float = 1.0

    @property
    def enc(self) -> SubnetEncoding:
        return SubnetEncoding.from_arch(self.arch)


@dataclass
class SubnetPool:
    entries: list[PoolEntry]
    window: tuple[float, float]
    T_budget: float

    def __len__(self):
        return len(self.entries)

    def get(self, arch: str) -> PoolEntry | None:
        for e in self.entries:
            if e.arch == arch:
                return e
        return None

    def best_within(self, limit: float) -> PoolEntry | None:
        fits = [e for e in self.entries if e.latency <= limit]
        return min(fits, key=_entry_rank) if fits else None

    def optimal(self) -> PoolEntry | None:
        return self.best_within(self.T_budget)


def _entry_rank(e: PoolEntry):
    return (-e.accuracy, e.latency, e.arch)


def _as_tuple(rec) -> tuple[str, float, float]:
    if isinstance(rec, tuple):
        return rec[0], float(rec[1]), float(rec[2])
    return rec.arch, float(rec.latency), float(rec.accuracy)


def build_pool(search_history: Iterable, window: tuple[float, float], levels: int = DEFAULT_LEVELS,
               T_budget: float | None = None) -> SubnetPool:
    """Keep the most accurate subnet in each of ``levels`` equal latency bands of ``window``.

    History items are ``(arch, latency, accuracy)`` tuples or objects with those
    attributes.  Relative latencies are taken against the best entry within
    ``T_budget`` (window midpoint by default).
    """
    lo, hi = window
    if levels < 1:
        raise ValueError("levels must be at least 1")
    records = [_as_tuple(r) for r in search_history]
    if not records:
        raise ValueError("empty search history")
    if T_budget is None:
        T_budget = (lo + hi) / 2
    width = (hi - lo) / levels
    bands: dict[int, PoolEntry] = {}
    seen = set()
    for arch, lat, acc in records:
        if arch in seen or not lo <= lat <= hi:
            continue
        seen.add(arch)
        band = min(int((lat - lo) / width), levels - 1) if width > 0 else 0
        entry = PoolEntry(arch, lat, acc)
        if band not in bands or _entry_rank(entry) < _entry_rank(bands[band]):
            bands[band] = entry
    entries = [bands[b] for b in sorted(bands)]
    pool = SubnetPool(entries, (lo, hi), T_budget)
    ref = pool.optimal() or (min(entries, key=lambda e: e.latency) if entries else None)
    for e in entries:
        e.relative_latency = e.latency / ref.latency
    return pool


# -- monitor ----------------------------------------------------------------------

@dataclass
class Action:
    kind: str  # "keep" | "swap" | "research"
    arch: str | None = None


@dataclass
class MonitorState:
    """Monitor bookkeeping; ``ratios`` holds observed/estimated for recent requests."""

    active_arch: str
    estimated_latency: float
    active_accuracy: float = -math.inf
    r: float = 1.0
    cycle_period: float = 0.0
    window: int = MONITOR_WINDOW
    deadband: float = UPWARD_DEADBAND
    ratios: deque = field(default_factory=deque)

    def activate(self, arch: str, estimated_latency: float, accuracy: float):
        self.active_arch = arch
        self.estimated_latency = estimated_latency
        self.active_accuracy = accuracy

    def reset(self):
        self.ratios.clear()
        self.r = 1.0


def monitor_step(state: MonitorState, observed_latency: float, pool: SubnetPool | None,
                 T_budget: float) -> Action:
    """Update the scaling ratio from a new observation and decide what to do.

    ``r`` is the median of the last ``state.window`` observed/estimated ratios.
    Over budget: swap to the most accurate entry within ``T_budget / r`` or ask
    for a re-search when none fits.  Within budget: swap up to a more accurate
    entry when its projected latency leaves at least ``deadband`` headroom.
    """
    if not observed_latency > 0:
        raise ValueError("observed latency must be positive")
    state.ratios.append(observed_latency / state.estimated_latency)
    while len(state.ratios) > state.window:
        state.ratios.popleft()
    state.r = statistics.median(state.ratios)
    r = state.r
    if pool is None or not pool.entries:
        return Action("research")
    projected = state.estimated_latency * r
    if projected > T_budget:
        target = pool.best_within(T_budget / r)
        if target is None:
            return Action("research")
        return Action("swap", target.arch)
    target = pool.best_within(T_budget * (1.0 - state.deadband) / r)
    if target is not None and target.accuracy > state.active_accuracy and target.arch != state.active_arch:
        return Action("swap", target.arch)
    return Action("keep")


# -- block paging -----------------------------------------------------------------

class WeightStore(Protocol):
    head: Linear
    tail: Linear

    def has(self, key: VariantKey) -> bool: ...

    def load(self, key: VariantKey) -> list[BottleneckBlockParams]: ...

    def block_params(self, key: VariantKey) -> int: ...


class MemoryWeightStore:
    """Store view over in-memory supernet weights (anything with ``block``/``keys``)."""

    def __init__(self, weights):
        self.weights = weights
        self.head = weights.head
        self.tail = weights.tail
        self._keys = set(weights.keys())

    def has(self, key: VariantKey) -> bool:
        return key in self._keys

    def load(self, key: VariantKey) -> list[BottleneckBlockParams]:
        if key not in self._keys:
            raise MissingBlockError(f"no weights for block {key_str(key)}")
        return list(self.weights.block(key))

    def block_params(self, key: VariantKey) -> int:
        return sum(p.W1.size + p.b1.size + p.W2.size + p.b2.size for p in self.weights.block(key))


@dataclass
class SwapDelta:
    loaded: list[VariantKey]
    released: list[VariantKey]
    peak_blocks: int = 0
    peak_params: int = 0


class ResidentBlocks:
    """Blocks currently paged in; inference and swaps are serialized by one lock."""

    def __init__(self, store: WeightStore):
        self.store = store
        self.head = store.head
        self.tail = store.tail
        self.blocks: dict[VariantKey, list[BottleneckBlockParams]] = {}
        self.active: SubnetEncoding | None = None
        self._lock = threading.Lock()

    def block(self, key: VariantKey):
        try:
            return self.blocks[key]
        except KeyError:
            raise MissingBlockError(f"block {key_str(key)} is not resident") from None

    def resident_keys(self) -> set[VariantKey]:
        return set(self.blocks)

    def resident_params(self) -> int:
        return sum(self.store.block_params(k) for k in self.blocks)

    def infer(self, x: np.ndarray) -> tuple[str, np.ndarray]:
        with self._lock:
            if self.active is None:
                raise RuntimeError("no subnet is active")
            return self.active.arch, subnet_forward(self, self.active, x)


def swap_subnet(current: ResidentBlocks, new_arch: str | SubnetEncoding, weights_store: WeightStore | None = None
                ) -> SwapDelta:
    """Page in the blocks of ``new_arch`` that are missing and page out the rest.

    Availability of every new block is checked before anything is released, so
    a store lacking a block leaves the resident set untouched.  Old-only blocks
    are released before new ones are read, which bounds the peak by
    ``max(old, new) + shared``.
    """
    store = weights_store if weights_store is not None else current.store
    enc = new_arch if isinstance(new_arch, SubnetEncoding) else SubnetEncoding.from_arch(new_arch)
    with current._lock:
        old = set(current.blocks)
        new = set(enc.choices)
        missing = [k for k in sorted(new - old) if not store.has(k)]
        if missing:
            raise MissingBlockError(f"weight store lacks block(s) {', '.join(map(key_str, missing))}")
        to_release = sorted(old - new)
        to_load = sorted(new - old)
        peak_blocks = len(old)
        peak_params = current.resident_params()
        for k in to_release:
            del current.blocks[k]
        loaded = []
        try:
            for k in to_load:
                current.blocks[k] = store.load(k)
                loaded.append(k)
                peak_blocks = max(peak_blocks, len(current.blocks))
                peak_params = max(peak_params, current.resident_params())
        except Exception:
            for k in loaded:
                del current.blocks[k]
            for k in to_release:
                current.blocks[k] = store.load(k)
            raise
        current.active = enc
        return SwapDelta(to_load, to_release, peak_blocks, peak_params)


# -- serving loop -----------------------------------------------------------------

@dataclass
class ServeConfig:
    T_budget: float
    duration: float = 10_000.0
    request_interval: float = 100.0
    window: int = MONITOR_WINDOW
    deadband: float = UPWARD_DEADBAND
    seed: int = 0

    @property
    def cycle_period(self) -> float:
        return self.window * self.request_interval


@dataclass
class LogRecord:
    t: float
    observed_ms: float
    r: float
    action: str
    arch: str


Researcher = Callable[[float], tuple[LatencyTable, SubnetPool]]


def serve_loop(env: EnvProfile, pool: SubnetPool, weights: WeightStore, table: LatencyTable,
               config: ServeConfig, research: Researcher | None = None,
               initial_arch: str | None = None) -> list[LogRecord]:
    """Serve simulated requests at a fixed interval and adapt the active subnet.

    A monitoring cycle spans ``window`` requests.  Re-search runs synchronously
    at the request that triggered it and replaces both the latency table and
    the pool; the previous subnet keeps serving until its result is ready.
    """
    rng = np_stream(config.seed, "serve")
    start = pool.get(initial_arch) if initial_arch else pool.optimal()
    if start is None:
        start = min(pool.entries, key=lambda e: e.latency)
    resident = ResidentBlocks(weights)
    swap_subnet(resident, start.arch)
    state = MonitorState(start.arch, subnet_latency(table, start.enc), start.accuracy,
                         cycle_period=config.cycle_period, window=config.window, deadband=config.deadband)
    records: list[LogRecord] = []
    steps = int(math.floor(config.duration / config.request_interval))
    retry_at = -math.inf
    for step in range(steps):
        t = step * config.request_interval
        observed = simulate_inference(resident.active, env, t, rng)
        action = monitor_step(state, observed, pool, config.T_budget)
        kind = action.kind
        if kind == "swap":
            entry = pool.get(action.arch)
            swap_subnet(resident, entry.arch)
            state.activate(entry.arch, subnet_latency(table, entry.enc), entry.accuracy)
        elif kind == "research" and t < retry_at:
            kind = "research-deferred"
        elif kind == "research":
            best = None
            if research is None:
                kind = "research-unavailable"
            else:
                try:
                    new_table, new_pool = research(t)
                    best = new_pool.optimal()
                except Exception as exc:  # noqa: BLE001 - logged and serving continues
                    log.info("re-search failed at t=%s: %s", t, exc)
                if best is None:
                    kind = "research-failed"
                else:
                    table, pool = new_table, new_pool
                    swap_subnet(resident, best.arch)
                    state.activate(best.arch, subnet_latency(table, best.enc), best.accuracy)
                    state.reset()
            if best is None:
                # nothing fits: run the fastest known subnet and retry a cycle later
                retry_at = t + config.cycle_period
                fastest = min(pool.entries, key=lambda e: (e.latency, e.arch))
                est = subnet_latency(table, fastest.enc)
                if est < state.estimated_latency:
                    swap_subnet(resident, fastest.arch)
                    state.activate(fastest.arch, est, fastest.accuracy)
        records.append(LogRecord(t, observed, state.r, kind, state.active_arch))
    return records


def swap_events(records: Sequence[LogRecord]) -> list[LogRecord]:
    return [r for r in records if r.action == "swap"]


def make_researcher(graph, env: EnvProfile, evaluator, search_config_factory, runs_per_block: int = 9,
                    levels: int = DEFAULT_LEVELS, pool_delta: float | None = None, seed: int = 0
                    ) -> Researcher:
    """Re-profile at the current wall time, search again, rebuild the pool."""
    from .latsim import profile_blocks
    from .search import evolutionary_search

    def research(wall_time: float):
        table = profile_blocks(graph, env, runs_per_block, seed, wall_time)
        cfg = search_config_factory()
        result = evolutionary_search(graph, table, cfg, evaluator)
        delta = cfg.delta_T if pool_delta is None else pool_delta
        window = (cfg.T_budget - delta, cfg.T_budget + delta)
        return table, build_pool(result.history, window, levels, cfg.T_budget)

    return research
