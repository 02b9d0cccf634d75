"""Block latency profiling, additive subnet latency and a simulated edge device.

Block cost is proportional to multiply-accumulates, calibrated so that the
all-original path of the supernet costs what a device preset reports for a
small model.  A timeline of global scale events models background load, and a
bounded uniform jitter models timer noise.
"""
from __future__ import annotations

import bisect
import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .graph import SubnetEncoding, SupernetGraph, VariantKey, key_str
from .rng import np_stream

# Average MobileNetV2 latency (ms) per phone, used as the all-original path cost.
DEVICE_PRESETS: dict[str, float] = {
    "xiaomi12": 14.43,
    "huawei-nova4": 53.05,
    "pixel2": 46.45,
    "pixel6pro": 31.29,
}

# Latency under load relative to an idle 2080 Ti, (MobileNetV2, ResNet50).
_CONDITION_MS = {
    "normal": (13.35, 33.79),
    "1-background": (14.37, 50.36),
    "3-background": (24.07, 115.09),
    "cuda-changed": (13.69, 35.89),
    "batch-64": (12.23, 31.71),
}
CONDITION_SCALES: dict[str, tuple[float, float]] = {
    name: (ms[0] / _CONDITION_MS["normal"][0], ms[1] / _CONDITION_MS["normal"][1])
    for name, ms in _CONDITION_MS.items()
}


class MissingLatencyError(KeyError):
    pass


@dataclass
class LatencyTable:
    entries: dict[VariantKey, float]
    device_id: str = "sim"
    profiled_at: float = 0.0
    timing_calls: int = 0

    def __post_init__(self):
        for key, ms in self.entries.items():
            if not ms > 0:
                raise ValueError(f"latency of {key_str(key)} must be positive, got {ms}")

    def __getitem__(self, key: VariantKey) -> float:
        try:
            return self.entries[key]
        except KeyError:
            raise MissingLatencyError(f"no latency entry for {key_str(key)}") from None

    def covers(self, graph: SupernetGraph) -> bool:
        return all(k in self.entries for k in graph.variants)

    def scaled(self, factor: float) -> "LatencyTable":
        return LatencyTable({k: v * factor for k, v in self.entries.items()}, self.device_id,
                            self.profiled_at, self.timing_calls)


@dataclass
class EnvProfile:
    base_block_cost: dict[VariantKey, float]
    event_timeline: list[tuple[float, float]] = field(default_factory=list)
    noise_fraction: float = 0.0
    device_id: str = "sim"

    def __post_init__(self):
        times = [t for t, _ in self.event_timeline]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("event times must be strictly increasing")
        if any(s <= 0 for _, s in self.event_timeline):
            raise ValueError("scale multipliers must be positive")
        if not 0 <= self.noise_fraction < 1:
            raise ValueError("noise_fraction must lie in [0, 1)")
        self._times = times

    def scale_at(self, wall_time: float) -> float:
        k = bisect.bisect_right(self._times, wall_time)
        return self.event_timeline[k - 1][1] if k else 1.0

    def jitter(self, rng: np.random.Generator) -> float:
        if self.noise_fraction == 0:
            return 0.0
        return float(rng.uniform(-self.noise_fraction, self.noise_fraction))

    def with_events(self, events: Sequence[tuple[float, float]]) -> "EnvProfile":
        return EnvProfile(self.base_block_cost, list(events), self.noise_fraction, self.device_id)


def base_costs(graph: SupernetGraph, path_ms: float) -> dict[VariantKey, float]:
    full = sum(graph.variants[k].macs for k in graph.all_original().choices)
    return {key: path_ms * v.macs / full for key, v in sorted(graph.variants.items())}


def make_env(graph: SupernetGraph, device: str = "xiaomi12", events: Sequence[tuple[float, float]] = (),
             noise_fraction: float = 0.0) -> EnvProfile:
    if device not in DEVICE_PRESETS:
        raise ValueError(f"unknown device preset {device!r}; choose from {sorted(DEVICE_PRESETS)}")
    return EnvProfile(base_costs(graph, DEVICE_PRESETS[device]), list(events), noise_fraction, device)


def mac_latency_table(graph: SupernetGraph, path_ms: float = DEVICE_PRESETS["xiaomi12"]) -> LatencyTable:
    """Noise-free table straight from the cost model (no profiling)."""
    return LatencyTable(base_costs(graph, path_ms), "mac-model")


def time_block(env: EnvProfile, key: VariantKey, wall_time: float, rng: np.random.Generator) -> float:
    return env.base_block_cost[key] * env.scale_at(wall_time) * (1.0 + env.jitter(rng))


def profile_blocks(graph: SupernetGraph, env: EnvProfile, runs_per_block: int = 9, seed: int = 0,
                   wall_time: float = 0.0) -> LatencyTable:
    """Time every variant ``runs_per_block`` times and keep the median."""
    if runs_per_block < 3:
        raise ValueError("profiling needs at least 3 runs per block")
    rng = np_stream(seed, "profile")
    entries, calls = {}, 0
    for key in graph.keys():
        samples = [time_block(env, key, wall_time, rng) for _ in range(runs_per_block)]
        calls += runs_per_block
        entries[key] = statistics.median(samples)
    return LatencyTable(entries, env.device_id, wall_time, calls)


def subnet_latency(table: LatencyTable, enc: SubnetEncoding) -> float:
    total = 0.0
    for key in enc.choices:
        total += table[key]
    return total


def expected_inference(enc: SubnetEncoding, env: EnvProfile, wall_time: float) -> float:
    total = 0.0
    for key in enc.choices:
        total += env.base_block_cost[key]
    return total * env.scale_at(wall_time)


def simulate_inference(enc: SubnetEncoding, env: EnvProfile, wall_time: float,
                       seed: int | np.random.Generator = 0) -> float:
    rng = seed if isinstance(seed, np.random.Generator) else np_stream(seed, "inference")
    return expected_inference(enc, env, wall_time) * (1.0 + env.jitter(rng))


# -- edge data ------------------------------------------------------------------

@dataclass
class EdgeDataset:
    data: Dataset
    class_proportions: np.ndarray
    alpha: float


def _apportion(proportions: np.ndarray, size: int) -> np.ndarray:
    raw = proportions * size
    counts = np.floor(raw).astype(np.int64)
    short = size - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def make_edge_dataset(base: Dataset, alpha: float, size: int, seed: int = 0) -> EdgeDataset:
    """Class-imbalanced resample of ``base`` with proportions drawn from Dirichlet(alpha)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    present = base.class_counts() > 0
    if present.sum() < 2:
        raise ValueError("base dataset needs at least two classes")
    rng = np_stream(seed, "edge-data")
    p = np.zeros(base.n_classes)
    p[present] = rng.dirichlet(np.full(int(present.sum()), float(alpha)))
    counts = _apportion(p, size)
    idx = []
    for k in range(base.n_classes):
        if counts[k]:
            pool = np.flatnonzero(base.y == k)
            idx.append(rng.choice(pool, size=int(counts[k]), replace=True))
    order = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
    order = order[rng.permutation(len(order))]
    return EdgeDataset(base.subset(order), p, float(alpha))
