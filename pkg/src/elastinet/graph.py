"""Chain models, block partitioning, supernet expansion and subnet encodings.

A pretrained chain model is a sequence of bottleneck layers sandwiched between a
fixed head (input projection) and tail (linear classifier).  Layers are grouped
into *positions* (basic blocks); the supernet then offers, for every position,
the original block plus merged blocks (one block standing in for several
consecutive positions) and shrunk blocks (narrower copies of one position).

Variants are keyed by ``(start, j)``: ``j == 0`` is the original block,
``j > 0`` a merged block covering ``j + 1`` positions, ``j < 0`` shrink level
``-j``.  A subnet is a left-to-right tiling of positions by variants.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

from .rng import as_random

VariantKey = tuple[int, int]

DEFAULT_GAMMA = 0.25


class GranularityError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One bottleneck layer: ``in_dim -> width -> out_dim``.

    ``fusion`` marks layers an inference runtime fuses together; consecutive
    layers sharing a non-None tag can never be separated.  ``stage`` is the
    coarser region tag that merged blocks must not cross.
    """

    in_dim: int
    out_dim: int
    width: int
    fusion: int | None = None
    stage: int = 0

    @property
    def param_size(self) -> int:
        return self.in_dim * self.width + self.width + self.width * self.out_dim + self.out_dim

    @property
    def macs(self) -> int:
        return self.in_dim * self.width + self.width * self.out_dim


@dataclass(frozen=True)
class ChainSpec:
    input_dim: int
    n_classes: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("chain model has no layers")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer shape mismatch: {a.out_dim} -> {b.in_dim}")

    @property
    def feature_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def head_params(self) -> int:
        return self.input_dim * self.feature_dim + self.feature_dim

    @property
    def tail_params(self) -> int:
        return self.out_dim * self.n_classes + self.n_classes

    @property
    def param_size(self) -> int:
        return self.head_params + self.tail_params + sum(l.param_size for l in self.layers)


def uniform_chain(n_layers: int, dim: int = 16, widths: Sequence[int] | None = None,
                  input_dim: int = 8, n_classes: int = 4) -> ChainSpec:
    widths = list(widths) if widths is not None else [dim] * n_layers
    if len(widths) != n_layers:
        raise ValueError("need one width per layer")
    return ChainSpec(input_dim, n_classes, tuple(LayerSpec(dim, dim, w) for w in widths))


TOY_WIDTHS = (16, 24, 16, 32)


def toy_chain(n_layers: int = 10, dim: int = 16, input_dim: int = 8, n_classes: int = 16) -> ChainSpec:
    """The default toy model: constant feature dim, hidden widths cycling through TOY_WIDTHS."""
    return uniform_chain(n_layers, dim, [TOY_WIDTHS[k % len(TOY_WIDTHS)] for k in range(n_layers)],
                         input_dim, n_classes)


@dataclass(frozen=True)
class BlockPosition:
    index: int
    in_dim: int
    out_dim: int
    param_size: int
    fusion_group: int
    layers: tuple[LayerSpec, ...]
    layer_start: int

    @property
    def width(self) -> int:
        return max(l.width for l in self.layers)

    @property
    def layer_stop(self) -> int:
        return self.layer_start + len(self.layers)


@dataclass(frozen=True)
class BlockVariant:
    start: int
    j: int
    layers: tuple[LayerSpec, ...]

    @property
    def key(self) -> VariantKey:
        return (self.start, self.j)

    @property
    def span(self) -> int:
        return self.j + 1 if self.j > 0 else 1

    @property
    def stop(self) -> int:
        return self.start + self.span

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def width(self) -> int:
        return max(l.width for l in self.layers)

    @property
    def param_size(self) -> int:
        return sum(l.param_size for l in self.layers)

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.layers)


def key_str(key: VariantKey) -> str:
    return f"{key[0]}:{key[1]}"


def parse_key(text: str) -> VariantKey:
    s, j = text.strip().split(":")
    return int(s), int(j)


@dataclass(frozen=True)
class SubnetEncoding:
    choices: tuple[VariantKey, ...]

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple((int(s), int(j)) for s, j in self.choices))

    @property
    def arch(self) -> str:
        return ",".join(key_str(c) for c in self.choices)

    @classmethod
    def from_arch(cls, arch: str) -> "SubnetEncoding":
        arch = arch.strip()
        if not arch:
            return cls(())
        return cls(tuple(parse_key(part) for part in arch.split(",")))

    def __len__(self):
        return len(self.choices)

    def __iter__(self):
        return iter(self.choices)

    def __str__(self):
        return self.arch


@dataclass(frozen=True, eq=False)
class SupernetGraph:
    positions: tuple[BlockPosition, ...]
    variants: dict[VariantKey, BlockVariant]
    input_dim: int
    n_classes: int
    gamma: float
    p0: int
    max_merge: int = 0
    shrink_rates: tuple[float, ...] = ()
    _by_start: dict[int, tuple[BlockVariant, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_start: dict[int, list[BlockVariant]] = {}
        for key in sorted(self.variants):
            by_start.setdefault(key[0], []).append(self.variants[key])
        object.__setattr__(self, "_by_start", {s: tuple(v) for s, v in by_start.items()})

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def feature_dim(self) -> int:
        return self.positions[0].in_dim

    def keys(self) -> list[VariantKey]:
        return sorted(self.variants)

    def starting_at(self, start: int) -> tuple[BlockVariant, ...]:
        return self._by_start.get(start, ())

    def all_original(self) -> SubnetEncoding:
        return SubnetEncoding(tuple((i, 0) for i in range(self.n)))

    def chain(self) -> ChainSpec:
        layers = tuple(l for p in self.positions for l in p.layers)
        return ChainSpec(self.input_dim, self.n_classes, layers)

    @cached_property
    def suffix_counts(self) -> list[int]:
        """``suffix_counts[i]`` is the number of ways to tile positions ``i..n-1``."""
        n = self.n
        c = [0] * (n + 1)
        c[n] = 1
        for i in range(n - 1, -1, -1):
            c[i] = sum(c[v.stop] for v in self.starting_at(i))
        return c


# -- partitioning ---------------------------------------------------------------

def partition_blocks(chain: ChainSpec | Sequence[LayerSpec], gamma: float = DEFAULT_GAMMA
                     ) -> list[BlockPosition]:
    """Split a chain into the smallest fusion-closed blocks and check the size cap.

    A plain layer list uses the layers' own parameter total as P0; a
    ``ChainSpec`` also counts its head and tail.
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if isinstance(chain, ChainSpec):
        layers, p0 = chain.layers, chain.param_size
    else:
        layers = tuple(chain)
        if not layers:
            raise ValueError("chain model has no layers")
        p0 = sum(l.param_size for l in layers)
    for a, b in zip(layers, layers[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError(f"layer shape mismatch: {a.out_dim} -> {b.in_dim}")

    groups: list[list[int]] = []
    for idx, layer in enumerate(layers):
        prev = layers[idx - 1] if idx else None
        if groups and layer.fusion is not None and prev is not None and prev.fusion == layer.fusion:
            groups[-1].append(idx)
        else:
            groups.append([idx])

    cap = gamma * p0
    blocks = []
    for pos, idxs in enumerate(groups):
        members = tuple(layers[i] for i in idxs)
        if len({l.stage for l in members}) > 1:
            raise ValueError(f"fused layers {idxs} span several stages")
        size = sum(l.param_size for l in members)
        if size > cap:
            raise GranularityError(
                f"granularity infeasible: layers {idxs[0]}..{idxs[-1]} hold {size} params "
                f"> gamma*P0 = {cap:g}")
        blocks.append(BlockPosition(pos, members[0].in_dim, members[-1].out_dim, size,
                                    members[0].stage, members, idxs[0]))
    return blocks


# -- expansion ------------------------------------------------------------------

def _merged_layers(segment: Sequence[BlockPosition]) -> tuple[LayerSpec, ...]:
    # mirror the largest replaced block, rewired to the segment boundary shapes
    largest = max(segment, key=lambda p: (p.param_size, -p.index))
    src = list(largest.layers)
    stage = segment[0].fusion_group
    out = []
    for k, layer in enumerate(src):
        in_dim = segment[0].in_dim if k == 0 else layer.in_dim
        out_dim = segment[-1].out_dim if k == len(src) - 1 else layer.out_dim
        out.append(LayerSpec(in_dim, out_dim, layer.width, None, stage))
    return tuple(out)


def _shrunk_layers(pos: BlockPosition, rate: float) -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec(l.in_dim, l.out_dim, max(1, math.ceil(rate * l.width)), None, l.stage)
                 for l in pos.layers)


def expand_graph(blocks: Sequence[BlockPosition], max_merge: int = 2,
                 shrink_rates: Sequence[float] = (), *, input_dim: int | None = None,
                 n_classes: int = 2, gamma: float = DEFAULT_GAMMA, p0: int | None = None
                 ) -> SupernetGraph:
    blocks = tuple(blocks)
    if not blocks:
        raise ValueError("cannot expand an empty block list")
    n = len(blocks)
    if not 0 <= max_merge < n:
        raise ValueError(f"max_merge must be in [0, {n - 1}], got {max_merge}")
    rates = tuple(float(r) for r in shrink_rates)
    if any(not 0 < r < 1 for r in rates):
        raise ValueError("shrink rates must lie strictly between 0 and 1")
    if any(a <= b for a, b in zip(rates, rates[1:])):
        raise ValueError("shrink rates must be strictly decreasing")
    for a, b in zip(blocks, blocks[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError(f"block shape mismatch at position {b.index}")

    variants: dict[VariantKey, BlockVariant] = {}
    for i, pos in enumerate(blocks):
        variants[(i, 0)] = BlockVariant(i, 0, pos.layers)
        for k, rate in enumerate(rates, start=1):
            variants[(i, -k)] = BlockVariant(i, -k, _shrunk_layers(pos, rate))
        for j in range(1, max_merge + 1):
            if i + j >= n:
                break
            segment = blocks[i:i + j + 1]
            if any(p.fusion_group != pos.fusion_group for p in segment):
                break
            variants[(i, j)] = BlockVariant(i, j, _merged_layers(segment))

    if p0 is None:
        p0 = sum(b.param_size for b in blocks)
    return SupernetGraph(blocks, variants, input_dim if input_dim is not None else blocks[0].in_dim,
                         n_classes, gamma, p0, max_merge, rates)


def elasticize(chain: ChainSpec, gamma: float = DEFAULT_GAMMA, max_merge: int = 2,
               shrink_rates: Sequence[float] = (0.5, 0.25)) -> SupernetGraph:
    blocks = partition_blocks(chain, gamma)
    max_merge = min(max_merge, len(blocks) - 1)
    return expand_graph(blocks, max_merge, shrink_rates, input_dim=chain.input_dim,
                        n_classes=chain.n_classes, gamma=gamma, p0=chain.param_size)


# -- subnet space ----------------------------------------------------------------

def count_subnets(graph: SupernetGraph) -> int:
    return graph.suffix_counts[0]


def enumerate_subnets(graph: SupernetGraph, limit: int | None = None) -> Iterator[SubnetEncoding]:
    """Yield every subnet in lexicographic (start, j) order."""
    emitted = 0
    stack: list[VariantKey] = []

    def walk(pos: int):
        nonlocal emitted
        if pos == graph.n:
            yield SubnetEncoding(tuple(stack))
            emitted += 1
            return
        for v in graph.starting_at(pos):
            if limit is not None and emitted >= limit:
                return
            stack.append(v.key)
            yield from walk(v.stop)
            stack.pop()

    yield from walk(0)


def validate_subnet(graph: SupernetGraph, enc: SubnetEncoding) -> str | None:
    """Return ``None`` when ``enc`` tiles the graph, else the first violation."""
    pos = 0
    for key in enc.choices:
        start, _ = key
        if start > pos:
            return f"gap at {pos}"
        if start < pos:
            return f"overlap at {start}"
        variant = graph.variants.get(key)
        if variant is None:
            return f"unknown variant {key_str(key)}"
        pos = variant.stop
    if pos < graph.n:
        return f"gap at {pos}"
    return None


def is_valid(graph: SupernetGraph, enc: SubnetEncoding) -> bool:
    return validate_subnet(graph, enc) is None


def sample_uniform_subnet(graph: SupernetGraph, rng_seed: int | random.Random) -> SubnetEncoding:
    """Draw a subnet uniformly over all tilings (suffix-count weighted walk)."""
    rng = as_random(rng_seed, "sample")
    counts = graph.suffix_counts
    pos, choices = 0, []
    while pos < graph.n:
        pick = rng.randrange(counts[pos])
        for v in graph.starting_at(pos):
            w = counts[v.stop]
            if pick < w:
                choices.append(v.key)
                pos = v.stop
                break
            pick -= w
    return SubnetEncoding(tuple(choices))


def new_blocks(enc: SubnetEncoding) -> list[VariantKey]:
    return [c for c in enc.choices if c[1] != 0]
