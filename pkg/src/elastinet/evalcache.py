"""Prefix-tree scheduling of candidate evaluation with cached intermediate features.

Candidates that begin with the same run of blocks share the head computation:
the tree's internal nodes are shared prefixes whose output feature is computed
once per data batch and released as soon as its subtree has been evaluated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .engine import BlockSource, embed, forward_choices, subnet_forward
from .graph import SubnetEncoding, VariantKey

DEFAULT_DEPTH_CAP = 8
DEFAULT_BATCH = 256


@dataclass
class PrefixNode:
    prefix: tuple[VariantKey, ...]
    latency: float = 0.0
    importance: float = 0.0
    children: list["PrefixNode"] = field(default_factory=list)
    candidate: int | None = None  # index into the candidate list for leaves

    @property
    def is_leaf(self) -> bool:
        return self.candidate is not None

    def internal_nodes(self) -> list["PrefixNode"]:
        out = []
        for c in self.children:
            if not c.is_leaf:
                out.append(c)
                out.extend(c.internal_nodes())
        return out

    def leaves(self) -> list["PrefixNode"]:
        if self.is_leaf:
            return [self]
        return [leaf for c in self.children for leaf in c.leaves()]

    def depth(self) -> int:
        """Largest number of internal nodes on a root-to-leaf path (root excluded)."""
        inner = [c.depth() + 1 for c in self.children if not c.is_leaf]
        return max(inner, default=0)


@dataclass
class EvalReport:
    accuracies: list[float]
    block_forward_count: int = 0
    naive_forward_count: int = 0
    peak_cached_features: int = 0
    batches_loaded: int = 0

    @property
    def saving(self) -> float:
        if not self.naive_forward_count:
            return 0.0
        return 1.0 - self.block_forward_count / self.naive_forward_count


def _prefix_latency(table, prefix: Sequence[VariantKey]) -> float:
    total = 0.0
    for key in prefix:
        total += table[key]
    return total


def build_tree(candidates: Sequence[SubnetEncoding], table, depth_cap: int = DEFAULT_DEPTH_CAP
               ) -> PrefixNode:
    """Arrange candidates under their shared prefixes.

    Only branching prefixes become nodes (a prefix whose candidates all continue
    identically is subsumed by its longer extension).  Importance is prefix
    latency times the fraction of candidates sharing it; while some root-to-leaf
    path holds more than ``depth_cap`` internal nodes, the least important node
    on such a path is dissolved into its parent.  Prefixes of one candidate are
    always nested, so each candidate hangs under exactly one deepest survivor.
    """
    if depth_cap < 0:
        raise ValueError("depth_cap must be non-negative")
    seqs = [tuple(c.choices) for c in candidates]
    if len(set(seqs)) != len(seqs):
        raise ValueError("candidates must be deduplicated")
    total = len(seqs)

    members: dict[tuple, list[int]] = {}
    for idx, seq in enumerate(seqs):
        for k in range(1, len(seq)):
            members.setdefault(seq[:k], []).append(idx)
    kept: dict[tuple, float] = {}
    for prefix, idxs in members.items():
        if len(idxs) < 2:
            continue
        nexts = {seqs[i][len(prefix)] for i in idxs}
        if len(nexts) >= 2:
            kept[prefix] = _prefix_latency(table, prefix) * len(idxs) / total

    def chain_of(seq: tuple) -> list[tuple]:
        return [seq[:k] for k in range(1, len(seq)) if seq[:k] in kept]

    while True:
        over = set()
        for seq in seqs:
            chain = chain_of(seq)
            if len(chain) > depth_cap:
                over.update(chain)
        if not over:
            break
        victim = min(over, key=lambda p: (kept[p], -len(p), p))
        del kept[victim]

    nodes = {(): PrefixNode(())}
    for prefix in sorted(kept, key=lambda p: (len(p), p)):
        node = PrefixNode(prefix, _prefix_latency(table, prefix), kept[prefix])
        nodes[prefix] = node
        parent = max((p for p in nodes if len(p) < len(prefix) and prefix[:len(p)] == p), key=len)
        nodes[parent].children.append(node)
    for idx, seq in enumerate(seqs):
        chain = chain_of(seq)
        parent = nodes[chain[-1]] if chain else nodes[()]
        parent.children.append(PrefixNode(seq, _prefix_latency(table, seq), 0.0, candidate=idx))
    for node in nodes.values():
        node.children.sort(key=lambda c: c.prefix)
    return nodes[()]


@dataclass
class _BatchResult:
    correct: dict[int, int]
    forwards: int
    naive: int
    peak: int


def _dfs_batch(root: PrefixNode, batch: Dataset, weights: BlockSource, depth_cap: int | None
               ) -> _BatchResult:
    correct: dict[int, int] = {}
    state = {"forwards": 0, "cached": 0, "peak": 0}

    def visit(node: PrefixNode, feat: np.ndarray):
        for child in node.children:
            segment = child.prefix[len(node.prefix):]
            h = forward_choices(weights, segment, feat)
            state["forwards"] += len(segment)
            if child.is_leaf:
                pred = np.argmax(weights.tail.forward(h), axis=1)
                correct[child.candidate] = int(np.count_nonzero(pred == batch.y))
                continue
            state["cached"] += 1
            state["peak"] = max(state["peak"], state["cached"])
            if depth_cap is not None and state["cached"] > depth_cap:
                raise AssertionError("feature cache exceeded the depth cap")
            visit(child, h)
            del h
            state["cached"] -= 1

    visit(root, embed(weights, batch.X))
    naive = sum(len(leaf.prefix) for leaf in root.leaves())
    return _BatchResult(correct, state["forwards"], naive, state["peak"])


def dfs_evaluate(root: PrefixNode, batch: Dataset, weights: BlockSource,
                 depth_cap: int | None = None) -> EvalReport:
    """Evaluate every leaf of ``root`` on one batch in depth-first order."""
    if len(batch) == 0:
        raise ValueError("empty evaluation batch")
    res = _dfs_batch(root, batch, weights, depth_cap)
    n_cand = len(res.correct)
    acc = [res.correct[i] / len(batch) for i in range(n_cand)]
    return EvalReport(acc, res.forwards, res.naive, res.peak, 1)


def group_evaluate(candidates: Sequence[SubnetEncoding], eval_data: Dataset, weights: BlockSource,
                   table, depth_cap: int = DEFAULT_DEPTH_CAP, batch_size: int = DEFAULT_BATCH
                   ) -> EvalReport:
    """Load each batch once and run every candidate on it through the prefix tree."""
    if not candidates:
        raise ValueError("no candidates to evaluate")
    if len(eval_data) == 0:
        raise ValueError("empty evaluation data")
    root = build_tree(candidates, table, depth_cap)
    totals = [0] * len(candidates)
    report = EvalReport([])
    for batch in eval_data.batches(batch_size):
        res = _dfs_batch(root, batch, weights, depth_cap)
        for i, c in res.correct.items():
            totals[i] += c
        report.block_forward_count += res.forwards
        report.naive_forward_count += res.naive
        report.peak_cached_features = max(report.peak_cached_features, res.peak)
        report.batches_loaded += 1
    report.accuracies = [t / len(eval_data) for t in totals]
    return report


def naive_evaluate(candidates: Sequence[SubnetEncoding], eval_data: Dataset, weights: BlockSource,
                   batch_size: int = DEFAULT_BATCH) -> EvalReport:
    """Reference path: every candidate forwarded independently from the input."""
    totals = [0] * len(candidates)
    forwards = 0
    for batch in eval_data.batches(batch_size):
        for i, enc in enumerate(candidates):
            pred = np.argmax(subnet_forward(weights, enc, batch.X), axis=1)
            totals[i] += int(np.count_nonzero(pred == batch.y))
            forwards += len(enc)
    return EvalReport([t / len(eval_data) for t in totals], forwards, forwards, 0,
                      -(-len(eval_data) // batch_size))


class GroupEvaluator:
    """Callable accuracy oracle for search: ``evaluator(encodings) -> accuracies``."""

    def __init__(self, weights: BlockSource, data: Dataset, table, depth_cap: int = DEFAULT_DEPTH_CAP,
                 batch_size: int = DEFAULT_BATCH):
        self.weights = weights
        self.data = data
        self.table = table
        self.depth_cap = depth_cap
        self.batch_size = batch_size
        self.reports: list[EvalReport] = []

    def __call__(self, encs: Sequence[SubnetEncoding]) -> list[float]:
        if not encs:
            return []
        report = group_evaluate(encs, self.data, self.weights, self.table, self.depth_cap,
                                self.batch_size)
        self.reports.append(report)
        return report.accuracies

    @property
    def evaluated(self) -> int:
        return sum(len(r.accuracies) for r in self.reports)

    @property
    def block_forwards(self) -> int:
        return sum(r.block_forward_count for r in self.reports)

    @property
    def naive_forwards(self) -> int:
        return sum(r.naive_forward_count for r in self.reports)
