"""Cloud-side elastification: pretrain, branch-wise distillation, whole-model tuning."""
from __future__ import annotations

import hashlib
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .engine import (
    BottleneckBlockParams,
    Linear,
    ToyClassifier,
    cross_entropy_loss,
    distillation_loss,
    embed,
    relu,
    sgd_step,
    variant_backward,
    variant_forward,
)
from .graph import (
    BlockVariant,
    ChainSpec,
    SubnetEncoding,
    SupernetGraph,
    VariantKey,
    new_blocks,
    sample_uniform_subnet,
    toy_chain,
)
from .rng import np_stream, py_stream

log = logging.getLogger(__name__)

BRANCH_INIT_SCALE = 0.05


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    distill_epochs: int = 30
    tune_epochs: int = 30
    lr_distill: float = 0.01
    lr_tune: float = 0.001
    batch_size: int = 32
    eval_subnet_samples: int = 40
    latency_bins: list[tuple[float, float]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.distill_epochs < 0 or self.tune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr_distill <= 0 or self.lr_tune <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_tune >= self.lr_distill:
            raise ValueError("tuning learning rate must be below the distillation rate")
        bins = [tuple(map(float, b)) for b in self.latency_bins]
        for lo, hi in bins:
            if not lo < hi:
                raise ValueError(f"empty latency bin ({lo}, {hi})")
        for (_, hi), (lo, _) in zip(bins, bins[1:]):
            if lo < hi:
                raise ValueError("latency bins must be ascending and non-overlapping")
        self.latency_bins = bins


@dataclass
class SupernetWeights:
    """Frozen original blocks plus trainable branches.

    The original blocks, head and tail are read-only numpy arrays; any attempt to
    update them in place raises.
    """

    head: Linear
    tail: Linear
    original: dict[VariantKey, tuple[BottleneckBlockParams, ...]]
    branches: dict[VariantKey, list[BottleneckBlockParams]]

    def block(self, key: VariantKey):
        if key[1] == 0:
            return self.original[key]
        return self.branches[key]

    def keys(self) -> list[VariantKey]:
        return sorted([*self.original, *self.branches])

    def copy(self) -> "SupernetWeights":
        return SupernetWeights(self.head, self.tail, self.original,
                               {k: [p.copy() for p in v] for k, v in self.branches.items()})


def _prune_init(variant: BlockVariant, originals: Sequence[BottleneckBlockParams]
                ) -> list[BottleneckBlockParams]:
    out = []
    for spec, src in zip(variant.layers, originals):
        importance = np.abs(src.W1).sum(axis=0) * np.abs(src.W2).sum(axis=1)
        keep = np.sort(np.argsort(-importance, kind="stable")[:spec.width])
        out.append(BottleneckBlockParams(src.W1[:, keep].copy(), src.b1[keep].copy(),
                                         src.W2[keep, :].copy(), src.b2.copy(), src.linear_out))
    return out


def init_supernet_weights(model: ToyClassifier, graph: SupernetGraph, seed: int = 0,
                          init: str = "random") -> SupernetWeights:
    """Wrap a pretrained model; ``init`` is ``"random"`` (uniform ±0.05) or ``"prune"``.

    ``"prune"`` keeps the most important hidden units of the original block for
    shrunk variants and falls back to random for merged ones.
    """
    if [l.width for l in model.chain.layers] != [l.width for p in graph.positions for l in p.layers]:
        raise ValueError("pretrained model does not match the supernet graph")
    original = {}
    for pos in graph.positions:
        original[(pos.index, 0)] = tuple(model.layers[i].copy().freeze()
                                         for i in range(pos.layer_start, pos.layer_stop))
    rng = np_stream(seed, "init")
    branches = {}
    for key in graph.keys():
        if key[1] == 0:
            continue
        variant = graph.variants[key]
        if init == "prune" and key[1] < 0:
            branches[key] = _prune_init(variant, original[(key[0], 0)])
        elif init in ("random", "prune"):
            branches[key] = [BottleneckBlockParams.init(spec, rng, BRANCH_INIT_SCALE)
                             for spec in variant.layers]
        else:
            raise ValueError(f"unknown branch init {init!r}")
    return SupernetWeights(model.head.copy().freeze(), model.tail.copy().freeze(), original, branches)


def original_params_hash(weights: SupernetWeights) -> str:
    h = hashlib.sha256()
    for arr in (weights.head.W, weights.head.b, weights.tail.W, weights.tail.b):
        h.update(np.ascontiguousarray(arr).tobytes())
    for key in sorted(weights.original):
        for p in weights.original[key]:
            for arr in p.arrays().values():
                h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def branch_params_hash(weights: SupernetWeights) -> str:
    h = hashlib.sha256()
    for key in sorted(weights.branches):
        for p in weights.branches[key]:
            for arr in p.arrays().values():
                h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- pretraining ----------------------------------------------------------------

def _model_step(model: ToyClassifier, batch: Dataset, lr: float) -> float:
    h0 = model.head.forward(batch.X)
    x = relu(h0)
    grads_layers, inputs = [], []
    for p in model.layers:
        inputs.append(x)
        x = variant_forward([p], x)
    logits = model.tail.forward(x)
    loss, g = cross_entropy_loss(logits, batch.y)
    tail_grads = {"W": x.T @ g, "b": g.sum(axis=0)}
    g = g @ model.tail.W.T
    for p, inp in zip(reversed(model.layers), reversed(inputs)):
        layer_grads, g = variant_backward([p], inp, g)
        grads_layers.append((p, layer_grads[0]))
    g = g * (h0 > 0)
    head_grads = {"W": batch.X.T @ g, "b": g.sum(axis=0)}
    sgd_step(model.tail, tail_grads, lr)
    sgd_step(model.head, head_grads, lr)
    for p, grads in grads_layers:
        sgd_step(p, grads, lr)
    return loss


def pretrain_toy(dataset: Dataset, epochs: int = 20, lr: float = 0.05, seed: int = 0,
                 chain: ChainSpec | None = None, batch_size: int = 32) -> ToyClassifier:
    if len(dataset) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    if chain is None:
        chain = toy_chain(10, input_dim=dataset.dim, n_classes=dataset.n_classes)
    if chain.input_dim != dataset.dim or chain.n_classes < dataset.n_classes:
        raise ValueError("chain does not match the dataset")
    model = ToyClassifier.init(chain, np_stream(seed, "pretrain-init"))
    order_rng = np_stream(seed, "pretrain-order")
    for epoch in range(epochs):
        for batch in dataset.batches(batch_size, order_rng):
            loss = _model_step(model, batch, lr)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss in pretraining epoch {epoch}")
    return model


# -- supernet training ------------------------------------------------------------

def _sample_with_new_blocks(graph: SupernetGraph, rng: random.Random) -> SubnetEncoding:
    enc = sample_uniform_subnet(graph, rng)
    if not new_blocks(enc):
        enc = sample_uniform_subnet(graph, rng)
    return enc


def teacher_boundaries(weights: SupernetWeights, graph: SupernetGraph, x: np.ndarray
                       ) -> list[np.ndarray]:
    """Features at every position boundary of the all-original path (index 0 = head output)."""
    feats = [embed(weights, x)]
    for pos in graph.positions:
        feats.append(variant_forward(weights.original[(pos.index, 0)], feats[-1]))
    return feats


def distill_step(weights: SupernetWeights, graph: SupernetGraph, batch: Dataset,
                 rng: random.Random, lr: float, enc: SubnetEncoding | None = None) -> float | None:
    """One branch-wise distillation step; returns the per-example loss or None for a no-op."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if enc is None:
        enc = _sample_with_new_blocks(graph, rng)
    added = new_blocks(enc)
    if not added:
        return None
    feats = teacher_boundaries(weights, graph, batch.X)
    teachers, students, inputs = [], [], []
    for key in added:
        stop = graph.variants[key].stop
        inputs.append(feats[key[0]])
        students.append(variant_forward(weights.branches[key], feats[key[0]]))
        teachers.append(feats[stop])
    loss, grads = distillation_loss(teachers, students)
    n = len(batch)
    for key, x, g in zip(added, inputs, grads):
        layer_grads, _ = variant_backward(weights.branches[key], x, g / n)
        for p, lg in zip(weights.branches[key], layer_grads):
            sgd_step(p, lg, lr)
    return loss / n


def tune_step(weights: SupernetWeights, graph: SupernetGraph, batch: Dataset,
              rng: random.Random, lr: float, enc: SubnetEncoding | None = None) -> float:
    """Cross-entropy step through the sampled path; only added blocks are updated.

    Gradients pass through frozen original blocks so that earlier branches still
    receive signal.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if enc is None:
        enc = _sample_with_new_blocks(graph, rng)
    x = embed(weights, batch.X)
    inputs = []
    for key in enc.choices:
        inputs.append(x)
        x = variant_forward(weights.block(key), x)
    loss, g = cross_entropy_loss(weights.tail.forward(x), batch.y)
    positions = [k for k, key in enumerate(enc.choices) if key[1] != 0]
    if not positions:
        return loss
    g = g @ weights.tail.W.T
    updates = []
    for k in range(len(enc.choices) - 1, positions[0] - 1, -1):
        key = enc.choices[k]
        layers = weights.block(key)
        layer_grads, g = variant_backward(layers, inputs[k], g)
        if key[1] != 0:
            updates.append((layers, layer_grads))
    for layers, layer_grads in updates:
        for p, lg in zip(layers, layer_grads):
            sgd_step(p, lg, lr)
    return loss


@dataclass
class BinAccuracy:
    low: float
    high: float
    mean_accuracy: float
    count: int


def latency_range_accuracy(weights: SupernetWeights, graph: SupernetGraph, latency_table,
                           bins: Sequence[tuple[float, float]], sample_count: int,
                           eval_data: Dataset, seed: int = 0,
                           subnets: Sequence[SubnetEncoding] | None = None) -> list[BinAccuracy]:
    """Mean accuracy of uniformly sampled subnets, bucketed by table latency.

    Bins are half-open ``[low, high)``; bins nobody lands in are omitted.  Pass
    ``subnets`` to reuse a fixed sample set across evaluations.
    """
    from .evalcache import group_evaluate
    from .latsim import subnet_latency

    if subnets is None:
        if sample_count < 1:
            raise ValueError("sample_count must be at least 1")
        rng = py_stream(seed, "lra")
        subnets = [sample_uniform_subnet(graph, rng) for _ in range(sample_count)]
    distinct = list(dict.fromkeys(subnets))
    report = group_evaluate(distinct, eval_data, weights, latency_table, depth_cap=4)
    acc = dict(zip(distinct, report.accuracies))
    out = []
    for lo, hi in bins:
        members = [acc[e] for e in subnets if lo <= subnet_latency(latency_table, e) < hi]
        if members:
            out.append(BinAccuracy(lo, hi, math.fsum(members) / len(members), len(members)))
    return out


def default_bins(graph: SupernetGraph, latency_table, n_bins: int = 5) -> list[tuple[float, float]]:
    from .latsim import subnet_latency

    full = subnet_latency(latency_table, graph.all_original())
    lo = min(latency_table.entries.values())
    edges = np.linspace(0.0, full, n_bins + 1)
    edges[0] = min(edges[0], lo)
    edges[-1] = full * (1 + 1e-9)
    return [(float(a), float(b)) for a, b in zip(edges, edges[1:])]


@dataclass
class TrainRecord:
    epoch: int
    phase: str
    loss: float
    bins: list[BinAccuracy]


def train_supernet(pretrained: ToyClassifier, graph: SupernetGraph, config: TrainConfig,
                   dataset: Dataset, eval_data: Dataset | None = None, latency_table=None,
                   weights: SupernetWeights | None = None, init: str = "random"
                   ) -> tuple[SupernetWeights, list[TrainRecord]]:
    """Distillation epochs followed by tuning epochs, reporting latency-range accuracy.

    Every epoch visits the data once in shuffled mini-batches, sampling one
    subnet per step.
    """
    from .latsim import mac_latency_table

    if weights is None:
        weights = init_supernet_weights(pretrained, graph, config.seed, init)
    table = latency_table if latency_table is not None else mac_latency_table(graph)
    bins = config.latency_bins or default_bins(graph, table)
    eval_subnets = None
    if eval_data is not None and config.eval_subnet_samples > 0:
        rng = py_stream(config.seed, "eval-subnets")
        eval_subnets = [sample_uniform_subnet(graph, rng) for _ in range(config.eval_subnet_samples)]
    frozen = original_params_hash(weights)

    order_rng = np_stream(config.seed, "order")
    sample_rng = py_stream(config.seed, "subnets")
    report: list[TrainRecord] = []
    schedule = [("distill", e) for e in range(config.distill_epochs)] + \
               [("tune", e) for e in range(config.tune_epochs)]
    for epoch, (phase, _) in enumerate(schedule):
        losses = []
        for batch in dataset.batches(config.batch_size, order_rng):
            if phase == "distill":
                loss = distill_step(weights, graph, batch, sample_rng, config.lr_distill)
            else:
                loss = tune_step(weights, graph, batch, sample_rng, config.lr_tune)
            if loss is None:
                continue
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite {phase} loss in epoch {epoch}")
            losses.append(loss)
        mean_loss = math.fsum(losses) / len(losses) if losses else float("nan")
        bin_acc = []
        if eval_subnets is not None:
            bin_acc = latency_range_accuracy(weights, graph, table, bins, 0, eval_data,
                                             subnets=eval_subnets)
        report.append(TrainRecord(epoch, phase, mean_loss, bin_acc))
        log.debug("epoch %d %s loss %.5f", epoch, phase, mean_loss)
    if original_params_hash(weights) != frozen:
        raise AssertionError("original blocks changed during supernet training")
    return weights, report


def mean_subnet_accuracy(weights: SupernetWeights, graph: SupernetGraph, data: Dataset,
                         subnets: Sequence[SubnetEncoding]) -> float:
    from .evalcache import group_evaluate
    from .latsim import mac_latency_table

    report = group_evaluate(list(dict.fromkeys(subnets)), data, weights, mac_latency_table(graph),
                            depth_cap=4)
    acc = dict(zip(dict.fromkeys(subnets), report.accuracies))
    return math.fsum(acc[s] for s in subnets) / len(subnets)
