"""Minimal float64 dense engine: bottleneck blocks, losses, SGD, subnet forward."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .graph import ChainSpec, LayerSpec, SubnetEncoding, VariantKey

PARAM_NAMES = ("W1", "b1", "W2", "b2")


class ShapeError(ValueError):
    pass


class MissingBlockError(KeyError):
    pass


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


@dataclass
class BottleneckBlockParams:
    """``y = relu(relu(x @ W1 + b1) @ W2 + b2)``; ``linear_out`` drops the outer relu."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    linear_out: bool = False

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def width(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "BottleneckBlockParams":
        return BottleneckBlockParams(*(a.copy() for a in self.arrays().values()), self.linear_out)

    def freeze(self) -> "BottleneckBlockParams":
        for a in self.arrays().values():
            a.flags.writeable = False
        return self

    @classmethod
    def init(cls, spec: LayerSpec, rng: np.random.Generator, scale: float | None = None,
             noise: float = 0.3) -> "BottleneckBlockParams":
        """Identity-plus-noise weights, or uniform ``±scale`` for everything.

        On non-negative inputs the noise-free block is the identity whenever
        ``width >= min(in_dim, out_dim)``, which keeps a deep rectified chain
        trainable with plain SGD.
        """
        if scale is None:
            W1 = np.eye(spec.in_dim, spec.width) + rng.normal(0.0, noise / np.sqrt(spec.in_dim),
                                                              (spec.in_dim, spec.width))
            W2 = np.eye(spec.width, spec.out_dim) + rng.normal(0.0, noise / np.sqrt(spec.width),
                                                               (spec.width, spec.out_dim))
            return cls(W1, np.zeros(spec.width), W2, np.zeros(spec.out_dim))
        return cls(rng.uniform(-scale, scale, (spec.in_dim, spec.width)),
                   rng.uniform(-scale, scale, spec.width),
                   rng.uniform(-scale, scale, (spec.width, spec.out_dim)),
                   rng.uniform(-scale, scale, spec.out_dim))


@dataclass
class Linear:
    W: np.ndarray
    b: np.ndarray

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W + self.b

    def copy(self) -> "Linear":
        return Linear(self.W.copy(), self.b.copy())

    def freeze(self) -> "Linear":
        self.W.flags.writeable = False
        self.b.flags.writeable = False
        return self


def _check_input(params: BottleneckBlockParams, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"block expects (batch, {params.in_dim}) input, got {x.shape}")


def block_forward(params: BottleneckBlockParams, x: np.ndarray) -> np.ndarray:
    _check_input(params, x)
    h = relu(x @ params.W1 + params.b1)
    z = h @ params.W2 + params.b2
    return z if params.linear_out else relu(z)


def block_backward(params: BottleneckBlockParams, x: np.ndarray, upstream: np.ndarray
                   ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    _check_input(params, x)
    z1 = x @ params.W1 + params.b1
    h = relu(z1)
    z2 = h @ params.W2 + params.b2
    if upstream.shape != z2.shape:
        raise ShapeError(f"upstream grad {upstream.shape} != block output {z2.shape}")
    dz2 = upstream if params.linear_out else upstream * (z2 > 0)
    dW2 = h.T @ dz2
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ params.W2.T) * (z1 > 0)
    dW1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    dx = dz1 @ params.W1.T
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}, dx


def variant_forward(layers: Sequence[BottleneckBlockParams], x: np.ndarray) -> np.ndarray:
    for p in layers:
        x = block_forward(p, x)
    return x


def variant_backward(layers: Sequence[BottleneckBlockParams], x: np.ndarray, upstream: np.ndarray
                     ) -> tuple[list[dict[str, np.ndarray]], np.ndarray]:
    inputs = []
    for p in layers:
        inputs.append(x)
        x = block_forward(p, x)
    grads: list[dict[str, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    g = upstream
    for k in range(len(layers) - 1, -1, -1):
        grads[k], g = block_backward(layers[k], inputs[k], g)
    return grads, g


def distillation_loss(teacher_feats: Sequence[np.ndarray], student_feats: Sequence[np.ndarray]
                      ) -> tuple[float, list[np.ndarray]]:
    """Mean over pairs of the squared L2 distance, with gradients w.r.t. the students."""
    m = len(teacher_feats)
    if m == 0:
        raise ValueError("distillation needs at least one feature pair")
    if len(student_feats) != m:
        raise ShapeError("teacher and student lists differ in length")
    total = 0.0
    grads = []
    for t, s in zip(teacher_feats, student_feats):
        t = np.asarray(t, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        if t.shape != s.shape:
            raise ShapeError(f"feature shapes differ: {t.shape} vs {s.shape}")
        diff = s - t
        total += float(np.sum(diff * diff))
        grads.append((2.0 / m) * diff)
    return total / m, grads


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("cross entropy of an empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def sgd_step(params, grads: dict[str, np.ndarray], lr: float):
    """In-place ``p -= lr * g`` for every name in ``grads``; ``params`` may be a dict or object."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        p = params[name] if isinstance(params, dict) else getattr(params, name)
        p -= lr * g
    return params


@dataclass
class ToyClassifier:
    chain: ChainSpec
    head: Linear
    layers: list[BottleneckBlockParams]
    tail: Linear

    @classmethod
    def init(cls, chain: ChainSpec, rng: np.random.Generator) -> "ToyClassifier":
        head = Linear(rng.normal(0.0, np.sqrt(2.0 / chain.input_dim), (chain.input_dim, chain.feature_dim)),
                      np.zeros(chain.feature_dim))
        layers = [BottleneckBlockParams.init(spec, rng) for spec in chain.layers]
        tail = Linear(rng.normal(0.0, np.sqrt(1.0 / chain.out_dim), (chain.out_dim, chain.n_classes)),
                      np.zeros(chain.n_classes))
        return cls(chain, head, layers, tail)

    def embed(self, x: np.ndarray) -> np.ndarray:
        return relu(self.head.forward(x))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.tail.forward(variant_forward(self.layers, self.embed(x)))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    def copy(self) -> "ToyClassifier":
        return ToyClassifier(self.chain, self.head.copy(), [p.copy() for p in self.layers], self.tail.copy())


class BlockSource(Protocol):
    head: Linear
    tail: Linear

    def block(self, key: VariantKey) -> Sequence[BottleneckBlockParams]: ...


def embed(weights: BlockSource, x: np.ndarray) -> np.ndarray:
    return relu(weights.head.forward(x))


def forward_choices(weights: BlockSource, choices: Sequence[VariantKey], h: np.ndarray,
                    features: list | None = None) -> np.ndarray:
    for key in choices:
        h = variant_forward(weights.block(key), h)
        if features is not None:
            features.append(h)
    return h


def subnet_forward(weights: BlockSource, enc: SubnetEncoding, x: np.ndarray,
                   return_features: bool = False):
    """Logits of the subnet ``enc``; optionally also the feature after each chosen block."""
    feats: list[np.ndarray] | None = [] if return_features else None
    h = forward_choices(weights, enc.choices, embed(weights, x), feats)
    logits = weights.tail.forward(h)
    return (logits, feats) if return_features else logits


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.count_nonzero(np.argmax(logits, axis=1) == labels)) / len(labels)
