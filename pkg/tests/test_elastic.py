import numpy as np
import pytest

from elastinet.data import Dataset
from elastinet.elastic import (
    TrainConfig,
    branch_params_hash,
    distill_step,
    init_supernet_weights,
    latency_range_accuracy,
    original_params_hash,
    pretrain_toy,
    teacher_boundaries,
    train_supernet,
    tune_step,
)
from elastinet.engine import ToyClassifier, variant_forward
from elastinet.graph import SubnetEncoding, elasticize, toy_chain
from elastinet.latsim import mac_latency_table, subnet_latency
from elastinet.rng import np_stream, py_stream
from toys import toy_data


@pytest.fixture(scope="module")
def pretrained():
    data = toy_data(100)
    chain = toy_chain(4, 16, 8, 16)
    return pretrain_toy(data, epochs=3, seed=0, chain=chain), elasticize(chain, 1.0, 2, (0.5, 0.25)), data


def snapshot(weights):
    return {k: [{n: a.copy() for n, a in p.arrays().items()} for p in v] for k, v in weights.branches.items()}


def changed_keys(before, weights):
    out = set()
    for k, layers in weights.branches.items():
        for old, p in zip(before[k], layers):
            if any(not np.array_equal(old[n], a) for n, a in p.arrays().items()):
                out.add(k)
    return out


def test_distill_updates_only_added_branches(pretrained):
    model, graph, data = pretrained
    w = init_supernet_weights(model, graph)
    before, frozen = snapshot(w), original_params_hash(w)
    enc = SubnetEncoding.from_arch("0:-1,1:1,3:0")
    loss = distill_step(w, graph, data.subset(np.arange(32)), py_stream(0, "s"), 0.01, enc)
    assert loss > 0
    assert changed_keys(before, w) == {(0, -1), (1, 1)}
    assert original_params_hash(w) == frozen
    assert distill_step(w, graph, data.subset(np.arange(4)), py_stream(0, "s"), 0.01,
                        graph.all_original()) is None


def test_tune_updates_only_added_branches(pretrained):
    model, graph, data = pretrained
    w = init_supernet_weights(model, graph)
    before, frozen = snapshot(w), original_params_hash(w)
    enc = SubnetEncoding.from_arch("0:0,1:-2,2:0,3:-1")
    tune_step(w, graph, data.subset(np.arange(32)), py_stream(0, "s"), 0.001, enc)
    assert changed_keys(before, w) == {(1, -2), (3, -1)}
    assert original_params_hash(w) == frozen


def test_originals_are_read_only(pretrained):
    model, graph, _ = pretrained
    w = init_supernet_weights(model, graph)
    with pytest.raises(ValueError):
        w.original[(0, 0)][0].W1[0, 0] = 1.0
    with pytest.raises(ValueError):
        w.head.W[0, 0] = 1.0


def test_teacher_boundaries_follow_original_path(pretrained):
    model, graph, data = pretrained
    w = init_supernet_weights(model, graph)
    feats = teacher_boundaries(w, graph, data.X[:5])
    assert len(feats) == graph.n + 1
    np.testing.assert_array_equal(model.forward(data.X[:5]), w.tail.forward(feats[-1]))
    np.testing.assert_array_equal(feats[2], variant_forward(w.original[(1, 0)], feats[1]))


def test_prune_init_keeps_important_units(pretrained):
    model, graph, _ = pretrained
    w = init_supernet_weights(model, graph, init="prune")
    src = w.original[(0, 0)][0]
    shrunk = w.branches[(0, -1)][0]
    assert shrunk.width == 8
    importance = np.abs(src.W1).sum(axis=0) * np.abs(src.W2).sum(axis=1)
    kept = [int(np.flatnonzero((src.W1 == shrunk.W1[:, [j]]).all(axis=0))[0]) for j in range(8)]
    assert set(kept) == set(np.argsort(-importance, kind="stable")[:8])
    with pytest.raises(ValueError):
        init_supernet_weights(model, graph, init="zeros")


def test_random_init_is_seeded(pretrained):
    model, graph, _ = pretrained
    a = init_supernet_weights(model, graph, seed=3)
    b = init_supernet_weights(model, graph, seed=3)
    c = init_supernet_weights(model, graph, seed=4)
    assert branch_params_hash(a) == branch_params_hash(b) != branch_params_hash(c)


def test_mismatched_model_rejected(pretrained):
    _, graph, _ = pretrained
    other = ToyClassifier.init(toy_chain(5, 16, 8, 16), np_stream(0, "m"))
    with pytest.raises(ValueError):
        init_supernet_weights(other, graph)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_distill=0.01, lr_tune=0.01)
    with pytest.raises(ValueError):
        TrainConfig(distill_epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(latency_bins=[(0, 5), (4, 8)])
    with pytest.raises(ValueError):
        TrainConfig(latency_bins=[(3, 3)])
    assert TrainConfig(latency_bins=[[0, 5], [5, 8]]).latency_bins == [(0.0, 5.0), (5.0, 8.0)]


def test_bins_are_half_open_and_sparse(pretrained):
    model, graph, data = pretrained
    w = init_supernet_weights(model, graph)
    table = mac_latency_table(graph)
    enc = graph.all_original()
    full = subnet_latency(table, enc)
    bins = [(0.0, 1.0), (1.0, full), (full, full + 1)]
    out = latency_range_accuracy(w, graph, table, bins, 0, data, subnets=[enc, enc])
    assert [(b.low, b.count) for b in out] == [(full, 2)]
    with pytest.raises(ValueError):
        latency_range_accuracy(w, graph, table, bins, 0, data)


def test_training_reduces_distill_loss_and_reports(pretrained):
    model, graph, data = pretrained
    cfg = TrainConfig(distill_epochs=4, tune_epochs=1, eval_subnet_samples=20, seed=1)
    weights, report = train_supernet(model, graph, cfg, data, eval_data=toy_data(30, 5))
    assert [r.phase for r in report] == ["distill"] * 4 + ["tune"]
    assert report[-2].loss < report[0].loss
    assert all(sum(b.count for b in r.bins) == 20 for r in report)
    again, _ = train_supernet(model, graph, cfg, data)
    assert branch_params_hash(again) == branch_params_hash(weights)


def test_empty_batch_rejected(pretrained):
    model, graph, data = pretrained
    w = init_supernet_weights(model, graph)
    empty = Dataset(np.zeros((0, 8)), np.zeros(0, dtype=int), 16)
    with pytest.raises(ValueError):
        distill_step(w, graph, empty, py_stream(0, "s"), 0.01)
    with pytest.raises(ValueError):
        tune_step(w, graph, empty, py_stream(0, "s"), 0.001)
