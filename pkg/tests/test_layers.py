import math

import numpy as np
import pytest

from components.autograd import (MultAddCounter, Tensor, grad_check, scatter_rows, segment_max,
                                 segment_softmax)
from components.layers import (FeatureAlign, FusionMode, GRUCell, InterClusterAggregate, IntraClusterAggregate,
                               Linear, Mlp, ParamStore, VelocityHead, cluster_cross_attention, concat_fusion,
                               full_cross_attention, fusion_mult_adds, reciprocal_attention)
from servo_trainer.graph import build_graph
from servo_trainer.model import DepthPcModel, ModelConfig
from servo_trainer.observation import Keypoint, match_keypoints

TOLERANCE = 1e-4


def _tensor(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _graph(sizes, seed=0):
    rng = np.random.default_rng(seed)
    current, target = [], []
    pid = 0
    for cluster, size in enumerate(sizes):
        for _ in range(size):
            x, y, u, v = rng.uniform(-0.9, 0.9, size=4)
            current.append(Keypoint(pid, cluster, (float(x), float(y)), float(rng.uniform()), 1.0))
            target.append(Keypoint(pid, cluster, (float(u), float(v)), float(rng.uniform()), 1.0))
            pid += 1
    return build_graph(match_keypoints(current, target))


def _brute_force_attention(x_pos, x_z, scale):
    n, d = x_pos.shape
    score = [[scale * sum(x_pos[i, c] * x_z[j, c] for c in range(d)) for j in range(n)] for i in range(n)]
    depth = np.zeros((n, d))
    position = np.zeros((n, d))
    for i in range(n):
        row = [math.exp(s) for s in score[i]]
        total = sum(row)
        for j in range(n):
            depth[i] += row[j] / total * x_z[j]
    for j in range(n):
        col = [math.exp(score[i][j]) for i in range(n)]
        total = sum(col)
        for i in range(n):
            position[j] += col[i] / total * x_pos[i]
    return np.hstack([depth, position])


def test_param_store_names_and_init():
    store = ParamStore(seed=3)
    mlp = Mlp(store, "head", [4, 8, 3], last_init="zeros")
    assert [name for name, _ in store.items()] == ["head.0.weight", "head.0.bias", "head.1.weight", "head.1.bias"]
    assert np.all(store["head.1.weight"].data == 0)
    assert np.all(np.abs(store["head.0.weight"].data) <= 0.5)
    assert mlp(Tensor(np.ones((2, 4)))).data == pytest.approx(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        store.create("head.0.weight", (1,), 1)


def test_param_store_values_are_float32_exact():
    store = ParamStore(seed=4)
    t = store.create("w", (5, 5), 5)
    assert np.array_equal(t.data, t.data.astype(np.float32).astype(np.float64))


def test_param_store_rejects_mismatched_state():
    store = ParamStore()
    store.create("w", (2, 2), 2)
    with pytest.raises(ValueError):
        store.load_state_dict({"w": np.zeros((3, 2))})
    with pytest.raises(ValueError):
        store.load_state_dict({"v": np.zeros((2, 2))})


def test_grad_linear_mlp_and_alignment():
    rng = np.random.default_rng(0)
    store = ParamStore(seed=0)
    linear = Linear(store, "lin", 3, 4)
    mlp = Mlp(store, "mlp", [3, 5, 2], final_activation=True)
    align = FeatureAlign(store, "align", 2, 4)
    x = _tensor(rng, 6, 3)
    z = _tensor(rng, 6, 2)
    assert grad_check(lambda: linear(x), [x, linear.weight, linear.bias]) < TOLERANCE
    assert grad_check(lambda: mlp(x), [x] + [p for layer in mlp.layers for p in (layer.weight, layer.bias)]) < TOLERANCE
    assert grad_check(lambda: align(z), [z, align.linear.weight, align.linear.bias]) < TOLERANCE


def test_feature_align_checks_channels():
    store = ParamStore()
    with pytest.raises(ValueError):
        FeatureAlign(store, "bad", 5, 4)
    align = FeatureAlign(store, "ok", 2, 4)
    with pytest.raises(ValueError):
        align(Tensor(np.zeros((3, 3))))


def test_reciprocal_attention_matches_brute_force():
    rng = np.random.default_rng(1)
    x_pos, x_z = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    fused, depth = reciprocal_attention(Tensor(x_pos), Tensor(x_z), scale=0.7)
    expected = _brute_force_attention(x_pos, x_z, 0.7)
    assert fused.data == pytest.approx(expected, abs=1e-12)
    assert depth.data == pytest.approx(expected[:, :3], abs=1e-12)


@pytest.mark.parametrize("mode", ["cluster", "full", "concat"])
def test_grad_fusion(mode):
    rng = np.random.default_rng(2)
    store = ParamStore(seed=1)
    phi = Mlp(store, "phi", [4, 3], final_activation=True)
    x_pos, x_z = _tensor(rng, 7, 4), _tensor(rng, 7, 4)
    blocks = [(0, 3), (3, 7)]
    if mode == "cluster":
        def run():
            return cluster_cross_attention(x_pos, x_z, blocks, phi, 0.5)
    elif mode == "full":
        def run():
            return full_cross_attention(x_pos, x_z, phi, 0.5)
    else:
        def run():
            return concat_fusion(x_pos, x_z, phi)
    params = [phi.layers[0].weight, phi.layers[0].bias]
    assert grad_check(lambda: run().fused, [x_pos, x_z]) < TOLERANCE
    assert grad_check(lambda: run().phi_z, [x_pos, x_z] + params) < TOLERANCE


def test_cluster_attention_keeps_clusters_separate():
    rng = np.random.default_rng(3)
    store = ParamStore()
    phi = Mlp(store, "phi", [3, 2])
    x_pos, x_z = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    out = cluster_cross_attention(Tensor(x_pos), Tensor(x_z), [(0, 2), (2, 6)], phi)
    first, _ = reciprocal_attention(Tensor(x_pos[:2]), Tensor(x_z[:2]))
    assert out.fused.data[:2] == pytest.approx(first.data)
    changed = x_z.copy()
    changed[4] += 5.0
    again = cluster_cross_attention(Tensor(x_pos), Tensor(changed), [(0, 2), (2, 6)], phi)
    assert again.fused.data[:2] == pytest.approx(out.fused.data[:2])


def test_measured_mult_adds():
    rng = np.random.default_rng(4)
    store = ParamStore()
    d, n = 8, 6
    phi = Mlp(store, "phi", [d, 2])
    x_pos, x_z = Tensor(rng.normal(size=(2 * n, d))), Tensor(rng.normal(size=(2 * n, d)))
    clustered = cluster_cross_attention(x_pos, x_z, [(0, n), (n, 2 * n)], phi)
    full = full_cross_attention(x_pos, x_z, phi)
    assert clustered.mult_adds == 2 * 3 * n * n * d
    assert full.mult_adds == 3 * (2 * n) ** 2 * d
    assert clustered.mult_adds * 2 == full.mult_adds
    single = cluster_cross_attention(x_pos, x_z, [(0, 2 * n)], phi)
    assert single.mult_adds == full.mult_adds
    assert concat_fusion(x_pos, x_z, phi).mult_adds == 0


def test_analytic_mult_adds():
    assert fusion_mult_adds([3, 5], 4, FusionMode.CLUSTER) == 4 * (9 + 25) * 4
    assert fusion_mult_adds([3, 5], 4, "full") == 4 * 64 * 4
    assert fusion_mult_adds([3, 5], 4, "concat") == 0
    assert fusion_mult_adds([4, 4], 2, "cluster") * 2 == fusion_mult_adds([4, 4], 2, "full")


def test_mult_add_counter_nests():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 4)))
    with MultAddCounter() as outer:
        with MultAddCounter() as inner:
            a @ b
        a @ b
    assert inner.count == 24
    assert outer.count == 48


def test_grad_aggregations():
    rng = np.random.default_rng(5)
    graph = _graph([3, 4, 2])
    n, width = graph.node_count, 6
    store = ParamStore(seed=2)
    intra = IntraClusterAggregate(store, "intra", width)
    inter = InterClusterAggregate(store, "inter", width)
    features = _tensor(rng, n, width)
    positions = graph.raw[:, :4]
    intra_params = [intra.query.weight, intra.key.weight, intra.value.weight, intra.position.weight]
    assert grad_check(lambda: intra(features, positions, graph.intra_edges), [features] + intra_params) < TOLERANCE
    assert grad_check(lambda: inter(features, graph.inter_edges, graph.center_of),
                      [features, inter.edge.weight, inter.edge.bias]) < TOLERANCE


def test_inter_aggregate_broadcasts_to_members():
    rng = np.random.default_rng(6)
    graph = _graph([2, 3])
    store = ParamStore()
    inter = InterClusterAggregate(store, "inter", 4)
    features = Tensor(rng.normal(size=(graph.node_count, 4)))
    delta = inter(features, graph.inter_edges, graph.center_of).data - features.data
    for _, start, stop in graph.cluster_index:
        assert delta[start:stop] == pytest.approx(np.repeat(delta[stop - 1:stop], stop - start, axis=0))
    assert inter(features, np.zeros((0, 2), dtype=np.int64), graph.center_of) is features


def test_segment_ops():
    scores = Tensor(np.array([1.0, 2.0, 3.0, 0.5]))
    out = segment_softmax(scores, np.array([0, 0, 1, 1]), 3)
    assert out.data[:2].sum() == pytest.approx(1.0)
    assert out.data[2:].sum() == pytest.approx(1.0)
    rows = Tensor(np.array([[1.0, 5.0], [3.0, 2.0], [0.0, 0.0]]))
    peak = segment_max(rows, np.array([0, 0, 2]), 3)
    assert peak.data.tolist() == [[3.0, 5.0], [0.0, 0.0], [0.0, 0.0]]


def test_scatter_rows_matches_unbuffered_add():
    rng = np.random.default_rng(9)
    index = rng.integers(0, 5, size=40)
    values = rng.normal(size=(40, 3, 2))
    expected = np.zeros((6, 3, 2))
    np.add.at(expected, index, values)
    assert scatter_rows(values, index, 6) == pytest.approx(expected, abs=1e-12)
    flat = rng.normal(size=40)
    expected = np.zeros(6)
    np.add.at(expected, index, flat)
    assert scatter_rows(flat, index, 6) == pytest.approx(expected, abs=1e-12)
    assert scatter_rows(np.zeros((0, 4)), np.zeros(0, dtype=int), 3).shape == (3, 4)


def test_grad_gru_and_head():
    rng = np.random.default_rng(7)
    store = ParamStore(seed=3)
    gru = GRUCell(store, "gru", 4, 5)
    head = VelocityHead(store, "head", 5, 6)
    x, h = _tensor(rng, 1, 4), _tensor(rng, 1, 5)
    gru_params = [gru.w_z.weight, gru.w_r.bias, gru.w_g.weight, gru.u_r.weight, gru.u_g.weight]
    assert grad_check(lambda: gru(x, h), [x, h] + gru_params) < TOLERANCE
    assert grad_check(lambda: head(h)[0], [h, head.linear.layers[0].weight]) < TOLERANCE
    assert grad_check(lambda: head(h)[1], [h, head.angular.layers[1].weight]) < TOLERANCE
    with pytest.raises(ValueError):
        gru(Tensor(np.zeros((2, 4))), h)


def test_grad_composed_model():
    graph = _graph([3, 4])
    model = DepthPcModel(ModelConfig(width=4, depth_embedding=3, hidden=5, head_hidden=4, seed=1))
    names = ["align_depth.weight", "fusion.phi.0.weight", "intra.0.query.weight", "inter.0.edge.bias",
             "gru.input_update.weight", "head.linear.1.weight"]
    params = [model.store[name] for name in names]
    hidden = Tensor(np.random.default_rng(8).normal(size=(1, 5)) * 0.5)
    assert grad_check(lambda: model.forward(graph, hidden).linear, params) < 1e-3
    assert grad_check(lambda: model.forward(graph, hidden).angular, [model.store["align_position.bias"]]) < 1e-3
