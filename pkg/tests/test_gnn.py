import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellgraph import autodiff as ad
from cellgraph.autodiff import Tensor
from cellgraph.checks import random_cell_graph
from cellgraph.gnn import (CellGraph, ForwardTrace, GnnConfig, ModelParams, batch_loss, forward,
                           induced_subgraph, predict_proba, readout, sag_pool, sage_conv)
from cellgraph.graph import EdgeList, knn_graph


def T(a):
    return Tensor(np.asarray(a, dtype=float))


def sage_oracle(h, edges, w_agg, w_upd):
    """Node-by-node loop over the undirected neighbourhoods."""
    n = h.shape[0]
    nbrs = [[] for _ in range(n)]
    for u, v in edges.pairs:
        nbrs[u].append(v)
        nbrs[v].append(u)
    out = []
    for v in range(n):
        if nbrs[v]:
            a = np.max([np.maximum(h[u] @ w_agg, 0.0) for u in nbrs[v]], axis=0)
        else:
            a = np.zeros(w_agg.shape[1])
        out.append(np.concatenate([h[v], a]) @ w_upd)
    return np.array(out)


# ---------------------------------------------------------------- sage_conv

def test_two_node_hand_example():
    out = sage_conv(T([[2.0], [-3.0]]), EdgeList([[0, 1]], 2), T([[1.0]]), T([[1.0], [1.0]]))
    assert out.data.ravel().tolist() == [2.0, -1.0]


def test_isolated_node_uses_zero_aggregate():
    rng = np.random.default_rng(0)
    h, wa, wu = rng.normal(size=(3, 2)), rng.normal(size=(2, 3)), rng.normal(size=(5, 4))
    out = sage_conv(T(h), EdgeList([[0, 1]], 3), T(wa), T(wu)).data
    np.testing.assert_allclose(out[2], np.concatenate([h[2], np.zeros(3)]) @ wu, rtol=1e-14)


def test_sage_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = int(rng.integers(1, 25))
        e = EdgeList.from_pairs(rng.integers(0, n, size=(int(rng.integers(0, 3 * n)), 2)), n)
        h, wa, wu = rng.normal(size=(n, 3)), rng.normal(size=(3, 4)), rng.normal(size=(7, 2))
        np.testing.assert_allclose(sage_conv(T(h), e, T(wa), T(wu)).data, sage_oracle(h, e, wa, wu),
                                   rtol=1e-12, atol=1e-12)


def test_sage_conv_shape_errors():
    with pytest.raises(ad.ShapeError):
        sage_conv(T(np.zeros((2, 3))), EdgeList([[0, 1]], 2), T(np.zeros((2, 2))), T(np.zeros((5, 1))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_sage_conv_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    e = EdgeList.from_pairs(rng.integers(0, n, size=(2 * n, 2)), n)
    h, wa, wu = rng.normal(size=(n, 3)), rng.normal(size=(3, 3)), rng.normal(size=(6, 2))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    pe = EdgeList.from_pairs(inv[e.pairs], n) if len(e) else e
    base = sage_conv(T(h), e, T(wa), T(wu)).data
    moved = sage_conv(T(h[perm]), pe, T(wa), T(wu)).data
    assert np.array_equal(moved, base[perm])


# ---------------------------------------------------------------- sag_pool

def test_ratio_one_keeps_all_nodes_gated():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 3))
    e = EdgeList([[0, 1], [1, 2], [3, 4]], 5)
    res = sag_pool(T(x), e, 1.0, T(rng.normal(size=(3, 3))), T(rng.normal(size=(6, 1))))
    assert sorted(res.kept.tolist()) == list(range(5))
    np.testing.assert_allclose(res.features.data, x[res.kept] * res.scores[res.kept, None], rtol=1e-15)
    assert res.edges.as_set() == induced_subgraph(e, res.kept).as_set()
    assert len(res.edges) == 3


def test_single_node_is_always_kept():
    for ratio in (0.01, 0.5, 1.0):
        res = sag_pool(T([[1.0, 2.0]]), EdgeList(np.zeros((0, 2)), 1), ratio,
                       T(np.eye(2)), T(np.ones((4, 1))))
        assert res.kept.tolist() == [0]


def test_four_node_path_hand_scores():
    # path 0-1-2-3 with scalar features; A + A^2 neighbourhoods:
    # 0:{1,2} 1:{0,2,3} 2:{0,1,3} 3:{1,2}
    x = np.array([[1.0], [-2.0], [3.0], [0.5]])
    e = EdgeList([[0, 1], [1, 2], [2, 3]], 4)
    w_agg, w_upd = np.array([[1.0]]), np.array([[0.5], [-1.0]])
    nb = {0: [1, 2], 1: [0, 2, 3], 2: [0, 1, 3], 3: [1, 2]}
    raw = [0.5 * x[v, 0] - max(max(x[u, 0], 0.0) for u in nb[v]) for v in range(4)]
    z = [1 / (1 + math.exp(-r)) for r in raw]
    res = sag_pool(T(x), e, 0.5, T(w_agg), T(w_upd))
    np.testing.assert_allclose(res.scores, z, rtol=1e-15)
    want = sorted(range(4), key=lambda v: (-z[v], v))[:2]
    assert res.kept.tolist() == want
    np.testing.assert_allclose(res.features.data[:, 0], [x[v, 0] * z[v] for v in want], rtol=1e-15)


def test_score_ties_keep_lower_index():
    x = np.ones((4, 2))
    res = sag_pool(T(x), EdgeList(np.zeros((0, 2)), 4), 0.5, T(np.eye(2)), T(np.ones((4, 1))))
    assert res.kept.tolist() == [0, 1]


def test_kept_count_is_ceiling():
    rng = np.random.default_rng(3)
    for n in range(1, 12):
        for ratio in (0.2, 0.5, 0.7):
            res = sag_pool(T(rng.normal(size=(n, 2))), EdgeList(np.zeros((0, 2)), n), ratio,
                           T(np.eye(2)), T(rng.normal(size=(4, 1))))
            assert len(res.kept) == math.ceil(ratio * n)


def test_gate_is_linear_in_score():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 3))
    e = EdgeList([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5]], 6)
    res = sag_pool(T(x), e, 0.5, T(rng.normal(size=(3, 3))), T(rng.normal(size=(6, 1))))
    ratio = res.features.data / x[res.kept]
    np.testing.assert_allclose(ratio, np.repeat(res.scores[res.kept, None], 3, axis=1), rtol=1e-13)


def test_tanh_score_option():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 2))
    e = EdgeList([[0, 1], [2, 3]], 4)
    wa, wu = rng.normal(size=(2, 2)), rng.normal(size=(4, 1))
    s = sag_pool(T(x), e, 1.0, T(wa), T(wu)).scores
    t = sag_pool(T(x), e, 1.0, T(wa), T(wu), activation="tanh").scores
    raw = np.log(s / (1 - s))
    np.testing.assert_allclose(t, np.tanh(raw), rtol=1e-12)


# ---------------------------------------------------------------- readout and forward

def test_readout_examples():
    assert readout(T([[0.0], [2.0]])).data.tolist() == [1.0, 2.0]
    assert readout(T([[3.0, -1.0]])).data.tolist() == [3.0, -1.0, 3.0, -1.0]


def test_readout_permutation_invariant():
    x = np.random.default_rng(6).normal(size=(7, 3))
    perm = np.random.default_rng(7).permutation(7)
    np.testing.assert_allclose(readout(T(x[perm])).data, readout(T(x)).data, rtol=1e-15)


def test_default_architecture():
    cfg = GnnConfig()
    assert (cfg.layers, cfg.hidden, cfg.pool_ratio, cfg.head_hidden) == (3, 64, 0.5, 64)
    p = ModelParams.init(GnnConfig(in_dim=5))
    assert p["conv0.W_agg"].shape == (5, 5) and p["conv0.W_upd"].shape == (10, 64)
    assert p["pool2.W_upd"].shape == (128, 1)
    assert p["head.W1"].shape == (128, 64) and p["head.W2"].shape == (64, 2)


def test_zero_head_gives_zero_logits_and_class_zero():
    p = ModelParams.init(GnnConfig(in_dim=4, hidden=5, head_hidden=3))
    for name in ("head.W1", "head.b1", "head.W2", "head.b2"):
        p[name].data[:] = 0.0
    g = random_cell_graph(np.random.default_rng(8), 9, 4, 1)
    assert forward(g, p).data.tolist() == [0.0, 0.0]
    prob = predict_proba([g], p)[0]
    assert prob == 0.5 and int(prob > 0.5) == 0


def test_feature_width_mismatch():
    p = ModelParams.init(GnnConfig(in_dim=4))
    with pytest.raises(ValueError, match="features"):
        forward(random_cell_graph(np.random.default_rng(9), 5, 3, 0), p)


def test_forward_gradcheck_on_six_node_graph():
    rng = np.random.default_rng(10)
    g = random_cell_graph(rng, 6, 3, 1)
    p = ModelParams.init(GnnConfig(in_dim=3, hidden=4, head_hidden=3, seed=1))
    rep = ad.gradcheck(lambda *_: batch_loss([g], p), p.parameters(), tol=1e-5)
    assert rep.passed, rep


def _distinct_invariance_case(rng, n, f_dim=4):
    pts = rng.uniform(0, 200, size=(n, 2))
    g = CellGraph(rng.normal(size=(n, f_dim)), knn_graph(pts, 5, 100), 0)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    moved = CellGraph(g.features[perm], EdgeList.from_pairs(inv[g.edges.pairs], n)
                      if len(g.edges) else g.edges, 0)
    return g, moved


def test_forward_permutation_invariance_50_graphs():
    rng = np.random.default_rng(11)
    p = ModelParams.init(GnnConfig(in_dim=4, hidden=8, head_hidden=6, seed=2))
    checked = 0
    for _ in range(50):
        g, moved = _distinct_invariance_case(rng, int(rng.integers(1, 40)))
        tr = ForwardTrace()
        a = forward(g, p, trace=tr).data
        if not tr.scores_distinct():
            continue
        b = forward(moved, p).data
        assert np.max(np.abs(a - b)) <= 1e-9
        checked += 1
    assert checked >= 45


def test_predict_proba_is_softmax_of_logits():
    rng = np.random.default_rng(12)
    p = ModelParams.init(GnnConfig(in_dim=3, hidden=4, head_hidden=4))
    gs = [random_cell_graph(rng, int(rng.integers(1, 12)), 3, i % 2) for i in range(5)]
    probs = predict_proba(gs, p)
    for g, pr in zip(gs, probs):
        z = forward(g, p).data
        assert abs(pr - 1 / (1 + math.exp(z[0] - z[1]))) < 1e-14


def test_checkpoint_roundtrip(tmp_path):
    p = ModelParams.init(GnnConfig(in_dim=3, hidden=4, head_hidden=4, seed=3))
    p.save(tmp_path / "m.json", extra={"note": 1}, run_config={"seed": 3})
    q, extra, cfg = ModelParams.load(tmp_path / "m.json")
    assert extra == {"note": 1} and cfg["run"] == {"seed": 3}
    assert q.config == p.config
    for name in p.tensors:
        assert np.array_equal(q[name].data, p[name].data)


def test_dropout_needs_rng_when_training():
    p = ModelParams.init(GnnConfig(in_dim=3, hidden=4, head_hidden=4, dropout=0.5))
    g = random_cell_graph(np.random.default_rng(13), 5, 3, 0)
    with pytest.raises(ValueError, match="rng"):
        forward(g, p, training=True)
    assert np.array_equal(forward(g, p).data, forward(g, p).data)


def test_config_validation():
    for bad in (dict(pool_ratio=0.0), dict(pool_ratio=1.5), dict(score_activation="relu"),
                dict(layers=0), dict(dropout=1.0), dict(readout="sum")):
        with pytest.raises(ValueError):
            GnnConfig(**bad)
