import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgrec.graphs import InteractionGraph, KnowledgeGraph
from kgrec.model import ModelConfig
from kgrec.sampler import (NeighborhoodCache, build_flows, build_node_flow, sample_item_users,
                           sample_kg_flow, sample_slots, sample_user_items)


def random_graphs(seed, n_users=8, n_items=7, n_ent=12, n_rel=3, n_trip=14):
    rng = np.random.default_rng(seed)
    edges = {(int(u), int(i)): int(y) for u, i, y in zip(
        rng.integers(0, n_users, 40), rng.integers(0, n_items, 40), rng.integers(0, 2, 40))}
    g = InteractionGraph.from_edges([(u, i, y) for (u, i), y in edges.items()], n_users, n_items)
    t = np.stack([rng.integers(0, n_ent, n_trip), rng.integers(0, n_rel, n_trip),
                  rng.integers(0, n_ent, n_trip)], axis=1)
    kg = KnowledgeGraph.from_triplets(t, n_ent, n_rel).align_items(n_items)
    return g, kg


def test_sample_slots_without_replacement_when_enough():
    offsets = np.array([0, 5])
    pos, ok = sample_slots(offsets, np.array([0]), 4, np.random.default_rng(0))
    assert ok.all() and len(set(pos[0].tolist())) == 4
    assert pos.min() >= 0 and pos.max() < 5


def test_sample_slots_with_replacement_when_short():
    offsets = np.array([0, 2])
    pos, ok = sample_slots(offsets, np.array([0]), 6, np.random.default_rng(0))
    assert ok.all() and set(pos[0].tolist()) <= {0, 1}


def test_sample_slots_exclusion_only_with_alternatives():
    offsets = np.array([0, 3, 4])
    rng = np.random.default_rng(0)
    pos, _ = sample_slots(offsets, np.array([0, 1]), 5, rng, exclude=np.array([1, 3]))
    assert 1 not in pos[0].tolist()
    assert pos[1].tolist() == [3] * 5  # lone neighbor is kept


def test_samplers_raise_on_isolated_nodes():
    g = InteractionGraph.from_edges([(0, 0, 1), (1, 1, 0)], 2, 2)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_user_items(g, 1, 3, rng)
    with pytest.raises(ValueError):
        sample_item_users(g, 1, 3, rng)
    assert sample_user_items(g, 0, 3, rng).tolist() == [0, 0, 0]


def test_shape_contract_sizes_four():
    g, kg = random_graphs(0)
    cfg = ModelConfig(d=4, L=1, user_sample=4, item_sample=4, kg_sample=4)
    pair = tuple(int(x) for x in g.positive_edges[0, :2])
    flow = build_node_flow(g, kg, pair, cfg, np.random.default_rng(0))
    assert flow.user_items.shape == (1, 4) and flow.item_users.shape == (1, 4)
    assert flow.depth == 1 and flow.kg_layers[0].shape == (1, 1, 4, 2)


@pytest.mark.parametrize("s", [1, 2, 3, 5])
def test_two_hop_node_count(s):
    _, kg = random_graphs(1)
    layers = sample_kg_flow(kg, 0, 2, s, np.random.default_rng(0))
    assert [lay.shape for lay in layers] == [(1, s, 2), (s, s, 2)]
    assert sum(lay.shape[0] * lay.shape[1] for lay in layers) == s + s * s


def test_same_rng_same_flow():
    g, kg = random_graphs(2)
    users, items = g.edges[:, 0], g.edges[:, 1]
    a = build_flows(g, kg, users, items, (3, 3, 3), 2, np.random.default_rng(5))
    b = build_flows(g, kg, users, items, (3, 3, 3), 2, np.random.default_rng(5))
    for x, y in zip(a.__dict__.values(), b.__dict__.values()):
        if isinstance(x, tuple):
            assert all(np.array_equal(p, q) for p, q in zip(x, y))
        else:
            assert np.array_equal(x, y)


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4),
       st.integers(0, 3))
@settings(max_examples=80, deadline=None)
def test_membership_and_shapes(seed, su, si, sk, depth):
    g, kg = random_graphs(seed)
    rng = np.random.default_rng(seed)
    users, items = g.edges[:, 0], g.edges[:, 1]
    flow = build_flows(g, kg, users, items, (su, si, sk), depth, rng)
    B = len(users)
    assert flow.user_items.shape == (B, su) and flow.item_users.shape == (B, si)
    for b in range(B):
        u, i = users[b], items[b]
        if flow.user_items_valid[b]:
            assert set(flow.user_items[b].tolist()) <= set(g.user_adjacency[u].tolist())
        else:
            assert g.user_degree(u) == 0
        if flow.item_users_valid[b]:
            assert set(flow.item_users[b].tolist()) <= set(g.item_adjacency[i].tolist())
        else:
            assert g.item_degree(i) == 0
    parents = flow.kg_root[:, None]
    for l in range(depth):
        rel, ent = flow.kg_relations[l], flow.kg_entities[l]
        assert rel.shape == (B, sk ** (l + 1))
        for b in range(B):
            for k in range(rel.shape[1]):
                p = parents[b, k // sk]
                r, e = rel[b, k], ent[b, k]
                if r == kg.self_loop_relation:
                    assert e == p and kg.degree(p) == 0
                else:
                    assert (int(r), int(e)) in kg.entity_adjacency[p]
        parents = ent


def test_center_pair_excluded_when_alternatives_exist():
    g = InteractionGraph.from_edges([(0, 0, 1), (0, 1, 1), (1, 0, 1)], 2, 2)
    kg = KnowledgeGraph.from_triplets(np.zeros((0, 3)), 2, 1).align_items(2)
    rng = np.random.default_rng(0)
    flow = build_flows(g, kg, [0] * 50, [0] * 50, (3, 3, 1), 0, rng)
    assert (flow.user_items == 1).all()
    assert (flow.item_users == 1).all()
    flow = build_flows(g, kg, [0] * 50, [0] * 50, (3, 3, 1), 0, rng, exclude_center=False)
    assert (flow.user_items == 0).any() and (flow.item_users == 0).any()


def test_epoch_freshness():
    g = InteractionGraph.from_edges([(0, i, 1) for i in range(10)] + [(u, 0, 1) for u in range(1, 10)])
    kg = KnowledgeGraph.from_triplets([(0, 0, e) for e in range(1, 10)], 10, 1).align_items(10)
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(100):
        f = build_flows(g, kg, [0], [0], (4, 4, 4), 1, rng)
        seen.add((tuple(f.user_items[0]), tuple(f.item_users[0]), tuple(f.kg_entities[0][0])))
    assert len(seen) > 95


def test_isolated_entity_gets_self_loop():
    kg = KnowledgeGraph.from_triplets([(1, 0, 2)], 4, 1).align_items(4)
    layers = sample_kg_flow(kg, 3, 2, 2, np.random.default_rng(0))
    assert (layers[0][..., 0] == kg.self_loop_relation).all()
    assert (layers[1][..., 1] == 3).all()


def test_cache_is_reproducible_and_pair_independent():
    g, kg = random_graphs(3)
    a = NeighborhoodCache(g, kg, (3, 3, 2), 2, seed=7)
    b = NeighborhoodCache(g, kg, (3, 3, 2), 2, seed=7)
    fa = a.flows([0, 1, 0], [2, 2, 5])
    fb = b.flows([0, 1, 0], [2, 2, 5])
    assert np.array_equal(fa.user_items, fb.user_items)
    assert np.array_equal(fa.kg_entities[1], fb.kg_entities[1])
    assert np.array_equal(fa.user_items[0], fa.user_items[2])
    assert np.array_equal(fa.kg_entities[0][0], fa.kg_entities[0][1])


def test_truncate_select_concat():
    g, kg = random_graphs(4)
    f = build_flows(g, kg, g.edges[:, 0], g.edges[:, 1], (2, 2, 2), 3, np.random.default_rng(0))
    assert f.truncate(1).depth == 1 and f.total_kg_nodes() == 2 + 4 + 8
    parts = [f.select([0, 1]), f.select(np.arange(2, len(f)))]
    joined = type(f).concat(parts)
    assert np.array_equal(joined.kg_entities[2], f.kg_entities[2])
    assert len(joined) == len(f)
