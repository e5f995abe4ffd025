"""Fixed-size neighbor sampling and node flows.

A node flow holds everything one forward pass reads: the target pairs,
their sampled interaction neighborhoods and the breadth-wise KG expansion
around each target item. Flows are batched: every array has a leading
batch axis, and a single example is a batch of one.

Sampling rule: a node with at least ``size`` candidates is sampled without
replacement, otherwise with replacement. Isolated KG entities get a
self-loop through the reserved relation. Users or items without any
interaction neighbor are flagged invalid and contribute a zero summary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import InteractionGraph, KnowledgeGraph


@dataclass(frozen=True, eq=False)
class NodeFlow:
    center_user: np.ndarray        # (B,)
    center_item: np.ndarray        # (B,)
    user_items: np.ndarray         # (B, Su)
    user_items_valid: np.ndarray   # (B,) bool
    item_users: np.ndarray         # (B, Si)
    item_users_valid: np.ndarray   # (B,) bool
    kg_root: np.ndarray            # (B,) entity aligned to center_item
    kg_relations: tuple            # L arrays, layer l is (B, s**l)
    kg_entities: tuple             # L arrays, layer l is (B, s**l)

    def __len__(self) -> int:
        return len(self.center_user)

    @property
    def depth(self) -> int:
        return len(self.kg_entities)

    @property
    def kg_layers(self) -> list[np.ndarray]:
        """Per hop, ``(B, s**(l-1), s, 2)`` arrays of (relation, entity)."""
        out = []
        for rel, ent in zip(self.kg_relations, self.kg_entities):
            b, n = rel.shape
            pairs = np.stack([rel, ent], axis=-1)
            out.append(pairs.reshape(b, -1, self.kg_size, 2) if n else pairs.reshape(b, 0, 0, 2))
        return out

    @property
    def kg_size(self) -> int:
        return self.kg_entities[0].shape[1] if self.kg_entities else 0

    def truncate(self, depth: int) -> "NodeFlow":
        return NodeFlow(
            self.center_user, self.center_item, self.user_items, self.user_items_valid,
            self.item_users, self.item_users_valid, self.kg_root,
            self.kg_relations[:depth], self.kg_entities[:depth],
        )

    def select(self, idx) -> "NodeFlow":
        idx = np.atleast_1d(np.asarray(idx))
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return NodeFlow(
            self.center_user[idx], self.center_item[idx], self.user_items[idx],
            self.user_items_valid[idx], self.item_users[idx], self.item_users_valid[idx],
            self.kg_root[idx],
            tuple(a[idx] for a in self.kg_relations), tuple(a[idx] for a in self.kg_entities),
        )

    @classmethod
    def concat(cls, flows) -> "NodeFlow":
        flows = list(flows)
        depth = flows[0].depth
        return cls(
            np.concatenate([f.center_user for f in flows]),
            np.concatenate([f.center_item for f in flows]),
            np.concatenate([f.user_items for f in flows]),
            np.concatenate([f.user_items_valid for f in flows]),
            np.concatenate([f.item_users for f in flows]),
            np.concatenate([f.item_users_valid for f in flows]),
            np.concatenate([f.kg_root for f in flows]),
            tuple(np.concatenate([f.kg_relations[l] for f in flows]) for l in range(depth)),
            tuple(np.concatenate([f.kg_entities[l] for f in flows]) for l in range(depth)),
        )

    def total_kg_nodes(self) -> int:
        return sum(a.shape[1] for a in self.kg_entities)


class _CSR:
    """Sorted CSR view of an adjacency list with a global (row, value) key."""

    def __init__(self, rows: list[np.ndarray], width: int):
        degrees = np.array([len(r) for r in rows], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(degrees)]).astype(np.int64)
        self.values = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, np.int64)
        row_ids = np.repeat(np.arange(len(rows), dtype=np.int64), degrees)
        self.keys = row_ids * max(width, 1) + self.values
        self.width = max(width, 1)

    def position(self, nodes: np.ndarray, values: np.ndarray) -> np.ndarray:
        """CSR position of ``values[k]`` within row ``nodes[k]``, or -1."""
        target = nodes * self.width + values
        pos = np.searchsorted(self.keys, target)
        hit = pos < len(self.keys)
        hit[hit] = self.keys[pos[hit]] == target[hit]
        return np.where(hit, pos, -1)


class _GraphIndex:
    def __init__(self, graph: InteractionGraph):
        self.users = _CSR(graph.user_adjacency, graph.num_items)
        self.items = _CSR(graph.item_adjacency, graph.num_users)


_index_cache: dict[int, tuple[InteractionGraph, _GraphIndex]] = {}


def _index(graph: InteractionGraph) -> _GraphIndex:
    hit = _index_cache.get(id(graph))
    if hit is None or hit[0] is not graph:
        if len(_index_cache) > 16:
            _index_cache.clear()
        hit = (graph, _GraphIndex(graph))
        _index_cache[id(graph)] = hit
    return hit[1]


def sample_slots(offsets: np.ndarray, nodes: np.ndarray, size: int,
                 rng: np.random.Generator, exclude: np.ndarray | None = None):
    """Sample ``size`` CSR positions for every node in ``nodes``.

    ``exclude`` optionally gives one CSR position per node to leave out,
    honoured only when the node has another candidate. Returns
    ``(positions, valid)``; rows of nodes without candidates are zeros and
    flagged invalid.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    n = len(nodes)
    start = offsets[nodes]
    deg = offsets[nodes + 1] - start
    out = np.zeros((n, size), dtype=np.int64)
    if n == 0 or size == 0:
        return out, deg > 0
    if exclude is None:
        excl = np.full(n, -1, dtype=np.int64)
    else:
        excl = np.where((exclude >= 0) & (deg > 1), exclude - start, -1)
    eff = deg - (excl >= 0)
    width = int(deg.max())
    if width == 0:
        return out, eff > 0
    keys = rng.random((n, width))
    cols = np.arange(width)
    keys[cols[None, :] >= deg[:, None]] = np.inf
    has_excl = excl >= 0
    keys[np.flatnonzero(has_excl), excl[has_excl]] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")
    # rows with enough candidates: first `size` of a random permutation
    take = np.minimum(size, width)
    picked = np.zeros((n, size), dtype=np.int64)
    picked[:, :take] = order[:, :take]
    short = (eff < size) & (eff > 0)
    if short.any():
        draws = (rng.random((int(short.sum()), size)) * eff[short, None]).astype(np.int64)
        picked[short] = np.take_along_axis(order[short], draws, axis=1)
    out = start[:, None] + picked
    out[eff == 0] = 0
    return out, eff > 0


def _neighbor_sample(csr: _CSR, nodes, size, rng, exclude_values=None):
    nodes = np.asarray(nodes, dtype=np.int64)
    excl = None
    if exclude_values is not None:
        excl = csr.position(nodes, np.asarray(exclude_values, dtype=np.int64))
    pos, valid = sample_slots(csr.offsets, nodes, size, rng, excl)
    ids = csr.values[pos] if len(csr.values) else np.zeros_like(pos)
    return np.where(valid[:, None], ids, 0), valid


def sample_user_items(graph: InteractionGraph, user: int, size: int,
                      rng: np.random.Generator) -> np.ndarray:
    if graph.user_degree(user) == 0:
        raise ValueError(f"user {user} has no interacted item")
    ids, _ = _neighbor_sample(_index(graph).users, [user], size, rng)
    return ids[0]


def sample_item_users(graph: InteractionGraph, item: int, size: int,
                      rng: np.random.Generator) -> np.ndarray:
    if graph.item_degree(item) == 0:
        raise ValueError(f"item {item} has no interacting user")
    ids, _ = _neighbor_sample(_index(graph).items, [item], size, rng)
    return ids[0]


def sample_kg_frontiers(kg: KnowledgeGraph, roots: np.ndarray, depth: int, size: int,
                        rng: np.random.Generator):
    """Breadth-wise KG expansion from each root entity.

    Returns two tuples of ``depth`` arrays, relations and entities, where
    layer ``l`` has shape ``(len(roots), size**l)``; node ``k`` of layer
    ``l`` hangs off node ``k // size`` of layer ``l - 1``.
    """
    frontier = np.asarray(roots, dtype=np.int64)[:, None]
    rels, ents = [], []
    for _ in range(depth):
        b, n = frontier.shape
        flat = frontier.reshape(-1)
        pos, valid = sample_slots(kg.adj_offsets, flat, size, rng)
        if len(kg.adj_entities):
            r = kg.adj_relations[pos]
            e = kg.adj_entities[pos]
        else:
            r = np.zeros_like(pos)
            e = np.zeros_like(pos)
        r = np.where(valid[:, None], r, kg.self_loop_relation)
        e = np.where(valid[:, None], e, flat[:, None])
        rels.append(r.reshape(b, n * size))
        ents.append(e.reshape(b, n * size))
        frontier = ents[-1]
    return tuple(rels), tuple(ents)


def sample_kg_flow(kg: KnowledgeGraph, item: int, L: int, size: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    """KG layers for one item as ``(size**(l-1), size, 2)`` arrays."""
    if L < 0:
        raise ValueError("L must be >= 0")
    root = kg.item_to_entity[[item]]
    rels, ents = sample_kg_frontiers(kg, root, L, size, rng)
    return [np.stack([r[0], e[0]], axis=-1).reshape(-1, size, 2) for r, e in zip(rels, ents)]


def build_flows(graph: InteractionGraph, kg: KnowledgeGraph, users, items,
                sizes: tuple[int, int, int], depth: int, rng: np.random.Generator,
                exclude_center: bool = True) -> NodeFlow:
    """Node flows for a batch of (user, item) pairs.

    With ``exclude_center`` the target item is left out of the user's
    sample and the target user out of the item's sample whenever another
    neighbor exists.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    su, si, sk = sizes
    index = _index(graph)
    ui, ui_ok = _neighbor_sample(index.users, users, su, rng,
                                 items if exclude_center else None)
    iu, iu_ok = _neighbor_sample(index.items, items, si, rng,
                                 users if exclude_center else None)
    roots = kg.item_to_entity[items]
    rels, ents = sample_kg_frontiers(kg, roots, depth, sk, rng)
    return NodeFlow(users, items, ui, ui_ok, iu, iu_ok, roots, rels, ents)


def build_node_flow(graph: InteractionGraph, kg: KnowledgeGraph, pair: tuple[int, int],
                    config, rng: np.random.Generator, exclude_center: bool = True) -> NodeFlow:
    return build_flows(graph, kg, [pair[0]], [pair[1]], config.sample_sizes, config.L, rng,
                       exclude_center)


class NeighborhoodCache:
    """Per-node samples drawn once and reused for every pair.

    Used at evaluation time so that metrics are reproducible and full
    ranking does not resample the same neighborhoods per candidate item.
    """

    def __init__(self, graph: InteractionGraph, kg: KnowledgeGraph,
                 sizes: tuple[int, int, int], depth: int, seed: int):
        rng = np.random.default_rng(seed)
        su, si, sk = sizes
        index = _index(graph)
        self.user_items, self.user_valid = _neighbor_sample(
            index.users, np.arange(graph.num_users), su, rng)
        self.item_users, self.item_valid = _neighbor_sample(
            index.items, np.arange(graph.num_items), si, rng)
        self.roots = kg.item_to_entity[: graph.num_items]
        self.kg_relations, self.kg_entities = sample_kg_frontiers(kg, self.roots, depth, sk, rng)

    def flows(self, users, items) -> NodeFlow:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        return NodeFlow(
            users, items, self.user_items[users], self.user_valid[users],
            self.item_users[items], self.item_valid[items], self.roots[items],
            tuple(a[items] for a in self.kg_relations),
            tuple(a[items] for a in self.kg_entities),
        )
