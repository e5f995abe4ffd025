"""Interaction and knowledge graph stores.

Both stores are immutable once built. Anything that changes a graph
(splitting, corruption) returns a new object.

File formats are the tab separated integer-id files shipped with the
public preprocessed benchmark releases:

    ratings_final.txt   user<TAB>item<TAB>label
    kg_final.txt        head<TAB>relation<TAB>tail
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    pass


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _adjacency(src: np.ndarray, dst: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    bounds = np.searchsorted(src, np.arange(n + 1))
    return [dst[bounds[k]:bounds[k + 1]] for k in range(n)]


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Bipartite user-item graph.

    ``edges`` is an ``(n, 3)`` int64 array of ``(user, item, label)``.
    Adjacency lists hold label-1 edges only, sorted by id.
    """

    num_users: int
    num_items: int
    edges: np.ndarray
    user_adjacency: list = field(repr=False)
    item_adjacency: list = field(repr=False)

    @classmethod
    def from_edges(cls, edges, num_users: int | None = None,
                   num_items: int | None = None) -> "InteractionGraph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
        if len(edges) and edges.min() < 0:
            raise GraphFormatError("negative id in interaction edges")
        if len(edges) and not np.isin(edges[:, 2], (0, 1)).all():
            raise GraphFormatError("labels must be 0 or 1")
        nu = int(edges[:, 0].max()) + 1 if len(edges) else 0
        ni = int(edges[:, 1].max()) + 1 if len(edges) else 0
        num_users = nu if num_users is None else num_users
        num_items = ni if num_items is None else num_items
        if nu > num_users or ni > num_items:
            raise GraphFormatError("edge id out of declared range")

        keys = edges[:, 0] * max(num_items, 1) + edges[:, 1]
        uniq, first, counts = np.unique(keys, return_index=True, return_counts=True)
        if (counts > 1).any():
            for key in uniq[counts > 1]:
                labels = set(edges[keys == key, 2].tolist())
                if len(labels) > 1:
                    u, i = divmod(int(key), max(num_items, 1))
                    raise GraphFormatError(f"conflicting labels for edge ({u}, {i})")
            edges = edges[np.sort(first)]

        pos = edges[edges[:, 2] == 1]
        return cls(
            num_users=num_users,
            num_items=num_items,
            edges=edges,
            user_adjacency=_adjacency(pos[:, 0], pos[:, 1], num_users),
            item_adjacency=_adjacency(pos[:, 1], pos[:, 0], num_items),
        )

    @property
    def positive_edges(self) -> np.ndarray:
        return self.edges[self.edges[:, 2] == 1]

    def user_degree(self, user: int) -> int:
        return len(self.user_adjacency[user])

    def item_degree(self, item: int) -> int:
        return len(self.item_adjacency[item])

    def restrict(self, edges) -> "InteractionGraph":
        """Same id space, different edge set (used for split subgraphs)."""
        return InteractionGraph.from_edges(edges, self.num_users, self.num_items)


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Triplet store with undirected traversal.

    Every triplet ``(h, r, t)`` contributes ``(r, t)`` to the adjacency of
    ``h`` and ``(r, h)`` to the adjacency of ``t``. Duplicates are kept.
    The adjacency is stored CSR style in ``adj_offsets``/``adj_relations``/
    ``adj_entities``.
    """

    num_entities: int
    num_relations: int
    triplets: np.ndarray
    item_to_entity: np.ndarray
    adj_offsets: np.ndarray = field(repr=False)
    adj_relations: np.ndarray = field(repr=False)
    adj_entities: np.ndarray = field(repr=False)

    @classmethod
    def from_triplets(cls, triplets, num_entities: int | None = None,
                      num_relations: int | None = None,
                      item_to_entity=None) -> "KnowledgeGraph":
        triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        if len(triplets) and triplets.min() < 0:
            raise GraphFormatError("negative id in triplets")
        ne = int(max(triplets[:, 0].max(), triplets[:, 2].max())) + 1 if len(triplets) else 0
        nr = int(triplets[:, 1].max()) + 1 if len(triplets) else 0
        num_entities = ne if num_entities is None else num_entities
        num_relations = nr if num_relations is None else num_relations
        if ne > num_entities or nr > num_relations:
            raise GraphFormatError("triplet id out of declared range")
        if item_to_entity is None:
            item_to_entity = np.zeros(0, dtype=np.int64)
        item_to_entity = np.asarray(item_to_entity, dtype=np.int64)
        if len(item_to_entity):
            if item_to_entity.min() < 0 or item_to_entity.max() >= num_entities:
                raise GraphFormatError("item alignment points outside the entity range")
            if len(np.unique(item_to_entity)) != len(item_to_entity):
                raise GraphFormatError("item alignment is not injective")

        src = np.concatenate([triplets[:, 0], triplets[:, 2]])
        rel = np.concatenate([triplets[:, 1], triplets[:, 1]])
        dst = np.concatenate([triplets[:, 2], triplets[:, 0]])
        # stable on src so each entity's list follows file order
        order = np.argsort(src, kind="stable")
        offsets = np.searchsorted(src[order], np.arange(num_entities + 1))
        return cls(
            num_entities=num_entities,
            num_relations=num_relations,
            triplets=triplets,
            item_to_entity=item_to_entity,
            adj_offsets=offsets.astype(np.int64),
            adj_relations=rel[order],
            adj_entities=dst[order],
        )

    @property
    def self_loop_relation(self) -> int:
        """Reserved relation id for isolated entities."""
        return self.num_relations

    def degree(self, entity: int) -> int:
        return int(self.adj_offsets[entity + 1] - self.adj_offsets[entity])

    def neighbors(self, entity: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.adj_offsets[entity], self.adj_offsets[entity + 1]
        return self.adj_relations[lo:hi], self.adj_entities[lo:hi]

    @property
    def entity_adjacency(self) -> list[list[tuple[int, int]]]:
        out = []
        for e in range(self.num_entities):
            rels, ents = self.neighbors(e)
            out.append(list(zip(rels.tolist(), ents.tolist())))
        return out

    def with_triplets(self, triplets) -> "KnowledgeGraph":
        return KnowledgeGraph.from_triplets(
            triplets, self.num_entities, self.num_relations, self.item_to_entity)

    def align_items(self, num_items: int, mapping=None) -> "KnowledgeGraph":
        """Attach the item -> entity alignment.

        Without ``mapping`` item ``i`` is entity ``i``, which is how the
        public releases number their entities. Items beyond the entity range
        become isolated entities.
        """
        if mapping is None:
            mapping = np.arange(num_items, dtype=np.int64)
        mapping = np.asarray(mapping, dtype=np.int64)
        if len(mapping) != num_items:
            raise GraphFormatError("alignment must cover every item")
        n_ent = max(self.num_entities, int(mapping.max()) + 1 if num_items else 0)
        return KnowledgeGraph.from_triplets(self.triplets, n_ent, self.num_relations, mapping)


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    eval: np.ndarray
    test: np.ndarray
    split_seed: int


def _parse_int_rows(path, ncols: int, has_header: bool = False) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if has_header and lineno == 1:
                continue
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != ncols:
                raise GraphFormatError(f"{path}:{lineno}: expected {ncols} fields, got {len(parts)}")
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer field") from None
            if min(vals) < 0:
                raise GraphFormatError(f"{path}:{lineno}: negative id")
            rows.append(vals)
    return np.array(rows, dtype=np.int64).reshape(-1, ncols)


def load_interactions(path, has_header: bool = False) -> InteractionGraph:
    rows = _parse_int_rows(path, 3, has_header)
    bad = np.flatnonzero(~np.isin(rows[:, 2], (0, 1)))
    if len(bad):
        raise GraphFormatError(f"{path}: row {bad[0] + 1}: label must be 0 or 1")
    return InteractionGraph.from_edges(rows)


def load_kg(path) -> KnowledgeGraph:
    return KnowledgeGraph.from_triplets(_parse_int_rows(path, 3))


def write_interactions(path, edges) -> None:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    with open(path, "w") as fh:
        for u, i, y in edges.tolist():
            fh.write(f"{u}\t{i}\t{y}\n")


def write_kg(path, triplets) -> None:
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    with open(path, "w") as fh:
        for h, r, t in triplets.tolist():
            fh.write(f"{h}\t{r}\t{t}\n")


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = _round_half_up(0.6 * n)
    n_eval = _round_half_up(0.2 * n)
    return n_train, n_eval, n - n_train - n_eval


def split_dataset(graph: InteractionGraph, seed: int) -> DatasetSplit:
    """Uniform random 6:2:2 partition of the labeled edges."""
    n = len(graph.edges)
    if n < 5:
        raise ValueError(f"need at least 5 edges to split, got {n}")
    n_train, n_eval, _ = split_sizes(n)
    perm = np.random.default_rng(seed).permutation(n)
    e = graph.edges[perm]
    return DatasetSplit(
        train=e[:n_train], eval=e[n_train:n_train + n_eval], test=e[n_train + n_eval:],
        split_seed=seed,
    )


def corrupt_kg(kg: KnowledgeGraph, ratio: float, seed: int,
               return_indices: bool = False):
    """Replace one field in ``round(ratio * |T|)`` distinct triplets.

    The field (head, relation or tail) is picked uniformly and gets a
    uniformly random different id. Only relations appear in the usual
    description of this experiment; corrupting any field is a superset.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    t = kg.triplets.copy()
    n = _round_half_up(ratio * len(t))
    idx = np.sort(rng.choice(len(t), size=n, replace=False)) if n else np.zeros(0, np.int64)
    fields = rng.integers(0, 3, size=n)
    for k, f in zip(idx.tolist(), fields.tolist()):
        bound = kg.num_relations if f == 1 else kg.num_entities
        if bound < 2:
            what = "relations" if f == 1 else "entities"
            raise ValueError(f"cannot corrupt: fewer than 2 {what}")
        new = int(rng.integers(0, bound - 1))
        if new >= t[k, f]:
            new += 1
        t[k, f] = new
    out = kg.with_triplets(t)
    return (out, idx) if return_indices else out


def write_corrupted_kg(kg: KnowledgeGraph, ratio: float, seed: int, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bad, idx = corrupt_kg(kg, ratio, seed, return_indices=True)
    path = out_dir / "kg_final.txt"
    write_kg(path, bad.triplets)
    manifest = {"ratio": ratio, "seed": seed, "num_triplets": int(len(kg.triplets)),
                "corrupted_indices": idx.tolist()}
    (out_dir / "corruption.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def sample_negatives(graph: InteractionGraph, user: int, k: int,
                     rng: np.random.Generator) -> np.ndarray:
    """``k`` uniform draws from the items ``user`` has no positive edge with."""
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    pos = graph.user_adjacency[user]
    pool_size = graph.num_items - len(pos)
    if pool_size <= 0:
        raise ValueError(f"user {user} has no non-interacted item")
    # rank r in the complement maps to item r + (#positives <= that item)
    ranks = rng.choice(pool_size, size=k, replace=pool_size < k)
    return _complement_lookup(pos, ranks)


def _complement_lookup(sorted_excluded: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    shifted = sorted_excluded - np.arange(len(sorted_excluded))
    return (ranks + np.searchsorted(shifted, ranks, side="right")).astype(np.int64)
