"""Planted-cluster dataset generator for desk-scale checks.

Users and items fall into latent clusters; a user's positives are drawn
from items of the same cluster, weighted toward popular items, so tail
items have few interactions. The KG ties every item to attribute entities
of its cluster, which is the only cluster evidence for tail items.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graphs import write_interactions, write_kg


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 50
    num_items: int = 30
    num_entities: int = 40
    num_relations: int = 5
    num_clusters: int = 4
    positives_per_user: tuple = (2, 4)
    attributes_per_item: int = 2
    popularity_exponent: float = 1.2
    noise_link_prob: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.num_users < 2 or self.num_items < 2 or self.num_relations < 2:
            raise ValueError("need at least 2 users, 2 items and 2 relations")
        n_attr = self.num_entities - self.num_items
        if self.num_clusters < 2 or n_attr < self.num_clusters:
            raise ValueError("need >= 2 clusters and one attribute entity per cluster")
        if self.num_items < self.num_clusters or self.num_users < self.num_clusters:
            raise ValueError("every cluster needs a user and an item")
        lo, hi = self.positives_per_user
        if not 1 <= lo <= hi:
            raise ValueError("bad positives_per_user range")


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    interactions: np.ndarray
    triplets: np.ndarray
    user_cluster: np.ndarray
    item_cluster: np.ndarray

    def planted_scores(self, users, items) -> np.ndarray:
        """Score of the generating model: 1 for same-cluster pairs, else 0."""
        return (self.user_cluster[users] == self.item_cluster[items]).astype(np.float64)


def make_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C = spec.num_clusters
    user_cluster = rng.permutation(np.arange(spec.num_users) % C)
    item_cluster = rng.permutation(np.arange(spec.num_items) % C)
    attrs = np.arange(spec.num_items, spec.num_entities)
    attr_cluster = np.arange(len(attrs)) % C
    n_attr_rel = spec.num_relations - 1
    noise_rel = spec.num_relations - 1

    popularity = np.empty(spec.num_items)
    for c in range(C):
        members = np.flatnonzero(item_cluster == c)
        ranks = rng.permutation(len(members)) + 1
        popularity[members] = ranks ** -spec.popularity_exponent

    edges = []
    lo, hi = spec.positives_per_user
    for u in range(spec.num_users):
        same = np.flatnonzero(item_cluster == user_cluster[u])
        other = np.flatnonzero(item_cluster != user_cluster[u])
        k = min(int(rng.integers(lo, hi + 1)), len(same))
        p = popularity[same] / popularity[same].sum()
        pos = rng.choice(same, size=k, replace=False, p=p)
        neg = rng.choice(other, size=min(k, len(other)), replace=False)
        edges += [(u, int(i), 1) for i in pos] + [(u, int(i), 0) for i in neg]
    edges.sort()

    triplets = []
    for i in range(spec.num_items):
        own = attrs[attr_cluster == item_cluster[i]]
        picks = rng.choice(own, size=min(spec.attributes_per_item, len(own)), replace=False)
        for a in picks:
            triplets.append((i, int(a - spec.num_items) % n_attr_rel, int(a)))
        if rng.random() < spec.noise_link_prob:
            triplets.append((i, noise_rel, int(rng.choice(attrs))))
    for c in range(C):
        own = attrs[attr_cluster == c]
        for a, b in zip(own[:-1], own[1:]):
            triplets.append((int(a), noise_rel, int(b)))

    return SyntheticData(spec, np.array(edges, dtype=np.int64),
                         np.array(triplets, dtype=np.int64).reshape(-1, 3),
                         user_cluster, item_cluster)


def write_synthetic(data: SyntheticData, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_interactions(out_dir / "ratings_final.txt", data.interactions)
    write_kg(out_dir / "kg_final.txt", data.triplets)
    meta = asdict(data.spec)
    meta["user_cluster"] = data.user_cluster.tolist()
    meta["item_cluster"] = data.item_cluster.tolist()
    (out_dir / "synthetic.json").write_text(json.dumps(meta, indent=1) + "\n")
    return out_dir
