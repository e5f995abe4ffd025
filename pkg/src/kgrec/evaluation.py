"""Evaluation protocols: CTR, full-ranking Top-K, and single-run harness."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphs import (DatasetSplit, InteractionGraph, KnowledgeGraph, corrupt_kg,
                     sample_negatives, split_dataset)
from .metrics import auc, f1_at_threshold, ndcg_at_k, recall_at_k
from .model import ModelConfig, ParameterSet, score_pairs
from .sampler import NeighborhoodCache
from .trainer import TrainConfig, train

DEFAULT_KS = (1, 5, 10, 20, 50, 100)


@dataclass
class CtrSet:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray


@dataclass
class CtrResult:
    auc: float
    f1: float
    threshold: float = 0.5


@dataclass
class RankingResult:
    ks: tuple
    recall: dict
    ndcg: dict
    n_users: int
    per_user: dict = field(default_factory=dict, repr=False)


def ctr_set(graph: InteractionGraph, edges: np.ndarray, seed) -> CtrSet:
    """Positives of ``edges`` plus one sampled negative each.

    Negatives avoid every known positive of the user in ``graph`` and are
    fixed by ``seed``.
    """
    rng = np.random.default_rng(seed)
    pos = edges[edges[:, 2] == 1]
    users, items, labels = [pos[:, 0]], [pos[:, 1]], [np.ones(len(pos), np.int64)]
    for u in np.unique(pos[:, 0]).tolist():
        k = int((pos[:, 0] == u).sum())
        if graph.user_degree(u) >= graph.num_items:
            continue
        users.append(np.full(k, u))
        items.append(sample_negatives(graph, u, k, rng))
        labels.append(np.zeros(k, np.int64))
    return CtrSet(np.concatenate(users).astype(np.int64), np.concatenate(items).astype(np.int64),
                  np.concatenate(labels))


def ctr_scores(params: ParameterSet, cache: NeighborhoodCache, data: CtrSet,
               config: ModelConfig | None = None) -> np.ndarray:
    return score_pairs(cache.flows(data.users, data.items), params, config)


def ctr_evaluate(params, cache, data: CtrSet, config=None, threshold: float = 0.5) -> CtrResult:
    s = ctr_scores(params, cache, data, config)
    return CtrResult(auc(s, data.labels), f1_at_threshold(s, data.labels, threshold), threshold)


def rank_items(scores: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Descending score, ties broken by ascending item id."""
    return items[np.lexsort((items, -scores))]


def topk_evaluate(params: ParameterSet, graph: InteractionGraph, split: DatasetSplit,
                  cache: NeighborhoodCache, ks=DEFAULT_KS, stage: str = "test",
                  exclude_eval: bool = True, config: ModelConfig | None = None,
                  keep_per_user: bool = False, pair_budget: int = 8192) -> RankingResult:
    """Full ranking over every item the user has not trained on.

    On the test stage the user's eval positives are excluded too (unless
    ``exclude_eval`` is off). Users without relevant items are skipped.
    """
    target = split.test if stage == "test" else split.eval
    relevant = _positives_by_user(target)
    excluded = _positives_by_user(split.train)
    if stage == "test" and exclude_eval:
        for u, items in _positives_by_user(split.eval).items():
            excluded.setdefault(u, set()).update(items)
    users = sorted(relevant)
    n_items = graph.num_items
    all_items = np.arange(n_items, dtype=np.int64)
    rec = {k: [] for k in ks}
    ndc = {k: [] for k in ks}
    per_user = {}
    chunk = max(1, pair_budget // max(n_items, 1))
    for lo in range(0, len(users), chunk):
        block = users[lo:lo + chunk]
        us = np.repeat(np.asarray(block, dtype=np.int64), n_items)
        its = np.tile(all_items, len(block))
        scores = score_pairs(cache.flows(us, its), params, config).reshape(len(block), n_items)
        for row, u in enumerate(block):
            keep = np.ones(n_items, dtype=bool)
            if u in excluded:
                keep[list(excluded[u])] = False
            ranked = rank_items(scores[row, keep], all_items[keep])[: max(ks)].tolist()
            rel = relevant[u]
            for k in ks:
                rec[k].append(recall_at_k(ranked, rel, k))
                ndc[k].append(ndcg_at_k(ranked, rel, k))
            if keep_per_user:
                per_user[u] = ranked
    return RankingResult(
        ks=tuple(ks),
        recall={k: float(np.mean(v)) if v else float("nan") for k, v in rec.items()},
        ndcg={k: float(np.mean(v)) if v else float("nan") for k, v in ndc.items()},
        n_users=len(users),
        per_user=per_user,
    )


def _positives_by_user(edges: np.ndarray) -> dict:
    out: dict = {}
    for u, i in edges[edges[:, 2] == 1][:, :2].tolist():
        out.setdefault(u, set()).add(i)
    return out


def monitored_metric(task: str) -> str:
    return "auc" if task == "ctr" else "recall@20"


def run_once(graph: InteractionGraph, kg: KnowledgeGraph, model_cfg: ModelConfig,
             train_cfg: TrainConfig, seed: int, task: str = "both", ks=DEFAULT_KS,
             split: DatasetSplit | None = None) -> dict:
    """Split, train with early stopping on the eval split, score the test split."""
    split = split_dataset(graph, seed) if split is None else split
    cache = evaluation_cache(graph, kg, split, model_cfg, seed)
    eval_ctr = ctr_set(graph, split.eval, [seed, 2])

    if task == "ctr":
        def evaluator(p):
            return auc(ctr_scores(p, cache, eval_ctr, model_cfg), eval_ctr.labels)
    else:
        def evaluator(p):
            return topk_evaluate(p, graph, split, cache, ks=(20,), stage="eval",
                                 config=model_cfg).recall[20]

    res = train(split, graph, kg, model_cfg, train_cfg, seed, evaluator=evaluator)
    out = {
        "seed": seed,
        "task": task,
        "monitor": monitored_metric(task),
        "best_epoch": res.best_epoch,
        "epochs_run": len(res.history),
        "best_eval_metric": res.best_metric,
        "mean_epoch_seconds": res.mean_epoch_seconds,
        "history": res.history,
    }
    out.update(test_metrics(res.params, graph, split, cache, model_cfg, seed, task, ks))
    out["_params"] = res.params
    return out


def test_metrics(params: ParameterSet, graph: InteractionGraph, split: DatasetSplit,
                 cache: NeighborhoodCache, model_cfg: ModelConfig, seed: int,
                 task: str = "both", ks=DEFAULT_KS) -> dict:
    """Test-split CTR and Top-K metrics with the run's frozen negatives."""
    out = {}
    if task in ("ctr", "both"):
        ctr = ctr_evaluate(params, cache, ctr_set(graph, split.test, [seed, 3]), model_cfg)
        out["auc"], out["f1"] = ctr.auc, ctr.f1
    if task in ("topk", "both"):
        rk = topk_evaluate(params, graph, split, cache, ks=ks, config=model_cfg)
        for k in ks:
            out[f"recall@{k}"] = rk.recall[k]
            out[f"ndcg@{k}"] = rk.ndcg[k]
    return out


def evaluation_cache(graph: InteractionGraph, kg: KnowledgeGraph, split: DatasetSplit,
                     model_cfg: ModelConfig, seed: int) -> NeighborhoodCache:
    """Neighborhoods over the training subgraph, sampled once per split seed."""
    return NeighborhoodCache(graph.restrict(split.train), kg, model_cfg.sample_sizes,
                             model_cfg.L, seed=[seed, 1])


def run_corruption_sweep(graph: InteractionGraph, kg: KnowledgeGraph, model_cfg: ModelConfig,
                         train_cfg: TrainConfig, ratios, seeds, metric: str = "recall@20",
                         task: str = "topk") -> list[dict]:
    """Train a fresh model per (ratio, seed) on a corrupted KG.

    Returns one row per ratio with the per-seed values, mean and
    population std of ``metric``.
    """
    rows = []
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"ratio {ratio} outside [0, 1]")
        values = []
        for seed in seeds:
            bad = corrupt_kg(kg, ratio, seed)
            values.append(run_once(graph, bad, model_cfg, train_cfg, seed, task)[metric])
        rows.append({"ratio": ratio, "metric": metric, "values": values,
                     "mean": float(np.mean(values)), "std": float(np.std(values))})
    return rows
