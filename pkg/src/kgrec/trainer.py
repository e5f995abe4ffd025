"""Loss, gradients, sparse Adam and the training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .graphs import DatasetSplit, InteractionGraph, KnowledgeGraph, sample_negatives
from .model import DTYPE, ModelConfig, ParameterSet, forward, xavier_init
from .sampler import build_flows

log = logging.getLogger(__name__)

EMBEDDING_TABLES = ("user", "item", "entity", "relation")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 5e-3
    l2_lambda: float = 1e-5
    max_epochs: int = 50
    patience: int = 10
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_seed: int = 0
    literal_loss: bool = False
    exclude_center: bool = True

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.learning_rate <= 0 or self.patience < 1 or self.batch_size < 2:
            raise ValueError("need learning_rate > 0, patience >= 1, batch_size >= 2")
        if not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        return out


def example_loss(score, label):
    """Cross-entropy of ``sigmoid(score)`` against a 0/1 label, in log-sum-exp form."""
    score = torch.as_tensor(score, dtype=DTYPE)
    label = torch.as_tensor(label, dtype=DTYPE)
    return F.binary_cross_entropy_with_logits(score, label, reduction="none")


def regularizer(params: ParameterSet, touched: dict, lam: float):
    """``lam * ||theta||^2`` over the rows and sites a batch touched."""
    total = torch.zeros((), dtype=DTYPE)
    if lam == 0:
        return total
    for name in EMBEDDING_TABLES:
        rows = touched[name]
        if len(rows):
            total = total + params[name][torch.as_tensor(rows)].pow(2).sum()
    for s in touched["sites"]:
        total = total + params[f"W_{s}"].pow(2).sum() + params[f"b_{s}"].pow(2).sum()
    return lam * total


def check_balanced(users, labels) -> None:
    users = np.asarray(users)
    labels = np.asarray(labels)
    pos = np.bincount(users[labels == 1], minlength=users.max() + 1 if len(users) else 0)
    neg = np.bincount(users[labels == 0], minlength=users.max() + 1 if len(users) else 0)
    if not np.array_equal(pos, neg):
        raise ValueError("batch is not balanced: every user needs as many negatives as positives")


def batch_loss(flow, labels, params: ParameterSet, config: ModelConfig | None = None,
               lam: float = 0.0, literal: bool = False, check_balance: bool = True):
    """Summed cross-entropy plus touched-slice L2. Returns ``(loss, touched)``.

    With ``literal`` the negatives' terms are subtracted, exactly as the
    objective is sometimes printed; that objective is unbounded below.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        return torch.zeros((), dtype=DTYPE), None
    if check_balance:
        check_balanced(flow.center_user, labels)
    res = forward(flow, params, config)
    j = example_loss(res.scores, labels)
    if literal:
        sign = torch.as_tensor(np.where(labels == 1, 1.0, -1.0), dtype=DTYPE)
        data = (sign * j).sum()
    else:
        data = j.sum()
    return data + regularizer(params, res.touched, lam), res.touched


@dataclass
class GradientSet:
    grads: dict
    touched: dict
    loss: float


def backward(flow, labels, params: ParameterSet, config: ModelConfig | None = None,
             lam: float = 0.0, literal: bool = False, check_balance: bool = True) -> GradientSet:
    """Exact gradient of :func:`batch_loss` by reverse-mode autodiff."""
    params.requires_grad_(True)
    params.zero_grad()
    loss, touched = batch_loss(flow, labels, params, config, lam, literal, check_balance)
    if not torch.isfinite(loss):
        params.requires_grad_(False)
        raise TrainingDiverged(f"non-finite batch loss {float(loss.detach())}")
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name, t in params.tensors.items():
        grads[name] = torch.zeros_like(t) if t.grad is None else t.grad.detach().clone()
        if not torch.isfinite(grads[name]).all():
            params.requires_grad_(False)
            raise TrainingDiverged(f"non-finite gradient in {name}")
    params.zero_grad()
    params.requires_grad_(False)
    if touched is None:
        touched = {k: np.zeros(0, np.int64) for k in EMBEDDING_TABLES}
        touched["sites"] = []
    return GradientSet(grads, touched, float(loss.detach()))


class AdamState:
    def __init__(self, params: ParameterSet):
        self.m = {k: torch.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0


def adam_step(params: ParameterSet, grads: GradientSet, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam on the touched slices only; moments elsewhere stay put."""
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    with torch.no_grad():
        for name, p in params.tensors.items():
            g = grads.grads[name]
            if name in EMBEDDING_TABLES:
                rows = grads.touched[name]
                if len(rows) == 0:
                    continue
                idx = torch.as_tensor(rows)
            elif name[2:] in grads.touched["sites"]:
                idx = None
            else:
                continue
            if idx is None:
                m, v, gg, pp = state.m[name], state.v[name], g, p
            else:
                m, v, gg, pp = state.m[name][idx], state.v[name][idx], g[idx], p[idx]
            m = b1 * m + (1 - b1) * gg
            v = b2 * v + (1 - b2) * gg * gg
            pp = pp - lr * (m / c1) / (torch.sqrt(v / c2) + eps)
            if idx is None:
                state.m[name], state.v[name] = m, v
                p.copy_(pp)
            else:
                state.m[name][idx], state.v[name][idx] = m, v
                p[idx] = pp


class EarlyStopper:
    """Stop once the metric has not beaten its best for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, metric: float) -> tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        if metric > self.best:
            self.best, self.best_epoch, self.bad = metric, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


@dataclass
class TrainResult:
    params: ParameterSet
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("nan")

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean([h["seconds"] for h in self.history])) if self.history else 0.0


def epoch_examples(train_graph: InteractionGraph, rng: np.random.Generator) -> np.ndarray:
    """One fresh negative per training positive, grouped as (user, pos, neg) rows."""
    rows = []
    for u in range(train_graph.num_users):
        pos = train_graph.user_adjacency[u]
        if len(pos) == 0 or len(pos) >= train_graph.num_items:
            continue
        neg = sample_negatives(train_graph, u, len(pos), rng)
        rows.append(np.stack([np.full(len(pos), u), pos, neg], axis=1))
    return np.concatenate(rows) if rows else np.zeros((0, 3), np.int64)


def train(split: DatasetSplit, graph: InteractionGraph, kg: KnowledgeGraph,
          model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int,
          evaluator=None, init: ParameterSet | None = None) -> TrainResult:
    """Fit on ``split.train`` with fresh negatives and node flows every epoch.

    ``evaluator(params) -> float`` supplies the monitored metric after each
    epoch; the parameters of the best epoch are returned. Without an
    evaluator training runs for ``max_epochs`` and keeps the last epoch.
    """
    train_graph = graph.restrict(split.train)
    params = init.clone() if init is not None else xavier_init(
        graph.num_users, graph.num_items, kg.num_entities, kg.num_relations, model_cfg, seed)
    params.config = model_cfg
    state = AdamState(params)
    rng = np.random.default_rng([seed, train_cfg.grad_seed])
    stopper = EarlyStopper(train_cfg.patience)
    result = TrainResult(params.clone())
    pairs_per_batch = max(1, train_cfg.batch_size // 2)

    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        rows = epoch_examples(train_graph, rng)
        rows = rows[rng.permutation(len(rows))]
        total = 0.0
        for lo in range(0, len(rows), pairs_per_batch):
            chunk = rows[lo:lo + pairs_per_batch]
            users = np.concatenate([chunk[:, 0], chunk[:, 0]])
            items = np.concatenate([chunk[:, 1], chunk[:, 2]])
            labels = np.concatenate([np.ones(len(chunk), np.int64), np.zeros(len(chunk), np.int64)])
            flow = build_flows(train_graph, kg, users, items, model_cfg.sample_sizes,
                               model_cfg.L, rng, train_cfg.exclude_center)
            grads = backward(flow, labels, params, model_cfg, train_cfg.l2_lambda,
                             train_cfg.literal_loss, check_balance=True)
            adam_step(params, grads, state, train_cfg.learning_rate,
                      train_cfg.adam_betas, train_cfg.adam_eps)
            total += grads.loss
        if not np.isfinite(total) or not params.is_finite():
            raise TrainingDiverged(f"epoch {epoch}: loss {total}")
        metric = float(evaluator(params)) if evaluator is not None else float("nan")
        seconds = time.perf_counter() - t0
        result.history.append({"epoch": epoch, "loss": total, "metric": metric,
                               "seconds": seconds})
        log.debug("epoch %d loss %.4f metric %.4f (%.2fs)", epoch, total, metric, seconds)
        if evaluator is None:
            result.params, result.best_epoch = params.clone(), epoch
            continue
        improved, stop = stopper.update(epoch, metric)
        if improved:
            result.params = params.clone()
            result.best_epoch, result.best_metric = epoch, metric
        if stop:
            break
    result.params.config = model_cfg
    return result


def write_history_csv(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss,metric,seconds\n")
        for h in history:
            fh.write(f"{h['epoch']},{h['loss']!r},{h['metric']!r},{h['seconds']:.6f}\n")
