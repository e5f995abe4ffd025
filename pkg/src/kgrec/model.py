"""Collaboratively guided knowledge-graph recommender: parameters and forward pass.

The forward pass works on batched node flows (see :mod:`kgrec.sampler`)
and is written in float64 torch so that autograd provides exact gradients.
Every primitive below accepts arbitrary leading batch axes.

Pipeline for a target pair ``(u, i)``:

1. summarize the sampled items of ``u`` and users of ``i`` with
   multi-head bilinear attention through the interaction relation matrix,
   then merge each summary into its node with the aggregator ``g``;
2. encode the updated user and item vectors into a guidance signal ``f``;
3. walk the sampled KG layers from the deepest hop back to the item; each
   frontier node attends over its sampled tails with relation matrices
   gated by the signal, then merges the result with ``g``;
4. score the pair with an inner product.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

DTYPE = torch.float64

ABLATIONS = frozenset({
    "no_EI", "no_IL", "no_ATT", "no_CG", "no_HE", "no_KG",
    "guidance_NE", "guidance_PF", "guidance_AG",
})
AGGREGATORS = ("sum", "concat", "neighbor")
ENCODERS = ("sum", "pmax", "comb")
ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    L: int = 1
    H: int = 2
    aggregator: str = "concat"
    encoder: str = "comb"
    alpha: float = 0.5
    activation: str = "relu"
    final_activation: str = "tanh"
    user_sample: int = 8
    item_sample: int = 8
    kg_sample: int = 8
    broadcast: str = "row"          # "row": (f*M)[j,k] = f[j] M[j,k]; "column": f[k] M[j,k]
    tail_updated: bool = True       # aggregate hop-(l+1) outputs rather than base tails
    share_aggregators: bool = False
    ablations: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "ablations", frozenset(self.ablations))
        if self.d < 1 or self.L < 0 or self.H < 1:
            raise ValueError("need d >= 1, L >= 0, H >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.activation not in ACTIVATIONS or self.final_activation not in ACTIVATIONS:
            raise ValueError("unknown activation")
        if self.broadcast not in ("row", "column"):
            raise ValueError("broadcast must be 'row' or 'column'")
        unknown = self.ablations - ABLATIONS
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")

    @property
    def sample_sizes(self) -> tuple[int, int, int]:
        return self.user_sample, self.item_sample, self.kg_sample

    @property
    def depth(self) -> int:
        """Number of KG hops the forward pass actually uses."""
        if "no_KG" in self.ablations:
            return 0
        if "no_HE" in self.ablations:
            return min(self.L, 1)
        return self.L

    def site_names(self) -> list[str]:
        if self.share_aggregators:
            return ["shared"]
        return ["user", "item"] + [f"kg{l}" for l in range(1, self.L + 1)]

    def site(self, name: str) -> str:
        return "shared" if self.share_aggregators else name

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ablations"] = sorted(self.ablations)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["ablations"] = frozenset(data.get("ablations", ()))
        return cls(**data)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


class ParameterSet:
    """All trainable tensors, keyed by name.

    ``user``/``item``/``entity`` are embedding tables. ``relation`` has
    shape ``(R + 2, H, d, d)``: the KG relations, then the self-loop
    relation, then the user-item interaction relation. Every aggregation
    site ``s`` owns ``W_s`` and ``b_s``.
    """

    def __init__(self, tensors: dict, num_relations: int, config: ModelConfig):
        self.tensors = tensors
        self.num_relations = num_relations
        self.config = config

    @property
    def interaction_relation(self) -> int:
        return self.num_relations + 1

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def clone(self) -> "ParameterSet":
        return ParameterSet({k: v.detach().clone() for k, v in self.tensors.items()},
                            self.num_relations, self.config)

    def requires_grad_(self, flag: bool = True) -> "ParameterSet":
        for v in self.tensors.values():
            v.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for v in self.tensors.values():
            v.grad = None

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.tensors.values())

    def save(self, path) -> None:
        """Write ``manifest.json`` plus raw little-endian float64 ``tensors.bin``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries, offset = [], 0
        with open(path / "tensors.bin", "wb") as fh:
            for name, t in self.tensors.items():
                arr = t.detach().cpu().numpy().astype("<f8", copy=False)
                fh.write(np.ascontiguousarray(arr).tobytes())
                entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
                offset += arr.nbytes
        manifest = {
            "format": "kgrec-parameters",
            "version": 1,
            "dtype": "<f8",
            "num_relations": self.num_relations,
            "config": self.config.to_dict(),
            "tensors": entries,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ParameterSet":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("format") != "kgrec-parameters" or manifest.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint")
        raw = (path / "tensors.bin").read_bytes()
        tensors = {}
        for e in manifest["tensors"]:
            n = int(np.prod(e["shape"]))
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
            tensors[e["name"]] = torch.tensor(arr.astype(np.float64), dtype=DTYPE)
        return cls(tensors, manifest["num_relations"], ModelConfig.from_dict(manifest["config"]))


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def xavier_init(num_users: int, num_items: int, num_entities: int, num_relations: int,
                config: ModelConfig, seed: int) -> ParameterSet:
    """Glorot-uniform parameters; biases start at zero."""
    rng = np.random.default_rng(seed)
    d, H = config.d, config.H
    t = {}
    t["user"] = xavier_uniform(rng, (num_users, d), num_users, d)
    t["item"] = xavier_uniform(rng, (num_items, d), num_items, d)
    t["entity"] = xavier_uniform(rng, (num_entities, d), num_entities, d)
    t["relation"] = xavier_uniform(rng, (num_relations + 2, H, d, d), d, d)
    width = 2 * d if config.aggregator == "concat" else d
    for s in config.site_names():
        t[f"W_{s}"] = xavier_uniform(rng, (d, width), width, d)
        t[f"b_{s}"] = np.zeros(d)
    tensors = {k: torch.tensor(v, dtype=DTYPE) for k, v in t.items()}
    return ParameterSet(tensors, num_relations, config)


# -- primitives ---------------------------------------------------------------

def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=DTYPE)


def collaboration_score(v_a, M, v_b):
    """Bilinear score ``v_a^T M v_b``."""
    return torch.einsum("...d,...de,...e->...", _t(v_a), _t(M), _t(v_b))


def softmax_normalize(scores, dim: int = -1):
    scores = _t(scores)
    if scores.shape[dim] == 0:
        raise ValueError("softmax over an empty group")
    return torch.softmax(scores, dim=dim)


def uniform_weights(scores, dim: int = -1):
    n = scores.shape[dim]
    return torch.ones_like(scores) / n


def activate(x, kind: str):
    if kind == "relu":
        return torch.relu(x)
    if kind == "tanh":
        return torch.tanh(x)
    return x


def aggregate(self_emb, summary, W, b, kind: str = "concat", activation: str = "relu"):
    self_emb, summary, W, b = _t(self_emb), _t(summary), _t(W), _t(b)
    if kind == "sum":
        z = (self_emb + summary) @ W.T
    elif kind == "concat":
        z = torch.cat([self_emb, summary], dim=-1) @ W.T
    elif kind == "neighbor":
        z = summary @ W.T
    else:
        raise ValueError(f"unknown aggregator {kind!r}")
    return activate(z + b, activation)


def encode_guidance(v_u, v_i, kind: str = "comb", alpha: float = 0.5):
    v_u, v_i = _t(v_u), _t(v_i)
    if kind == "sum":
        return v_u + v_i
    if kind == "pmax":
        return torch.maximum(v_u, v_i)
    if kind == "comb":
        return alpha * v_u + (1.0 - alpha) * v_i
    raise ValueError(f"unknown encoder {kind!r}")


def guided_relation_matrix(signal, M, broadcast: str = "row"):
    signal, M = _t(signal), _t(M)
    if broadcast == "row":
        return signal[..., :, None] * M
    return signal[..., None, :] * M


def head_attention_scores(center, M_heads, neighbors):
    """Per-head bilinear scores: ``(..., n, H)`` from center ``(..., d)``,
    ``M_heads`` ``(H, d, d)`` and neighbors ``(..., n, d)``."""
    proj = torch.einsum("...d,hde->...he", center, M_heads)
    return torch.einsum("...he,...ne->...nh", proj, neighbors)


def weighted_head_mean(weights, values):
    """``(1/H) sum_h sum_n w[n, h] v[n]`` for weights ``(..., n, H)``."""
    H = weights.shape[-1]
    return torch.einsum("...nh,...nd->...d", weights, values) / H


def summarize_neighbors(center, neighbor_embs, M_heads, uniform: bool = False):
    center, neighbor_embs, M_heads = _t(center), _t(neighbor_embs), _t(M_heads)
    scores = head_attention_scores(center, M_heads, neighbor_embs)
    w = uniform_weights(scores, dim=-2) if uniform else softmax_normalize(scores, dim=-2)
    return weighted_head_mean(w, neighbor_embs)


def knowledge_scores(head_emb, signal, M_tails, tail_embs, broadcast: str = "row"):
    """Guided scores ``head^T (f * M_r) tail`` per tail and head.

    ``head_emb`` and ``signal`` are ``(..., d)``, ``M_tails`` holds the
    relation matrices of each tail ``(..., n, H, d, d)`` and ``tail_embs``
    is ``(..., n, d)``. Returns ``(..., n, H)``.
    """
    if broadcast == "row":
        left, right = head_emb * signal, tail_embs
    else:
        left, right = head_emb, tail_embs * signal[..., None, :]
    mt = torch.einsum("...nhde,...ne->...nhd", M_tails, right)
    return torch.einsum("...d,...nhd->...nh", left, mt)


def knowledge_scores_by_relation(head_emb, signal, M_all, rel_ids, tail_embs,
                                 broadcast: str = "row"):
    """Same scores as :func:`knowledge_scores`, projecting the head through
    every relation once and gathering per tail, which avoids materializing
    one ``d x d`` matrix per sampled tail.

    ``M_all`` is ``(R', H, d, d)`` and ``rel_ids`` an int tensor ``(..., n)``.
    """
    if broadcast == "row":
        left, right = head_emb * signal, tail_embs
    else:
        left, right = head_emb, tail_embs * signal[..., None, :]
    proj = torch.einsum("...d,rhde->...rhe", left, M_all)          # (..., R', H, d)
    idx = rel_ids[..., None, None].expand(*rel_ids.shape, proj.shape[-2], proj.shape[-1])
    picked = torch.gather(proj, -3, idx)                           # (..., n, H, d)
    return torch.einsum("...nhe,...ne->...nh", picked, right)


def knowledge_attention(head_emb, signal, M_tails, tail_embs, broadcast: str = "row",
                        uniform: bool = False):
    """Normalized weights ``(..., n, H)``; all tails form one softmax group."""
    head_emb, signal, M_tails, tail_embs = map(_t, (head_emb, signal, M_tails, tail_embs))
    scores = knowledge_scores(head_emb, signal, M_tails, tail_embs, broadcast)
    return uniform_weights(scores, dim=-2) if uniform else softmax_normalize(scores, dim=-2)


# -- forward ------------------------------------------------------------------

class _Touched:
    """Rows of each table read by a forward pass (valid neighbors only)."""

    def __init__(self):
        self.rows = {"user": [], "item": [], "entity": [], "relation": []}
        self.sites = set()

    def add(self, name, idx, mask=None):
        idx = np.asarray(idx)
        if mask is not None:
            idx = idx[np.asarray(mask)]
        self.rows[name].append(idx.reshape(-1))

    def finalize(self) -> dict:
        out = {k: np.unique(np.concatenate(v)) if v else np.zeros(0, np.int64)
               for k, v in self.rows.items()}
        out["sites"] = sorted(self.sites)
        return out


@dataclass
class ForwardResult:
    scores: torch.Tensor
    trace: dict
    touched: dict


def _index(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.int64))


def forward(flow, params: ParameterSet, config: ModelConfig | None = None,
            signal_override=None, keep_trace: bool = False) -> ForwardResult:
    """Score every pair of a batched node flow.

    ``signal_override`` replaces the encoded guidance signal (a ``(d,)`` or
    ``(B, d)`` tensor); the ``no_CG`` ablation is this with an all-ones
    signal.
    """
    cfg = params.config if config is None else config
    P = params.tensors
    abl = cfg.ablations
    depth = cfg.depth
    if flow.depth < depth:
        raise ValueError(f"flow has {flow.depth} KG layers, config needs {depth}")
    B = len(flow)
    d, H = cfg.d, cfg.H
    uniform = "no_ATT" in abl
    touched = _Touched()
    trace: dict = {}

    def site(name, v1, v2, final):
        s = cfg.site(name)
        touched.sites.add(s)
        act = cfg.final_activation if final else cfg.activation
        return aggregate(v1, v2, P[f"W_{s}"], P[f"b_{s}"], cfg.aggregator, act)

    def attend(scores):
        return uniform_weights(scores, dim=-2) if uniform else softmax_normalize(scores, dim=-2)

    users, items = flow.center_user, flow.center_item
    touched.add("user", users)
    touched.add("item", items)
    vu0 = P["user"][_index(users)]
    vi0 = P["item"][_index(items)]
    r_star = params.interaction_relation
    M_star = P["relation"][r_star]
    if not uniform:
        touched.add("relation", [r_star])

    interactive = "no_EI" not in abl
    joint = "no_IL" in abl and interactive and depth >= 1

    if interactive:
        nb_u = P["item"][_index(flow.user_items)]
        ok_u = torch.as_tensor(flow.user_items_valid, dtype=DTYPE)[:, None]
        touched.add("item", flow.user_items, flow.user_items_valid)
        w_u = attend(head_attention_scores(vu0, M_star, nb_u))
        vu = site("user", vu0, weighted_head_mean(w_u, nb_u) * ok_u, final=False)
        if keep_trace:
            trace["user_attention"] = w_u
        if joint:
            vi = vi0
        else:
            nb_i = P["user"][_index(flow.item_users)]
            ok_i = torch.as_tensor(flow.item_users_valid, dtype=DTYPE)[:, None]
            touched.add("user", flow.item_users, flow.item_users_valid)
            w_i = attend(head_attention_scores(vi0, M_star, nb_i))
            vi = site("item", vi0, weighted_head_mean(w_i, nb_i) * ok_i, final=depth == 0)
            if keep_trace:
                trace["item_attention"] = w_i
    else:
        vu, vi = vu0, vi0

    if signal_override is not None or "no_CG" in abl:
        sig = torch.ones(d, dtype=DTYPE) if signal_override is None else _t(signal_override)
        signal = sig.expand(B, d)
    else:
        gu = vu0 if abl & {"guidance_NE", "guidance_AG"} else vu
        gi = vi0 if abl & {"guidance_NE", "guidance_PF"} else vi
        signal = encode_guidance(gu, gi, cfg.encoder, cfg.alpha)
    if keep_trace:
        trace["signal"] = signal

    vi_final = extract_knowledge(flow, params, cfg, signal, vi, vi0, depth, joint,
                                 touched, trace if keep_trace else None)
    scores = (vu * vi_final).sum(-1)
    return ForwardResult(scores, trace, touched.finalize())


def extract_knowledge(flow, params, cfg, signal, vi, vi0=None, depth=None, joint=False,
                      touched=None, trace=None):
    """Guided KG extraction from the deepest hop back to the item.

    Hop ``l`` lets every node of layer ``l-1`` (layer 0 is the item) attend
    over its sampled tails in layer ``l``. Scores always use base
    embeddings; the aggregated tail values are the outputs of hop ``l+1``
    when ``cfg.tail_updated`` is set. Returns the enriched item vectors.
    """
    P = params.tensors
    depth = cfg.depth if depth is None else depth
    if depth == 0:
        return vi
    touched = _Touched() if touched is None else touched
    uniform = "no_ATT" in cfg.ablations
    B, d, H, s = len(flow), cfg.d, cfg.H, flow.kg_size
    values = None
    for l in range(depth, 0, -1):
        rel_ids = flow.kg_relations[l - 1]
        ent_ids = flow.kg_entities[l - 1]
        n_par = rel_ids.shape[1] // s
        if l == 1:
            head = vi[:, None, :]
        else:
            head = P["entity"][_index(flow.kg_entities[l - 2])]
        tails = P["entity"][_index(ent_ids)].reshape(B, n_par, s, d)
        touched.add("entity", ent_ids)
        if values is not None and cfg.tail_updated:
            vals = values.reshape(B, n_par, s, d)
        else:
            vals = tails
        if uniform:
            scores = torch.zeros(B, n_par, s, H, dtype=DTYPE)
        else:
            touched.add("relation", rel_ids)
            rid = _index(rel_ids).reshape(B, n_par, s)
            if head.shape[1] != n_par:
                head = head.expand(B, n_par, d)
            scores = knowledge_scores_by_relation(head, signal[:, None, :], P["relation"], rid,
                                                  tails, cfg.broadcast)
        self_emb = head
        if joint and l == 1:
            nb = P["user"][_index(flow.item_users)]
            touched.add("user", flow.item_users, flow.item_users_valid)
            if uniform:
                s_ui = torch.zeros(B, nb.shape[1], H, dtype=DTYPE)
            else:
                s_ui = head_attention_scores(vi0, P["relation"][params.interaction_relation], nb)
            mask = torch.as_tensor(flow.item_users_valid)[:, None, None]
            s_ui = s_ui.masked_fill(~mask, float("-inf"))
            scores = torch.cat([scores, s_ui[:, None]], dim=2)
            vals = torch.cat([vals, nb[:, None]], dim=2)
        if uniform:
            if joint and l == 1:
                ok = torch.isfinite(scores).to(DTYPE)
                w = ok / ok.sum(dim=2, keepdim=True)
            else:
                w = uniform_weights(scores, dim=2)
        else:
            w = softmax_normalize(scores, dim=2)
        summary = weighted_head_mean(w, vals)
        s_name = cfg.site(f"kg{l}")
        touched.sites.add(s_name)
        act = cfg.final_activation if l == 1 else cfg.activation
        values = aggregate(self_emb, summary, P[f"W_{s_name}"], P[f"b_{s_name}"],
                           cfg.aggregator, act)
        if trace is not None:
            trace.setdefault("kg_attention", {})[l] = w
    return values[:, 0]


def score_pairs(flow, params, config=None, batch_size: int = 4096) -> np.ndarray:
    """Scores without autograd, chunked to bound memory."""
    out = []
    with torch.no_grad():
        for lo in range(0, len(flow), batch_size):
            part = flow.select(np.arange(lo, min(lo + batch_size, len(flow))))
            out.append(forward(part, params, config).scores.numpy())
    return np.concatenate(out) if out else np.zeros(0)
