"""Experiment orchestration: split seeds x sweep cells, result files, aggregates."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .evaluation import DEFAULT_KS, monitored_metric, run_once
from .graphs import InteractionGraph, KnowledgeGraph, corrupt_kg, load_interactions, load_kg
from .metrics import wilcoxon_signed_rank
from .model import ModelConfig, ParameterSet, forward
from .sampler import NeighborhoodCache
from .trainer import TrainConfig

log = logging.getLogger(__name__)

# sweep axis -> (short tag used in cell names, where the value goes)
SWEEP_AXES = {
    "L": ("L", "model"),
    "encoder": ("f", "model"),
    "aggregator": ("g", "model"),
    "d": ("d", "model"),
    "learning_rate": ("lr", "train"),
    "ablation": ("abl", "model"),
    "corruption": ("c", "data"),
}
TASKS = ("ctr", "topk", "both")


@dataclass
class ExperimentSpec:
    ratings: str = ""
    kg: str = ""
    has_header: bool = False
    task: str = "both"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_splits: int = 5
    base_seed: int = 0
    sweep: dict = field(default_factory=dict)
    ks: tuple = DEFAULT_KS
    compare: list = field(default_factory=list)
    significance_metric: str = ""
    out_dir: str = "results"
    plot: bool = False

    def __post_init__(self):
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        for axis, values in self.sweep.items():
            if axis not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {axis!r}; known: {sorted(SWEEP_AXES)}")
            if len(values) == 0:
                raise ValueError(f"sweep axis {axis!r} is empty")
        for pair in self.compare:
            if len(pair) != 2:
                raise ValueError("compare entries are (cell_a, cell_b) pairs")

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + k for k in range(self.n_splits)]

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("model", "train")}
        out["model"] = self.model.to_dict()
        out["train"] = self.train.to_dict()
        out["ks"] = list(self.ks)
        out["sweep"] = {k: list(v) for k, v in self.sweep.items()}
        out["compare"] = [list(p) for p in self.compare]
        return out


@dataclass
class Cell:
    name: str
    axes: dict
    model: ModelConfig
    train: TrainConfig
    corruption: float = 0.0


def _tag(value) -> str:
    if isinstance(value, (list, tuple, frozenset, set)):
        return "+".join(sorted(value)) or "none"
    return str(value)


def _ablation_set(value) -> frozenset:
    if isinstance(value, str):
        value = [v for v in value.split("+") if v and v != "none"]
    return frozenset(value)


def expand_cells(spec: ExperimentSpec) -> list[Cell]:
    """Cross product of the sweep axes in declaration order."""
    axes = list(spec.sweep)
    if not axes:
        return [Cell("base", {}, spec.model, spec.train)]
    cells = []
    for combo in itertools.product(*(spec.sweep[a] for a in axes)):
        model, train, corruption = spec.model, spec.train, 0.0
        values = dict(zip(axes, combo))
        for axis, value in values.items():
            where = SWEEP_AXES[axis][1]
            if axis == "ablation":
                model = model.with_(ablations=model.ablations | _ablation_set(value))
            elif where == "model":
                model = model.with_(**{axis: value})
            elif where == "train":
                train = replace(train, **{axis: value})
            else:
                corruption = float(value)
        name = "_".join(f"{SWEEP_AXES[a][0]}{_tag(v)}" for a, v in values.items())
        cells.append(Cell(name, {a: _tag(v) for a, v in values.items()}, model, train, corruption))
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise ValueError("sweep values produce duplicate cell names")
    return cells


def load_dataset(ratings, kg_path, has_header: bool = False):
    graph = load_interactions(ratings, has_header)
    kg = load_kg(kg_path).align_items(graph.num_items)
    return graph, kg


def jsonable(x):
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def run_cell(graph: InteractionGraph, kg: KnowledgeGraph, cell: Cell, seed: int,
             task: str, ks=DEFAULT_KS) -> dict:
    """One split seed of one cell. Failures come back as a record, not an exception."""
    record = {"cell": cell.name, "axes": cell.axes, "seed": seed,
              "model": cell.model.to_dict(), "train": cell.train.to_dict()}
    try:
        kg_used = corrupt_kg(kg, cell.corruption, seed) if cell.corruption > 0 else kg
        res = run_once(graph, kg_used, cell.model, cell.train, seed, task, ks)
    except Exception as exc:  # recorded per cell, the matrix carries on
        log.error("cell %s seed %d failed: %s", cell.name, seed, exc)
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                      traceback=traceback.format_exc())
        return record
    res.pop("_params")
    record["status"] = "ok"
    record.update(res)
    return record


def metric_names(task: str, ks=DEFAULT_KS) -> list[str]:
    names = []
    if task in ("ctr", "both"):
        names += ["auc", "f1"]
    if task in ("topk", "both"):
        names += [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]
    return names


def _fmt(x) -> str:
    return repr(float(x))


def summarize(records: list[dict], metric: str) -> tuple[float, float, list]:
    """Mean and population std over the successful runs."""
    vals = [r[metric] for r in records if r.get("status") == "ok"]
    if not vals:
        return float("nan"), float("nan"), vals
    return float(np.mean(vals)), float(np.std(vals)), vals


def aggregate_table(cells: list[Cell], runs: dict, spec: ExperimentSpec) -> str:
    """Deterministic CSV text: one row per cell, mean and std of every metric.

    Wall-clock timing is kept out of this table (see :func:`timing_table`)
    so that reruns reproduce it byte for byte.
    """
    axes = list(spec.sweep)
    metrics = metric_names(spec.task, spec.ks)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["cell"] + axes + ["n_ok", "n_failed"]
    for m in metrics + ["best_epoch"]:
        header += [f"{m}_mean", f"{m}_std"]
    w.writerow(header)
    for cell in cells:
        recs = runs[cell.name]
        ok = [r for r in recs if r.get("status") == "ok"]
        row = [cell.name] + [cell.axes[a] for a in axes] + [len(ok), len(recs) - len(ok)]
        for m in metrics + ["best_epoch"]:
            mean, std, _ = summarize(recs, m)
            row += [_fmt(mean), _fmt(std)]
        w.writerow(row)
    return buf.getvalue()


def timing_table(cells: list[Cell], runs: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "seconds_per_epoch_mean", "seconds_per_epoch_std", "epochs_to_best_mean"])
    for cell in cells:
        t_mean, t_std, _ = summarize(runs[cell.name], "mean_epoch_seconds")
        b_mean, _, _ = summarize(runs[cell.name], "best_epoch")
        w.writerow([cell.name, f"{t_mean:.6f}", f"{t_std:.6f}", _fmt(b_mean)])
    return buf.getvalue()


def significance(runs_a: list[dict], runs_b: list[dict], metric: str) -> dict:
    """Paired Wilcoxon test over the split seeds both cells completed."""
    a = {r["seed"]: r[metric] for r in runs_a if r.get("status") == "ok"}
    b = {r["seed"]: r[metric] for r in runs_b if r.get("status") == "ok"}
    seeds = sorted(set(a) & set(b))
    if not seeds:
        raise ValueError("no paired runs to compare")
    stat, p = wilcoxon_signed_rank([a[s] for s in seeds], [b[s] for s in seeds])
    return {"metric": metric, "n_pairs": len(seeds), "statistic": stat, "p_value": p,
            "significant_at_0.05": bool(p < 0.05)}


def write_metric_csvs(out: Path, cell: str, records: list[dict], task: str, ks) -> None:
    if task in ("topk", "both"):
        with open(out / f"topk_{cell}.csv", "w") as fh:
            fh.write("k,recall,ndcg\n")
            for k in ks:
                fh.write(f"{k},{_fmt(summarize(records, f'recall@{k}')[0])},"
                         f"{_fmt(summarize(records, f'ndcg@{k}')[0])}\n")
    if task in ("ctr", "both"):
        with open(out / f"ctr_{cell}.csv", "w") as fh:
            fh.write("auc,f1\n")
            fh.write(f"{_fmt(summarize(records, 'auc')[0])},{_fmt(summarize(records, 'f1')[0])}\n")


def recall_svg(series: dict, ks) -> str:
    """Plain SVG line chart of Recall@K against K, one polyline per cell."""
    W, H, pad = 480, 320, 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    ks = list(ks)
    top = max([max(v) for v in series.values() if v] + [1e-9])

    def xy(j, v):
        x = pad + (W - 2 * pad) * (j / max(len(ks) - 1, 1))
        y = H - pad - (H - 2 * pad) * (v / top)
        return f"{x:.1f},{y:.1f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>']
    for j, k in enumerate(ks):
        x = xy(j, 0).split(",")[0]
        parts.append(f'<text x="{x}" y="{H - pad + 16}" font-size="11" '
                     f'text-anchor="middle">{k}</text>')
    parts.append(f'<text x="{W / 2}" y="{H - 6}" font-size="12" text-anchor="middle">K</text>')
    parts.append(f'<text x="6" y="{pad - 10}" font-size="12">Recall@K (max {top:.3f})</text>')
    for n, (name, vals) in enumerate(series.items()):
        c = colors[n % len(colors)]
        pts = " ".join(xy(j, v) for j, v in enumerate(vals))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{W - pad + 4}" y="{pad + 14 * n}" font-size="10" '
                     f'fill="{c}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


@dataclass
class ExperimentResult:
    out_dir: Path
    cells: list
    runs: dict
    significance: list

    @property
    def failed(self) -> int:
        return sum(r.get("status") != "ok" for recs in self.runs.values() for r in recs)


def run_experiment(spec: ExperimentSpec, graph: InteractionGraph | None = None,
                   kg: KnowledgeGraph | None = None) -> ExperimentResult:
    """Train and evaluate every (cell, split seed) and write the result files."""
    if graph is None or kg is None:
        graph, kg = load_dataset(spec.ratings, spec.kg, spec.has_header)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = expand_cells(spec)
    runs: dict = {}
    for cell in cells:
        runs[cell.name] = []
        for seed in spec.seeds:
            t0 = time.perf_counter()
            rec = run_cell(graph, kg, cell, seed, spec.task, spec.ks)
            log.info("cell %s seed %d: %s (%.1fs)", cell.name, seed, rec["status"],
                     time.perf_counter() - t0)
            (out / f"run_{cell.name}_{seed}.json").write_text(
                json.dumps(jsonable(rec), indent=1, sort_keys=True) + "\n")
            runs[cell.name].append(rec)

    (out / "aggregate.csv").write_text(aggregate_table(cells, runs, spec))
    (out / "timing.csv").write_text(timing_table(cells, runs))
    metrics = metric_names(spec.task, spec.ks)
    summary = {"spec": spec.to_dict(), "cells": {}}
    for cell in cells:
        entry = {}
        for m in metrics:
            mean, std, vals = summarize(runs[cell.name], m)
            entry[m] = {"mean": mean, "std": std, "values": vals}
        summary["cells"][cell.name] = entry
        write_metric_csvs(out, cell.name, runs[cell.name], spec.task, spec.ks)
    (out / "summary.json").write_text(json.dumps(jsonable(summary), indent=1) + "\n")

    tests = []
    if spec.compare:
        metric = spec.significance_metric or monitored_metric(spec.task)
        for a, b in spec.compare:
            if a not in runs or b not in runs:
                raise ValueError(f"compare names unknown cell: {a!r} or {b!r}")
            entry = significance(runs[a], runs[b], metric)
            tests.append({"a": a, "b": b, **entry})
        (out / "significance.json").write_text(json.dumps(tests, indent=1) + "\n")

    if spec.plot and spec.task in ("topk", "both"):
        series = {c.name: [summarize(runs[c.name], f"recall@{k}")[0] for k in spec.ks]
                  for c in cells}
        (out / "recall_vs_k.svg").write_text(recall_svg(series, spec.ks))
    return ExperimentResult(out, cells, runs, tests)


def load_runs(out_dir) -> dict:
    """Per-run records from a results directory, grouped by cell."""
    runs: dict = {}
    for path in sorted(Path(out_dir).glob("run_*.json")):
        rec = json.loads(path.read_text())
        runs.setdefault(rec["cell"], []).append(rec)
    for recs in runs.values():
        recs.sort(key=lambda r: r["seed"])
    return runs


def dump_case_study(params: ParameterSet, pair, graph: InteractionGraph, kg: KnowledgeGraph,
                    config: ModelConfig | None = None, seed: int = 0) -> dict:
    """Knowledge-attention weights of one pair with and without guidance.

    Both passes share the same cached node flow; the unguided pass feeds an
    all-ones signal. Weights are averaged over heads for readability and
    reported per head as well.
    """
    cfg = params.config if config is None else config
    u, i = int(pair[0]), int(pair[1])
    cache = NeighborhoodCache(graph, kg, cfg.sample_sizes, cfg.L, seed=[seed, 1])
    flow = cache.flows([u], [i])
    with torch.no_grad():
        guided = forward(flow, params, cfg, keep_trace=True)
        plain = forward(flow, params, cfg, signal_override=torch.ones(cfg.d, dtype=torch.float64),
                        keep_trace=True)
    hops = []
    ga = guided.trace.get("kg_attention", {})
    pa = plain.trace.get("kg_attention", {})
    for l in sorted(ga):
        wg, wp = ga[l][0].numpy(), pa[l][0].numpy()
        n_par, s = wg.shape[0], wg.shape[1]
        rel = flow.kg_relations[l - 1][0].reshape(-1)
        ent = flow.kg_entities[l - 1][0].reshape(-1)
        groups = []
        for p in range(n_par):
            sl = slice(p * s, (p + 1) * s)
            n_kg = min(s, wg.shape[1])
            groups.append({
                "parent": p,
                "relations": rel[sl][:n_kg].tolist(),
                "entities": ent[sl][:n_kg].tolist(),
                "guided": wg[p].mean(-1).tolist(),
                "unguided": wp[p].mean(-1).tolist(),
                "guided_per_head": wg[p].tolist(),
                "unguided_per_head": wp[p].tolist(),
            })
        hops.append({"hop": l, "groups": groups,
                     "max_abs_diff": float(np.abs(wg - wp).max())})
    return {
        "user": u, "item": i, "seed": seed,
        "score_guided": float(guided.scores[0]),
        "score_unguided": float(plain.scores[0]),
        "signal": guided.trace["signal"][0].tolist(),
        "hops": hops,
    }
