"""Command line entry point: ``kgrec <subcommand> ...``.

Settings resolve as flags > config file > defaults. The config file is a
flat ``key = value`` file (an optional ``[kgrec]`` section header is
accepted); keys are the long flag names with ``_`` or ``-``.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from .evaluation import DEFAULT_KS, evaluation_cache, run_once, test_metrics
from .experiment import (ExperimentSpec, dump_case_study, jsonable, load_dataset, load_runs,
                         run_experiment, significance, write_metric_csvs)
from .graphs import load_kg, split_dataset, write_corrupted_kg
from .model import ModelConfig, ParameterSet
from .synthetic import SyntheticSpec, make_synthetic, write_synthetic
from .trainer import TrainConfig, write_history_csv

log = logging.getLogger("kgrec")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(kind):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return [kind(v) for v in text]
        return [kind(v.strip()) for v in str(text).split(",") if v.strip()]
    return parse


def _pairs(text):
    """``a:b;c:d`` -> [(a, b), (c, d)]"""
    out = []
    for chunk in str(text).split(";"):
        chunk = chunk.strip()
        if chunk:
            a, sep, b = chunk.partition(":")
            if not sep:
                raise ValueError(f"compare pair must be cell_a:cell_b, got {chunk!r}")
            out.append((a.strip(), b.strip()))
    return out


# name -> (parser, help); names double as config keys
DATA_OPTS = {
    "data_dir": (str, "directory holding ratings_final.txt and kg_final.txt"),
    "ratings": (str, "interaction file (user<TAB>item<TAB>label)"),
    "kg": (str, "KG triplet file (head<TAB>relation<TAB>tail)"),
    "has_header": (_bool, "interaction file starts with a header line"),
}
MODEL_OPTS = {
    "d": (int, "embedding size"),
    "L": (int, "KG hops"),
    "H": (int, "attention heads"),
    "aggregator": (str, "aggregator g: sum, concat, neighbor"),
    "encoder": (str, "guidance encoder f: sum, pmax, comb"),
    "alpha": (float, "comb encoder weight of the user vector"),
    "activation": (str, "interior activation: relu, tanh, identity"),
    "final_activation": (str, "activation of the last item aggregation"),
    "user_sample": (int, "sampled items per user"),
    "item_sample": (int, "sampled users per item"),
    "kg_sample": (int, "sampled KG neighbors per node"),
    "broadcast": (str, "signal broadcast over relation matrices: row or column"),
    "tail_updated": (_bool, "aggregate updated (not base) tails at deeper hops"),
    "share_aggregators": (_bool, "one aggregator for every site"),
    "ablation": (_list(str), "comma-separated ablation flags, e.g. no_EI,no_CG"),
}
TRAIN_OPTS = {
    "batch_size": (int, "examples per batch (half positives, half negatives)"),
    "learning_rate": (float, "Adam step size"),
    "l2_lambda": (float, "L2 weight on touched parameters"),
    "max_epochs": (int, "epoch limit"),
    "patience": (int, "early-stopping patience in epochs"),
    "adam_beta1": (float, "Adam beta1"),
    "adam_beta2": (float, "Adam beta2"),
    "adam_eps": (float, "Adam epsilon"),
    "grad_seed": (int, "extra seed for the training RNG stream"),
    "literal_loss": (_bool, "subtract the negatives' loss terms (unbounded objective)"),
    "exclude_center": (_bool, "drop the target pair from its own sampled neighborhoods"),
}
RUN_OPTS = {
    "task": (str, "ctr, topk or both"),
    "seed": (int, "split seed (base seed for sweeps)"),
    "out_dir": (str, "output directory"),
    "ks": (_list(int), "comma-separated K values"),
}
SWEEP_OPTS = {
    "n_splits": (int, "number of split seeds"),
    "sweep_L": (_list(int), "sweep over L"),
    "sweep_encoder": (_list(str), "sweep over encoders"),
    "sweep_aggregator": (_list(str), "sweep over aggregators"),
    "sweep_d": (_list(int), "sweep over embedding sizes"),
    "sweep_learning_rate": (_list(float), "sweep over learning rates"),
    "sweep_ablation": (_list(str), "sweep over ablation sets ('+' joins flags, 'none' is empty)"),
    "sweep_corruption": (_list(float), "sweep over KG corruption ratios"),
    "compare": (_pairs, "cell pairs for Wilcoxon tests, 'a:b;c:d'"),
    "significance_metric": (str, "metric for the Wilcoxon tests"),
    "plot": (_bool, "write recall_vs_k.svg"),
}
SYNTH_TYPES = {"num_users": int, "num_items": int, "num_entities": int, "num_relations": int,
               "num_clusters": int, "positives_per_user": _list(int), "attributes_per_item": int,
               "popularity_exponent": float, "noise_link_prob": float, "seed": int}


def _add(parser, opts: dict, group_name: str) -> None:
    group = parser.add_argument_group(group_name)
    for name, (kind, help_text) in opts.items():
        flag = "--" + name.replace("_", "-")
        if kind is _bool:
            group.add_argument(flag, dest=name, nargs="?", const="true", default=None,
                               help=help_text)
        else:
            group.add_argument(flag, dest=name, default=None, help=help_text)


def read_config(path) -> dict:
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[kgrec]\n" + text
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace, opts: dict) -> dict:
    """Merge flags over the config file, parsed with each option's type.

    Config keys that belong to other subcommands are ignored, so one file
    can serve ``train`` and ``sweep`` alike.
    """
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    known = set().union(*(options_for(c) for c in COMMANDS))
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise SystemExit(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for name, (kind, _) in opts.items():
        raw = getattr(args, name, None)
        if raw is None:
            raw = file_values.get(name)
        if raw is not None:
            try:
                out[name] = kind(raw)
            except ValueError as exc:
                raise SystemExit(f"bad value for {name}: {exc}") from None
    return out


def model_config(values: dict) -> ModelConfig:
    kw = {k: values[k] for k in MODEL_OPTS if k in values and k != "ablation"}
    if "ablation" in values:
        kw["ablations"] = frozenset(values["ablation"])
    return ModelConfig(**kw)


def train_config(values: dict) -> TrainConfig:
    kw = {k: values[k] for k in TRAIN_OPTS if k in values and not k.startswith("adam_beta")}
    default = TrainConfig().adam_betas
    kw["adam_betas"] = (values.get("adam_beta1", default[0]), values.get("adam_beta2", default[1]))
    return TrainConfig(**kw)


def data_paths(values: dict) -> tuple[str, str]:
    base = Path(values["data_dir"]) if "data_dir" in values else None
    ratings = values.get("ratings") or (str(base / "ratings_final.txt") if base else None)
    kg = values.get("kg") or (str(base / "kg_final.txt") if base else None)
    if not ratings or not kg:
        raise SystemExit("need --data-dir or both --ratings and --kg")
    return ratings, kg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(obj), indent=1, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------

def cmd_train(v: dict) -> int:
    ratings, kg_path = data_paths(v)
    graph, kg = load_dataset(ratings, kg_path, v.get("has_header", False))
    mcfg, tcfg = model_config(v), train_config(v)
    seed, task = v.get("seed", 0), v.get("task", "both")
    ks = tuple(v.get("ks", DEFAULT_KS))
    out = Path(v.get("out_dir", "run"))
    res = run_once(graph, kg, mcfg, tcfg, seed, task, ks)
    params = res.pop("_params")
    params.save(out / "params")
    write_history_csv(res.pop("history"), out.joinpath("history.csv"))
    record = {"status": "ok", "model": mcfg.to_dict(), "train": tcfg.to_dict(), **res}
    _write_json(out / "run.json", record)
    write_metric_csvs(out, "test", [record], task, ks)
    log.info("best epoch %d, %s", res["best_epoch"],
             {k: round(res[k], 4) for k in res if "@" in k or k in ("auc", "f1")})
    return 0


def cmd_evaluate(v: dict) -> int:
    if "params" not in v:
        raise SystemExit("evaluate needs --params")
    ratings, kg_path = data_paths(v)
    graph, kg = load_dataset(ratings, kg_path, v.get("has_header", False))
    params = ParameterSet.load(v["params"])
    cfg = params.config
    seed, task = v.get("seed", 0), v.get("task", "both")
    ks = tuple(v.get("ks", DEFAULT_KS))
    split = split_dataset(graph, seed)
    cache = evaluation_cache(graph, kg, split, cfg, seed)
    metrics = test_metrics(params, graph, split, cache, cfg, seed, task, ks)
    out = Path(v.get("out_dir", "eval"))
    record = {"status": "ok", "seed": seed, "task": task, **metrics}
    _write_json(out / "metrics.json", record)
    write_metric_csvs(out, "test", [record], task, ks)
    print(json.dumps(jsonable(metrics), indent=1, sort_keys=True))
    return 0


def experiment_spec(v: dict) -> ExperimentSpec:
    ratings, kg_path = data_paths(v)
    sweep = {}
    for name in ("L", "encoder", "aggregator", "d", "learning_rate", "ablation", "corruption"):
        if f"sweep_{name}" in v:
            sweep[name] = v[f"sweep_{name}"]
    return ExperimentSpec(
        ratings=ratings, kg=kg_path, has_header=v.get("has_header", False),
        task=v.get("task", "both"), model=model_config(v), train=train_config(v),
        n_splits=v.get("n_splits", 5), base_seed=v.get("seed", 0), sweep=sweep,
        ks=tuple(v.get("ks", DEFAULT_KS)), compare=v.get("compare", []),
        significance_metric=v.get("significance_metric", ""),
        out_dir=v.get("out_dir", "results"), plot=v.get("plot", False),
    )


def cmd_sweep(v: dict) -> int:
    result = run_experiment(experiment_spec(v))
    if result.failed:
        log.error("%d run(s) failed; see run_*.json", result.failed)
        return 1
    return 0


def cmd_corrupt(v: dict) -> int:
    if "kg" not in v or "ratio" not in v:
        raise SystemExit("corrupt needs --kg and --ratio")
    kg = load_kg(v["kg"])
    path = write_corrupted_kg(kg, v["ratio"], v.get("seed", 0), v.get("out_dir", "corrupted"))
    print(path)
    return 0


def cmd_synth(v: dict) -> int:
    kw = {k: v[k] for k in SYNTH_TYPES if k in v}
    if "positives_per_user" in kw:
        kw["positives_per_user"] = tuple(kw["positives_per_user"])
    try:
        data = make_synthetic(SyntheticSpec(**kw))
    except ValueError as exc:
        raise SystemExit(f"infeasible synthetic spec: {exc}") from None
    print(write_synthetic(data, v.get("out_dir", "synthetic")))
    return 0


def cmd_case_study(v: dict) -> int:
    for key in ("params", "user", "item"):
        if key not in v:
            raise SystemExit(f"case-study needs --{key}")
    ratings, kg_path = data_paths(v)
    graph, kg = load_dataset(ratings, kg_path, v.get("has_header", False))
    params = ParameterSet.load(v["params"])
    seed = v.get("seed", 0)
    split = split_dataset(graph, seed)
    dump = dump_case_study(params, (v["user"], v["item"]), graph.restrict(split.train), kg,
                           params.config, seed)
    text = json.dumps(dump, indent=1) + "\n"
    if "out" in v:
        Path(v["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_significance(v: dict) -> int:
    for key in ("results", "a", "b"):
        if key not in v:
            raise SystemExit(f"significance needs --{key}")
    runs = load_runs(v["results"])
    for cell in (v["a"], v["b"]):
        if cell not in runs:
            raise SystemExit(f"no runs for cell {cell!r} in {v['results']}")
    task = next(r["task"] for r in runs[v["a"]] if r.get("status") == "ok")
    metric = v.get("metric") or ("auc" if task == "ctr" else "recall@20")
    entry = {"a": v["a"], "b": v["b"], **significance(runs[v["a"]], runs[v["b"]], metric)}
    out = Path(v.get("out_dir", v["results"])) / "significance.json"
    _write_json(out, entry)
    print(json.dumps(entry, indent=1))
    return 0


EXTRA = {
    "train": {},
    "evaluate": {"params": (str, "checkpoint directory written by train")},
    "sweep": SWEEP_OPTS,
    "corrupt": {"ratio": (float, "fraction of triplets to corrupt")},
    "synth": {k: (t, "synthetic generator setting") for k, t in SYNTH_TYPES.items()
              if k != "seed"},
    "case-study": {"params": (str, "checkpoint directory"), "user": (int, "user id"),
                   "item": (int, "item id"), "out": (str, "output JSON path (default stdout)")},
    "significance": {"results": (str, "sweep output directory"), "a": (str, "first cell"),
                     "b": (str, "second cell"), "metric": (str, "metric to compare")},
}
COMMANDS = {
    "train": (cmd_train, "split, train with early stopping, save parameters and test metrics"),
    "evaluate": (cmd_evaluate, "test metrics of a saved checkpoint"),
    "sweep": (cmd_sweep, "split seeds x sweep cells with aggregate tables"),
    "corrupt": (cmd_corrupt, "write a corrupted copy of a KG file plus manifest"),
    "synth": (cmd_synth, "write a planted-cluster synthetic dataset"),
    "case-study": (cmd_case_study, "guided vs unguided knowledge attention of one pair"),
    "significance": (cmd_significance, "Wilcoxon test between two cells of a sweep"),
}


def options_for(command: str) -> dict:
    if command in ("train", "sweep"):
        base = {**DATA_OPTS, **MODEL_OPTS, **TRAIN_OPTS, **RUN_OPTS}
    elif command in ("evaluate", "case-study"):
        base = {**DATA_OPTS, **RUN_OPTS}
    elif command == "corrupt":
        base = {"kg": DATA_OPTS["kg"], "seed": RUN_OPTS["seed"], "out_dir": RUN_OPTS["out_dir"]}
    elif command == "synth":
        base = {"seed": (int, "structure seed"), "out_dir": RUN_OPTS["out_dir"]}
    else:
        base = {"out_dir": RUN_OPTS["out_dir"]}
    return {**base, **EXTRA[command]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="flat key = value config file")
        opts = options_for(name)
        _add(p, opts, "options")
        if name in ("train", "sweep"):
            p.add_argument("--paper-literal-loss", dest="literal_loss", action="store_const",
                           const="true", help="same as --literal-loss")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    values = resolve(args, options_for(args.command))
    try:
        return COMMANDS[args.command][0](values)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
