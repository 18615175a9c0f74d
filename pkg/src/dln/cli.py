"""Command-line pipeline: train, eval, quantize, simplify, export, count-ops, search.

Every run resolves a single JSON config (flags override file keys), hashes it
together with the dataset bytes into a run manifest, and embeds the manifest
hash in every artifact it writes, so reruns with equal manifests reproduce
byte-identical quantized models.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, discrete, network, simplify as rules, trainer
from .data import DataError, load_csv, load_schema, schema_from_json, schema_to_json, split
from .data import PreprocessState, balanced_accuracy
from .network import ConfigError, NetworkSpec, PhaseMode, STEFlags
from .trainer import TrainConfig, TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

PRESETS = {
    "paper-default": {
        "network": {
            "gate_subspace_size": 8,
            "link_subspace_size": 8,
            "concat_mode": "per_layer",
            "neurons_per_feature": 6,
            "sum_connect_threshold": 0.8,
            "ste": True,
        }
    }
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _write_json(path, doc) -> None:
    Path(path).write_text(_canonical_json(doc) + "\n", encoding="utf-8")


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON in {path}: {err}") from None


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _resolve_config(args) -> dict:
    config = {"data": {}, "network": {}, "train": {}, "search": {}}
    if getattr(args, "config", None):
        _deep_update(config, _read_json(args.config))
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        _deep_update(config, copy.deepcopy(PRESETS[preset]))
    if getattr(args, "data", None):
        config["data"]["csv"] = args.data
    if getattr(args, "schema", None):
        config["data"]["schema"] = args.schema
    if getattr(args, "seed", None) is not None:
        config["train"]["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        config["search"]["trials"] = args.trials
    if getattr(args, "folds", None) is not None:
        config["search"]["folds"] = args.folds
    return config


def _build_spec(network_cfg: dict) -> NetworkSpec:
    kwargs = dict(network_cfg)
    if "layer_widths" in kwargs:
        kwargs["layer_widths"] = tuple(kwargs["layer_widths"])
    ste = kwargs.get("ste")
    if isinstance(ste, bool):
        kwargs["ste"] = STEFlags(ste, ste, ste, ste)
    elif isinstance(ste, dict):
        kwargs["ste"] = STEFlags(**ste)
    try:
        return NetworkSpec(**kwargs)
    except TypeError as err:
        raise ConfigError(f"invalid network config: {err}") from None


def _build_train_config(train_cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**train_cfg)
    except TypeError as err:
        raise ConfigError(f"invalid train config: {err}") from None


def _load_dataset(config: dict):
    data_cfg = config.get("data", {})
    csv_path = data_cfg.get("csv")
    schema_path = data_cfg.get("schema")
    if not csv_path:
        raise ConfigError("no dataset: set data.csv in the config or pass --data")
    if not schema_path:
        raise ConfigError("no schema: set data.schema in the config or pass --schema")
    if not Path(schema_path).exists():
        raise ConfigError(f"schema file not found: {schema_path}")
    schema = load_schema(schema_path)
    if not Path(csv_path).exists():
        raise DataError(f"data file not found: {csv_path}")
    dataset = load_csv(
        csv_path, schema, max_missing_fraction=data_cfg.get("max_missing_fraction", 0.5)
    )
    return dataset, schema, csv_path, schema_path


def _manifest(config: dict, seed: int, csv_path, schema_path, artifacts: dict) -> dict:
    fingerprint = hashlib.sha256()
    fingerprint.update(Path(csv_path).read_bytes())
    fingerprint.update(Path(schema_path).read_bytes())
    core = {
        "tool": "dln",
        "version": __version__,
        "seed": seed,
        "config": {k: config.get(k, {}) for k in ("data", "network", "train", "search")},
        "dataset_fingerprint": fingerprint.hexdigest(),
    }
    manifest_hash = hashlib.sha256(_canonical_json(core).encode()).hexdigest()
    return {**core, "artifacts": artifacts, "manifest_hash": manifest_hash}


def _preprocess_payload(schema, state: PreprocessState) -> dict:
    return {"schema": schema_to_json(schema), "state": state.to_json()}


def _emit(args, doc) -> None:
    text = _canonical_json(doc) if getattr(args, "json", False) else json.dumps(doc, indent=2, sort_keys=True)
    print(text)


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    config = _resolve_config(args)
    dataset, schema, csv_path, schema_path = _load_dataset(config)
    spec = _build_spec(config.get("network", {}))
    tconf = _build_train_config(config.get("train", {}))
    val = None
    test_fraction = config.get("data", {}).get("test_fraction")
    if test_fraction:
        dataset, val = split(dataset, float(test_fraction), seed=tconf.seed)

    out_dir = Path(args.out or "dln-run")
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.json"
    history_path = out_dir / "history.jsonl"
    manifest_path = out_dir / "manifest.json"
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    manifest = _manifest(
        config,
        tconf.seed,
        csv_path,
        schema_path,
        artifacts={
            "model": str(model_path),
            "history": str(history_path),
            "manifest": str(manifest_path),
        },
    )
    payload = _preprocess_payload(schema, dataset.state)

    def checkpoint(iteration, params):
        network.dump_model(
            ckpt_dir / f"iter_{iteration:03d}.json", spec, params,
            preprocess=payload, manifest_hash=manifest["manifest_hash"],
        )

    params, history = trainer.train(spec, dataset, tconf, val_dataset=val,
                                    checkpoint_fn=checkpoint)
    network.dump_model(model_path, spec, params, preprocess=payload,
                       manifest_hash=manifest["manifest_hash"])
    with open(history_path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(_canonical_json(row) + "\n")
    _write_json(manifest_path, manifest)
    last = history[-1] if history else {}
    _emit(args, {
        "model": str(model_path),
        "epochs": len(history),
        "final_loss": last.get("loss"),
        "final_quantized_accuracy": last.get("quantized_accuracy"),
        "manifest_hash": manifest["manifest_hash"],
    })
    return EXIT_OK


def _load_model_doc(path):
    doc = _read_json(path)
    fmt = doc.get("format")
    if fmt not in (network.MODEL_FORMAT, discrete.CIRCUIT_FORMAT, rules.RULES_FORMAT):
        raise ConfigError(f"{path}: unrecognized document format {fmt!r}")
    return doc


def _restore_preprocess(payload):
    if not payload:
        raise ConfigError("model carries no preprocessing state; cannot load data")
    schema = schema_from_json(payload["schema"])
    state = PreprocessState.from_json(payload["state"])
    return schema, state


def cmd_eval(args) -> int:
    doc = _load_model_doc(args.model)
    if doc.get("format") != network.MODEL_FORMAT:
        raise ConfigError("eval needs a model document (train output)")
    spec, params, payload = network.model_from_json(doc)
    schema, state = _restore_preprocess(payload)
    if not Path(args.data).exists():
        raise DataError(f"data file not found: {args.data}")
    dataset = load_csv(args.data, schema, state=state)

    net = discrete.quantize(spec, params)
    quant_pred, _ = discrete.evaluate(net, dataset.continuous, dataset.onehot)
    soft_spec = dataclasses.replace(spec, ste=STEFlags(False, False, False, False))
    soft_pred = network.predict(soft_spec, params, dataset.continuous, dataset.onehot,
                                PhaseMode.PHASE2)
    y = dataset.labels
    quant_bal = balanced_accuracy(quant_pred, y, n_classes=dataset.n_classes)
    soft_bal = balanced_accuracy(soft_pred, y, n_classes=dataset.n_classes)
    recalls = {}
    for c, name in enumerate(state.label_categories):
        mask = y == c
        if mask.any():
            recalls[name] = float(np.mean(quant_pred[mask] == c))
    result = {
        "balanced_accuracy": quant_bal,
        "accuracy": float(np.mean(quant_pred == y)),
        "per_class_recall": recalls,
        "soft_balanced_accuracy": soft_bal,
        "quantization_gap": soft_bal - quant_bal,
        "n_samples": int(dataset.n_samples),
        "unknown_categories": int(dataset.unknown_category_count),
    }
    print(_canonical_json(result) if args.json else json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def _to_circuit(doc):
    """Model or circuit document -> (DiscreteNetwork, preprocess, manifest_hash)."""
    if doc.get("format") == network.MODEL_FORMAT:
        spec, params, payload = network.model_from_json(doc)
        return discrete.quantize(spec, params), payload, doc.get("manifest_hash")
    net, payload = discrete.circuit_from_json(doc)
    return net, payload, doc.get("manifest_hash")


def cmd_quantize(args) -> int:
    doc = _load_model_doc(args.model)
    if doc.get("format") != network.MODEL_FORMAT:
        raise ConfigError("quantize needs a model document (train output)")
    net, payload, manifest_hash = _to_circuit(doc)
    out = args.out or "circuit.json"
    discrete.dump_circuit(out, net, preprocess=payload, manifest_hash=manifest_hash)
    counts = discrete.count_ops(net, bit_width=args.bits)
    _emit(args, {"circuit": str(out), **counts.to_json()})
    return EXIT_OK


def _to_rulegraph(doc, simplify_graph=True):
    if doc.get("format") == rules.RULES_FORMAT:
        graph = rules.graph_from_json(doc)
        n_original = None
        manifest_hash = doc.get("manifest_hash")
    else:
        net, payload, manifest_hash = _to_circuit(doc)
        _, state = _restore_preprocess(payload)
        graph = rules.extract(net, state)
        n_original = len(state.cont_names) + len(state.cat_names)
    before = graph.n_nodes
    if simplify_graph:
        graph = rules.simplify(graph)
    return graph, before, n_original, manifest_hash


def cmd_simplify(args) -> int:
    doc = _load_model_doc(args.model)
    graph, before, n_original, manifest_hash = _to_rulegraph(doc, simplify_graph=True)
    out = args.out or "rules.json"
    rules.dump_rules(out, graph, manifest_hash=manifest_hash)
    _emit(args, {
        "rules": str(out),
        "nodes_before": before,
        "nodes_after": graph.n_nodes,
        "selected_features": rules.selected_features(graph),
        "n_original_features": n_original,
    })
    return EXIT_OK


def cmd_export_dot(args) -> int:
    doc = _load_model_doc(args.model)
    graph, _, _, _ = _to_rulegraph(doc, simplify_graph=not args.no_simplify)
    text = rules.export_dot(graph)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _emit(args, {"dot": str(args.out), "nodes": graph.n_nodes})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_export_json(args) -> int:
    doc = _load_model_doc(args.model)
    graph, _, _, manifest_hash = _to_rulegraph(doc, simplify_graph=not args.no_simplify)
    payload = rules.graph_to_json(graph, manifest_hash=manifest_hash)
    if args.out:
        _write_json(args.out, payload)
        _emit(args, {"rules": str(args.out), "nodes": graph.n_nodes})
    else:
        print(_canonical_json(payload))
    return EXIT_OK


def cmd_count_ops(args) -> int:
    doc = _load_model_doc(args.model)
    if doc.get("format") == rules.RULES_FORMAT:
        raise ConfigError("count-ops needs a model or circuit document")
    net, _, _ = _to_circuit(doc)
    counts = discrete.count_ops(net, bit_width=args.bits)
    payload = {"bit_width": args.bits, **counts.to_json()}
    if args.out:
        _write_json(args.out, payload)
    print(_canonical_json(payload) if args.json else json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_search(args) -> int:
    config = _resolve_config(args)
    dataset, schema, csv_path, schema_path = _load_dataset(config)
    search_cfg = config.get("search", {})
    trials = int(search_cfg.get("trials", 8))
    folds = int(search_cfg.get("folds", 3))
    space = search_cfg.get("space", {})
    seed = int(config.get("train", {}).get("seed", 0))
    base_spec = _build_spec(config.get("network", {}))
    base_config = _build_train_config(config.get("train", {}))
    n_workers = int(os.environ.get("DLN_THREADS", "1"))

    result = trainer.random_search(
        dataset, space, trials, folds, seed,
        base_config=base_config, base_spec=base_spec, n_workers=n_workers,
    )
    out_dir = Path(args.out or "dln-search")
    out_dir.mkdir(parents=True, exist_ok=True)
    best_config = copy.deepcopy(config)
    best_config["network"] = result.best_spec.to_json()
    best_config["train"] = result.best_config.to_json()
    _write_json(out_dir / "best-config.json", best_config)
    report = {
        "best_index": result.best_index,
        "best_score": result.best_score,
        "trials": [
            {"index": t.index, "seed": t.seed, "overrides": t.overrides,
             "score": t.score, "error": t.error}
            for t in result.trials
        ],
    }
    _write_json(out_dir / "search-report.json", report)
    _emit(args, {
        "best_config": str(out_dir / "best-config.json"),
        "report": str(out_dir / "search-report.json"),
        "best_index": result.best_index,
        "best_score": result.best_score,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(p, model=False, out=True):
    if model:
        p.add_argument("--model", required=True, help="input model/circuit/rules JSON")
    if out:
        p.add_argument("--out", help="output path")
    p.add_argument("--json", action="store_true", help="compact machine-readable output")


def build_parser() -> _Parser:
    parser = _Parser(prog="dln", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write model/history/manifest")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="training CSV (overrides config)")
    p.add_argument("--schema", help="schema JSON (overrides config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", help="named defaults, e.g. paper-default")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="balanced accuracy of a trained model on a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="collapse a model into a boolean circuit")
    p.add_argument("--bits", type=int, default=16)
    _add_common(p, model=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("simplify", help="extract and simplify the rule graph")
    _add_common(p, model=True)
    p.set_defaults(func=cmd_simplify)

    p = sub.add_parser("export-dot", help="write the rule graph as DOT text")
    p.add_argument("--no-simplify", action="store_true")
    _add_common(p, model=True)
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("export-json", help="write the rule graph as JSON")
    p.add_argument("--no-simplify", action="store_true")
    _add_common(p, model=True)
    p.set_defaults(func=cmd_export_json)

    p = sub.add_parser("count-ops", help="high-level and gate-level inference cost")
    p.add_argument("--bits", type=int, default=16)
    _add_common(p, model=True)
    p.set_defaults(func=cmd_count_ops)

    p = sub.add_parser("search", help="random hyperparameter search with k-fold CV")
    p.add_argument("--config", help="JSON config file with a search section")
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--preset")
    _add_common(p)
    p.set_defaults(func=cmd_search)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except trainer.SearchError as err:
        print(f"search failed: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
