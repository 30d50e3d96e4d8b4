"""Command-line runner: ``prepare``, ``train``, ``eval`` and ``gradcheck``.

Exit codes: 0 success, 1 configuration error, 2 data or checkpoint error,
3 gradient-certification failure or other numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import grad_equivalence
from .evaluation import evaluate_split
from .exceptions import CheckpointError, ConfigError, DataError, LTEKGEError, NumericError
from .kg import SPLITS, build_filter_index, dataset_checksums, load_dataset
from .model import KGCModel
from .params import load_checkpoint, save_checkpoint
from .training import TrainConfig, build_graph, fit, load_config

logger = logging.getLogger("ltekge")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CERT = 0, 1, 2, 3

MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.ltek"
CONFIG_JSON = "config.json"
METRICS = "metrics.json"


class CertificationFailure(LTEKGEError):
    pass


def _dump(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args) -> dict:
    dataset = load_dataset(args.dataset_dir)
    report = dataset.statistics()
    report["path"] = str(Path(args.dataset_dir).resolve())
    report["checksums"] = dataset_checksums(args.dataset_dir)
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


# ---------------------------------------------------------------------------
# train


def _overrides(args) -> dict:
    out = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    flag_map = {
        "encoder": args.encoder, "decoder": args.decoder, "layers": args.layers,
        "seed": args.seed, "epochs": args.epochs, "dim": args.dim,
        "sample_pool": args.sample_pool, "graph_seed": args.graph_seed,
    }
    out.update({k: v for k, v in flag_map.items() if v is not None})
    for flag in ("rat", "wni", "wsi"):
        if getattr(args, flag):
            out[flag] = True
    if args.no_ltr:
        out["ltr"] = False
    if args.data is not None:
        out["dataset"] = args.data
    return out


def resolve_config(args) -> TrainConfig:
    """Config file values, then ``--set`` pairs, then dedicated flags."""
    overrides = _overrides(args)
    if args.config:
        try:
            return load_config(args.config, overrides)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
    return TrainConfig.from_mapping(overrides)


def build_model(config: TrainConfig, dataset) -> KGCModel:
    enc = config.encoder_spec()
    graph = None
    if enc.uses_graph:
        graph = build_graph(dataset.train, dataset.num_entities, dataset.num_relations, config)
    return KGCModel(dataset.num_entities, dataset.num_relations, enc, config.decoder_spec(),
                    graph, seed=config.seed, dtype=np.dtype(config.dtype))


def run_id(config: TrainConfig, checksums: dict) -> str:
    blob = json.dumps({"config": config.to_dict(), "data": checksums}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cmd_train(args) -> dict:
    config = resolve_config(args)
    if not config.dataset:
        raise ConfigError("no dataset given (config key 'dataset' or --data)")
    dataset = load_dataset(config.dataset)
    checksums = dataset_checksums(config.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config, dataset)
    index = build_filter_index([dataset.train, dataset.valid, dataset.test])

    start = time.perf_counter()
    history, best = fit(model, dataset.train, config, valid=dataset.valid, filter_index=index)
    train_time = time.perf_counter() - start

    valid_metrics = None
    if best is not None:
        model.params.load_state(best[2])
        best_epoch = best[1]
    else:
        best_epoch = config.epochs - 1
    if len(dataset.valid):
        valid_metrics = evaluate_split(model, dataset.valid, index, config.eval_batch_size)
    save_checkpoint(out / CHECKPOINT, model.params)

    sidecar = {"train_config": config.to_dict(), "model": model.config()}
    _dump(out / CONFIG_JSON, sidecar)
    metrics = {
        "best_epoch": best_epoch,
        "train_wall_time_s": train_time,
        "losses": [h.loss for h in history],
        "graph_seed": config.effective_graph_seed,
        "graph_provenance": model.graph.label if model.graph is not None else None,
        "config_echo": config.to_dict(),
        "valid": valid_metrics.to_dict("valid", config.to_dict(), config.effective_graph_seed)
        if valid_metrics is not None else None,
    }
    _dump(out / METRICS, metrics)
    manifest = {
        "run_id": run_id(config, checksums),
        "config": config.to_dict(),
        "dataset": {"path": str(Path(config.dataset).resolve()), "checksums": checksums},
        "seeds": {"seed": config.seed, "graph_seed": config.effective_graph_seed},
        "checkpoint": str((out / CHECKPOINT).resolve()),
        "checkpoint_sha256": hashlib.sha256((out / CHECKPOINT).read_bytes()).hexdigest(),
        "config_path": str((out / CONFIG_JSON).resolve()),
        "metrics": str((out / METRICS).resolve()),
        "timing": {"train_wall_time_s": train_time},
    }
    _dump(out / MANIFEST, manifest)
    print(json.dumps({"run_id": manifest["run_id"], "out": str(out),
                      "valid_mrr": valid_metrics.mrr if valid_metrics else None}))
    return manifest


# ---------------------------------------------------------------------------
# eval


def load_run(run_dir, data=None, verify=True):
    """Rebuild the model of a training run and load its checkpoint."""
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {run_dir}") from None
    config = TrainConfig.from_mapping(manifest["config"])
    data_dir = data or manifest["dataset"]["path"]
    if verify and data is None:
        current = dataset_checksums(data_dir)
        if current != manifest["dataset"]["checksums"]:
            raise DataError(f"dataset files in {data_dir} changed since the run was recorded")
    dataset = load_dataset(data_dir)
    tensors = load_checkpoint(run_dir / CHECKPOINT)
    model = build_model(config, dataset)
    model.params.load_state(tensors)
    return model, dataset, config


def cmd_eval(args) -> dict:
    model, dataset, config = load_run(args.run, args.data)
    index = build_filter_index([dataset.train, dataset.valid, dataset.test])
    report = evaluate_split(model, dataset.split(args.split), index, config.eval_batch_size)
    payload = report.to_dict(args.split, config.to_dict(), config.effective_graph_seed)
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return payload


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> dict:
    formulas = tuple(args.formula) if args.formula else grad_equivalence.FORMULAS
    for f in formulas:
        if f not in grad_equivalence.FORMULAS:
            raise ConfigError(f"unknown formula {f!r}; choose from {grad_equivalence.FORMULAS}")
    start = time.perf_counter()
    reports = grad_equivalence.certify(formulas, probes=args.probes, seed=args.seed, dim=args.dim)
    payload = {
        "formulas": {k: r.to_dict() for k, r in reports.items()},
        "passed": all(r.passed for r in reports.values()),
        "wall_time_s": time.perf_counter() - start,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    if not payload["passed"]:
        failed = [k for k, r in reports.items() if not r.passed]
        raise CertificationFailure(f"tolerance breach in: {', '.join(failed)}")
    return payload


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltekge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="validate a dataset directory and print its counts")
    p.add_argument("dataset_dir")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model and write manifest, checkpoint and metrics")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--data", help="dataset directory (overrides the config key 'dataset')")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--encoder")
    p.add_argument("--decoder")
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--graph-seed", type=int)
    p.add_argument("--rat", action="store_true", help="random adjacency tensor")
    p.add_argument("--wni", action="store_true", help="drop neighbor information")
    p.add_argument("--wsi", action="store_true", help="drop self-loop information")
    p.add_argument("--sample-pool", type=int, metavar="K", help="resample neighbors from K entities")
    p.add_argument("--no-ltr", action="store_true", help="no relation transform in CompGCN")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="filtered metrics of a trained run")
    p.add_argument("run", help="run directory written by 'train'")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--data", help="dataset directory (skips checksum verification)")
    p.add_argument("--out", help="write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="certify the analytic log-score gradients")
    p.add_argument("--formula", action="append", help="restrict to one formula (repeatable)")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CertificationFailure, NumericError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_CERT
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError, LTEKGEError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
