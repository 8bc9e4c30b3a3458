"""Command-line entry point: ``mpm prepare|train|evaluate|compare|synth``.

Exit status: 0 success, 1 usage or configuration error, 2 I/O error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    SyntheticSpec,
    encode_and_filter,
    generate_synthetic,
    ingest_events,
    leave_one_out_split,
)
from .evaluation import evaluate
from .model import MODEL_KINDS, MpmConfig
from .storage import (
    CompatibilityError,
    config_hash,
    dataclass_types,
    load_checkpoint,
    load_split,
    parse_value,
    read_config_file,
    save_checkpoint,
    save_split,
    write_config_file,
)
from .trainer import DivergenceError, TrainConfig, train

logger = logging.getLogger("mpm")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3

# fields that do not affect results and stay out of the config hash
_PATH_FIELDS = ("data", "out", "config")


@dataclass
class RunConfig:
    model: str = "mpm"
    data: str = ""
    out: str = "run"
    embedding_dim: int = 32
    history_size: int = 9
    tcn_levels: int = 4
    kernel_size: int = 3
    dilations: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    mlp_layers: list[int] = field(default_factory=lambda: [64, 128, 64, 32])
    dropout_rate: float = 0.2
    output_mlp_layers: list[int] = field(default_factory=lambda: [128, 64, 32])
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 1024
    max_epochs: int = 30
    patience: int = 5
    train_negatives: int = 4
    seed: int = 0
    k: list[int] = field(default_factory=lambda: [10])

    def model_config(self) -> MpmConfig:
        names = {f.name for f in dataclasses.fields(MpmConfig)}
        return MpmConfig(**{n: getattr(self, n) for n in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{n: getattr(self, n) for n in names})

    def values(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        return config_hash({k: v for k, v in self.values().items() if k not in _PATH_FIELDS})


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_run_flags(p: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    for f in dataclasses.fields(RunConfig):
        if f.name in skip:
            continue
        p.add_argument(_flag(f.name), dest=f.name, default=None, help=f"default: {_default_text(f)}")


def _default_text(f) -> str:
    v = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    return ",".join(map(str, v)) if isinstance(v, list) else str(v)


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then MPM_SEED, then explicit flags."""
    types = dataclass_types(RunConfig)
    cfg = RunConfig()
    raw: dict[str, str] = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    unknown = set(raw) - set(types)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if os.environ.get("MPM_SEED"):
        raw["seed"] = os.environ["MPM_SEED"]
    for name in types:
        v = getattr(args, name, None)
        if v is not None:
            raw[name] = v
    try:
        for name, text in raw.items():
            setattr(cfg, name, parse_value(str(text), types[name]))
    except ValueError as e:
        raise UsageError(f"bad config value: {e}") from None
    if cfg.model not in MODEL_KINDS:
        raise UsageError(f"model must be one of {', '.join(MODEL_KINDS)}")
    return cfg


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} path is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def metrics_record(model, seed, side, ks, summary, fingerprint, wall_clock_s=None) -> dict:
    return {
        "model": model,
        "seed": seed,
        "side": side,
        "K": list(ks),
        "hr": {str(k): summary.hr[k] for k in ks},
        "ndcg": {str(k): summary.ndcg[k] for k in ks},
        "n_users": summary.n_users,
        "config_hash": fingerprint,
        "wall_clock_s": wall_clock_s,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    src = _require(args.input, "input log")
    result = ingest_events(src, args.format)
    dataset = encode_and_filter(result.events, args.min_interactions)
    split = leave_one_out_split(dataset, args.eval_negatives, args.seed)
    summary = dict(dataset.summary(), malformed_lines=result.malformed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_split(split, out, {"seed": args.seed, "min_interactions": args.min_interactions, "format": args.format})
    _write_json(summary, out.with_name(out.name + ".summary.json"))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _train_one(cfg: RunConfig, split, out: Path, record_time: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(cfg.values(), out / "config.resolved")
    fingerprint = cfg.fingerprint()
    params, report = train(cfg.model, split, cfg.model_config(), cfg.train_config())
    meta = {
        "kind": cfg.model,
        "model": cfg.model_config().to_dict(),
        "num_users": split.num_users,
        "num_items": split.num_items,
        "seed": cfg.seed,
        "config_hash": fingerprint,
    }
    save_checkpoint(params, meta, out)
    _write_json(dict(report.to_dict(), config_hash=fingerprint, seed=cfg.seed, model=cfg.model), out / "report.json")
    t0 = time.perf_counter()
    summary = evaluate(cfg.model, params, split, "test", cfg.model_config(), ks=cfg.k)
    elapsed = round(time.perf_counter() - t0, 3) if record_time else None
    metrics = metrics_record(cfg.model, cfg.seed, "test", cfg.k, summary, fingerprint, elapsed)
    _write_json(metrics, out / "metrics.json")
    return metrics


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    split, _ = load_split(_require(cfg.data, "split cache"))
    metrics = _train_one(cfg, split, Path(cfg.out), args.record_time)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, meta = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    split, _ = load_split(_require(args.data, "split cache"))
    if (meta["num_users"], meta["num_items"]) != (split.num_users, split.num_items):
        raise CompatibilityError(
            f"checkpoint has {meta['num_users']} users / {meta['num_items']} items, "
            f"cache has {split.num_users} / {split.num_items}"
        )
    config = MpmConfig(**meta["model"])
    ks = parse_value(args.k, list)
    t0 = time.perf_counter()
    summary = evaluate(meta["kind"], params, split, args.side, config, ks=ks)
    elapsed = round(time.perf_counter() - t0, 3) if args.record_time else None
    metrics = metrics_record(meta["kind"], meta.get("seed"), args.side, ks, summary, meta.get("config_hash"), elapsed)
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else (ckpt if ckpt.is_dir() else ckpt.parent) / "metrics.json"
    _write_json(metrics, out)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _spread(values: list[float]) -> float:
    return float(np.std(values)) if len(values) > 1 else 0.0


def cmd_compare(args) -> int:
    base = resolve_run_config(args)
    split, _ = load_split(_require(base.data, "split cache"))
    models = args.models.split(",")
    for m in models:
        if m not in MODEL_KINDS:
            raise UsageError(f"unknown model kind {m!r}")
    seeds = parse_value(args.seeds, list)
    if not seeds:
        raise UsageError("need at least one seed")
    sizes = parse_value(args.history_sizes, list) if args.history_sizes else [base.history_size]
    dims = parse_value(args.embedding_dims, list) if args.embedding_dims else [base.embedding_dim]
    out = Path(base.out)
    rows = []
    partial = False
    for model in models:
        for k in sizes:
            for dim in dims:
                runs, failed = [], []
                for seed in seeds:
                    cfg = dataclasses.replace(base, model=model, history_size=k, embedding_dim=dim, seed=seed)
                    if dim != base.embedding_dim and base.mlp_layers[-1] == base.embedding_dim:
                        cfg.mlp_layers = base.mlp_layers[:-1] + [dim]
                    run_dir = out / f"{model}_K{k}_d{dim}_s{seed}"
                    cfg.out = str(run_dir)
                    try:
                        runs.append(_train_one(cfg, split, run_dir))
                    except (ValueError, FloatingPointError) as e:
                        logger.error("run %s failed: %s", run_dir.name, e)
                        failed.append({"seed": seed, "error": str(e)})
                        partial = True
                hr = [r["hr"]["10"] for r in runs if "10" in r["hr"]]
                nd = [r["ndcg"]["10"] for r in runs if "10" in r["ndcg"]]
                rows.append(
                    {
                        "model": model,
                        "history_size": k,
                        "embedding_dim": dim,
                        "seeds": [r["seed"] for r in runs],
                        "HR@10": {"mean": float(np.mean(hr)) if hr else None, "spread": _spread(hr)},
                        "NDCG@10": {"mean": float(np.mean(nd)) if nd else None, "spread": _spread(nd)},
                        "failed": failed,
                    }
                )
    table = {"rows": rows, "partial": partial, "config_hash": base.fingerprint()}
    out.mkdir(parents=True, exist_ok=True)
    _write_json(table, out / "comparison.json")
    print(json.dumps(table, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        num_users=args.num_users,
        num_items=args.num_items,
        num_clusters=args.num_clusters,
        interactions_per_user=args.interactions_per_user,
        noise_rate=args.noise_rate,
        seed=args.seed,
        max_step=args.max_step,
    )
    data = generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for ev in data.events:
            fh.write(f"{ev.user_key}::{ev.item_key}::1::{ev.timestamp}\n")
    labels = out.with_name(out.name + ".labels")
    labels.write_text("".join(f"{x}\n" for x in data.labels), encoding="utf-8")
    print(json.dumps({"events": len(data.events), "unexpected": int(data.unexpected.sum()), "log": str(out)}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="ingest a raw log and write a split cache")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="ml", help="ml, csv, tsv, taobao or DELIM:user,item,ts")
    p.add_argument("--min-interactions", type=int, default=20)
    p.add_argument("--eval-negatives", type=int, default=99)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model and write a run directory")
    _add_run_flags(p)
    p.add_argument("--record-time", action="store_true", help="store wall-clock time in metrics.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split cache")
    p.add_argument("--checkpoint", required=True, help="run directory or checkpoint.manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--side", choices=("validation", "test"), default="test")
    p.add_argument("--k", default="10", help="comma-separated cutoffs")
    p.add_argument("--out", help="metrics JSON path (default: metrics.json next to the checkpoint)")
    p.add_argument("--record-time", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="train several model kinds over seeds and tabulate test metrics")
    _add_run_flags(p, skip=("model",))
    p.add_argument("--models", default=",".join(MODEL_KINDS))
    p.add_argument("--seeds", default="0")
    p.add_argument("--history-sizes", help="comma-separated sweep, e.g. 5,7,9,11,13")
    p.add_argument("--embedding-dims", help="comma-separated sweep of embedding sizes")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="write a synthetic log with planted unexpected behaviors")
    p.add_argument("--num-users", type=int, default=200)
    p.add_argument("--num-items", type=int, default=500)
    p.add_argument("--num-clusters", type=int, default=5)
    p.add_argument("--interactions-per-user", type=int, default=30)
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--max-step", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"mpm: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"mpm: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"mpm: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
