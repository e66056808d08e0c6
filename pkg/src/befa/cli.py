"""Command-line entry point: ``befa {synth,prep,train,evaluate,compare,attribute,diagnose}``.

Every subcommand computes all of its outputs in memory first and writes them
only after the work succeeded, so a failing run leaves no partial files.
Files never contain timestamps or wall-clock times; those go to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema
import numpy as np

from .adapters import AdapterKind
from .attribution import AttributionBundle, bundle_projector, compute_heatmap, heatmap_bytes, load_bundle
from .dataio import (
    DataError,
    DataSplit,
    SyntheticSpec,
    features_bytes,
    interactions_text,
    kcore_filter,
    load_features,
    load_interactions,
    load_split,
    split_811,
    synth_generate,
)
from .diagnostics import DeviationReport, adapter_deviation_report, aligned_features, deviation_report, report_table
from .evaluator import MetricsTable, evaluate
from .numkit import make_rng
from .trainer import (
    CheckpointError,
    TrainConfig,
    _atomic_write,
    checkpoint_bytes,
    load_checkpoint,
    model_from_checkpoint,
    train,
)

logger = logging.getLogger("befa")

ADAPTERS = tuple(k.value for k in AdapterKind)
COMPARE_ORDER = ("none", "befa", "lora", "prompt")


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is 1."""


# --------------------------------------------------------------------------- output staging


class Outputs:
    """Files staged in memory and written together by :meth:`commit`."""

    def __init__(self, directory: str | Path | None):
        self.directory = Path(directory) if directory is not None else None
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data: bytes | str) -> None:
        self.files[name] = data.encode("utf-8") if isinstance(data, str) else data

    def add_json(self, name: str, obj) -> None:
        self.add(name, dumps(obj) + "\n")

    def commit(self) -> list[Path]:
        if self.directory is None:
            return []
        written = []
        for name, data in self.files.items():
            path = self.directory / name
            _atomic_write(path, data)
            written.append(path)
        return written


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python ones."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)


# --------------------------------------------------------------------------- tables


def improvement(variant: float, baseline: float) -> float | None:
    """Relative improvement ``(variant - baseline) / baseline``; None for a zero baseline."""
    if baseline == 0:
        return None
    return (variant - baseline) / baseline


def format_improvement(value: float | None) -> str:
    return "n/a" if value is None else f"{100.0 * value:+.2f}%"


def _metric_dict(row) -> dict[str, float]:
    if isinstance(row, MetricsTable):
        d = row.to_dict()
        d.pop("users", None)
        return d
    return dict(row)


def experiment_table(
    rows: Mapping[str, MetricsTable | Mapping[str, float]],
    baseline: str,
    metrics: Sequence[str] | None = None,
) -> tuple[str, list[dict]]:
    """Text table of ``rows`` plus an improvement block against ``baseline``.

    Returns the text and a long-format record list (one record per row and
    metric) carrying the value and its relative improvement.
    """
    if baseline not in rows:
        raise ValueError(f"baseline row {baseline!r} is missing")
    table = {name: _metric_dict(r) for name, r in rows.items()}
    if metrics is None:
        metrics = sorted(table[baseline], key=lambda m: (int(m.split("@")[1]), m.split("@")[0] != "recall"))
    base = table[baseline]
    width = max(8, *(len(n) for n in table))
    head = f"{'':<{width}}" + "".join(f"{m:>12}" for m in metrics)
    lines = [head]
    for name, vals in table.items():
        lines.append(f"{name:<{width}}" + "".join(f"{vals[m]:>12.4f}" for m in metrics))
    lines.append("")
    lines.append(f"improvement over {baseline}")
    records = []
    for name, vals in table.items():
        imps = [improvement(vals[m], base[m]) for m in metrics]
        for m, imp in zip(metrics, imps):
            records.append({"row": name, "metric": m, "value": vals[m], "improvement": imp})
        if name != baseline:
            lines.append(f"{name:<{width}}" + "".join(f"{format_improvement(i):>12}" for i in imps))
    return "\n".join(lines), records


# --------------------------------------------------------------------------- run config

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _schema_for(tp) -> dict:
    text = tp if isinstance(tp, str) else getattr(tp, "__name__", str(tp))
    if text.startswith("tuple"):
        return {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}
    return {"int": {"type": "integer"}, "float": {"type": "number"}, "bool": {"type": "boolean"}, "str": {"type": "string"}}[text]


def run_config_schema() -> dict:
    props = {name: _schema_for(f.type) for name, f in _TRAIN_FIELDS.items()}
    props["adapter"] = {"enum": list(ADAPTERS)}
    path_map = {"type": "object", "additionalProperties": {"type": "string"}, "minProperties": 1}
    spec_props = {}
    for f in dataclasses.fields(SyntheticSpec):
        spec_props[f.name] = _schema_for(f.type)
    props.update(
        {
            "data": {"type": "string"},
            "features": path_map,
            "ideal": path_map,
            "modalities": {"type": "array", "items": {"type": "string"}, "minItems": 1, "uniqueItems": True},
            "out": {"type": "string"},
            "kcore": {"type": "integer", "minimum": 1},
            "split_mode": {"enum": ["per-user", "global"]},
            "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
            "synthetic": {"type": "object", "properties": spec_props, "additionalProperties": False},
        }
    )
    return {"type": "object", "properties": props, "additionalProperties": False}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    features: dict[str, str] = field(default_factory=dict)
    ideal: dict[str, str] = field(default_factory=dict)
    modalities: list[str] | None = None
    out: str | None = None
    kcore: int | None = None
    split_mode: str = "per-user"
    seeds: list[int] | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RunConfig":
        validate_run_config(raw)
        raw = dict(raw)
        train_kw = {k: raw.pop(k) for k in list(raw) if k in _TRAIN_FIELDS}
        try:
            cfg = TrainConfig.from_dict(train_kw)
            spec = SyntheticSpec(**raw.pop("synthetic", {}))
        except ValueError as exc:
            raise CliError(f"invalid configuration: {exc}") from None
        run = cls(train=cfg, synthetic=spec, **raw)
        if run.modalities is not None and run.features:
            missing = set(run.modalities) - set(run.features)
            if missing:
                raise CliError(f"no feature file for modalities {sorted(missing)}")
        return run

    def to_dict(self) -> dict:
        out = self.train.to_dict()
        for name in ("data", "features", "ideal", "modalities", "out", "kcore", "split_mode", "seeds"):
            value = getattr(self, name)
            if value not in (None, {}, []):
                out[name] = value
        out["synthetic"] = dataclasses.asdict(self.synthetic)
        return out

    def selected_features(self) -> dict[str, str]:
        mods = self.modalities or sorted(self.features)
        return {m: self.features[m] for m in mods}


def validate_run_config(raw) -> None:
    try:
        jsonschema.validate(raw, run_config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(f"config schema violation at {where}: {exc.message}") from None


def load_run_config(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    validate_run_config(raw)
    return raw


# --------------------------------------------------------------------------- argument parsing

# flag dest -> RunConfig/TrainConfig key
_FLAG_KEYS = {
    "seed": "seed",
    "adapter": "adapter",
    "dim": "dim",
    "da_mult": "da_mult",
    "dropout": "dropout",
    "deterministic": "deterministic",
    "stop_grad_behavior": "stop_grad_behavior",
    "relu_after_gate": "relu_after_gate",
    "lora_rank": "lora_rank",
    "epochs": "epochs",
    "lr": "lr",
    "batch_size": "batch_size",
    "reg": "reg",
    "patience": "patience",
    "kcore": "kcore",
    "split_mode": "split_mode",
    "out": "out",
    "data": "data",
}


def parse_seeds(text: str) -> list[int]:
    """``"1..5"`` (inclusive range), ``"1,3,9"`` or a single seed."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            if hi < lo:
                raise ValueError
            seeds = list(range(lo, hi + 1))
        else:
            seeds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use 1..5 or 1,2,3") from None
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError("seeds must be non-negative")
    return seeds


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _modal_path(text: str) -> tuple[str, str]:
    if "=" in text:
        m, p = text.split("=", 1)
        return m, p
    return "v", text


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("size must look like 224x224 (height x width)") from None
    return h, w


def _model_flags(p: argparse.ArgumentParser, d: TrainConfig) -> None:
    p.add_argument("--config", metavar="PATH", default=None, help="RunConfig JSON; explicit flags override it")
    p.add_argument("--seed", type=_u64, default=d.seed, help="u64 seed for init, shuffling and negatives")
    p.add_argument("--adapter", choices=ADAPTERS, default=d.adapter, help="feature adapter in front of the fusion")
    p.add_argument("--dim", type=int, default=d.dim, help="behavioral embedding size d")
    p.add_argument("--da-mult", type=float, default=d.da_mult, help="decoupled size d_a = da-mult * dim")
    p.add_argument("--dropout", type=float, default=d.dropout, help="adapter dropout")
    p.add_argument("--lora-rank", type=int, default=d.lora_rank, help="rank of the LoRA baseline")
    p.add_argument("--relu-after-gate", action="store_true", help="extra ReLU after the gated filter")
    p.add_argument("--stop-grad-behavior", action="store_true", help="block adapter gradients into item embeddings")
    p.add_argument("--deterministic", action="store_true", help="fixed reduction order (recorded in the checkpoint)")
    p.add_argument("--epochs", type=int, default=d.epochs, help="maximum epochs")
    p.add_argument("--lr", type=float, default=d.lr, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="BPR batch size")
    p.add_argument("--reg", type=float, default=d.reg, help="L2 weight on touched embeddings")
    p.add_argument("--patience", type=int, default=d.patience, help="early-stopping patience in epochs")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", metavar="DIR", default=None, help="split directory with train/valid/test.tsv")
    p.add_argument(
        "--features", metavar="[M=]PATH", type=_modal_path, action="append", default=None,
        help="content feature file per modality (repeatable; modality defaults to v)",
    )


def _synth_flags(p: argparse.ArgumentParser, s: SyntheticSpec) -> None:
    p.add_argument("--users", type=int, default=s.users, help="synthetic users")
    p.add_argument("--items", type=int, default=s.items, help="synthetic items")
    p.add_argument("--latent-dim", type=int, default=s.latent_dim, help="planted latent size k")
    p.add_argument("--feature-dim", type=int, default=s.feature_dim, help="content feature size d_m")
    p.add_argument("--per-user", type=int, default=s.per_user, help="interactions per user")
    p.add_argument("--drift", type=float, default=s.drift_prob, help="probability an item's feature drifts")
    p.add_argument("--omit", type=float, default=s.omit_prob, help="probability an item's feature is partially zeroed")
    p.add_argument("--omit-frac", type=float, default=s.omit_frac, help="share of informative coordinates zeroed")
    p.add_argument("--noise", type=float, default=s.noise, help="std of nuisance coordinates")


def build_parser(suppress_defaults: bool = False) -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="befa", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    tc, ss = TrainConfig(), SyntheticSpec()

    p = sub.add_parser("synth", help="write planted synthetic interactions and features", formatter_class=fmt)
    _synth_flags(p, ss)
    p.add_argument("--seed", type=_u64, default=0, help="u64 generator seed")
    p.add_argument("--out", metavar="DIR", required=True, help="output directory")

    p = sub.add_parser("prep", help="k-core filter and 8:1:1 split", formatter_class=fmt)
    p.add_argument("--input", metavar="PATH", required=True, help="interaction TSV (user, item[, timestamp])")
    p.add_argument("--kcore", type=int, default=10, help="minimum user and item degree")
    p.add_argument("--split-mode", choices=("per-user", "global"), default="per-user", help="split granularity")
    p.add_argument("--seed", type=_u64, default=0, help="u64 split seed")
    p.add_argument("--out", metavar="DIR", required=True, help="output split directory")

    p = sub.add_parser("train", help="train one model and write its checkpoint", formatter_class=fmt)
    _model_flags(p, tc)
    _data_flags(p)
    p.add_argument("--out", metavar="DIR", default=None, help="output directory (required here or in --config)")

    p = sub.add_parser("evaluate", help="all-ranking metrics of a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="checkpoint file")
    _data_flags(p)
    p.add_argument("--adapter", choices=ADAPTERS, default=None, help="fail unless the checkpoint uses this adapter")
    p.add_argument("--part", choices=("test", "valid"), default="test", help="split part to rank")
    p.add_argument("--ks", default="10,20", help="comma-separated cutoffs")
    p.add_argument("--json", action="store_true", help="print JSON instead of the text table")
    p.add_argument("--out", metavar="DIR", default=None, help="also write metrics.json/metrics.txt here")

    p = sub.add_parser("compare", help="train every adapter on shared splits and seeds", formatter_class=fmt)
    _model_flags(p, tc)
    _data_flags(p)
    p.add_argument("--ideal", metavar="[M=]PATH", type=_modal_path, action="append", default=None,
                   help="ideal feature file for deviation columns (with --data)")
    p.add_argument("--seeds", type=parse_seeds, default=[1, 2, 3, 4, 5], help="seed list, e.g. 1..5 or 1,2")
    p.add_argument("--adapters", default=",".join(COMPARE_ORDER), help="comma-separated adapters; none is the baseline")
    p.add_argument("--kcore", type=int, default=None, help="k-core filter synthetic data before splitting")
    p.add_argument("--split-mode", choices=("per-user", "global"), default="per-user", help="split granularity")
    _synth_flags(p, ss)
    p.add_argument("--out", metavar="DIR", default=None, help="write compare.json/compare.txt here")

    p = sub.add_parser("attribute", help="similarity-weighted heatmaps from attribution bundles", formatter_class=fmt)
    p.add_argument("--checkpoint", metavar="PATH", default=None, help="checkpoint providing the fusion projection")
    p.add_argument("--bundle", metavar="DIR", action="append", required=True, help="bundle directory (repeatable)")
    p.add_argument("--modality", default=None, help="modality whose projection maps mask features")
    p.add_argument("--raw-cosine", action="store_true", help="use mask features as is (dims must already match)")
    p.add_argument("--through-adapter", action="store_true", help="pass mask features through the eval-mode adapter first")
    p.add_argument("--format", choices=("pgm", "csv", "both"), default="both", help="heatmap file format")
    p.add_argument("--size", type=_size, default=None, help="upsample to HxW (overrides the bundle's export size)")
    p.add_argument("--upsample", choices=("bilinear", "nearest"), default="bilinear", help="upsampling rule")
    p.add_argument("--out", metavar="DIR", required=True, help="output directory")

    p = sub.add_parser("diagnose", help="deviation of raw (and adapted) features from ideal ones", formatter_class=fmt)
    p.add_argument("--features", metavar="PATH", required=True, help="observed content features")
    p.add_argument("--ideal", metavar="PATH", required=True, help="ideal content features (same items)")
    p.add_argument("--checkpoint", metavar="PATH", default=None, help="add the adapted-feature report")
    p.add_argument("--data", metavar="DIR", default=None, help="split directory giving the checkpoint's item order")
    p.add_argument("--modality", default=None, help="adapter modality in the checkpoint")
    p.add_argument("--frame", choices=("identity", "aligned", "both"), default="both", help="comparison frame")
    p.add_argument("--omission-threshold", type=float, default=0.9, help="cosine below which a row is labelled omission")
    p.add_argument("--out", metavar="DIR", default=None, help="write diagnose.json/diagnose.txt here")

    if suppress_defaults:
        for action in list(parser._actions) + [a for sp in sub.choices.values() for a in sp._actions]:
            if action.dest not in ("help", "command"):
                action.default = argparse.SUPPRESS
                action.required = False
    return parser


def _explicit(argv: Sequence[str]) -> dict:
    """Options that were actually given on the command line."""
    ns, _ = build_parser(suppress_defaults=True).parse_known_args(argv)
    return vars(ns)


def resolve_run_config(args: argparse.Namespace, argv: Sequence[str]) -> RunConfig:
    """TrainConfig defaults, then ``--config``, then explicitly given flags."""
    raw = load_run_config(args.config) if args.config else {}
    explicit = _explicit(argv)
    merged = dict(raw)
    for dest, key in _FLAG_KEYS.items():
        if dest in explicit:
            merged[key] = explicit[dest]
        elif key not in merged and hasattr(args, dest) and key in _TRAIN_FIELDS:
            merged[key] = getattr(args, dest)
    if getattr(args, "features", None):
        merged["features"] = dict(args.features)
    if getattr(args, "ideal", None) and "ideal" in explicit:
        merged["ideal"] = dict(args.ideal)
    if "seeds" in explicit:
        merged["seeds"] = explicit["seeds"]
    if args.command == "compare":
        spec = dict(raw.get("synthetic", {}))
        names = {"users": "users", "items": "items", "latent_dim": "latent_dim", "feature_dim": "feature_dim",
                 "per_user": "per_user", "drift": "drift_prob", "omit": "omit_prob", "omit_frac": "omit_frac",
                 "noise": "noise"}
        for dest, key in names.items():
            if dest in explicit:
                spec[key] = explicit[dest]
        merged["synthetic"] = spec
    merged = {k: v for k, v in merged.items() if v is not None}
    return RunConfig.from_dict(merged)


# --------------------------------------------------------------------------- shared loading


def _load_data(run_data: str | None, features: Mapping[str, str], seed: int = 0) -> tuple[DataSplit, dict[str, np.ndarray]]:
    if not run_data:
        raise CliError("a split directory is required (--data or 'data' in --config)")
    if not features:
        raise CliError("at least one feature file is required (--features or 'features' in --config)")
    if not Path(run_data).is_dir():
        raise CliError(f"split directory not found: {run_data}")
    split = load_split(run_data, seed)
    feats = {}
    for m, path in sorted(features.items()):
        if not Path(path).exists():
            raise CliError(f"feature file not found: {path}")
        dim = _feature_dim(path)
        feats[m] = load_features(path, dim, split.base.item_ids, m).data
    return split, feats


def _feature_dim(path: str | Path) -> int:
    """Width of a feature file, read from its header only."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, encoding="utf-8") as fh:
            return len(fh.readline().rstrip("\n").split(",")) - 1
    with open(path, "rb") as fh:
        head = fh.read(14)
    if len(head) < 14:
        raise DataError(f"{path}: truncated feature header")
    return struct.unpack_from("<I", head, 10)[0]


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args, argv) -> int:
    try:
        spec = SyntheticSpec(
            users=args.users, items=args.items, latent_dim=args.latent_dim, feature_dim=args.feature_dim,
            per_user=args.per_user, drift_prob=args.drift, omit_prob=args.omit, omit_frac=args.omit_frac,
            noise=args.noise,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    inter, raw, ideal = synth_generate(spec, make_rng(args.seed))
    out = Outputs(args.out)
    out.add("interactions.tsv", interactions_text(inter))
    out.add("features_v.befa", features_bytes(raw.data, raw.item_ids))
    out.add("ideal_v.befa", features_bytes(ideal.data, ideal.item_ids))
    names = {0: "clean", 1: "drift", 2: "omission"}
    out.add("corruption.tsv", "".join(f"{i}\t{names[int(c)]}\n" for i, c in zip(raw.item_ids, raw.corruption)))
    counts = {names[c]: int((raw.corruption == c).sum()) for c in names}
    out.add_json("synth.json", {"seed": args.seed, "spec": dataclasses.asdict(spec), "users": inter.n_users,
                                "items": inter.n_items, "interactions": len(inter), "corruption": counts})
    out.commit()
    print(f"{inter.n_users} users, {inter.n_items} items, {len(inter)} interactions; corruption {counts}")
    return 0


def cmd_prep(args, argv) -> int:
    if not Path(args.input).exists():
        raise CliError(f"interaction file not found: {args.input}")
    data = load_interactions(args.input)
    filtered = kcore_filter(data, args.kcore)
    split = split_811(filtered, args.seed, args.split_mode)
    out = Outputs(args.out)
    for part in ("train", "valid", "test"):
        sub = dataclasses.replace(filtered, records=getattr(split, part))
        out.add(f"{part}.tsv", interactions_text(sub))
    stats = {
        "input": {"users": data.n_users, "items": data.n_items, "interactions": len(data)},
        "kcore": args.kcore,
        "filtered": {"users": filtered.n_users, "items": filtered.n_items, "interactions": len(filtered)},
        "split_mode": args.split_mode,
        "seed": args.seed,
        "parts": {p: int(len(getattr(split, p))) for p in ("train", "valid", "test")},
    }
    out.add_json("prep.json", stats)
    out.commit()
    f = stats["filtered"]
    print(f"{args.kcore}-core: {f['users']} users, {f['items']} items, {f['interactions']} interactions; "
          f"train/valid/test = {stats['parts']['train']}/{stats['parts']['valid']}/{stats['parts']['test']}")
    return 0


def _epoch_line(r) -> str:
    return f"epoch {r.epoch:4d}  loss {r.loss:.6f}  valid recall {r.valid_recall:.4f}  ndcg {r.valid_ndcg:.4f}  ({r.seconds:.2f}s)"


def cmd_train(args, argv) -> int:
    run = resolve_run_config(args, argv)
    if not run.out:
        raise CliError("an output directory is required (--out or 'out' in --config)")
    split, feats = _load_data(run.data, run.selected_features(), run.train.seed)
    ckpt, reports = train(split, feats, run.train, on_epoch=lambda r: logger.info(_epoch_line(r)))
    model = model_from_checkpoint(ckpt)
    metrics = evaluate(model, split, feats, ks=run.train.ks, part="test")
    out = Outputs(run.out)
    out.add("checkpoint.befc", checkpoint_bytes(ckpt))
    log = [{"epoch": r.epoch, "loss": r.loss, "valid_recall": r.valid_recall, "valid_ndcg": r.valid_ndcg} for r in reports]
    out.add("epochs.jsonl", "".join(json.dumps(_clean(x), sort_keys=True) + "\n" for x in log))
    out.add_json("metrics.json", {"best_epoch": ckpt.epoch, "epochs_run": len(reports), "test": metrics.to_dict()})
    out.add("metrics.txt", metrics.to_text() + "\n")
    out.add_json("run.json", run.to_dict())
    out.commit()
    seconds = sum(r.seconds for r in reports) / len(reports)
    print(f"best epoch {ckpt.epoch} of {len(reports)} ({seconds:.3f}s/epoch)", file=sys.stderr)
    print(metrics.to_text())
    return 0


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise CliError(f"bad --ks {text!r}") from None
    if not ks or min(ks) < 1:
        raise CliError("--ks must list positive integers")
    return ks


def cmd_evaluate(args, argv) -> int:
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, expect_adapter=args.adapter)
    split, feats = _load_data(args.data, dict(args.features or []))
    if set(feats) != set(model.modalities):
        raise CliError(f"checkpoint expects modalities {model.modalities}, got {sorted(feats)}")
    if split.n_users != model.n_users or split.n_items != model.n_items:
        raise CliError(
            f"split has {split.n_users} users/{split.n_items} items, checkpoint {model.n_users}/{model.n_items}"
        )
    metrics = evaluate(model, split, feats, ks=_ks(args.ks), part=args.part)
    out = Outputs(args.out)
    out.add_json("metrics.json", {args.part: metrics.to_dict()})
    out.add("metrics.txt", metrics.to_text() + "\n")
    out.commit()
    print(dumps(metrics.to_dict()) if args.json else metrics.to_text())
    return 0


# --------------------------------------------------------------------------- compare


@dataclass
class CompareResult:
    seeds: list[int]
    adapters: list[str]
    metrics: dict[int, dict[str, MetricsTable]]
    best_epochs: dict[int, dict[str, int]]
    epoch_seconds: dict[int, dict[str, float]]
    # Delta(features, ideal) per seed: "raw" plus one entry per adapter, in the
    # identity frame and after a cross-fitted linear alignment
    delta: dict[int, dict[str, float]] = field(default_factory=dict)
    delta_aligned: dict[int, dict[str, float]] = field(default_factory=dict)

    def mean_metric(self, adapter: str, metric: str) -> float:
        vals = [self.metrics[s][adapter].to_dict()[metric] for s in self.seeds]
        return math.fsum(vals) / len(vals)

    def mean_rows(self) -> dict[str, dict[str, float]]:
        names = [m for m in self.metrics[self.seeds[0]][self.adapters[0]].to_dict() if m != "users"]
        return {a: {m: self.mean_metric(a, m) for m in names} for a in self.adapters}

    def mean_delta(self, key: str, aligned: bool = False) -> float | None:
        table = self.delta_aligned if aligned else self.delta
        vals = [table[s][key] for s in self.seeds if key in table.get(s, {})]
        return math.fsum(vals) / len(vals) if vals else None

    def to_dict(self) -> dict:
        baseline = "none" if "none" in self.adapters else self.adapters[0]
        _, records = experiment_table(self.mean_rows(), baseline)
        per_seed = {}
        for s in self.seeds:
            entry = {a: {"test": self.metrics[s][a].to_dict(), "best_epoch": self.best_epochs[s][a]} for a in self.adapters}
            if s in self.delta:
                entry["delta"] = self.delta[s]
                entry["delta_aligned"] = self.delta_aligned[s]
            per_seed[str(s)] = entry
        return {"seeds": self.seeds, "adapters": self.adapters, "baseline": baseline, "mean": records, "per_seed": per_seed}

    def to_text(self) -> str:
        baseline = "none" if "none" in self.adapters else self.adapters[0]
        text, _ = experiment_table(self.mean_rows(), baseline)
        lines = [f"mean over seeds {self.seeds}", text]
        if self.delta:
            lines += ["", f"{'features':<10}{'Delta':>10}{'Delta aligned':>15}"]
            for key in ["raw", *self.adapters]:
                d, da = self.mean_delta(key), self.mean_delta(key, aligned=True)
                lines.append(f"{key:<10}{d:>10.4f}{da:>15.4f}")
        return "\n".join(lines)


def run_compare(
    seeds: Sequence[int],
    config: TrainConfig,
    adapters: Sequence[str] = COMPARE_ORDER,
    split: DataSplit | None = None,
    features: Mapping[str, np.ndarray] | None = None,
    ideal: Mapping[str, np.ndarray] | None = None,
    spec: SyntheticSpec | None = None,
    kcore: int | None = None,
    split_mode: str = "per-user",
) -> CompareResult:
    """Train every adapter for every seed on the same split and negatives.

    With ``split`` and ``features`` given the data is fixed and only the
    training seed varies. Otherwise each seed draws a synthetic dataset from
    ``spec`` and splits it with that seed; the planted ideal features then
    feed the deviation columns.
    """
    adapters = [AdapterKind(a).value for a in adapters]
    res = CompareResult(list(seeds), adapters, {}, {}, {})
    for seed in seeds:
        if split is None:
            inter, raw, ideal_fm = synth_generate(spec or SyntheticSpec(), make_rng(seed))
            feats, ideals = {"v": raw.data}, {"v": ideal_fm.data}
            if kcore:
                keep = kcore_filter(inter, kcore)
                rows = [inter.item_index()[i] for i in keep.item_ids]
                feats, ideals = {"v": raw.data[rows]}, {"v": ideal_fm.data[rows]}
                inter = keep
            data = split_811(inter, seed, split_mode)
        else:
            data, feats, ideals = split, dict(features or {}), dict(ideal or {})
        res.metrics[seed], res.best_epochs[seed], res.epoch_seconds[seed] = {}, {}, {}
        if ideals:
            m = sorted(ideals)[0]
            res.delta[seed] = {"raw": deviation_report(feats[m], ideals[m]).delta}
            res.delta_aligned[seed] = {}
        for kind in adapters:
            cfg = dataclasses.replace(config, adapter=kind, seed=seed)
            ckpt, reports = train(data, feats, cfg)
            model = model_from_checkpoint(ckpt)
            res.metrics[seed][kind] = evaluate(model, data, feats, ks=cfg.ks, part="test")
            res.best_epochs[seed][kind] = ckpt.epoch
            res.epoch_seconds[seed][kind] = sum(r.seconds for r in reports) / len(reports)
            if ideals:
                raw_rep, ad_rep = adapter_deviation_report(model, feats[m], ideals[m], m)
                raw_al, ad_al = adapter_deviation_report(model, feats[m], ideals[m], m, frame="aligned")
                res.delta[seed][kind] = ad_rep.delta
                res.delta_aligned[seed]["raw"] = raw_al.delta
                res.delta_aligned[seed][kind] = ad_al.delta
            logger.info("seed %d %-6s R@20 %.4f (best epoch %d)", seed, kind,
                        res.metrics[seed][kind].recall.get(20, float("nan")), ckpt.epoch)
    return res


def cmd_compare(args, argv) -> int:
    run = resolve_run_config(args, argv)
    adapters = [a.strip() for a in args.adapters.split(",") if a.strip()]
    bad = [a for a in adapters if a not in ADAPTERS]
    if bad:
        raise CliError(f"unknown adapters {bad}")
    seeds = run.seeds or args.seeds
    split = feats = ideal = None
    if run.data:
        split, feats = _load_data(run.data, run.selected_features())
        if run.ideal:
            _, ideal = _load_data(run.data, run.ideal)
    res = run_compare(seeds, run.train, adapters, split, feats, ideal, run.synthetic, run.kcore, run.split_mode)
    out = Outputs(run.out)
    out.add_json("compare.json", {"config": run.to_dict(), **res.to_dict()})
    out.add("compare.txt", res.to_text() + "\n")
    out.commit()
    for s in res.seeds:
        times = "  ".join(f"{a} {res.epoch_seconds[s][a]:.3f}s" for a in res.adapters)
        print(f"seed {s} per-epoch time: {times}", file=sys.stderr)
    print(res.to_text())
    return 0


# --------------------------------------------------------------------------- attribute / diagnose


def cmd_attribute(args, argv) -> int:
    if not args.raw_cosine and not args.checkpoint:
        raise CliError("--checkpoint is required unless --raw-cosine is given")
    model = None
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise CliError(f"checkpoint not found: {args.checkpoint}")
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    modality = args.modality
    if model is not None:
        modality = modality or model.modalities[0]
        if modality not in model.modalities:
            raise CliError(f"checkpoint has no modality {modality!r}")
    out = Outputs(args.out)
    summary = {}
    for directory in args.bundle:
        if not Path(directory, "meta.json").exists():
            raise CliError(f"not an attribution bundle: {directory}")
        bundle: AttributionBundle = load_bundle(directory)
        projector = None if args.raw_cosine else bundle_projector(model, modality, bundle, args.through_adapter)
        heat = compute_heatmap(bundle, projector)
        name = Path(directory).name or "bundle"
        size = args.size or bundle.export_size
        fmts = ("pgm", "csv") if args.format == "both" else (args.format,)
        for fmt in fmts:
            out.add(f"{name}.{fmt}", heatmap_bytes(heat, fmt, size, args.upsample))
        summary[name] = {"weights": heat.weights.tolist(), "grid_shape": list(heat.grid.shape),
                         "export_size": list(size) if size else None}
    if len(summary) != len(args.bundle):
        raise CliError("bundle directories must have distinct names")
    out.add_json("attribution.json", {"modality": modality, "raw_cosine": args.raw_cosine,
                                      "through_adapter": args.through_adapter, "bundles": summary})
    out.commit()
    for name, s in summary.items():
        print(f"{name}: {len(s['weights'])} masks, weights {np.round(s['weights'], 4).tolist()}")
    return 0


def cmd_diagnose(args, argv) -> int:
    for p in (args.features, args.ideal):
        if not Path(p).exists():
            raise CliError(f"feature file not found: {p}")
    item_ids = None
    model = None
    if args.checkpoint:
        if not args.data:
            raise CliError("--data is required with --checkpoint (it fixes the item order)")
        if not Path(args.checkpoint).exists():
            raise CliError(f"checkpoint not found: {args.checkpoint}")
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        item_ids = load_split(args.data).base.item_ids
        if len(item_ids) != model.n_items:
            raise CliError("split and checkpoint disagree on the number of items")
    obs = load_features(args.features, _feature_dim(args.features), item_ids)
    ideal = load_features(args.ideal, obs.dim, obs.item_ids)
    frames = ("identity", "aligned") if args.frame == "both" else (args.frame,)
    reports: dict[str, DeviationReport] = {}
    for frame in frames:
        suffix = "" if frame == "identity" else "/aligned"
        if model is None:
            x = obs.data
            if frame == "aligned":
                x = aligned_features(x, ideal.data)
            reports["raw" + suffix] = deviation_report(x, ideal.data, args.omission_threshold)
        else:
            raw_rep, ad_rep = adapter_deviation_report(model, obs.data, ideal.data, args.modality, frame=frame)
            reports["raw" + suffix], reports["adapted" + suffix] = raw_rep, ad_rep
    out = Outputs(args.out)
    out.add_json("diagnose.json", {k: v.to_dict() for k, v in reports.items()})
    table = report_table(reports)
    out.add("diagnose.txt", table + "\n")
    out.commit()
    print(table)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "attribute": cmd_attribute,
    "diagnose": cmd_diagnose,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args, argv)
    except (CliError, DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"befa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
