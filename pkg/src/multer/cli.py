"""Command-line entry point: ``multer {synth,train,eval,cv,gradcheck,report}``.

Every command resolves one JSON configuration (built-in defaults, then the
``--config`` document, then flags) and writes it, seed included, into each
artifact.  Passing an artifact back through ``--config`` reproduces it.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .data import PROPERTIES, ZOOMS, PatchSet, SynthSpec, patchset_from_manifest, plan_folds, read_manifest, synth_generate, write_synth_dataset
from .gradsuite import TARGETS, TOLERANCE, run_suite
from .network import BackboneConfig, MulterConfig, MulterNet
from .params import from_json_entries, to_json_entries
from .training import (
    DivergenceError,
    RunReport,
    TrainConfig,
    accuracy,
    confusion_matrix,
    cross_validate,
    fold_seeds,
    predict_levels,
    train,
)

SEED_LIMIT = 2**64
BACKBONE_PRESETS = {"desk": BackboneConfig.desk, "paper": BackboneConfig.paper, "tiny": BackboneConfig.tiny}
_SYNTH_OWN = {"property", "patch_size", "seed"}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; maps to exit code 2."""


def default_config() -> dict:
    synth = {k: v for k, v in SynthSpec().to_dict().items() if k not in _SYNTH_OWN}
    return {
        "seed": 0,
        "threads": 1,
        "workers": 1,
        "fold": 1,
        "data": {
            "manifest": None,
            "property": "fiber_length",
            "zoom": 50,
            "rotation_deg": None,
            "patch_size": 64,
            "stride": None,
        },
        "synth": synth,
        "model": MulterConfig().to_dict(),
        "train": TrainConfig().to_dict(),
    }


def _merge(base: dict, update: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key != "backbone":
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_document(path: str) -> dict:
    """Read a config document; an artifact's embedded ``config`` is accepted too."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    if "artifact" in doc:
        doc = doc.get("config")
        if not isinstance(doc, dict):
            raise ConfigError(f"artifact {path} carries no config")
    return doc


def parse_levels(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}") from exc


def parse_seed(text: str) -> int:
    try:
        seed = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from exc
    if not 0 <= seed < SEED_LIMIT:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {seed}")
    return seed


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        cfg = _merge(cfg, load_document(args.config), "")
    overrides = {
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "workers": getattr(args, "workers", None),
        "fold": getattr(args, "fold", None),
    }
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    if getattr(args, "property", None) is not None:
        cfg["data"]["property"] = args.property
    if getattr(args, "zoom", None) is not None:
        cfg["data"]["zoom"] = args.zoom
    if getattr(args, "patch_size", None) is not None:
        cfg["data"]["patch_size"] = args.patch_size
    if getattr(args, "manifest", None) is not None:
        cfg["data"]["manifest"] = str(Path(args.manifest).resolve())
    if getattr(args, "levels", None) is not None:
        cfg["model"]["levels"] = args.levels
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["schedule"]["total_epochs"] = args.epochs
    if isinstance(cfg["model"].get("backbone"), str):
        name = cfg["model"]["backbone"]
        if name not in BACKBONE_PRESETS:
            raise ConfigError(f"unknown backbone preset {name!r}; choose from {sorted(BACKBONE_PRESETS)}")
        cfg["model"]["backbone"] = BACKBONE_PRESETS[name]().to_dict()
    validate(cfg)
    # canonical form: every section round-trips through its typed config
    cfg["model"] = model_config(cfg).to_dict()
    cfg["train"] = train_config(cfg).to_dict()
    return cfg


def model_config(cfg: dict) -> MulterConfig:
    m = dict(cfg["model"])
    m["backbone"] = BackboneConfig(**m["backbone"]) if isinstance(m["backbone"], dict) else m["backbone"]
    return MulterConfig(**m)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def synth_spec(cfg: dict) -> SynthSpec:
    d = cfg["data"]
    return SynthSpec.from_dict({**cfg["synth"], "property": d["property"], "patch_size": d["patch_size"], "seed": cfg["seed"]})


def validate(cfg: dict) -> None:
    d = cfg["data"]
    if d["property"] not in PROPERTIES:
        raise ConfigError(f"property must be one of {PROPERTIES}, got {d['property']!r}")
    if d["zoom"] not in ZOOMS:
        raise ConfigError(f"zoom must be one of {ZOOMS}, got {d['zoom']!r}")
    if not isinstance(d["patch_size"], int) or d["patch_size"] < 1:
        raise ConfigError(f"patch_size must be a positive integer, got {d['patch_size']!r}")
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < SEED_LIMIT:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {cfg['seed']!r}")
    for key in ("threads", "workers"):
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise ConfigError(f"{key} must be a positive integer, got {cfg[key]!r}")
    if cfg["fold"] not in range(1, 7):
        raise ConfigError(f"fold must be 1..6, got {cfg['fold']!r}")
    try:
        model_config(cfg)
        train_config(cfg)
        if d["manifest"] is None:
            synth_spec(cfg)
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# artifacts


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _csv_text(header: list[str], rows, cfg: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# config={json.dumps(cfg, sort_keys=True)}\n")
    buf.write(f"# seed={cfg['seed']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv_rows(path: Path) -> list[dict]:
    """Rows of an artifact CSV, skipping the ``#`` provenance header."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_history(path: Path, histories: list[list[dict]], cfg: dict) -> None:
    rows = [
        [fold, h["epoch"], repr(h["lr"]), repr(h["loss"]), repr(h["train_acc"])]
        for fold, hist in enumerate(histories, start=1)
        for h in hist
    ]
    path.write_text(_csv_text(["fold", "epoch", "lr", "loss", "train_acc"], rows, cfg))


def write_report(out: Path, report: RunReport, cfg: dict) -> None:
    dump_json(out / "report.json", {"artifact": "cv-report", **report.to_dict()})
    (out / "report.csv").write_text(_csv_text(["split", "accuracy"], report.table_rows(), cfg))
    write_history(out / "history.csv", report.history, cfg)


def load_patches(cfg: dict) -> PatchSet:
    d = cfg["data"]
    if d["manifest"] is None:
        return synth_generate(synth_spec(cfg)).patches
    manifest = read_manifest(d["manifest"]).select(zoom=d["zoom"], rotation_deg=d["rotation_deg"], rated=d["property"])
    return patchset_from_manifest(manifest, d["property"], d["patch_size"], d["stride"])


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, args) -> int:
    if cfg["data"]["manifest"] is not None:
        raise ConfigError("synth generates data; drop data.manifest")
    out = _out_dir(args)
    ds = synth_generate(synth_spec(cfg))
    write_synth_dataset(ds, out)
    counts = {str(k): int(v) for k, v in zip(*np.unique(ds.patches.labels, return_counts=True))}
    log = {
        "artifact": "synth-log",
        "config": cfg,
        "seed": cfg["seed"],
        "patches": len(ds.patches),
        "class_counts": counts,
        "manifest_sha256": hashlib.sha256((out / "manifest.csv").read_bytes()).hexdigest(),
        "pixels_sha256": ds.patches.fingerprint(),
    }
    dump_json(out / "synth_log.json", log)
    print(f"wrote {len(ds.patches)} patches to {out}")
    return 0


def cmd_cv(cfg: dict, args) -> int:
    out = _out_dir(args)
    patches = load_patches(cfg)
    report = cross_validate(model_config(cfg), train_config(cfg), patches, cfg["seed"], workers=cfg["workers"])
    report.config = cfg
    write_report(out, report, cfg)
    for name, value in report.table_rows():
        print(f"{name:8s} {value}")
    return 0


def _fold_split(cfg: dict, patches: PatchSet):
    plan = plan_folds(patches)
    fold = plan.folds[cfg["fold"] - 1]
    return plan.split(patches, fold)


def cmd_train(cfg: dict, args) -> int:
    out = _out_dir(args)
    patches = load_patches(cfg)
    train_set, test_set = _fold_split(cfg, patches)
    init_seed, train_seed = fold_seeds(cfg["seed"], 6)[cfg["fold"] - 1]
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    model = MulterNet.init(mcfg, init_seed)
    history = train(model, train_set, tcfg.schedule, tcfg.batch_size, train_seed, tcfg.momentum, tcfg.weight_decay, tcfg.augment)
    hist = [vars(h) for h in history]
    dump_json(
        out / "checkpoint.json",
        {"artifact": "checkpoint", "config": cfg, "seed": cfg["seed"], "params": to_json_entries(model.named_parameters())},
    )
    write_history(out / "history.csv", [hist], cfg)
    preds = predict_levels(model, test_set)
    acc = accuracy(preds, test_set.labels)
    dump_json(
        out / "metrics.json",
        {
            "artifact": "train-metrics",
            "config": cfg,
            "seed": cfg["seed"],
            "test_location": cfg["fold"],
            "accuracy": acc,
            "confusion": confusion_matrix(preds, test_set.labels, mcfg.n_classes),
        },
    )
    print(f"fold {cfg['fold']}: test accuracy {acc:.1f}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    try:
        ckpt = json.loads(Path(args.checkpoint).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    if ckpt.get("artifact") != "checkpoint":
        raise ConfigError(f"{args.checkpoint} is not a checkpoint")
    model_cfg = model_config(ckpt["config"])
    model = MulterNet.init(model_cfg, 0)
    model.load_state(from_json_entries(ckpt["params"]))
    patches = load_patches(cfg)
    if args.split == "test":
        _, patches = _fold_split(cfg, patches)
    preds = predict_levels(model, patches)
    acc = accuracy(preds, patches.labels)
    result = {
        "artifact": "eval",
        "config": cfg,
        "seed": cfg["seed"],
        "checkpoint_config": ckpt["config"],
        "split": args.split,
        "patches": len(patches),
        "accuracy": acc,
        "confusion": confusion_matrix(preds, patches.labels, model_cfg.n_classes),
    }
    if args.out:
        dump_json(_out_dir(args) / "eval.json", result)
    print(f"accuracy {acc:.1f} on {len(patches)} patches")
    return 0


def cmd_gradcheck(cfg: dict, args) -> int:
    targets = args.targets.split(",") if args.targets else None
    unknown = sorted(set(targets or []) - set(TARGETS))
    if unknown:
        raise ConfigError(f"unknown gradcheck targets {unknown}; choose from {sorted(TARGETS)}")
    results = run_suite(cfg["seed"], args.instances, targets, corrupt=args.corrupt)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{r.target:20s} instances={r.instances:3d} max_rel_error={r.max_error:.3e} {'PASS' if r.passed else 'FAIL'}")
    print(f"{'all targets pass' if ok else 'gradient check FAILED'} (tolerance {TOLERANCE:g})")
    if args.out:
        dump_json(
            _out_dir(args) / "gradcheck.json",
            {
                "artifact": "gradcheck",
                "config": cfg,
                "seed": cfg["seed"],
                "instances": args.instances,
                "tolerance": TOLERANCE,
                "results": {r.target: r.max_error for r in results},
                "passed": ok,
            },
        )
    return 0 if ok else 1


def _report_label(doc: dict, path: str) -> str:
    levels = doc.get("config", {}).get("model", {}).get("levels")
    prop = doc.get("config", {}).get("data", {}).get("property")
    if levels is not None:
        return f"{prop or 'run'} levels {''.join(str(v) for v in levels)}"
    return Path(path).stem


def cmd_report(cfg: dict, args) -> int:
    docs, reports = [], []
    for path in args.reports:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
        if doc.get("artifact") != "cv-report":
            raise ConfigError(f"{path} is not a cross-validation report")
        docs.append(doc)
        reports.append(RunReport.from_dict(doc))
    labels = args.labels.split(",") if args.labels else [_report_label(d, p) for d, p in zip(docs, args.reports)]
    if len(labels) != len(reports) or len(set(labels)) != len(labels):
        raise ConfigError("need one distinct label per report")
    n = max(len(r.accuracies) for r in reports)
    rows = []
    for i in range(n):
        rows.append([f"Split {i + 1}"] + [f"{r.accuracies[i]:.1f}" if i < len(r.accuracies) else "" for r in reports])
    rows.append(["Average"] + [r.summary() for r in reports])
    out = _out_dir(args)
    inputs = [{"label": lab, "path": str(p), "config": d.get("config"), "seed": d.get("seed")} for lab, p, d in zip(labels, args.reports, docs)]
    merged = {**cfg, "inputs": inputs}
    (out / "comparison.csv").write_text(_csv_text(["split", *labels], rows, merged))
    dump_json(out / "comparison.json", {"artifact": "comparison", "config": cfg, "seed": cfg["seed"], "inputs": inputs, "columns": labels, "rows": rows})
    widths = [max(len(str(row[j])) for row in rows + [["split", *labels]]) for j in range(len(labels) + 1)]
    for row in [["split", *labels]] + rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config document or an artifact embedding one")
    common.add_argument("--seed", type=parse_seed, metavar="U64", help="master seed (default 0)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=positive_int, metavar="N", help="BLAS threads (default 1)")
    common.add_argument("--workers", type=positive_int, metavar="N", help="folds trained in parallel (default 1)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--levels", type=parse_levels, metavar="1,2,3,4", help="enabled LEM levels")
    data.add_argument("--property", choices=PROPERTIES)
    data.add_argument("--zoom", type=int, choices=ZOOMS)
    data.add_argument("--patch-size", type=positive_int, metavar="S")
    data.add_argument("--manifest", metavar="PATH", help="image manifest; synthetic data when absent")
    data.add_argument("--epochs", type=positive_int, metavar="N", help="override total epochs")

    parser = argparse.ArgumentParser(prog="multer", description="Multi-level texture encoding experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common, data], help="generate a synthetic graded-texture dataset")
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("train", parents=[common, data], help="train on one location split")
    p.add_argument("--fold", type=int, choices=range(1, 7), metavar="F", help="held-out location 1..6")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("eval", parents=[common, data], help="score a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--fold", type=int, choices=range(1, 7), metavar="F", help="held-out location 1..6")
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("cv", parents=[common, data], help="six-fold location cross-validation")
    p.set_defaults(func=cmd_cv, needs_out=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=positive_int, default=20, metavar="N")
    p.add_argument("--targets", metavar="A,B", help=f"subset of: {','.join(TARGETS)}")
    p.add_argument("--corrupt", choices=sorted(TARGETS), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck, needs_out=False)

    p = sub.add_parser("report", parents=[common], help="merge cross-validation reports into one table")
    p.add_argument("reports", nargs="+", metavar="REPORT_JSON")
    p.add_argument("--labels", metavar="A,B", help="column labels, one per report")
    p.set_defaults(func=cmd_report, needs_out=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.needs_out and not args.out:
        parser.error(f"{args.command} requires --out DIR")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        parser.error(str(exc))
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=cfg["threads"]):
            return args.func(cfg, args)
    except ConfigError as exc:
        parser.error(str(exc))
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
