"""``hiertool`` command line: synth, train, infer, eval, gradcheck, summarize.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``--json`` switches
stdout to a single machine-readable JSON document.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import dataset_builder as db
from . import gradcheck as gc
from . import metrics
from . import model as mdl
from .distortion import read_png
from .embeddings import build_query_matrix, load_vectors
from .hierarchy import load_hierarchy

log = logging.getLogger("hiertool")

SCHEDULE_KEYS = {f.name for f in fields(mdl.TrainSchedule)}
MODEL_KEYS = {f.name for f in fields(mdl.ModelConfig)} - {"level_sizes", "embed_dim"}


class UsageError(Exception):
    """Flag combination rejected before any I/O."""


# -- subcommands -------------------------------------------------------------------------


def cmd_make_sources(args) -> tuple[dict, str]:
    from .synthetic import make_sources, write_sources

    h = load_hierarchy(args.hierarchy)
    sources = make_sources(h, args.per_leaf, size=args.size, seed=args.seed, split=args.split,
                           prefix=args.prefix)
    write_sources(args.out, sources, h)
    return {"sources": len(sources), "out": str(args.out)}, f"wrote {len(sources)} sources to {args.out}"


def cmd_synth(args) -> tuple[dict, str]:
    from .synthetic import read_sources

    h = load_hierarchy(args.hierarchy)
    sources = read_sources(args.source, h)
    annotator = {
        "severity": lambda: db.SeverityAnnotator(h),
        "perfect": db.PerfectAnnotator,
    }[args.annotator]()
    cfg = db.BuildConfig(seed=args.seed, max_retries=args.max_retries)
    result = db.build_dataset(sources, annotator, h, cfg, out_dir=args.out)
    table = db.summarize(result.records, h.level_names)
    payload = {
        "records": len(result.records),
        "skipped": result.skipped,
        "attempts": len(result.attempts),
        "summary": table,
        "manifest": str(Path(args.out) / "manifest.jsonl"),
    }
    text = db.format_summary(table)
    if result.skipped:
        text += f"\nskipped {len(result.skipped)} source(s) after {args.max_retries} retries"
    return payload, text


def _load_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    unknown = set(cfg) - SCHEDULE_KEYS - MODEL_KEYS
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    return cfg


def _train_samples(manifest: Path, h, split: str) -> list[mdl.TrainSample]:
    records = db.read_manifest(manifest, h)
    if split != "all":
        records = [r for r in records if r.split == split]
    base = manifest.parent
    return [
        mdl.TrainSample(read_png(base / r.image_path), r.category_path, r.level_label)
        for r in records
    ]


def cmd_train(args) -> tuple[dict, str]:
    h = load_hierarchy(args.hierarchy)
    table = load_vectors(args.vectors)
    conf = _load_json_config(args.config)
    for key in ("lr", "batch", "epochs", "image_size"):
        if getattr(args, key) is not None:
            conf[key] = getattr(args, key)

    samples = _train_samples(Path(args.manifest), h, args.split)
    if args.overfit_one:
        samples = samples[:1]
        conf.update(augment=False, batch=1)
        conf.setdefault("epochs", 200)
    if not samples:
        raise ValueError("no training records in the manifest")

    cfg = mdl.ModelConfig.for_hierarchy(
        h, table.dim, **{k: v for k, v in conf.items() if k in MODEL_KEYS}
    )
    schedule = mdl.TrainSchedule(**{k: v for k, v in conf.items() if k in SCHEDULE_KEYS})
    labels = mdl.LabelIndex(h)
    model = mdl.HierarchyNet(cfg, build_query_matrix(table, h), seed=args.seed)

    initial = mdl.evaluate_loss(samples, model, labels)

    def report(epoch, loss):
        log.info("epoch %d  loss %.5f", epoch, loss)

    result = mdl.train(samples, model, labels, schedule, seed=args.seed, on_epoch=report)
    final = mdl.evaluate_loss(samples, model, labels)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out, labels.names(), extra={"hierarchy": h.dumps(), "seed": args.seed})
    curve = Path(args.loss_curve) if args.loss_curve else out.with_suffix(".losses.tsv")
    with open(curve, "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\n")
        for i, loss in enumerate(result.losses):
            fh.write(f"{i}\t{loss:.8f}\n")

    payload = {
        "checkpoint": str(out),
        "loss_curve": str(curve),
        "samples": len(samples),
        "epochs": schedule.epochs,
        "initial_loss": initial,
        "final_loss": final,
        "losses": result.losses,
    }
    text = (
        f"trained on {len(samples)} sample(s) for {schedule.epochs} epoch(s)\n"
        f"loss {initial:.5f} -> {final:.5f}\ncheckpoint {out}\nloss curve {curve}"
    )
    return payload, text


def _infer_inputs(args) -> list[tuple[str, Path]]:
    if args.images:
        return [(Path(p).stem, Path(p)) for p in args.images]
    if args.manifest is None:
        return []
    manifest = Path(args.manifest)
    out = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            rel = row.get("image_path", row.get("image"))
            image_id = row.get("image_id", row.get("source_id"))
            if rel is None or image_id is None:
                raise ValueError("manifest rows need image_id/image_path (or source_id/image)")
            out.append((image_id, manifest.parent / rel))
    return out


def cmd_infer(args) -> tuple[dict, str]:
    model, meta = mdl.HierarchyNet.load(args.checkpoint)
    if args.hierarchy:
        h = load_hierarchy(args.hierarchy)
    elif "hierarchy" in meta:
        from .hierarchy import loads_hierarchy

        h = loads_hierarchy(meta["hierarchy"])
    else:
        raise ValueError("checkpoint carries no hierarchy; pass --hierarchy")
    labels = mdl.LabelIndex(h)
    if meta.get("categories") and meta["categories"] != labels.names():
        raise mdl.ModelError("hierarchy categories differ from the checkpoint's")

    rows, details = [], []
    for image_id, path in _infer_inputs(args):
        pred = mdl.infer(read_png(path), model, labels)
        rows.append((image_id, pred.path))
        details.append({
            "image_id": image_id,
            "level": h.level_names[pred.level],
            "category_path": h.path_names(pred.path),
        })
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_path_manifest(out, rows, h)
    depths = [len(p) for _, p in rows]
    mean_depth = float(np.mean(depths)) if depths else None
    payload = {"predictions": details, "out": str(out), "mean_depth": mean_depth}
    text = f"wrote {len(rows)} prediction(s) to {out}"
    if depths:
        text += f"\nmean predicted depth {mean_depth:.3f}"
    return payload, text


def cmd_eval(args) -> tuple[dict, str]:
    h = load_hierarchy(args.hierarchy)
    truth = metrics.read_path_manifest(args.truth, h)
    pred = metrics.read_path_manifest(args.pred, h)
    _, t, p = metrics.pair_manifests(truth, pred)
    report = metrics.evaluate_manifest(t, p, h)
    text = metrics.format_report(report)
    payload = report.as_dict(percent=True)
    payload.pop("per_sample", None)
    payload["n"] = len(report)
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return payload, text


def cmd_gradcheck(args) -> tuple[dict, str]:
    results = gc.run(args.ops, seed=args.seed, tol=args.tol, model_tol=args.model_tol)
    lines = [
        f"{'PASS' if r.passed else 'FAIL'}  {r.op:<14} max_rel_err={r.max_rel_error:.3e}  "
        f"entries={r.checked}  tol={r.tol:g}"
        for r in results
    ]
    payload = {
        "results": [
            {"op": r.op, "max_rel_error": r.max_rel_error, "checked": r.checked,
             "tol": r.tol, "passed": r.passed}
            for r in results
        ],
        "passed": all(r.passed for r in results),
    }
    failed = [r.op for r in results if not r.passed]
    if failed:
        lines.append("failed: " + ", ".join(failed))
    return payload, "\n".join(lines)


def cmd_summarize(args) -> tuple[dict, str]:
    h = load_hierarchy(args.hierarchy)
    table = db.summarize(db.read_manifest(args.manifest, h), h.level_names)
    return table, db.format_summary(table)


# -- parser ------------------------------------------------------------------------------


def _ops_list(text: str) -> list[str]:
    ops = [o.strip() for o in text.split(",") if o.strip()]
    unknown = [o for o in ops if o not in gc.SUITES]
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown op(s) {unknown}; choose from {', '.join(gc.SUITES)}"
        )
    return ops


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hiertool", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-sources", parents=[common], help="render synthetic source images")
    s.add_argument("--hierarchy", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--per-leaf", type=_pos_int, default=10)
    s.add_argument("--size", type=_pos_int, default=32)
    s.add_argument("--split", default="train")
    s.add_argument("--prefix", default="src")
    s.set_defaults(func=cmd_make_sources)

    s = sub.add_parser("synth", parents=[common], help="build a distorted, level-labelled dataset")
    s.add_argument("--hierarchy", required=True)
    s.add_argument("--source", required=True, help="directory holding sources.jsonl")
    s.add_argument("--out", required=True)
    s.add_argument("--max-retries", type=_pos_int, default=25)
    s.add_argument("--annotator", choices=("severity", "perfect"), default="severity")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model on a dataset manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--hierarchy", required=True)
    s.add_argument("--vectors", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--config", help="JSON file with schedule/model overrides")
    s.add_argument("--epochs", type=_nonneg_int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=_pos_int)
    s.add_argument("--image-size", dest="image_size", type=_pos_int)
    s.add_argument("--split", default="all", help="train on this split only (default all)")
    s.add_argument("--loss-curve", help="per-epoch loss TSV (default: next to checkpoint)")
    s.add_argument("--overfit-one", action="store_true",
                   help="train on the first record only, no augmentation")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="predict label paths with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--hierarchy")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="JSON-lines manifest with image paths")
    src.add_argument("--images", nargs="*", help="PNG files; ids are file stems")
    s.add_argument("--out", required=True, help="prediction manifest (TSV)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="score predictions against truth")
    s.add_argument("--hierarchy", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", help="also write the report as JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--ops", type=_ops_list, help=f"comma-separated subset of: {', '.join(gc.SUITES)}")
    s.add_argument("--tol", type=float, default=gc.OP_TOL)
    s.add_argument("--model-tol", type=float, default=gc.MODEL_TOL)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("summarize", parents=[common], help="per-level record counts")
    s.add_argument("--manifest", required=True)
    s.add_argument("--hierarchy", required=True)
    s.set_defaults(func=cmd_summarize)
    return p


def _emit(payload: Any, text: str, as_json: bool) -> None:
    if as_json:
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    elif text:
        print(text)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func: Callable = args.func
    try:
        payload, text = func(args)
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # every module error becomes exit 1
        log.debug("failure", exc_info=True)
        print(f"hiertool {args.command}: error: {exc}", file=sys.stderr)
        return 1
    _emit(payload, text, args.json)
    if args.command == "gradcheck" and not payload["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
