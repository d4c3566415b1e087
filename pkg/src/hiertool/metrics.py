"""Set-based hierarchical evaluation: SDL, hierarchical precision and recall.

All three measures act on ancestor-closure node sets, so they also accept
arbitrary (non-path) predictions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import AbstractSet, Hashable, Sequence

from .hierarchy import Hierarchy, HierarchyError, ancestor_closure


class MetricError(ValueError):
    pass


def sdl(truth: AbstractSet[Hashable], pred: AbstractSet[Hashable]) -> int:
    """Symmetric difference loss ``|S ^ S_hat|``."""
    return len(set(truth) ^ set(pred))


def hierarchical_precision(truth: AbstractSet[Hashable], pred: AbstractSet[Hashable]) -> float:
    """``|S & S_hat| / |S_hat|``; penalizes over-specific predictions."""
    if not pred:
        raise MetricError("hierarchical precision is undefined for an empty prediction set")
    return len(set(truth) & set(pred)) / len(pred)


def hierarchical_recall(truth: AbstractSet[Hashable], pred: AbstractSet[Hashable]) -> float:
    """``|S & S_hat| / |S|``; penalizes under-specific predictions."""
    if not truth:
        raise MetricError("hierarchical recall is undefined for an empty truth set")
    return len(set(truth) & set(pred)) / len(truth)


@dataclass
class SampleScore:
    sdl: int
    ph: float
    rh: float


@dataclass
class MetricReport:
    sdl_mean: float
    ph_mean: float
    rh_mean: float
    per_sample: list[SampleScore] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.per_sample)

    def as_dict(self, percent: bool = False) -> dict:
        scale = 100.0 if percent else 1.0
        return {
            "n": len(self.per_sample),
            "sdl": self.sdl_mean,
            "ph": self.ph_mean * scale,
            "rh": self.rh_mean * scale,
        }


def aggregate(scores: Sequence[SampleScore]) -> MetricReport:
    n = len(scores)
    if n == 0:
        return MetricReport(0.0, 0.0, 0.0, [])
    # fsum keeps the means independent of record order
    return MetricReport(
        sdl_mean=math.fsum(s.sdl for s in scores) / n,
        ph_mean=math.fsum(s.ph for s in scores) / n,
        rh_mean=math.fsum(s.rh for s in scores) / n,
        per_sample=list(scores),
    )


def score_sets(truth: AbstractSet[Hashable], pred: AbstractSet[Hashable]) -> SampleScore:
    return SampleScore(
        sdl(truth, pred),
        hierarchical_precision(truth, pred),
        hierarchical_recall(truth, pred),
    )


def evaluate_manifest(
    truths: Sequence[Sequence[int]],
    preds: Sequence[Sequence[int]],
    h: Hierarchy,
) -> MetricReport:
    """Score paired label paths; raises on length mismatch or invalid paths."""
    if len(truths) != len(preds):
        raise MetricError(f"{len(truths)} truths vs {len(preds)} predictions")
    scores = []
    for i, (t, p) in enumerate(zip(truths, preds)):
        try:
            s_true = ancestor_closure(h, t)
            s_pred = ancestor_closure(h, p)
        except HierarchyError as exc:
            raise MetricError(f"record {i}: {exc}") from exc
        scores.append(score_sets(s_true, s_pred))
    return aggregate(scores)


def format_report(report: MetricReport) -> str:
    """Table-style line: SDL plus P_H / R_H in percent."""
    return (
        f"n={len(report)}  SDL={report.sdl_mean:.4f}  "
        f"P_H(%)={100 * report.ph_mean:.2f}  R_H(%)={100 * report.rh_mean:.2f}"
    )


# -- path manifests ---------------------------------------------------------------------
#
# One record per line: ``image_id<TAB>A/B/None``; ``None`` marks truncation.
# JSON-lines dataset manifests (``category_path`` arrays) are accepted too.


def parse_path_manifest(text: str, h: Hierarchy) -> dict[str, tuple[int, ...]]:
    out: dict[str, tuple[int, ...]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            if line.lstrip().startswith("{"):
                row = json.loads(line)
                image_id, names = row["image_id"], row["category_path"]
            else:
                image_id, _, joined = line.rstrip("\n").partition("\t")
                if not joined:
                    raise MetricError("expected image_id<TAB>path")
                names = joined.split("/")
            path = h.path_from_names(names)
        except (HierarchyError, MetricError, KeyError, ValueError) as exc:
            raise MetricError(f"line {lineno}: {exc}") from exc
        if not path:
            raise MetricError(f"line {lineno}: empty label path")
        if image_id in out:
            raise MetricError(f"line {lineno}: duplicate image_id {image_id!r}")
        out[image_id] = path
    return out


def read_path_manifest(path, h: Hierarchy) -> dict[str, tuple[int, ...]]:
    with open(path, encoding="utf-8") as fh:
        return parse_path_manifest(fh.read(), h)


def format_path_line(image_id: str, path: Sequence[int], h: Hierarchy) -> str:
    return f"{image_id}\t{'/'.join(h.path_names(path, pad=True))}"


def write_path_manifest(path, rows: Sequence[tuple[str, Sequence[int]]], h: Hierarchy) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, p in rows:
            fh.write(format_path_line(image_id, p, h) + "\n")


def pair_manifests(
    truth: dict[str, tuple[int, ...]], pred: dict[str, tuple[int, ...]]
) -> tuple[list[str], list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Align two manifests by image id (sorted); raises when the id sets differ."""
    if truth.keys() != pred.keys():
        missing = sorted(truth.keys() - pred.keys())[:5]
        extra = sorted(pred.keys() - truth.keys())[:5]
        raise MetricError(f"manifest mismatch: missing predictions {missing}, unknown ids {extra}")
    ids = sorted(truth)
    return ids, [truth[i] for i in ids], [pred[i] for i in ids]
