"""Build level-annotated datasets from clean, fully labelled sources.

For each source image: draw a random distortion, apply it, ask an annotator
for a full-depth prediction and compare it level by level with the truth.
A prefix-closed correctness vector (right at the top, right down to some
level, wrong below) is kept, and the sample is labelled with the deepest
correct level. Anything else is retried with a fresh distortion, up to
``max_retries`` attempts, after which the source is skipped.
"""
from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import distortion as dist
from .distortion import DistortionRanges, DistortionSpec, RegionAnnotation
from .hierarchy import CorrectnessVector, Hierarchy, HierarchyError, is_legal

log = logging.getLogger(__name__)

THREADS_ENV = "HIERTOOL_THREADS"


class AnnotatorError(RuntimeError):
    pass


class Annotator(Protocol):
    def predict(
        self,
        image: np.ndarray,
        truth: tuple[int, ...],
        spec: DistortionSpec,
        rng: np.random.Generator,
    ) -> tuple[int, ...]:
        """Full-depth predicted path for a distorted image."""


@dataclass(frozen=True)
class SourceItem:
    source_id: str
    image: np.ndarray
    path: tuple[int, ...]
    region: RegionAnnotation
    split: str = "train"


@dataclass(frozen=True)
class BuildConfig:
    seed: int = 0
    max_retries: int = 25
    ranges: DistortionRanges = DistortionRanges()
    cutout_count: int | None = None

    def __post_init__(self):
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


@dataclass
class DatasetRecord:
    image_id: str
    image_path: str
    category_path: tuple[int, ...]
    level_label: int
    spec: DistortionSpec
    source_id: str
    attempts: int
    split: str = "train"
    image: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_json(self, h: Hierarchy) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "category_path": h.path_names(self.category_path),
            "level_label": h.level_names[self.level_label],
            "distortion": self.spec.to_json(),
            "source_id": self.source_id,
            "attempts": self.attempts,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, d: dict, h: Hierarchy) -> "DatasetRecord":
        path = h.path_from_names(d["category_path"])
        level = h.level_names.index(d["level_label"])
        if len(path) != level + 1:
            raise HierarchyError(
                f"record {d['image_id']}: path length {len(path)} vs level {d['level_label']!r}"
            )
        return cls(
            image_id=d["image_id"],
            image_path=d["image_path"],
            category_path=path,
            level_label=level,
            spec=DistortionSpec.from_json(d["distortion"]),
            source_id=d["source_id"],
            attempts=int(d["attempts"]),
            split=d.get("split", "train"),
        )


@dataclass
class Attempt:
    source_id: str
    attempt: int
    spec: DistortionSpec
    predicted: tuple[int, ...]
    correctness: CorrectnessVector
    accepted: bool


@dataclass
class BuildResult:
    records: list[DatasetRecord]
    skipped: list[str]
    attempts: list[Attempt]


# -- labelling rules ---------------------------------------------------------------


def correctness(truth: Sequence[int], pred: Sequence[int]) -> CorrectnessVector:
    if len(truth) != len(pred):
        raise ValueError(f"depth mismatch: truth {len(truth)} vs prediction {len(pred)}")
    return tuple(int(a == b) for a, b in zip(truth, pred))


def assign_level(v: Sequence[int]) -> int:
    """Deepest correctly classified level of a legal vector."""
    if not is_legal(v):
        raise ValueError(f"illegal correctness vector {list(v)}")
    return max(i for i, b in enumerate(v) if b == 1)


# -- annotators ----------------------------------------------------------------------


class PerfectAnnotator:
    def predict(self, image, truth, spec, rng):
        return tuple(truth)


class WrongAtTopAnnotator:
    """Always picks a different top-level node (needs >= 2 of them)."""

    def __init__(self, h: Hierarchy):
        self.h = h

    def predict(self, image, truth, spec, rng):
        others = [n for n in self.h.nodes_at_level(0) if n != truth[0]]
        path = [others[int(rng.integers(len(others)))]]
        while len(path) < self.h.depth:
            kids = self.h.children(path[-1])
            path.append(kids[int(rng.integers(len(kids)))])
        return tuple(path)


def severity(spec: DistortionSpec, ranges: DistortionRanges = DistortionRanges()) -> float:
    """Each selected distortion adds 0.5 plus half its normalized strength."""

    def unit(value, lo, hi):
        return 0.5 if hi == lo else (value - lo) / (hi - lo)

    total = 0.0
    if dist.NOISE in spec.types:
        total += 0.5 + 0.5 * unit(spec.sigma, *ranges.sigma)
    if dist.BLUR in spec.types:
        total += 0.5 + 0.5 * unit(spec.eta, *ranges.eta)
    if dist.DOWNSAMPLE in spec.types:
        # smaller area ratio is stronger
        total += 0.5 + 0.5 * (1.0 - unit(spec.lambda_rate, *ranges.lambda_rate))
    if dist.CUTOUT in spec.types:
        total += 0.5 + 0.5 * unit(spec.delta, *ranges.delta)
    return total


class SeverityAnnotator:
    """Synthetic annotator whose error rate grows with distortion severity.

    Level ``k`` is misclassified with probability
    ``sigmoid((severity - thresholds[k]) / temperature)``. Thresholds
    decrease with depth so finer levels fail first; one shared uniform draw
    keeps the per-level outcomes nested.
    """

    def __init__(
        self,
        h: Hierarchy,
        thresholds: Sequence[float] | None = None,
        temperature: float = 0.25,
        ranges: DistortionRanges = DistortionRanges(),
    ):
        self.h = h
        if thresholds is None:
            thresholds = np.linspace(3.0, 1.5, h.depth) if h.depth > 1 else [3.0]
        if len(thresholds) != h.depth:
            raise ValueError("one threshold per level required")
        self.thresholds = [float(t) for t in thresholds]
        self.temperature = temperature
        self.ranges = ranges

    def error_rates(self, spec: DistortionSpec) -> list[float]:
        sev = severity(spec, self.ranges)
        return [1.0 / (1.0 + math.exp(-(sev - t) / self.temperature)) for t in self.thresholds]

    def predict(self, image, truth, spec, rng):
        rates = np.maximum.accumulate(self.error_rates(spec))
        u = rng.random()
        path: list[int] = []
        wrong = False
        for k, node in enumerate(truth):
            candidates = self.h.nodes_at_level(0) if k == 0 else self.h.children(path[-1])
            if wrong:
                path.append(candidates[int(rng.integers(len(candidates)))])
                continue
            others = [c for c in candidates if c != node]
            if u < rates[k] and others:
                path.append(others[int(rng.integers(len(others)))])
                wrong = True
            else:
                path.append(node)
        return tuple(path)


# -- the build loop --------------------------------------------------------------------


def _source_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _process(index, src: SourceItem, annotator, h: Hierarchy, cfg: BuildConfig):
    rng = _source_rng(cfg.seed, index)
    attempts = []
    for attempt in range(1, cfg.max_retries + 1):
        spec = dist.sample_spec(rng, cfg.ranges)
        img = dist.apply(src.image, spec, src.region, rng, cfg.ranges, cfg.cutout_count)
        pred = tuple(annotator.predict(img, src.path, spec, rng))
        if len(pred) != h.depth:
            raise AnnotatorError(f"annotator returned a path of length {len(pred)}")
        try:
            h.validate_path(pred)
        except HierarchyError as exc:
            raise AnnotatorError(f"annotator returned an invalid path: {exc}") from exc
        v = correctness(src.path, pred)
        ok = is_legal(v)
        attempts.append(Attempt(src.source_id, attempt, spec, pred, v, ok))
        if ok:
            level = assign_level(v)
            record = DatasetRecord(
                image_id=f"{src.source_id}_d",
                image_path=f"images/{src.source_id}_d.png",
                category_path=tuple(src.path[: level + 1]),
                level_label=level,
                spec=spec,
                source_id=src.source_id,
                attempts=attempt,
                split=src.split,
                image=img,
            )
            return record, attempts
    return None, attempts


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def build_dataset(
    sources: Sequence[SourceItem],
    annotator: Annotator,
    h: Hierarchy,
    cfg: BuildConfig = BuildConfig(),
    out_dir: str | Path | None = None,
) -> BuildResult:
    """Run the distort-annotate-filter loop over every source.

    With ``out_dir`` set, writes ``manifest.jsonl``, ``images/*.png`` and a
    ``diagnostics.jsonl`` sidecar with every attempt.
    """
    for src in sources:
        h.validate_path(src.path)
        if len(src.path) != h.depth:
            raise HierarchyError(f"source {src.source_id} is not labelled to full depth")
    ids = [s.source_id for s in sources]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate source ids")

    jobs = list(enumerate(sources))
    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(lambda j: _process(j[0], j[1], annotator, h, cfg), jobs))
    else:
        outcomes = [_process(i, s, annotator, h, cfg) for i, s in jobs]

    records, skipped, attempts = [], [], []
    for src, (record, tries) in zip(sources, outcomes):
        attempts.extend(tries)
        if record is None:
            log.warning("skipping %s after %d illegal predictions", src.source_id, len(tries))
            skipped.append(src.source_id)
        else:
            records.append(record)

    result = BuildResult(records, skipped, attempts)
    if out_dir is not None:
        write_build(result, h, out_dir)
    return result


def write_build(result: BuildResult, h: Hierarchy, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for rec in result.records:
        if rec.image is not None:
            dist.write_png(out / rec.image_path, rec.image)
    write_manifest(out / "manifest.jsonl", result.records, h)
    with open(out / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
        for a in result.attempts:
            fh.write(json.dumps({
                "source_id": a.source_id,
                "attempt": a.attempt,
                "distortion": a.spec.to_json(),
                "predicted": h.path_names(a.predicted),
                "correctness": list(a.correctness),
                "accepted": a.accepted,
            }) + "\n")
        for sid in result.skipped:
            fh.write(json.dumps({"source_id": sid, "skipped": True}) + "\n")


def write_manifest(path, records: Iterable[DatasetRecord], h: Hierarchy) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(h)) + "\n")


def read_manifest(path, h: Hierarchy) -> list[DatasetRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(DatasetRecord.from_json(json.loads(line), h))
    return out


# -- statistics ------------------------------------------------------------------------


def summarize(records: Iterable, level_names: Sequence[str]) -> dict[str, dict[str, int]]:
    """Per-split, per-level record counts with totals.

    ``records`` may be DatasetRecord objects or ``(split, level_index)`` pairs.
    """
    counts: Counter = Counter()
    splits = ["train", "test"]
    for rec in records:
        split, level = (rec.split, rec.level_label) if isinstance(rec, DatasetRecord) else rec
        if split not in splits:
            splits.append(split)
        counts[(split, level)] += 1
    table: dict[str, dict[str, int]] = {}
    for split in splits + ["total"]:
        row = {}
        for k, name in enumerate(level_names):
            row[name] = (
                sum(counts[(s, k)] for s in splits) if split == "total" else counts[(split, k)]
            )
        row["total"] = sum(row[n] for n in level_names)
        table[split] = row
    return table


def format_summary(table: dict[str, dict[str, int]]) -> str:
    cols = list(next(iter(table.values())).keys())
    width = max(8, *(len(c) for c in cols))
    lines = ["level".ljust(8) + "".join(c.rjust(width + 1) for c in cols)]
    for split, row in table.items():
        lines.append(split.ljust(8) + "".join(str(row[c]).rjust(width + 1) for c in cols))
    return "\n".join(lines)
