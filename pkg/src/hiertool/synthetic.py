"""Synthetic-shapes source images and the on-disk source directory format.

Each leaf category gets a drawable signature: the top-level node fixes the
object's hue, the second level its outline, deeper levels its fill
texture. Fine-level cues (texture) are small and are the first thing noise,
blur and downsampling wipe out.

Source directory layout::

    sources.jsonl     {source_id, image, category_path, bbox, parts, split}
    images/*.png
"""
from __future__ import annotations

import colorsys
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .distortion import RegionAnnotation, read_png, write_png
from .dataset_builder import SourceItem
from .hierarchy import Hierarchy

SHAPES = ("disk", "square", "triangle", "diamond", "cross")
TEXTURES = ("solid", "hstripes", "vstripes", "checker", "dots")


def _sibling_index(h: Hierarchy, nid: int) -> int:
    parent = h.parent(nid)
    sibs = h.nodes_at_level(0) if parent is None else h.children(parent)
    return sibs.index(nid)


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    return ((np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)) | (
        (np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r)
    )


def _texture(kind: str, yy, xx, period: int):
    if kind == "solid":
        return np.ones_like(yy, dtype=float)
    if kind == "hstripes":
        return ((yy // (period // 2)) % 2).astype(float)
    if kind == "vstripes":
        return ((xx // (period // 2)) % 2).astype(float)
    if kind == "checker":
        return (((yy // (period // 2)) + (xx // (period // 2))) % 2).astype(float)
    return (((yy % period) < period // 2) & ((xx % period) < period // 2)).astype(float)


def render(h: Hierarchy, path: Sequence[int], size: int, rng: np.random.Generator):
    """Draw one image for a full-depth ``path``; returns (image, region)."""
    top = h.nodes_at_level(0).index(path[0])
    hue = top / max(1, len(h.nodes_at_level(0)))
    color = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9))
    shape = SHAPES[_sibling_index(h, path[1]) % len(SHAPES)] if len(path) > 1 else "disk"
    textures = [TEXTURES[_sibling_index(h, n) % len(TEXTURES)] for n in path[2:]]

    bg = 0.45 + rng.uniform(-0.05, 0.05, size=3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    r = size * rng.uniform(0.3, 0.36)
    cy = size / 2 + rng.uniform(-size / 12, size / 12)
    cx = size / 2 + rng.uniform(-size / 12, size / 12)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = _shape_mask(shape, yy + 0.5, xx + 0.5, cy, cx, r)
    pattern = np.ones((size, size))
    period = max(4, size // 8)
    for tex in textures:
        pattern = pattern * (0.35 + 0.65 * _texture(tex, yy, xx, period))
    shade = color[None, None, :] * pattern[..., None] * rng.uniform(0.9, 1.1)
    img[mask] = np.clip(shade[mask], 0, 1)

    ys, xs = np.nonzero(mask)
    x0, y0 = int(xs.min()), int(ys.min())
    w, hgt = int(xs.max()) - x0 + 1, int(ys.max()) - y0 + 1
    parts = (
        ("center", float(cx), float(cy)),
        ("upper", float(cx), float(max(y0, cy - r / 2))),
        ("lower", float(cx), float(min(y0 + hgt, cy + r / 2))),
        ("left", float(max(x0, cx - r / 2)), float(cy)),
        ("right", float(min(x0 + w, cx + r / 2)), float(cy)),
    )
    return img, RegionAnnotation((x0, y0, w, hgt), parts)


def make_sources(
    h: Hierarchy,
    per_leaf: int,
    size: int = 32,
    seed: int = 0,
    split: str = "train",
    with_parts: bool = True,
    prefix: str = "src",
) -> list[SourceItem]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    out = []
    for leaf in h.leaves():
        path = h.path_to(leaf)
        for _ in range(per_leaf):
            img, region = render(h, path, size, rng)
            if not with_parts:
                region = RegionAnnotation(region.bbox)
            out.append(SourceItem(f"{prefix}{len(out):05d}", img, path, region, split))
    return out


def write_sources(directory: str | Path, sources: Sequence[SourceItem], h: Hierarchy) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    with open(d / "sources.jsonl", "w", encoding="utf-8") as fh:
        for src in sources:
            rel = f"images/{src.source_id}.png"
            write_png(d / rel, src.image)
            fh.write(json.dumps({
                "source_id": src.source_id,
                "image": rel,
                "category_path": h.path_names(src.path),
                "bbox": list(src.region.bbox),
                "parts": [list(p) for p in src.region.parts],
                "split": src.split,
            }) + "\n")


def read_sources(directory: str | Path, h: Hierarchy) -> list[SourceItem]:
    d = Path(directory)
    out = []
    with open(d / "sources.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            region = RegionAnnotation(
                tuple(row["bbox"]), tuple((p[0], float(p[1]), float(p[2])) for p in row.get("parts", []))
            )
            out.append(SourceItem(
                row["source_id"],
                read_png(d / row["image"]),
                h.path_from_names(row["category_path"]),
                region,
                row.get("split", "train"),
            ))
    return out
