"""Regenerate the bundled hierarchy and word-vector fixtures.

    python scripts/make_fixtures.py

Vectors are pseudo-random (seeded per token), not trained; they only need to
cover every label token and stay deterministic.
"""
from __future__ import annotations

import re
import zlib
from pathlib import Path

import numpy as np

DATA = Path(__file__).resolve().parents[1] / "src" / "hiertool" / "data"
DIM = 50

CUB_ORDERS = {
    "songbirds": ["blackbird", "warbler", "sparrow", "finch", "swallow", "vireo",
                  "wren", "flycatcher", "jay", "tanager", "thrush", "shrike"],
    "shorebirds": ["gull", "tern", "puffin", "plover"],
    "pelicans": ["pelican", "heron", "ibis"],
    "seabirds": ["albatross", "petrel", "shearwater"],
    "waterfowl": ["duck", "goose"],
    "woodpeckers": ["woodpecker", "flicker"],
    "kingfishers": ["kingfisher", "bee eater"],
    "hummingbirds": ["hummingbird", "swift"],
    "nightjars": ["nightjar", "nighthawk"],
    "cuckoos": ["cuckoo", "roadrunner"],
    "loons": ["loon", "diver"],
    "grebes": ["grebe"],
    "cormorants": ["cormorant"],
}
MODIFIERS = ["black", "white", "red", "yellow", "gray", "spotted"]

TOY = {
    "songbird": {"finch": ["house finch", "purple finch"], "sparrow": ["song sparrow"]},
    "seabird": {"gull": ["herring gull"]},
}

TOY21 = {
    "raptor": {"eagle": ["golden eagle", "bald eagle"], "hawk": ["red hawk", "sharp hawk"]},
    "songbird": {"robin": ["american robin", "european robin"], "lark": ["horned lark", "sky lark"]},
    "wader": {"heron": ["great heron", "little heron"], "stork": ["wood stork", "white stork"]},
}

FILLER = ("the of and to in a is that for it as was with be by on not he this are or his from "
          "at which but have an they you were her she there been one all we their has would when "
          "bird wing feather nest egg flight song tree water sea river forest sky").split()


def write_tree(path: Path, tree: dict, levels: str) -> list[str]:
    lines = [f"# levels: {levels}"]
    names = []
    for order in tree:
        lines.append(f"{order}\t-")
        names.append(order)
    for order, fams in tree.items():
        for fam in fams:
            lines.append(f"{fam}\t{order}")
            names.append(fam)
    for order, fams in tree.items():
        for fam, species in fams.items():
            for sp in species:
                lines.append(f"{sp}\t{fam}")
                names.append(sp)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return names


def cub_tree() -> dict:
    fams = [(o, f) for o, fs in CUB_ORDERS.items() for f in fs]
    assert len(fams) == 38
    tree: dict = {o: {} for o in CUB_ORDERS}
    for i, (order, base) in enumerate(fams):
        n = 6 if i < 10 else 5
        tree[order][f"{base} family"] = [f"{m} {base}" for m in MODIFIERS[:n]]
    return tree


def vector(token: str) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(token.encode()))
    return rng.normal(scale=0.4, size=DIM)


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    names = []
    names += write_tree(DATA / "cub_style.tsv", cub_tree(), "order family species")
    names += write_tree(DATA / "toy_birds.tsv", TOY, "order family species")
    names += write_tree(DATA / "toy21.tsv", TOY21, "order family species")
    tokens = set(FILLER)
    for n in names:
        tokens.update(t for t in re.split(r"[\s_\-]+", n.lower()) if t)
    with open(DATA / "vectors_50d.txt", "w", encoding="utf-8") as fh:
        for tok in sorted(tokens):
            fh.write(tok + " " + " ".join(f"{v:.5f}" for v in vector(tok)) + "\n")


if __name__ == "__main__":
    main()
