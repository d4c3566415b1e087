"""Word-vector loading and per-category query matrices.

The vector file is the usual whitespace-separated text format, one
``token v1 ... vd`` entry per line.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from os import PathLike
from typing import Mapping

import numpy as np

from .hierarchy import Hierarchy

_SPLIT = re.compile(r"[\s_\-]+")


class EmbeddingError(ValueError):
    pass


class OutOfVocabulary(EmbeddingError, KeyError):
    def __init__(self, token: str, label: str):
        super().__init__(f"token {token!r} of label {label!r} is not in the vector table")
        self.token = token
        self.label = label

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class WordVectorTable:
    dim: int
    entries: Mapping[str, np.ndarray]

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def load_vectors(path: str | PathLike, expected_dim: int | None = None) -> WordVectorTable:
    """Strictly parse a vector file; any malformed line is an error."""
    entries: dict[str, np.ndarray] = {}
    dim = expected_dim
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise EmbeddingError(f"cannot read vector file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise EmbeddingError(f"{path}:{lineno}: non-numeric vector component") from None
            if dim is None:
                dim = len(vec)
            if len(vec) != dim or dim == 0:
                raise EmbeddingError(
                    f"{path}:{lineno}: expected {dim} components, found {len(vec)}"
                )
            entries[token.lower()] = vec
    if not entries:
        raise EmbeddingError(f"{path}: no vectors found")
    return WordVectorTable(dim=dim, entries=entries)


def tokenize(label: str) -> list[str]:
    return [t for t in _SPLIT.split(label.lower()) if t]


def embed_label(table: WordVectorTable, label: str) -> np.ndarray:
    """Vector of a label; multi-word labels average their token vectors."""
    tokens = tokenize(label)
    if not tokens:
        raise EmbeddingError("empty label")
    vecs = []
    for tok in tokens:
        if tok not in table.entries:
            raise OutOfVocabulary(tok, label)
        vecs.append(table.entries[tok])
    return np.mean(vecs, axis=0)


def build_query_matrix(table: WordVectorTable, h: Hierarchy) -> np.ndarray:
    """(c, table.dim) matrix, rows in the hierarchy's canonical category order.

    Width adaptation to the model happens in the model's query projection.
    """
    rows = [embed_label(table, h.name(nid)) for nid in h.categories()]
    out = np.stack(rows)
    zero = np.where(~out.any(axis=1))[0]
    if len(zero):
        raise EmbeddingError(f"all-zero query row for {h.name(h.categories()[zero[0]])!r}")
    return out
