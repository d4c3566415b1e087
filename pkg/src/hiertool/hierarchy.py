"""Label trees, ancestor closures and the per-level correctness constraint.

A hierarchy file is UTF-8 text, one node per line::

    # levels: order family species
    Passeriformes	-
    Icteridae	Passeriformes
    Red winged Blackbird	Icteridae

``-`` marks a top-level node. All top-level nodes hang under a virtual root
that is kept internally (so forests such as CUB's 13 orders form one tree)
but never shows up in levels, paths or metric sets. The optional
``# levels:`` comment names the levels; other ``#`` lines and blank lines are
ignored.
"""
from __future__ import annotations

import io
import itertools
from collections import deque
from dataclasses import dataclass
from os import PathLike
from typing import Iterable, Sequence, TextIO, Union

LabelPath = tuple[int, ...]
CorrectnessVector = tuple[int, ...]

TOP_MARKER = "-"
ROOT_NAME = "<root>"


class HierarchyError(ValueError):
    """Malformed hierarchy document or invalid label path."""


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    parent: int | None
    level: int


class Hierarchy:
    """Immutable, level-stratified label tree.

    ``nodes`` holds ``(id, name, parent_id)`` triples. Exactly one node has
    parent ``None``; it is the virtual root (level -1). Every other node sits
    one level below its parent, and all leaves share the deepest level.
    """

    def __init__(
        self,
        nodes: Iterable[tuple[int, str, int | None]],
        level_names: Sequence[str] | None = None,
    ):
        triples = list(nodes)
        ids = [t[0] for t in triples]
        if len(set(ids)) != len(ids):
            raise HierarchyError("duplicate node id")
        roots = [t for t in triples if t[2] is None]
        if not roots:
            raise HierarchyError("no root node (cycle detected)")
        if len(roots) > 1:
            raise HierarchyError(
                "multiple roots: " + ", ".join(repr(r[1]) for r in roots)
            )
        by_id = {t[0]: t for t in triples}
        for nid, name, parent in triples:
            if parent is not None and parent not in by_id:
                raise HierarchyError(f"dangling parent {parent!r} for node {name!r}")
            if parent == nid:
                raise HierarchyError(f"cycle detected at node {name!r}")

        children: dict[int, list[int]] = {nid: [] for nid in ids}
        for nid, _, parent in triples:
            if parent is not None:
                children[parent].append(nid)

        root = roots[0][0]
        level = {root: -1}
        queue = deque([root])
        while queue:
            cur = queue.popleft()
            for ch in children[cur]:
                level[ch] = level[cur] + 1
                queue.append(ch)
        if len(level) != len(triples):
            stuck = sorted(by_id[n][1] for n in ids if n not in level)
            raise HierarchyError(f"cycle detected among {stuck}")

        real = [nid for nid in ids if nid != root]
        if not real:
            raise HierarchyError("hierarchy has no categories")
        depth = max(level[n] for n in real) + 1
        for nid in real:
            if not children[nid] and level[nid] != depth - 1:
                raise HierarchyError(
                    f"leaf {by_id[nid][1]!r} at level {level[nid]}, expected {depth - 1}"
                )

        seen: dict[tuple[int, str], int] = {}
        for nid in real:
            key = (level[nid], by_id[nid][1])
            if key in seen:
                raise HierarchyError(f"duplicate name {key[1]!r} at level {key[0]}")
            seen[key] = nid

        if level_names is None:
            level_names = [f"level{k}" for k in range(depth)]
        if len(level_names) != depth:
            raise HierarchyError(
                f"{len(level_names)} level names given for depth {depth}"
            )

        self.root = root
        self.depth = depth
        self.level_names: tuple[str, ...] = tuple(level_names)
        self._nodes = {
            nid: Node(nid, name, parent, level[nid]) for nid, name, parent in triples
        }
        self._children = {k: tuple(v) for k, v in children.items()}
        self._order = [nid for nid in ids if nid != root]
        self._levels = [
            tuple(n for n in self._order if level[n] == k) for k in range(depth)
        ]
        self._by_name = {(level[n], by_id[n][1]): n for n in real}

    # -- lookups ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self._order)

    def __iter__(self):
        return (self._nodes[n] for n in self._order)

    def node(self, nid: int) -> Node:
        return self._nodes[nid]

    def name(self, nid: int) -> str:
        return self._nodes[nid].name

    def parent(self, nid: int) -> int | None:
        p = self._nodes[nid].parent
        return None if p == self.root else p

    def children(self, nid: int) -> tuple[int, ...]:
        return self._children[nid]

    def level_of(self, nid: int) -> int:
        return self._nodes[nid].level

    def nodes_at_level(self, level: int) -> tuple[int, ...]:
        return self._levels[level]

    def categories(self) -> list[int]:
        """Level-major canonical ordering, file order within a level."""
        return list(itertools.chain.from_iterable(self._levels))

    def level_slices(self) -> list[tuple[int, int]]:
        out, start = [], 0
        for lvl in self._levels:
            out.append((start, start + len(lvl)))
            start += len(lvl)
        return out

    def id_of(self, name: str, level: int | None = None) -> int:
        if level is not None:
            try:
                return self._by_name[(level, name)]
            except KeyError:
                raise HierarchyError(f"unknown category {name!r} at level {level}") from None
        hits = [n for (lv, nm), n in self._by_name.items() if nm == name]
        if len(hits) != 1:
            raise HierarchyError(
                f"unknown category {name!r}" if not hits else f"ambiguous name {name!r}"
            )
        return hits[0]

    # -- paths -------------------------------------------------------------

    def validate_path(self, path: Sequence[int]) -> LabelPath:
        path = tuple(path)
        if not 1 <= len(path) <= self.depth:
            raise HierarchyError(f"path length {len(path)} outside [1, {self.depth}]")
        prev = self.root
        for nid in path:
            if nid not in self._nodes or nid == self.root:
                raise HierarchyError(f"unknown node id {nid!r}")
            if self._nodes[nid].parent != prev:
                raise HierarchyError(
                    f"{self.name(nid)!r} is not a child of "
                    f"{'the root' if prev == self.root else repr(self.name(prev))}"
                )
            prev = nid
        return path

    def path_to(self, nid: int) -> LabelPath:
        """Root-to-node path ending at ``nid``."""
        out = []
        cur: int | None = nid
        while cur is not None and cur != self.root:
            out.append(cur)
            cur = self._nodes[cur].parent
        return tuple(reversed(out))

    def path_from_names(self, names: Sequence[str]) -> LabelPath:
        """Parse level names, stopping at the first ``None``/empty entry."""
        ids = []
        for k, nm in enumerate(names):
            if nm is None or nm in ("None", ""):
                rest = [x for x in names[k:] if x not in (None, "None", "")]
                if rest:
                    raise HierarchyError(f"name after truncation marker: {rest}")
                break
            ids.append(self.id_of(nm, level=k))
        return self.validate_path(ids)

    def path_names(self, path: Sequence[int], pad: bool = False) -> list[str]:
        names = [self.name(n) for n in path]
        if pad:
            names += ["None"] * (self.depth - len(names))
        return names

    def leaves(self) -> tuple[int, ...]:
        return self._levels[-1]

    # -- serialization -----------------------------------------------------

    def dumps(self) -> str:
        lines = ["# levels: " + " ".join(self.level_names)]
        for nid in self._order:
            par = self._nodes[nid].parent
            pname = TOP_MARKER if par == self.root else self.name(par)
            lines.append(f"{self.name(nid)}\t{pname}")
        return "\n".join(lines) + "\n"


def loads_hierarchy(text: str) -> Hierarchy:
    return load_hierarchy(io.StringIO(text))


def load_hierarchy(source: Union[str, PathLike, TextIO]) -> Hierarchy:
    """Parse a ``name<TAB>parent`` document into a validated Hierarchy."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()

    level_names = None
    rows: list[tuple[int, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped[1:].strip()
            if body.lower().startswith("levels:"):
                level_names = body.split(":", 1)[1].split()
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise HierarchyError(f"line {lineno}: expected 'name<TAB>parent'")
        rows.append((lineno, parts[0].strip(), parts[1].strip()))

    names = [r[1] for r in rows]
    if ROOT_NAME in names:
        raise HierarchyError(f"{ROOT_NAME!r} is reserved")
    first_id: dict[str, int] = {}
    for i, (lineno, name, _) in enumerate(rows, start=1):
        if name in first_id:
            raise HierarchyError(f"line {lineno}: duplicate name {name!r}")
        first_id[name] = i

    triples: list[tuple[int, str, int | None]] = [(0, ROOT_NAME, None)]
    for i, (lineno, name, pname) in enumerate(rows, start=1):
        if pname == TOP_MARKER:
            parent = 0
        elif pname == name:
            raise HierarchyError(f"line {lineno}: cycle detected ({name!r} is its own parent)")
        elif pname in first_id:
            parent = first_id[pname]
        else:
            raise HierarchyError(f"line {lineno}: dangling parent {pname!r}")
        triples.append((i, name, parent))
    return Hierarchy(triples, level_names=level_names)


def ancestor_closure(h: Hierarchy, path: Sequence[int]) -> frozenset[int]:
    """All nodes on ``path``; a valid root-down path is its own closure."""
    return frozenset(h.validate_path(path))


def truncate_path(path: Sequence[int], level: int) -> LabelPath:
    if not 0 <= level < len(path):
        raise HierarchyError(f"cannot truncate path of length {len(path)} at level {level}")
    return tuple(path[: level + 1])


def legal_set(depth: int) -> list[CorrectnessVector]:
    """Prefix-closed correctness vectors, finest first.

    The all-zero vector is excluded: a kept sample must be right at the top.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    return [tuple([1] * k + [0] * (depth - k)) for k in range(depth, 0, -1)]


def is_legal(vector: Sequence[int]) -> bool:
    v = list(vector)
    if not v or v[0] != 1:
        return False
    if any(b not in (0, 1) for b in v):
        return False
    return all(a >= b for a, b in zip(v, v[1:]))
