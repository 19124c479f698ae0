"""Two-level label taxonomy: parent links, per-level query budgets and subclass masks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class HierarchyFormatError(ValueError):
    """Malformed taxonomy text."""


class HierarchyError(ValueError):
    """Invalid level or class id."""


@dataclass(frozen=True)
class SubclassMask:
    coarse_id: int
    bits: np.ndarray  # (k_2,) of 0/1, active slots packed as a prefix
    local_to_global: tuple[int, ...]


class LabelHierarchy:
    """Immutable two-level taxonomy with dense integer ids.

    Level 1 is coarse, level 2 is fine. Children of a coarse class occupy
    local slots ``0..len(children)-1`` in taxonomy-file order.
    """

    levels = 2

    def __init__(self, coarse_names: list[str], fine_names: list[str], parent: list[int]) -> None:
        if not fine_names:
            raise HierarchyFormatError("taxonomy has no fine classes")
        if len(fine_names) != len(parent):
            raise HierarchyFormatError("parent list must cover every fine class")
        if len(set(fine_names)) != len(fine_names):
            raise HierarchyFormatError("duplicate fine class name")
        n1 = len(coarse_names)
        if any(not 0 <= p < n1 for p in parent):
            raise HierarchyFormatError("parent id out of range")
        self.coarse_names = tuple(coarse_names)
        self.fine_names = tuple(fine_names)
        self.parent = tuple(int(p) for p in parent)
        children: list[list[int]] = [[] for _ in range(n1)]
        for f, p in enumerate(self.parent):
            children[p].append(f)
        if any(not c for c in children):
            raise HierarchyFormatError("every coarse class needs at least one child")
        self.children = tuple(tuple(c) for c in children)
        self._local_slot = [0] * len(fine_names)
        for kids in self.children:
            for slot, f in enumerate(kids):
                self._local_slot[f] = slot

    # -- counts ------------------------------------------------------------
    @property
    def n_coarse(self) -> int:
        return len(self.coarse_names)

    @property
    def n_fine(self) -> int:
        return len(self.fine_names)

    @property
    def N(self) -> tuple[int, int]:
        return (self.n_coarse, self.n_fine)

    @property
    def k(self) -> tuple[int, int]:
        return (self.n_coarse, max(len(c) for c in self.children))

    def _check_level(self, level: int) -> None:
        if level not in (1, 2):
            raise HierarchyError(f"level must be 1 or 2, got {level}")

    def max_branching(self, level: int) -> int:
        """Query budget k at ``level``; the top level is not compressed (k_1 = N_1)."""
        self._check_level(level)
        return self.k[level - 1]

    # -- lookups -----------------------------------------------------------
    def parent_of(self, fine_id: int) -> int:
        if not 0 <= fine_id < self.n_fine:
            raise HierarchyError(f"fine id {fine_id} out of range [0, {self.n_fine})")
        return self.parent[fine_id]

    def local_slot(self, fine_id: int) -> int:
        self.parent_of(fine_id)
        return self._local_slot[fine_id]

    def fine_id(self, coarse_id: int, slot: int) -> int:
        return self.subclass_mask(coarse_id).local_to_global[slot]

    def subclass_mask(self, coarse_id: int) -> SubclassMask:
        if not 0 <= coarse_id < self.n_coarse:
            raise HierarchyError(f"coarse id {coarse_id} out of range [0, {self.n_coarse})")
        kids = self.children[coarse_id]
        bits = np.zeros(self.k[1])
        bits[: len(kids)] = 1.0
        return SubclassMask(coarse_id, bits, kids)

    def mask_matrix(self) -> np.ndarray:
        """(N_1, k_2) 0/1 matrix of active slots per coarse class."""
        return np.stack([self.subclass_mask(c).bits for c in range(self.n_coarse)])

    def slot_table(self) -> np.ndarray:
        """(N_1, k_2) fine id per slot, -1 for inactive slots."""
        table = np.full((self.n_coarse, self.k[1]), -1, dtype=np.int64)
        for c, kids in enumerate(self.children):
            table[c, : len(kids)] = kids
        return table

    # -- identity ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "coarse_names": list(self.coarse_names),
            "fine_names": list(self.fine_names),
            "parent": list(self.parent),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelHierarchy":
        return cls(list(d["coarse_names"]), list(d["fine_names"]), list(d["parent"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelHierarchy) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"LabelHierarchy(N={self.N}, k={self.k})"

    def to_text(self) -> str:
        return "".join(f"{f},{self.coarse_names[p]}\n" for f, p in zip(self.fine_names, self.parent))


def parse_hierarchy(text: str) -> LabelHierarchy:
    """Parse ``fine_name,coarse_name`` lines; ``#`` starts a comment.

    Ids are assigned by first appearance.
    """
    coarse: dict[str, int] = {}
    fine_names: list[str] = []
    parent: list[int] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or not all(parts):
            raise HierarchyFormatError(f"line {lineno}: expected 'fine_name,coarse_name', got {raw!r}")
        fine, parent_name = parts
        if fine in seen:
            raise HierarchyFormatError(f"line {lineno}: duplicate fine class {fine!r}")
        seen.add(fine)
        cid = coarse.setdefault(parent_name, len(coarse))
        fine_names.append(fine)
        parent.append(cid)
    if not fine_names:
        raise HierarchyFormatError("taxonomy file is empty")
    return LabelHierarchy(list(coarse), fine_names, parent)


def load_hierarchy(path: str | Path) -> LabelHierarchy:
    return parse_hierarchy(Path(path).read_text(encoding="utf-8"))


def from_branching(children: list[int]) -> LabelHierarchy:
    """Synthetic taxonomy with ``children[c]`` fine classes under coarse class ``c``."""
    coarse = [f"c{c}" for c in range(len(children))]
    fine, parent = [], []
    for c, n in enumerate(children):
        for j in range(n):
            fine.append(f"c{c}_f{j}")
            parent.append(c)
    return LabelHierarchy(coarse, fine, parent)
