"""Record types exchanged between modules."""

from dataclasses import dataclass

import numpy as np

from .exceptions import ReferenceSetError

MAX_REFERENCES = 100
SPLITS = ("base", "novel")


@dataclass(frozen=True)
class CategoryRecord:
    category_id: int
    name: str
    split: str = "base"
    has_description: bool = True

    def to_json(self):
        return {
            "id": self.category_id,
            "name": self.name,
            "split": self.split,
            "has_description": self.has_description,
        }


@dataclass(frozen=True)
class ReferenceEntry:
    row: int
    resolution: int
    exemplar: bool = False


@dataclass(frozen=True)
class ReferenceSet:
    """Ordered reference embeddings of one category.

    Entry 0 is the exemplar when one exists; all other entries are sorted by
    resolution, largest first.
    """

    category_id: int
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        n = len(self.entries)
        if not 1 <= n <= MAX_REFERENCES:
            raise ReferenceSetError(
                f"category {self.category_id}: {n} references, expected 1..{MAX_REFERENCES}"
            )
        flags = [e.exemplar for e in self.entries]
        if sum(flags) > 1:
            raise ReferenceSetError(f"category {self.category_id}: multiple exemplars")
        if any(flags[1:]):
            raise ReferenceSetError(f"category {self.category_id}: exemplar must be entry 0")
        rest = self.entries[1:] if flags[0] else self.entries
        res = [e.resolution for e in rest]
        if any(r0 < r1 for r0, r1 in zip(res, res[1:])):
            raise ReferenceSetError(
                f"category {self.category_id}: non-exemplar entries not in descending resolution"
            )

    def __len__(self):
        return len(self.entries)

    @property
    def rows(self):
        return [e.row for e in self.entries]

    @classmethod
    def from_unordered(cls, category_id, entries):
        """Build a set from entries in any order; returns ``(refs, was_reordered)``."""
        entries = list(entries)
        exemplars = [e for e in entries if e.exemplar]
        if len(exemplars) > 1:
            raise ReferenceSetError(f"category {category_id}: multiple exemplars")
        others = sorted(
            (e for e in entries if not e.exemplar), key=lambda e: -e.resolution
        )
        ordered = exemplars + others
        return cls(category_id, ordered), ordered != entries


@dataclass
class PrototypeBank:
    """Frozen textual (``T``) and visual (``V``) prototypes, one row per category."""

    T: np.ndarray
    V: np.ndarray
    categories: list
    sigma_table_hash: str = ""

    @property
    def n_categories(self):
        return len(self.categories)

    def split_mask(self, split):
        return np.array([c.split == split for c in self.categories], dtype=bool)

    def __eq__(self, other):
        if not isinstance(other, PrototypeBank):
            return NotImplemented
        return (
            self.T.dtype == other.T.dtype
            and self.V.dtype == other.V.dtype
            and self.T.shape == other.T.shape
            and self.V.shape == other.V.shape
            and self.T.tobytes() == other.T.tobytes()
            and self.V.tobytes() == other.V.tobytes()
            and list(self.categories) == list(other.categories)
            and self.sigma_table_hash == other.sigma_table_hash
        )


@dataclass
class LabeledBatch:
    """Object features ``X`` (N x L) with one category id per row."""

    X: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.X):
            raise ValueError("labels and X must have the same length")

    def __len__(self):
        return len(self.labels)
