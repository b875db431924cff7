"""Prototype bank construction.

Textual prototypes are the description embeddings as given. Each visual
prototype fuses a category's reference embeddings: the first entry (the
exemplar, or the largest crop when no exemplar exists) receives weight
``sigma(n)`` and the remaining ``n - 1`` entries share ``1 - sigma(n)``
equally.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    ConfigError,
    EmptyReferenceSetError,
    ExactZeroRowError,
    MissingReferencesError,
    OutOfRangeError,
    RowCountMismatchError,
)
from .structures import MAX_REFERENCES, PrototypeBank
from .tensor import as_matrix


@dataclass(frozen=True)
class SigmaTable:
    """Piecewise-constant map from reference count ``n`` to the exemplar weight."""

    buckets: tuple = (
        (1, 1, 1.0),
        (2, 2, 0.6),
        (3, 3, 0.5),
        (4, 4, 0.4),
        (5, 7, 0.3),
        (8, 10, 0.2),
        (11, 20, 0.15),
        (21, 50, 0.12),
        (51, 100, 0.10),
    )

    def __post_init__(self):
        buckets = tuple((int(lo), int(hi), float(s)) for lo, hi, s in self.buckets)
        object.__setattr__(self, "buckets", buckets)
        expected = 1
        for lo, hi, sigma in buckets:
            if lo != expected or hi < lo:
                raise ConfigError(
                    f"bucket ({lo}, {hi}) leaves a gap or overlap at n={expected}",
                    field="n_min",
                )
            if not 0.0 < sigma <= 1.0:
                raise ConfigError(f"sigma {sigma} outside (0, 1]", field="sigma")
            expected = hi + 1
        if expected != MAX_REFERENCES + 1:
            raise ConfigError(
                f"buckets must cover 1..{MAX_REFERENCES}, stop at {expected - 1}",
                field="n_max",
            )

    def digest(self):
        blob = json.dumps([list(b) for b in self.buckets], separators=(",", ":"))
        return hashlib.sha256(blob.encode("ascii")).hexdigest()

    def to_json(self):
        return [{"n_min": lo, "n_max": hi, "sigma": s} for lo, hi, s in self.buckets]

    @classmethod
    def from_json(cls, items):
        if not isinstance(items, list):
            raise ConfigError("sigma table must be a JSON array")
        buckets = []
        for i, item in enumerate(items):
            for key in ("n_min", "n_max", "sigma"):
                if not isinstance(item, dict) or key not in item:
                    raise ConfigError("missing key", field=f"[{i}].{key}")
            buckets.append((item["n_min"], item["n_max"], item["sigma"]))
        return cls(tuple(buckets))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                items = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})")
        return cls.from_json(items)


DEFAULT_SIGMA_TABLE = SigmaTable()


def sigma_of(n, table=DEFAULT_SIGMA_TABLE):
    """Exemplar weight for a category with ``n`` reference images."""
    if not 1 <= n <= MAX_REFERENCES:
        raise OutOfRangeError(f"n={n} outside 1..{MAX_REFERENCES}")
    for lo, hi, sigma in table.buckets:
        if lo <= n <= hi:
            return sigma
    raise OutOfRangeError(f"n={n} not covered by sigma table")


def fusion_weights(n, table=DEFAULT_SIGMA_TABLE):
    """Per-entry weights in stored order; sums to one."""
    sigma = sigma_of(n, table)
    if n == 1:
        return np.array([1.0])
    rest = (1.0 - sigma) / (n - 1)
    return np.concatenate([[sigma], np.full(n - 1, rest)])


def fuse_visual(refs, embeddings, table=DEFAULT_SIGMA_TABLE):
    """Fuse one category's reference embeddings into its visual prototype."""
    n = len(refs.entries)
    if n == 0:
        raise EmptyReferenceSetError(f"category {refs.category_id} has no references")
    rows = refs.rows
    if n == 1:
        return np.array(embeddings[rows[0]], dtype=np.float32)
    weights = fusion_weights(n, table)
    acc = weights[0] * embeddings[rows[0]].astype(np.float64)
    for w, row in zip(weights[1:], rows[1:]):
        acc = acc + w * embeddings[row].astype(np.float64)
    return acc.astype(np.float32)


def build_bank(descriptions, refs, ref_embeddings, manifest, table=DEFAULT_SIGMA_TABLE):
    """Assemble a :class:`PrototypeBank` from description and reference embeddings."""
    descriptions = as_matrix(descriptions, "descriptions")
    ref_embeddings = as_matrix(ref_embeddings, "ref_embeddings")
    if len(descriptions) != len(manifest):
        raise RowCountMismatchError(
            f"{len(descriptions)} description rows for {len(manifest)} categories"
        )
    V = np.empty((len(manifest), ref_embeddings.shape[1]), dtype=np.float32)
    for i, record in enumerate(manifest):
        cid = record.category_id
        if cid not in refs:
            raise MissingReferencesError(cid)
        V[i] = fuse_visual(refs[cid], ref_embeddings, table)
        if not np.any(V[i]):
            raise ExactZeroRowError(f"visual prototype of category {cid} is zero")
    return PrototypeBank(
        T=descriptions.copy(),
        V=V,
        categories=list(manifest),
        sigma_table_hash=table.digest(),
    )
