"""Synthetic embedding worlds standing in for encoder outputs.

Each category owns a latent unit direction. Every modality (descriptions,
class names, reference images, object features) sees that direction through
its own fixed random isometry, plus isotropic Gaussian noise, renormalized to
unit length. A noise level ``s`` adds a Gaussian vector with per-coordinate
standard deviation ``s / sqrt(dim)``, i.e. of expected norm close to ``s``
against a unit-norm signal.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embed_io import save_batch, write_embeddings, write_manifest, write_reference_index
from .exceptions import ConfigError, UnsatisfiableSeparationError
from .structures import MAX_REFERENCES, CategoryRecord, LabeledBatch, ReferenceEntry, ReferenceSet

MAX_PAIRWISE_COSINE = 0.95
_PLACEMENT_ATTEMPTS = 1000
_RESOLUTION_RANGE = (32 * 32, 640 * 640)

WORLD_FILES = (
    "manifest.jsonl",
    "descriptions.pemb",
    "classnames.pemb",
    "references.jsonl",
    "references.pemb",
    "train.pemb",
    "train.labels.json",
    "heldout.pemb",
    "heldout.labels.json",
)


@dataclass(frozen=True)
class WorldConfig:
    n_categories: int = 200
    feature_dim: int = 64
    text_dim: int = 64
    visual_dim: int = 64
    classname_noise: float = 0.8
    description_noise: float = 0.3
    visual_noise: float = 1.5
    object_noise: float = 1.5
    # {"fixed": n} or {"uniform": [lo, hi]}
    refs_per_category: dict = field(default_factory=lambda: {"fixed": 10})
    novel_fraction: float = 0.0
    objects_per_category: int = 20
    heldout_per_category: int = 10
    # latent category directions cluster around this many parents; 0 = flat
    n_superclasses: int = 20
    superclass_spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_categories", "objects_per_category", "heldout_per_category"):
            _check_int(self, name, 1)
        for name in ("feature_dim", "text_dim", "visual_dim"):
            _check_int(self, name, 2)
        _check_int(self, "n_superclasses", 0)
        _check_int(self, "seed", 0)
        for name in ("classname_noise", "description_noise", "visual_noise",
                     "object_noise", "superclass_spread"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
                raise ConfigError("must be a non-negative number", field=name)
        if not isinstance(self.novel_fraction, (int, float)) or not 0 <= self.novel_fraction < 1:
            raise ConfigError("must lie in [0, 1)", field="novel_fraction")
        self.ref_count_bounds()

    def ref_count_bounds(self):
        counts = self.refs_per_category
        if not isinstance(counts, dict) or len(counts) != 1:
            raise ConfigError('expected {"fixed": n} or {"uniform": [lo, hi]}',
                              field="refs_per_category")
        (kind, value), = counts.items()
        if kind == "fixed":
            lo = hi = value
        elif kind == "uniform" and isinstance(value, (list, tuple)) and len(value) == 2:
            lo, hi = value
        else:
            raise ConfigError('expected {"fixed": n} or {"uniform": [lo, hi]}',
                              field="refs_per_category")
        ok = all(isinstance(v, int) and not isinstance(v, bool) for v in (lo, hi))
        if not ok or not 1 <= lo <= hi <= MAX_REFERENCES:
            raise ConfigError(f"counts must satisfy 1 <= lo <= hi <= {MAX_REFERENCES}",
                              field="refs_per_category")
        return lo, hi

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("world config must be a JSON object")
        unknown = sorted(set(obj) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError("unknown key", field=unknown[0])
        return cls(**obj)

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} col {exc.colno} ({exc.msg})")
        return cls.from_json(obj)


def _check_int(cfg, name, minimum):
    value = getattr(cfg, name)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"must be an integer >= {minimum}", field=name)


@dataclass
class SynthWorld:
    config: WorldConfig
    directions: np.ndarray
    superclasses: np.ndarray
    descriptions: np.ndarray
    classnames: np.ndarray
    reference_embeddings: np.ndarray
    references: dict
    manifest: list
    train: LabeledBatch
    heldout: LabeledBatch


def _unit_rows(m):
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def _perturb(rng, clean, level):
    """Add isotropic noise of the given level to unit rows and renormalize."""
    clean = np.atleast_2d(clean)
    dim = clean.shape[1]
    noisy = clean + level * rng.standard_normal(clean.shape) / np.sqrt(dim)
    return _unit_rows(noisy)


def _isometry(rng, out_dim, in_dim):
    """Random linear map with orthonormal columns (or rows, when out < in)."""
    g = rng.standard_normal((max(out_dim, in_dim), min(out_dim, in_dim)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q if out_dim >= in_dim else q.T


def place_directions(rng, n, dim, n_parents=0, spread=1.0, cap=MAX_PAIRWISE_COSINE):
    """Draw ``n`` unit directions whose pairwise cosines all stay below ``cap``."""
    parents = _unit_rows(rng.standard_normal((max(n_parents, 1), dim)))
    assign = np.arange(n) % max(n_parents, 1)
    out = np.empty((n, dim))
    for c in range(n):
        for _ in range(_PLACEMENT_ATTEMPTS):
            if n_parents:
                cand = _perturb(rng, parents[assign[c]], spread)[0]
            else:
                cand = _unit_rows(rng.standard_normal(dim))
            if c == 0 or np.max(out[:c] @ cand) < cap:
                out[c] = cand
                break
        else:
            raise UnsatisfiableSeparationError(
                f"could not place {n} directions in dim {dim} under cosine cap {cap}"
            )
    return out, assign


def generate_world(cfg):
    """Generate a seeded synthetic world; identical configs give identical worlds."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(9)]
    (r_dirs, r_maps, r_desc, r_name, r_refs, r_train, r_held, r_split, r_res) = streams
    C, L = cfg.n_categories, cfg.feature_dim

    dirs, superclasses = place_directions(
        r_dirs, C, L, cfg.n_superclasses, cfg.superclass_spread
    )
    M_obj = _isometry(r_maps, L, L)
    M_text = _isometry(r_maps, cfg.text_dim, L)
    M_vis = _isometry(r_maps, cfg.visual_dim, L)

    text_clean = _unit_rows(dirs @ M_text.T)
    descriptions = _perturb(r_desc, text_clean, cfg.description_noise)
    classnames = _perturb(r_name, text_clean, cfg.classname_noise)

    vis_clean = _unit_rows(dirs @ M_vis.T)
    lo, hi = cfg.ref_count_bounds()
    ref_rows, references = [], {}
    for c in range(C):
        n = int(r_refs.integers(lo, hi + 1)) if hi > lo else lo
        # per-category stream: the crops of a smaller n are a prefix of a larger n
        rng_c = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(100, c)))
        exemplar = _perturb(rng_c, vis_clean[c], 0.5 * cfg.visual_noise)
        crops = _perturb(rng_c, np.repeat(vis_clean[c : c + 1], n - 1, axis=0), cfg.visual_noise)
        res = np.sort(r_res.integers(*_RESOLUTION_RANGE, size=n))[::-1]
        start = sum(len(r) for r in ref_rows)
        entries = [ReferenceEntry(start, int(res[0]), True)]
        entries += [ReferenceEntry(start + i, int(res[i]), False) for i in range(1, n)]
        ref_rows.append(np.vstack([exemplar, crops]) if n > 1 else exemplar)
        references[c] = ReferenceSet(c, entries)

    n_novel = int(round(C * cfg.novel_fraction))
    novel = set(r_split.choice(C, size=n_novel, replace=False).tolist()) if n_novel else set()
    manifest = [
        CategoryRecord(c, f"category_{c:05d}", "novel" if c in novel else "base", True)
        for c in range(C)
    ]

    obj_clean = _unit_rows(dirs @ M_obj.T)

    def objects(rng, per_category, categories):
        labels = np.repeat(np.asarray(categories, dtype=np.int64), per_category)
        if labels.size == 0:
            return LabeledBatch(np.zeros((0, L), np.float32), labels)
        X = _perturb(rng, obj_clean[labels], cfg.object_noise)
        return LabeledBatch(X.astype(np.float32), labels)

    base = [c for c in range(C) if c not in novel]
    return SynthWorld(
        config=cfg,
        directions=dirs,
        superclasses=superclasses,
        descriptions=descriptions.astype(np.float32),
        classnames=classnames.astype(np.float32),
        reference_embeddings=np.vstack(ref_rows).astype(np.float32),
        references=references,
        manifest=manifest,
        train=objects(r_train, cfg.objects_per_category, base),
        heldout=objects(r_held, cfg.heldout_per_category, range(C)),
    )


def world_to_inputs(world, out_dir):
    """Write a world in the on-disk formats; returns a name -> path mapping."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in WORLD_FILES}
    write_manifest(world.manifest, paths["manifest.jsonl"])
    write_embeddings(world.descriptions, paths["descriptions.pemb"])
    write_embeddings(world.classnames, paths["classnames.pemb"])
    write_reference_index(world.references, paths["references.jsonl"])
    write_embeddings(world.reference_embeddings, paths["references.pemb"])
    save_batch(world.train, out / "train")
    save_batch(world.heldout, out / "heldout")
    return paths
