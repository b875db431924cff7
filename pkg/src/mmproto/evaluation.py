"""Metrics, clustering and the scoring throughput benchmark."""

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .exceptions import DataValidationError, NumericalError, ShapeMismatchError, SingleClusterError
from .heads import ClassifierParams, score, topk_indices
from .structures import PrototypeBank
from .tensor import as_matrix, l2_normalize_rows, pca_project_2d


def topk_accuracy(s, labels, k):
    """Fraction of rows whose label is among the row's top-``k`` categories."""
    labels = np.asarray(labels).reshape(-1)
    if len(labels) != len(s):
        raise ShapeMismatchError(f"{len(labels)} labels for {len(s)} logit rows")
    if len(labels) == 0:
        return 0.0
    idx = topk_indices(s, k)
    return float(np.mean(np.any(idx == labels[:, None], axis=1)))


def cosine_distances(points):
    unit = l2_normalize_rows(as_matrix(points, "points", np.float64))
    return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)


def silhouette_score(points, assignments):
    """Mean silhouette under cosine distance; singleton clusters score 0."""
    labels = np.asarray(assignments).reshape(-1)
    if len(labels) != len(points):
        raise ShapeMismatchError("one assignment per point required")
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise SingleClusterError("silhouette needs at least two clusters")
    D = cosine_distances(points)
    member = labels[None, :] == clusters[:, None]        # K x n
    sizes = member.sum(axis=1)
    sums = D @ member.T                                   # n x K
    own = np.searchsorted(clusters, labels)
    n = len(labels)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(denom > 0, (b - a) / denom, 0.0)
    s[own_size == 1] = 0.0
    return float(s.mean())


def _kmeanspp(unit, k, rng):
    n = len(unit)
    centers = [int(rng.integers(n))]
    closest = 1.0 - unit @ unit[centers[0]]
    for _ in range(1, k):
        weights = np.clip(closest, 0.0, None) ** 2
        weights[centers] = 0.0
        total = weights.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=weights / total))
        else:
            nxt = int(np.setdiff1d(np.arange(n), centers)[0])
        centers.append(nxt)
        closest = np.minimum(closest, 1.0 - unit @ unit[nxt])
    return unit[centers].copy()


def spherical_kmeans(points, k, seed=0, max_iter=100):
    """Lloyd iterations under cosine distance with k-means++ seeding.

    Returns ``(assignments, centers, objective_trace)`` where the objective is
    the summed cosine distance of each point to its center.
    """
    unit = l2_normalize_rows(as_matrix(points, "points", np.float64))
    n = len(unit)
    if not 1 <= k <= n:
        raise DataValidationError(f"k={k} outside 1..{n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(unit, k, rng)
    assign = None
    trace = []
    for _ in range(max_iter):
        sims = unit @ centers.T
        new = np.argmax(sims, axis=1)
        trace.append(float(np.sum(1.0 - sims[np.arange(n), new])))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            mask = assign == j
            mean = unit[mask].sum(axis=0) if mask.any() else np.zeros(unit.shape[1])
            norm = np.linalg.norm(mean)
            if norm > 0:
                centers[j] = mean / norm
                continue
            # empty cluster: reseed from the point farthest from its center
            dist = 1.0 - np.einsum("ij,ij->i", unit, centers[assign])
            far = int(np.argmax(dist))
            centers[j] = unit[far]
            assign[far] = j
    return assign, centers, trace


def kmeans(points, k, seed=0, max_iter=100):
    return spherical_kmeans(points, k, seed, max_iter)[0]


def default_cluster_count(n):
    return int(max(2, min(n - 1, round(np.sqrt(n)))))


def prototype_silhouette(prototypes, k=None, seed=0):
    """Silhouette of a prototype set clustered by its own spherical k-means."""
    k = default_cluster_count(len(prototypes)) if k is None else k
    return silhouette_score(prototypes, kmeans(prototypes, k, seed))


def logits_checksum(s):
    return hashlib.sha256(np.ascontiguousarray(s, dtype="<f4").tobytes()).hexdigest()


def config_digest(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class EvalReport:
    mode: str
    top1: float
    top5: float
    per_split: dict
    silhouette: float
    silhouette_visual: float
    throughput: dict
    config_digest: str
    notes: list = field(default_factory=list)

    def to_json(self):
        return asdict(self)


def evaluate(params, bank, batch, mode="supervised", seed=0, n_clusters=None):
    """Score ``batch`` and summarise accuracy, split accuracy and separability."""
    t0 = time.perf_counter()
    s = score(params, bank, batch.X, mode)
    wall = time.perf_counter() - t0
    labels = batch.labels
    k5 = min(5, bank.n_categories)
    splits = np.array([c.split for c in bank.categories])[labels]
    per_split = {}
    for split in ("base", "novel"):
        mask = splits == split
        if mask.any():
            per_split[split] = {
                "n": int(mask.sum()),
                "top1": topk_accuracy(s[mask], labels[mask], 1),
                "top5": topk_accuracy(s[mask], labels[mask], k5),
            }
    notes = []
    if mode == "open_vocab":
        notes.append("open_vocab: conventional weights W not used")
    return EvalReport(
        mode=mode,
        top1=topk_accuracy(s, labels, 1),
        top5=topk_accuracy(s, labels, k5),
        per_split=per_split,
        silhouette=prototype_silhouette(bank.T, n_clusters, seed),
        silhouette_visual=prototype_silhouette(bank.V, n_clusters, seed),
        throughput={
            "objects": int(len(labels)),
            "wall_time_s": wall,
            "objects_per_s": len(labels) / wall if wall > 0 else float("inf"),
        },
        config_digest=config_digest(
            {"mode": mode, "seed": seed, "n_clusters": n_clusters,
             "tau": params.tau, "conventional_normalized": params.conventional_normalized,
             "sigma_table_hash": bank.sigma_table_hash}
        ),
        notes=notes,
    )


def per_category_top1(s, labels, n_categories):
    pred = np.argmax(s, axis=1)
    rows = []
    for c in range(n_categories):
        mask = labels == c
        rows.append((c, int(mask.sum()), float(np.mean(pred[mask] == c)) if mask.any() else float("nan")))
    return rows


def write_per_category_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category_id", "n_objects", "top1"])
        w.writerows(rows)


def write_pca_csv(points, path, labels=None):
    coords = pca_project_2d(points)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "pc1", "pc2"])
        for i, (x, y) in enumerate(coords):
            w.writerow([i, "" if labels is None else int(labels[i]), repr(float(x)), repr(float(y))])


def bench_scoring(n_categories, feature_dim, n_objects, seed, threads=1,
                  text_dim=None, visual_dim=None, repeats=1):
    """Time supervised-ensemble scoring on random inputs.

    Input generation is excluded from the timing. ``wall_time_s`` is the
    fastest of ``repeats`` runs.
    """
    for name, v in (("n_categories", n_categories), ("feature_dim", feature_dim),
                    ("n_objects", n_objects), ("threads", threads), ("repeats", repeats)):
        if v < 1:
            raise DataValidationError(f"{name} must be >= 1")
    text_dim = feature_dim if text_dim is None else text_dim
    visual_dim = feature_dim if visual_dim is None else visual_dim
    rng = np.random.default_rng(seed)

    def rand(*shape):
        return rng.standard_normal(shape, dtype=np.float32)

    bank = PrototypeBank(T=rand(n_categories, text_dim), V=rand(n_categories, visual_dim),
                         categories=[None] * n_categories)
    params = ClassifierParams(W=rand(n_categories, feature_dim),
                              P_t=rand(text_dim, feature_dim),
                              P_v=rand(visual_dim, feature_dim))
    X = rand(n_objects, feature_dim)
    times, checksum = [], None
    with threadpool_limits(threads):
        for _ in range(repeats):
            t0 = time.perf_counter()
            s = score(params, bank, X, "supervised")
            times.append(time.perf_counter() - t0)
            digest = logits_checksum(s)
            if checksum is not None and digest != checksum:
                raise NumericalError("logits changed between repeated runs")
            checksum = digest
    wall = min(times)
    return {
        "n_categories": n_categories,
        "feature_dim": feature_dim,
        "text_dim": text_dim,
        "visual_dim": visual_dim,
        "n_objects": n_objects,
        "threads": threads,
        "seed": seed,
        "wall_time_s": wall,
        "objects_per_s": n_objects / wall if wall > 0 else float("inf"),
        "checksum": checksum,
    }
