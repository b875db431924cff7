"""Scoring heads and their ensemble.

Every head maps object features ``X`` (N x L) to a logit block (N x C):

* conventional: ``X . W^T``, optionally as a temperature-scaled cosine
  (the "Norm Linear" variant);
* aligned: ``tau * cos(prototype_c, P . x_i)`` for a frozen prototype matrix
  and a trainable bias-free projection ``P``. The textual and visual heads
  are two instances of it.
"""

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    KOutOfRangeError,
    MissingConventionalError,
    ShapeMismatchError,
)
from .tensor import as_matrix, unit_rows64

DEFAULT_TAU = 100.0
MODES = ("supervised", "open_vocab")
HEADS = ("con", "text", "vis")
MODE_HEADS = {"supervised": ("con", "text", "vis"), "open_vocab": ("text", "vis")}


@dataclass
class ClassifierParams:
    """Trainable state: conventional weights ``W`` and projections ``P_t``, ``P_v``."""

    W: np.ndarray
    P_t: np.ndarray
    P_v: np.ndarray
    tau: float = DEFAULT_TAU
    conventional_normalized: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        L = self.W.shape[1]
        if self.P_t.shape[1] != L or self.P_v.shape[1] != L:
            raise DimensionMismatchError(
                f"projection input dims {self.P_t.shape[1]}/{self.P_v.shape[1]} != W dims {L}"
            )

    @property
    def feature_dim(self):
        return self.W.shape[1]

    def copy(self):
        return replace(self, W=self.W.copy(), P_t=self.P_t.copy(), P_v=self.P_v.copy())

    def bit_equal(self, other):
        return (
            self.tau == other.tau
            and self.conventional_normalized == other.conventional_normalized
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(
                    (self.W, self.P_t, self.P_v), (other.W, other.P_t, other.P_v)
                )
            )
        )


def _conventional64(params, X64):
    W64 = as_matrix(params.W, "W", np.float64)
    if not params.conventional_normalized:
        return X64 @ W64.T
    return (params.tau * unit_rows64(X64)) @ unit_rows64(W64).T


def _aligned64(prototypes, P, X64, tau):
    prototypes = as_matrix(prototypes, "prototypes", np.float64)
    P = as_matrix(P, "P", np.float64)
    if P.shape[0] != prototypes.shape[1]:
        raise DimensionMismatchError(
            f"projection outputs {P.shape[0]} dims, prototypes have {prototypes.shape[1]}"
        )
    if X64.shape[1] != P.shape[1]:
        raise DimensionMismatchError(f"X dims {X64.shape[1]} != projection input {P.shape[1]}")
    protos = unit_rows64(prototypes, strict=True)
    return (tau * unit_rows64(X64 @ P.T)) @ protos.T


def _features(X, L=None):
    X64 = as_matrix(X, "X", np.float64)
    if L is not None and X64.shape[1] != L:
        raise DimensionMismatchError(f"X dims {X64.shape[1]} != L {L}")
    return X64


def score_conventional(params, X):
    """``X . W^T``, or ``tau`` times the cosine when ``conventional_normalized``."""
    X64 = _features(X, params.feature_dim)
    return _conventional64(params, X64).astype(np.float32)


def score_aligned(prototypes, P, X, tau=DEFAULT_TAU):
    """Temperature-scaled cosine between each prototype and each projected feature.

    Prototype rows must be nonzero; projected features use the eps guard.
    """
    return _aligned64(prototypes, P, _features(X), tau).astype(np.float32)


def mean_logits(blocks):
    """Elementwise mean of equally shaped logit blocks (float64 sum, one rounding)."""
    blocks = [np.asarray(b) for b in blocks]
    shape = blocks[0].shape
    for b in blocks[1:]:
        if b.shape != shape:
            raise ShapeMismatchError(f"logit blocks {shape} and {b.shape} differ")
    total = blocks[0].astype(np.float64)
    for b in blocks[1:]:
        total = total + b
    return (total / len(blocks)).astype(np.float32)


def ensemble(mode, s_con, s_text, s_vis):
    """Average head logits: three heads when supervised, two for open vocabulary."""
    if mode == "supervised":
        if s_con is None:
            raise MissingConventionalError("supervised ensemble needs conventional logits")
        return mean_logits([s_con, s_text, s_vis])
    if mode == "open_vocab":
        return mean_logits([s_text, s_vis])
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def _heads64(params, bank, X64, heads):
    if "con" in heads:
        if X64.shape[1] != params.feature_dim:
            raise DimensionMismatchError(f"X dims {X64.shape[1]} != L {params.feature_dim}")
        yield _conventional64(params, X64)
    if "text" in heads:
        yield _aligned64(bank.T, params.P_t, X64, params.tau)
    if "vis" in heads:
        yield _aligned64(bank.V, params.P_v, X64, params.tau)


def score(params, bank, X, mode="supervised", heads=None):
    """Ensemble logits for ``mode``; ``heads`` overrides the mode's head set.

    Head blocks are summed in float64 and rounded once, so the result can
    differ from :func:`ensemble` over rounded head blocks in the last bit.
    """
    if heads is None:
        if mode not in MODE_HEADS:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        heads = MODE_HEADS[mode]
    heads = [h for h in HEADS if h in heads]
    if not heads:
        raise ValueError(f"heads must name at least one of {HEADS}")
    total = None
    for block in _heads64(params, bank, _features(X), heads):
        if total is None:
            total = block
        else:
            total += block
    total /= len(heads)
    return total.astype(np.float32)


def topk_indices(s, k):
    """Top-``k`` category ids per row; ties go to the smaller id."""
    s = np.asarray(s)
    if s.ndim != 2:
        raise ShapeMismatchError("logits must be 2-D")
    if not 1 <= k <= s.shape[1]:
        raise KOutOfRangeError(f"k={k} outside 1..{s.shape[1]}")
    return np.argsort(-s, axis=1, kind="stable")[:, :k]


def predict_topk(s, k):
    idx = topk_indices(s, k)
    s = np.asarray(s)
    return [
        [(int(c), float(s[i, c])) for c in row] for i, row in enumerate(idx)
    ]
