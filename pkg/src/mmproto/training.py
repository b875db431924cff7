"""Training of the conventional weights and the two projection layers.

Prototypes stay frozen. Forward and backward passes run in float64; the
returned :class:`ClassifierParams` are float32.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import ConfigError, LabelOutOfRangeError, ShapeMismatchError
from .heads import DEFAULT_TAU, HEADS, MODE_HEADS, MODES, ClassifierParams
from .structures import LabeledBatch
from .tensor import DEFAULT_EPS, as_matrix, l2_normalize_rows

LOSSES = ("bce_sigmoid", "focal")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "bce_sigmoid"
    gamma: float = 2.0
    alpha: float = 0.25
    # constant added to every logit before the sigmoid; None means -tau / 2
    # during training and 0 when scoring a bare logit block
    logit_bias: float = None

    def __post_init__(self):
        for name in ("gamma", "alpha"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError("must be a number", field=name)
        if self.logit_bias is not None and not isinstance(self.logit_bias, (int, float)):
            raise ConfigError("must be a number or null", field="logit_bias")
        if self.kind not in LOSSES:
            raise ConfigError(f"unknown loss {self.kind!r}", field="loss")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0", field="gamma")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]", field="alpha")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 256
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    mode: str = "supervised"
    # explicit head subset for ablations; None means the mode's heads
    heads: tuple = None

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "beta1", "beta2", "adam_eps", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError("must be a number", field=name)
        if not self.learning_rate >= 0:
            raise ConfigError("must be >= 0", field="learning_rate")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError("must be a non-negative integer", field="epochs")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError("must be a positive integer", field="batch_size")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"expected one of {OPTIMIZERS}", field="optimizer")
        if self.mode not in MODES:
            raise ConfigError(f"expected one of {MODES}", field="mode")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if self.heads is not None:
            heads = tuple(self.heads)
            if not heads or any(h not in HEADS for h in heads):
                raise ConfigError(f"heads must be a non-empty subset of {HEADS}", field="heads")
            if self.mode == "open_vocab" and "con" in heads:
                raise ConfigError("open_vocab training cannot use the conventional head", field="heads")
            object.__setattr__(self, "heads", heads)

    @property
    def active_heads(self):
        return self.heads if self.heads is not None else MODE_HEADS[self.mode]

    def to_json(self):
        out = asdict(self)
        out["heads"] = list(self.active_heads)
        return out

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("train config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError("unknown key", field=unknown[0])
        obj = dict(obj)
        if "loss" in obj:
            loss = obj["loss"]
            if isinstance(loss, str):
                loss = {"kind": loss}
            if not isinstance(loss, dict):
                raise ConfigError("must be a string or object", field="loss")
            try:
                obj["loss"] = LossConfig(**loss)
            except TypeError as exc:
                raise ConfigError(str(exc), field="loss")
        return cls(**obj)


def glorot_uniform(rng, rows, cols):
    a = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols)).astype(np.float32)


def init_params(n_categories, feature_dim, text_dim, visual_dim, seed,
                tau=DEFAULT_TAU, conventional_normalized=True):
    """Seeded Glorot-uniform initialization of ``W``, ``P_t`` and ``P_v``."""
    rng = np.random.default_rng(seed)
    return ClassifierParams(
        W=glorot_uniform(rng, n_categories, feature_dim),
        P_t=glorot_uniform(rng, text_dim, feature_dim),
        P_v=glorot_uniform(rng, visual_dim, feature_dim),
        tau=float(tau),
        conventional_normalized=conventional_normalized,
    )


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def _one_hot(labels, n_cols):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_cols):
        raise LabelOutOfRangeError(f"labels must lie in 0..{n_cols - 1}")
    y = np.zeros((labels.size, n_cols))
    y[np.arange(labels.size), labels] = 1.0
    return y


def loss_and_grad_logits(s, labels, loss_cfg=LossConfig()):
    """Mean per-element sigmoid loss over the block and its gradient.

    ``bce_sigmoid`` is binary cross-entropy against one-hot targets;
    ``focal`` scales each element by ``alpha_t * (1 - p_t) ** gamma``.
    """
    s = np.asarray(s, dtype=np.float64)
    if loss_cfg.logit_bias:
        s = s + loss_cfg.logit_bias
    if s.ndim != 2 or len(labels) != s.shape[0]:
        raise ShapeMismatchError(f"{len(labels)} labels for logits of shape {s.shape}")
    y = _one_hot(labels, s.shape[1])
    count = s.size
    sign = 2.0 * y - 1.0
    # log p_t where p_t is the probability assigned to the target value
    log_pt = _log_sigmoid(sign * s)
    if loss_cfg.kind == "bce_sigmoid":
        loss = -log_pt.sum() / count
        grad = (_sigmoid(s) - y) / count
        return float(loss), grad
    gamma, alpha = loss_cfg.gamma, loss_cfg.alpha
    pt = np.exp(log_pt)
    q = -np.expm1(log_pt)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    loss = (alpha_t * q**gamma * -log_pt).sum() / count
    grad = sign * alpha_t * (gamma * pt * q**gamma * log_pt - q ** (gamma + 1.0)) / count
    return float(loss), grad


class _Frozen:
    """Unit-normalized float64 prototypes, computed once per fit."""

    def __init__(self, bank, columns=None):
        T = l2_normalize_rows(as_matrix(bank.T, "T", np.float64), strict=True)
        V = l2_normalize_rows(as_matrix(bank.V, "V", np.float64), strict=True)
        if columns is not None:
            T, V = T[columns], V[columns]
        self.T_hat, self.V_hat = T, V


def _normalize(m, eps=DEFAULT_EPS):
    norms = np.maximum(np.sqrt(np.einsum("ij,ij->i", m, m)), eps)
    return m / norms[:, None], norms


def _cosine_forward(A, B, tau):
    """``tau * cos`` between rows of ``B`` (objects) and rows of ``A``; with cache."""
    A_hat, a_norms = _normalize(A)
    B_hat, b_norms = _normalize(B)
    return tau * B_hat @ A_hat.T, (A_hat, a_norms, B_hat, b_norms)


def _normalize_backward(g_hat, hat, norms, eps=DEFAULT_EPS):
    # Jacobian of row / max(||row||, eps); below eps the map is linear
    radial = np.einsum("ij,ij->i", g_hat, hat)[:, None]
    live = (norms > eps)[:, None]
    return np.where(live, (g_hat - hat * radial), g_hat) / norms[:, None]


def forward(theta, X, frozen, heads, tau, conventional_normalized, columns=None):
    """Per-head float64 logits and the cache needed by :func:`backward`.

    ``theta`` maps ``"W"``, ``"P_t"``, ``"P_v"`` to float64 arrays.
    ``columns`` restricts the conventional head to a category subset.
    """
    logits, cache = {}, {}
    if "con" in heads:
        W = theta["W"] if columns is None else theta["W"][columns]
        if conventional_normalized:
            logits["con"], cache["con"] = _cosine_forward(W, X, tau)
        else:
            logits["con"] = X @ W.T
    for head, P, protos in (("text", "P_t", frozen.T_hat), ("vis", "P_v", frozen.V_hat)):
        if head in heads:
            proj = X @ theta[P].T
            n_hat, norms = _normalize(proj)
            logits[head] = tau * n_hat @ protos.T
            cache[head] = (n_hat, norms)
    return logits, cache


def combine(logits):
    blocks = [logits[h] for h in HEADS if h in logits]
    return sum(blocks) / len(blocks)


def backward(theta, X, frozen, cache, d_logits, tau, conventional_normalized,
             columns=None):
    """Gradients of the loss w.r.t. ``W``, ``P_t`` and ``P_v`` given per-head dS."""
    grads = {k: np.zeros_like(v) for k, v in theta.items()}
    dS = d_logits.get("con")
    if dS is not None:
        if conventional_normalized:
            W_hat, w_norms, X_hat, _ = cache["con"]
            dW_hat = tau * dS.T @ X_hat
            dW = _normalize_backward(dW_hat, W_hat, w_norms)
        else:
            dW = dS.T @ X
        if columns is None:
            grads["W"] += dW
        else:
            np.add.at(grads["W"], columns, dW)
    for head, P, protos in (("text", "P_t", frozen.T_hat), ("vis", "P_v", frozen.V_hat)):
        dS = d_logits.get(head)
        if dS is None:
            continue
        n_hat, norms = cache[head]
        g = tau * dS @ protos
        d_proj = _normalize_backward(g, n_hat, norms)
        grads[P] += d_proj.T @ X
    return grads


def backward_params(params, bank, X, dS_con, dS_text, dS_vis):
    """Parameter gradients from per-head logit gradients (frozen prototypes)."""
    X = as_matrix(X, "X", np.float64)
    theta = _theta(params)
    frozen = _Frozen(bank)
    d_logits = {"con": dS_con, "text": dS_text, "vis": dS_vis}
    heads = tuple(h for h in HEADS if d_logits[h] is not None)
    d_logits = {h: np.asarray(d_logits[h], dtype=np.float64) for h in heads}
    for h, d in d_logits.items():
        if d.shape != (len(X), bank.n_categories):
            raise ShapeMismatchError(f"dS_{h} has shape {d.shape}")
    _, cache = forward(theta, X, frozen, heads, params.tau, params.conventional_normalized)
    grads = backward(theta, X, frozen, cache, d_logits, params.tau,
                     params.conventional_normalized)
    return grads["W"], grads["P_t"], grads["P_v"]


def _theta(params):
    return {
        "W": params.W.astype(np.float64),
        "P_t": params.P_t.astype(np.float64),
        "P_v": params.P_v.astype(np.float64),
    }


def end_to_end_loss(theta, X, labels, frozen, heads, tau, conventional_normalized,
                    loss_cfg, columns=None, with_grad=True):
    """Loss of the head ensemble and, optionally, its parameter gradients."""
    if loss_cfg.logit_bias is None:
        loss_cfg = replace(loss_cfg, logit_bias=-0.5 * tau)
    logits, cache = forward(theta, X, frozen, heads, tau, conventional_normalized, columns)
    loss, dS = loss_and_grad_logits(combine(logits), labels, loss_cfg)
    if not with_grad:
        return loss
    share = dS / len(logits)
    grads = backward(theta, X, frozen, cache, {h: share for h in logits}, tau,
                     conventional_normalized, columns)
    return loss, grads


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, grads, names):
        for k in names:
            theta[k] = theta[k] - self.lr * grads[k]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, theta, grads, names):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in names:
            g = grads[k]
            m = self.m.get(k, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            theta[k] = theta[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(cfg):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


def _concat(batches):
    if isinstance(batches, LabeledBatch):
        batches = [batches]
    X = np.concatenate([as_matrix(b.X, "X", np.float64) for b in batches])
    y = np.concatenate([b.labels for b in batches])
    return X, y


def fit(params, bank, batches, cfg, heldout=None):
    """Train ``params`` against labeled object features.

    Returns ``(trained_params, trace)``; ``trace`` holds one
    ``{"epoch", "loss", "top1_on_heldout"}`` record per epoch (epoch 0 is the
    initialization). In ``open_vocab`` mode the logits span only base
    categories during training and ``W`` is never touched.
    """
    X, y = _concat(batches)
    C = bank.n_categories
    if y.size == 0:
        raise ShapeMismatchError("no training objects")
    if y.min() < 0 or y.max() >= C:
        raise LabelOutOfRangeError(f"labels must lie in 0..{C - 1}")
    if X.shape[1] != params.feature_dim:
        raise ShapeMismatchError(f"X dims {X.shape[1]} != L {params.feature_dim}")

    heads = cfg.active_heads
    columns = None
    if cfg.mode == "open_vocab":
        columns = np.flatnonzero(bank.split_mask("base"))
        remap = np.full(C, -1)
        remap[columns] = np.arange(columns.size)
        y = remap[y]
        if y.min() < 0:
            raise LabelOutOfRangeError("open_vocab training objects must be base categories")
    frozen = _Frozen(bank, columns)
    frozen_all = frozen if columns is None else _Frozen(bank)
    trainable = [{"con": "W", "text": "P_t", "vis": "P_v"}[h] for h in heads]

    theta = _theta(params)
    opt = _make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    tau, normed = params.tau, params.conventional_normalized

    def full_loss():
        return end_to_end_loss(theta, X, y, frozen, heads, tau, normed, cfg.loss,
                               columns, with_grad=False)

    def heldout_top1():
        if heldout is None:
            return None
        logits, _ = forward(theta, as_matrix(heldout.X, "X", np.float64),
                            frozen_all, heads, tau, normed)
        pred = np.argmax(combine(logits), axis=1)
        return float(np.mean(pred == heldout.labels))

    trace = [{"epoch": 0, "loss": full_loss(), "top1_on_heldout": heldout_top1()}]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = end_to_end_loss(theta, X[idx], y[idx], frozen, heads, tau, normed,
                                       cfg.loss, columns)
            opt.step(theta, grads, trainable)
        trace.append({"epoch": epoch, "loss": full_loss(), "top1_on_heldout": heldout_top1()})

    trained = ClassifierParams(
        W=params.W.copy() if "W" not in trainable else theta["W"].astype(np.float32),
        P_t=params.P_t.copy() if "P_t" not in trainable else theta["P_t"].astype(np.float32),
        P_v=params.P_v.copy() if "P_v" not in trainable else theta["P_v"].astype(np.float32),
        tau=tau,
        conventional_normalized=normed,
    )
    return trained, trace
