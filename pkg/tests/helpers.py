import numpy as np

from mmproto.structures import CategoryRecord, PrototypeBank

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def make_bank(rng, C, Lt, Lv, novel=()):
    cats = [CategoryRecord(c, f"c{c}", "novel" if c in novel else "base", True) for c in range(C)]
    return PrototypeBank(
        T=rng.standard_normal((C, Lt)).astype(np.float32),
        V=rng.standard_normal((C, Lv)).astype(np.float32),
        categories=cats,
    )


def _cos(a, b):
    return float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))


def naive_loss(theta, T, V, X, labels, heads, tau, normed, kind="bce_sigmoid",
               gamma=2.0, alpha=0.25, bias=None, columns=None):
    """Scalar-loop ensemble loss; independent of the vectorized trainer."""
    bias = -0.5 * tau if bias is None else bias
    cols = list(range(len(T))) if columns is None else list(columns)
    total, count = 0.0, 0
    for i, x in enumerate(X):
        pt_x = theta["P_t"] @ x
        pv_x = theta["P_v"] @ x
        for j, c in enumerate(cols):
            parts = []
            if "con" in heads:
                w = theta["W"][c]
                parts.append(tau * _cos(w, x) if normed else float(w @ x))
            if "text" in heads:
                parts.append(tau * _cos(T[c], pt_x))
            if "vis" in heads:
                parts.append(tau * _cos(V[c], pv_x))
            s = sum(parts) / len(parts) + bias
            y = labels[i] == j
            # -log p_t without cancellation
            ce = float(np.logaddexp(0.0, -s if y else s))
            if kind == "focal":
                ce *= (alpha if y else 1.0 - alpha) * (-np.expm1(-ce)) ** gamma
            total += ce
            count += 1
    return total / count


def random_instance(seed):
    r = np.random.default_rng(seed)
    C, N = int(r.integers(2, 6)), int(r.integers(1, 5))
    L, Lt, Lv = (int(v) for v in r.integers(2, 9, size=3))
    theta = {"W": r.standard_normal((C, L)), "P_t": r.standard_normal((Lt, L)),
             "P_v": r.standard_normal((Lv, L))}
    # prototypes are stored as float32 in a bank
    T = r.standard_normal((C, Lt)).astype(np.float32).astype(np.float64)
    V = r.standard_normal((C, Lv)).astype(np.float32).astype(np.float64)
    X = r.standard_normal((N, L))
    labels = r.integers(0, C, size=N)
    return theta, T, V, X, labels


def bank_of(T, V, novel=()):
    cats = [CategoryRecord(c, f"c{c}", "novel" if c in novel else "base", True)
            for c in range(len(T))]
    return PrototypeBank(T=T.astype(np.float32), V=V.astype(np.float32), categories=cats)


def central_differences(f, theta, names, h=1e-6):
    grads = {}
    for k in names:
        g = np.zeros_like(theta[k])
        for idx in np.ndindex(theta[k].shape):
            orig = theta[k][idx]
            theta[k][idx] = orig + h
            up = f(theta)
            theta[k][idx] = orig - h
            down = f(theta)
            theta[k][idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads[k] = g
    return grads


def gradient_agreement(analytic, numeric, rel=1e-4, floor=1e-6):
    """Entries agree when within ``floor`` absolutely or ``rel`` relatively.

    Returns ``(ok, worst_relative, worst_absolute)``; the relative figure
    covers entries whose magnitude exceeds the floor.
    """
    ok, worst_rel, worst_abs = True, 0.0, 0.0
    for k in numeric:
        a, n = analytic[k], numeric[k]
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        ok &= bool(np.all((diff <= floor) | (diff <= rel * scale)))
        big = scale > floor
        if big.any():
            worst_rel = max(worst_rel, float(np.max(diff[big] / scale[big])))
        worst_abs = max(worst_abs, float(diff.max(initial=0.0)))
    return ok, worst_rel, worst_abs
