"""Finite-difference oracle shared by the unit and acceptance tests."""

import numpy as np

from ctfg import diffcore as dc


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def fd_check(build, arrays: dict, rng: np.random.Generator, h: float = 1e-4) -> float:
    """Max relative error between backward() and central differences.

    ``build(**tensors)`` returns a Tensor; it is scalarized against a fixed
    random projection so every output entry contributes.
    """
    params = {k: dc.parameter(v, k) for k, v in arrays.items()}
    out = build(**params)
    proj = rng.normal(size=out.shape)
    analytic = dc.backward(dc.sum(out * proj), params)

    def value(vals):
        with dc.no_grad():
            return float(np.sum(build(**{k: dc.tensor(v) for k, v in vals.items()}).data * proj))

    worst = 0.0
    for name, base in arrays.items():
        num = np.zeros_like(base, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            up = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
            dn = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
            up[name][idx] += h
            dn[name][idx] -= h
            num[idx] = (value(up) - value(dn)) / (2 * h)
        worst = max(worst, rel_err(analytic[name], num))
    return worst


def away_from(x: np.ndarray, points, margin: float = 1e-2) -> np.ndarray:
    """Nudge entries of ``x`` off the given kink locations."""
    x = np.array(x, dtype=np.float64)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def _mask(shape, rng):
    m = rng.random(shape) < 0.3
    m[..., 0] = False
    return m


# (name, builder, random-input factory); one entry per catalog operator
def operator_cases():
    return [
        ("add", lambda a, b: dc.add(a, b), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4,))}),
        ("sub", lambda a, b: dc.sub(a, b), lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 1))}),
        ("mul", lambda a, b: dc.mul(a, b), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 4))}),
        ("div", lambda a: dc.div(a, 2.5), lambda r: {"a": r.normal(size=(5,))}),
        ("matmul", lambda a, b: dc.matmul(a, b), lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(4, 2))}),
        ("transpose", lambda a: dc.transpose(a, (2, 0, 1)), lambda r: {"a": r.normal(size=(2, 3, 4))}),
        ("reshape", lambda a: dc.reshape(a, (4, 3)), lambda r: {"a": r.normal(size=(2, 6))}),
        ("concat", lambda a, b: dc.concat([a, b], axis=1), lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 2))}),
        ("getitem", lambda a: dc.getitem(a, (slice(None), [0, 2, 2])), lambda r: {"a": r.normal(size=(3, 4))}),
        ("softmax", lambda a: dc.softmax(a, axis=-1), lambda r: {"a": r.normal(size=(3, 5))}),
        ("log_softmax", lambda a: dc.log_softmax(a, axis=0), lambda r: {"a": r.normal(size=(4, 2))}),
        ("layer_norm", lambda a: dc.layer_norm(a), lambda r: {"a": r.normal(size=(3, 6))}),
        ("gelu", lambda a: dc.gelu(a), lambda r: {"a": 2 * r.normal(size=(4, 3))}),
        ("relu", lambda a: dc.relu(a), lambda r: {"a": away_from(r.normal(size=(4, 3)), [0.0])}),
        ("exp", lambda a: dc.exp(a), lambda r: {"a": r.normal(size=(6,))}),
        ("log", lambda a: dc.log(a), lambda r: {"a": r.uniform(0.5, 3.0, size=(6,))}),
        ("sum", lambda a: dc.sum(a, axis=1, keepdims=True), lambda r: {"a": r.normal(size=(3, 4))}),
        ("mean", lambda a: dc.mean(a, axis=(0, 2)), lambda r: {"a": r.normal(size=(2, 3, 4))}),
        ("masked_fill", lambda a: dc.softmax(dc.masked_fill(a, _FIXED_MASK, -1e30), axis=-1),
         lambda r: {"a": r.normal(size=(3, 4))}),
        ("clamp", lambda a: dc.clamp(a, -0.5, 0.7), lambda r: {"a": away_from(r.normal(size=(8,)), [-0.5, 0.7])}),
        ("minimum", lambda a, b: dc.minimum(a, b), lambda r: _separated_pair(r, (3, 3))),
    ]


_FIXED_MASK = np.array([[False, True, False, True],
                        [False, False, True, True],
                        [False, True, True, True]])


def _separated_pair(r, shape):
    a = r.normal(size=shape)
    b = a + np.where(r.random(shape) < 0.5, -1.0, 1.0) * r.uniform(0.1, 1.0, size=shape)
    return {"a": a, "b": b}


# --- brute-force reward oracles (plain loops over samples) -------------------------

def _frob2(a, b):
    total = 0.0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += (x - y) ** 2
    return total


def _centroid(items):
    acc = np.zeros_like(items[0], dtype=np.float64)
    for it in items:
        acc = acc + it
    return acc / len(items)


def oracle_cls(Z, labels):
    classes = sorted(set(labels.tolist()))
    cents = {c: _centroid([Z[i] for i in range(len(Z)) if labels[i] == c]) for c in classes}
    total, pairs = 0.0, 0
    for a in classes:
        for b in classes:
            if a != b:
                total += _frob2(cents[a], cents[b])
                pairs += 1
    return total / pairs


def oracle_inv(Z, labels, users):
    total = 0.0
    for c in sorted(set(labels.tolist())):
        per_user = {}
        for i in range(len(Z)):
            if labels[i] == c:
                per_user.setdefault(int(users[i]), []).append(Z[i])
        cents = {u: _centroid(v) for u, v in per_user.items()}
        scatter = [sum(_frob2(z, cents[u]) for z in v) / len(v) for u, v in per_user.items()]
        V = sum(scatter) / len(scatter)
        us = sorted(cents)
        gaps = [_frob2(cents[us[a]], cents[us[b]]) for a in range(len(us)) for b in range(a + 1, len(us))]
        D = sum(gaps) / len(gaps) if gaps else 0.0
        total += V + D
    return -total


def oracle_tmp(Z, H, W):
    total = 0.0
    for i in range(len(Z)):
        zbar = [sum(Z[i][j][q] for j in range(len(Z[i]))) / len(Z[i]) for q in range(W.shape[0])]
        hbar = [sum(H[i][t][d] for t in range(len(H[i]))) / len(H[i]) for d in range(W.shape[1])]
        for d in range(W.shape[1]):
            pred = sum(zbar[q] * W[q, d] for q in range(W.shape[0]))
            total += (pred - hbar[d]) ** 2
    return -total / len(Z)


def random_reward_batch(rng, max_n=32, max_classes=4, max_users=3, s=None, k=None, l=5, D=6):
    """Labels/users covering >= 2 classes; sizes drawn at random."""
    n_cls = int(rng.integers(2, max_classes + 1))
    n_usr = int(rng.integers(1, max_users + 1))
    n = int(rng.integers(n_cls, max_n + 1))
    labels = np.concatenate([np.arange(n_cls), rng.integers(0, n_cls, n - n_cls)]) + 1
    users = rng.integers(1, n_usr + 1, n)
    s = s or int(rng.integers(1, 6))
    k = k or int(rng.integers(1, 5))
    Z = rng.normal(size=(n, s, k))
    H = rng.normal(size=(n, l, D))
    W = rng.normal(size=(k, D))
    return Z, labels, users, H, W
