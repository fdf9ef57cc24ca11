"""Independent oracles shared by the test modules."""

import itertools
import math
from collections import Counter
from fractions import Fraction

import numpy as np

from leukonet.tensor import Tape, Tensor


def numerical_grad(f, arrays, index, h=1e-5):
    """Central finite difference of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def check_op_gradients(op, arrays, rng, h=1e-5):
    """Max relative error between tape gradients and finite differences.

    The op output is contracted with a fixed random tensor so every output
    element contributes to the scalar.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe_out = op(*[Tensor(a) for a in arrays]).data
    weights = rng.standard_normal(probe_out.shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*tensors)
        from leukonet import functional as F

        loss = F.sum(F.mul(out, Tensor(weights)))
    tape.backward(loss, tensors)
    worst = 0.0
    for i, t in enumerate(tensors):
        num = numerical_grad(scalar, arrays, i, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def reference_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Nested-loop grouped convolution."""
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    og = cout // groups
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            g = co // og
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else b[co]
                    for ci in range(cin_g):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[ni, g * cin_g + ci, oy * stride + ky, ox * stride + kx] * w[co, ci, ky, kx]
                    out[ni, co, oy, ox] = acc
    return out


def exact_mwu_greater(a, b):
    """P(U_a >= observed) under H0 by enumerating every rank assignment (no ties)."""
    pooled = list(a) + list(b)
    order = sorted(pooled)
    ranks = {v: i + 1 for i, v in enumerate(order)}
    na, n = len(a), len(pooled)
    u_obs = sum(ranks[v] for v in a) - na * (na + 1) / 2
    hits = 0
    total = 0
    for comb in itertools.combinations(range(1, n + 1), na):
        total += 1
        if sum(comb) - na * (na + 1) / 2 >= u_obs:
            hits += 1
    return u_obs, hits / total


def exact_u_distribution(na, nb):
    counts = Counter()
    for comb in itertools.combinations(range(1, na + nb + 1), na):
        counts[sum(comb) - na * (na + 1) / 2] += 1
    return counts, math.comb(na + nb, na)


def brute_force_weighted(labels, preds):
    """Per-class precision/recall/F1 by explicit counting, support-weighted, in exact rationals."""
    labels = [int(v) for v in labels]
    preds = [int(v) for v in preds]
    n = len(labels)
    out = {"precision": Fraction(0), "recall": Fraction(0), "f1": Fraction(0)}
    for c in (0, 1):
        tp = sum(1 for y, p in zip(labels, preds) if y == c and p == c)
        pred_c = sum(1 for p in preds if p == c)
        true_c = sum(1 for y in labels if y == c)
        prec = Fraction(tp, pred_c) if pred_c else Fraction(0)
        rec = Fraction(tp, true_c) if true_c else Fraction(0)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        w = Fraction(true_c, n)
        out["precision"] += w * prec
        out["recall"] += w * rec
        out["f1"] += w * f1
    return {k: float(v) for k, v in out.items()}
