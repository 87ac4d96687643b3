"""Independent reference implementations used by several test modules."""

import math

import mpmath
import numpy as np
from scipy.special import log_softmax as scipy_log_softmax


def brute_variance(features, labels):
    """Double-loop reference for D_inter, D_intra."""
    classes = sorted(set(int(y) for y in labels))
    unit = {c: [] for c in classes}
    for x, y in zip(features, labels):
        n = math.sqrt(sum(v * v for v in x))
        unit[int(y)].append([v / max(n, 1e-12) for v in x])
    mu = {}
    for c in classes:
        pts = unit[c]
        mu[c] = [sum(p[d] for p in pts) / len(pts) for d in range(len(pts[0]))]
    C = len(classes)
    inter = 0.0
    for j in classes:
        for k in classes:
            if j != k:
                inter += sum((a - b) ** 2 for a, b in zip(mu[j], mu[k]))
    inter /= C * (C - 1)
    intra = 0.0
    for c in classes:
        intra += sum(sum((a - b) ** 2 for a, b in zip(p, mu[c])) for p in unit[c]) / len(unit[c])
    intra /= C
    return inter, intra


def brute_confusion(scores, labels, beta):
    n_novel = max(labels) + 1
    P = [[0.0] * len(scores[0]) for _ in range(n_novel)]
    counts = [0] * n_novel
    for s, y in zip(scores, labels):
        ex = [math.exp(beta * v) for v in s]
        tot = sum(ex)
        for k, e in enumerate(ex):
            P[y][k] += e / tot
        counts[y] += 1
    P = [[v / counts[j] for v in row] for j, row in enumerate(P)]
    per = [sum(v * v for v in row) for row in P]
    return P, per, sum(per) / len(per)


def scalar_oracle(s_y, s_other, m, beta=1):
    # -log(e^{b(s_y-m)} / (e^{b(s_y-m)} + e^{b s_other})) at 40 digits
    mpmath.mp.dps = 40
    a = mpmath.mpf(beta) * (mpmath.mpf(s_y) - mpmath.mpf(m))
    b = mpmath.mpf(beta) * mpmath.mpf(s_other)
    return float(-mpmath.log(mpmath.exp(a) / (mpmath.exp(a) + mpmath.exp(b))))


def plain_ce(scores, labels, beta):
    logp = scipy_log_softmax(beta * scores, axis=1)
    return -logp[np.arange(len(labels)), labels].mean()
