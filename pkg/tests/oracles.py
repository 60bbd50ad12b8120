"""Reference computations written without the package's tensor engine."""

import itertools
import math

import numpy as np
from scipy import integrate

CLAMP_LO, CLAMP_HI = 1e-7, 1 - 1e-7


def kl_1d_quadrature(mu_q, s_q, mu_p, s_p):
    """KL(N(mu_q, s_q^2) || N(mu_p, s_p^2)) by integrating q log(q/p)."""

    def integrand(x):
        lq = -0.5 * ((x - mu_q) / s_q) ** 2 - math.log(s_q) - 0.5 * math.log(2 * math.pi)
        lp = -0.5 * ((x - mu_p) / s_p) ** 2 - math.log(s_p) - 0.5 * math.log(2 * math.pi)
        return math.exp(lq) * (lq - lp)

    lo, hi = mu_q - 40 * s_q, mu_q + 40 * s_q
    val, _ = integrate.quad(integrand, lo, hi, points=[mu_q], epsabs=1e-13, epsrel=1e-12, limit=400)
    return val


def kl_diag_quadrature(mu_q, ls_q, mu_p, ls_p):
    """Sum of per-dimension 1-D quadratures for a diagonal Gaussian pair."""
    return sum(
        kl_1d_quadrature(a, math.exp(b), c, math.exp(d))
        for a, b, c, d in zip(mu_q, ls_q, mu_p, ls_p)
    )


def softmax_row(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = max(math.sqrt(sum(x * x for x in a)), 1e-12)
    nb = max(math.sqrt(sum(x * x for x in b)), 1e-12)
    return dot / (na * nb)


def similarity(anchor, candidates, i, tau):
    scores = [math.exp(cosine(anchor, c) / tau) for c in candidates]
    return scores[i] / sum(scores)


def contrastive(anchors, candidates, labels, tau):
    n = len(labels)
    total = 0.0
    for j in range(n):
        for i in range(n):
            m = min(max(similarity(anchors[j], candidates, i, tau), CLAMP_LO), CLAMP_HI)
            if labels[i] == labels[j]:
                total += math.log(m)
            else:
                total += math.log(1 - m)
    return total / n


def mean_log_likelihood(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        p = softmax_row(list(row))[y]
        total += math.log(min(max(p, CLAMP_LO), CLAMP_HI))
    return total / len(labels)


def label_patterns(max_n):
    for n in range(1, max_n + 1):
        yield from itertools.product((0, 1), repeat=n)


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    hits = 0.0
    for p in pos:
        for q in neg:
            hits += 1.0 if p > q else 0.5 if p == q else 0.0
    return hits / (len(pos) * len(neg))


def as_rows(x):
    return [list(map(float, r)) for r in np.asarray(x)]
