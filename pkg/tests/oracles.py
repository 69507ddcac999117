"""Slow, obviously-correct reference implementations used as test oracles.

Everything here works on plain Python lists with explicit pair loops and
shares no code with the package.
"""

import math
from itertools import combinations


def _sign(v):
    return (v > 0) - (v < 0)


def kendall_tau_b(x, y):
    n = len(x)
    conc = disc = tx = ty = 0
    for i, j in combinations(range(n), 2):
        sx, sy = _sign(x[i] - x[j]), _sign(y[i] - y[j])
        if sx == 0:
            tx += 1
        if sy == 0:
            ty += 1
        if sx * sy > 0:
            conc += 1
        elif sx * sy < 0:
            disc += 1
    pairs = n * (n - 1) // 2
    denom = math.sqrt((pairs - tx) * (pairs - ty))
    if denom == 0:
        return None
    return (conc - disc) / denom


def pearson(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return None
    return sxy / math.sqrt(sxx * syy)


def average_ranks(x):
    # rank = 1 + #smaller + (#equal - 1) / 2
    return [1 + sum(b < a for b in x) + (sum(b == a for b in x) - 1) / 2 for a in x]


def spearman(x, y):
    return pearson(average_ranks(x), average_ranks(y))


def tie_accuracy(x, y, eps):
    n = len(x)
    good = 0
    for i, j in combinations(range(n), 2):
        dx, dy = x[i] - x[j], y[i] - y[j]
        if abs(dx) <= eps:
            good += dy == 0
        else:
            good += _sign(dx) * _sign(dy) > 0
    return good / (n * (n - 1) // 2)


def tie_calibrated_accuracy(x, y):
    """Exhaustive sweep over 0 and every observed |x_i - x_j|; smallest epsilon wins ties."""
    candidates = sorted({0.0} | {abs(x[i] - x[j]) for i, j in combinations(range(len(x)), 2)})
    best_acc, best_eps = -1.0, None
    for eps in candidates:
        acc = tie_accuracy(x, y, eps)
        if acc > best_acc:
            best_acc, best_eps = acc, eps
    return best_acc, best_eps


def permutation_pvalue(a, b, gold, corr, swaps):
    """Permute-input p-value with an explicit list of swap masks."""
    observed = corr(a, gold) - corr(b, gold)
    hits = 0
    for mask in swaps:
        pa = [bi if s else ai for ai, bi, s in zip(a, b, mask)]
        pb = [ai if s else bi for ai, bi, s in zip(a, b, mask)]
        if corr(pa, gold) - corr(pb, gold) >= observed - 1e-12:
            hits += 1
    return (1 + hits) / (1 + len(swaps))


def cluster_by_prefix_scan(order, better):
    """Smallest proper prefix whose members all beat all outsiders; else top-1 (non-exclusive)."""
    for k in range(1, len(order)):
        inside, outside = order[:k], order[k:]
        if all(better(s, o) for s in inside for o in outside):
            return list(inside), True
    return list(order[:1]), False
