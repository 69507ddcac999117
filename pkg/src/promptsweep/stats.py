"""Segment-level correlation measures and permutation significance tests.

Kendall is the tau-b variant throughout. Every measure raises
:class:`UndefinedCorrelation` when an input has no variation.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

KENDALL_VARIANT = "tau-b"
_PAIR_BUDGET = 4_000_000  # pairwise entries materialized per chunk


class UndefinedCorrelation(ValueError):
    pass


def _paired(metric, gold) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(metric, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"paired scores need equal 1-d shapes, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("need at least two paired scores")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("scores must be finite")
    return x, y


def _tied_pairs(sorted_values: np.ndarray) -> int:
    if sorted_values.size == 0:
        return 0
    boundaries = np.flatnonzero(np.diff(sorted_values) != 0)
    runs = np.diff(np.concatenate(([0], boundaries + 1, [sorted_values.size])))
    return int((runs * (runs - 1) // 2).sum())


def _dense_rank(a: np.ndarray) -> np.ndarray:
    return np.unique(a, return_inverse=True)[1].astype(np.int64)


def count_inversions(seq) -> int:
    """Number of index pairs i < j with seq[i] > seq[j] (bottom-up merge, vectorized)."""
    a = _dense_rank(np.asarray(seq))
    n = a.size
    if n < 2:
        return 0
    big = int(a.max()) + 1
    idx = np.arange(n, dtype=np.int64)
    total = 0
    width = 1
    while width < n:
        block = idx // width
        pair = block // 2
        right = (block % 2) == 1
        keys = pair * big + a
        left_keys = keys[~right]
        right_keys = keys[right]
        not_greater = np.searchsorted(left_keys, right_keys, side="right")
        pair_end = np.searchsorted(left_keys, (pair[right] + 1) * big, side="left")
        total += int((pair_end - not_greater).sum())
        keys = np.sort(keys, kind="stable")
        a = keys - (idx // (2 * width)) * big
        width *= 2
    return total


def kendall_tau_b(metric, gold) -> float:
    """Kendall tau-b in O(n log^2 n)."""
    x, y = _paired(metric, gold)
    n = x.size
    n0 = n * (n - 1) // 2
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    tx = _tied_pairs(xs)
    ty = _tied_pairs(np.sort(y))
    # pairs tied on both sides: runs of identical (x, y) after the lexsort
    same = np.concatenate(([False], (np.diff(xs) == 0) & (np.diff(ys) == 0)))
    run_id = np.cumsum(~same)
    runs = np.bincount(run_id)
    txy = int((runs * (runs - 1) // 2).sum())
    if tx == n0 or ty == n0:
        raise UndefinedCorrelation("Kendall tau-b undefined: one side is constant")
    discordant = count_inversions(ys)
    concordant = n0 - tx - ty + txy - discordant
    return (concordant - discordant) / math.sqrt((n0 - tx) * (n0 - ty))


def pearson(metric, gold) -> float:
    x, y = _paired(metric, gold)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("Pearson undefined: zero variance")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    a = np.asarray(values, dtype=np.float64)
    sorter = np.argsort(a, kind="mergesort")
    inv = np.empty(a.size, dtype=np.int64)
    inv[sorter] = np.arange(a.size)
    s = a[sorter]
    first = np.concatenate(([True], s[1:] != s[:-1]))
    dense = np.cumsum(first)[inv]
    bounds = np.concatenate((np.flatnonzero(first), [a.size]))
    return 0.5 * (bounds[dense] + bounds[dense - 1] + 1)


def spearman(metric, gold) -> float:
    x, y = _paired(metric, gold)
    return pearson(midranks(x), midranks(y))


def tie_calibrated_accuracy(metric, gold, max_candidates: int | None = None,
                            seed: int = 0) -> tuple[float, float]:
    """Pairwise accuracy with a calibrated metric tie threshold.

    A metric pair counts as tied when its absolute difference is at most
    epsilon. A pair is correct when metric and gold order it the same way,
    or when both tie it. Epsilon is chosen from 0 and the observed metric
    differences to maximize accuracy, preferring the smallest on ties.

    With ``max_candidates`` set, only 0 and an evenly spaced subset of the
    observed differences are tried (approximate, for very large inputs).
    Returns ``(accuracy, epsilon)``.
    """
    x, y = _paired(metric, gold)
    n = x.size
    n0 = n * (n - 1) // 2
    rows = max(1, _PAIR_BUDGET // n)

    def blocks():
        for start in range(0, n - 1, rows):
            stop = min(n - 1, start + rows)
            dx = x[start:stop, None] - x[None, :]
            dy = y[start:stop, None] - y[None, :]
            mask = np.arange(n)[None, :] > np.arange(start, stop)[:, None]
            yield dx[mask], dy[mask]

    if max_candidates is None:
        diffs = np.concatenate([np.abs(dx) for dx, _ in blocks()])
        candidates = np.unique(np.concatenate(([0.0], diffs)))
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=max_candidates * 4)
        j = rng.integers(0, n, size=max_candidates * 4)
        sample = np.unique(np.abs(x[i] - x[j]))
        if sample.size > max_candidates:
            sample = sample[np.linspace(0, sample.size - 1, max_candidates).astype(int)]
        candidates = np.unique(np.concatenate(([0.0], sample)))

    k = candidates.size
    concordant_hist = np.zeros(k + 1, dtype=np.int64)
    gold_tie_hist = np.zeros(k + 1, dtype=np.int64)
    for dx, dy in blocks():
        pos = np.searchsorted(candidates, np.abs(dx), side="left")
        conc = np.sign(dx) * np.sign(dy) > 0
        concordant_hist += np.bincount(pos[conc], minlength=k + 1)
        gold_tie_hist += np.bincount(pos[dy == 0], minlength=k + 1)
    # concordant pair counts for eps < |dx|, i.e. candidate index < pos
    correct_conc = concordant_hist.sum() - np.cumsum(concordant_hist)[:k]
    # gold-tied pair counts for eps >= |dx|, i.e. candidate index >= pos
    correct_ties = np.cumsum(gold_tie_hist)[:k]
    acc = (correct_conc + correct_ties) / n0
    best = int(np.argmax(acc))
    return float(acc[best]), float(candidates[best])


@dataclass(frozen=True)
class CorrelationReport:
    kendall: float
    pearson: float
    spearman: float
    tie_acc: float
    tie_epsilon: float
    n: int
    kendall_variant: str = KENDALL_VARIANT


def _or_nan(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedCorrelation:
        return float("nan")


def correlation_report(metric, gold, tie_max_candidates: int | None = None) -> CorrelationReport:
    """All four measures at once. Kendall must be defined; the others may be NaN."""
    x, y = _paired(metric, gold)
    tau = kendall_tau_b(x, y)
    acc, eps = tie_calibrated_accuracy(x, y, max_candidates=tie_max_candidates)
    return CorrelationReport(tau, _or_nan(pearson, x, y), _or_nan(spearman, x, y), acc, eps, int(x.size))


# Batched versions evaluate one gold vector against many metric rows at once;
# degenerate rows come back as NaN instead of raising.

def _kendall_batch(m: np.ndarray, y: np.ndarray) -> np.ndarray:
    k, n = m.shape
    n0 = n * (n - 1) // 2
    if n0 > _PAIR_BUDGET:
        return np.array([_or_nan(kendall_tau_b, row, y) for row in m])
    i, j = np.triu_indices(n, 1)
    sy = np.sign(y[i] - y[j])
    ty = n0 - int(np.count_nonzero(sy))
    out = np.empty(k)
    step = max(1, _PAIR_BUDGET // max(1, n0))
    for start in range(0, k, step):
        sm = np.sign(m[start:start + step, i] - m[start:start + step, j])
        s = (sm * sy).sum(axis=1)
        tx = n0 - np.count_nonzero(sm, axis=1)
        denom = np.sqrt((n0 - tx).astype(np.float64) * (n0 - ty))
        with np.errstate(divide="ignore", invalid="ignore"):
            out[start:start + step] = np.where(denom > 0, s / denom, np.nan)
    return out


def _pearson_batch(m: np.ndarray, y: np.ndarray) -> np.ndarray:
    mc = m - m.mean(axis=1, keepdims=True)
    yc = y - y.mean()
    num = mc @ yc
    denom = np.sqrt((mc * mc).sum(axis=1) * float(yc @ yc))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.clip(np.where(denom > 0, num / denom, np.nan), -1.0, 1.0)


def _spearman_batch(m: np.ndarray, y: np.ndarray) -> np.ndarray:
    ranks = np.vstack([midranks(row) for row in m])
    return _pearson_batch(ranks, midranks(y))


_BATCHED: dict[Callable, Callable] = {
    kendall_tau_b: _kendall_batch,
    pearson: _pearson_batch,
    spearman: _spearman_batch,
}


def batch_correlations(corr_fn: Callable, rows: np.ndarray, gold: np.ndarray) -> np.ndarray:
    fast = _BATCHED.get(corr_fn)
    if fast is not None:
        return fast(rows, gold)
    return np.array([_or_nan(corr_fn, row, gold) for row in rows])


def _standardize(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    if sd == 0:
        raise UndefinedCorrelation("cannot standardize a constant metric")
    return (v - v.mean()) / sd


def permute_input_test(metric_a, metric_b, gold, corr_fn: Callable = kendall_tau_b,
                       n_perm: int = 1000, seed=0, standardize: bool = True) -> float:
    """One-sided paired permutation test that A correlates better with gold than B.

    Each permutation swaps A's and B's score for every segment independently
    with probability 1/2. Returns ``(1 + #{delta_perm >= delta_obs}) / (1 + n_perm)``.
    Scores are z-normalized first (``standardize``) so that metrics on
    different scales can be swapped meaningfully; all supported measures are
    invariant to that transform.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    a, g = _paired(metric_a, gold)
    b, _ = _paired(metric_b, gold)
    if standardize:
        a, b = _standardize(a), _standardize(b)
    observed = corr_fn(a, g) - corr_fn(b, g)
    rng = np.random.default_rng(seed)
    swap = rng.random((n_perm, a.size)) < 0.5
    perm_a = np.where(swap, b, a)
    perm_b = np.where(swap, a, b)
    delta = batch_correlations(corr_fn, perm_a, g) - batch_correlations(corr_fn, perm_b, g)
    hits = int(np.count_nonzero(delta >= observed - 1e-12))
    return (1 + hits) / (1 + n_perm)


@dataclass
class SignificanceCluster:
    members: list[str]
    exclusive: bool
    order: list[str]
    kendall: dict[str, float]
    pvalues: dict[tuple[str, str], float] = field(default_factory=dict)


def cluster_from_pvalues(order: Sequence[str], pvalue: Callable[[str, str], float],
                         alpha: float = 0.075) -> tuple[list[str], bool]:
    """Smallest proper prefix of ``order`` whose members all beat all non-members.

    ``pvalue(a, b)`` is the p-value for "a better than b". Falls back to the
    top-1 metric flagged non-exclusive when no prefix qualifies.
    """
    order = list(order)
    for k in range(1, len(order)):
        inside, outside = order[:k], order[k:]
        if all(pvalue(s, o) <= alpha for s in inside for o in outside):
            return inside, True
    return order[:1], False


def significance_cluster(scores: Mapping[str, Sequence[float]], gold, alpha: float = 0.075,
                         n_perm: int = 1000, seed: int = 0,
                         corr_fn: Callable = kendall_tau_b) -> SignificanceCluster:
    """Top significance cluster among competing metrics scored on the same segments."""
    if len(scores) < 2:
        raise ValueError("need at least two metrics")
    names = list(scores)
    kendall = {}
    for name in names:
        try:
            kendall[name] = corr_fn(scores[name], gold)
        except UndefinedCorrelation:
            log.warning("metric %s has an undefined correlation; excluded from clustering", name)
    order = sorted(kendall, key=lambda k: (-kendall[k], names.index(k)))
    pvalues: dict[tuple[str, str], float] = {}

    def pvalue(a: str, b: str) -> float:
        key = (a, b)
        if key not in pvalues:
            pair_seed = [seed, names.index(a), names.index(b)]
            pvalues[key] = permute_input_test(scores[a], scores[b], gold, corr_fn, n_perm, pair_seed)
        return pvalues[key]

    if len(order) < 2:
        return SignificanceCluster(order[:1], False, order, kendall, pvalues)
    members, exclusive = cluster_from_pvalues(order, pvalue, alpha)
    return SignificanceCluster(members, exclusive, order, kendall, pvalues)
