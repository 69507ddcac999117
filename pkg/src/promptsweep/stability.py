"""Analyses over a cube of Kendall correlations: pattern rankings, ranking
stability under a changed dimension, top-share prevalence, aggregator
comparison and phase-2 prompt selection."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .stats import UndefinedCorrelation, kendall_tau_b
from .templates import OS_BASES, PromptSpec

log = logging.getLogger(__name__)

AXES = ("model", "task", "base", "desc", "fmt")
SATURATION_DELTA = 0.01


class CubeError(ValueError):
    pass


@dataclass
class ResultCube:
    """Kendall correlations indexed by (model, task, base, desc, fmt).

    ``axes`` fixes the admissible values per axis and their catalog order,
    which doubles as the tie-break order in every ranking.
    """

    axes: dict[str, list[str]]
    cells: dict[tuple[str, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        missing = [a for a in AXES if a not in self.axes]
        if missing:
            raise CubeError(f"cube needs axes {missing}")
        self.axes = {a: list(self.axes[a]) for a in AXES}
        self._pos = {a: {v: i for i, v in enumerate(vals)} for a, vals in self.axes.items()}

    @classmethod
    def from_cells(cls, cells: Mapping[tuple[str, ...], float]) -> ResultCube:
        """Build a cube whose axes are declared in first-seen order."""
        axes: dict[str, list[str]] = {a: [] for a in AXES}
        for coord in cells:
            for a, v in zip(AXES, coord):
                if v not in axes[a]:
                    axes[a].append(v)
        cube = cls(axes)
        for coord, value in cells.items():
            cube.add(*coord, value=value)
        return cube

    def add(self, model, task, base, desc, fmt, value: float) -> None:
        coord = (model, task, base, desc, fmt)
        for a, v in zip(AXES, coord):
            if v not in self._pos[a]:
                raise CubeError(f"value {v!r} not declared on axis {a!r}")
        if coord in self.cells:
            raise CubeError(f"duplicate cell {coord}")
        if value is None or not math.isfinite(value):
            return
        self.cells[coord] = float(value)

    def __len__(self) -> int:
        return len(self.cells)

    def order_key(self, coord: tuple[str, ...]) -> tuple[int, ...]:
        return tuple(self._pos[a][v] for a, v in zip(AXES, coord))

    def position(self, axis: str, value: str) -> int:
        return self._pos[axis][value]

    def select(self, context: Mapping[str, object] | None = None) -> list[tuple[tuple[str, ...], float]]:
        """Cells matching ``context``: axis -> value, or axis -> collection of values."""
        if not context:
            return list(self.cells.items())
        checks = []
        for axis, want in context.items():
            i = AXES.index(axis)
            allowed = {want} if isinstance(want, str) else set(want)
            checks.append((i, allowed))
        return [(c, v) for c, v in self.cells.items() if all(c[i] in ok for i, ok in checks)]

    def values(self, axis: str) -> list[str]:
        return list(self.axes[axis])

    def write_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow([*AXES, "kendall"])
            for coord in sorted(self.cells, key=self.order_key):
                w.writerow([*coord, repr(self.cells[coord])])

    @classmethod
    def read_tsv(cls, path: str | Path) -> ResultCube:
        cells = {}
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                if row["kendall"] == "":
                    continue
                cells[tuple(row[a] for a in AXES)] = float(row["kendall"])
        return cls.from_cells(cells)


def _top10_mean(v: np.ndarray) -> float:
    k = math.ceil(0.1 * v.size)
    return float(np.sort(v)[-k:].mean())


def saturation(v: np.ndarray, delta: float = SATURATION_DELTA) -> float:
    """Share of cells within ``delta`` of the best cell."""
    return float(np.mean(v >= v.max() - delta))


AGGREGATORS: dict[str, Callable[[np.ndarray], float]] = {
    "mean": lambda v: float(v.mean()),
    "median": lambda v: float(np.median(v)),
    "top10_mean": _top10_mean,
    "max": lambda v: float(v.max()),
    "min": lambda v: float(v.min()),
    "saturation": saturation,
    "std": lambda v: float(v.std()),
}

AGGREGATOR_DEFINITIONS = {
    "top10_mean": "mean of the best ceil(10%) cells",
    "saturation": f"fraction of cells within {SATURATION_DELTA} Kendall of the value's best cell",
    "std": "population standard deviation of the cells",
}


def _aggregator(name: str) -> Callable[[np.ndarray], float]:
    """Look up an aggregator; ``saturation:<delta>`` overrides the saturation window."""
    head, _, arg = name.partition(":")
    if head == "saturation" and arg:
        delta = float(arg)
        return lambda v: saturation(v, delta)
    try:
        return AGGREGATORS[name]
    except KeyError:
        raise CubeError(f"unknown aggregator {name!r}; choose from {sorted(AGGREGATORS)}") from None


def aggregate_scores(cube: ResultCube, rank_dim: str, context: Mapping[str, object] | None = None,
                     aggregator: str = "median") -> dict[str, float]:
    """Aggregate score per ``rank_dim`` value; values without cells are left out."""
    fn = _aggregator(aggregator)
    i = AXES.index(rank_dim)
    groups: dict[str, list[float]] = {}
    for coord, value in cube.select(context):
        groups.setdefault(coord[i], []).append(value)
    return {v: fn(np.asarray(groups[v])) for v in cube.axes[rank_dim] if v in groups}


def aggregate_ranking(cube: ResultCube, rank_dim: str, context: Mapping[str, object] | None = None,
                      aggregator: str = "median") -> list[tuple[str, float]]:
    """Rank the values of ``rank_dim`` by their aggregated cells, best first.

    Ties keep catalog order. Values with no matching cells are excluded and logged.
    """
    scores = aggregate_scores(cube, rank_dim, context, aggregator)
    empty = [v for v in cube.axes[rank_dim] if v not in scores]
    if empty:
        log.info("ranking %s: no cells for %s; excluded", rank_dim, empty)
    order = sorted(scores, key=lambda v: (-scores[v], cube.position(rank_dim, v)))
    return [(v, scores[v]) for v in order]


def ranking_correlation(first: Mapping[str, float], second: Mapping[str, float]) -> float:
    """Kendall tau-b between two rankings over their shared values; NaN if undefined."""
    common = [v for v in first if v in second]
    if len(common) < 2:
        return float("nan")
    try:
        return kendall_tau_b([first[v] for v in common], [second[v] for v in common])
    except UndefinedCorrelation:
        return float("nan")


@dataclass
class StabilityMatrix:
    rank_dim: str
    change_dim: str
    aggregator: str
    labels: list[str]
    entries: np.ndarray

    def entry(self, u: str, v: str) -> float:
        return float(self.entries[self.labels.index(u), self.labels.index(v)])

    def rows(self) -> Iterable[tuple[str, str, float]]:
        for i, u in enumerate(self.labels):
            for j, v in enumerate(self.labels):
                yield u, v, float(self.entries[i, j])


def stability_matrix(cube: ResultCube, rank_dim: str, change_dim: str, aggregator: str = "median",
                     context: Mapping[str, object] | None = None) -> StabilityMatrix:
    """Kendall correlation of the ``rank_dim`` ranking between every pair of ``change_dim`` values."""
    if rank_dim == change_dim:
        raise CubeError("rank_dim and change_dim must differ")
    if len(cube.axes[rank_dim]) < 2 or len(cube.axes[change_dim]) < 2:
        raise CubeError("need at least two values on both dimensions")
    labels = cube.values(change_dim)
    per_value = {
        u: aggregate_scores(cube, rank_dim, {**(context or {}), change_dim: u}, aggregator)
        for u in labels
    }
    m = len(labels)
    entries = np.full((m, m), np.nan)
    for i in range(m):
        for j in range(i, m):
            tau = ranking_correlation(per_value[labels[i]], per_value[labels[j]])
            entries[i, j] = entries[j, i] = tau
    return StabilityMatrix(rank_dim, change_dim, aggregator, labels, entries)


def stability_samples(cube: ResultCube, rank_dim: str, aggregator: str,
                      change_dims: Sequence[str] | None = None) -> dict[tuple[str, str, str], float]:
    """Ranking-stability correlation for every change of every other dimension.

    Keys are (change_dim, u, v) with u before v in catalog order.
    """
    change_dims = change_dims or [a for a in AXES if a != rank_dim]
    out = {}
    for dim in change_dims:
        if len(cube.axes[dim]) < 2:
            continue
        per_value = {u: aggregate_scores(cube, rank_dim, {dim: u}, aggregator) for u in cube.axes[dim]}
        for u, v in combinations(cube.axes[dim], 2):
            out[(dim, u, v)] = ranking_correlation(per_value[u], per_value[v])
    return out


@dataclass
class AggregatorComparison:
    """``pvalues[i, j]``: p-value that aggregator i yields more stable rankings than j."""

    rank_dim: str
    aggregators: list[str]
    pvalues: np.ndarray
    bonferroni: np.ndarray
    factor: int
    alpha: float
    mean_stability: dict[str, float]
    n_samples: int

    def p(self, better: str, worse: str, adjusted: bool = False) -> float:
        i, j = self.aggregators.index(better), self.aggregators.index(worse)
        return float((self.bonferroni if adjusted else self.pvalues)[i, j])

    def significant(self, better: str, worse: str, adjusted: bool = True) -> bool:
        return self.p(better, worse, adjusted) <= self.alpha


def paired_sign_flip_pvalue(diffs: np.ndarray, n_perm: int, rng: np.random.Generator) -> float:
    """One-sided p-value that the mean of paired differences is positive."""
    if diffs.size == 0:
        return 1.0
    observed = diffs.mean()
    signs = np.where(rng.random((n_perm, diffs.size)) < 0.5, -1.0, 1.0)
    perm = (signs * diffs).mean(axis=1)
    return (1 + int(np.count_nonzero(perm >= observed - 1e-12))) / (1 + n_perm)


def aggregator_comparison(cube: ResultCube, rank_dim: str, aggregators: Sequence[str] = tuple(AGGREGATORS),
                          n_perm: int = 1000, seed: int = 0, alpha: float = 0.05,
                          change_dims: Sequence[str] | None = None) -> AggregatorComparison:
    """Pairwise permutation tests of ranking stability between aggregation methods.

    For each aggregator, the stability correlation is computed for every
    change of every other dimension (one paired sample per change). Two
    aggregators are compared by randomly swapping each paired sample between
    them with probability 1/2; the statistic is the difference of mean
    stability. Bonferroni factor = number of unordered aggregator pairs.
    """
    aggregators = list(aggregators)
    if len(aggregators) < 2:
        raise CubeError("need at least two aggregators")
    samples = {a: stability_samples(cube, rank_dim, a, change_dims) for a in aggregators}
    keys = list(next(iter(samples.values())))
    vec = {a: np.array([samples[a][k] for k in keys]) for a in aggregators}
    m = len(aggregators)
    pvalues = np.ones((m, m))
    for i, j in combinations(range(m), 2):
        a, b = aggregators[i], aggregators[j]
        valid = np.isfinite(vec[a]) & np.isfinite(vec[b])
        diffs = vec[a][valid] - vec[b][valid]
        pvalues[i, j] = paired_sign_flip_pvalue(diffs, n_perm, np.random.default_rng([seed, i, j]))
        pvalues[j, i] = paired_sign_flip_pvalue(-diffs, n_perm, np.random.default_rng([seed, i, j]))
    factor = m * (m - 1) // 2
    bonferroni = np.minimum(1.0, pvalues * factor)
    np.fill_diagonal(bonferroni, 1.0)
    mean_stability = {a: float(np.nanmean(vec[a])) if np.isfinite(vec[a]).any() else float("nan")
                      for a in aggregators}
    return AggregatorComparison(rank_dim, aggregators, pvalues, bonferroni, factor, alpha,
                                mean_stability, len(keys))


def top_share(cube: ResultCube, pattern_dim: str, quantile: float = 0.02,
              group_by: Sequence[str] = ("model",), task_dim: str = "task") -> dict[tuple[str, ...], dict[str, float]]:
    """Share of each ``pattern_dim`` value among the best prompts of every task.

    Within each ``group_by`` group, every task contributes its best
    ceil(quantile * n_cells) cells (ties in catalog order); shares are taken
    over the pooled selection and sum to 1 per group.
    """
    if not 0 < quantile <= 1:
        raise CubeError("quantile must be in (0, 1]")
    gidx = [AXES.index(a) for a in group_by]
    tidx = AXES.index(task_dim)
    pidx = AXES.index(pattern_dim)
    buckets: dict[tuple, dict[str, list]] = {}
    for coord, value in cube.cells.items():
        group = tuple(coord[i] for i in gidx)
        buckets.setdefault(group, {}).setdefault(coord[tidx], []).append((coord, value))
    result = {}
    for group in sorted(buckets, key=lambda g: tuple(cube.position(a, v) for a, v in zip(group_by, g))):
        counts = dict.fromkeys(cube.axes[pattern_dim], 0)
        pooled = 0
        for cells in buckets[group].values():
            cells.sort(key=lambda cv: (-cv[1], cube.order_key(cv[0])))
            k = math.ceil(quantile * len(cells))
            for coord, _ in cells[:k]:
                counts[coord[pidx]] += 1
            pooled += k
        result[group] = {v: c / pooled for v, c in counts.items()}
    return result


@dataclass(frozen=True)
class Phase2Pick:
    task: str
    base: str
    desc: str
    fmt: str
    score: float
    rank: int  # 1 = best, 2 = runner-up taken because the best was a duplicate, ...


def phase2_picks(cube: ResultCube, model_reduce: str = "max") -> list[Phase2Pick]:
    """Best (description, format) per (task, zero-shot base); duplicates fall back to the next best.

    Cells are first reduced over the model axis with ``model_reduce``.
    """
    reduce = _aggregator(model_reduce)
    tasks = cube.values("task")
    bases = [b for b in cube.values("base") if b not in OS_BASES]
    collapsed: dict[tuple[str, str, str, str], list[float]] = {}
    for (model, task, base, desc, fmt), value in cube.cells.items():
        collapsed.setdefault((task, base, desc, fmt), []).append(value)
    picks: list[Phase2Pick] = []
    chosen: set[tuple[str, str, str]] = set()
    exhausted = []
    for task in tasks:
        for base in bases:
            options = [
                (desc, fmt, reduce(np.asarray(vals)))
                for (t, b, desc, fmt), vals in collapsed.items() if t == task and b == base
            ]
            if not options:
                raise CubeError(f"cube has no cells for task {task!r} with base {base!r}")
            options.sort(key=lambda o: (-o[2], cube.position("desc", o[0]), cube.position("fmt", o[1])))
            for rank, (desc, fmt, score) in enumerate(options, start=1):
                if (base, desc, fmt) not in chosen:
                    chosen.add((base, desc, fmt))
                    picks.append(Phase2Pick(task, base, desc, fmt, score, rank))
                    break
            else:
                exhausted.append((task, base))
    if exhausted:
        raise CubeError(f"no unique prompt left for (task, base) pairs: {exhausted}")
    return picks


def select_phase2(cube: ResultCube, model_reduce: str = "max") -> list[PromptSpec]:
    return [PromptSpec(p.base, p.desc, p.fmt) for p in phase2_picks(cube, model_reduce)]
