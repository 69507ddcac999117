import logging
import math

import numpy as np
import pytest
from conftest import FMTS, make_cube, planted_aggregator_cube
from hypothesis import given, settings
from hypothesis import strategies as st

from promptsweep.stability import (
    AGGREGATORS,
    CubeError,
    ResultCube,
    aggregate_ranking,
    aggregator_comparison,
    phase2_picks,
    saturation,
    select_phase2,
    stability_matrix,
    top_share,
)
from promptsweep.templates import ZS_BASES

DESCS = ("Neutral", "Polite", "Threat", "Command", "Question")


def test_cube_validation(tmp_path):
    cube = make_cube(lambda *c: 0.5)
    with pytest.raises(CubeError):
        cube.add("m1", "t1", "PZS", "Neutral", "0 to 5", value=0.1)
    with pytest.raises(CubeError):
        cube.add("m9", "t1", "PZS", "Neutral", "0 to 5", value=0.1)
    with pytest.raises(CubeError):
        ResultCube({"model": []})
    cube.write_tsv(tmp_path / "c.tsv")
    assert ResultCube.read_tsv(tmp_path / "c.tsv").cells == cube.cells


def test_absent_cells_are_skipped():
    cube = make_cube(lambda m, t, b, d, f: math.nan if f == "0 to 5" else None, fmt=FMTS)
    assert len(cube) == 0


def test_aggregate_ranking_examples():
    cells = {"A": [0.1, 0.9, 0.2], "B": [0.4, 0.4, 0.4]}
    cube = make_cube(lambda m, t, b, d, f: cells[f][DESCS.index(d)], desc=DESCS[:3], fmt=("A", "B"))
    assert [v for v, _ in aggregate_ranking(cube, "fmt", aggregator="median")] == ["B", "A"]
    assert [v for v, _ in aggregate_ranking(cube, "fmt", aggregator="max")] == ["A", "B"]
    assert aggregate_ranking(cube, "fmt", aggregator="median") == [("B", 0.4), ("A", 0.2)]


@pytest.mark.parametrize("agg", [a for a in AGGREGATORS if a not in ("std", "saturation")])
def test_single_cell_ranking_is_raw_sort(agg):
    raw = {"0 or 1": 0.3, "0 to 5": 0.7, "0 to 100": 0.1, "-100 to 100": 0.7, "simple labels": 0.5}
    cube = make_cube(lambda m, t, b, d, f: raw[f], fmt=FMTS)
    ranking = [v for v, _ in aggregate_ranking(cube, "fmt", aggregator=agg)]
    assert ranking == ["0 to 5", "-100 to 100", "simple labels", "0 or 1", "0 to 100"]  # tie keeps catalog order


def test_mean_equals_median_on_symmetric_cells():
    offsets = [-0.2, -0.1, 0.0, 0.1, 0.2]
    cube = make_cube(lambda m, t, b, d, f: 0.1 * FMTS.index(f) + offsets[DESCS.index(d)], desc=DESCS, fmt=FMTS)
    mean = aggregate_ranking(cube, "fmt", aggregator="mean")
    median = aggregate_ranking(cube, "fmt", aggregator="median")
    assert [v for v, _ in mean] == [v for v, _ in median]
    assert [s for _, s in mean] == pytest.approx([s for _, s in median], abs=1e-12)


def test_empty_value_excluded_and_logged(caplog):
    cube = make_cube(lambda m, t, b, d, f: None if f == "0 to 5" else 0.3, fmt=FMTS)
    with caplog.at_level(logging.INFO):
        ranking = aggregate_ranking(cube, "fmt")
    assert "0 to 5" not in [v for v, _ in ranking] and "0 to 5" in caplog.text


def test_other_aggregators():
    v = np.array([0.5, 0.495, 0.2, 0.1, 0.492] + [0.0] * 15)
    assert AGGREGATORS["top10_mean"](v) == pytest.approx((0.5 + 0.495) / 2)
    assert saturation(v) == pytest.approx(3 / 20)
    assert saturation(v, 0.004) == pytest.approx(1 / 20)
    cube = make_cube(lambda m, t, b, d, f: 0.5, fmt=FMTS)
    aggregate_ranking(cube, "fmt", aggregator="saturation:0.05")
    with pytest.raises(CubeError):
        aggregate_ranking(cube, "fmt", aggregator="mode")


def test_duplicated_and_reversed_datasets():
    base = {f: i / 10 for i, f in enumerate(FMTS)}
    dup = make_cube(lambda m, t, b, d, f: base[f], task=("d1", "d2"), fmt=FMTS)
    sm = stability_matrix(dup, "fmt", "task")
    assert sm.entry("d1", "d2") == 1.0 and sm.entry("d1", "d1") == 1.0
    rev = make_cube(lambda m, t, b, d, f: base[f] if t == "d1" else -base[f], task=("d1", "d2"), fmt=FMTS)
    sm = stability_matrix(rev, "fmt", "task")
    assert sm.entry("d1", "d2") == -1.0
    assert np.array_equal(sm.entries, sm.entries.T)
    assert [r for r in sm.rows()] == [("d1", "d1", 1.0), ("d1", "d2", -1.0), ("d2", "d1", -1.0), ("d2", "d2", 1.0)]


def test_stability_preconditions_and_undefined_entries():
    cube = make_cube(lambda m, t, b, d, f: 0.5, task=("d1", "d2"), fmt=FMTS)
    sm = stability_matrix(cube, "fmt", "task")
    assert np.isnan(sm.entries).all()  # all-tied rankings
    with pytest.raises(CubeError):
        stability_matrix(cube, "fmt", "fmt")
    with pytest.raises(CubeError):
        stability_matrix(cube, "desc", "task")


cell_values = st.floats(-1, 1, allow_nan=False)


@given(st.lists(cell_values, min_size=3 * 5 * 3, max_size=3 * 5 * 3), st.sampled_from(["median", "max", "min"]))
@settings(max_examples=60, deadline=None)
def test_constant_along_change_dim_gives_one(vals, agg):
    table = {(f, d): vals[i * 3 + j] for i, f in enumerate(FMTS) for j, d in enumerate(DESCS[:3])}
    cube = make_cube(lambda m, t, b, d, f: table[(f, d)], task=("a", "b", "c"), desc=DESCS[:3], fmt=FMTS)
    sm = stability_matrix(cube, "fmt", "task", agg)
    off = sm.entries[~np.eye(3, dtype=bool)]
    assert all(np.isnan(x) or x == 1.0 for x in off)


grid_values = st.integers(-100, 100).map(lambda k: k / 100)  # spaced so the transform stays strict in floats


@given(st.lists(grid_values, min_size=4 * 5 * 3, max_size=4 * 5 * 3), st.sampled_from(["median", "max", "min"]))
@settings(max_examples=60, deadline=None)
def test_stability_invariant_under_increasing_transform(vals, agg):
    # three cells per (task, fmt): the median is an order statistic, so it commutes with the transform
    it = iter(vals)
    table = {(t, f, d): next(it) for t in "abcd" for f in FMTS for d in DESCS[:3]}
    cube = make_cube(lambda m, t, b, d, f: table[(t, f, d)], task=tuple("abcd"), desc=DESCS[:3], fmt=FMTS)
    warped = make_cube(lambda m, t, b, d, f: math.tanh(3 * table[(t, f, d)]) + 2,
                       task=tuple("abcd"), desc=DESCS[:3], fmt=FMTS)
    a = stability_matrix(cube, "fmt", "task", agg).entries
    b = stability_matrix(warped, "fmt", "task", agg).entries
    assert np.allclose(a, b, equal_nan=True, atol=1e-12)


def test_aggregator_comparison_planted_fixture():
    cube = planted_aggregator_cube()
    comp = aggregator_comparison(cube, "fmt", n_perm=2000, seed=0)
    assert comp.factor == 21
    assert comp.significant("median", "max", adjusted=True)
    assert not comp.significant("max", "median", adjusted=True)
    assert comp.mean_stability["median"] == 1.0 and comp.mean_stability["max"] < 0


def test_aggregator_compared_with_equivalent_one():
    cube = planted_aggregator_cube()
    # fewer than 10 cells per value: top10_mean picks the single best cell, like max
    comp = aggregator_comparison(cube, "fmt", ["max", "top10_mean"], n_perm=200)
    assert comp.p("max", "top10_mean") == 1.0 and comp.p("top10_mean", "max") == 1.0
    assert comp.factor == 1
    with pytest.raises(CubeError):
        aggregator_comparison(cube, "fmt", ["max"])


def test_bonferroni_multiplies_and_caps():
    comp = aggregator_comparison(planted_aggregator_cube(), "fmt", n_perm=500, seed=3)
    raw, adj = comp.pvalues, comp.bonferroni
    off = ~np.eye(len(comp.aggregators), dtype=bool)
    assert np.allclose(adj[off], np.minimum(1.0, raw[off] * 21))


def test_top_share_single_base_and_sums():
    cube = make_cube(lambda m, t, b, d, f: 0.9 if b == "ZS_COT" else 0.1 * DESCS.index(d) / 5,
                     model=("m1", "m2"), task=("a", "b"), base=ZS_BASES, desc=DESCS, fmt=FMTS)
    shares = top_share(cube, "base", 0.02)
    for group, dist in shares.items():
        assert dist["ZS_COT"] == 1.0 and sum(dist.values()) == pytest.approx(1.0)
    with pytest.raises(CubeError):
        top_share(cube, "base", 0)


def test_top_share_planted_format(catalog):
    fmts = list(catalog.formats)
    rng = np.random.default_rng(0)
    noise = {}
    cube = make_cube(lambda m, t, b, d, f: 0.95 if f == "-100 to 100" else noise.setdefault((m, t, b, d, f), rng.uniform(0, 0.8)),
                     model=("m1",), task=("a", "b", "c"), base=ZS_BASES, desc=list(catalog.descriptions), fmt=fmts)
    dist = top_share(cube, "fmt", 0.02)[("m1",)]
    assert dist["-100 to 100"] == 1.0
    assert all(v >= 0 for v in dist.values())


def test_top_share_uniform_random_cube(catalog):
    rng = np.random.default_rng(1)
    cube = make_cube(lambda m, t, b, d, f: rng.uniform(), task=tuple(f"t{i}" for i in range(30)),
                     base=ZS_BASES, desc=list(catalog.descriptions), fmt=list(catalog.formats))
    dist = top_share(cube, "base", 0.02)[("m1",)]
    # 30 tasks x ceil(0.02 * 720) = 450 draws; each base expects 1/3
    assert all(abs(v - 1 / 3) < 0.08 for v in dist.values())
    assert sum(dist.values()) == pytest.approx(1.0)


def test_top_share_rounds_up():
    cube = make_cube(lambda m, t, b, d, f: 0.1 * FMTS.index(f), fmt=FMTS)
    dist = top_share(cube, "fmt", 0.02)[("m1",)]  # 5 cells -> 1 selected
    assert dist["simple labels"] == 1.0


TASKS = ("mt", "summ", "mt2")


def phase2_cube(winner):
    """Each (task, base) gets a strict ranking of (desc, fmt) given by ``winner``."""
    def value(m, t, b, d, f):
        return winner(t, b, d, f)
    return make_cube(value, task=TASKS, base=ZS_BASES, desc=DESCS, fmt=FMTS)


def test_select_phase2_distinct_winners():
    def winner(t, b, d, f):
        ti, bi = TASKS.index(t), ZS_BASES.index(b)
        target = (DESCS[(ti + bi) % 5], FMTS[(2 * ti + bi) % 5])
        return 1.0 if (d, f) == target else 0.1 * DESCS.index(d) + 0.01 * FMTS.index(f)
    specs = select_phase2(phase2_cube(winner))
    assert len(specs) == 9 and len(set(specs)) == 9
    assert (specs[0].base, specs[0].desc, specs[0].fmt) == ("PZS", "Neutral", "0 or 1")
    assert select_phase2(phase2_cube(winner)) == specs


def test_select_phase2_duplicate_takes_runner_up():
    def winner(t, b, d, f):
        # same best (desc, fmt) for PZS in every task; runner-up differs per task
        if (d, f) == ("Threat", "0 to 100"):
            return 0.9
        if b == "PZS" and (d, f) == (DESCS[TASKS.index(t)], "simple labels"):
            return 0.8
        return 0.1 * DESCS.index(d) / 5 + 0.01 * FMTS.index(f) + 0.2 * ZS_BASES.index(b) * (f == "0 to 5")
    picks = phase2_picks(phase2_cube(winner))
    pzs = [p for p in picks if p.base == "PZS"]
    assert [(p.desc, p.fmt, p.rank) for p in pzs] == [("Threat", "0 to 100", 1), ("Polite", "simple labels", 2),
                                                     ("Threat", "simple labels", 2)]
    assert len({(p.base, p.desc, p.fmt) for p in picks}) == 9


def test_select_phase2_collapses_models_with_max():
    def value(m, t, b, d, f):
        if m == "m2" and (d, f) == ("Question", "0 or 1"):
            return 0.99
        return 0.5 + 0.01 * DESCS.index(d) + 0.001 * FMTS.index(f) + 0.1 * (t == "mt" and b == "PZS")
    cube = make_cube(value, model=("m1", "m2"), task=("mt",), base=("PZS",), desc=DESCS, fmt=FMTS)
    [pick] = phase2_picks(cube)
    assert (pick.desc, pick.fmt) == ("Question", "0 or 1")
    [pick] = phase2_picks(cube, model_reduce="mean")
    assert (pick.desc, pick.fmt) == ("Question", "0 or 1")


def test_select_phase2_exhausted():
    cube = make_cube(lambda m, t, b, d, f: 0.5, task=("a", "b"), base=("PZS",))
    with pytest.raises(CubeError, match="exhausted|no unique"):
        select_phase2(cube)
