from itertools import product

import pytest

from promptsweep.stability import AXES, ResultCube
from promptsweep.templates import builtin_catalog


def make_cube(value, model=("m1",), task=("t1",), base=("PZS",), desc=("Neutral",), fmt=("0 to 5",)):
    """Cube with every cell set to ``value(model, task, base, desc, fmt)`` (None leaves it absent)."""
    axes = dict(zip(AXES, (list(model), list(task), list(base), list(desc), list(fmt))))
    cube = ResultCube(axes)
    for coord in product(*axes.values()):
        v = value(*coord)
        if v is not None:
            cube.add(*coord, value=v)
    return cube


FMTS = ("0 or 1", "0 to 5", "0 to 100", "-100 to 100", "simple labels")


def planted_aggregator_cube(n_tasks=10):
    """Median ranking of formats is the same for every task; the max ranking flips with task parity."""
    tasks = tuple(f"d{i}" for i in range(n_tasks))

    def value(m, t, b, d, f):
        i, k = FMTS.index(f), int(t[1:])
        if d == "Neutral":  # one outlier cell per (task, fmt) drives the max
            return 0.9 + (0.01 * i if k % 2 == 0 else -0.01 * i)
        return 0.1 * i + 0.001 * ("Neutral", "Polite", "Threat").index(d)

    return make_cube(value, task=tasks, desc=("Neutral", "Polite", "Threat"), fmt=FMTS)


@pytest.fixture
def catalog():
    return builtin_catalog()


def write_dataset(path, golds, task="mt", lang_pair="en-de", prefix="s"):
    """TSV fixture with one segment per gold value; returns its manifest entry."""
    from promptsweep.dataset import Segment, write_segments

    segs = [Segment(f"{prefix}{i}", task, lang_pair, f"source text {prefix} {i}", f"hypothesis {prefix} {i}", float(g))
            for i, g in enumerate(golds)]
    write_segments(path, segs)
    entry = {"name": path.stem, "path": str(path), "task": task, "id_column": "id"}
    if lang_pair:
        entry["lang_pair"] = lang_pair
    return entry


def _listed(value):
    return value if isinstance(value, str) else list(value)


def mock_config(tmp_path, datasets, models=("mock-a",), formats="all", descriptions=("Neutral",),
                bases=("PZS",), **extra):
    """Config mapping for a mock-judge run inside ``tmp_path``."""
    doc = {
        "output_dir": str(tmp_path / "out"),
        "datasets": datasets,
        "models": [m if isinstance(m, dict) else {"id": m, "backend": "mock"} for m in models],
        "prompts": {"bases": _listed(bases), "descriptions": _listed(descriptions), "formats": _listed(formats)},
        "analysis": {"n_perm": 200},
    }
    for key, value in extra.items():
        doc[key] = value
    return doc


ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    if rep.failed or number not in ACCEPTANCE:
        ACCEPTANCE[number] = (title, "FAIL" if rep.failed else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status = ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number:2d}: {title}")
