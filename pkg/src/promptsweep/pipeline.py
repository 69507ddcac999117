"""End-to-end orchestration: configuration, job planning, resumable runs,
evaluation into a result cube, reports and external prompt presets."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from collections.abc import Callable, Iterator, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .dataset import DatasetSpec, Segment, load_manifest, load_segments, phase1_subset, spec_from_dict
from .demos import DemoPool, DemoSelector, EndpointEmbedder, HashingEmbedder, load_pool
from .extract import MISSING, ExtractedScore, extract_score, impute_missing
from .inference import (
    EndpointConfig,
    GenerationRequest,
    Generator,
    MockJudgeBackend,
    OpenAIHTTPBackend,
    RecordCache,
)
from .stability import (
    AGGREGATOR_DEFINITIONS,
    AGGREGATORS,
    AXES,
    CubeError,
    ResultCube,
    aggregator_comparison,
    phase2_picks,
    stability_matrix,
    top_share,
)
from .stats import CorrelationReport, UndefinedCorrelation, correlation_report, significance_cluster
from .templates import (
    OS_BASES,
    OS_COUNTERPART,
    ZS_BASES,
    Catalog,
    FormatRequirement,
    PromptSpec,
    TemplateError,
    builtin_catalog,
    expand_grid,
    fill,
    load_catalog,
    merge_catalogs,
    render,
)

log = logging.getLogger(__name__)

PHASES = ("phase1", "phase2")


class ConfigError(ValueError):
    pass


class CoverageError(RuntimeError):
    pass


class ExtractionAbort(RuntimeError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class ModelConfig:
    id: str
    backend: str = "http"  # http | mock
    route: str | None = None
    sigma: float | None = None
    seed: int | None = None


@dataclass
class AnalysisConfig:
    aggregator: str = "median"
    rank_dims: list[str] = field(default_factory=lambda: ["desc", "fmt"])
    change_dims: list[str] = field(default_factory=lambda: ["base", "task", "model"])
    top_patterns: list[str] = field(default_factory=lambda: ["base", "desc", "fmt"])
    top_quantile: float = 0.02
    aggregators: list[str] = field(default_factory=lambda: list(AGGREGATORS))
    cluster_alpha: float = 0.075
    comparison_alpha: float = 0.05
    n_perm: int = 1000
    seed: int = 0
    model_reduce: str = "max"


@dataclass
class Config:
    phase: str = "phase1"
    output_dir: Path = Path("run")
    cache_dir: Path | None = None
    catalog_dir: Path | None = None
    datasets: list[DatasetSpec] = field(default_factory=list)
    models: list[ModelConfig] = field(default_factory=list)
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    mock_sigma: float = 0.0
    mock_seed: int = 0
    bases: list[str] | str = "zs"
    descriptions: list[str] | str = "all"
    formats: list[str] | str = "all"
    spec_file: Path | None = None
    one_shot: bool = False
    per_lang_limit: int | None = None
    demo_pools: dict[str, Path] = field(default_factory=dict)
    embedder: dict[str, Any] = field(default_factory=lambda: {"kind": "hashing", "dim": 64})
    max_chars: int | None = None
    coverage: float = 1.0
    tie_max_candidates: int | None = None
    batch_size: int = 256
    max_failure_rate: float = 0.0
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def cache_path(self) -> Path:
        return self.cache_dir if self.cache_dir is not None else self.output_dir / "cache"


CONFIG_KEYS = {
    "phase", "output_dir", "cache_dir", "catalog", "datasets", "models", "endpoint", "mock",
    "prompts", "demos", "max_chars", "evaluate", "run", "analysis",
}


def _check_keys(section: str, got: dict, allowed: set[str]) -> None:
    unknown = set(got) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {sorted(unknown)}")


def _path(value, base: Path) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def config_from_dict(doc: dict, base_dir: Path | str = ".") -> Config:
    """Validate a configuration mapping; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping")
    _check_keys("config", doc, CONFIG_KEYS)
    cfg = Config(raw=json.loads(json.dumps(doc, default=str)))
    cfg.phase = doc.get("phase", "phase1")
    if cfg.phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}")
    cfg.output_dir = _path(doc.get("output_dir", "run"), base)
    cfg.cache_dir = _path(doc.get("cache_dir"), base)
    cfg.catalog_dir = _path(doc.get("catalog"), base)

    datasets = doc.get("datasets", [])
    if isinstance(datasets, str):
        cfg.datasets = load_manifest(_path(datasets, base))
    else:
        cfg.datasets = [spec_from_dict(e, base) for e in datasets]
    names = [d.name for d in cfg.datasets]
    if len(set(names)) != len(names):
        raise ConfigError("dataset names must be unique")

    for entry in doc.get("models", []):
        if isinstance(entry, str):
            entry = {"id": entry}
        _check_keys("models", entry, {"id", "backend", "route", "sigma", "seed"})
        m = ModelConfig(**entry)
        if m.backend not in ("http", "mock"):
            raise ConfigError(f"model {m.id}: backend must be http or mock")
        cfg.models.append(m)
    if len({m.id for m in cfg.models}) != len(cfg.models):
        raise ConfigError("model ids must be unique")

    endpoint = doc.get("endpoint", {}) or {}
    _check_keys("endpoint", endpoint, set(EndpointConfig.__dataclass_fields__))
    cfg.endpoint = EndpointConfig(**endpoint)

    mock = doc.get("mock", {}) or {}
    _check_keys("mock", mock, {"sigma", "seed"})
    cfg.mock_sigma = float(mock.get("sigma", 0.0))
    cfg.mock_seed = int(mock.get("seed", 0))

    prompts = doc.get("prompts", {}) or {}
    _check_keys("prompts", prompts, {"bases", "descriptions", "formats", "spec_file", "one_shot", "per_lang_limit"})
    cfg.bases = prompts.get("bases", "zs")
    cfg.descriptions = prompts.get("descriptions", "all")
    cfg.formats = prompts.get("formats", "all")
    cfg.spec_file = _path(prompts.get("spec_file"), base)
    cfg.one_shot = bool(prompts.get("one_shot", False))
    cfg.per_lang_limit = prompts.get("per_lang_limit")

    demos = doc.get("demos", {}) or {}
    _check_keys("demos", demos, {"pools", "embedder"})
    cfg.demo_pools = {task: _path(p, base) for task, p in (demos.get("pools") or {}).items()}
    if "embedder" in demos:
        cfg.embedder = dict(demos["embedder"])

    cfg.max_chars = doc.get("max_chars")

    ev = doc.get("evaluate", {}) or {}
    _check_keys("evaluate", ev, {"coverage", "tie_max_candidates"})
    cfg.coverage = float(ev.get("coverage", 1.0))
    if not 0 <= cfg.coverage <= 1:
        raise ConfigError("evaluate.coverage must be in [0, 1]")
    cfg.tie_max_candidates = ev.get("tie_max_candidates")

    run = doc.get("run", {}) or {}
    _check_keys("run", run, {"batch_size", "max_failure_rate"})
    cfg.batch_size = int(run.get("batch_size", 256))
    cfg.max_failure_rate = float(run.get("max_failure_rate", 0.0))

    analysis = doc.get("analysis", {}) or {}
    _check_keys("analysis", analysis, set(AnalysisConfig.__dataclass_fields__))
    cfg.analysis = AnalysisConfig(**analysis)
    for dim in [*cfg.analysis.rank_dims, *cfg.analysis.change_dims, *cfg.analysis.top_patterns]:
        if dim not in AXES:
            raise ConfigError(f"analysis: unknown axis {dim!r}")
    return cfg


def load_config(path: str | Path) -> Config:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    return config_from_dict(doc, path.parent)


# ---------------------------------------------------------------- planning

def _select(requested, available: Sequence[str], catalog: Catalog, what: str) -> list[str]:
    if requested == "all":
        return list(available)
    if isinstance(requested, str):
        requested = [requested]
    out = []
    for name in requested:
        resolved = catalog.resolve(name)
        if resolved not in available:
            raise ConfigError(f"unknown {what} {name!r}")
        out.append(resolved)
    return out


def read_spec_file(path: str | Path) -> list[PromptSpec]:
    """Read a prompt list written by ``write_spec_file`` (columns base, desc, fmt)."""
    specs = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader((line for line in fh if not line.startswith("#")), delimiter="\t"):
            specs.append(PromptSpec(row["base"], row["desc"], row["fmt"], row["base"] in OS_BASES))
    if not specs:
        raise ConfigError(f"{path}: no prompt specs")
    return specs


def write_spec_file(path: str | Path, cube: ResultCube, model_reduce: str = "max") -> list[PromptSpec]:
    """Run the phase-2 selection on ``cube`` and write the chosen specs."""
    picks = phase2_picks(cube, model_reduce)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["base", "desc", "fmt", "task", "score", "rank"])
        for p in picks:
            w.writerow([p.base, p.desc, p.fmt, p.task, repr(p.score), p.rank])
    return [PromptSpec(p.base, p.desc, p.fmt) for p in picks]


def build_catalog(cfg: Config) -> Catalog:
    catalog = builtin_catalog()
    if cfg.catalog_dir is not None:
        catalog = merge_catalogs(catalog, load_catalog(cfg.catalog_dir))
    return catalog


def build_specs(cfg: Config, catalog: Catalog) -> list[PromptSpec]:
    if cfg.spec_file is not None:
        specs = read_spec_file(cfg.spec_file)
        if cfg.one_shot:
            specs = [PromptSpec(OS_COUNTERPART[s.base], s.desc, s.fmt, True) if s.base in ZS_BASES else s
                     for s in specs]
        return specs
    if cfg.bases in ("zs", "os"):
        bases = catalog.zs_bases if cfg.bases == "zs" else catalog.os_bases
    else:
        bases = _select(cfg.bases, list(catalog.bases), catalog, "base prompt")
    descs = _select(cfg.descriptions, list(catalog.descriptions), catalog, "task description")
    fmts = _select(cfg.formats, list(catalog.formats), catalog, "format requirement")
    one_shot = cfg.one_shot or cfg.bases == "os"
    return expand_grid(bases, descs, fmts, one_shot=one_shot)


@dataclass(frozen=True)
class Job:
    model: str
    dataset: str
    spec: PromptSpec
    segment: Segment


@dataclass(frozen=True)
class JobContext:
    """What the mock backend needs to answer a job."""

    segment: Segment
    fmt: FormatRequirement
    gold_range: tuple[float, float]


@dataclass
class RunPlan:
    phase: str
    models: list[str]
    datasets: list[DatasetSpec]
    specs: list[PromptSpec]
    segment_counts: dict[str, int]
    segments: dict[str, list[Segment]] = field(default_factory=dict, repr=False)
    catalog: Catalog | None = field(default=None, repr=False)
    gold_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def job_count(self) -> int:
        return sum(self.segment_counts.values()) * len(self.specs) * len(self.models)

    def jobs(self) -> Iterator[Job]:
        """Jobs in a fixed order: model, dataset, spec, segment."""
        for model in self.models:
            for ds in self.datasets:
                for spec in self.specs:
                    for seg in self.segments.get(ds.name, []):
                        yield Job(model, ds.name, spec, seg)

    def digest(self) -> str:
        payload = {
            "phase": self.phase,
            "models": self.models,
            "specs": [list(s.key) + [s.result_type, s.task_insert] for s in self.specs],
            "datasets": {
                name: hashlib.sha256("\n".join(f"{s.id}\t{s.gold!r}\t{s.source}\t{s.hypothesis}"
                                               for s in self.segments.get(name, [])).encode("utf-8")).hexdigest()
                for name in self.segment_counts
            },
            "counts": self.segment_counts,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def make_plan(phase: str, models: Sequence[str], datasets: Sequence[DatasetSpec], specs: Sequence[PromptSpec],
              segment_counts: dict[str, int]) -> RunPlan:
    """A plan from counts alone, for sizing a run before any data is read."""
    return RunPlan(phase, list(models), list(datasets), list(specs), dict(segment_counts))


def plan(cfg: Config) -> RunPlan:
    """Load data and enumerate jobs. Nothing is sent to an endpoint."""
    if not cfg.models:
        raise ConfigError("no models configured")
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    catalog = build_catalog(cfg)
    specs = build_specs(cfg, catalog)
    for s in specs:
        for kind, name in (("base", s.base), ("description", s.desc), ("format", s.fmt)):
            try:
                {"base": catalog.base, "description": catalog.description, "format": catalog.format}[kind](name)
            except KeyError:
                raise ConfigError(f"spec refers to unknown {kind} {name!r}") from None
    segments: dict[str, list[Segment]] = {}
    gold_ranges = {}
    for ds in cfg.datasets:
        segs = load_segments(ds)
        if cfg.per_lang_limit:
            segs = phase1_subset(segs, cfg.per_lang_limit)
        segments[ds.name] = segs
        golds = [s.gold for s in segs]
        gold_ranges[ds.name] = ds.gold_range or (min(golds), max(golds))
    if any(s.one_shot for s in specs):
        missing = sorted({ds.task for ds in cfg.datasets} - set(cfg.demo_pools))
        if missing:
            raise ConfigError(f"one-shot prompts need a demonstration pool for task(s) {missing}")
    counts = {name: len(segs) for name, segs in segments.items()}
    return RunPlan(cfg.phase, [m.id for m in cfg.models], list(cfg.datasets), specs, counts,
                   segments, catalog, gold_ranges)


# ---------------------------------------------------------------- running

def build_embedder(cfg: Config):
    opts = dict(cfg.embedder)
    kind = opts.pop("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(int(opts.get("dim", 64)))
    if kind == "endpoint":
        return EndpointEmbedder(opts.get("base_url", cfg.endpoint.base_url), opts["model_id"], int(opts["dim"]))
    raise ConfigError(f"unknown embedder kind {kind!r}")


def build_demo_selector(cfg: Config, plan_: RunPlan) -> DemoSelector | None:
    if not any(s.one_shot for s in plan_.specs):
        return None
    embedder = build_embedder(cfg)
    pools: dict[str, DemoPool] = {}
    for task, path in cfg.demo_pools.items():
        pools[task] = load_pool(path, task, embedder)
    return DemoSelector(pools, embedder)


def build_generators(cfg: Config, cache: RecordCache) -> dict[str, Generator]:
    ep = cfg.endpoint
    http = None
    gens = {}
    for m in cfg.models:
        if m.backend == "mock":
            backend = MockJudgeBackend(m.sigma if m.sigma is not None else cfg.mock_sigma,
                                       m.seed if m.seed is not None else cfg.mock_seed)
        else:
            if http is None:
                http = OpenAIHTTPBackend(ep.base_url, api_key_env=ep.api_key_env, timeout=ep.timeout)
            backend = http
        gens[m.id] = Generator(backend, cache, ep.concurrency, ep.retries, ep.backoff_base)
    return gens


class Renderer:
    """Turns jobs into generation requests (and mock contexts)."""

    def __init__(self, cfg: Config, plan_: RunPlan, demos: DemoSelector | None = None):
        self.cfg = cfg
        self.plan = plan_
        self.demos = demos
        self.routes = {m.id: m.route or cfg.endpoint.route for m in cfg.models}
        self._prompts: dict[tuple, str] = {}

    def prompt(self, spec: PromptSpec, segment: Segment) -> str:
        key = (spec.key, segment.id, segment.task)
        text = self._prompts.get(key)
        if text is None:
            demo = self.demos(segment) if spec.one_shot else None
            text = render(spec, segment, demo, self.plan.catalog, self.cfg.max_chars)
            if len(self._prompts) < 200_000:
                self._prompts[key] = text
        return text

    def request(self, job: Job) -> GenerationRequest:
        ep = self.cfg.endpoint
        return GenerationRequest(job.model, self.prompt(job.spec, job.segment), ep.max_tokens, ep.temperature,
                                 tuple(ep.stop) if ep.stop else None, self.routes[job.model])

    def context(self, job: Job) -> JobContext:
        return JobContext(job.segment, self.plan.catalog.format(job.spec.fmt), self.plan.gold_ranges[job.dataset])


@dataclass
class RunManifest:
    plan_digest: str
    phase: str
    job_count: int
    cached: int
    completed: int
    failed: int
    truncated: int
    config: dict
    seeds: dict
    endpoint: dict
    failure_rate: dict[str, float] = field(default_factory=dict)

    @property
    def residual_failure_rate(self) -> float:
        return self.failed / self.job_count if self.job_count else 0.0

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _cell_key(model: str, spec: PromptSpec, dataset: str) -> str:
    return "|".join([model, spec.base, spec.desc, spec.fmt, dataset])


def _batches(it, size):
    batch = []
    for x in it:
        batch.append(x)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def run(cfg: Config, plan_: RunPlan, generators: dict[str, Generator] | None = None) -> RunManifest:
    """Execute every job; cached ones are skipped. Endpoint failures are recorded, never fatal."""
    cache = RecordCache(cfg.cache_path)
    generators = generators or build_generators(cfg, cache)
    renderer = Renderer(cfg, plan_, build_demo_selector(cfg, plan_))
    cached = completed = failed = truncated = 0
    cell_total: dict[str, int] = {}
    cell_failed: dict[str, int] = {}
    for model in plan_.models:
        gen = generators[model]
        jobs = (j for j in plan_.jobs() if j.model == model)
        for batch in _batches(jobs, cfg.batch_size):
            requests = [renderer.request(j) for j in batch]
            contexts = [renderer.context(j) for j in batch]
            for job, (record, hit) in zip(batch, gen.generate_many(requests, contexts)):
                key = _cell_key(job.model, job.spec, job.dataset)
                cell_total[key] = cell_total.get(key, 0) + 1
                if hit:
                    cached += 1
                elif record.complete:
                    completed += 1
                else:
                    failed += 1
                    cell_failed[key] = cell_failed.get(key, 0) + 1
                truncated += record.status == "truncated"
    ep = asdict(cfg.endpoint)
    manifest = RunManifest(
        plan_digest=plan_.digest(),
        phase=plan_.phase,
        job_count=plan_.job_count,
        cached=cached,
        completed=completed,
        failed=failed,
        truncated=truncated,
        config=cfg.raw,
        seeds={"mock_seed": cfg.mock_seed, "analysis_seed": cfg.analysis.seed},
        endpoint={"base_url": ep["base_url"], "models": plan_.models, "route": ep["route"],
                  "max_tokens": ep["max_tokens"], "temperature": ep["temperature"]},
        failure_rate={k: cell_failed.get(k, 0) / n for k, n in sorted(cell_total.items())},
    )
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    manifest.write(cfg.output_dir / "run_manifest.json")
    if failed:
        log.warning("%d of %d jobs failed at the endpoint; rerun to retry them", failed, plan_.job_count)
    return manifest


# ---------------------------------------------------------------- evaluation

@dataclass
class CellResult:
    model: str
    dataset: str
    spec: PromptSpec
    values: list[float]
    origins: list[str | None]
    n_missing: int
    report: CorrelationReport | None
    flag: str | None = None

    @property
    def failure_rate(self) -> float:
        return self.n_missing / len(self.values) if self.values else 0.0


@dataclass
class Evaluation:
    cube: ResultCube
    cells: list[CellResult]
    golds: dict[str, list[float]]
    segment_ids: dict[str, list[str]]
    coverage: float

    @property
    def failure_rate(self) -> float:
        total = sum(len(c.values) for c in self.cells)
        missing = sum(c.n_missing for c in self.cells)
        return missing / total if total else 0.0

    def cell(self, model: str, dataset: str, spec: PromptSpec) -> CellResult:
        for c in self.cells:
            if c.model == model and c.dataset == dataset and c.spec.key == spec.key:
                return c
        raise KeyError((model, dataset, spec))


def score_group(raws: Sequence[str | None], extractor: Callable[[str | None], ExtractedScore], fallback: float,
                gold: Sequence[float], tie_max_candidates: int | None = None):
    """Extract, impute and correlate one prompt-template group.

    Returns (imputed group, report or None, flag). A constant score vector
    leaves the correlation undefined; the cell is then absent.
    """
    extracted = [extractor(r) if r is not None else MISSING for r in raws]
    group = impute_missing(extracted, fallback)
    try:
        report = correlation_report(group.values, gold, tie_max_candidates)
    except UndefinedCorrelation as exc:
        return group, None, f"degenerate: {exc}"
    return group, report, None


def empty_cube(plan_: RunPlan) -> ResultCube:
    axes = {
        "model": list(plan_.models),
        "task": [d.name for d in plan_.datasets],
        "base": list(dict.fromkeys(s.base for s in plan_.specs)),
        "desc": list(dict.fromkeys(s.desc for s in plan_.specs)),
        "fmt": list(dict.fromkeys(s.fmt for s in plan_.specs)),
    }
    return ResultCube(axes)


def evaluate(cfg: Config, plan_: RunPlan, cache: RecordCache | None = None, coverage: float | None = None) -> Evaluation:
    """Read generations back from the cache and build the cube of Kendall correlations."""
    cache = cache or RecordCache(cfg.cache_path)
    threshold = cfg.coverage if coverage is None else coverage
    renderer = Renderer(cfg, plan_, build_demo_selector(cfg, plan_))
    raws: dict[tuple, list[str | None]] = {}
    present = 0
    for job in plan_.jobs():
        rec = cache.get(renderer.request(job).params_hash)
        ok = rec is not None and rec.complete
        present += ok
        raws.setdefault((job.model, job.dataset, job.spec.key), []).append(rec.raw_output if ok else None)
    cov = present / plan_.job_count if plan_.job_count else 1.0
    if cov < threshold:
        raise CoverageError(f"only {present} of {plan_.job_count} jobs have a usable generation "
                            f"(coverage {cov:.4f} < {threshold}); finish the run or lower the threshold")
    cube = empty_cube(plan_)
    golds = {ds.name: [s.gold for s in plan_.segments[ds.name]] for ds in plan_.datasets}
    ids = {ds.name: [s.id for s in plan_.segments[ds.name]] for ds in plan_.datasets}
    cells = []
    for model in plan_.models:
        for ds in plan_.datasets:
            for spec in plan_.specs:
                fmt = plan_.catalog.format(spec.fmt)
                group, report, flag = score_group(raws[(model, ds.name, spec.key)],
                                                  lambda r, fmt=fmt: extract_score(r, fmt),
                                                  fmt.midpoint, golds[ds.name], cfg.tie_max_candidates)
                if flag:
                    log.warning("cell %s absent (%s)", _cell_key(model, spec, ds.name), flag)
                cells.append(CellResult(model, ds.name, spec, group.values, [s.origin for s in group.scores],
                                        group.n_missing, report, flag))
                cube.add(model, ds.name, spec.base, spec.desc, spec.fmt,
                         report.kendall if report else float("nan"))
    ev = Evaluation(cube, cells, golds, ids, cov)
    log.info("evaluation: %d cells, %d absent, extraction failure rate %.4f",
             len(cells), sum(c.report is None for c in cells), ev.failure_rate)
    return ev


def _fmt(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def write_evaluation(ev: Evaluation, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev.cube.write_tsv(out / "cube.tsv")
    with open(out / "correlations.tsv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["model", "dataset", "base", "desc", "fmt", "n", "kendall", "pearson", "spearman",
                    "tie_acc", "tie_epsilon", "failure_rate", "flag"])
        for c in ev.cells:
            r = c.report
            w.writerow([c.model, c.dataset, c.spec.base, c.spec.desc, c.spec.fmt, len(c.values),
                        _fmt(r and r.kendall), _fmt(r and r.pearson), _fmt(r and r.spearman),
                        _fmt(r and r.tie_acc), _fmt(r and r.tie_epsilon), repr(c.failure_rate), c.flag or ""])
    with open(out / "scores.tsv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["model", "dataset", "base", "desc", "fmt", "segment", "gold", "score", "origin"])
        for c in ev.cells:
            for sid, gold, value, origin in zip(ev.segment_ids[c.dataset], ev.golds[c.dataset], c.values, c.origins):
                w.writerow([c.model, c.dataset, c.spec.base, c.spec.desc, c.spec.fmt, sid, repr(gold),
                            repr(value), origin or ""])
    (out / "evaluation.json").write_text(json.dumps({
        "coverage": ev.coverage,
        "failure_rate": ev.failure_rate,
        "cells": len(ev.cells),
        "absent": [_cell_key(c.model, c.spec, c.dataset) for c in ev.cells if c.report is None],
    }, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- reports

def _write_rows(path: Path, header: Sequence[str], rows, comments: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def best_prompts(ev: Evaluation, catalog: Catalog, alpha: float = 0.075, n_perm: int = 1000,
                 seed: int = 0) -> list[dict]:
    """Best prompt per (model, task), with each task's significance cluster over models."""
    cube = ev.cube
    rows = []
    for task in cube.axes["task"]:
        winners: dict[str, CellResult] = {}
        for model in cube.axes["model"]:
            cands = [c for c in ev.cells if c.model == model and c.dataset == task and c.report is not None]
            if not cands:
                continue
            best = min(cands, key=lambda c: (-c.report.kendall,
                                             cube.order_key((model, task, c.spec.base, c.spec.desc, c.spec.fmt))))
            winners[model] = best
        cluster = None
        if len(winners) >= 2:
            cluster = significance_cluster({m: c.values for m, c in winners.items()}, ev.golds[task],
                                           alpha=alpha, n_perm=n_perm, seed=seed)
        for model, c in winners.items():
            fmt = catalog.format(c.spec.fmt)
            rows.append({
                "model": model, "task": task, "base": c.spec.base, "desc": c.spec.desc, "fmt": c.spec.fmt,
                "kind": "label" if fmt.is_labels else "numeric",
                "kendall": c.report.kendall,
                "cluster": "*" if cluster is None or model in cluster.members else "",
                "cluster_exclusive": "" if cluster is None else str(cluster.exclusive).lower(),
            })
    return rows


def coverage_counts(cube: ResultCube, dim: str) -> dict[str, int]:
    i = AXES.index(dim)
    counts = dict.fromkeys(cube.axes[dim], 0)
    for coord in cube.cells:
        counts[coord[i]] += 1
    return counts


def report(cube: ResultCube, analysis: AnalysisConfig, out_dir: str | Path, ev: Evaluation | None = None,
           catalog: Catalog | None = None) -> list[Path]:
    """Write all analysis tables for ``cube``. Output depends only on the cube, scores and seeds."""
    if not len(cube):
        raise CubeError("cube is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    catalog = catalog or builtin_catalog()
    written = []
    defs = [f"{k}: {v}" for k, v in AGGREGATOR_DEFINITIONS.items()]

    if ev is not None:
        rows = best_prompts(ev, catalog, analysis.cluster_alpha, analysis.n_perm, analysis.seed)
        path = out / "best_prompts.tsv"
        header = ["model", "task", "base", "desc", "fmt", "kind", "kendall", "cluster", "cluster_exclusive"]
        _write_rows(path, header, ([r[h] if h != "kendall" else repr(r[h]) for h in header] for r in rows),
                    [f"cluster: * marks models in the task's top significance cluster "
                     f"(alpha {analysis.cluster_alpha}, {analysis.n_perm} permutations, seed {analysis.seed})"])
        written.append(path)

    for rank_dim in analysis.rank_dims:
        counts = coverage_counts(cube, rank_dim)
        path = out / f"coverage_{rank_dim}.tsv"
        _write_rows(path, [rank_dim, "cells"], counts.items())
        written.append(path)
        for change_dim in analysis.change_dims:
            if change_dim == rank_dim or len(cube.axes[change_dim]) < 2 or len(cube.axes[rank_dim]) < 2:
                continue
            sm = stability_matrix(cube, rank_dim, change_dim, analysis.aggregator)
            path = out / f"stability_{rank_dim}_by_{change_dim}.tsv"
            _write_rows(path, ["row", "col", "value"], ((u, v, _fmt(x)) for u, v, x in sm.rows()),
                        [f"aggregator: {analysis.aggregator}", *defs])
            written.append(path)
        if len(cube.axes[rank_dim]) >= 2:
            comp = aggregator_comparison(cube, rank_dim, analysis.aggregators, analysis.n_perm,
                                         analysis.seed, analysis.comparison_alpha)
            path = out / f"aggregators_{rank_dim}.tsv"
            rows = []
            for i, a in enumerate(comp.aggregators):
                for j, b in enumerate(comp.aggregators):
                    rows.append([b, a, repr(float(comp.pvalues[i, j])), repr(float(comp.bonferroni[i, j])),
                                 str(bool(i != j and comp.bonferroni[i, j] <= comp.alpha)).lower()])
            _write_rows(path, ["row", "col", "p", "p_bonferroni", "significant"], rows,
                        [f"p: probability that col ranks {rank_dim} more stably than row",
                         f"bonferroni factor {comp.factor}; alpha {comp.alpha}; samples {comp.n_samples}",
                         *defs,
                         "mean stability: " + ", ".join(f"{k}={_fmt(v)}" for k, v in comp.mean_stability.items())])
            written.append(path)

    for pattern in analysis.top_patterns:
        shares = top_share(cube, pattern, analysis.top_quantile)
        path = out / f"top_share_{pattern}.tsv"
        rows = [("/".join(group), value, repr(share)) for group, dist in shares.items() for value, share in dist.items()]
        _write_rows(path, ["row", "col", "value"], rows,
                    [f"top {analysis.top_quantile:g} per task, rounded up; ties in catalog order"])
        written.append(path)

    manifest = out / "report_manifest.json"
    manifest.write_text(json.dumps({"analysis": asdict(analysis), "files": [p.name for p in written],
                                    "definitions": AGGREGATOR_DEFINITIONS}, indent=2) + "\n", encoding="utf-8")
    written.append(manifest)
    return written


# ---------------------------------------------------------------- presets

_SEVERITY = re.compile(r"^\s*(critical|major|minor)\s*:?\s*(.*)$", re.IGNORECASE)
_NO_ERROR = re.compile(r"^\s*(no[- ]error|none|n/a)\W*$", re.IGNORECASE)


@dataclass
class MQMExtractor:
    """Severity-weighted error counts from an annotation of the form::

        Critical:
        no-error
        Major:
        accuracy/mistranslation - "..."
        Minor:
        fluency/grammar - "..."

    Every non-empty line under a severity heading (or after it on the same
    line) counts as one error. Output without any heading yields no score.
    """

    weights: dict[str, float] = field(default_factory=lambda: {"minor": 1.0, "major": 5.0, "critical": 10.0})
    cap: float = -25.0

    def __call__(self, raw: str | None) -> ExtractedScore:
        if not raw:
            return MISSING
        current = None
        seen = False
        total = 0.0
        for line in raw.splitlines():
            m = _SEVERITY.match(line)
            if m:
                current, rest = m.group(1).lower(), m.group(2)
                seen = True
                if rest and not _NO_ERROR.match(rest):
                    total += self.weights[current]
                continue
            if current and line.strip() and not _NO_ERROR.match(line):
                total += self.weights[current]
        if not seen:
            return MISSING
        return ExtractedScore(max(self.cap, -total), "numeric_match", None)

    @property
    def midpoint(self) -> float:
        return self.cap / 2


@dataclass
class RegexExtractor:
    """Last match of ``pattern`` (its first group if any), clamped into ``value_range``."""

    pattern: str
    value_range: tuple[float, float]

    def __call__(self, raw: str | None) -> ExtractedScore:
        if not raw:
            return MISSING
        matches = list(re.finditer(self.pattern, raw))
        if not matches:
            return MISSING
        m = matches[-1]
        span = m.group(1) if m.groups() else m.group(0)
        try:
            value = float(span)
        except ValueError:
            return MISSING
        lo, hi = self.value_range
        if value < lo or value > hi:
            return ExtractedScore(min(hi, max(lo, value)), "clamped", span)
        return ExtractedScore(value, "numeric_match", span)

    @property
    def midpoint(self) -> float:
        return sum(self.value_range) / 2


def load_extractor(spec: dict | str | Path):
    """Build an extractor from a mapping (or a YAML file holding one).

    ``kind: mqm`` takes optional ``weights`` and ``cap``; ``kind: regex``
    takes ``pattern`` and ``range``.
    """
    if not isinstance(spec, dict):
        with open(spec, encoding="utf-8") as fh:
            spec = yaml.safe_load(fh) or {}
    spec = dict(spec)
    kind = spec.pop("kind", "mqm")
    if kind == "mqm":
        _check_keys("extractor", spec, {"weights", "cap"})
        ex = MQMExtractor()
        if "weights" in spec:
            weights = {k.lower(): float(v) for k, v in spec["weights"].items()}
            _check_keys("extractor.weights", weights, {"minor", "major", "critical"})
            ex.weights = {**ex.weights, **weights}
        if "cap" in spec:
            ex.cap = float(spec["cap"])
        return ex
    if kind == "regex":
        _check_keys("extractor", spec, {"pattern", "range"})
        lo, hi = spec["range"]
        return RegexExtractor(spec["pattern"], (float(lo), float(hi)))
    raise ConfigError(f"unknown extractor kind {kind!r}")


def render_preset(template: str, segment: Segment) -> str:
    from .templates import LANGUAGE_NAMES, default_result_type, default_task_insert

    src, _, tgt = segment.lang_pair.partition("-")
    values = {
        "src": segment.source,
        "hyp": segment.hypothesis,
        "source_lang": LANGUAGE_NAMES.get(src, src),
        "target_lang": LANGUAGE_NAMES.get(tgt, tgt),
        "result_type": default_result_type(segment.task),
        "task_specific_insert": default_task_insert(segment.task, segment.lang_pair),
    }
    try:
        return fill(template, values)
    except TemplateError as exc:
        raise ConfigError(f"preset template: {exc}") from None


@dataclass
class PresetResult:
    name: str
    model: str
    reports: dict[str, CorrelationReport | None]
    failure_rates: dict[str, float]
    values: dict[str, list[float]]


def preset_run(prompt_file: str | Path, extractor, datasets: Sequence[DatasetSpec], model: str,
               generator: Generator, max_missing: float = 0.1, name: str | None = None,
               endpoint: EndpointConfig | None = None, tie_max_candidates: int | None = None) -> PresetResult:
    """Score datasets with an external prompt preset and a declared extractor.

    Uses the same extraction, imputation and correlation path as the grid.
    Aborts when more than ``max_missing`` of a dataset's outputs yield no score.
    """
    prompt_file = Path(prompt_file)
    template = prompt_file.read_text(encoding="utf-8")
    extractor = extractor if callable(extractor) else load_extractor(extractor)
    ep = endpoint or EndpointConfig()
    name = name or prompt_file.stem
    reports, rates, values = {}, {}, {}
    for ds in datasets:
        segs = load_segments(ds)
        requests = [GenerationRequest(model, render_preset(template, s), ep.max_tokens, ep.temperature,
                                      tuple(ep.stop) if ep.stop else None, ep.route) for s in segs]
        records = generator.generate_many(requests, [None] * len(requests))
        raws = [rec.raw_output if rec.complete else None for rec, _ in records]
        gold = [s.gold for s in segs]
        group, rep, flag = score_group(raws, extractor, extractor.midpoint, gold, tie_max_candidates)
        if group.failure_rate > max_missing:
            sample = [r for r, s in zip(raws, group.scores) if s.origin == "imputed"][:3]
            raise ExtractionAbort(
                f"{name} on {ds.name}: {group.n_missing}/{len(raws)} outputs yielded no score "
                f"(> {max_missing:.0%}); sample outputs: {sample!r}")
        if flag:
            log.warning("%s on %s: %s", name, ds.name, flag)
        reports[ds.name] = rep
        rates[ds.name] = group.failure_rate
        values[ds.name] = group.values
    return PresetResult(name, model, reports, rates, values)


def write_preset(result: PresetResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"preset_{result.name}.tsv"
    rows = []
    for ds, r in result.reports.items():
        rows.append([result.model, ds, result.name, _fmt(r and r.kendall), _fmt(r and r.pearson),
                     _fmt(r and r.spearman), _fmt(r and r.tie_acc), repr(result.failure_rates[ds])])
    _write_rows(path, ["model", "dataset", "preset", "kendall", "pearson", "spearman", "tie_acc", "failure_rate"], rows)
    return path


def mean_kendall(ev: Evaluation) -> float:
    vals = [c.report.kendall for c in ev.cells if c.report is not None]
    return float(np.mean(vals)) if vals else float("nan")

