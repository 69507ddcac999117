"""Command line entry point: ``promptsweep <subcommand> -c config.yaml``.

Exit codes: 0 success, 1 validation error, 2 residual failures above threshold.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .dataset import DatasetError
from .demos import DemoError
from .inference import RecordCache
from .stability import AGGREGATORS, AXES, CubeError, ResultCube, stability_matrix
from .templates import TemplateError

log = logging.getLogger("promptsweep")

VALIDATION_ERRORS = (pipeline.ConfigError, DatasetError, TemplateError, CubeError, DemoError, FileNotFoundError)


class ResidualFailures(RuntimeError):
    pass


def _load(args) -> pipeline.Config:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.Config()
    if args.output_dir:
        cfg.output_dir = Path(args.output_dir)
    if args.cache_dir:
        cfg.cache_dir = Path(args.cache_dir)
    if args.phase:
        cfg.phase = args.phase
    if args.spec_file:
        cfg.spec_file = Path(args.spec_file)
    if args.coverage is not None:
        cfg.coverage = args.coverage
    if args.mock_sigma is not None:
        cfg.mock_sigma = args.mock_sigma
    if args.concurrency is not None:
        cfg.endpoint.concurrency = args.concurrency
    if args.seed is not None:
        cfg.analysis.seed = args.seed
    if args.n_perm is not None:
        cfg.analysis.n_perm = args.n_perm
    return cfg


def cmd_plan(args) -> int:
    cfg = _load(args)
    p = pipeline.plan(cfg)
    summary = {"phase": p.phase, "job_count": p.job_count, "specs": len(p.specs), "models": p.models,
               "segments": p.segment_counts, "digest": p.digest()}
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "plan.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    p = pipeline.plan(cfg)
    m = pipeline.run(cfg, p)
    print(f"jobs {m.job_count}: cached {m.cached}, completed {m.completed}, failed {m.failed}, "
          f"truncated {m.truncated}")
    if m.residual_failure_rate > cfg.max_failure_rate:
        raise ResidualFailures(f"{m.failed} jobs failed (rate {m.residual_failure_rate:.4f} > "
                               f"{cfg.max_failure_rate}); rerun to retry them")
    return 0


def _evaluate(cfg):
    p = pipeline.plan(cfg)
    try:
        ev = pipeline.evaluate(cfg, p, RecordCache(cfg.cache_path))
    except pipeline.CoverageError as exc:
        raise ResidualFailures(str(exc)) from None
    return p, ev


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    _, ev = _evaluate(cfg)
    pipeline.write_evaluation(ev, cfg.output_dir / "eval")
    absent = sum(c.report is None for c in ev.cells)
    print(f"{len(ev.cells)} cells ({absent} absent); extraction failure rate {ev.failure_rate:.4f}")
    return 0


def _cube_path(args, cfg) -> Path:
    return Path(args.cube) if args.cube else cfg.output_dir / "eval" / "cube.tsv"


def cmd_select(args) -> int:
    cfg = _load(args)
    cube = ResultCube.read_tsv(_cube_path(args, cfg))
    out = Path(args.out) if args.out else cfg.output_dir / "phase2_specs.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    specs = pipeline.write_spec_file(out, cube, cfg.analysis.model_reduce)
    for s in specs:
        print(f"{s.base}\t{s.desc}\t{s.fmt}")
    return 0


def cmd_stability(args) -> int:
    cfg = _load(args)
    cube = ResultCube.read_tsv(_cube_path(args, cfg))
    sm = stability_matrix(cube, args.rank_dim, args.change_dim, args.aggregator or cfg.analysis.aggregator)
    out = Path(args.out) if args.out else cfg.output_dir / f"stability_{args.rank_dim}_by_{args.change_dim}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline._write_rows(out, ["row", "col", "value"], ((u, v, pipeline._fmt(x)) for u, v, x in sm.rows()),
                         [f"aggregator: {sm.aggregator}"])
    print(out)
    return 0


def cmd_report(args) -> int:
    cfg = _load(args)
    if args.cube:
        cube, ev, catalog = ResultCube.read_tsv(args.cube), None, pipeline.build_catalog(cfg)
    else:
        p, ev = _evaluate(cfg)
        cube, catalog = ev.cube, p.catalog
    out = Path(args.out) if args.out else cfg.output_dir / "report"
    for path in pipeline.report(cube, cfg.analysis, out, ev, catalog):
        print(path)
    return 0


def cmd_preset_run(args) -> int:
    cfg = _load(args)
    model = args.model or (cfg.models[0].id if cfg.models else None)
    if model is None:
        raise pipeline.ConfigError("preset-run needs --model or a configured model")
    cache = RecordCache(cfg.cache_path)
    gens = pipeline.build_generators(cfg, cache)
    if model not in gens:
        raise pipeline.ConfigError(f"model {model!r} is not configured")
    try:
        result = pipeline.preset_run(args.prompt_file, pipeline.load_extractor(args.extractor), cfg.datasets, model,
                                     gens[model], args.max_missing, endpoint=cfg.endpoint,
                                     tie_max_candidates=cfg.tie_max_candidates)
    except pipeline.ExtractionAbort as exc:
        raise ResidualFailures(str(exc)) from None
    print(pipeline.write_preset(result, cfg.output_dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptsweep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML configuration file")
    common.add_argument("--output-dir")
    common.add_argument("--cache-dir")
    common.add_argument("--phase", choices=pipeline.PHASES)
    common.add_argument("--spec-file", help="prompt list to run instead of the grid")
    common.add_argument("--coverage", type=float, help="minimum share of jobs with a generation")
    common.add_argument("--mock-sigma", type=float)
    common.add_argument("--concurrency", type=int)
    common.add_argument("--seed", type=int, help="analysis seed")
    common.add_argument("--n-perm", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("plan", parents=[common], help="enumerate jobs").set_defaults(func=cmd_plan)
    sub.add_parser("run", parents=[common], help="generate (resumable)").set_defaults(func=cmd_run)
    sub.add_parser("evaluate", parents=[common], help="extract scores and correlate").set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select", parents=[common], help="choose phase-2 prompts from a cube")
    p.add_argument("--cube")
    p.add_argument("--out")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("stability", parents=[common], help="one stability matrix")
    p.add_argument("--cube")
    p.add_argument("--rank-dim", choices=AXES, required=True)
    p.add_argument("--change-dim", choices=AXES, required=True)
    p.add_argument("--aggregator", choices=sorted(AGGREGATORS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("report", parents=[common], help="all analysis tables")
    p.add_argument("--cube", help="report on a saved cube (no best-prompt table)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("preset-run", parents=[common], help="evaluate an external prompt preset")
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--extractor", required=True, help="YAML extractor declaration")
    p.add_argument("--model")
    p.add_argument("--max-missing", type=float, default=0.1)
    p.set_defaults(func=cmd_preset_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ResidualFailures as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
