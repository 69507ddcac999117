"""Segment-level evaluation data: loading, validation and phase subsets."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import yaml

log = logging.getLogger(__name__)

TASKS = ("mt", "summarization")
SPLITS = ("train", "dev", "test", "test2")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    id: str
    task: str
    lang_pair: str
    source: str
    hypothesis: str
    gold: float
    split: str = "train"

    def __post_init__(self):
        if self.task not in TASKS:
            raise DatasetError(f"unknown task {self.task!r}")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        if not self.source or not self.hypothesis:
            raise DatasetError(f"segment {self.id}: empty source or hypothesis")
        if not math.isfinite(self.gold):
            raise DatasetError(f"segment {self.id}: gold must be finite")
        if self.task == "mt" and not self.lang_pair:
            raise DatasetError(f"segment {self.id}: mt segments need a lang_pair")


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset lives and how to read it.

    ``expected_count`` is checked after rows without a usable gold score
    have been dropped.
    """

    name: str
    path: Path
    task: str
    lang_pair: str = ""
    split: str = "train"
    gold_column: str = "gold"
    source_column: str = "source"
    hypothesis_column: str = "hypothesis"
    id_column: str | None = None
    expected_count: int | None = None
    gold_range: tuple[float, float] | None = None

    @property
    def key(self) -> str:
        return self.name


@dataclass
class LoadReport:
    loaded: int
    dropped: int
    dropped_rows: list[int] = field(default_factory=list)


_MANIFEST_KEYS = {
    "name", "path", "task", "lang_pair", "split", "gold_column", "source_column",
    "hypothesis_column", "id_column", "expected_count", "gold_range",
}


def spec_from_dict(entry: dict, base_dir: Path | None = None) -> DatasetSpec:
    unknown = set(entry) - _MANIFEST_KEYS
    if unknown:
        raise DatasetError(f"unknown dataset keys: {sorted(unknown)}")
    for key in ("name", "path", "task"):
        if key not in entry:
            raise DatasetError(f"dataset entry missing {key!r}")
    entry = dict(entry)
    path = Path(entry.pop("path"))
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    if entry.get("gold_range") is not None:
        lo, hi = entry["gold_range"]
        entry["gold_range"] = (float(lo), float(hi))
    return DatasetSpec(path=path, **entry)


def load_manifest(path: str | Path) -> list[DatasetSpec]:
    """Read a YAML dataset manifest: a ``datasets`` list of DatasetSpec entries.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    entries = doc.get("datasets", doc) if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise DatasetError(f"{path}: expected a list of datasets")
    return [spec_from_dict(e, path.parent) for e in entries]


def _parse_gold(raw: str | None) -> float | None:
    if raw is None:
        return None
    raw = raw.strip()
    if not raw:
        return None
    try:
        value = float(raw)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_segments_with_report(spec: DatasetSpec) -> tuple[list[Segment], LoadReport]:
    path = Path(spec.path)
    if not path.is_file():
        raise DatasetError(f"{spec.name}: missing file {path}")
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            header = reader.fieldnames or []
            required = [spec.source_column, spec.hypothesis_column, spec.gold_column]
            if spec.id_column:
                required.append(spec.id_column)
            missing = [c for c in required if c not in header]
            if missing:
                raise DatasetError(f"{spec.name}: missing required column(s) {missing}")
            segments: list[Segment] = []
            dropped: list[int] = []
            for idx, row in enumerate(reader):
                gold = _parse_gold(row.get(spec.gold_column))
                src = row.get(spec.source_column) or ""
                hyp = row.get(spec.hypothesis_column) or ""
                if gold is None or not src or not hyp:
                    dropped.append(idx)
                    continue
                seg_id = row[spec.id_column] if spec.id_column else f"{spec.name}:{idx}"
                segments.append(
                    Segment(
                        id=seg_id,
                        task=spec.task,
                        lang_pair=spec.lang_pair,
                        source=src,
                        hypothesis=hyp,
                        gold=gold,
                        split=spec.split,
                    )
                )
    except UnicodeDecodeError as exc:
        raise DatasetError(f"{spec.name}: {path} is not valid UTF-8 ({exc})") from exc

    if dropped:
        log.info("%s: dropped %d row(s) without usable gold: %s", spec.name, len(dropped), dropped)
    if not segments:
        raise DatasetError(f"{spec.name}: zero surviving rows")
    if spec.expected_count is not None and len(segments) != spec.expected_count:
        raise DatasetError(
            f"{spec.name}: expected {spec.expected_count} rows, loaded {len(segments)}"
        )
    return segments, LoadReport(loaded=len(segments), dropped=len(dropped), dropped_rows=dropped)


def load_segments(spec: DatasetSpec) -> list[Segment]:
    return load_segments_with_report(spec)[0]


def write_segments(path: str | Path, segments: Iterable[Segment]) -> None:
    """Write segments as TSV with columns readable by a default DatasetSpec plus ``id``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "source", "hypothesis", "gold"])
        for seg in segments:
            writer.writerow([seg.id, seg.source, seg.hypothesis, repr(seg.gold)])


def seahorse_score(q1_positive: bool, rest_positive: Sequence[bool]) -> float:
    """Collapse six yes/no quality answers into one score in [0, 1].

    A negative first answer zeroes the score; otherwise every positive
    answer among the remaining five adds 0.2.
    """
    if len(rest_positive) != 5:
        raise ValueError("expected five answers after the first")
    if not q1_positive:
        return 0.0
    return round(0.2 * sum(bool(q) for q in rest_positive), 10)


def phase1_subset(segments: Sequence[Segment], per_lang_limit: int = 500) -> list[Segment]:
    """Keep the first ``per_lang_limit`` segments of every MT language pair.

    Summarization segments pass through untouched and input order is kept.
    """
    if per_lang_limit <= 0:
        raise ValueError("per_lang_limit must be positive")
    seen: dict[str, int] = {}
    kept = []
    for seg in segments:
        if seg.task == "mt":
            count = seen.get(seg.lang_pair, 0)
            if count >= per_lang_limit:
                continue
            seen[seg.lang_pair] = count + 1
        kept.append(seg)
    return kept
