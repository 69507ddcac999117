"""Hierarchical prompt templates: catalog loading, grid expansion and rendering.

A prompt is assembled from a base prompt, a task description and a format
requirement. The built-in catalog ships as plain-text bodies plus a JSON
manifest under ``promptsweep/catalog`` so presets can be added without
touching code.
"""

from __future__ import annotations

import json
import math
import re
import shutil
from dataclasses import dataclass, field
from importlib import resources
from functools import lru_cache
from itertools import product
from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .dataset import Segment
    from .demos import Demonstration

ZS_BASES = ("PZS", "ZS_COT", "ZS_COT_EM")
OS_BASES = ("POS", "OS_COT", "OS_COT_EM")
OS_COUNTERPART = dict(zip(ZS_BASES, OS_BASES)) | dict(zip(OS_BASES, ZS_BASES))

BASE_PLACEHOLDERS = {"task_description", "src", "result_type", "hyp", "format_requirement"}
DEMO_PLACEHOLDERS = {"ex1_src", "ex1_hyp", "ex1_score"}
FORMAT_KINDS = ("discrete_range", "continuous_range", "labels")

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

LANGUAGE_NAMES = {
    "en": "English", "de": "German", "zh": "Chinese", "es": "Spanish", "he": "Hebrew",
    "fr": "French", "ru": "Russian", "ja": "Japanese", "cs": "Czech", "uk": "Ukrainian",
}


class TemplateError(ValueError):
    pass


def placeholders(text: str) -> list[str]:
    return _PLACEHOLDER.findall(text)


def fill(template: str, values: dict[str, str]) -> str:
    """Substitute ``{name}`` markers in one pass.

    Inserted values are never rescanned, so segment text containing braces
    passes through verbatim. Any marker without a value raises.
    """
    missing = [name for name in placeholders(template) if name not in values]
    if missing:
        raise TemplateError(f"unresolved placeholder(s): {sorted(set(missing))}")
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


@dataclass(frozen=True)
class BasePrompt:
    id: str
    body: str
    one_shot: bool

    def __post_init__(self):
        names = set(placeholders(self.body))
        allowed = BASE_PLACEHOLDERS | (DEMO_PLACEHOLDERS if self.one_shot else set())
        if not names <= allowed:
            raise TemplateError(f"base {self.id}: unexpected placeholders {sorted(names - allowed)}")
        if self.one_shot and not DEMO_PLACEHOLDERS <= names:
            raise TemplateError(f"base {self.id}: one-shot body must contain {sorted(DEMO_PLACEHOLDERS)}")


@dataclass(frozen=True)
class TaskDescription:
    id: str
    body: str
    flag: str | None = None

    def __post_init__(self):
        if self.flag is None and self.body.count("{task_specific_insert}") != 1:
            raise TemplateError(f"description {self.id}: needs exactly one {{task_specific_insert}}")


@dataclass(frozen=True)
class FormatRequirement:
    id: str
    body: str
    kind: str
    numeric_range: tuple[float, float] | None = None
    label_set: tuple[str, ...] | None = None
    label_values: dict[str, float] | None = field(default=None, hash=False)

    def __post_init__(self):
        if self.kind not in FORMAT_KINDS:
            raise TemplateError(f"format {self.id}: unknown kind {self.kind!r}")
        if self.kind == "labels":
            if not self.label_set or self.label_values is None:
                raise TemplateError(f"format {self.id}: label formats need label_set and label_values")
            if set(self.label_values) != set(self.label_set):
                raise TemplateError(f"format {self.id}: label_values must cover label_set exactly")
        else:
            if self.label_set:
                raise TemplateError(f"format {self.id}: numeric formats take no labels")
            if self.numeric_range is None or not self.numeric_range[0] < self.numeric_range[1]:
                raise TemplateError(f"format {self.id}: numeric_range must satisfy lo < hi")

    @property
    def is_labels(self) -> bool:
        return self.kind == "labels"

    @property
    def value_range(self) -> tuple[float, float]:
        """Range of the numeric values this format's answers map to."""
        if self.is_labels:
            vals = self.label_values.values()
            return float(min(vals)), float(max(vals))
        return self.numeric_range

    @property
    def midpoint(self) -> float:
        lo, hi = self.value_range
        return (lo + hi) / 2


@dataclass(frozen=True, order=True)
class PromptSpec:
    base: str
    desc: str
    fmt: str
    one_shot: bool = False
    result_type: str | None = None
    task_insert: str | None = None

    def __post_init__(self):
        if self.one_shot != (self.base in OS_BASES):
            raise TemplateError(f"one_shot={self.one_shot} does not match base {self.base}")

    @property
    def key(self) -> tuple[str, str, str, bool]:
        return (self.base, self.desc, self.fmt, self.one_shot)


@dataclass
class Catalog:
    bases: dict[str, BasePrompt]
    descriptions: dict[str, TaskDescription]
    formats: dict[str, FormatRequirement]
    aliases: dict[str, str] = field(default_factory=dict)

    @property
    def zs_bases(self) -> list[str]:
        return [b for b, p in self.bases.items() if not p.one_shot]

    @property
    def os_bases(self) -> list[str]:
        return [b for b, p in self.bases.items() if p.one_shot]

    def resolve(self, name: str) -> str:
        return self.aliases.get(name, name)

    def base(self, name: str) -> BasePrompt:
        return self.bases[self.resolve(name)]

    def description(self, name: str) -> TaskDescription:
        return self.descriptions[self.resolve(name)]

    def format(self, name: str) -> FormatRequirement:
        return self.formats[self.resolve(name)]

    def sizes(self) -> tuple[int, int, int, int]:
        return len(self.zs_bases), len(self.os_bases), len(self.descriptions), len(self.formats)

    def export(self, directory: str | Path) -> Path:
        """Write this catalog as text bodies plus ``manifest.json``."""
        directory = Path(directory)
        manifest: dict = {"bases": [], "descriptions": [], "formats": [], "aliases": self.aliases}
        for sub in ("bases", "descriptions", "formats"):
            (directory / sub).mkdir(parents=True, exist_ok=True)
        for i, b in enumerate(self.bases.values()):
            rel = f"bases/{i:02d}.txt"
            (directory / rel).write_text(b.body, encoding="utf-8")
            manifest["bases"].append({"id": b.id, "file": rel, "one_shot": b.one_shot})
        for i, d in enumerate(self.descriptions.values()):
            rel = f"descriptions/{i:02d}.txt"
            (directory / rel).write_text(d.body, encoding="utf-8")
            entry = {"id": d.id, "file": rel}
            if d.flag:
                entry["flag"] = d.flag
            manifest["descriptions"].append(entry)
        for i, f in enumerate(self.formats.values()):
            rel = f"formats/{i:02d}.txt"
            (directory / rel).write_text(f.body, encoding="utf-8")
            entry = {"id": f.id, "file": rel, "kind": f.kind}
            if f.numeric_range is not None:
                entry["numeric_range"] = list(f.numeric_range)
            if f.label_set:
                entry["label_set"] = list(f.label_set)
                entry["label_values"] = dict(f.label_values)
            manifest["formats"].append(entry)
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path


def _read_body(root, rel: str) -> str:
    with (root / rel).open("r", encoding="utf-8", newline="") as fh:
        return fh.read()


def _catalog_from(root) -> Catalog:
    with (root / "manifest.json").open("r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    bases = {}
    for e in manifest.get("bases", []):
        bases[e["id"]] = BasePrompt(e["id"], _read_body(root, e["file"]), bool(e.get("one_shot", False)))
    descs = {}
    for e in manifest.get("descriptions", []):
        descs[e["id"]] = TaskDescription(e["id"], _read_body(root, e["file"]), e.get("flag"))
    fmts = {}
    for e in manifest.get("formats", []):
        rng = e.get("numeric_range")
        labels = e.get("label_set")
        values = e.get("label_values")
        fmts[e["id"]] = FormatRequirement(
            id=e["id"],
            body=_read_body(root, e["file"]),
            kind=e["kind"],
            numeric_range=(float(rng[0]), float(rng[1])) if rng is not None else None,
            label_set=tuple(labels) if labels else None,
            label_values={k: float(v) for k, v in values.items()} if values else None,
        )
    return Catalog(bases, descs, fmts, dict(manifest.get("aliases", {})))


def load_catalog(directory: str | Path) -> Catalog:
    return _catalog_from(Path(directory))


@lru_cache(maxsize=1)
def builtin_catalog() -> Catalog:
    """The shipped catalog; shared, treat as read-only."""
    return _catalog_from(resources.files("promptsweep") / "catalog")


def merge_catalogs(base: Catalog, extra: Catalog) -> Catalog:
    """Overlay user presets on top of ``base``; ids in ``extra`` win."""
    return Catalog(
        {**base.bases, **extra.bases},
        {**base.descriptions, **extra.descriptions},
        {**base.formats, **extra.formats},
        {**base.aliases, **extra.aliases},
    )


def copy_builtin_catalog(directory: str | Path) -> Path:
    """Copy the shipped catalog files verbatim, as a starting point for presets."""
    src = resources.files("promptsweep") / "catalog"
    with resources.as_file(src) as path:
        shutil.copytree(path, directory, dirs_exist_ok=True)
    return Path(directory)


def expand_grid(bases, descs, fmts, one_shot: bool = False) -> list[PromptSpec]:
    """Cartesian product of template ids, base-major then description then format.

    Zero-shot base ids given with ``one_shot=True`` are mapped to their
    one-shot counterparts (and vice versa).
    """
    bases, descs, fmts = list(bases), list(descs), list(fmts)
    if not (bases and descs and fmts):
        raise TemplateError("expand_grid needs non-empty bases, descriptions and formats")
    specs = []
    seen = set()
    for b, d, f in product(bases, descs, fmts):
        if (b in OS_BASES) != one_shot:
            b = OS_COUNTERPART[b]
        spec = PromptSpec(b, d, f, one_shot)
        if spec.key in seen:
            continue
        seen.add(spec.key)
        specs.append(spec)
    return specs


def default_result_type(task: str) -> str:
    return "Translation" if task == "mt" else "Summary"


def default_task_insert(task: str, lang_pair: str = "") -> str:
    if task != "mt":
        return "summary"
    src, _, tgt = lang_pair.partition("-")
    src_name = LANGUAGE_NAMES.get(src, src)
    tgt_name = LANGUAGE_NAMES.get(tgt, tgt)
    return fill("translation from {src_lang} to {tgt_lang}", {"src_lang": src_name, "tgt_lang": tgt_name})


def _values(spec: PromptSpec, catalog: Catalog, segment: Segment, demo, src: str, hyp: str) -> dict[str, str]:
    result_type = spec.result_type or default_result_type(segment.task)
    task_insert = spec.task_insert or default_task_insert(segment.task, segment.lang_pair)
    if "{" in task_insert:
        task_insert = fill(task_insert, {
            "src_lang": LANGUAGE_NAMES.get(segment.lang_pair.partition("-")[0], ""),
            "tgt_lang": LANGUAGE_NAMES.get(segment.lang_pair.partition("-")[2], ""),
        })
    fmt = catalog.format(spec.fmt)
    values = {
        "task_description": fill(catalog.description(spec.desc).body, {"task_specific_insert": task_insert}),
        "format_requirement": fill(fmt.body, {"result_type": result_type}),
        "result_type": result_type,
        "src": src,
        "hyp": hyp,
    }
    if demo is not None:
        from .demos import format_demo_score

        values["ex1_src"] = demo.src
        values["ex1_hyp"] = demo.hyp
        values["ex1_score"] = demo.score_text if demo.score_text is not None else format_demo_score(
            demo.gold, demo.gold_range, fmt
        )
    return values


def render_guarded(
    spec: PromptSpec,
    segment: Segment,
    demo: Demonstration | None = None,
    catalog: Catalog | None = None,
    max_chars: int | None = None,
) -> tuple[str, bool]:
    """Render a prompt, trimming source and hypothesis if it exceeds ``max_chars``.

    Returns the text and whether trimming happened. Both texts lose characters
    from their ends in proportion to their lengths.
    """
    catalog = catalog or builtin_catalog()
    if spec.one_shot and demo is None:
        raise TemplateError(f"one-shot spec {spec.base} needs a demonstration")
    if not spec.one_shot and demo is not None:
        raise TemplateError(f"zero-shot spec {spec.base} takes no demonstration")
    template = catalog.base(spec.base).body
    src, hyp = segment.source, segment.hypothesis
    text = fill(template, _values(spec, catalog, segment, demo, src, hyp))
    if max_chars is None or len(text) <= max_chars:
        return text, False
    overflow = len(text) - max_chars
    total = len(src) + len(hyp)
    if overflow > total:
        raise TemplateError(f"prompt exceeds budget of {max_chars} chars even without source and hypothesis")
    cut_src = math.ceil(overflow * len(src) / total)
    cut_hyp = overflow - cut_src
    if cut_hyp > len(hyp):
        cut_src += cut_hyp - len(hyp)
        cut_hyp = len(hyp)
    src, hyp = src[: len(src) - cut_src], hyp[: len(hyp) - cut_hyp]
    return fill(template, _values(spec, catalog, segment, demo, src, hyp)), True


def render(
    spec: PromptSpec,
    segment: Segment,
    demo: Demonstration | None = None,
    catalog: Catalog | None = None,
    max_chars: int | None = None,
) -> str:
    return render_guarded(spec, segment, demo, catalog, max_chars)[0]
