"""Score extraction from raw generations, and imputation of missing scores."""

from __future__ import annotations

import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from functools import lru_cache

from .templates import FormatRequirement

ORIGINS = ("numeric_match", "label_match", "imputed", "clamped")

# Optional sign (only when not glued to a preceding word, so "1-5" is 1 and 5),
# digits, optional decimal part. Thousands separators are not recognized.
NUMBER = re.compile(r"(?:(?<![\w])[-+])?\d+(?:\.\d+)?")


@dataclass(frozen=True)
class ExtractedScore:
    value: float | None
    origin: str | None = None
    raw_span: str | None = None

    @property
    def missing(self) -> bool:
        return self.value is None


MISSING = ExtractedScore(None)


@lru_cache(maxsize=64)
def _label_pattern(labels: tuple[str, ...]) -> re.Pattern:
    alternatives = sorted(labels, key=len, reverse=True)
    return re.compile(r"\b(" + "|".join(map(re.escape, alternatives)) + r")\b", re.IGNORECASE)


def extract_score(raw: str | None, fmt: FormatRequirement) -> ExtractedScore:
    """Take the last number (or label word) in ``raw`` as the score.

    Label formats only look for their label words, case-insensitively, and
    map the last one found through ``fmt.label_values``. Numeric formats take
    the last number and clamp it into the format's range.
    """
    if not raw:
        return MISSING
    if fmt.is_labels:
        matches = _label_pattern(tuple(fmt.label_set)).findall(raw)
        if not matches:
            return MISSING
        span = matches[-1]
        canonical = {label.lower(): label for label in fmt.label_set}[span.lower()]
        return ExtractedScore(float(fmt.label_values[canonical]), "label_match", span)
    matches = NUMBER.findall(raw)
    if not matches:
        return MISSING
    span = matches[-1]
    value = float(span)
    lo, hi = fmt.numeric_range
    if value < lo or value > hi:
        return ExtractedScore(min(hi, max(lo, value)), "clamped", span)
    return ExtractedScore(value, "numeric_match", span)


@dataclass
class ImputedGroup:
    scores: list[ExtractedScore]
    n_missing: int

    @property
    def failure_rate(self) -> float:
        return self.n_missing / len(self.scores) if self.scores else 0.0

    @property
    def values(self) -> list[float]:
        return [s.value for s in self.scores]


def impute_missing(scores: Sequence[ExtractedScore], fallback: float) -> ImputedGroup:
    """Fill absent scores of one prompt-template group with the group mean.

    A group with no scores at all falls back to ``fallback``, normally the
    midpoint of the format's value range.
    """
    present = [s.value for s in scores if s.value is not None]
    n_missing = len(scores) - len(present)
    if not n_missing:
        return ImputedGroup(list(scores), 0)
    fill = sum(present) / len(present) if present else fallback
    completed = [s if s.value is not None else ExtractedScore(fill, "imputed") for s in scores]
    return ImputedGroup(completed, n_missing)


def impute_groups(groups: Mapping, formats: Mapping) -> dict:
    """Impute every group; ``formats`` maps each group key to its FormatRequirement
    (or directly to a fallback value)."""
    out = {}
    for key, scores in groups.items():
        fmt = formats[key]
        fallback = fmt.midpoint if isinstance(fmt, FormatRequirement) else float(fmt)
        out[key] = impute_missing(scores, fallback)
    return out


def failure_rate(scores: Iterable[ExtractedScore]) -> float:
    total = missing = 0
    for s in scores:
        total += 1
        missing += s.value is None
    return missing / total if total else 0.0


def aggregate_failure_rate(groups: Iterable[ImputedGroup]) -> float:
    total = missing = 0
    for g in groups:
        total += len(g.scores)
        missing += g.n_missing
    return missing / total if total else 0.0
