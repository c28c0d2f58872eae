"""Pull the predicted emotion out of free-form model output.

Tagged answers win. Models that ignore the answer-tag instruction fall back
to a lexicon scan over the whole response, resolved to the last mention.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .core import (
    DEFAULT_LEXICON,
    EmotionLabel,
    ExtractionMethod,
    Lexicon,
    parse_label,
)

NEGATORS = frozenset({"not", "no", "never", "without", "isn't", "isnt", "doesn't", "doesnt", "nor", "neither"})
NEGATION_WINDOW = 3


@dataclass(frozen=True)
class ExtractionResult:
    label: EmotionLabel | None
    method: ExtractionMethod
    matched_span: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if (self.method is ExtractionMethod.FAILED) != (self.label is None):
            raise ValueError("method is 'failed' exactly when no label was found")
        if (self.matched_span is None) != (self.label is None):
            raise ValueError("matched_span is present exactly when a label was found")


FAILED = ExtractionResult(None, ExtractionMethod.FAILED, None)


@lru_cache(maxsize=64)
def _tag_patterns(tag: str) -> tuple[re.Pattern[str], re.Pattern[str]]:
    t = re.escape(tag)
    return re.compile(f"<{t}>", re.IGNORECASE), re.compile(f"</{t}>", re.IGNORECASE)


def tagged_span(text: str, tag: str) -> tuple[int, int] | None:
    """Offsets of the content of the last well-formed ``<tag>...</tag>`` pair."""
    open_re, close_re = _tag_patterns(tag)
    closes = [m.start() for m in close_re.finditer(text)]
    if not closes:
        return None
    last_open = None
    for m in open_re.finditer(text, 0, closes[-1]):
        last_open = m
    if last_open is None:
        return None
    start = last_open.end()
    # the latest opener paired with its nearest closer
    end = next(c for c in closes if c >= start)
    return start, end


def extract_tagged(text: str, tag_name: str) -> str | None:
    span = tagged_span(text, tag_name)
    return None if span is None else text[span[0]:span[1]]


_WORD = re.compile(r"[^\W_]+(?:'[^\W_]+)?")
_CLAUSE_END = re.compile(r"[.,;:!?\n]")


def _negated(text: str, start: int) -> bool:
    """A negator among the few words before ``start`` within the same clause."""
    window = _CLAUSE_END.split(text[max(0, start - 60):start])[-1]
    preceding = _WORD.findall(window.lower())
    return any(w in NEGATORS for w in preceding[-NEGATION_WINDOW:])


def fallback_match(
    text: str,
    candidates: Sequence[EmotionLabel],
    lexicon: Lexicon | None = None,
    *,
    negation: bool = False,
) -> ExtractionResult:
    """Last word-boundary lexicon hit among candidate labels and their synonyms."""
    lex = lexicon or DEFAULT_LEXICON
    last = None
    for m in lex.pattern(candidates).finditer(text):
        if negation and _negated(text, m.start()):
            continue
        last = m
    if last is None:
        return FAILED
    label = lex.label_of(last.group(0))
    return ExtractionResult(label, ExtractionMethod.FALLBACK, last.span())


def extract_answer(
    text: str,
    candidates: Sequence[EmotionLabel],
    lexicon: Lexicon | None = None,
    *,
    negation: bool = False,
) -> ExtractionResult:
    """Resolve a response to one candidate label; never raises on string input.

    Non-string input (e.g. raw bytes) is decoded as UTF-8 with replacement.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    span = tagged_span(text, "answer")
    if span is not None:
        label = parse_label(text[span[0]:span[1]], candidates, lexicon)
        if label is not None:
            return ExtractionResult(label, ExtractionMethod.TAGGED, span)
    return fallback_match(text, candidates, lexicon, negation=negation)
