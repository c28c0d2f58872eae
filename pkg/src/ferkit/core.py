"""Label vocabulary, per-dataset candidate sets, and the record types every stage passes around."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import InvalidRecord


class EmotionLabel(str, Enum):
    ANGER = "anger"
    CONTEMPT = "contempt"
    DISGUST = "disgust"
    FEAR = "fear"
    HAPPINESS = "happiness"
    NEUTRAL = "neutral"
    SADNESS = "sadness"
    SURPRISE = "surprise"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, raw: str) -> "EmotionLabel":
        """Strict canonical-token parse (case-insensitive, trimmed). Raises ValueError."""
        return cls(raw.strip().lower())


CANONICAL_ORDER: tuple[EmotionLabel, ...] = tuple(EmotionLabel)
_RANK = {label: i for i, label in enumerate(CANONICAL_ORDER)}


class DatasetId(str, Enum):
    RAFDB = "rafdb"
    FERPLUS = "ferplus"
    AFFECTNET = "affectnet"
    SFEW2 = "sfew2"

    def __str__(self) -> str:
        return self.value


def canonical_sort(labels: Iterable[EmotionLabel | str]) -> tuple[EmotionLabel, ...]:
    """Deduplicate and order labels canonically."""
    return tuple(sorted({EmotionLabel(l) for l in labels}, key=_RANK.__getitem__))


_SEVEN = tuple(l for l in CANONICAL_ORDER if l is not EmotionLabel.CONTEMPT)

DEFAULT_LABEL_SETS: dict[DatasetId, tuple[EmotionLabel, ...]] = {
    DatasetId.RAFDB: _SEVEN,
    DatasetId.FERPLUS: CANONICAL_ORDER,
    DatasetId.AFFECTNET: CANONICAL_ORDER,
    DatasetId.SFEW2: _SEVEN,
}


@dataclass(frozen=True)
class LabelConfig:
    """Candidate label set per dataset. Defaults: 7 classes for rafdb/sfew2, 8 otherwise."""

    sets: Mapping[DatasetId, tuple[EmotionLabel, ...]] = field(
        default_factory=lambda: dict(DEFAULT_LABEL_SETS)
    )

    def __post_init__(self) -> None:
        for ds in DatasetId:
            if ds not in self.sets or not self.sets[ds]:
                raise InvalidRecord(f"label config has no candidates for {ds.value}")
            labels = self.sets[ds]
            if tuple(labels) != canonical_sort(labels):
                raise InvalidRecord(f"candidates for {ds.value} must be duplicate-free and canonically ordered")

    @classmethod
    def from_file(cls, path: str | Path) -> "LabelConfig":
        """Load a JSON object ``{"rafdb": ["anger", ...], ...}``; missing datasets keep defaults."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        sets = dict(DEFAULT_LABEL_SETS)
        for key, labels in data.items():
            sets[DatasetId(key)] = canonical_sort(labels)
        return cls(sets)

    def labels(self, dataset: DatasetId | str) -> tuple[EmotionLabel, ...]:
        return self.sets[DatasetId(dataset)]


DEFAULT_LABEL_CONFIG = LabelConfig()


def label_set(dataset: DatasetId | str, config: LabelConfig | None = None) -> tuple[EmotionLabel, ...]:
    return (config or DEFAULT_LABEL_CONFIG).labels(dataset)


def union_labels(label_sets: Iterable[Sequence[EmotionLabel]]) -> tuple[EmotionLabel, ...]:
    merged: set[EmotionLabel] = set()
    for labels in label_sets:
        merged.update(labels)
    return canonical_sort(merged)


# --- synonym lexicon -------------------------------------------------------

_EDGE_JUNK = " \t\r\n\"'`*_.,;:!?()[]{}<>"
_WS = re.compile(r"\s+")


def normalize_text(raw: str) -> str:
    return _WS.sub(" ", raw.strip().casefold()).strip(_EDGE_JUNK)


@dataclass(frozen=True)
class Lexicon:
    """Surface form -> canonical label table used for answer parsing and fallback matching.

    Every canonical token always maps to itself, whatever the source file says.
    """

    entries: tuple[tuple[str, EmotionLabel], ...]

    def __post_init__(self) -> None:
        table = {normalize_text(term): label for term, label in self.entries}
        for label in CANONICAL_ORDER:
            table[label.value] = label
        object.__setattr__(self, "entries", tuple(sorted(table.items())))

    @classmethod
    def from_text(cls, text: str) -> "Lexicon":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidRecord(f"lexicon line {lineno}: expected 'synonym = canonical', got {line!r}")
            term, canonical = (part.strip() for part in line.split("=", 1))
            try:
                entries.append((term, EmotionLabel.parse(canonical)))
            except ValueError:
                raise InvalidRecord(f"lexicon line {lineno}: unknown label {canonical!r}") from None
        return cls(tuple(entries))

    @classmethod
    def from_file(cls, path: str | Path) -> "Lexicon":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @cached_property
    def table(self) -> dict[str, EmotionLabel]:
        return dict(self.entries)

    def pattern(self, labels: Iterable[EmotionLabel] | None = None) -> re.Pattern[str]:
        """Word-boundary-anchored, case-insensitive regex over terms mapping into ``labels``."""
        key = None if labels is None else frozenset(labels)
        cache = self.__dict__.setdefault("_patterns", {})
        if key not in cache:
            terms = [t for t, l in self.entries if key is None or l in key]
            terms.sort(key=len, reverse=True)
            alternation = "|".join(re.escape(t).replace(r"\ ", r"\s+") for t in terms) or r"(?!x)x"
            cache[key] = re.compile(rf"(?<![^\W_])(?:{alternation})(?![^\W_])", re.IGNORECASE)
        return cache[key]

    def lookup(self, term: str) -> EmotionLabel | None:
        return self.table.get(normalize_text(term))

    def label_of(self, matched: str) -> EmotionLabel:
        """Label for a span produced by :meth:`pattern`.

        Case-insensitive regex matching accepts a few characters that plain
        case folding does not normalize, hence the slow path.
        """
        found = self.lookup(matched)
        if found is not None:
            return found
        for term, label in self.entries:
            if re.fullmatch(re.escape(term).replace(r"\ ", r"\s+"), matched, re.IGNORECASE):
                return label
        raise KeyError(matched)


def _default_lexicon() -> Lexicon:
    text = resources.files("ferkit").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
    return Lexicon.from_text(text)


DEFAULT_LEXICON = _default_lexicon()


def parse_label(
    raw: str,
    candidates: Sequence[EmotionLabel],
    lexicon: Lexicon | None = None,
) -> EmotionLabel | None:
    """Resolve a short answer string to one candidate label, or None.

    The whole normalized string is looked up first. Otherwise every lexicon
    term inside it is collected; the answer resolves only when all hits agree
    on a single label and that label is a candidate.
    """
    lex = lexicon or DEFAULT_LEXICON
    allowed = set(candidates)
    exact = lex.lookup(raw)
    if exact is not None:
        return exact if exact in allowed else None
    hits = {lex.label_of(m.group(0)) for m in lex.pattern().finditer(raw)}
    if len(hits) == 1:
        (only,) = hits
        if only in allowed:
            return only
    return None


# --- records ---------------------------------------------------------------

def _check_candidates(candidates: Sequence[EmotionLabel], label: EmotionLabel, rid: str) -> None:
    if tuple(candidates) != canonical_sort(candidates):
        raise InvalidRecord(f"{rid}: candidates must be duplicate-free and canonically ordered")
    if label not in candidates:
        raise InvalidRecord(f"{rid}: label {label.value!r} not among candidates")


@dataclass(frozen=True)
class VqaRecord:
    id: str
    dataset: DatasetId
    image: str
    question: str
    candidates: tuple[EmotionLabel, ...]
    label: EmotionLabel

    def __post_init__(self) -> None:
        object.__setattr__(self, "dataset", DatasetId(self.dataset))
        object.__setattr__(self, "label", EmotionLabel(self.label))
        object.__setattr__(self, "candidates", tuple(EmotionLabel(c) for c in self.candidates))
        if not self.id:
            raise InvalidRecord("record id must be non-empty")
        if not self.question.strip():
            raise InvalidRecord(f"{self.id}: question must be non-empty")
        _check_candidates(self.candidates, self.label, self.id)

    @property
    def answer(self) -> str:
        """Export form of the ground truth."""
        return f"<answer>{self.label.value}</answer>"

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "dataset": self.dataset.value,
            "image": self.image,
            "question": self.question,
            "candidates": [c.value for c in self.candidates],
            "label": self.label.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "VqaRecord":
        try:
            return cls(
                id=str(d["id"]),
                dataset=DatasetId(d["dataset"]),
                image=str(d["image"]),
                question=str(d["question"]),
                candidates=tuple(EmotionLabel.parse(c) for c in d["candidates"]),
                label=EmotionLabel.parse(d["label"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, InvalidRecord):
                raise
            raise InvalidRecord(f"bad VQA record: {exc}") from exc


class QcStatus(str, Enum):
    PENDING = "pending"
    KEPT = "kept"
    REJECTED = "rejected"


class RejectReason(str, Enum):
    MALFORMED_TAGS = "malformed_tags"
    ANSWER_MISMATCH = "answer_mismatch"
    BLUR_MENTION = "blur_mention"


@dataclass(frozen=True)
class CotRecord(VqaRecord):
    """A VQA record plus a synthesized reasoning trajectory.

    ``raw_output`` is the full synthesis response; ``trajectory`` is the text
    between the think tags (empty when there is no well-formed pair).
    """

    raw_output: str = ""
    trajectory: str = ""
    source_model: str = ""
    qc_status: QcStatus = QcStatus.PENDING
    reject_reason: RejectReason | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        super().__post_init__()
        object.__setattr__(self, "qc_status", QcStatus(self.qc_status))
        if self.reject_reason is not None:
            object.__setattr__(self, "reject_reason", RejectReason(self.reject_reason))
        if (self.qc_status is QcStatus.REJECTED) != (self.reject_reason is not None):
            raise InvalidRecord(f"{self.id}: rejected records carry exactly one reason, others none")

    @classmethod
    def from_vqa(cls, rec: VqaRecord, **kw: Any) -> "CotRecord":
        return cls(**{**_vqa_fields(rec), **kw})

    def with_status(self, status: QcStatus, reason: RejectReason | None = None) -> "CotRecord":
        return replace(self, qc_status=status, reject_reason=reason)

    @property
    def target(self) -> str:
        """SFT target: the reasoning trajectory followed by the tagged answer."""
        return f"<think>{self.trajectory}</think>{self.answer}"

    def to_dict(self) -> dict[str, Any]:
        d = super().to_dict()
        d.update(
            raw_output=self.raw_output,
            trajectory=self.trajectory,
            source_model=self.source_model,
            qc_status=self.qc_status.value,
            reject_reason=self.reject_reason.value if self.reject_reason else None,
        )
        if self.error:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CotRecord":
        base = VqaRecord.from_dict(d)
        return cls.from_vqa(
            base,
            raw_output=str(d.get("raw_output", "")),
            trajectory=str(d.get("trajectory", "")),
            source_model=str(d.get("source_model", "")),
            qc_status=QcStatus(d.get("qc_status", "pending")),
            reject_reason=RejectReason(d["reject_reason"]) if d.get("reject_reason") else None,
            error=d.get("error"),
        )


def _vqa_fields(rec: VqaRecord) -> dict[str, Any]:
    return {
        "id": rec.id,
        "dataset": rec.dataset,
        "image": rec.image,
        "question": rec.question,
        "candidates": rec.candidates,
        "label": rec.label,
    }


class ExtractionMethod(str, Enum):
    TAGGED = "tagged"
    FALLBACK = "fallback"
    FAILED = "failed"


@dataclass(frozen=True)
class EvalRecord:
    id: str
    dataset: DatasetId
    model: str
    raw_response: str
    extracted_label: EmotionLabel | None
    extraction_method: ExtractionMethod
    gt: EmotionLabel
    error: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "dataset", DatasetId(self.dataset))
        object.__setattr__(self, "gt", EmotionLabel(self.gt))
        object.__setattr__(self, "extraction_method", ExtractionMethod(self.extraction_method))
        if self.extracted_label is not None:
            object.__setattr__(self, "extracted_label", EmotionLabel(self.extracted_label))
        if (self.extraction_method is ExtractionMethod.FAILED) != (self.extracted_label is None):
            raise InvalidRecord(f"{self.id}: extraction_method 'failed' iff no extracted label")

    @property
    def correct(self) -> bool:
        return self.extracted_label is not None and self.extracted_label == self.gt

    def to_dict(self) -> dict[str, Any]:
        d = {
            "id": self.id,
            "dataset": self.dataset.value,
            "model": self.model,
            "raw_response": self.raw_response,
            "extracted_label": self.extracted_label.value if self.extracted_label else None,
            "extraction_method": self.extraction_method.value,
            "gt": self.gt.value,
            "correct": self.correct,
        }
        if self.error:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalRecord":
        rec = cls(
            id=str(d["id"]),
            dataset=DatasetId(d["dataset"]),
            model=str(d["model"]),
            raw_response=str(d.get("raw_response", "")),
            extracted_label=EmotionLabel(d["extracted_label"]) if d.get("extracted_label") else None,
            extraction_method=ExtractionMethod(d["extraction_method"]),
            gt=EmotionLabel(d["gt"]),
            error=d.get("error"),
        )
        if "correct" in d and bool(d["correct"]) != rec.correct:
            raise InvalidRecord(f"{rec.id}: stored 'correct' disagrees with extracted label and gt")
        return rec
