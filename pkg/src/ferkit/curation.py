"""Dataset curation: question rewriting, RLVR record assembly, trajectory synthesis, QC, statistics.

Stages never drop records silently. Synthesis keeps every input (failures
come back with an empty output and an ``error`` note); only the QC filter
removes anything, and it says why.
"""

from __future__ import annotations

import random
import re
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Mapping, Protocol, Sequence

from .client import ChatRequest, ModelResponse
from .core import (
    CANONICAL_ORDER,
    CotRecord,
    DatasetId,
    EmotionLabel,
    LabelConfig,
    Lexicon,
    QcStatus,
    RejectReason,
    VqaRecord,
    parse_label,
)
from .errors import EmptyInput, InsufficientVariants, InvalidRecord, LabelNotInCandidates
from .extraction import extract_tagged
from .prompting import (
    QuestionPool,
    build_vqa_record,
    dedup_key,
    is_valid_template,
    normalize_variant,
)


class Completer(Protocol):
    def complete(self, req: ChatRequest) -> ModelResponse: ...


class BatchCompleter(Completer, Protocol):
    def batch_complete(self, reqs: Sequence[ChatRequest]) -> list[ModelResponse]: ...


def _data_text(name: str) -> str:
    return resources.files("ferkit").joinpath(f"data/{name}").read_text(encoding="utf-8")


def _config_lines(text: str) -> Iterable[tuple[int, str]]:
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            yield lineno, line


# --- config tables ----------------------------------------------------------

@dataclass(frozen=True)
class RuleTable:
    cues: Mapping[EmotionLabel, tuple[str, ...]]

    def __post_init__(self) -> None:
        missing = [l.value for l in CANONICAL_ORDER if not self.cues.get(l)]
        if missing:
            raise InvalidRecord(f"rule table has no cues for: {', '.join(missing)}")

    def __getitem__(self, label: EmotionLabel) -> tuple[str, ...]:
        return self.cues[label]

    @classmethod
    def from_text(cls, text: str) -> "RuleTable":
        cues: dict[EmotionLabel, tuple[str, ...]] = {}
        for lineno, line in _config_lines(text):
            if ":" not in line:
                raise InvalidRecord(f"rule line {lineno}: expected 'label: cue; cue', got {line!r}")
            label, rest = line.split(":", 1)
            try:
                key = EmotionLabel.parse(label)
            except ValueError:
                raise InvalidRecord(f"rule line {lineno}: unknown label {label.strip()!r}") from None
            cues[key] = tuple(c.strip() for c in rest.split(";") if c.strip())
        return cls(cues)

    @classmethod
    def from_file(cls, path: str | Path) -> "RuleTable":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "RuleTable":
        return cls.from_text(_data_text("rules.txt"))


def load_phrases(text: str) -> tuple[str, ...]:
    return tuple(line.casefold() for _, line in _config_lines(text))


DEFAULT_BLUR_PHRASES = load_phrases(_data_text("blur.txt"))
DEFAULT_STOP_WORDS = frozenset(load_phrases(_data_text("stopwords.txt")))


# --- question rewriting -----------------------------------------------------

REWRITE_SYSTEM = (
    "You rewrite questions for a facial expression recognition dataset. "
    "Every rewrite must ask the same thing as the original but use different wording and sentence structure."
)

_BULLET = re.compile(r"^\s*(?:[-*•]|\(?\d+[.):])\s*")


def _rewrite_prompt(seed: str, n: int, have: Sequence[str], round_no: int) -> str:
    lines = [
        f"Rewrite the question below into {n} semantically equivalent but syntactically diverse variants.",
        "Rules: keep the placeholder {candidates} exactly once in every variant, "
        "do not name any specific emotion, and output one variant per line without numbering.",
        "",
        f"Question: {seed}",
    ]
    if have:
        lines += ["", "Do not repeat any of these existing variants:", *have]
    lines += ["", f"(request {round_no})"]
    return "\n".join(lines)


def _candidate_lines(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        line = _BULLET.sub("", line).strip().strip('"').strip()
        if line:
            out.append(normalize_variant(line))
    return out


def rewrite_questions(
    seed: str,
    k: int,
    client: Completer,
    *,
    model: str = "gpt-4o",
    retry_budget: int = 5,
    temperature: float = 0.7,
) -> QuestionPool:
    """Ask a rewriting model for ``k`` distinct slot-bearing paraphrases of ``seed``.

    Duplicates and lines without exactly one ``{candidates}`` slot (or naming
    an emotion) are discarded, and the shortfall is re-requested up to
    ``retry_budget`` extra times. Client errors propagate.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    variants: list[str] = []
    seen: set[str] = set()
    for round_no in range(1, retry_budget + 2):
        need = k - len(variants)
        req = ChatRequest(
            model=model,
            system=REWRITE_SYSTEM,
            user=_rewrite_prompt(seed, need, variants, round_no),
            temperature=temperature,
        )
        resp = client.complete(req)
        if resp.error is not None:
            raise resp.error
        for line in _candidate_lines(resp.text):
            key = dedup_key(line)
            if key in seen or not is_valid_template(line):
                continue
            seen.add(key)
            variants.append(line)
            if len(variants) == k:
                return QuestionPool(seed=seed, variants=variants, k=k)
    raise InsufficientVariants(k, variants)


# --- RLVR assembly ------------------------------------------------------------

@dataclass
class Pair:
    image: str
    label: str
    dataset: str
    id: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Pair":
        return cls(str(d["image"]), str(d["label"]), str(d["dataset"]), d.get("id"))


@dataclass
class AssembleResult:
    records: list[VqaRecord]
    errors: list[tuple[int, Exception]] = field(default_factory=list)


def assemble_rlvr(
    pairs: Sequence[Pair | tuple[str, str, str]],
    pool: QuestionPool,
    rng_seed: int,
    *,
    label_config: LabelConfig | None = None,
    shuffle_candidates: bool = False,
) -> AssembleResult:
    """One VQA record per pair, in input order; bad pairs are collected, not fatal."""
    if not pool.choices:
        raise EmptyInput("question pool is empty")
    master = random.Random(rng_seed)
    result = AssembleResult([])
    seen_ids: set[str] = set()
    for i, pair in enumerate(pairs):
        item_seed = master.getrandbits(64)
        if not isinstance(pair, Pair):
            pair = Pair(*pair)
        rid = pair.id or f"{pair.dataset}-{i:07d}"
        try:
            if rid in seen_ids:
                raise InvalidRecord(f"duplicate record id {rid!r}")
            rec = build_vqa_record(
                pair.image,
                EmotionLabel.parse(pair.label),
                DatasetId(pair.dataset),
                pool,
                item_seed,
                record_id=rid,
                label_config=label_config,
                shuffle_candidates=shuffle_candidates,
            )
        except (LabelNotInCandidates, InvalidRecord, ValueError) as exc:
            result.errors.append((i, exc))
            continue
        seen_ids.add(rid)
        result.records.append(rec)
    return result


# --- trajectory synthesis -----------------------------------------------------

SYNTH_SYSTEM = (
    "You are an expert in facial expression recognition. You are given a face image together with "
    "its ground-truth emotion label. Reason backward from the label: reconstruct, step by step, the "
    "fine-grained visual evidence in the face that supports it, checking the listed facial cues one "
    "by one against what is actually visible. Begin your response with <think>, put the whole "
    "reasoning inside <think></think>, then give the emotion word alone inside <answer></answer>. "
    "If the face is too blurry to make out any cue, say so plainly in your reasoning."
)


def synthesis_prompt(record: VqaRecord, rules: RuleTable) -> str:
    cues = "; ".join(rules[record.label])
    return (
        f"{record.question}\n\n"
        f"Ground-truth emotion: {record.label.value}\n"
        f"Facial cues typically associated with {record.label.value}: {cues}\n"
        "Write multi-step reasoning that arrives at this emotion from the visible facial cues."
    )


ImageLoader = Callable[[str], tuple[bytes, str]]


def synthesis_request(
    record: VqaRecord, rules: RuleTable, load_image: ImageLoader, model: str, temperature: float, max_output_tokens: int
) -> ChatRequest:
    data, media_type = load_image(record.image)
    return ChatRequest(
        model=model,
        system=SYNTH_SYSTEM,
        user=synthesis_prompt(record, rules),
        image=data,
        media_type=media_type,
        temperature=temperature,
        max_output_tokens=max_output_tokens,
    )


def _pending(record: VqaRecord, text: str, model: str, error: str | None = None) -> CotRecord:
    think = extract_tagged(text, "think")
    return CotRecord.from_vqa(
        record,
        raw_output=text,
        trajectory=think.strip() if think is not None else "",
        source_model=model,
        qc_status=QcStatus.PENDING,
        error=error,
    )


def synthesize_trajectory(
    record: VqaRecord,
    rules: RuleTable,
    client: Completer,
    load_image: ImageLoader,
    *,
    model: str = "gemini-2.5-flash",
    temperature: float = 0.0,
    max_output_tokens: int = 2048,
) -> CotRecord:
    resp = client.complete(synthesis_request(record, rules, load_image, model, temperature, max_output_tokens))
    if resp.error is not None:
        raise resp.error
    return _pending(record, resp.text, model)


def synthesize_batch(
    records: Sequence[VqaRecord],
    rules: RuleTable,
    client: BatchCompleter,
    load_image: ImageLoader,
    *,
    model: str = "gemini-2.5-flash",
    temperature: float = 0.0,
    max_output_tokens: int = 2048,
) -> list[CotRecord]:
    """Fan synthesis out through the client's bounded batch; output order == input order."""
    if not records:
        raise EmptyInput("no records to synthesize")
    reqs = [synthesis_request(r, rules, load_image, model, temperature, max_output_tokens) for r in records]
    out = []
    for rec, resp in zip(records, client.batch_complete(reqs)):
        if resp.error is not None:
            out.append(_pending(rec, "", model, error=f"{type(resp.error).__name__}: {resp.error}"))
        else:
            out.append(_pending(rec, resp.text, model))
    return out


# --- quality control ----------------------------------------------------------

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"


def qc_reason(
    record: CotRecord,
    blur_phrases: Sequence[str] = DEFAULT_BLUR_PHRASES,
    lexicon: Lexicon | None = None,
) -> RejectReason | None:
    """First failing check in priority order malformed -> mismatch -> blur, or None."""
    text = record.raw_output.strip()
    if not text.startswith(THINK_OPEN):
        return RejectReason.MALFORMED_TAGS
    close = text.find(THINK_CLOSE, len(THINK_OPEN))
    if close < 0:
        return RejectReason.MALFORMED_TAGS
    trajectory = text[len(THINK_OPEN):close]
    answer = extract_tagged(text[close + len(THINK_CLOSE):], "answer")
    if answer is None or parse_label(answer, record.candidates, lexicon) != record.label:
        return RejectReason.ANSWER_MISMATCH
    folded = trajectory.casefold()
    if any(p in folded for p in blur_phrases):
        return RejectReason.BLUR_MENTION
    return None


def qc_filter(
    record: CotRecord,
    blur_phrases: Sequence[str] = DEFAULT_BLUR_PHRASES,
    lexicon: Lexicon | None = None,
) -> CotRecord:
    reason = qc_reason(record, blur_phrases, lexicon)
    if reason is None:
        return record.with_status(QcStatus.KEPT)
    return record.with_status(QcStatus.REJECTED, reason)


@dataclass
class QcReport:
    input: int
    kept: int
    rejected: dict[RejectReason, int]

    def __post_init__(self) -> None:
        if self.kept + sum(self.rejected.values()) != self.input:
            raise AssertionError("QC counts do not reconcile")

    def to_dict(self) -> dict[str, Any]:
        return {
            "input": self.input,
            "kept": self.kept,
            "rejected": {r.value: self.rejected.get(r, 0) for r in RejectReason},
        }


def filter_records(
    records: Sequence[CotRecord],
    blur_phrases: Sequence[str] = DEFAULT_BLUR_PHRASES,
    lexicon: Lexicon | None = None,
) -> tuple[list[CotRecord], QcReport]:
    """Apply QC to every record; returns all records (statuses set) and the tally."""
    judged = [qc_filter(r, blur_phrases, lexicon) for r in records]
    rejected = Counter(r.reject_reason for r in judged if r.qc_status is QcStatus.REJECTED)
    kept = sum(1 for r in judged if r.qc_status is QcStatus.KEPT)
    report = QcReport(len(records), kept, {reason: rejected.get(reason, 0) for reason in RejectReason})
    return judged, report


# --- statistics ---------------------------------------------------------------

LengthUnit = Literal["chars", "tokens"]


def text_length(text: str, unit: LengthUnit) -> int:
    if unit == "chars":
        return len(text)
    if unit == "tokens":
        return len(text.split())
    raise ValueError(f"unknown length unit {unit!r}")


def answer_text(record: VqaRecord) -> str:
    """Training target: tagged trajectory + answer for CoT records, tagged answer otherwise."""
    return record.target if isinstance(record, CotRecord) else record.answer


def percent(count: int, total: int) -> float:
    """Percentage with one decimal, half-up on the exact ratio."""
    return float((Decimal(100 * count) / Decimal(total)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class LengthStats:
    total: int
    max: int
    min: int
    mean: float

    @classmethod
    def of(cls, lengths: Sequence[int]) -> "LengthStats":
        total = sum(lengths)
        return cls(total, max(lengths), min(lengths), total / len(lengths))


@dataclass
class StatsReport:
    total: int
    counts: dict[EmotionLabel, int]
    percentages: dict[EmotionLabel, float]
    question: LengthStats
    answer: LengthStats
    length_unit: LengthUnit

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "length_unit": self.length_unit,
            "emotions": {
                l.value: {"count": self.counts[l], "percent": self.percentages[l]} for l in self.counts
            },
            "question": self.question.__dict__,
            "answer": self.answer.__dict__,
        }


def dataset_stats(records: Sequence[VqaRecord], length_unit: LengthUnit = "chars") -> StatsReport:
    if not records:
        raise EmptyInput("no records for statistics")
    by_label = Counter(r.label for r in records)
    total = len(records)
    counts = {l: by_label.get(l, 0) for l in CANONICAL_ORDER}
    return StatsReport(
        total=total,
        counts=counts,
        percentages={l: percent(c, total) for l, c in counts.items()},
        question=LengthStats.of([text_length(r.question, length_unit) for r in records]),
        answer=LengthStats.of([text_length(answer_text(r), length_unit) for r in records]),
        length_unit=length_unit,
    )


_TOKEN = re.compile(r"[^\W_]+(?:'[^\W_]+)*")


def word_frequencies(
    records: Sequence[VqaRecord],
    field: Literal["question", "trajectory"] = "question",
    stop_words: Iterable[str] | None = None,
) -> list[tuple[str, int]]:
    """Token counts for a word cloud, most frequent first, ties alphabetical."""
    if not records:
        raise EmptyInput("no records for word frequencies")
    if field not in ("question", "trajectory"):
        raise ValueError(f"unknown field {field!r}")
    stops = DEFAULT_STOP_WORDS if stop_words is None else frozenset(w.casefold() for w in stop_words)
    counts: Counter[str] = Counter()
    for r in records:
        text = getattr(r, field, None)
        if text is None:
            raise InvalidRecord(f"{r.id}: record has no {field} field")
        counts.update(t for t in _TOKEN.findall(text.casefold()) if t not in stops)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
