"""Closed-set question templates, the expert system prompt, and VQA record assembly.

The exact wording used in the original benchmark was never published; the
prompts below are a reconstruction that keeps its structure (expert role,
all candidate labels listed, answer wrapped in answer tags).
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .core import (
    DEFAULT_LEXICON,
    DatasetId,
    EmotionLabel,
    LabelConfig,
    Lexicon,
    VqaRecord,
    label_set,
)
from .errors import InvalidRecord, LabelNotInCandidates, MissingPlaceholder

SLOT = "{candidates}"
SEED_MARKER = "#seed:"

SYSTEM_PROMPT = (
    "You are an expert in facial expression recognition (FER). "
    "You will be shown a facial image and asked which emotion the person expresses. "
    "Choose exactly one emotion from the candidate list given in the question. "
    "You may reason step by step inside <think> </think> tags first. "
    "Then give only the chosen emotion word inside <answer> </answer> tags, "
    "for example <answer>neutral</answer>."
)

SEED_QUESTION = (
    "What emotion is shown by the face in this image? "
    "Choose one of the following: {candidates}."
)

_WS = re.compile(r"\s+")


def render_system_prompt() -> str:
    return SYSTEM_PROMPT


def normalize_variant(text: str) -> str:
    return _WS.sub(" ", text).strip()


def dedup_key(text: str) -> str:
    return normalize_variant(text).casefold()


def render_question(variant: str, candidates: Sequence[EmotionLabel]) -> str:
    if SLOT not in variant:
        raise MissingPlaceholder(f"question template lacks the {SLOT} slot: {variant!r}")
    if not candidates:
        raise ValueError("candidates must be non-empty")
    return variant.replace(SLOT, ", ".join(EmotionLabel(c).value for c in candidates))


def is_valid_template(variant: str, lexicon: Lexicon | None = None) -> bool:
    """One candidate slot and no emotion word (label or synonym) outside it."""
    lex = lexicon or DEFAULT_LEXICON
    return variant.count(SLOT) == 1 and not lex.pattern().search(variant.replace(SLOT, ""))


@dataclass
class QuestionPool:
    seed: str
    variants: list[str] = field(default_factory=list)
    k: int = 100

    def __post_init__(self) -> None:
        if not self.seed.strip():
            raise InvalidRecord("question pool needs a seed question")
        seen: set[str] = set()
        unique = []
        for v in self.variants:
            key = dedup_key(v)
            if key and key not in seen:
                seen.add(key)
                unique.append(normalize_variant(v))
        if len(unique) > self.k:
            raise InvalidRecord(f"pool holds {len(unique)} variants, more than k={self.k}")
        self.variants = unique

    @property
    def choices(self) -> list[str]:
        """What questions are sampled from; the seed alone when no variants exist yet."""
        return self.variants or [normalize_variant(self.seed)]

    def dump(self) -> str:
        lines = [f"{SEED_MARKER} {normalize_variant(self.seed)}", *self.variants]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, k: int | None = None) -> "QuestionPool":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith(SEED_MARKER):
            raise InvalidRecord(f"question pool must start with a '{SEED_MARKER}' line")
        seed = lines[0][len(SEED_MARKER):].strip()
        variants = lines[1:]
        return cls(seed=seed, variants=variants, k=k if k is not None else max(len(variants), 1))

    @classmethod
    def load(cls, path: str | Path, k: int | None = None) -> "QuestionPool":
        return cls.parse(Path(path).read_text(encoding="utf-8"), k=k)


def build_vqa_record(
    image: str,
    label: EmotionLabel | str,
    dataset: DatasetId | str,
    pool: QuestionPool,
    rng_seed: int,
    *,
    record_id: str | None = None,
    label_config: LabelConfig | None = None,
    shuffle_candidates: bool = False,
) -> VqaRecord:
    """Turn one image/label pair into a closed-set VQA record.

    The question template is drawn uniformly from ``pool`` with a generator
    seeded by ``rng_seed``. Candidate order in the rendered question is the
    canonical order unless ``shuffle_candidates`` is set.
    """
    dataset = DatasetId(dataset)
    label = EmotionLabel(label)
    candidates = label_set(dataset, label_config)
    if label not in candidates:
        raise LabelNotInCandidates(label.value, [c.value for c in candidates])
    rng = random.Random(rng_seed)
    choices = pool.choices
    template = choices[rng.randrange(len(choices))]
    shown = list(candidates)
    if shuffle_candidates:
        rng.shuffle(shown)
    return VqaRecord(
        id=record_id or f"{dataset.value}:{image}",
        dataset=dataset,
        image=image,
        question=render_question(template, shown),
        candidates=candidates,
        label=label,
    )
