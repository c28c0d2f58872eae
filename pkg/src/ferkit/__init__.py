"""Facial-expression VQA evaluation, CoT/RLVR data curation, and verified GRPO math."""

from .core import (
    CotRecord,
    DatasetId,
    EmotionLabel,
    EvalRecord,
    LabelConfig,
    Lexicon,
    VqaRecord,
    label_set,
    parse_label,
)

__version__ = "0.1.0"

__all__ = [
    "CotRecord",
    "DatasetId",
    "EmotionLabel",
    "EvalRecord",
    "LabelConfig",
    "Lexicon",
    "VqaRecord",
    "label_set",
    "parse_label",
]
