"""Accuracy, per-class precision/recall/F1, macro-F1, confusion matrices, cross-dataset pooling.

Failed extractions are scored as wrong and counted in a dedicated overflow
column, so row sums of the confusion matrix always equal class support.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .core import DatasetId, EmotionLabel, EvalRecord, LabelConfig, label_set, union_labels
from .errors import EmptyInput


def _require(records: Sequence[EvalRecord]) -> None:
    if not records:
        raise EmptyInput("no records to score")


def accuracy(records: Sequence[EvalRecord]) -> float:
    _require(records)
    return sum(1 for r in records if r.correct) / len(records)


@dataclass
class ConfusionMatrix:
    labels: tuple[EmotionLabel, ...]
    counts: list[list[int]]  # row = ground truth, column = prediction
    overflow: list[int]  # per ground-truth row: failed or out-of-set predictions

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts)) + sum(self.overflow)

    def support(self) -> list[int]:
        return [sum(row) + extra for row, extra in zip(self.counts, self.overflow)]

    def predicted(self) -> list[int]:
        n = len(self.labels)
        return [sum(self.counts[i][j] for i in range(n)) for j in range(n)]

    def row_normalized(self) -> list[list[float]]:
        """Rows as proportions with the overflow share appended; empty rows stay zero."""
        out = []
        for row, extra, sup in zip(self.counts, self.overflow, self.support()):
            cells = [*row, extra]
            out.append([c / sup for c in cells] if sup else [0.0] * len(cells))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "labels": [l.value for l in self.labels],
            "counts": self.counts,
            "overflow": self.overflow,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ConfusionMatrix":
        return cls(tuple(EmotionLabel(l) for l in d["labels"]), [list(r) for r in d["counts"]], list(d["overflow"]))


def confusion(records: Sequence[EvalRecord], labels: Sequence[EmotionLabel]) -> ConfusionMatrix:
    _require(records)
    labels = tuple(labels)
    index = {l: i for i, l in enumerate(labels)}
    counts = [[0] * len(labels) for _ in labels]
    overflow = [0] * len(labels)
    for r in records:
        try:
            i = index[r.gt]
        except KeyError:
            raise ValueError(f"{r.id}: ground truth {r.gt.value!r} outside label set") from None
        j = index.get(r.extracted_label) if r.extracted_label is not None else None
        if j is None:
            overflow[i] += 1
        else:
            counts[i][j] += 1
    return ConfusionMatrix(labels, counts, overflow)


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassReport:
    scores: dict[EmotionLabel, ClassScores]

    def __getitem__(self, label: EmotionLabel) -> ClassScores:
        return self.scores[label]

    @property
    def macro_f1(self) -> float:
        return sum(s.f1 for s in self.scores.values()) / len(self.scores)

    def to_dict(self) -> dict[str, Any]:
        return {
            l.value: {"precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.support}
            for l, s in self.scores.items()
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ClassReport":
        return cls({EmotionLabel(k): ClassScores(**v) for k, v in d.items()})


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def class_report_from_confusion(cm: ConfusionMatrix) -> ClassReport:
    scores = {}
    for i, (label, sup, pred) in enumerate(zip(cm.labels, cm.support(), cm.predicted())):
        tp = cm.counts[i][i]
        p = tp / pred if pred else 0.0
        r = tp / sup if sup else 0.0
        scores[label] = ClassScores(p, r, _f1(p, r), sup)
    return ClassReport(scores)


def per_class_f1(records: Sequence[EvalRecord], labels: Sequence[EmotionLabel]) -> ClassReport:
    return class_report_from_confusion(confusion(records, labels))


def macro_f1(records: Sequence[EvalRecord], labels: Sequence[EmotionLabel]) -> float:
    return per_class_f1(records, labels).macro_f1


@dataclass
class DatasetReport:
    dataset: DatasetId
    labels: tuple[EmotionLabel, ...]
    accuracy: float
    macro_f1: float
    class_report: ClassReport
    confusion: ConfusionMatrix
    records: list[EvalRecord] = field(default_factory=list, repr=False)

    @property
    def count(self) -> int:
        return self.confusion.total

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset.value,
            "labels": [l.value for l in self.labels],
            "count": self.count,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "class_report": self.class_report.to_dict(),
            "confusion": self.confusion.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetReport":
        return cls(
            dataset=DatasetId(d["dataset"]),
            labels=tuple(EmotionLabel(l) for l in d["labels"]),
            accuracy=d["accuracy"],
            macro_f1=d["macro_f1"],
            class_report=ClassReport.from_dict(d["class_report"]),
            confusion=ConfusionMatrix.from_dict(d["confusion"]),
        )


def dataset_report(
    records: Sequence[EvalRecord], labels: Sequence[EmotionLabel], dataset: DatasetId | str
) -> DatasetReport:
    cm = confusion(records, labels)
    cr = class_report_from_confusion(cm)
    return DatasetReport(DatasetId(dataset), tuple(labels), accuracy(records), cr.macro_f1, cr, cm, list(records))


@dataclass
class EvalReport:
    model: str
    per_dataset: dict[DatasetId, DatasetReport]
    accuracy: float
    macro_f1: float
    record_count: int
    labels: tuple[EmotionLabel, ...] = ()
    class_report: ClassReport | None = None
    confusion: ConfusionMatrix | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "record_count": self.record_count,
            "overall": {
                "accuracy": self.accuracy,
                "macro_f1": self.macro_f1,
                "labels": [l.value for l in self.labels],
                "class_report": self.class_report.to_dict() if self.class_report else None,
                "confusion": self.confusion.to_dict() if self.confusion else None,
            },
            "per_dataset": {ds.value: rep.to_dict() for ds, rep in self.per_dataset.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalReport":
        overall = d["overall"]
        return cls(
            model=d["model"],
            per_dataset={DatasetId(k): DatasetReport.from_dict(v) for k, v in d["per_dataset"].items()},
            accuracy=overall["accuracy"],
            macro_f1=overall["macro_f1"],
            record_count=d["record_count"],
            labels=tuple(EmotionLabel(l) for l in overall.get("labels", ())),
            class_report=ClassReport.from_dict(overall["class_report"]) if overall.get("class_report") else None,
            confusion=ConfusionMatrix.from_dict(overall["confusion"]) if overall.get("confusion") else None,
        )


def aggregate(reports: Mapping[DatasetId, DatasetReport] | Iterable[DatasetReport], model: str = "") -> EvalReport:
    """Pool per-dataset results.

    Overall accuracy is sample-weighted over all records; overall macro-F1 and
    the overall confusion matrix are computed on the pooled records over the
    union of the label sets, so a prediction that was out of set for its own
    dataset counts as a real prediction once that label is in the union.
    """
    reps = list(reports.values()) if isinstance(reports, Mapping) else list(reports)
    if not reps:
        raise EmptyInput("no dataset reports to aggregate")
    pooled = [r for rep in reps for r in rep.records]
    if len(pooled) != sum(rep.count for rep in reps):
        raise ValueError("aggregate needs reports that retain their raw records")
    labels = union_labels(rep.labels for rep in reps)
    cm = confusion(pooled, labels)
    cr = class_report_from_confusion(cm)
    return EvalReport(
        model=model,
        per_dataset={rep.dataset: rep for rep in reps},
        accuracy=accuracy(pooled),
        macro_f1=cr.macro_f1,
        record_count=len(pooled),
        labels=labels,
        class_report=cr,
        confusion=cm,
    )


def evaluate_records(
    records: Sequence[EvalRecord], model: str = "", label_config: LabelConfig | None = None
) -> EvalReport:
    """Group records by dataset, score each against its configured label set, then pool."""
    _require(records)
    by_ds: dict[DatasetId, list[EvalRecord]] = defaultdict(list)
    for r in records:
        by_ds[r.dataset].append(r)
    order = list(DatasetId)
    reps = [
        dataset_report(by_ds[ds], label_set(ds, label_config), ds)
        for ds in sorted(by_ds, key=order.index)
    ]
    return aggregate(reps, model)
