"""Multi-label evaluation metrics over binary indicator matrices (instances x classes).

Degenerate ratios follow one convention everywhere: 0/0 evaluates to 0, except for the Jaccard
score of an instance whose true and predicted label sets are both empty, which is 1.
"""

from collections import namedtuple
from collections.abc import Sequence

import numpy as np

from .common import EmptyDatasetError, ShapeError
from .corpus import EmotionLabelSet, kDefaultSchema


class ClassCounts(namedtuple("ClassCounts", ["tp", "fp", "fn", "support"])):
    """Per-class true positive, false positive, false negative counts and the true-positive support,
    each a vector of length C"""

    __slots__ = ()


class ClassScores(namedtuple("ClassScores", ["label", "precision", "recall", "f1", "support"])):
    __slots__ = ()


def _check(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise ShapeError(
            f"y_true and y_pred must be equally shaped matrices, got {y_true.shape} and "
            f"{y_pred.shape}"
        )
    assert np.all((y_true == 0) | (y_true == 1)) and np.all((y_pred == 0) | (y_pred == 1))
    return y_true.astype(bool), y_pred.astype(bool)


def _ratio(num, den):
    """num/den with 0/0 -> 0, elementwise for arrays"""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def perClassCounts(y_true, y_pred) -> ClassCounts:
    t, p = _check(y_true, y_pred)
    tp = np.sum(t & p, axis=0)
    fp = np.sum(~t & p, axis=0)
    fn = np.sum(t & ~p, axis=0)
    return ClassCounts(tp, fp, fn, np.sum(t, axis=0))


def microPrecision(y_true, y_pred) -> float:
    c = perClassCounts(y_true, y_pred)
    return float(_ratio(c.tp.sum(), c.tp.sum() + c.fp.sum()))


def microRecall(y_true, y_pred) -> float:
    c = perClassCounts(y_true, y_pred)
    return float(_ratio(c.tp.sum(), c.tp.sum() + c.fn.sum()))


def microF1(y_true, y_pred) -> float:
    # equals 2PR/(P+R) of the pooled counts
    c = perClassCounts(y_true, y_pred)
    tp = c.tp.sum()
    return float(_ratio(2 * tp, 2 * tp + c.fp.sum() + c.fn.sum()))


def perClassF1(y_true, y_pred) -> np.ndarray:
    c = perClassCounts(y_true, y_pred)
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def macroF1(y_true, y_pred) -> float:
    return float(np.mean(perClassF1(y_true, y_pred)))


def jaccardAccuracy(y_true, y_pred) -> float:
    t, p = _check(y_true, y_pred)
    if t.shape[0] < 1:
        raise EmptyDatasetError("Jaccard accuracy of zero instances is undefined")
    inter = np.sum(t & p, axis=1)
    union = np.sum(t | p, axis=1)
    scores = np.where(union > 0, _ratio(inter, union), 1.0)
    return float(np.mean(scores))


def hammingLoss(y_true, y_pred) -> float:
    t, p = _check(y_true, y_pred)
    if t.size < 1:
        raise EmptyDatasetError("Hamming loss of zero label slots is undefined")
    return float(np.mean(t != p))


class EvaluationReport:
    """Aggregate metrics plus a per-class breakdown in label order. Built by classwiseReport()."""

    def __init__(
        self,
        precision_micro: float,
        recall_micro: float,
        f1_micro: float,
        f1_macro: float,
        jaccard_accuracy: float,
        hamming_loss: float,
        num_instances: int,
        per_class: Sequence[ClassScores],
    ) -> None:
        aggs = (precision_micro, recall_micro, f1_micro, f1_macro, jaccard_accuracy, hamming_loss)
        assert all(0.0 <= v <= 1.0 for v in aggs), "aggregate metrics must lie in [0, 1]"
        self._precision_micro = float(precision_micro)
        self._recall_micro = float(recall_micro)
        self._f1_micro = float(f1_micro)
        self._f1_macro = float(f1_macro)
        self._jaccard_accuracy = float(jaccard_accuracy)
        self._hamming_loss = float(hamming_loss)
        self._num_instances = int(num_instances)
        self._per_class = tuple(per_class)

    @property
    def precision_micro(self) -> float:
        return self._precision_micro

    @property
    def recall_micro(self) -> float:
        return self._recall_micro

    @property
    def f1_micro(self) -> float:
        return self._f1_micro

    @property
    def f1_macro(self) -> float:
        return self._f1_macro

    @property
    def jaccard_accuracy(self) -> float:
        return self._jaccard_accuracy

    @property
    def hamming_loss(self) -> float:
        return self._hamming_loss

    @property
    def num_instances(self) -> int:
        return self._num_instances

    @property
    def per_class(self) -> tuple[ClassScores, ...]:
        return self._per_class

    def aggregates(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in kAggregateKeys}

    def toDict(self) -> dict:
        """Machine readable form, the key names are stable"""
        d = self.aggregates()
        d["num_instances"] = self._num_instances
        d["per_class"] = [
            {
                "label": s.label,
                "precision": s.precision,
                "recall": s.recall,
                "f1": s.f1,
                "support": s.support,
            }
            for s in self._per_class
        ]
        return d

    @staticmethod
    def fromDict(d: dict) -> "EvaluationReport":
        return EvaluationReport(
            *(d[k] for k in kAggregateKeys),
            num_instances=d["num_instances"],
            per_class=[
                ClassScores(r["label"], r["precision"], r["recall"], r["f1"], r["support"])
                for r in d["per_class"]
            ],
        )


kAggregateKeys = (
    "precision_micro",
    "recall_micro",
    "f1_micro",
    "f1_macro",
    "jaccard_accuracy",
    "hamming_loss",
)


def classwiseReport(
    y_true, y_pred, schema: EmotionLabelSet | Sequence[str] = kDefaultSchema
) -> EvaluationReport:
    labels = tuple(schema)
    c = perClassCounts(y_true, y_pred)
    if len(labels) != c.tp.shape[0]:
        raise ShapeError(f"{len(labels)} label names for {c.tp.shape[0]} label columns")

    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    per_class = [
        ClassScores(lb, float(precision[i]), float(recall[i]), float(f1[i]), int(c.support[i]))
        for i, lb in enumerate(labels)
    ]
    return EvaluationReport(
        microPrecision(y_true, y_pred),
        microRecall(y_true, y_pred),
        microF1(y_true, y_pred),
        float(np.mean(f1)),
        jaccardAccuracy(y_true, y_pred),
        hammingLoss(y_true, y_pred),
        num_instances=np.asarray(y_true).shape[0],
        per_class=per_class,
    )
