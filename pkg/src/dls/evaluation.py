"""Weighted k-NN probing of embeddings and top-1 accuracy reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LabeledBank:
    vectors: np.ndarray  # [n, d], unit rows
    labels: np.ndarray  # [n]

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if v.ndim != 2 or y.ndim != 1 or len(y) != len(v):
            raise ValueError(f"need vectors [n, d] and labels [n], got {v.shape} and {y.shape}")
        if len(v) == 0:
            raise ValueError("labeled bank is empty")
        if not np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-5):
            raise ValueError("labeled bank rows must have unit norm")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list[float] = field(default_factory=list)
    n_eval: int = 0
    fold: int = 0

    def metric_rows(self):
        """``(metric, value)`` pairs for the long-format metrics CSV."""
        rows = [("accuracy", self.accuracy), ("n_eval", float(self.n_eval))]
        rows += [(f"class_{c}_accuracy", a) for c, a in enumerate(self.per_class_accuracy)]
        return rows


def _top_k(sims: np.ndarray, k: int) -> np.ndarray:
    # descending similarity, ties resolved toward the lower bank index
    order = np.lexsort((np.broadcast_to(np.arange(sims.shape[-1]), sims.shape), -sims), axis=-1)
    return order[..., :k]


def knn_predict(
    queries: np.ndarray, bank: LabeledBank, k: int = 5, temperature: float = 0.4
) -> np.ndarray:
    """Vectorized :func:`knn_classify` over ``[m, d]`` queries."""
    if not 1 <= k <= bank.n:
        raise ValueError(f"k must be in [1, {bank.n}], got {k}")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    sims = q @ bank.vectors.T
    nn_idx = _top_k(sims, k)
    nn_sim = np.take_along_axis(sims, nn_idx, axis=1)
    # shift by the row max: a common positive factor leaves the winner unchanged
    weights = np.exp((nn_sim - nn_sim[:, :1]) / temperature)
    num_classes = int(bank.labels.max()) + 1
    votes = np.zeros((len(q), num_classes))
    np.add.at(votes, (np.arange(len(q))[:, None], bank.labels[nn_idx]), weights)
    return votes.argmax(axis=1)  # argmax returns the lowest index on ties


def knn_classify(v: np.ndarray, bank: LabeledBank, k: int = 5, temperature: float = 0.4) -> int:
    """Label of ``v`` by exp(similarity / temperature)-weighted vote of its k nearest rows.

    Ties in the vote go to the lowest class index.
    """
    return int(knn_predict(np.asarray(v)[None, :], bank, k, temperature)[0])


def _report(pred: np.ndarray, labels: np.ndarray, num_classes: int | None, fold: int) -> EvalReport:
    correct = pred == labels
    n_cls = num_classes if num_classes is not None else int(max(labels.max(), pred.max())) + 1
    per_class = [
        float(correct[labels == c].mean()) if np.any(labels == c) else float("nan")
        for c in range(n_cls)
    ]
    return EvalReport(float(correct.mean()), per_class, int(len(labels)), fold)


def classification_accuracy(
    logits: np.ndarray, labels: np.ndarray, num_classes: int | None = None, fold: int = 0
) -> EvalReport:
    """Top-1 accuracy of ``argmax(logits)`` against integer ``labels``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.ndim != 1 or len(logits) != len(labels):
        raise ValueError(f"shape mismatch: logits {logits.shape}, labels {labels.shape}")
    if len(labels) == 0:
        raise ValueError("no instances to score")
    return _report(logits.argmax(axis=1), labels, num_classes or logits.shape[1], fold)


def knn_report(
    train_vectors, train_labels, eval_vectors, eval_labels, k=5, temperature=0.4, num_classes=None, fold=0
) -> EvalReport:
    bank = LabeledBank(train_vectors, train_labels)
    pred = knn_predict(eval_vectors, bank, k, temperature)
    return _report(pred, np.asarray(eval_labels, dtype=np.int64), num_classes, fold)


def aggregate_folds(values_per_fold) -> tuple[np.ndarray, np.ndarray]:
    """Per-epoch mean and population standard deviation across folds."""
    a = np.asarray(values_per_fold, dtype=np.float64)
    return a.mean(axis=0), a.std(axis=0)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_accuracy: float
    wall_clock_s: float


@dataclass
class TrainingCurve:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        if not 0.0 <= record.eval_accuracy <= 1.0 and not np.isnan(record.eval_accuracy):
            raise ValueError(f"accuracy {record.eval_accuracy} outside [0, 1]")
        if record.wall_clock_s < 0:
            raise ValueError("wall clock must be non-negative")
        self.records.append(record)

    @property
    def epochs(self) -> list[int]:
        return [r.epoch for r in self.records]

    @property
    def accuracies(self) -> list[float]:
        return [r.eval_accuracy for r in self.records]

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def __len__(self):
        return len(self.records)
