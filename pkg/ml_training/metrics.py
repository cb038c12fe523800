# [file name]: metrics.py
"""Evaluation of predictive distributions: NLL, entropy, accuracy, teacher-student gap."""

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import entr

from ml_training.data_pipeline import masking_rate
from ml_training.errors import ValidationError

PROB_FLOOR = 1e-12

CSV_COLUMNS = [
    'model_family', 'n_labeled', 'mask_side', 'mask_rate', 'capacity_factor',
    'nll_teacher', 'nll_student', 'delta', 'seed',
]


@dataclass(frozen=True)
class MetricRecord:
    """One results-table row"""

    model_family: str
    n_labeled: int
    mask_side: int
    mask_rate: float
    capacity_factor: float
    nll_teacher: float
    nll_student: float
    delta: float
    seed: int

    @classmethod
    def build(cls, model_family, n_labeled, mask_side, capacity_factor, nll_teacher, nll_student, seed):
        record = cls(
            model_family=model_family,
            n_labeled=int(n_labeled),
            mask_side=int(mask_side),
            mask_rate=masking_rate(mask_side),
            capacity_factor=float(capacity_factor),
            nll_teacher=float(nll_teacher),
            nll_student=float(nll_student),
            delta=0.0,
            seed=int(seed),
        )
        return replace(record, delta=gap(record))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{name: data[name] for name in CSV_COLUMNS})


@dataclass(frozen=True)
class EntropySummary:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float

    def to_dict(self):
        return asdict(self)


def _true_class_probs(pred_probs, labels):
    pred_probs = np.asarray(pred_probs)
    labels = np.asarray(labels, dtype=np.int64)
    return pred_probs[np.arange(labels.shape[0]), labels]


def nll(pred_probs, labels):
    """Mean -ln p(true class), nats"""
    probs = np.maximum(_true_class_probs(pred_probs, labels), PROB_FLOOR)
    return float(np.mean(-np.log(probs)))


def predictive_entropy(row):
    """-sum p ln p with 0 ln 0 = 0"""
    return float(entr(np.asarray(row, dtype=np.float64)).sum())


def predictive_entropies(pred_probs):
    return entr(np.asarray(pred_probs, dtype=np.float64)).sum(axis=-1)


def mutual_information(mean_probs, expected_entropy):
    """Entropy of the averaged prediction minus the average per-sample entropy, per row"""
    return predictive_entropies(mean_probs) - np.asarray(expected_entropy)


def accuracy(pred_probs, labels):
    """Fraction of rows whose argmax (lowest index on ties) equals the label"""
    predicted = np.argmax(np.asarray(pred_probs), axis=-1)
    return float(np.mean(predicted == np.asarray(labels)))


def gap(record):
    return record.nll_student - record.nll_teacher


def entropy_summary(entropies):
    """Five-number summary (linear-interpolation quartiles, sample extremes) plus the mean"""
    values = np.asarray(entropies, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValidationError("entropy summary of an empty list")
    q1, median, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    return EntropySummary(
        min=float(values.min()),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        max=float(values.max()),
        mean=float(values.mean()),
    )
