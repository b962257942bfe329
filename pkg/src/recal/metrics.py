"""Label assignment, NMI, Jaccard consensus and small reporting helpers."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

PROVENANCES = ("predicted", "ground_truth", "kmeans")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    K: int
    provenance: str = "predicted"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size == 0:
            raise ContractError("a cluster assignment needs at least one sample")
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        if self.labels.min() < 0 or self.labels.max() >= self.K:
            raise ContractError(f"labels must lie in [0, {self.K})")

    def __len__(self):
        return self.labels.size

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)


def _labels(x) -> np.ndarray:
    if isinstance(x, ClusterAssignment):
        return x.labels
    return np.asarray(x).reshape(-1)


def assign_labels(p, provenance: str = "predicted") -> ClusterAssignment:
    """Row-wise argmax of a posterior (or logit) matrix; ties go to the lowest index."""
    p = np.asarray(getattr(p, "data", p), dtype=np.float64)
    return ClusterAssignment(np.argmax(p, axis=1), p.shape[1], provenance)


def cluster_histogram(labels, K: int) -> np.ndarray:
    return np.bincount(_labels(labels), minlength=K)


def contingency_table(a, b) -> np.ndarray:
    a, b = _labels(a), _labels(b)
    if a.size != b.size:
        raise ContractError(f"label vectors differ in length: {a.size} vs {b.size}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    ka, kb = ai.max() + 1, bi.max() + 1
    return np.bincount(ai * kb + bi, minlength=ka * kb).reshape(ka, kb)


def _entropy(counts: np.ndarray, n: int) -> float:
    q = counts[counts > 0] / n
    return float(-np.sum(q * np.log(q)))


def nmi(a, b) -> float:
    """Normalized mutual information ``I(A;B) / sqrt(H(A) H(B))``.

    If either labeling is constant the score is 0, except that two
    constant labelings (the same trivial partition) score 1.
    """
    table = contingency_table(a, b)
    n = int(table.sum())
    if n == 0:
        raise ContractError("cannot score empty labelings")
    ra, cb = table.sum(axis=1), table.sum(axis=0)
    ha, hb = _entropy(ra, n), _entropy(cb, n)
    if ha == 0.0 or hb == 0.0:
        return 1.0 if ha == 0.0 and hb == 0.0 else 0.0
    nz = table > 0
    nij = table[nz].astype(np.float64)
    outer = np.outer(ra, cb)[nz].astype(np.float64)
    mi = float(np.sum(nij / n * np.log(n * nij / outer)))
    return float(min(max(mi / np.sqrt(ha * hb), 0.0), 1.0))


def _as_set(m) -> set:
    if isinstance(m, (set, frozenset)):
        return set(m)
    arr = np.asarray(m)
    if arr.dtype == bool:
        return set(np.flatnonzero(arr).tolist())
    return set(arr.reshape(-1).tolist())


def jaccard(m1, m2) -> float:
    """``|m1 & m2| / |m1 | m2|`` for index sets, index arrays or boolean masks."""
    s1, s2 = _as_set(m1), _as_set(m2)
    union = len(s1 | s2)
    if union == 0:
        warnings.warn("jaccard of two empty sets is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return len(s1 & s2) / union


def cross_model_consensus(assign1, assign2, K: int) -> np.ndarray:
    """K x K matrix; entry (i, j) is the Jaccard score between the samples
    labelled ``i`` by the first model and ``j`` by the second."""
    a, b = _labels(assign1), _labels(assign2)
    if a.size != b.size:
        raise ContractError(f"assignments differ in length: {a.size} vs {b.size}")
    inter = np.bincount(a * K + b, minlength=K * K).reshape(K, K).astype(np.float64)
    union = np.bincount(a, minlength=K)[:, None] + np.bincount(b, minlength=K)[None, :] - inter
    out = np.zeros((K, K))
    np.divide(inter, union, out=out, where=union > 0)
    return out


def best_match_jaccard(truth: np.ndarray, predicted: np.ndarray, K: int) -> list[float]:
    """For every true region (or class), the best Jaccard score over the K
    predicted labels. Inputs are label grids of the same shape."""
    t, p = np.asarray(truth).ravel(), np.asarray(predicted).ravel()
    return [max(jaccard(t == g, p == k) for k in range(K)) for g in np.unique(t).tolist()]


def write_metrics_report(metrics: dict, txt_path, csv_path=None, jaccard_matrix=None, jaccard_path=None) -> None:
    """Key-value text report plus optional CSV copies."""
    with open(txt_path, "w") as f:
        for k in sorted(metrics):
            f.write(f"{k}={_fmt(metrics[k])}\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k in sorted(metrics):
                w.writerow([k, _fmt(metrics[k])])
    if jaccard_matrix is not None and jaccard_path is not None:
        write_matrix_csv(jaccard_matrix, jaccard_path)


def write_matrix_csv(matrix: np.ndarray, path, row_prefix: str = "m1_", col_prefix: str = "m2_") -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([""] + [f"{col_prefix}{j}" for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([f"{row_prefix}{i}"] + [_fmt(float(v)) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return str(v)
