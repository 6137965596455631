"""Clinical label vectors and label-space similarity.

A report maps to 14 binary labels, one per entity, where the last label
("No Findings") is derived: it is 1 exactly when all other labels are 0.
Label vectors are therefore never all-zero.
"""

from __future__ import annotations

import numpy as np

from .reports import NO_FINDINGS, N_ENTITIES, PRESENT, Report


def label_vector(report: Report) -> np.ndarray:
    """14 binary labels; only present facts set bits, absence is implicit."""
    v = np.zeros(N_ENTITIES, dtype=np.float64)
    for fact in report.facts():
        if fact.polarity == PRESENT:
            v[fact.entity] = 1.0
    if not v[:NO_FINDINGS].any():
        v[NO_FINDINGS] = 1.0
    return v


def clinical_similarity(a: np.ndarray, b: np.ndarray, *, kind: str = "cosine") -> float:
    """Similarity of two label vectors in [0, 1]. Cosine by default; Jaccard
    is available behind the ``kind`` switch."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (N_ENTITIES,) or b.shape != (N_ENTITIES,):
        raise ValueError("label vectors must have 14 entries")
    if kind == "cosine":
        denom = float(np.linalg.norm(a) * np.linalg.norm(b))
        # min() absorbs float overshoot on identical vectors
        return min(float(a @ b) / denom, 1.0) if denom else 0.0
    if kind == "jaccard":
        union = float(np.maximum(a, b).sum())
        return float(np.minimum(a, b).sum()) / union if union else 0.0
    raise ValueError(f"unknown similarity kind: {kind!r}")


def label_matrix(reports: list[Report]) -> np.ndarray:
    return np.stack([label_vector(r) for r in reports]) if reports else np.zeros((0, N_ENTITIES))


def pairwise_clinical_similarity(labels: np.ndarray, *, kind: str = "cosine") -> np.ndarray:
    """All-pairs similarity for rows of a label matrix."""
    labels = np.asarray(labels, dtype=np.float64)
    if kind == "cosine":
        norms = np.linalg.norm(labels, axis=1, keepdims=True)
        unit = labels / np.where(norms == 0, 1.0, norms)
        return np.minimum(unit @ unit.T, 1.0)
    if kind == "jaccard":
        inter = np.minimum(labels[:, None, :], labels[None, :, :]).sum(axis=2)
        union = np.maximum(labels[:, None, :], labels[None, :, :]).sum(axis=2)
        return np.where(union == 0, 0.0, inter / np.where(union == 0, 1.0, union))
    raise ValueError(f"unknown similarity kind: {kind!r}")
