"""Dynamic soft contrastive targets fused from three similarity channels.

For a batch of B pairs plus H appended hard-negative texts, the raw target
matrix R is B x (B+H): the diagonal is 1, off-diagonal entries within the
batch accumulate threshold-gated, weighted similarities (text, clinical,
graph), and hard-negative columns stay exactly zero.  Rows are normalized to
sum to 1.  Targets are treated as constants by the loss: no gradient flows
through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clinical import label_matrix, pairwise_clinical_similarity
from .encoders import HyperBlock, ModelParams, encode_texts
from .graph import build_graph, gcn_encode
from .reports import Report


@dataclass
class SimilarityBundle:
    """Pairwise similarities of the B batch pairs, one B x B matrix per channel."""

    s_text: np.ndarray
    s_clin: np.ndarray
    s_graph: np.ndarray

    def __post_init__(self) -> None:
        shape = self.s_text.shape
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ValueError("similarity matrices must be square")
        if self.s_clin.shape != shape or self.s_graph.shape != shape:
            raise ValueError("similarity matrices must share one shape")


@dataclass
class SoftTargetMatrix:
    t: np.ndarray
    h: int

    @property
    def batch_size(self) -> int:
        return self.t.shape[0]

    def validate(self, atol: float = 1e-9) -> None:
        b = self.batch_size
        if self.t.shape[1] != b + self.h:
            raise ValueError("target matrix width must be B + H")
        if np.any(self.t < 0):
            raise ValueError("targets must be non-negative")
        if self.h and np.any(self.t[:, b:] != 0):
            raise ValueError("hard-negative columns must be zero")
        if np.any(np.abs(self.t.sum(axis=1) - 1.0) > atol):
            raise ValueError("target rows must sum to 1")


def fuse_targets(bundle: SimilarityBundle, hyper: HyperBlock, h: int = 0) -> SoftTargetMatrix:
    """Threshold-gate, weight and row-normalize the three channels."""
    b = bundle.s_text.shape[0]
    off = np.zeros((b, b))
    for s, tau, w in (
        (bundle.s_text, hyper.tau_t, hyper.w_t),
        (bundle.s_clin, hyper.tau_c, hyper.w_c),
        (bundle.s_graph, hyper.tau_g, hyper.w_g),
    ):
        off += w * np.where(s >= tau, s, 0.0)
    off = np.maximum(off, 0.0)
    np.fill_diagonal(off, 1.0)
    raw = np.zeros((b, b + h))
    raw[:, :b] = off
    return SoftTargetMatrix(raw / raw.sum(axis=1, keepdims=True), h)


def t2i_targets(t_i2t: SoftTargetMatrix) -> np.ndarray:
    """Text-to-image targets: the transposed in-batch block, row-normalized."""
    b = t_i2t.batch_size
    block = t_i2t.t[:, :b].T.copy()
    return block / block.sum(axis=1, keepdims=True)


def batch_similarities(
    reports: list[Report],
    params: ModelParams,
    *,
    text_emb: np.ndarray | None = None,
    graph_emb: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    clinical_kind: str = "cosine",
) -> SimilarityBundle:
    """Build the three channels for a batch.  Any precomputed inputs may be
    passed to avoid re-encoding; everything here is stop-gradient."""
    if text_emb is None:
        text_emb = encode_texts(reports, params)
    if graph_emb is None:
        graph_emb = np.stack([gcn_encode(build_graph(r, params.dims.d_tok), params.gcn)
                              for r in reports])
    if labels is None:
        labels = label_matrix(reports)
    return SimilarityBundle(
        s_text=text_emb @ text_emb.T,
        s_clin=pairwise_clinical_similarity(labels, kind=clinical_kind),
        s_graph=graph_emb @ graph_emb.T,
    )


def append_targets_csv(path, step: int, t: SoftTargetMatrix) -> None:
    """Debug dump: one line per target row, ``step,row,v0,v1,...``."""
    with open(path, "a", encoding="utf-8") as fh:
        for i, row in enumerate(t.t):
            fh.write(f"{step},{i}," + ",".join(repr(float(v)) for v in row) + "\n")
