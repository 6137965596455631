"""Report graphs and a small two-layer graph convolutional encoder.

Each fact contributes one observation node (OBS-DP when present, OBS-DA when
absent); location words add ANAT-DP nodes and severity words add OBS-U nodes,
each linked to their observation by an undirected edge.  Node features are a
deterministic hashed token embedding concatenated with a one-hot node class.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .reports import ENTITIES, PRESENT, Report

NODE_CLASSES: tuple[str, ...] = ("ANAT-DP", "OBS-DP", "OBS-DA", "OBS-U")

TOKEN_DIM = 16
# Node feature width is the token embedding plus the one-hot class block.
FEATURE_DIM = TOKEN_DIM + len(NODE_CLASSES)

# Layer widths used by the reference configuration at full scale.
PAPER_GCN_DIMS: tuple[int, int, int] = (772, 256, 512)


@lru_cache(maxsize=65536)
def token_embed(token: str, dim: int = TOKEN_DIM) -> np.ndarray:
    """Deterministic unit vector for a token, derived from a content hash."""
    if dim < 1:
        raise ValueError("embedding dim must be positive")
    digest = hashlib.sha256(f"{dim}:{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.flags.writeable = False
    return v


@dataclass
class ReportGraph:
    tokens: list[str]
    classes: list[str]
    edges: list[tuple[int, int]]
    features: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.tokens)


def _node_feature(token: str, node_class: str, d_tok: int) -> np.ndarray:
    one_hot = np.zeros(len(NODE_CLASSES))
    one_hot[NODE_CLASSES.index(node_class)] = 1.0
    return np.concatenate([token_embed(token, d_tok), one_hot])


def build_graph(report: Report, d_tok: int = TOKEN_DIM) -> ReportGraph:
    tokens: list[str] = []
    classes: list[str] = []
    edges: list[tuple[int, int]] = []
    rows: list[np.ndarray] = []

    def add(token: str, node_class: str) -> int:
        tokens.append(token)
        classes.append(node_class)
        rows.append(_node_feature(token, node_class, d_tok))
        return len(tokens) - 1

    for fact in report.facts():
        obs_class = "OBS-DP" if fact.polarity == PRESENT else "OBS-DA"
        obs = add(ENTITIES[fact.entity].lower(), obs_class)
        if fact.location is not None:
            edges.append((obs, add(fact.location, "ANAT-DP")))
        if fact.severity is not None:
            edges.append((obs, add(fact.severity, "OBS-U")))

    features = np.stack(rows) if rows else np.zeros((0, d_tok + len(NODE_CLASSES)))
    return ReportGraph(tokens, classes, edges, features)


@dataclass
class GcnParams:
    w1: np.ndarray
    w2: np.ndarray

    @staticmethod
    def init(
        seed: int,
        d_in: int = FEATURE_DIM,
        d_hidden: int = 8,
        d_out: int = 8,
    ) -> "GcnParams":
        rng = np.random.default_rng(seed)
        a1 = 1.0 / np.sqrt(d_in)
        a2 = 1.0 / np.sqrt(d_hidden)
        return GcnParams(
            w1=rng.uniform(-a1, a1, size=(d_in, d_hidden)),
            w2=rng.uniform(-a2, a2, size=(d_hidden, d_out)),
        )


def normalized_adjacency(n_nodes: int, edges: list[tuple[int, int]]) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops: D^-1/2 (A+I) D^-1/2."""
    a = np.eye(n_nodes)
    for i, j in edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


def gcn_encode(graph: ReportGraph, params: GcnParams) -> np.ndarray:
    """Mean-pooled, L2-normalized graph embedding; empty graphs map to zero."""
    edges = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
    return kernels.gcn_forward(graph.features, edges, params.w1, params.w2)
