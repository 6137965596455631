"""Symmetric soft-label contrastive loss with analytic parameter gradients.

The image-to-text direction scores each image against all B + H text
candidates (batch texts plus appended hard negatives); the text-to-image
direction scores the B batch texts against the B images.  Targets are
row-stochastic constants: gradients flow through the logits into both towers
but never into the targets or the graph encoder that feeds them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .clinical import label_matrix, pairwise_clinical_similarity
from .encoders import (
    ModelParams,
    flatten_params,
    param_layout,
    pool_tokens,
    tower_forward,
    unflatten_params,
)
from .graph import build_graph, gcn_encode
from .negation import attach_hard_negatives
from .reports import ReportPair
from .softlabel import SimilarityBundle, SoftTargetMatrix, fuse_targets, t2i_targets


class TargetContractError(ValueError):
    """Targets handed to the loss are not row-stochastic."""


class GradientCheckError(RuntimeError):
    """A finite-difference probe produced a non-finite value."""


@dataclass
class LossReport:
    total: float
    i2t: float
    t2i: float
    grad: np.ndarray


def _check_rows(t: np.ndarray, what: str) -> None:
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6):
        raise TargetContractError(f"{what} targets must be row-stochastic")


def soft_contrastive_loss(
    logits_i2t: np.ndarray,
    logits_t2i: np.ndarray,
    t_i2t: SoftTargetMatrix | np.ndarray,
    t_t2i: np.ndarray,
) -> LossReport:
    """Mean soft cross-entropy in both directions, averaged.

    ``grad`` is the gradient of the averaged loss w.r.t. the concatenated
    flattened logits (image-to-text block first).
    """
    ti = t_i2t.t if isinstance(t_i2t, SoftTargetMatrix) else np.asarray(t_i2t)
    tt = np.asarray(t_t2i)
    _check_rows(ti, "image-to-text")
    _check_rows(tt, "text-to-image")
    if logits_i2t.shape != ti.shape or logits_t2i.shape != tt.shape:
        raise ValueError("logits and targets must agree in shape")
    loss_i2t, d_i2t = kernels.softmax_xent(logits_i2t, ti)
    loss_t2i, d_t2i = kernels.softmax_xent(logits_t2i, tt)
    total = 0.5 * (loss_i2t + loss_t2i)
    grad = np.concatenate([0.5 * d_i2t.ravel(), 0.5 * d_t2i.ravel()])
    return LossReport(total, loss_i2t, loss_t2i, grad)


@dataclass
class EncodedBatch:
    """Raw tower inputs for one step.  ``txt_pooled`` holds the B batch texts
    followed by H hard-negative texts; labels and graph embeddings cover the
    B pairs only and act as fixed target inputs."""

    img: np.ndarray
    txt_pooled: np.ndarray
    txt_empty: np.ndarray
    labels: np.ndarray
    graph_emb: np.ndarray
    h: int

    @property
    def batch_size(self) -> int:
        return self.img.shape[0]


def build_batch(
    pairs: list[ReportPair],
    params: ModelParams,
    *,
    hardneg_rate: float = 0.0,
    seed: int = 0,
    n_flips: int = 1,
) -> EncodedBatch:
    """Encode raw pairs into tower inputs, appending hard negatives at ``rate``."""
    reports = [p.report for p in pairs]
    extras = []
    if hardneg_rate > 0:
        extras = attach_hard_negatives(pairs, hardneg_rate, seed, n_flips=n_flips).extras
    texts = reports + extras
    d_tok = params.dims.d_tok
    pooled = np.zeros((len(texts), d_tok))
    empty = np.zeros(len(texts), dtype=bool)
    for i, r in enumerate(texts):
        pooled[i], empty[i] = pool_tokens(r, d_tok)
    graph_emb = np.stack([gcn_encode(build_graph(r, d_tok), params.gcn) for r in reports])
    return EncodedBatch(
        img=np.stack([np.asarray(p.image, dtype=np.float64) for p in pairs]),
        txt_pooled=pooled,
        txt_empty=empty,
        labels=label_matrix(reports),
        graph_emb=graph_emb,
        h=len(extras),
    )


def batch_targets(
    params: ModelParams,
    batch: EncodedBatch,
    text_emb: np.ndarray | None = None,
) -> tuple[SoftTargetMatrix, np.ndarray]:
    """Fuse the dynamic targets for a batch from current text embeddings and
    the fixed clinical/graph channels.  Constants w.r.t. the parameters."""
    b = batch.batch_size
    if text_emb is None:
        v = tower_forward(batch.txt_pooled[:b], params.txt_mlp, batch.txt_empty[:b])[2]
    else:
        v = text_emb[:b]
    bundle = SimilarityBundle(
        s_text=v @ v.T,
        s_clin=pairwise_clinical_similarity(batch.labels),
        s_graph=batch.graph_emb @ batch.graph_emb.T,
    )
    t_i2t = fuse_targets(bundle, params.hyper, batch.h)
    return t_i2t, t2i_targets(t_i2t)


def model_loss_and_grad(
    params: ModelParams,
    batch: EncodedBatch,
    *,
    targets: tuple[SoftTargetMatrix, np.ndarray] | None = None,
    want_grad: bool = True,
) -> LossReport:
    """Forward pass and, if requested, the flat analytic parameter gradient.

    The gradient vector follows the flatten_params layout; the trailing graph
    encoder block is identically zero because targets are stop-gradient.
    """
    b = batch.batch_size
    tau = params.tau
    img_h1, img_y, u, img_norms = tower_forward(batch.img, params.img_mlp)
    txt_h1, txt_y, v, txt_norms = tower_forward(batch.txt_pooled, params.txt_mlp, batch.txt_empty)
    if targets is None:
        targets = batch_targets(params, batch, text_emb=v)
    t_i2t, t_t2i = targets
    logits_i2t = (u @ v.T) / tau
    logits_t2i = (v[:b] @ u.T) / tau
    rep = soft_contrastive_loss(logits_i2t, logits_t2i, t_i2t, t_t2i)
    if not want_grad:
        return LossReport(rep.total, rep.i2t, rep.t2i, np.zeros(0))

    d_i2t = rep.grad[: logits_i2t.size].reshape(logits_i2t.shape)
    d_t2i = rep.grad[logits_i2t.size:].reshape(logits_t2i.shape)
    du = (d_i2t @ v) / tau + (d_t2i.T @ v[:b]) / tau
    dv = (d_i2t.T @ u) / tau
    dv[:b] += (d_t2i @ u) / tau
    g_img = kernels.mlp2_backward(
        batch.img, img_h1, img_y, u, img_norms, du, params.img_mlp.w1, params.img_mlp.w2
    )
    g_txt = kernels.mlp2_backward(
        batch.txt_pooled, txt_h1, txt_y, v, txt_norms, dv,
        params.txt_mlp.w1, params.txt_mlp.w2,
    )
    grad = np.concatenate(
        [a.ravel() for a in g_img]
        + [a.ravel() for a in g_txt]
        + [np.zeros(params.gcn.w1.size), np.zeros(params.gcn.w2.size)]
    )
    return LossReport(rep.total, rep.i2t, rep.t2i, grad)


def gradient_check(
    params: ModelParams,
    batch: EncodedBatch,
    epsilon: float = 1e-5,
    *,
    max_coords: int | None = None,
    coord_seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Targets are fused once from the unperturbed parameters and held fixed
    across probes, matching their stop-gradient treatment in the loss.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    frozen = batch_targets(params, batch)
    analytic = model_loss_and_grad(params, batch, targets=frozen).grad
    vec = flatten_params(params)
    n = vec.size
    if max_coords is not None and max_coords < n:
        rng = np.random.default_rng(coord_seed)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)

    layout = param_layout(params)

    def coord_name(idx: int) -> str:
        for name, sl, _ in layout:
            if sl.start <= idx < sl.stop:
                return f"{name}[{idx - sl.start}]"
        return f"flat[{idx}]"

    def loss_at(v: np.ndarray) -> float:
        p = unflatten_params(v, params)
        return model_loss_and_grad(p, batch, targets=frozen, want_grad=False).total

    worst = 0.0
    for idx in coords:
        idx = int(idx)
        probe = vec.copy()
        probe[idx] = vec[idx] + epsilon
        up = loss_at(probe)
        probe[idx] = vec[idx] - epsilon
        down = loss_at(probe)
        fd = (up - down) / (2.0 * epsilon)
        if not np.isfinite(fd):
            raise GradientCheckError(f"non-finite finite difference at {coord_name(idx)}")
        rel = abs(fd - analytic[idx]) / (abs(analytic[idx]) + 1e-8)
        if not np.isfinite(rel):
            raise GradientCheckError(f"non-finite relative error at {coord_name(idx)}")
        worst = max(worst, rel)
    return worst
