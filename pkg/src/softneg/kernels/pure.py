"""NumPy reference implementations of the numeric kernels.

These define the semantics; the compiled extension must match them to
floating-point round-off.  All kernels take and return float64 arrays.

Normalization fallback convention: a row whose pre-normalization norm falls
below 1e-12 is replaced by the first basis vector and its entry in the
returned ``norms`` array is set to 0, which the backward pass reads as
"no gradient flows through this row".
"""

from __future__ import annotations

import numpy as np

_TINY = 1e-12


def mlp2_forward(x, w1, b1, w2, b2):
    """Two affine+tanh layers followed by row L2 normalization.

    Returns (h1, y, yn, norms): first hidden activations, pre-normalization
    outputs, normalized outputs, and the per-row norms (0 marks fallback rows).
    """
    h1 = np.tanh(x @ w1 + b1)
    y = np.tanh(h1 @ w2 + b2)
    norms = np.sqrt((y * y).sum(axis=1))
    fallback = norms < _TINY
    safe = np.where(fallback, 1.0, norms)
    yn = y / safe[:, None]
    if fallback.any():
        yn[fallback] = 0.0
        yn[fallback, 0] = 1.0
        norms = norms.copy()
        norms[fallback] = 0.0
    return h1, y, yn, norms


def mlp2_backward(x, h1, y, yn, norms, dyn, w1, w2):
    """Gradients of the mlp2_forward stack w.r.t. its four parameters."""
    dy = np.zeros_like(y)
    ok = norms > 0.0
    if ok.any():
        d = dyn[ok]
        u = yn[ok]
        dy[ok] = (d - u * (u * d).sum(axis=1, keepdims=True)) / norms[ok][:, None]
    dz2 = dy * (1.0 - y * y)
    dw2 = h1.T @ dz2
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ w2.T) * (1.0 - h1 * h1)
    dw1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    return dw1, db1, dw2, db2


def softmax_xent(logits, targets):
    """Mean soft cross-entropy over rows and its gradient w.r.t. logits.

    loss = -(1/B) sum_i sum_j T[i,j] log softmax(logits[i])[j]
    dlogits = (softmax(logits) - T) / B, valid for row-stochastic T.
    """
    b = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    z = ex.sum(axis=1, keepdims=True)
    logp = (logits - m) - np.log(z)
    loss = float(-(targets * logp).sum() / b)
    dlogits = (ex / z - targets) / b
    return loss, dlogits


def gcn_forward(feats, edges, w1, w2):
    """Two-layer graph convolution with symmetric normalization, mean pooling
    and L2 normalization (skipped when the pooled norm is zero).

    ``edges`` is an (E, 2) int64 array of undirected node index pairs.
    An empty graph maps to the zero vector.
    """
    n = feats.shape[0]
    if n == 0:
        return np.zeros(w2.shape[1])
    a = np.eye(n)
    for k in range(edges.shape[0]):
        i, j = int(edges[k, 0]), int(edges[k, 1])
        a[i, j] = 1.0
        a[j, i] = 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    ahat = a * dinv[:, None] * dinv[None, :]
    h1 = np.maximum(ahat @ (feats @ w1), 0.0)
    h2 = ahat @ (h1 @ w2)
    pooled = h2.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    return pooled / norm if norm > _TINY else pooled
