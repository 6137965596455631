"""Backend dispatch for the numeric kernels.

Two interchangeable implementations exist: the NumPy reference in
:mod:`softneg.kernels.pure` and a compiled extension.  The default is the
NumPy backend, which benchmarks faster end to end at every tested width
(vectorized tanh beats the scalar loop; see benchmarks/backend_bench.py).
The choice can be forced with the ``SOFTNEG_BACKEND`` environment variable
(``c`` or ``python``) or at runtime with :func:`set_backend`.
"""

from __future__ import annotations

import os

import numpy as np

from . import pure as _pure

try:
    from .. import _ckernels as _compiled
except ImportError:
    _compiled = None

_BACKENDS = {"python": _pure}
if _compiled is not None:
    _BACKENDS["c"] = _compiled

_ALIASES = {"py": "python", "numpy": "python"}


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def _default_backend() -> str:
    wanted = os.environ.get("SOFTNEG_BACKEND")
    if wanted:
        wanted = _ALIASES.get(wanted.lower(), wanted.lower())
        if wanted not in _BACKENDS:
            raise ImportError(
                f"SOFTNEG_BACKEND={wanted!r} is not available; "
                f"choices: {available_backends()}"
            )
        return wanted
    return "python"


_active = _default_backend()


def backend_name() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    name = _ALIASES.get(name.lower(), name.lower())
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choices: {available_backends()}")
    _active = name


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def mlp2_forward(x, w1, b1, w2, b2):
    return _BACKENDS[_active].mlp2_forward(_f64(x), _f64(w1), _f64(b1), _f64(w2), _f64(b2))


def mlp2_backward(x, h1, y, yn, norms, dyn, w1, w2):
    return _BACKENDS[_active].mlp2_backward(
        _f64(x), _f64(h1), _f64(y), _f64(yn), _f64(norms), _f64(dyn), _f64(w1), _f64(w2)
    )


def softmax_xent(logits, targets):
    return _BACKENDS[_active].softmax_xent(_f64(logits), _f64(targets))


def gcn_forward(feats, edges, w1, w2):
    edges = np.ascontiguousarray(edges, dtype=np.int64).reshape(-1, 2)
    return _BACKENDS[_active].gcn_forward(_f64(feats), edges, _f64(w1), _f64(w2))
