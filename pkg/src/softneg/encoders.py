"""Image and text towers, fusion hyperparameters, and checkpoint I/O.

Both towers are two affine+tanh layers followed by L2 normalization into a
shared embedding space.  The text tower mean-pools deterministic hashed token
embeddings before the MLP; token sequences are truncated at ``MAX_TOKENS``.
Rows that normalize to nothing (for example an empty report) fall back to the
first basis vector and receive no gradient.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .graph import NODE_CLASSES, GcnParams, token_embed
from .reports import Report, render_report

logger = logging.getLogger("softneg.encoders")

MAX_TOKENS = 300

# Scaffolding words shared by nearly every sentence.  Left in, they dominate
# the pooled vector and push all report embeddings onto one hub direction;
# negation, entity, severity and location words are never filtered.
STOPWORDS = frozenset("a an are been has in is of the there".split())

_WORD = re.compile(r"[a-z]+")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def pool_tokens(report: Report, d_tok: int) -> tuple[np.ndarray, bool]:
    """Unit-normalized mean of hashed content-token embeddings
    (order-invariant under truncation).

    Mean pooling shrinks the vector by roughly 1/sqrt(n_tokens); without the
    renormalization the tower's bias terms would drown the content signal.
    Returns the pooled vector and whether any content token survived; a
    report with none falls back to the basis vector downstream.
    """
    tokens = [t for t in tokenize(render_report(report)) if t not in STOPWORDS]
    tokens = tokens[:MAX_TOKENS]
    if not tokens:
        return np.zeros(d_tok), True
    pooled = np.mean([token_embed(t, d_tok) for t in tokens], axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm < 1e-12:
        return np.zeros(d_tok), True
    return pooled / norm, False


@dataclass
class ModelDims:
    d_img: int = 16
    d_tok: int = 16
    hidden: int = 16
    d_emb: int = 8
    gcn_hidden: int = 8

    @property
    def gcn_in(self) -> int:
        return self.d_tok + len(NODE_CLASSES)  # token embedding + class one-hot

    def to_dict(self) -> dict:
        return {
            "d_img": self.d_img,
            "d_tok": self.d_tok,
            "hidden": self.hidden,
            "d_emb": self.d_emb,
            "gcn_hidden": self.gcn_hidden,
        }


@dataclass
class HyperBlock:
    """Fusion thresholds and weights for the three similarity channels."""

    tau_t: float = 0.9
    tau_c: float = 0.8
    tau_g: float = 0.7
    w_t: float = 0.167
    w_c: float = 0.167
    w_g: float = 0.167

    def to_dict(self) -> dict:
        return {
            "tau_t": self.tau_t,
            "tau_c": self.tau_c,
            "tau_g": self.tau_g,
            "w_t": self.w_t,
            "w_c": self.w_c,
            "w_g": self.w_g,
        }


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def init(rng: np.random.Generator, d_in: int, hidden: int, d_out: int) -> "MlpParams":
        # Zero biases keep the init odd in its input, so fresh towers have no
        # constant component that would bias cosine comparisons.
        a1 = 1.0 / np.sqrt(d_in)
        a2 = 1.0 / np.sqrt(hidden)
        return MlpParams(
            w1=rng.uniform(-a1, a1, size=(d_in, hidden)),
            b1=np.zeros(hidden),
            w2=rng.uniform(-a2, a2, size=(hidden, d_out)),
            b2=np.zeros(d_out),
        )


@dataclass
class ModelParams:
    img_mlp: MlpParams
    txt_mlp: MlpParams
    gcn: GcnParams
    tau: float = 0.1
    hyper: HyperBlock = field(default_factory=HyperBlock)
    dims: ModelDims = field(default_factory=ModelDims)

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


def init_model(seed: int, dims: ModelDims | None = None, *, tau: float = 0.1,
               hyper: HyperBlock | None = None) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    dims = dims or ModelDims()
    rng = np.random.default_rng(seed)
    img = MlpParams.init(rng, dims.d_img, dims.hidden, dims.d_emb)
    txt = MlpParams.init(rng, dims.d_tok, dims.hidden, dims.d_emb)
    a1 = 1.0 / np.sqrt(dims.gcn_in)
    a2 = 1.0 / np.sqrt(dims.gcn_hidden)
    gcn = GcnParams(
        w1=rng.uniform(-a1, a1, size=(dims.gcn_in, dims.gcn_hidden)),
        w2=rng.uniform(-a2, a2, size=(dims.gcn_hidden, dims.d_emb)),
    )
    return ModelParams(img, txt, gcn, tau=tau, hyper=hyper or HyperBlock(), dims=dims)


def tower_forward(x: np.ndarray, mlp: MlpParams, empty_mask: np.ndarray | None = None):
    """Run one tower. Returns (h1, y, yn, norms) with fallback rows applied.

    Rows flagged in ``empty_mask`` and rows whose norm underflows are pinned
    to the first basis vector with norms set to 0 (no gradient).
    """
    h1, y, yn, norms = kernels.mlp2_forward(x, mlp.w1, mlp.b1, mlp.w2, mlp.b2)
    if empty_mask is not None and empty_mask.any():
        yn[empty_mask] = 0.0
        yn[empty_mask, 0] = 1.0
        norms[empty_mask] = 0.0
    if (norms == 0.0).any():
        logger.warning("basis-vector fallback applied to %d row(s)", int((norms == 0).sum()))
    return h1, y, yn, norms


def encode_images(images: np.ndarray, params: ModelParams) -> np.ndarray:
    x = np.atleast_2d(np.asarray(images, dtype=np.float64))
    return tower_forward(x, params.img_mlp)[2]


def encode_image(image: np.ndarray, params: ModelParams) -> np.ndarray:
    return encode_images(image, params)[0]


def encode_texts(reports: list[Report], params: ModelParams) -> np.ndarray:
    pooled = np.zeros((len(reports), params.dims.d_tok))
    empty = np.zeros(len(reports), dtype=bool)
    for i, r in enumerate(reports):
        pooled[i], empty[i] = pool_tokens(r, params.dims.d_tok)
    return tower_forward(pooled, params.txt_mlp, empty)[2]


def encode_text(report: Report, params: ModelParams) -> np.ndarray:
    return encode_texts([report], params)[0]


def cosine_logits(u: np.ndarray, v: np.ndarray, tau: float) -> np.ndarray:
    """Scaled cosine similarities of unit rows: u @ v.T / tau."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return (u @ v.T) / tau


# --- flat parameter vector ---------------------------------------------------

FLAT_FIELDS: tuple[tuple[str, str], ...] = (
    ("img_mlp", "w1"),
    ("img_mlp", "b1"),
    ("img_mlp", "w2"),
    ("img_mlp", "b2"),
    ("txt_mlp", "w1"),
    ("txt_mlp", "b1"),
    ("txt_mlp", "w2"),
    ("txt_mlp", "b2"),
    ("gcn", "w1"),
    ("gcn", "w2"),
)


def _arrays(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    return [(f"{block}.{name}", getattr(getattr(params, block), name))
            for block, name in FLAT_FIELDS]


def param_layout(params: ModelParams) -> list[tuple[str, slice, tuple[int, ...]]]:
    layout = []
    start = 0
    for name, arr in _arrays(params):
        layout.append((name, slice(start, start + arr.size), arr.shape))
        start += arr.size
    return layout


def flatten_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([arr.ravel() for _, arr in _arrays(params)])


def n_trainable(params: ModelParams) -> int:
    """Length of the leading flat slice holding tower parameters; the graph
    encoder only feeds stop-gradient targets and is never updated."""
    return sum(arr.size for name, arr in _arrays(params) if not name.startswith("gcn."))


def unflatten_params(vec: np.ndarray, like: ModelParams) -> ModelParams:
    out = ModelParams(
        img_mlp=MlpParams(None, None, None, None),
        txt_mlp=MlpParams(None, None, None, None),
        gcn=GcnParams(None, None),
        tau=like.tau,
        hyper=like.hyper,
        dims=like.dims,
    )
    for name, sl, shape in param_layout(like):
        block, attr = name.split(".")
        setattr(getattr(out, block), attr, vec[sl].reshape(shape).copy())
    return out


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "softneg-checkpoint-v1"


def save_checkpoint(params: ModelParams, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "dims": params.dims.to_dict(),
        "tau": params.tau,
        "hyper": params.hyper.to_dict(),
        "arrays": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in _arrays(params)
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint file: {path}")
    dims = ModelDims(**doc["dims"])
    params = init_model(0, dims, tau=doc["tau"], hyper=HyperBlock(**doc["hyper"]))
    for name, spec in doc["arrays"].items():
        block, attr = name.split(".")
        arr = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        setattr(getattr(params, block), attr, arr)
    return params
