"""Training loop, optimizers, and the ablation matrix.

Runs are bit-reproducible for a given config and seed: batching, hard
negative selection, and sentence shuffling each draw from their own seeded
stream, and the metrics log contains no wall-clock values (timings go to a
separate sidecar file).  Only the two towers are updated; the graph encoder
feeds stop-gradient targets and stays at its initialization.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clinical import label_matrix
from .encoders import (
    HyperBlock,
    ModelDims,
    ModelParams,
    flatten_params,
    init_model,
    n_trainable,
    pool_tokens,
    save_checkpoint,
    tokenize,
    unflatten_params,
)
from .graph import build_graph, gcn_encode
from .loss import EncodedBatch, batch_targets, model_loss_and_grad
from .negation import attach_hard_negatives
from .reports import ReportPair, render_report, shuffle_sentences
from .softlabel import append_targets_csv

logger = logging.getLogger("softneg.trainer")

METRICS_HEADER = ("epoch", "loss", "i2t", "t2i", "h_mean")


class NanLossError(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint was kept."""


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-2
    optimizer: str = "sgd"
    momentum: float = 0.0
    weight_decay: float = 0.01
    hardneg_rate: float = 0.5
    n_flips: int = 1
    tau: float = 0.1
    tau_t: float = 0.9
    tau_c: float = 0.8
    tau_g: float = 0.7
    w_t: float = 0.167
    w_c: float = 0.167
    w_g: float = 0.167
    d_img: int = 16
    d_tok: int = 16
    hidden: int = 16
    d_emb: int = 8
    gcn_hidden: int = 8
    shuffle_text: bool = True
    clinical_kind: str = "cosine"
    dump_targets: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.tau <= 0:
            raise ValueError("lr and tau must be positive")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer: {self.optimizer!r}")
        if not 0.0 <= self.hardneg_rate <= 1.0:
            raise ValueError("hardneg_rate must lie in [0, 1]")

    def hyper(self) -> HyperBlock:
        return HyperBlock(self.tau_t, self.tau_c, self.tau_g, self.w_t, self.w_c, self.w_g)

    def dims(self) -> ModelDims:
        return ModelDims(self.d_img, self.d_tok, self.hidden, self.d_emb, self.gcn_hidden)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**d)


def load_train_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return TrainConfig.from_dict(json.load(fh))


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    checkpoint_path: Path | None = None


class _Optimizer:
    """SGD (optional momentum) or AdamW over the trainable slice."""

    def __init__(self, config: TrainConfig, n_params: int):
        self.config = config
        self.velocity = np.zeros(n_params)
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.optimizer == "sgd":
            if cfg.momentum:
                self.velocity = cfg.momentum * self.velocity + grad
                return theta - cfg.lr * self.velocity
            return theta - cfg.lr * grad
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        return theta - cfg.lr * (mhat / (np.sqrt(vhat) + eps) + cfg.weight_decay * theta)


class _CorpusCache:
    """Pooled token vectors, labels and frozen graph embeddings per pair.

    Pooling is keyed on the token multiset: sentence shuffling cannot change
    it below the truncation limit, so augmented variants hit the cache.
    """

    def __init__(self, pairs: list[ReportPair], params: ModelParams):
        self.pairs = pairs
        self.d_tok = params.dims.d_tok
        self._pool: dict[tuple, tuple[np.ndarray, bool]] = {}
        self.images = np.stack([np.asarray(p.image, dtype=np.float64) for p in pairs])
        self.labels = label_matrix([p.report for p in pairs])
        emb = {}
        rows = []
        for p in pairs:
            text = render_report(p.report)
            if text not in emb:
                emb[text] = gcn_encode(build_graph(p.report, self.d_tok), params.gcn)
            rows.append(emb[text])
        self.graph_emb = np.stack(rows)

    def pooled(self, report) -> tuple[np.ndarray, bool]:
        tokens = tokenize(render_report(report))
        if len(tokens) > 300:
            return pool_tokens(report, self.d_tok)
        key = tuple(sorted(tokens))
        hit = self._pool.get(key)
        if hit is None:
            hit = pool_tokens(report, self.d_tok)
            self._pool[key] = hit
        return hit


def _encode_step_batch(
    cache: _CorpusCache,
    idx: np.ndarray,
    config: TrainConfig,
    shuffle_rng: np.random.Generator,
    hardneg_seed: int,
) -> EncodedBatch:
    pairs = [cache.pairs[i] for i in idx]
    if config.shuffle_text:
        pairs = [
            ReportPair(shuffle_sentences(p.report, int(shuffle_rng.integers(2**63))), p.image)
            for p in pairs
        ]
    extras = []
    if config.hardneg_rate > 0:
        extras = attach_hard_negatives(
            pairs, config.hardneg_rate, hardneg_seed, n_flips=config.n_flips
        ).extras
    texts = [p.report for p in pairs] + extras
    pooled = np.zeros((len(texts), cache.d_tok))
    empty = np.zeros(len(texts), dtype=bool)
    for i, r in enumerate(texts):
        pooled[i], empty[i] = cache.pooled(r)
    return EncodedBatch(
        img=cache.images[idx],
        txt_pooled=pooled,
        txt_empty=empty,
        labels=cache.labels[idx],
        graph_emb=cache.graph_emb[idx],
        h=len(extras),
    )


def _write_metrics(out_dir: Path, metrics: list[dict]) -> None:
    with open(out_dir / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for row in metrics:
            fh.write(
                f"{row['epoch']},{row['loss']!r},{row['i2t']!r},"
                f"{row['t2i']!r},{row['h_mean']!r}\n"
            )
    with open(out_dir / "timing.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,wall_ms\n")
        for row in metrics:
            fh.write(f"{row['epoch']},{row['wall_ms']!r}\n")


def train(config: TrainConfig, corpus: list[ReportPair], out_dir=None) -> TrainResult:
    """Train on a corpus; optionally write metrics, timing and a checkpoint.

    With ``epochs=0`` the saved checkpoint is exactly the initialization.
    A non-finite loss aborts the run after re-saving the last epoch's params.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = init_model(config.seed, config.dims(), tau=config.tau, hyper=config.hyper())
    cache = _CorpusCache(corpus, params)
    theta = flatten_params(params)
    nt = n_trainable(params)
    opt = _Optimizer(config, nt)
    batch_rng = np.random.default_rng([config.seed, 1])
    hardneg_rng = np.random.default_rng([config.seed, 2])
    shuffle_rng = np.random.default_rng([config.seed, 3])
    n = len(corpus)
    metrics: list[dict] = []
    last_good = copy.deepcopy(params)

    def persist(p: ModelParams) -> Path | None:
        if out is None:
            return None
        path = out / "checkpoint.json"
        save_checkpoint(p, path)
        return path

    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = batch_rng.permutation(n)
        losses, l_i2t, l_t2i, hs = [], [], [], []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = _encode_step_batch(
                cache, idx, config, shuffle_rng, int(hardneg_rng.integers(2**63))
            )
            rep = model_loss_and_grad(params, batch)
            if not np.isfinite(rep.total):
                persist(last_good)
                if out is not None:
                    _write_metrics(out, metrics)
                err = NanLossError(
                    f"non-finite loss at epoch {epoch}, step {step}; "
                    "last good checkpoint retained"
                )
                err.last_good = last_good
                raise err
            if config.dump_targets and out is not None:
                append_targets_csv(out / "targets.csv", step, batch_targets(params, batch)[0])
            theta[:nt] = opt.step(theta[:nt], rep.grad[:nt])
            params = unflatten_params(theta, params)
            losses.append(rep.total)
            l_i2t.append(rep.i2t)
            l_t2i.append(rep.t2i)
            hs.append(batch.h)
            step += 1
        wall_ms = (time.perf_counter() - t0) * 1000.0
        metrics.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "i2t": float(np.mean(l_i2t)),
                "t2i": float(np.mean(l_t2i)),
                "h_mean": float(np.mean(hs)),
                "wall_ms": wall_ms,
            }
        )
        last_good = copy.deepcopy(params)
        logger.info("epoch %d: loss=%.5f h_mean=%.2f", epoch, metrics[-1]["loss"], metrics[-1]["h_mean"])

    path = persist(params)
    if out is not None:
        _write_metrics(out, metrics)
    return TrainResult(params, metrics, path)


# --- ablation ----------------------------------------------------------------

HARD_LABEL_THRESHOLD = 1.01  # above any similarity, so every gate closes

STANDARD_ABLATION = ("hard_labels", "soft", "hardneg", "soft_hardneg")


def ablation_variant(base: TrainConfig, name: str) -> TrainConfig:
    """One named row of the standard ladder, derived from a base config."""
    hard = dict(tau_t=HARD_LABEL_THRESHOLD, tau_c=HARD_LABEL_THRESHOLD, tau_g=HARD_LABEL_THRESHOLD)
    if name == "hard_labels":
        return dataclasses.replace(base, hardneg_rate=0.0, **hard)
    if name == "soft":
        return dataclasses.replace(base, hardneg_rate=0.0)
    if name == "hardneg":
        return dataclasses.replace(base, **hard)
    if name == "soft_hardneg":
        return dataclasses.replace(base)
    raise ValueError(f"unknown ablation variant: {name!r}")


def standard_ablation(base: TrainConfig, names=STANDARD_ABLATION) -> list[tuple[str, TrainConfig]]:
    return [(name, ablation_variant(base, name)) for name in names]


def ablation_matrix(
    configs: list[tuple[str, TrainConfig]],
    corpus: list[ReportPair],
    eval_pairs: list[ReportPair],
    *,
    triplet_seed: int = 0,
    n_triplets: int | None = None,
) -> list[dict]:
    """Train each config on the corpus and score it on one shared set of
    alignment triplets built from held-out pairs."""
    from .benchmark import TrainedModel, build_align_set, corpus_entity_weights, eval_align

    triplets = build_align_set(
        eval_pairs,
        triplet_seed,
        entity_weights=corpus_entity_weights(eval_pairs),
        n_triplets=n_triplets,
    )
    rows = []
    for name, cfg in configs:
        result = train(cfg, corpus)
        score = eval_align(TrainedModel(result.params), triplets)
        rows.append(
            {
                "config": name,
                "final_loss": result.metrics[-1]["loss"] if result.metrics else float("nan"),
                "align_accuracy": score.accuracy,
                "n_triplets": len(triplets),
            }
        )
        logger.info("ablation %s: align=%.4f", name, score.accuracy)
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("config,final_loss,align_accuracy,n_triplets\n")
        for r in rows:
            fh.write(
                f"{r['config']},{r['final_loss']!r},{r['align_accuracy']!r},{r['n_triplets']}\n"
            )
