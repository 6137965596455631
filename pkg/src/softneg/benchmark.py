"""Negation alignment triplets and the five evaluation protocols.

A triplet pairs an image with its original report and a perturbed variant in
which every sentence about one present entity is removed and a single negated
statement about that entity is inserted at a seeded position.  Mediastinal
entities draw from fixed silhouette phrasings; all other entities use the
generic lung negation templates.

Evaluation covers: alignment accuracy (original vs perturbed), prompt-based
zero-shot classification per entity, top-1 report retrieval scored as
label-space macro-F1, normal-report detection rank, and a two-entity
adversarial confusion table.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .clinical import label_matrix, label_vector
from .encoders import ModelDims, ModelParams, encode_images, encode_texts, init_model
from .reports import (
    ABSENT,
    ENTITIES,
    NO_FINDINGS,
    PRESENT,
    Fact,
    Report,
    ReportPair,
    Sentence,
    entity_index,
    image_basis,
    make_sentence,
    parse_report,
    render_report,
)

INSERT_POSITIONS: tuple[str, ...] = ("begin", "middle", "end")

# Negation templates for non-mediastinal entities, by template_id.
LUNG_TEMPLATES: tuple[str, ...] = (
    "abs_no_seen",
    "abs_no_observed",
    "abs_there_no",
    "abs_no_evidence",
)

# Fixed phrasings for the two mediastinal entities, by template_id.
MEDIASTINAL_TEXTS: tuple[str, ...] = (
    "The cardiomediastinal silhouette is normal.",
    "The cardiac silhouette is unremarkable.",
    "The heart size is normal.",
    "The cardiomediastinal silhouette is within normal limits.",
    "No cardiomegaly.",
)

MEDIASTINAL_ENTITIES = frozenset(
    {entity_index("Cardiomegaly"), entity_index("Enlarged Cardiomediastinum")}
)

PRIORITY_ENTITIES = frozenset(
    entity_index(name)
    for name in (
        "Cardiomegaly",
        "Atelectasis",
        "Edema",
        "Pleural Effusion",
        "Pneumothorax",
        "Consolidation",
    )
)


@dataclass
class AlignTriplet:
    image: np.ndarray
    original: Report
    perturbed: Report
    entity: int
    insert_pos: str
    template_id: int


def negation_sentence(entity: int, template_id: int) -> Sentence:
    """The inserted negated statement for an entity and template id."""
    if entity in MEDIASTINAL_ENTITIES:
        text = MEDIASTINAL_TEXTS[template_id]
        return Sentence(text, parse_report(text).facts()[0])
    fact = Fact(entity, ABSENT, negation_phrase="no")
    return make_sentence(fact, LUNG_TEMPLATES[template_id])


def n_templates(entity: int) -> int:
    return len(MEDIASTINAL_TEXTS) if entity in MEDIASTINAL_ENTITIES else len(LUNG_TEMPLATES)


def make_align_triplet(
    pair: ReportPair,
    seed: int | list[int],
    *,
    entity_weights: np.ndarray | None = None,
    priority_multiplier: float = 2.0,
) -> AlignTriplet | None:
    """Perturb one present entity of a pair; None if nothing is present.

    The entity is drawn in proportion to ``entity_weights`` (uniform when
    omitted) with prioritized entities upweighted by ``priority_multiplier``.
    """
    report, image = pair
    candidates = sorted(set(report.present_entities()))
    if not candidates:
        return None
    rng = np.random.default_rng(seed)
    w = np.ones(len(candidates))
    for k, e in enumerate(candidates):
        if entity_weights is not None:
            w[k] = max(float(entity_weights[e]), 1e-12)
        if e in PRIORITY_ENTITIES:
            w[k] *= priority_multiplier
    entity = int(rng.choice(candidates, p=w / w.sum()))
    template_id = int(rng.integers(n_templates(entity)))
    insert_pos = str(rng.choice(INSERT_POSITIONS))

    remaining = [s for s in report.sentences if s.fact.entity != entity]
    inserted = negation_sentence(entity, template_id)
    if insert_pos == "begin":
        at = 0
    elif insert_pos == "end":
        at = len(remaining)
    else:
        at = len(remaining) // 2
    perturbed = Report(remaining[:at] + [inserted] + remaining[at:])
    return AlignTriplet(np.asarray(image, dtype=np.float64), report, perturbed,
                        entity, insert_pos, template_id)


def corpus_entity_weights(pairs: list[ReportPair]) -> np.ndarray:
    """Empirical distribution of present entities across a corpus."""
    counts = np.zeros(NO_FINDINGS)
    for report, _ in pairs:
        for e in report.present_entities():
            counts[e] += 1
    total = counts.sum()
    return counts / total if total else np.full(NO_FINDINGS, 1.0 / NO_FINDINGS)


def build_align_set(
    pairs: list[ReportPair],
    seed: int,
    *,
    entity_weights: np.ndarray | None = None,
    priority_multiplier: float = 2.0,
    n_triplets: int | None = None,
) -> list[AlignTriplet]:
    triplets = []
    for i, pair in enumerate(pairs):
        t = make_align_triplet(
            pair,
            [seed, i],
            entity_weights=entity_weights,
            priority_multiplier=priority_multiplier,
        )
        if t is not None:
            triplets.append(t)
            if n_triplets is not None and len(triplets) >= n_triplets:
                break
    return triplets


def save_triplets_jsonl(triplets: list[AlignTriplet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            record = {
                "image": [float(v) for v in t.image],
                "original": render_report(t.original),
                "perturbed": render_report(t.perturbed),
                "entity": ENTITIES[t.entity],
                "insert_pos": t.insert_pos,
                "template_id": t.template_id,
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_triplets_jsonl(path) -> list[AlignTriplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r = json.loads(line)
            out.append(
                AlignTriplet(
                    image=np.asarray(r["image"], dtype=np.float64),
                    original=parse_report(r["original"]),
                    perturbed=parse_report(r["perturbed"]),
                    entity=entity_index(r["entity"]),
                    insert_pos=r["insert_pos"],
                    template_id=r["template_id"],
                )
            )
    return out


# --- models -------------------------------------------------------------------

class EmbeddingModel(Protocol):
    def embed_images(self, images: np.ndarray) -> np.ndarray: ...

    def embed_reports(self, reports: list[Report]) -> np.ndarray: ...


class TrainedModel:
    """Adapter exposing a parameter set through the evaluation interface."""

    def __init__(self, params: ModelParams):
        self.params = params

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        return encode_images(images, self.params)

    def embed_reports(self, reports: list[Report]) -> np.ndarray:
        return encode_texts(reports, self.params)


def random_model(seed: int = 0, dims: ModelDims | None = None) -> TrainedModel:
    """Freshly initialized, untrained towers.

    Untrained towers are not an unbiased null: shared directions in the
    inputs (entity base rates, negation tokens) couple through the random
    weights into a per-seed preference of up to roughly +/-0.1 alignment
    accuracy at desk widths.  Use ``RandomEmbeddingModel`` when an exact
    chance-level reference is needed.
    """
    return TrainedModel(init_model(seed, dims))


class RandomEmbeddingModel:
    """Chance-level null: every distinct input gets a seeded random unit vector.

    Embeddings are keyed by content hash, so repeated items embed
    identically, while any two distinct items get independent directions.
    Scores against this model are pure coin flips regardless of any
    structure in the data, which makes it the correct null for checking
    that a benchmark is balanced.
    """

    def __init__(self, seed: int = 0, dim: int = 8):
        self.seed = seed
        self.dim = dim

    def _unit(self, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(str(self.seed).encode() + b"\x00" + payload).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(images, dtype=np.float64))
        return np.stack([self._unit(row.tobytes()) for row in x])

    def embed_reports(self, reports: list[Report]) -> np.ndarray:
        return np.stack([self._unit(r.text().encode()) for r in reports])


class OracleModel:
    """Upper-bound reference embedding both sides in label space.

    Reports embed as normalized label vectors.  Images are decoded against
    the generator's orthonormal entity basis with a fixed threshold, and the
    derived no-findings bit is recomputed from the decoded bits.
    """

    def __init__(self, image_dim: int | None = None, threshold: float = 0.3):
        self.basis = image_basis(image_dim) if image_dim else image_basis()
        self.threshold = threshold

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(images, dtype=np.float64))
        bits = (x @ self.basis.T > self.threshold).astype(np.float64)
        has_finding = bits[:, :NO_FINDINGS].any(axis=1)
        bits[:, NO_FINDINGS] = np.where(has_finding, 0.0, 1.0)
        return bits / np.linalg.norm(bits, axis=1, keepdims=True)

    def embed_reports(self, reports: list[Report]) -> np.ndarray:
        labels = label_matrix(reports)
        return labels / np.linalg.norm(labels, axis=1, keepdims=True)


def _chunked_reports(model: EmbeddingModel, reports: list[Report], threads: int = 1,
                     chunk: int = 256) -> np.ndarray:
    """Embed reports in fixed-size chunks (optionally across threads).

    The chunk size never depends on the thread count, so results are
    byte-identical for any ``threads`` value.
    """
    chunks = [reports[i : i + chunk] for i in range(0, len(reports), chunk)]
    if not chunks:
        return np.zeros((0, 0))
    if threads <= 1 or len(chunks) == 1:
        parts = [model.embed_reports(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(model.embed_reports, chunks))
    return np.concatenate(parts, axis=0)


# --- protocol 1: alignment ------------------------------------------------------

@dataclass
class AlignResult:
    accuracy: float
    n: int
    by_entity: dict[str, tuple[int, int]]
    by_position: dict[str, tuple[int, int]]
    by_template: dict[int, tuple[int, int]]


def eval_align(model: EmbeddingModel, triplets: list[AlignTriplet],
               threads: int = 1) -> AlignResult:
    """Fraction of triplets where the image scores the original strictly
    above the perturbed report; ties count as failures."""
    if not triplets:
        raise ValueError("no triplets to evaluate")
    img = model.embed_images(np.stack([t.image for t in triplets]))
    orig = _chunked_reports(model, [t.original for t in triplets], threads)
    pert = _chunked_reports(model, [t.perturbed for t in triplets], threads)
    cos_o = (img * orig).sum(axis=1)
    cos_p = (img * pert).sum(axis=1)
    correct = cos_o > cos_p

    def tally(keys) -> dict:
        out: dict = {}
        for k, c in zip(keys, correct):
            won, n = out.get(k, (0, 0))
            out[k] = (won + int(c), n + 1)
        return out

    return AlignResult(
        accuracy=float(correct.mean()),
        n=len(triplets),
        by_entity=tally([ENTITIES[t.entity] for t in triplets]),
        by_position=tally([t.insert_pos for t in triplets]),
        by_template=tally([t.template_id for t in triplets]),
    )


def write_align_csv(result: AlignResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("section,key,n,accuracy\n")
        fh.write(f"overall,all,{result.n},{result.accuracy!r}\n")
        for section, table in (
            ("entity", result.by_entity),
            ("position", result.by_position),
            ("template", result.by_template),
        ):
            for key, (won, n) in sorted(table.items(), key=lambda kv: str(kv[0])):
                fh.write(f"{section},{key},{n},{won / n!r}\n")


# --- protocol 2: zero-shot classification ---------------------------------------

def zeroshot_prompts(entity: int) -> tuple[Report, Report]:
    """Positive and negated prompt reports rendered through the grammar."""
    pos = Report([make_sentence(Fact(entity, PRESENT), "there_is")])
    neg = Report([make_sentence(Fact(entity, ABSENT, negation_phrase="no"), "abs_there_no")])
    return pos, neg


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels > 0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ZeroShotResult:
    rows: list[dict]
    notices: list[str]

    def macro_accuracy(self) -> float:
        return float(np.mean([r["accuracy"] for r in self.rows])) if self.rows else float("nan")


def eval_zeroshot(model: EmbeddingModel, pairs: list[ReportPair],
                  entities: list[int] | None = None, threads: int = 1) -> ZeroShotResult:
    """Score every image against per-entity prompt pairs.

    Predicts positive when the positive prompt scores strictly higher.
    Entities with no positive example in the testset are skipped with a
    notice; AUC needs both classes and is NaN otherwise.
    """
    if not pairs:
        raise ValueError("no pairs to evaluate")
    entities = list(entities) if entities is not None else list(range(NO_FINDINGS))
    labels = label_matrix([p.report for p in pairs])
    img = model.embed_images(np.stack([np.asarray(p.image, dtype=np.float64) for p in pairs]))
    rows: list[dict] = []
    notices: list[str] = []
    for e in entities:
        truth = labels[:, e]
        n_pos = int(truth.sum())
        n_neg = len(truth) - n_pos
        if n_pos == 0:
            notices.append(f"{ENTITIES[e]}: no positive example in testset; skipped")
            continue
        pos, neg = zeroshot_prompts(e)
        emb = _chunked_reports(model, [pos, neg], threads)
        margin = img @ emb[0] - img @ emb[1]
        pred = margin > 0
        acc = float((pred == (truth > 0)).mean())
        auc = _rank_auc(margin, truth) if n_neg else float("nan")
        rows.append(
            {"entity": ENTITIES[e], "n_pos": n_pos, "n_neg": n_neg,
             "accuracy": acc, "auc": auc}
        )
    return ZeroShotResult(rows, notices)


def write_zeroshot_csv(result: ZeroShotResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("entity,n_pos,n_neg,accuracy,auc\n")
        for r in result.rows:
            fh.write(f"{r['entity']},{r['n_pos']},{r['n_neg']},{r['accuracy']!r},{r['auc']!r}\n")
        for note in result.notices:
            fh.write(f"# {note}\n")


# --- protocol 3: top-1 retrieval as label macro-F1 -------------------------------

@dataclass
class RetrievalResult:
    macro_f1: float
    per_label: list[dict]
    top1: np.ndarray


def eval_retrieval(model: EmbeddingModel, query_pairs: list[ReportPair],
                   gallery: list[Report], threads: int = 1) -> RetrievalResult:
    """Retrieve the top-1 gallery report per query image and compare label
    vectors.  A label with neither true nor predicted positives scores 1.0."""
    if not query_pairs or not gallery:
        raise ValueError("retrieval needs queries and a gallery")
    img = model.embed_images(np.stack([np.asarray(p.image, dtype=np.float64)
                                       for p in query_pairs]))
    gal = _chunked_reports(model, gallery, threads)
    top1 = np.argmax(img @ gal.T, axis=1)
    truth = label_matrix([p.report for p in query_pairs])
    pred = label_matrix([gallery[i] for i in top1])
    per_label = []
    f1s = []
    for e in range(truth.shape[1]):
        tp = float(((pred[:, e] == 1) & (truth[:, e] == 1)).sum())
        fp = float(((pred[:, e] == 1) & (truth[:, e] == 0)).sum())
        fn = float(((pred[:, e] == 0) & (truth[:, e] == 1)).sum())
        f1 = 1.0 if (tp + fp + fn) == 0 else 2 * tp / (2 * tp + fp + fn)
        f1s.append(f1)
        per_label.append({"entity": ENTITIES[e], "tp": int(tp), "fp": int(fp),
                          "fn": int(fn), "f1": f1})
    return RetrievalResult(float(np.mean(f1s)), per_label, top1)


def write_retrieval_csv(result: RetrievalResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("entity,tp,fp,fn,f1\n")
        for r in result.per_label:
            fh.write(f"{r['entity']},{r['tp']},{r['fp']},{r['fn']},{r['f1']!r}\n")
        fh.write(f"macro,,,,{result.macro_f1!r}\n")


# --- protocol 4: normal-report detection -----------------------------------------

@dataclass
class NormalDetectionResult:
    top1_accuracy: float
    median_rank: float
    ranks: list[int]


def eval_normal_detection(model: EmbeddingModel, normal_report: Report,
                          abnormal_reports: list[Report], normal_images: np.ndarray,
                          threads: int = 1) -> NormalDetectionResult:
    """Rank the single normal report among abnormal candidates for each
    normal image."""
    if label_vector(normal_report)[NO_FINDINGS] != 1:
        raise ValueError("normal_report must carry the no-findings label")
    for r in abnormal_reports:
        if label_vector(r)[NO_FINDINGS] == 1:
            raise ValueError("abnormal candidate set contains a normal report")
    candidates = [normal_report] + list(abnormal_reports)
    emb = _chunked_reports(model, candidates, threads)
    img = model.embed_images(np.atleast_2d(np.asarray(normal_images, dtype=np.float64)))
    scores = img @ emb.T
    ranks = []
    for row in scores:
        order = np.argsort(-row, kind="stable")
        ranks.append(int(np.nonzero(order == 0)[0][0]) + 1)
    ranks_arr = np.asarray(ranks)
    return NormalDetectionResult(
        top1_accuracy=float((ranks_arr == 1).mean()),
        median_rank=float(np.median(ranks_arr)),
        ranks=ranks,
    )


def write_normal_csv(result: NormalDetectionResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        fh.write(f"top1_accuracy,{result.top1_accuracy!r}\n")
        fh.write(f"median_rank,{result.median_rank!r}\n")
        fh.write("ranks," + ";".join(str(r) for r in result.ranks) + "\n")


# --- protocol 5: two-entity adversarial confusion --------------------------------

def two_entity_subset(pairs: list[ReportPair], entity_a: int, entity_b: int) -> list[ReportPair]:
    """Pairs whose report states exactly one of the two entities as present."""
    out = []
    for p in pairs:
        present = set(p.report.present_entities())
        if (entity_a in present) != (entity_b in present):
            out.append(p)
    return out


@dataclass
class AdversarialResult:
    entity_a: str
    entity_b: str
    counts: dict[str, dict[str, int]]
    n: int


def eval_adversarial(model: EmbeddingModel, pairs: list[ReportPair],
                     entity_a: int, entity_b: int, threads: int = 1) -> AdversarialResult:
    """Prompt-pair decisions for the present and the absent entity of each
    pair.  Rows of the count table sum to the testset size."""
    subset = two_entity_subset(pairs, entity_a, entity_b)
    if not subset:
        raise ValueError("no pair states exactly one of the two entities")
    img = model.embed_images(np.stack([np.asarray(p.image, dtype=np.float64)
                                       for p in subset]))
    prompts = {}
    for e in (entity_a, entity_b):
        pos, neg = zeroshot_prompts(e)
        emb = _chunked_reports(model, [pos, neg], threads)
        prompts[e] = (emb[0], emb[1])
    counts = {"present": {"positive": 0, "negative": 0},
              "absent": {"positive": 0, "negative": 0}}
    for i, p in enumerate(subset):
        present = set(p.report.present_entities())
        e_present = entity_a if entity_a in present else entity_b
        e_absent = entity_b if e_present == entity_a else entity_a
        for role, e in (("present", e_present), ("absent", e_absent)):
            pos_emb, neg_emb = prompts[e]
            verdict = "positive" if img[i] @ pos_emb > img[i] @ neg_emb else "negative"
            counts[role][verdict] += 1
    return AdversarialResult(ENTITIES[entity_a], ENTITIES[entity_b], counts, len(subset))


def write_adversarial_csv(result: AdversarialResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ground_truth,positive,negative,n\n")
        for role in ("present", "absent"):
            c = result.counts[role]
            fh.write(f"{role},{c['positive']},{c['negative']},{result.n}\n")
