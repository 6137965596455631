"""End-to-end acceptance suite.

Each test covers one numbered acceptance criterion and records a single
PASS/FAIL line, echoed after the run summary, so a full run leaves an
auditable one-line-per-criterion record.  Fixtures are pinned — seeds,
corpus sizes and tolerances are part of the contract, not tuning knobs.
"""

import time
from collections import Counter

import numpy as np
import pytest

from softneg.benchmark import (
    MEDIASTINAL_ENTITIES,
    OracleModel,
    RandomEmbeddingModel,
    TrainedModel,
    build_align_set,
    corpus_entity_weights,
    eval_align,
    eval_normal_detection,
    save_triplets_jsonl,
)
from softneg.cli import main as cli_main
from softneg.clinical import label_vector
from softneg.encoders import HyperBlock, init_model
from softneg.kernels import pure
from softneg.loss import build_batch, gradient_check
from softneg.reports import (
    NO_FINDINGS,
    TEMPLATED_NORMALS,
    CorpusSpec,
    dedup_pairs,
    generate_corpus,
    parse_report,
    render_report,
)
from softneg.softlabel import SimilarityBundle, fuse_targets
from softneg.trainer import (
    STANDARD_ABLATION,
    TrainConfig,
    ablation_matrix,
    ablation_variant,
    standard_ablation,
    train,
)


# --- shared pinned fixtures ---------------------------------------------------

@pytest.fixture(scope="module")
def train_corpus():
    return generate_corpus(CorpusSpec(n_reports=2000, seed=100))


@pytest.fixture(scope="module")
def eval_corpus():
    # noisier images keep trained models off the ceiling so orderings resolve
    return generate_corpus(CorpusSpec(n_reports=4000, seed=900, noise_sigma=0.25))


@pytest.fixture(scope="module")
def eval_triplets(eval_corpus):
    return build_align_set(eval_corpus, 7,
                           entity_weights=corpus_entity_weights(eval_corpus))


# --- criterion 1: analytic gradients match finite differences ------------------

def test_criterion_1_gradient_fidelity(criterion_report):
    start = time.perf_counter()
    worst = 0.0
    for seed in (0, 1, 2):
        pairs = generate_corpus(CorpusSpec(n_reports=16, seed=seed))
        params = init_model(seed)
        batch = build_batch(pairs, params, hardneg_rate=0.5, seed=seed)
        err = gradient_check(params, batch, epsilon=1e-5,
                             max_coords=200, coord_seed=seed)
        worst = max(worst, err)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30.0
    criterion_report(1, ok, f"max relative error {worst:.3e} over 3 seeds x 200 coords "
                   f"in {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 30.0


# --- criterion 2: soft-target algebra over 1,000 random bundles ----------------

def test_criterion_2_soft_target_properties(criterion_report):
    rng = np.random.default_rng(0)
    hyper = HyperBlock()
    tight = HyperBlock(tau_t=0.95, tau_c=0.9, tau_g=0.85)
    hard = HyperBlock(tau_t=1.01, tau_c=1.01, tau_g=1.01)

    def bundle(b: int) -> SimilarityBundle:
        mats = []
        for _ in range(3):
            m = rng.uniform(-1.0, 1.0, size=(b, b))
            m = (m + m.T) / 2.0
            np.fill_diagonal(m, 1.0)
            mats.append(m)
        return SimilarityBundle(*mats)

    start = time.perf_counter()
    for _ in range(1000):
        b = int(rng.integers(1, 9))
        h = int(rng.integers(0, 5))
        s = bundle(b)
        t = fuse_targets(s, hyper, h)
        assert np.all(t.t >= 0)
        assert np.allclose(t.t.sum(axis=1), 1.0, atol=1e-9)
        if h:
            assert np.all(t.t[:, b:] == 0.0)
        t_tight = fuse_targets(s, tight, h)
        assert np.all(np.diag(t_tight.t) >= np.diag(t.t) - 1e-12)
        t_hard = fuse_targets(s, hard, h)
        assert np.allclose(t_hard.t[:, :b], np.eye(b))
        assert np.all(t_hard.t[:, b:] == 0.0)
    elapsed = time.perf_counter() - start
    ok = elapsed < 5.0
    criterion_report(2, ok, f"1000 bundles: row-stochastic, threshold-monotone, "
                   f"one-hot limit, zero hard-negative columns in {elapsed:.2f}s")
    assert elapsed < 5.0


# --- criterion 3: hand-computed fusion examples --------------------------------

def test_criterion_3_fusion_hand_values(criterion_report):
    low = np.array([[1.0, 0.1], [0.1, 1.0]])
    ones = np.ones((2, 2))
    single = fuse_targets(SimilarityBundle(low, ones, low), HyperBlock()).t[0]
    saturated = fuse_targets(SimilarityBundle(ones, ones, ones), HyperBlock()).t[0]
    ok = (np.allclose(single, [0.85690, 0.14310], atol=1e-4)
          and np.allclose(saturated, [0.66622, 0.33378], atol=1e-4))
    criterion_report(3, ok, f"single-channel row {single.round(5).tolist()}, "
                   f"saturated row {saturated.round(5).tolist()}")
    assert single == pytest.approx([0.85690, 0.14310], abs=1e-4)
    assert saturated == pytest.approx([0.66622, 0.33378], abs=1e-4)


# --- criterion 4: ablation ordering on alignment accuracy ----------------------

def test_criterion_4_ablation_ordering(criterion_report, train_corpus, eval_corpus):
    start = time.perf_counter()
    accs: dict[str, list[float]] = {name: [] for name in STANDARD_ABLATION}
    for seed in (0, 1, 2):
        rows = ablation_matrix(
            standard_ablation(TrainConfig(seed=seed, epochs=8)),
            train_corpus, eval_corpus, triplet_seed=7,
        )
        for row in rows:
            accs[row["config"]].append(row["align_accuracy"])
    elapsed = time.perf_counter() - start
    mean = {name: float(np.mean(vals)) for name, vals in accs.items()}
    margin_soft = mean["soft_hardneg"] - mean["soft"]
    margin_hard = mean["soft_hardneg"] - mean["hard_labels"]
    ok = margin_soft >= 0.02 and margin_hard >= 0.02 and elapsed < 600.0
    criterion_report(4, ok,
            f"3-seed align means {{hard {mean['hard_labels']:.4f}, "
            f"soft {mean['soft']:.4f}, hardneg {mean['hardneg']:.4f}, "
            f"both {mean['soft_hardneg']:.4f}}}; both-soft "
            f"{margin_soft:+.4f}, both-hard {margin_hard:+.4f} in {elapsed:.0f}s")
    assert margin_soft >= 0.02
    assert margin_hard >= 0.02
    assert elapsed < 600.0


# --- criterion 5: benchmark sanity against null and oracle models --------------

def test_criterion_5_benchmark_sanity(criterion_report, eval_triplets):
    assert len(eval_triplets) >= 2000
    null_accs = [eval_align(RandomEmbeddingModel(seed=s), eval_triplets).accuracy
                 for s in (0, 1, 2)]
    oracle_acc = eval_align(OracleModel(), eval_triplets).accuracy
    ok = all(0.45 <= a <= 0.55 for a in null_accs) and oracle_acc > 0.95
    criterion_report(5, ok, f"null accuracies {[round(a, 4) for a in null_accs]} on "
                   f"{len(eval_triplets)} triplets; oracle {oracle_acc:.4f}")
    for acc in null_accs:
        assert 0.45 <= acc <= 0.55
    assert oracle_acc > 0.95


# --- criterion 6: duplicate robustness on normal-report retrieval --------------

def test_criterion_6_duplicate_robustness(criterion_report):
    imbalanced = generate_corpus(CorpusSpec(
        n_reports=2000, normal_fraction=0.7, duplicate_mass=0.8, seed=300))
    counts = Counter(render_report(p.report) for p in imbalanced)
    dup_normal = sum(
        1 for p in imbalanced
        if p.report.is_templated_normal and counts[render_report(p.report)] > 1
    ) / len(imbalanced)
    assert dup_normal > 0.5  # the imbalance the criterion is about

    deduped = dedup_pairs(imbalanced)
    holdout = generate_corpus(CorpusSpec(n_reports=1000, seed=901))
    normal_images = np.stack([p.image for p in holdout
                              if label_vector(p.report)[NO_FINDINGS] == 1])
    abnormal = [p.report for p in holdout
                if label_vector(p.report)[NO_FINDINGS] == 0]

    medians = []
    for seed in (0, 1, 2):
        base = TrainConfig(seed=seed, epochs=16)
        soft = train(ablation_variant(base, "soft"), imbalanced).params
        hard = train(ablation_variant(base, "hard_labels"), deduped).params
        pair = []
        for params in (soft, hard):
            res = eval_normal_detection(TrainedModel(params), TEMPLATED_NORMALS[0],
                                        abnormal, normal_images)
            pair.append(res.median_rank)
        medians.append(tuple(pair))

    ok = all(soft_m <= hard_m for soft_m, hard_m in medians)
    criterion_report(6, ok, f"duplicated-normal mass {dup_normal:.3f}; per-seed median "
                   f"ranks (soft-on-imbalanced vs dedup baseline) {medians}")
    for soft_m, hard_m in medians:
        assert soft_m <= hard_m


# --- criterion 7: triplet generation fidelity -----------------------------------

def test_criterion_7_generation_fidelity(criterion_report, tmp_path):
    corpus = generate_corpus(CorpusSpec(n_reports=1800, seed=400))
    triplets = build_align_set(corpus, seed=12, n_triplets=1000)
    assert len(triplets) == 1000

    lung_templates, mediastinal_templates, positions = set(), set(), set()
    for t in triplets:
        reparsed = parse_report(render_report(t.perturbed))
        assert render_report(reparsed) == render_report(t.perturbed)
        assert label_vector(t.original)[t.entity] == 1.0
        assert label_vector(t.perturbed)[t.entity] == 0.0
        positions.add(t.insert_pos)
        if t.entity in MEDIASTINAL_ENTITIES:
            mediastinal_templates.add(t.template_id)
        else:
            lung_templates.add(t.template_id)

    again = build_align_set(corpus, seed=12, n_triplets=1000)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_triplets_jsonl(triplets, pa)
    save_triplets_jsonl(again, pb)
    identical = pa.read_bytes() == pb.read_bytes()

    ok = (positions == {"begin", "middle", "end"}
          and lung_templates == {0, 1, 2, 3}
          and mediastinal_templates == {0, 1, 2, 3, 4}
          and identical)
    criterion_report(7, ok, f"1000/1000 parse + cleared-bit; positions {sorted(positions)}, "
                   f"template ids {sorted(lung_templates)}+{sorted(mediastinal_templates)}; "
                   f"regeneration byte-identical: {identical}")
    assert positions == {"begin", "middle", "end"}
    assert lung_templates == {0, 1, 2, 3}
    assert mediastinal_templates == {0, 1, 2, 3, 4}
    assert identical


# --- criterion 8: graph encoder correctness -------------------------------------

def test_criterion_8_graph_encoder(criterion_report):
    # single node, identity weights: relu is a no-op on non-negative features,
    # so the output is the normalized feature row
    f = np.array([[0.5, 0.25, 0.0, 1.0]])
    out1 = pure.gcn_forward(f, np.zeros((0, 2), dtype=np.int64), np.eye(4), np.eye(4))
    want1 = f[0] / np.linalg.norm(f[0])
    err1 = float(np.max(np.abs(out1 - want1)))

    # two-node chain, hand-expanded message passing
    feats = np.array([[1.0, 0.0], [0.0, 2.0]])
    w1 = np.array([[0.5, -1.0], [0.25, 0.75]])
    w2 = np.array([[1.0, 0.5], [-0.5, 0.25]])
    edges = np.array([[0, 1]], dtype=np.int64)
    ahat = np.full((2, 2), 0.5)
    h1 = np.maximum(ahat @ (feats @ w1), 0.0)
    pooled = (ahat @ (h1 @ w2)).mean(axis=0)
    want2 = pooled / np.linalg.norm(pooled)
    out2 = pure.gcn_forward(feats, edges, w1, w2)
    err2 = float(np.max(np.abs(out2 - want2)))

    rng = np.random.default_rng(8)
    worst_perm = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 10))
        feats = rng.normal(size=(n, 6))
        n_edges = int(rng.integers(0, n * 2))
        edges = rng.integers(0, n, size=(n_edges, 2)).astype(np.int64)
        w1 = rng.normal(size=(6, 5)) * 0.5
        w2 = rng.normal(size=(5, 4)) * 0.5
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        base = pure.gcn_forward(feats, edges, w1, w2)
        shuffled = pure.gcn_forward(feats[perm], inv[edges], w1, w2)
        worst_perm = max(worst_perm, float(np.max(np.abs(base - shuffled))))

    ok = err1 < 1e-9 and err2 < 1e-9 and worst_perm < 1e-9
    criterion_report(8, ok, f"hand oracles err {err1:.1e}/{err2:.1e}; "
                   f"permutation deviation over 100 graphs {worst_perm:.1e}")
    assert err1 < 1e-9
    assert err2 < 1e-9
    assert worst_perm < 1e-9


# --- criterion 9: byte-identical artifacts per subcommand -----------------------

def _run_twice(tmp_path, name: str, argv: list[str],
               mismatches: list[str]) -> list[str]:
    """Run a subcommand into two fresh dirs and compare artifacts.

    timing.csv is wall-clock telemetry and sits outside the byte-identity
    contract; everything else must match exactly.
    """
    dirs = []
    for sub in ("a", "b"):
        out = tmp_path / name / sub
        assert cli_main(argv + ["--out-dir", str(out)]) == 0
        dirs.append(out)
    names = sorted(p.name for p in dirs[0].iterdir() if p.name != "timing.csv")
    if names != sorted(p.name for p in dirs[1].iterdir() if p.name != "timing.csv"):
        mismatches.append(f"{name}: artifact sets differ")
        return names
    for n in names:
        if (dirs[0] / n).read_bytes() != (dirs[1] / n).read_bytes():
            mismatches.append(f"{name}/{n}")
    return names


def test_criterion_9_determinism(criterion_report, tmp_path, capsys):
    mismatches: list[str] = []
    checked: dict[str, list[str]] = {}
    checked["gen-corpus"] = _run_twice(
        tmp_path, "gen-corpus", ["gen-corpus", "--n", "96", "--seed", "5"],
        mismatches)
    corpus = str(tmp_path / "gen-corpus" / "a" / "corpus.jsonl")

    checked["train"] = _run_twice(
        tmp_path, "train",
        ["train", "--corpus", corpus, "--epochs", "2", "--seed", "1",
         "--threads", "1"], mismatches)
    checkpoint = str(tmp_path / "train" / "a" / "checkpoint.json")

    checked["gen-align"] = _run_twice(
        tmp_path, "gen-align", ["gen-align", "--corpus", corpus, "--seed", "2"],
        mismatches)
    triplets = str(tmp_path / "gen-align" / "a" / "triplets.jsonl")

    checked["eval"] = _run_twice(
        tmp_path, "eval",
        ["eval", "--model", "checkpoint", "--checkpoint", checkpoint,
         "--protocol", "all", "--corpus", corpus, "--triplets", triplets,
         "--threads", "1"], mismatches)

    checked["ablate"] = _run_twice(
        tmp_path, "ablate",
        ["ablate", "--corpus", corpus, "--epochs", "1", "--configs", "2",
         "--seed", "0"], mismatches)

    capsys.readouterr()
    assert cli_main(["grad-check", "--seed", "3", "--batch-size", "8",
                     "--max-coords", "50"]) == 0
    first = capsys.readouterr().out
    assert cli_main(["grad-check", "--seed", "3", "--batch-size", "8",
                     "--max-coords", "50"]) == 0
    second = capsys.readouterr().out
    if first != second:
        mismatches.append("grad-check/stdout")
    checked["grad-check"] = ["stdout"]

    n_artifacts = sum(len(v) for v in checked.values())
    detail = (f"6 subcommands, {n_artifacts} artifacts byte-identical "
              f"(timing sidecar excluded)")
    if mismatches:
        detail = "mismatched: " + ", ".join(mismatches)
    criterion_report(9, not mismatches, detail)
    assert not mismatches
