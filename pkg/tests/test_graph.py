import numpy as np
import pytest

from softneg.graph import (
    FEATURE_DIM,
    NODE_CLASSES,
    PAPER_GCN_DIMS,
    GcnParams,
    build_graph,
    gcn_encode,
    normalized_adjacency,
    token_embed,
)
from softneg.reports import (
    ABSENT,
    PRESENT,
    Fact,
    Report,
    make_sentence,
    parse_report,
    shuffle_sentences,
)


def test_token_embed_is_deterministic_and_unit():
    a = token_embed("effusion", 16)
    b = token_embed("effusion", 16)
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)


def test_distinct_tokens_are_spread_out():
    vocab = ["cardiomegaly", "pneumothorax", "edema", "severe", "mild",
             "left", "right", "effusion", "opacity", "lesion"]
    worst = max(abs(float(token_embed(a, 16) @ token_embed(b, 16)))
                for i, a in enumerate(vocab) for b in vocab[i + 1:])
    assert worst < 0.9


def test_token_embed_one_dim_is_sign():
    assert token_embed("anything", 1)[0] in (-1.0, 1.0)


def test_dims_arithmetic():
    assert FEATURE_DIM == 16 + len(NODE_CLASSES)
    assert PAPER_GCN_DIMS == (768 + len(NODE_CLASSES), 256, 512)


class TestBuildGraph:
    def test_single_absent_fact(self):
        report = parse_report("No pneumothorax.")
        g = build_graph(report, 16)
        assert g.n_nodes == 1
        assert g.classes == ["OBS-DA"]
        assert len(g.edges) == 0

    def test_decorated_present_fact(self):
        report = parse_report("Severe cardiomegaly in the left.")
        g = build_graph(report, 16)
        assert g.n_nodes == 3
        assert sorted(g.classes) == ["ANAT-DP", "OBS-DP", "OBS-U"]
        assert len(g.edges) == 2
        obs = g.classes.index("OBS-DP")
        assert all(obs in edge for edge in g.edges)

    def test_empty_report_encodes_to_zero(self):
        g = build_graph(Report([]), 16)
        params = GcnParams.init(np.random.default_rng(0), FEATURE_DIM, 8, 8)
        assert g.n_nodes == 0
        assert np.array_equal(gcn_encode(g, params), np.zeros(8))

    def test_class_one_hot_trails_features(self):
        report = parse_report("There is edema.")
        g = build_graph(report, 16)
        one_hot = g.features[0][16:]
        assert one_hot.sum() == 1
        assert one_hot[NODE_CLASSES.index("OBS-DP")] == 1


class TestNormalizedAdjacency:
    def test_isolated_node_is_identity(self):
        assert np.allclose(normalized_adjacency(1, []), [[1.0]])

    def test_connected_pair_hand_value(self):
        # A+I = [[1,1],[1,1]], degrees 2 -> every entry 1/2
        a = normalized_adjacency(2, [(0, 1)])
        assert np.allclose(a, 0.5)

    def test_symmetric_with_bounded_rows(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 9))
            m = int(rng.integers(1, n * 2))
            edges = [tuple(rng.integers(0, n, size=2)) for _ in range(m)]
            a = normalized_adjacency(n, edges)
            assert np.allclose(a, a.T)
            sums = a.sum(axis=1)
            assert np.all(sums > 0) and np.all(sums <= 2.0 + 1e-12)


class TestGcnEncode:
    def test_one_node_identity_oracle(self):
        # With identity-like weights and one node the result is the
        # relu-passed feature, propagated and normalized by hand:
        # A_hat = 1, H1 = relu(x W1), out = normalize(H1 W2).
        report = parse_report("There is edema.")
        g = build_graph(report, 16)
        d = FEATURE_DIM
        w1 = np.eye(d, 8)
        w2 = np.eye(8, 8)
        got = gcn_encode(g, GcnParams(w1, w2))
        x = g.features[0]
        h1 = np.maximum(x[:8], 0.0)
        want = h1 / np.linalg.norm(h1)
        assert np.allclose(got, want, atol=1e-9)

    def test_two_node_chain_oracle(self):
        report = parse_report("Severe edema.")
        g = build_graph(report, 16)
        assert g.n_nodes == 2 and len(g.edges) == 1
        rng = np.random.default_rng(3)
        params = GcnParams.init(rng, FEATURE_DIM, 8, 8)
        a_hat = np.full((2, 2), 0.5)
        h1 = np.maximum(a_hat @ g.features @ params.w1, 0.0)
        h2 = a_hat @ h1 @ params.w2
        pooled = h2.mean(axis=0)
        want = pooled / np.linalg.norm(pooled)
        assert np.allclose(gcn_encode(g, params), want, atol=1e-9)

    def test_isolated_identical_nodes_pool_like_one(self):
        report = parse_report("No edema. No edema.")
        g = build_graph(report, 16)
        assert g.n_nodes == 2 and not g.edges
        assert np.allclose(g.features[0], g.features[1])
        single = build_graph(parse_report("No edema."), 16)
        params = GcnParams.init(np.random.default_rng(1), FEATURE_DIM, 8, 8)
        assert np.allclose(gcn_encode(g, params), gcn_encode(single, params),
                           atol=1e-9)

    def test_permutation_invariance_over_random_graphs(self, small_corpus):
        params = GcnParams.init(np.random.default_rng(5), FEATURE_DIM, 8, 8)
        checked = 0
        for report, _ in small_corpus:
            if len(report.sentences) < 2:
                continue
            g = build_graph(report, 16)
            shuffled = build_graph(shuffle_sentences(report, seed=checked), 16)
            assert np.allclose(gcn_encode(g, params),
                               gcn_encode(shuffled, params), atol=1e-9)
            checked += 1
            if checked == 100:
                break
        assert checked == 100

    def test_output_is_unit_norm(self, small_corpus):
        params = GcnParams.init(np.random.default_rng(7), FEATURE_DIM, 8, 8)
        for report, _ in small_corpus[:20]:
            if not report.sentences:
                continue
            out = gcn_encode(build_graph(report, 16), params)
            assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-9)

    def test_dimension_mismatch_raises(self):
        g = build_graph(parse_report("There is edema."), 16)
        bad = GcnParams(np.zeros((7, 8)), np.zeros((8, 8)))
        with pytest.raises(ValueError):
            gcn_encode(g, bad)
