import numpy as np
import pytest

from softneg.clinical import (
    clinical_similarity,
    label_matrix,
    label_vector,
    pairwise_clinical_similarity,
)
from softneg.reports import (
    ABSENT,
    NO_FINDINGS,
    PRESENT,
    TEMPLATED_NORMALS,
    Fact,
    Report,
    entity_index,
    make_sentence,
)


def _report(*facts):
    sentences = []
    for f in facts:
        template = "there_is" if f.polarity == PRESENT else "abs_no"
        sentences.append(make_sentence(f, template))
    return Report(sentences)


def test_all_absent_report_maps_to_no_findings():
    report = _report(Fact(2, ABSENT, negation_phrase="no"),
                     Fact(5, ABSENT, negation_phrase="no"))
    v = label_vector(report)
    assert v[NO_FINDINGS] == 1
    assert v.sum() == 1


def test_single_present_fact():
    v = label_vector(_report(Fact(entity_index("Pneumothorax"), PRESENT)))
    assert v[entity_index("Pneumothorax")] == 1
    assert v[NO_FINDINGS] == 0
    assert v.sum() == 1


def test_two_present_facts_set_two_bits():
    report = _report(Fact(entity_index("Edema"), PRESENT),
                     Fact(entity_index("Pneumonia"), PRESENT))
    v = label_vector(report)
    assert v[:NO_FINDINGS].sum() == 2
    assert v[entity_index("Edema")] == 1 and v[entity_index("Pneumonia")] == 1


def test_label_vector_is_never_all_zero(small_corpus):
    for report, _ in small_corpus:
        assert label_vector(report).sum() >= 1


def test_templated_normals_share_one_label():
    labels = [tuple(label_vector(t)) for t in TEMPLATED_NORMALS]
    assert len(set(labels)) == 1


class TestSimilarity:
    def test_self_similarity_is_one(self):
        v = label_vector(_report(Fact(0, PRESENT)))
        assert clinical_similarity(v, v) == pytest.approx(1.0)

    def test_disjoint_supports_score_zero(self):
        a = np.zeros(14); a[0] = 1
        b = np.zeros(14); b[13] = 1
        assert clinical_similarity(a, b) == 0.0

    def test_hand_value_shared_single_bit(self):
        a = np.zeros(14); a[0] = 1
        b = np.zeros(14); b[0] = 1; b[1] = 1
        assert clinical_similarity(a, b) == pytest.approx(1 / np.sqrt(2), abs=1e-5)

    def test_symmetry_and_bounds(self, small_corpus):
        labels = label_matrix([r for r, _ in small_corpus[:40]])
        for i in range(0, 40, 7):
            for j in range(0, 40, 5):
                s = clinical_similarity(labels[i], labels[j])
                assert 0.0 <= s <= 1.0
                assert s == pytest.approx(clinical_similarity(labels[j], labels[i]))
                if np.array_equal(labels[i], labels[j]):
                    assert s == pytest.approx(1.0)

    def test_jaccard_switch(self):
        a = np.zeros(14); a[0] = 1
        b = np.zeros(14); b[0] = 1; b[1] = 1
        assert clinical_similarity(a, b, kind="jaccard") == pytest.approx(0.5)
        with pytest.raises(ValueError):
            clinical_similarity(a, b, kind="hamming")

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            clinical_similarity(np.ones(13), np.ones(13))


def test_pairwise_matrix_matches_scalar(small_corpus):
    labels = label_matrix([r for r, _ in small_corpus[:12]])
    s = pairwise_clinical_similarity(labels)
    assert s.shape == (12, 12)
    assert np.allclose(s, s.T)
    assert np.allclose(np.diag(s), 1.0)
    for i in (0, 3, 11):
        for j in (1, 5, 9):
            assert s[i, j] == pytest.approx(clinical_similarity(labels[i], labels[j]))
