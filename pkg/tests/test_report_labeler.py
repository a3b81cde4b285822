import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import GOLDEN_SENTENCES
from ctexplain.report_labeler import (
    ABNORMAL,
    NORMAL,
    Vocabulary,
    classify_phrases,
    default_vocabulary,
    label_report,
    labels_from_json,
    read_labels_json,
    read_reports_csv,
    term_search_abnormalities,
    term_search_locations,
    write_labels_json,
    write_reports_csv,
)

VOCAB = default_vocabulary()
ALL_SENTENCES = [s for s, _ in GOLDEN_SENTENCES]
NEGATED = [
    "no pleural effusion",
    "there is no pneumothorax",
    "the lungs are clear",
    "without consolidation",
    "the mediastinum is unremarkable",
    "the nodule has resolved",
]


# ---------------------------------------------------------------------------
# Phrase classification
# ---------------------------------------------------------------------------


def test_split_on_mid_sentence_cue():
    assert classify_phrases("the heart is enlarged without pericardial effusion") == [
        ("the heart is enlarged", ABNORMAL),
        ("pericardial effusion", NORMAL),
    ]


@pytest.mark.parametrize("sentence", ["the lungs are clear", "the consolidation has resolved"])
def test_trailing_cue_marks_whole_clause_normal(sentence):
    assert [s for _, s in classify_phrases(sentence)] == [NORMAL]


def test_empty_sentence():
    assert classify_phrases("") == []
    assert classify_phrases("   ") == []


def test_clause_boundary_limits_negation():
    out = classify_phrases("no effusion, there is a nodule")
    assert out == [("effusion", NORMAL), ("there is a nodule", ABNORMAL)]


# ---------------------------------------------------------------------------
# Term search
# ---------------------------------------------------------------------------


def test_abnormality_term_search_examples():
    assert term_search_abnormalities("a calcified granuloma is visible in the apex of the left lung") == {
        "calcification", "granuloma"}
    assert term_search_abnormalities("the heart is enlarged") == {"cardiomegaly"}
    assert term_search_abnormalities("") == set()


def test_location_term_search_examples():
    assert term_search_locations("there is a nodule in the right upper lobe", {"nodule"}) == {"nodule": {"right_lung"}}
    assert term_search_locations("left pneumonia", {"pneumonia"}) == {"pneumonia": {"left_lung"}}
    assert term_search_locations("the catheter tip is visible in the svc", {"catheter_or_port"}) == {
        "catheter_or_port": {"great_vessel"}}


def test_unlateralized_lung_finding_sets_both_sides():
    lab = label_report(["there is pneumonia"])
    assert lab.pairs() == [("pneumonia", "lung_unspecified")]
    lb = next(x for x in VOCAB.lung_labels if x.concept == "pneumonia")
    right = VOCAB.split_names.index(f"{lb.name} [right]")
    left = VOCAB.split_names.index(f"{lb.name} [left]")
    assert lab.split_vector[right] == 1 and lab.split_vector[left] == 1
    assert lab.split_vector.sum() == 2


def test_bilateral_words_give_both_lungs():
    assert set(label_report(["bilateral pneumonia"]).pairs()) == {("pneumonia", "right_lung"), ("pneumonia", "left_lung")}


# ---------------------------------------------------------------------------
# Whole reports
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("sentence,expected", GOLDEN_SENTENCES)
def test_worked_examples_per_sentence(sentence, expected):
    assert set(label_report([sentence]).pairs()) == expected


def test_worked_examples_as_one_report():
    expected = set().union(*(e for _, e in GOLDEN_SENTENCES))
    assert set(label_report(ALL_SENTENCES).pairs()) == expected
    assert len(expected) == 7


def test_empty_report_is_all_zero():
    lab = label_report([])
    assert lab.matrix.sum() == 0 and lab.split_vector.sum() == 0
    assert lab.split_vector.size == 131


def test_duplicate_sentences_are_idempotent():
    s = ALL_SENTENCES[1]
    assert label_report([s, s]).pairs() == label_report([s]).pairs()


def test_negated_corpus_yields_nothing():
    for s in NEGATED:
        assert label_report([s]).matrix.sum() == 0, s
    assert label_report(NEGATED).matrix.sum() == 0


@given(st.lists(st.sampled_from(ALL_SENTENCES + NEGATED), max_size=6), st.sampled_from(ALL_SENTENCES + NEGATED))
def test_adding_a_sentence_is_monotone(report, extra):
    before = set(label_report(report).pairs())
    after = set(label_report(report + [extra]).pairs())
    assert before <= after


@given(st.lists(st.sampled_from(ALL_SENTENCES + NEGATED), max_size=5), st.randoms(use_true_random=False))
def test_case_insensitive(report, rnd):
    flipped = ["".join(c.upper() if rnd.random() < 0.5 else c.lower() for c in s) for s in report]
    assert label_report(flipped).pairs() == label_report(report).pairs()


def test_every_label_name_round_trips():
    assert len(VOCAB.labels) == 80
    assert sum(lb.organ == "lung" for lb in VOCAB.labels) == 51
    for lb in VOCAB.labels:
        found = term_search_abnormalities(f"there is {lb.name}")
        assert lb.concept in found, lb.name


def test_split_vector_consistent_with_matrix():
    lab = label_report(ALL_SENTENCES)
    slots = sorted({k for c, loc in lab.pairs() for k in VOCAB.split_slots(c, loc)})
    assert list(np.nonzero(lab.split_vector)[0]) == slots


# ---------------------------------------------------------------------------
# Vocabulary and file interfaces
# ---------------------------------------------------------------------------


def test_vocabulary_rejects_bad_schema_and_locations():
    data = json.loads(json.dumps(_vocab_data()))
    data["schema_version"] = 999
    with pytest.raises(ValueError):
        Vocabulary(data)
    data = _vocab_data()
    first = next(iter(data["concepts"]))
    data["concepts"][first]["implied_location"] = "kidney"
    with pytest.raises(ValueError):
        Vocabulary(data)


def _vocab_data():
    from importlib import resources
    return json.loads(resources.files("ctexplain.report_labeler").joinpath("data/vocab.json").read_text())


def test_location_terms_are_lowercase_and_unique():
    seen = set()
    for terms in VOCAB.location_terms.values():
        for t in terms:
            assert t == t.lower() and t not in seen
            seen.add(t)


def test_reports_csv_and_labels_json_roundtrip(tmp_path):
    reports = {"b": ALL_SENTENCES[:2], "a": ["left pneumonia, with a comma", 'quote " inside']}
    write_reports_csv(tmp_path / "r.csv", reports)
    assert read_reports_csv(tmp_path / "r.csv") == {k: reports[k] for k in sorted(reports)}
    lab = label_report(ALL_SENTENCES, "scan_1")
    write_labels_json(tmp_path / "l.json", lab)
    back = read_labels_json(tmp_path / "l.json")
    assert back.scan_id == "scan_1" and back.pairs() == lab.pairs()
    np.testing.assert_array_equal(back.split_vector, lab.split_vector)
    assert labels_from_json(lab.to_json()).pairs() == lab.pairs()


def test_reports_csv_missing_column(tmp_path):
    (tmp_path / "bad.csv").write_text("scan_id,text\na,b\n")
    with pytest.raises(ValueError):
        read_reports_csv(tmp_path / "bad.csv")
