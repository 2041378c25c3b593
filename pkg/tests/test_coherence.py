import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cer import coherence as K
from cer import corpus as C
from cer.corpus import Label
from cer.decoding import PredictionRecord


@pytest.fixture(scope="module")
def pairs(lexicon):
    records = C.synthesize_corpus(seed=21, n_users=30, n_items=30, n_records=600, lexicon=lexicon)
    return K.rule_annotate(records, lexicon, seed=0)


@pytest.fixture(scope="module")
def clf(pairs):
    return K.train_classifier(pairs, seed=1)


# --------------------------------------------------------------- templates

def test_fill_template_reference_case():
    assert K.fill_template(2, "it 's a fun movie") == \
        "An example of slightly negative review is it 's a fun movie"


def test_fill_template_other_examples():
    assert K.fill_template(1, "the cast is very good") == \
        "An example of very negative review is the cast is very good"
    assert K.fill_template(5, "") == "An example of very positive review is "


@pytest.mark.parametrize("rating", [0, 6, 2.5])
def test_fill_template_range(rating):
    with pytest.raises(ValueError):
        K.fill_template(rating, "x")


@given(st.integers(1, 5), st.text(max_size=40))
def test_fill_template_prefix(rating, text):
    out = K.fill_template(rating, text)
    assert out.startswith(K.TEMPLATES[rating] + " ")
    assert out[len(K.TEMPLATES[rating]) + 1:] == text


# ----------------------------------------------------------------- encoder

def test_encoder_deterministic_and_empty():
    enc = K.HashedNgramEncoder()
    assert np.array_equal(enc.encode("good movie"), enc.encode("good movie"))
    assert not enc.encode("").any()
    assert enc.encode("x").shape == (4096,)


def test_encoder_word_order():
    enc = K.HashedNgramEncoder()
    a, b = enc.counts("good movie"), enc.counts("movie good")
    uni = {enc._slot("1:good"), enc._slot("1:movie")}
    assert {k: a[k] for k in uni} == {k: b[k] for k in uni}
    assert enc._slot("2:good movie") in a and enc._slot("2:good movie") not in b


def test_encode_many_matches_encode():
    enc = K.HashedNgramEncoder(dim=64)
    texts = ["a b a", "", "c d e f"]
    dense = enc.encode_many(texts).toarray()
    for row, t in zip(dense, texts):
        assert np.array_equal(row, enc.encode(t))


# ------------------------------------------------------------- classifier

def test_class_weights():
    w = K.class_weights([Label.COHERENT, Label.INCOHERENT] * 3)
    assert w == {Label.COHERENT: 1.0, Label.INCOHERENT: 1.0}
    w = K.class_weights([Label.COHERENT] * 3 + [Label.INCOHERENT])
    assert w[Label.COHERENT] == pytest.approx(4 / 6) and w[Label.INCOHERENT] == 2.0


def test_single_class_rejected():
    with pytest.raises(ValueError, match="single class"):
        K.train_classifier([K.AnnotatedPair(5, "great", Label.COHERENT)] * 4)


def test_rule_annotate_has_contrast(pairs):
    labels = {p.label for p in pairs}
    assert labels == {Label.COHERENT, Label.INCOHERENT}
    # each record contributes its own pair and one re-rated copy of its text
    assert pairs[0].explanation == pairs[1].explanation and pairs[0].rating != pairs[1].rating


def test_training_fits(clf, pairs):
    assert K.accuracy(clf, pairs) >= 0.9


def test_separable_pairs_fit_without_decay(pairs):
    loose = K.train_classifier(pairs, seed=1, weight_decay=0.0, holdout=0.0, max_epochs=400)
    assert K.accuracy(loose, pairs) >= 0.99


def test_same_seed_same_classifier(pairs):
    a = K.train_classifier(pairs[:200], seed=3, max_epochs=30)
    b = K.train_classifier(pairs[:200], seed=3, max_epochs=30)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_heldout_agreement(clf, lexicon):
    records = C.synthesize_corpus(seed=77, n_users=30, n_items=30, n_records=200, lexicon=lexicon)
    assert K.accuracy(clf, K.rule_annotate(records, lexicon, seed=1)) >= 0.85


@pytest.mark.parametrize("rating, text, label", [
    (5, "this is a wonderful film", Label.COHERENT),
    (1, "the cast is very good", Label.INCOHERENT),
])
def test_classify_reference_cases(clf, rating, text, label):
    got, prob = K.classify_pair(rating, text, clf)
    assert got == label
    assert 0 < prob < 1
    assert K.classify_pair(rating, text, clf) == (got, prob)


def test_pairs_jsonl_roundtrip(tmp_path, pairs):
    path = tmp_path / "pairs.jsonl"
    K.save_pairs(pairs[:20], path)
    assert K.load_pairs(path) == pairs[:20]


def test_pair_rating_range():
    with pytest.raises(ValueError):
        K.AnnotatedPair(0, "x", Label.COHERENT)


# ---------------------------------------------------------------- ensemble

def _preds(items):
    return [PredictionRecord("u", "i", float(r), r, t.split(), float(r)) for r, t in items]


def test_coherence_score_layout(pairs):
    preds = _preds([(5, "great food"), (1, "awful staff"), (1, "great food")])
    rep = K.coherence_score(preds, pairs[:300], n_models=3)
    assert len(rep.columns) == 3
    assert rep.mean == pytest.approx(sum(rep.columns) / 3, abs=1e-9)
    assert all(0 <= c <= 100 for c in rep.columns)


def test_single_model_mean_is_column(pairs):
    rep = K.coherence_score(_preds([(5, "great food")]), pairs[:300], n_models=1)
    assert rep.mean == rep.columns[0]


def test_all_coherent_predictions_score_100(clf):
    cands = [(5, "this is a wonderful film"), (1, "awful staff"), (5, "great food"), (3, "the menu has soup")]
    keep = [(r, t) for r, t in cands if clf.classify(r, t)[0] == Label.COHERENT]
    assert keep
    rep = K.score_predictions([r for r, _ in keep], [t for _, t in keep], [clf, clf])
    assert rep.columns == [100.0, 100.0] and rep.mean == 100.0


def test_parallel_ensemble_matches_serial(pairs):
    a = K.train_ensemble(pairs[:200], n_models=2, max_epochs=20)
    b = K.train_ensemble(pairs[:200], n_models=2, workers=2, max_epochs=20)
    for x, y in zip(a, b):
        assert np.array_equal(x.params["W1"].data, y.params["W1"].data)


def test_report_roundtrip_and_table():
    rep = K.CoherenceReport([80.0, 90.0], 85.0, "CER")
    assert K.CoherenceReport.from_dict(rep.to_dict()) == rep
    head, row = K.render_table([rep]).splitlines()
    assert [c.strip() for c in head.split("|")] == ["Model", "1", "2", "Mean"]
    assert [c.strip() for c in row.split("|")] == ["CER", "80.00", "90.00", "85.00"]


def test_rule_coherence(lexicon):
    assert K.rule_coherence([5, 1], [["great", "food"], ["great", "food"]], lexicon) == 50.0
    with pytest.raises(ValueError):
        K.rule_coherence([], [], lexicon)
