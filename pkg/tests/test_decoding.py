import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cer import decoding as D
from cer import model as M
from cer.corpus import SPECIALS


# ------------------------------------------------------------ round_rating

@pytest.mark.parametrize("raw, want", [(2.4, 2), (4.5, 5), (-0.3, 1), (7.2, 5), (2.5, 3), (1.49, 1)])
def test_round_rating_examples(raw, want):
    assert D.round_rating(raw) == want


@pytest.mark.parametrize("raw", [math.nan, math.inf, -math.inf])
def test_round_rating_rejects_non_finite(raw):
    with pytest.raises(ValueError):
        D.round_rating(raw)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_round_rating_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert D.round_rating(lo) <= D.round_rating(hi)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_round_rating_idempotent(k):
    assert D.round_rating(D.round_rating(k)) == k == D.round_rating(float(k))


# ------------------------------------------------------------------ greedy

def test_overfit_reproduces_training_text(overfit):
    records, res = overfit
    preds = D.predict_batch(records, res.params, res.config, res.vocab)
    assert [p.explanation for p in preds] == [r.explanation for r in records]


def test_greedy_generate_matches_batch(overfit):
    records, res = overfit
    r = records[3]
    assert D.greedy_generate(r.user, r.item, r.features, res.params, res.config, res.vocab) == r.explanation


def test_aux_rating_tracks_main_rating_when_coherent(overfit):
    records, res = overfit
    preds = D.predict_batch(records, res.params, res.config, res.vocab)
    assert np.mean([abs(p.raw_rating - p.aux_rating) for p in preds]) < 0.5


def test_untrained_generation_is_bounded_and_clean(overfit):
    records, res = overfit
    params = M.init_params(res.config, seed=4)
    out = D.predict_batch(records, params, res.config, res.vocab)
    for p in out:
        assert len(p.explanation) <= res.config.max_expl_len
        assert not set(p.explanation) & set(SPECIALS)
        assert 1 <= p.rating <= 5


def test_predict_deterministic_and_ordered(overfit):
    records, res = overfit
    params = M.init_params(res.config, seed=5)
    a = D.predict_batch(records, params, res.config, res.vocab, batch_size=3)
    b = D.predict_batch(records[::-1], params, res.config, res.vocab)[::-1]
    assert [(p.user, p.item) for p in a] == [(r.user, r.item) for r in records]
    assert [p.explanation for p in a] == [p.explanation for p in b]
    np.testing.assert_allclose([p.raw_rating for p in a], [p.raw_rating for p in b], atol=1e-12)


def test_predict_empty(overfit):
    _, res = overfit
    assert D.predict_batch([], res.params, res.config, res.vocab) == []


def test_predictions_jsonl_roundtrip(tmp_path, overfit):
    records, res = overfit
    preds = D.predict_batch(records, res.params, res.config, res.vocab)
    path = tmp_path / "p.jsonl"
    D.save_predictions(preds, path)
    assert D.load_predictions(path) == preds


def test_load_predictions_reports_line(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text('{"user": "u"}\n')
    with pytest.raises(ValueError, match=":1:"):
        D.load_predictions(path)
