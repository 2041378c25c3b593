import json
import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cer import metrics as Mx

import oracles

sent = st.lists(st.sampled_from(list("abcdefghij")), min_size=1, max_size=15)


def toks(s):
    return s.split()


# -------------------------------------------------------------------- bleu

def test_bleu_identical():
    x = [toks("the food was great"), toks("ok")]
    assert Mx.bleu(x, x, 4) == pytest.approx(1.0)


def test_bleu1_hand_example():
    assert Mx.bleu([toks("the cat sat")], [toks("the cat slept")], 1) == pytest.approx(2 / 3)


def test_bleu1_disjoint():
    assert Mx.bleu([toks("a b")], [toks("c d")], 1) == 0.0


def test_bleu_brevity_penalty():
    got = Mx.bleu([toks("a b")], [toks("a b c d")], 1)
    assert got == pytest.approx(math.exp(1 - 4 / 2))


def test_bleu_errors():
    with pytest.raises(ValueError):
        Mx.bleu([], [], 1)
    with pytest.raises(ValueError):
        Mx.bleu([["a"]], [], 1)


# ------------------------------------------------------------------- rouge

def test_rouge_identical():
    assert Mx.rouge_n([toks("a b c")], [toks("a b c")], 2) == (1.0, 1.0, 1.0)


def test_rouge1_half():
    assert Mx.rouge_n([toks("a b")], [toks("a c")], 1) == pytest.approx((0.5, 0.5, 0.5))


def test_rouge2_hand_example():
    assert Mx.rouge_n([toks("a b c")], [toks("a b")], 2) == pytest.approx((0.5, 1.0, 2 / 3))


def test_rouge_zero_overlap_f_is_zero():
    assert Mx.rouge_n([toks("a")], [toks("b")], 1) == (0.0, 0.0, 0.0)


@given(st.lists(st.tuples(sent, sent), min_size=1, max_size=4))
def test_metrics_match_oracle(pairs):
    c = [p[0] for p in pairs]
    r = [p[1] for p in pairs]
    for n in (1, 4):
        assert Mx.bleu(c, r, n) == pytest.approx(oracles.bleu(c, r, n), abs=1e-9)
    for n in (1, 2):
        np.testing.assert_allclose(Mx.rouge_n(c, r, n), oracles.rouge(c, r, n), atol=1e-9)


@given(sent)
def test_self_scores_are_perfect(x):
    assert Mx.bleu([x], [x], 4) == pytest.approx(1.0, abs=1e-12)
    assert Mx.rouge_n([x], [x], 1) == (1.0, 1.0, 1.0)
    assert Mx.rouge_n([x], [x], 2) == (1.0, 1.0, 1.0)


@given(st.lists(st.tuples(sent, sent), min_size=1, max_size=4))
def test_scores_in_unit_interval(pairs):
    c = [p[0] for p in pairs]
    r = [p[1] for p in pairs]
    assert 0 <= Mx.bleu(c, r, 4) <= 1
    assert all(0 <= v <= 1 for v in Mx.rouge_n(c, r, 2))


# ----------------------------------------------------------- usr/fmr/fcr

def test_usr_examples():
    assert Mx.usr([["a"], ["a"], ["a"]]) == pytest.approx(1 / 3)
    assert Mx.usr([["a"], ["b"]]) == 1.0
    assert Mx.usr([["s1"], ["s1"], ["s2"]]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        Mx.usr([])


def test_fmr_examples():
    gen = [toks("good food"), toks("nice staff"), toks("fine room"), toks("meh")]
    feats = [["food"], ["staff"], ["room"], ["pool"]]
    assert Mx.fmr(gen, feats) == 0.75
    assert Mx.fmr(gen[:3], feats[:3]) == 1.0
    assert Mx.fmr(gen[3:], feats[3:]) == 0.0


def test_fmr_is_case_folded():
    assert Mx.fmr([toks("Great FOOD")], [["food"]]) == 1.0


def test_fcr_examples():
    F = [f"f{k}" for k in range(10)]
    assert Mx.fcr([["f1", "x"], ["f2"], ["f1"]], F) == pytest.approx(0.2)
    assert Mx.fcr([F], F) == 1.0
    assert Mx.fcr([["x"]], F) == 0.0
    with pytest.raises(ValueError):
        Mx.fcr([["x"]], [])


# --------------------------------------------------------------------- div

def test_div_examples():
    assert Mx.div([{"a"}, {"b"}, {"c"}]) == 0.0
    assert Mx.div([{"a", "b"}, {"a", "c"}]) == 1.0
    # pairwise intersections 1, 0, 2
    assert Mx.div([{"a", "b", "c"}, {"a", "d"}, {"b", "c"}]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        Mx.div([{"a"}])


def test_div_exact_matches_pairwise_loop():
    rng = random.Random(0)
    sets = [set(rng.sample("abcdefg", rng.randint(0, 4))) for _ in range(30)]
    brute = [len(sets[i] & sets[j]) for i in range(30) for j in range(i + 1, 30)]
    assert Mx.div(sets) == pytest.approx(sum(brute) / len(brute), abs=1e-12)


def test_div_sampled_estimate_close():
    rng = random.Random(1)
    sets = [set(rng.sample("abcdef", rng.randint(0, 3))) for _ in range(400)]
    exact = Mx.div(sets)
    est = Mx.div(sets, threshold=10, n_samples=200_000, seed=3)
    assert est == pytest.approx(exact, abs=0.02)
    assert est == Mx.div(sets, threshold=10, n_samples=200_000, seed=3)


@given(st.lists(st.sets(st.sampled_from("abcde")), min_size=2, max_size=8), st.randoms())
def test_div_permutation_invariant(sets, rnd):
    shuffled = list(sets)
    rnd.shuffle(shuffled)
    assert Mx.div(shuffled) == Mx.div(sets)


# -------------------------------------------------------------- mae / rmse

def test_mae_rmse_examples():
    assert Mx.mae_rmse([3, 4], [3, 4]) == (0.0, 0.0)
    assert Mx.mae_rmse([4], [2]) == (2.0, 2.0)
    mae, rmse = Mx.mae_rmse([1, 5], [2, 2])
    assert mae == 2.0 and rmse == pytest.approx(math.sqrt(5))
    with pytest.raises(ValueError):
        Mx.mae_rmse([], [])


@given(st.lists(st.tuples(st.floats(0, 6), st.integers(1, 5)), min_size=1, max_size=20))
def test_mae_never_exceeds_rmse(pairs):
    mae, rmse = Mx.mae_rmse([p for p, _ in pairs], [g for _, g in pairs])
    assert mae <= rmse + 1e-12


# ------------------------------------------------------------------ report

def test_evaluate_self_is_perfect():
    gen = [toks("the food is great"), toks("rude staff")]
    rep = Mx.evaluate(gen, gen, [["food"], ["staff"]], [4.0, 2.0], [4, 2])
    assert rep.bleu1 == 1.0 and rep.bleu4 == pytest.approx(1.0)
    assert rep.mae == 0.0 and rep.fmr == 1.0 and rep.fcr == 1.0 and rep.div == 0.0


def test_report_roundtrip_and_table():
    gen = [toks("the food is great"), toks("rude staff")]
    rep = Mx.evaluate(gen, [toks("food is great"), toks("staff")], [["food"], ["staff"]], [3.6, 2.2], [4, 2])
    assert Mx.MetricReport.from_dict(json.loads(rep.to_json())) == rep
    head, row = rep.table().splitlines()
    assert head.split(" | ")[0].strip() == "BLEU-1"
    assert row.split(" | ")[0].strip() == f"{rep.bleu1 * 100:.2f}"
    assert row.split(" | ")[-1].strip() == f"{rep.rmse:.2f}"
