import json
import math

import numpy as np
import pytest

from cer import corpus as C
from cer import model as M
from cer import training as Tr
from cer.gradcheck import finite_diff_check
from cer.tensor import Tape, Tensor


@pytest.fixture(scope="module")
def lexicon():
    return C.load_lexicon()


@pytest.fixture(scope="module")
def records(lexicon):
    return C.synthesize_corpus(seed=5, n_users=6, n_items=6, n_records=24, lexicon=lexicon)


@pytest.fixture(scope="module")
def setup(records):
    vocab = C.build_vocab(records)
    config = M.config_for_vocab(vocab, embed_dim=16, n_layers=1, n_heads=2, hidden_dim=8, ffn_dim=16,
                                max_expl_len=12, max_features=2)
    batch = Tr.make_batch(Tr.encode_records(records[:8], vocab, config))
    return vocab, config, batch


SMALL = dict(embed_dim=16, n_layers=1, n_heads=2, hidden_dim=8, ffn_dim=16, max_expl_len=12, max_features=2)


# ------------------------------------------------------------ rating loss

def test_rating_loss_zero_when_exact():
    assert float(Tr.loss_rating(Tensor(np.array([1.0, 4.0])), [1, 4]).data) == 0.0


@pytest.mark.parametrize("pred, gold, want", [([3.0], [5], 4.0), ([1.0, 2.0], [2, 4], 2.5)])
def test_rating_loss_values(pred, gold, want):
    assert float(Tr.loss_rating(Tensor(np.array(pred)), gold).data) == pytest.approx(want)


def test_rating_loss_empty():
    with pytest.raises(ValueError):
        Tr.loss_rating(Tensor(np.zeros(0)), [])


# -------------------------------------------------------- token losses

def test_explanation_loss_uniform():
    got = Tr.loss_explanation(Tensor(np.zeros((1, 4))), [2], [0])
    assert float(got.data) == pytest.approx(math.log(4))


def test_explanation_loss_saturates():
    logits = np.zeros((1, 5))
    logits[0, 3] = 20.0
    assert float(Tr.loss_explanation(Tensor(logits), [3], [0]).data) < 1e-8


def test_explanation_loss_inner_mean():
    # rows whose target log-probs are -0.2 and -0.4
    p1, p2 = math.exp(-0.2), math.exp(-0.4)
    logits = np.log(np.array([[p1, 1 - p1], [p2, 1 - p2]]))
    assert float(Tr.loss_explanation(Tensor(logits), [0, 0], [0, 0]).data) == pytest.approx(0.3)


def test_explanation_loss_averages_examples_then_batch():
    # example 0 has one token with NLL ln 2, example 1 three tokens with NLL 0
    logits = np.array([[0.0, 0.0], [60.0, 0.0], [60.0, 0.0], [60.0, 0.0]])
    got = float(Tr.loss_explanation(Tensor(logits), [0, 0, 0, 0], [0, 1, 1, 1]).data)
    assert got == pytest.approx(math.log(2) / 2, rel=1e-9)


def test_explanation_loss_out_of_vocab():
    with pytest.raises(IndexError):
        Tr.loss_explanation(Tensor(np.zeros((1, 4))), [4], [0])


def test_context_loss_repeated_token_delta():
    logits = np.full((1, 4), -50.0)
    logits[0, 2] = 50.0
    assert float(Tr.loss_context(Tensor(logits), [2, 2], [0, 0]).data) < 1e-12


def test_context_loss_uniform():
    got = Tr.loss_context(Tensor(np.zeros((1, 4))), [0, 3, 1], [0, 0, 0])
    assert float(got.data) == pytest.approx(math.log(4))


def test_context_loss_two_way_split():
    logits = np.array([[0.0, 0.0, -800.0, -800.0]])
    assert float(Tr.loss_context(Tensor(logits), [0, 1], [0, 0]).data) == pytest.approx(math.log(2))


# ------------------------------------------------------- coherence loss

def test_coherence_loss_values():
    a = Tensor(np.array([4.0]))
    assert float(Tr.loss_coherence(a, Tensor(np.array([4.0]))).data) == 0.0
    assert float(Tr.loss_coherence(a, Tensor(np.array([2.0]))).data) == 4.0


def test_coherence_loss_ignores_gold(setup):
    vocab, config, batch = setup
    params = M.init_params(config, 0)
    a, _ = Tr.joint_loss(batch, params, config)
    batch2 = Tr.Batch(**{**batch.__dict__, "ratings": batch.ratings[::-1] + 1.0})
    b, _ = Tr.joint_loss(batch2, params, config)
    assert a.coherence == b.coherence
    assert a.rating != b.rating


def _grads(batch, params, config, tc):
    params.zero_grad()
    with Tape() as tape:
        _, total = Tr.joint_loss(batch, params, config, tc)
    tape.backward(total)
    return {k: (None if p.grad is None else p.grad.copy()) for k, p in params.items()}


def test_stop_gradient_shields_rating_head(setup):
    vocab, config, batch = setup
    params = M.init_params(config, 0)
    only_coh = {"rating": 0.0, "explanation": 0.0, "context": 0.0, "coherence": 1.0}
    g = _grads(batch, params, config, Tr.TrainConfig(loss_weights=only_coh, coh_stop_gradient=True))
    for k in ("rating.W", "rating.b", "rating.w"):
        assert not np.any(g[k])
    assert np.any(g["coh.w"])
    g = _grads(batch, params, config, Tr.TrainConfig(loss_weights=only_coh))
    assert np.any(g["rating.w"])


# ----------------------------------------------------------- joint loss

def test_joint_total_is_sum(setup):
    vocab, config, batch = setup
    bd, total = Tr.joint_loss(batch, M.init_params(config, 3), config)
    assert bd.total == float(total.data)
    assert bd.total == bd.rating + bd.explanation + bd.context + bd.coherence
    assert min(bd.rating, bd.explanation, bd.context, bd.coherence) >= 0


def test_joint_weights_sum():
    bd = Tr.LossBreakdown(1.0, 2.0, 0.5, 0.25, 3.75)
    assert bd.rating + bd.explanation + bd.context + bd.coherence == bd.total
    assert bd.to_log()["L_total"] == 3.75


def test_dropping_coherence_zeroes_its_head(setup):
    vocab, config, batch = setup
    params = M.init_params(config, 0)
    g = _grads(batch, params, config, Tr.TrainConfig(loss_weights={"coherence": 0.0}))
    for k in ("coh.W", "coh.b", "coh.w"):
        assert g[k] is None or not np.any(g[k])


def test_joint_gradcheck(setup):
    vocab, config, batch = setup
    params = M.init_params(config, 7)
    rep = finite_diff_check(lambda ps: Tr.joint_loss(batch, ps, config)[1], params, samples_per_block=8)
    assert rep.passed, rep.worst()


# ------------------------------------------------------------- optimizer

def test_adam_lr_zero_keeps_params_bitwise(setup):
    vocab, config, batch = setup
    params = M.init_params(config, 0)
    before = {k: v.copy() for k, v in params.arrays().items()}
    opt = Tr.Adam(params, lr=0.0, clip_norm=1.0)
    for _ in range(3):
        with Tape() as tape:
            _, total = Tr.joint_loss(batch, params, config)
        tape.backward(total)
        opt.step()
    for k, v in params.arrays().items():
        assert np.array_equal(v, before[k])


def test_adam_clips_global_norm():
    p = M.ModelParams({"w": Tensor(np.zeros(3), requires_grad=True)})
    p["w"].grad = np.array([30.0, 40.0, 0.0])
    norm = Tr.Adam(p, lr=0.1, clip_norm=1.0).step()
    assert norm == pytest.approx(50.0)
    # first Adam step moves each coordinate by about lr * sign(g)
    np.testing.assert_allclose(p["w"].data, [-0.1, -0.1, 0.0], atol=1e-6)


def test_train_config_validation():
    with pytest.raises(ValueError):
        Tr.TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        Tr.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        Tr.TrainConfig(optimizer="rmsprop")


# ------------------------------------------------------------------ loop

def test_train_lr_zero_unchanged(records):
    ds = C.DatasetSplit(records[:12], records[12:16], [])
    res = Tr.train(ds, SMALL, Tr.TrainConfig(lr=0.0, max_epochs=2, batch_size=4))
    init = M.init_params(res.config, 0)
    for k, v in res.params.arrays().items():
        assert np.array_equal(v, init[k].data)


def test_train_deterministic(records):
    ds = C.DatasetSplit(records[:16], records[16:20], [])
    tc = Tr.TrainConfig(max_epochs=2, batch_size=4, seed=9)
    a = Tr.train(ds, SMALL, tc)
    b = Tr.train(ds, SMALL, tc)
    assert [e.to_json() for e in a.history] == [e.to_json() for e in b.history]


def test_train_loss_goes_down(records):
    ds = C.DatasetSplit(records[:16], [], [])
    res = Tr.train(ds, SMALL, Tr.TrainConfig(max_epochs=15, batch_size=8, lr=3e-3, patience=None))
    assert res.history[-1].train.total < res.history[0].train.total


def test_train_max_steps(records):
    ds = C.DatasetSplit(records[:16], [], [])
    res = Tr.train(ds, SMALL, Tr.TrainConfig(max_epochs=100, max_steps=5, batch_size=4))
    assert res.steps == 5 and len(res.history) == 2


def test_train_early_stopping_returns_best(records):
    ds = C.DatasetSplit(records[:16], records[16:], [])
    res = Tr.train(ds, SMALL, Tr.TrainConfig(max_epochs=60, batch_size=4, lr=1e-2, patience=2))
    totals = [e.valid.total for e in res.history]
    assert res.best_epoch == 1 + int(np.argmin(totals))
    assert len(res.history) - res.best_epoch <= 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reported(records):
    ds = C.DatasetSplit(records[:8], [], [])
    tc = Tr.TrainConfig(optimizer="sgd", lr=1e200, clip_norm=None, max_epochs=5, batch_size=4)
    with pytest.raises(Tr.TrainingDiverged, match="epoch"):
        Tr.train(ds, SMALL, tc)


def test_train_empty_split():
    with pytest.raises(ValueError):
        Tr.train(C.DatasetSplit([], [], []))


def test_train_log_jsonl(tmp_path, records):
    ds = C.DatasetSplit(records[:8], records[8:12], [])
    res = Tr.train(ds, SMALL, Tr.TrainConfig(max_epochs=2, batch_size=4))
    path = tmp_path / "log.jsonl"
    res.write_log(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    keys = set(json.loads(lines[0]))
    assert {"L_r", "L_e", "L_c", "L_coh", "L_total", "valid_L_total", "valid_rmse"} <= keys
