import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmlstm.cells import CellFlags
from hmlstm.data import corpus_from_text, synthetic_text
from hmlstm.model import Model, ModelConfig, is_weight
from hmlstm.numerics import Parameter, Tape, Tensor
from hmlstm.training import (EpochAction, OptimizerState, ScheduleState, TrainConfig, Trainer, adam_step,
                             clip_global_norm, end_of_epoch, global_norm, l2_penalty, loss_with_penalty, train)

from conftest import tiny_config


def small_corpus(n=10_000, seed=0):
    return corpus_from_text(synthetic_text(n, seed=seed))


def small_model_config(corpus, arch="hmlstm", **kw):
    return ModelConfig(arch=arch, units=16, embed_dim=8, output_dim=16, vocab_size=len(corpus.vocab),
                       dtype="float64", **kw)


# --- objective --------------------------------------------------------------------

def test_penalty_of_single_ones_matrix():
    p = Parameter("layer1.W", np.ones((2, 2)))
    assert float(l2_penalty([p], 0.0005).data) == pytest.approx(0.002, abs=1e-15)


def test_penalty_zero_weights_and_zero_lambda():
    p = Parameter("layer1.W", np.zeros((3, 3)))
    assert float(l2_penalty([p], 0.5).data) == 0.0
    logits = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
    q = Parameter("layer1.U", np.ones((2, 2)))
    total, ce = loss_with_penalty(logits, np.zeros((2, 3), dtype=int), [q], 0.0)
    assert float(total.data) == float(ce.data)


def test_penalty_excludes_biases_and_norm_parameters():
    model = Model(tiny_config())
    excluded = [n for n in model.params if not is_weight(n)]
    assert excluded and all(n.endswith((".b", ".bias", ".gain")) for n in excluded)
    for p in model.parameters():
        p.assign(np.ones(p.shape))
    want = sum(p.data.size for p in model.parameters() if is_weight(p.name))
    assert float(l2_penalty(model.parameters(), 1.0).data) == want
    model.zero_grad()
    with Tape() as tape:
        pen = l2_penalty(model.parameters(), 1.0)
    tape.backward(pen)
    for p in model.parameters():
        assert np.any(p.grad != 0) == is_weight(p.name), p.name


# --- clipping ------------------------------------------------------------------------

def test_clip_examples():
    g, norm = clip_global_norm([np.array([3.0, 4.0])], 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(g[0], [0.6, 0.8])
    small = [np.array([0.3, 0.4])]
    g, norm = clip_global_norm(small, 1.0)
    assert g[0] is small[0] and norm == pytest.approx(0.5)
    with pytest.raises(ValueError):
        clip_global_norm(small, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 10))
def test_clipped_norm_is_min_of_norm_and_limit(seed, limit):
    r = np.random.default_rng(seed)
    grads = [r.standard_normal(s) * r.uniform(0, 5) for s in ((3,), (2, 4), (5, 1))]
    clipped, pre = clip_global_norm(grads, limit)
    assert abs(global_norm(clipped) - min(pre, limit)) <= 1e-6


# --- Adam -----------------------------------------------------------------------------

def test_adam_first_step():
    p = Parameter("w", np.array([0.5]))
    adam_step([p], [np.array([1.0])], OptimizerState(lr=0.002))
    assert p.data[0] - 0.5 == pytest.approx(-0.002, rel=1e-6)


def test_adam_zero_gradient_keeps_parameters_and_decays_moments():
    p = Parameter("w", np.array([0.5, -1.0]))
    opt = OptimizerState(lr=0.01)
    adam_step([p], [np.array([1.0, 2.0])], opt)
    m, v = opt.m["w"].copy(), opt.v["w"].copy()
    adam_step([p], [np.zeros(2)], opt)
    m2, v2 = opt.m["w"], opt.v["w"]
    np.testing.assert_allclose(m2, 0.9 * m)
    np.testing.assert_allclose(v2, 0.999 * v)
    # the first moment still carries momentum; with it zeroed the parameter would not move
    opt.m["w"] = np.zeros(2)
    after = p.data.copy()
    adam_step([p], [np.zeros(2)], opt)
    np.testing.assert_array_equal(p.data, after)


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def test_adam_matches_scalar_oracle():
    r = np.random.default_rng(3)
    theta0 = r.standard_normal(6)
    grads = r.standard_normal((10, 6))
    p = Parameter("w", theta0.copy())
    opt = OptimizerState(lr=0.002)
    for g in grads:
        adam_step([p], [g], opt)
    want = [scalar_adam(theta0[k], grads[:, k], 0.002) for k in range(6)]
    assert np.max(np.abs(p.data - want)) <= 1e-10


# --- schedule ------------------------------------------------------------------------

def run_schedule(losses, lr=0.002, enabled=True):
    opt = OptimizerState(lr=lr)
    sched = ScheduleState(enabled=enabled)
    actions, lrs = [], []
    for loss in losses:
        actions.append(end_of_epoch(loss, sched, opt))
        lrs.append(opt.lr)
        if actions[-1] is EpochAction.STOP:
            break
    return actions, lrs, sched


def test_improving_losses_never_divide():
    actions, lrs, _ = run_schedule([2.0, 1.9, 1.8])
    assert actions == [EpochAction.CONTINUE] * 3 and lrs == [0.002] * 3


def test_one_bad_epoch_divides_by_fifty():
    actions, lrs, _ = run_schedule([2.0, 2.1])
    assert actions[-1] is EpochAction.DIVIDED_LR
    assert lrs[-1] == pytest.approx(0.00004, rel=1e-12)


def test_five_bad_epochs_stop_after_fourth_division():
    actions, lrs, sched = run_schedule([2.0] + [2.5] * 6)
    assert actions == [EpochAction.CONTINUE] + [EpochAction.DIVIDED_LR] * 4 + [EpochAction.STOP]
    assert sched.divisions == 4
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == pytest.approx(a / 50, rel=1e-12)


def test_equal_loss_is_not_an_improvement():
    actions, _, _ = run_schedule([2.0, 2.0])
    assert actions[-1] is EpochAction.DIVIDED_LR


def test_non_finite_validation_stops_immediately():
    actions, _, sched = run_schedule([2.0, float("nan")])
    assert actions[-1] is EpochAction.STOP and "non-finite" in sched.stop_reason


def test_without_schedule_lr_is_fixed_and_patience_counts_epochs():
    actions, lrs, _ = run_schedule([2.0, 2.1, 1.9, 2.0, 2.0, 2.0, 2.0, 2.0], enabled=False)
    assert set(lrs) == {0.002}
    assert actions[-1] is EpochAction.STOP and len(actions) == 7


def test_schedule_state_round_trip():
    s = ScheduleState()
    assert ScheduleState.from_dict(s.to_dict()) == s
    s.best = 1.5
    assert ScheduleState.from_dict(s.to_dict()) == s


# --- the loop --------------------------------------------------------------------

def test_fifty_iterations_beat_uniform_loss():
    corpus = small_corpus()
    mc = small_model_config(corpus)
    res = train(mc, TrainConfig(batch=8, seq_len=20, seed=1), corpus, max_iterations=50)
    assert res.iterations == 50 and res.status == "running"
    assert np.mean(res.iteration_losses[-5:]) < math.log(len(corpus.vocab))


@pytest.mark.parametrize("arch", ["lstm", "hmrnn"])
def test_other_architectures_use_the_same_loop(arch):
    corpus = small_corpus()
    res = train(small_model_config(corpus, arch), TrainConfig(batch=8, seq_len=20), corpus, max_iterations=5)
    assert res.iterations == 5 and all(math.isfinite(v) for v in res.iteration_losses)


def test_same_seed_same_history():
    corpus = small_corpus(4000)
    cfg = TrainConfig(batch=4, seq_len=20, max_epochs=2, valid_chars=100)
    a = train(small_model_config(corpus), cfg, corpus)
    b = train(small_model_config(corpus), cfg, corpus)
    assert a.history == b.history and a.iteration_losses == b.iteration_losses
    assert len(a.history) == 2 and {"valid_bpc", "lr", "z1", "z2", "train_loss"} <= set(a.history[0])


def test_epoch_records_and_checkpoints(tmp_path):
    corpus = small_corpus(4000)
    cfg = TrainConfig(batch=4, seq_len=20, max_epochs=1, valid_chars=100)
    res = train(small_model_config(corpus), cfg, corpus, out_dir=tmp_path)
    assert res.status == "finished"
    assert (tmp_path / "last.hmlb").exists() and (tmp_path / "best.hmlb").exists()
    rec = res.history[0]
    assert 0 <= rec["z1"] <= 1 and 0 <= rec["z2"] <= 1


def test_truncation_at_chunk_boundaries():
    corpus = small_corpus(4000)
    mc = small_model_config(corpus)
    r = np.random.default_rng(5)
    x_prev = r.integers(0, len(corpus.vocab), (2, 10))
    x_other = r.integers(0, len(corpus.vocab), (2, 10))
    x, y = r.integers(0, len(corpus.vocab), (2, 2, 10))

    def grads_after(prev):
        tr = Trainer(mc, TrainConfig(batch=2, seq_len=10), corpus)
        _, _, state = tr.model.forward_sequence(prev)
        return tr, state

    tr1, s1 = grads_after(x_prev)
    tr2, _ = grads_after(x_other)
    # Same carried values, different history: the gradients must agree.
    grads = []
    for tr in (tr1, tr2):
        tr.state = [s.detach() for s in s1]
        tr.model.zero_grad()
        with Tape() as tape:
            logits, _, _ = tr.model.forward_sequence(x, tr.state)
            total, _ = loss_with_penalty(logits, y, tr.model.parameters(), 0.0)
        tape.backward(total)
        grads.append([p.grad.copy() for p in tr.model.parameters()])
    for g1, g2 in zip(*grads):
        assert g1.tobytes() == g2.tobytes()


def test_learning_rate_is_non_increasing_in_steps_of_fifty():
    corpus = small_corpus(3000)
    cfg = TrainConfig(batch=4, seq_len=10, max_epochs=4, valid_chars=60, lr=0.05)
    res = train(small_model_config(corpus), cfg, corpus)
    lrs = [h["lr"] for h in res.history]
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == pytest.approx(a / 50, rel=1e-12)


def test_divergence_is_recorded_not_raised(tmp_path):
    corpus = small_corpus(4000)
    mc = small_model_config(corpus, flags=CellFlags(slope_alpha=1.0))
    trainer = Trainer(mc, TrainConfig(batch=4, seq_len=20), corpus)
    # poison a weight so the loss becomes non-finite on the next step
    trainer.model.params["softmax.W"].assign(np.full(trainer.model.params["softmax.W"].shape, np.inf))
    with np.errstate(invalid="ignore"):
        res = trainer.run(max_iterations=5, out_dir=tmp_path)
    assert res.status == "diverged"
    assert res.divergence["iteration"] == 0 and "non-finite" in res.divergence["reason"]
    assert (tmp_path / "diverged.hmlb").exists()


def test_vocab_mismatch_is_rejected():
    corpus = small_corpus(3000)
    with pytest.raises(ValueError):
        Trainer(small_model_config(corpus).with_(vocab_size=3), TrainConfig(), corpus)


def test_train_config_validation():
    for bad in (dict(lr=0), dict(clip=-1), dict(l2=-0.1), dict(batch=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
