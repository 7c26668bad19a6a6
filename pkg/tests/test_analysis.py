import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmlstm.analysis import (SegmentationRecord, boundary_agreement, evaluate_bpc, extract_segmentation,
                             format_ratio, format_table, parse_tsv, read_pgm, render_segmentation, to_pgm, to_tsv,
                             z_ratio)
from hmlstm.cells import CellFlags
from hmlstm.data import Vocabulary
from hmlstm.model import Model
from hmlstm.numerics import log_softmax

from conftest import tiny_config


def uniform_model(V):
    model = Model(tiny_config(vocab_size=V))
    model.params["softmax.W"].assign(np.zeros(model.params["softmax.W"].shape))
    model.params["softmax.b"].assign(np.zeros(V))
    return model


@pytest.mark.parametrize("V", [4, 7, 50])
def test_uniform_model_scores_log2_v(V):
    ids = np.random.default_rng(0).integers(0, V, 300)
    assert abs(evaluate_bpc(uniform_model(V), ids) - math.log2(V)) < 1e-6


def oracle_bpc(model, ids):
    logits, _, _ = model.forward_sequence(ids[None, :-1])
    logp = log_softmax(logits.data[0])
    return -logp[np.arange(len(ids) - 1), ids[1:]].mean() / math.log(2)


@pytest.mark.parametrize("arch", ["hmlstm", "hmrnn", "lstm"])
def test_chunked_evaluation_matches_whole_sequence(arch):
    model = Model(tiny_config(arch, seed=3))
    ids = np.random.default_rng(1).integers(0, 7, 257)
    want = oracle_bpc(model, ids)
    for chunk in (1, 7, 100, 1000):
        assert abs(evaluate_bpc(model, ids, chunk) - want) <= 1e-6
    assert evaluate_bpc(model, ids, 1) == pytest.approx(evaluate_bpc(model, ids, 100), abs=1e-12)


def test_bpc_is_additive_over_halves():
    model = Model(tiny_config(seed=4))
    ids = np.random.default_rng(2).integers(0, 7, 201)
    whole = evaluate_bpc(model, ids)
    # predict ids[1:101] from the first half, then continue with carried state
    logits1, _, state = model.forward_sequence(ids[None, :100])
    logits2, _, _ = model.forward_sequence(ids[None, 100:200], state)
    lp = np.concatenate([log_softmax(logits1.data[0]), log_softmax(logits2.data[0])])
    halves = -lp[np.arange(200), ids[1:]].mean() / math.log(2)
    assert abs(halves - whole) <= 1e-6


def test_evaluation_leaves_parameters_untouched():
    model = Model(tiny_config(seed=5))
    before = {n: p.data.tobytes() for n, p in model.params.items()}
    evaluate_bpc(model, np.arange(50) % 7)
    assert before == {n: p.data.tobytes() for n, p in model.params.items()}
    assert all(not np.any(p.grad) for p in model.parameters())


def test_evaluation_rejects_empty_input():
    with pytest.raises(ValueError):
        evaluate_bpc(uniform_model(4), np.array([1]))


# --- statistics -------------------------------------------------------------------------

def test_row_four_ratio():
    assert format_ratio(z_ratio(0.42, 0.09)) == "4.67"


def test_ratio_conventions():
    assert z_ratio(0.0, 0.3) == 0.0
    assert z_ratio(0.3, 0.0) is None and z_ratio(0.0, 0.0) is None
    assert format_ratio(None) == "undefined"


def test_hand_counted_trace():
    rec = SegmentationRecord("ab cd ef g", [1, 0, 1, 0, 0, 1, 0, 0, 1, 1], [0, 0, 1, 0, 0, 0, 0, 0, 0, 1])
    assert rec.freq1 == 0.5 and rec.freq2 == 0.2
    assert rec.z_ratio == 0.5 / 0.2


def test_model_trace_matches_manual_tally():
    model = Model(tiny_config(seed=6, vocab_size=6))
    vocab = Vocabulary("abcde")
    text = "abc dea bc"
    rec = extract_segmentation(model, vocab, text, chunk=3)
    _, z, _ = model.forward_sequence(vocab.encode(text)[None])
    np.testing.assert_array_equal(rec.z1, z[0, :, 0])
    np.testing.assert_array_equal(rec.z2, z[0, :, 1])
    assert rec.freq1 == sum(int(v) for v in z[0, :, 0]) / 10
    assert rec.z_ratio == z_ratio(rec.freq1, rec.freq2)


def test_forced_boundaries_give_undefined_ratio():
    model = Model(tiny_config(seed=7, vocab_size=6, flags=CellFlags(use_layer_norm=False), ln_on_embeddings=False))
    for idx, sign in ((1, 1.0), (2, -1.0)):
        for m in ("W", "U", "V"):
            w = model.params[f"layer{idx}.{m}"].data.copy()
            w[:, -1] = 0
            model.params[f"layer{idx}.{m}"].assign(w)
        b = model.params[f"layer{idx}.b"].data.copy()
        b[-1] = 100 * sign
        model.params[f"layer{idx}.b"].assign(b)
    rec = extract_segmentation(model, Vocabulary("abcde"), "abcdeabcde")
    assert rec.freq1 == 1.0 and rec.freq2 == 0.0 and rec.z_ratio is None


def test_segmentation_rejects_lstm():
    with pytest.raises(ValueError):
        extract_segmentation(Model(tiny_config("lstm", vocab_size=6)), Vocabulary("abcde"), "abc")


def test_record_validation():
    with pytest.raises(ValueError):
        SegmentationRecord("ab", [1], [0, 0])
    with pytest.raises(ValueError):
        SegmentationRecord("ab", [2, 0], [0, 0])


# --- agreement with spaces -------------------------------------------------------------

def test_perfect_and_silent_boundaries():
    text = "the cat sat"
    spaces = [1 if ch == " " else 0 for ch in text]
    a = boundary_agreement(SegmentationRecord(text, spaces, spaces))
    assert (a.precision, a.recall, a.f1) == (1.0, 1.0, 1.0)
    b = boundary_agreement(SegmentationRecord(text, [0] * 11, [0] * 11))
    assert b.precision is None and b.recall == 0.0


def test_no_spaces_means_undefined_recall():
    a = boundary_agreement(SegmentationRecord("abc", [1, 0, 0], [0, 0, 0]))
    assert a.recall is None and a.precision == 0.0


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="ab ", min_size=1, max_size=40), st.integers(0, 2**31 - 1), st.sampled_from([0, 1]))
def test_agreement_matches_set_oracle(text, seed, tol):
    z = np.random.default_rng(seed).integers(0, 2, len(text))
    rec = SegmentationRecord(text, z, np.zeros(len(text)))
    a = boundary_agreement(rec, "z1", tolerance=tol)
    pred = {i for i in range(len(text)) if z[i]}
    gold = {i for i, ch in enumerate(text) if ch == " "}
    hit_p = {p for p in pred if any(abs(p - g) <= tol for g in gold)}
    hit_g = {g for g in gold if any(abs(p - g) <= tol for p in pred)}
    assert a.precision == (len(hit_p) / len(pred) if pred else None)
    assert a.recall == (len(hit_g) / len(gold) if gold else None)
    if tol == 0 and pred and gold:
        assert len(hit_p) == len(pred & gold)


# --- rendering --------------------------------------------------------------------------

def test_pgm_example():
    data = to_pgm(SegmentationRecord("abc", [1, 0, 1], [0, 0, 1]))
    assert data.startswith(b"P5\n3 2\n255\n")
    np.testing.assert_array_equal(read_pgm(data), [[0, 255, 0], [255, 255, 0]])


def test_pgm_pixel_counts_track_frequencies():
    r = np.random.default_rng(8)
    n = 500
    rec = SegmentationRecord("x" * n, (r.random(n) < 0.42).astype(int), (r.random(n) < 0.09).astype(int))
    px = read_pgm(to_pgm(rec))
    black = (px == 0).sum(axis=1)
    assert abs(black[0] / n - rec.freq1) <= 1 / n and abs(black[1] / n - rec.freq2) <= 1 / n
    assert black[1] < black[0]


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=0, max_size=30), st.integers(0, 2**31 - 1))
def test_tsv_round_trip(text, seed):
    r = np.random.default_rng(seed)
    rec = SegmentationRecord(text, r.integers(0, 2, len(text)), r.integers(0, 2, len(text)))
    assert parse_tsv(to_tsv(rec)) == rec


def test_render_writes_files_and_keeps_record(tmp_path):
    rec = SegmentationRecord("a\tb\n", [1, 0, 1, 0], [0, 0, 1, 1])
    copy = SegmentationRecord(rec.text, rec.z1.copy(), rec.z2.copy())
    render_segmentation(rec, tmp_path / "s.tsv")
    render_segmentation(rec, tmp_path / "s.pgm")
    assert rec == copy
    assert parse_tsv((tmp_path / "s.tsv").read_text()) == rec
    assert read_pgm((tmp_path / "s.pgm").read_bytes()).shape == (2, 4)
    with pytest.raises(ValueError):
        render_segmentation(rec, tmp_path / "s.png")


def test_table_columns():
    out = format_table([{"label": "HMLSTM", "bpc": 1.2712, "iterations": 40, "z1": 0.42, "z2": 0.09},
                        {"label": "LSTM", "bpc": None, "iterations": 3, "z1": None, "z2": None}])
    lines = out.splitlines()
    assert lines[0] == "|  | BPC | Iter. | z1 | z2 | z-ratio |"
    assert "4.67" in lines[2] and "1.2712" in lines[2]
    assert "diverged" in lines[3] and "N/A" in lines[3]
