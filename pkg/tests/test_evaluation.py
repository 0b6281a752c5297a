import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nidslstm.data import make_windows
from nidslstm.evaluation import (
    ConfusionMatrix,
    benchmark_prediction_time,
    confusion,
    evaluate,
    linear_fit,
    m2b_merge,
    metrics,
    predict,
    sweep_sequence_length,
    write_rows_csv,
)
from nidslstm.layers import ModelSpec, init_params, zero_params
from nidslstm.synth import synth_generate
from nidslstm.training import TrainConfig
from oracles import binary_metrics_by_hand, confusion_by_pairs


def matrix(tp, fp, fn, tn):
    return ConfusionMatrix(np.array([[tn, fp], [fn, tp]]))


def test_hand_computed_metrics():
    r = metrics(matrix(3, 1, 2, 4))
    assert r.accuracy == pytest.approx(0.7, abs=1e-12)
    assert r.precision == pytest.approx(0.75, abs=1e-12)
    assert r.recall == pytest.approx(0.6, abs=1e-12)
    assert r.f1 == pytest.approx(2 / 3, abs=1e-12)
    assert r.zero_division == []


def test_confusion_small_example():
    cm = confusion([1, 0, 1, 1], [1, 1, 0, 1], 2)
    tn, fp, fn, tp = cm.counts.ravel()
    assert (tp, tn, fp, fn) == (2, 0, 1, 1)


def test_perfect_and_degenerate():
    r = metrics(confusion([0, 1, 1], [0, 1, 1], 2))
    assert r.accuracy == 1.0 and r.f1 == 1.0
    r = metrics(confusion([0, 0], [0, 1], 2))
    assert r.precision == 0.0 and "precision" in r.zero_division
    with pytest.raises(ValueError):
        metrics(ConfusionMatrix(np.zeros((2, 2), dtype=int)))
    with pytest.raises(ValueError):
        confusion([2], [0], 2)
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 2)


def test_random_sets_match_pair_counting():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        k = int(rng.choice([2, 10]))
        p = rng.integers(0, k, n).tolist()
        l = rng.integers(0, k, n).tolist()
        cm = confusion(p, l, k)
        assert cm.counts.tolist() == confusion_by_pairs(p, l, k)
        r = metrics(cm)
        if k == 2:
            ac, pr, rc, f1 = binary_metrics_by_hand(p, l)
            assert (r.accuracy, r.precision, r.recall, r.f1) == pytest.approx((ac, pr, rc, f1), abs=1e-12)
        else:
            assert r.accuracy == pytest.approx(sum(a == b for a, b in zip(p, l)) / n, abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50), st.randoms())
def test_metrics_permutation_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = metrics(confusion(*zip(*pairs), 2))
    b = metrics(confusion(*zip(*shuffled), 2))
    assert a.rows() == b.rows()
    c = a.confusion.counts
    assert a.accuracy == np.trace(c) / c.sum()
    if a.precision + a.recall:
        assert a.f1 == pytest.approx(2 * a.precision * a.recall / (a.precision + a.recall), abs=1e-12)


def test_confusion_addition_is_merge():
    rng = np.random.default_rng(1)
    p, l = rng.integers(0, 10, 100), rng.integers(0, 10, 100)
    whole = confusion(p, l, 10)
    parts = confusion(p[:30], l[:30], 10) + confusion(p[30:], l[30:], 10)
    assert np.array_equal(whole.counts, parts.counts)
    assert np.array_equal(whole.counts.sum(axis=1), np.bincount(l, minlength=10))


def test_multiclass_report():
    r = metrics(confusion([0, 1, 1, 3], [0, 1, 2, 3], 10))
    assert r.accuracy == 0.75
    assert r.per_class_recall[:4] == [1.0, 1.0, 0.0, 1.0]
    assert r.macro_recall == pytest.approx(0.75)
    assert "recall[Analysis]" in r.text()


def test_m2b_merge():
    p, l = m2b_merge([0, 3, 7, 0], [0, 0, 9, 1])
    assert p.tolist() == [0, 1, 1, 0] and l.tolist() == [0, 0, 1, 1]
    assert m2b_merge(p, l)[0].tolist() == p.tolist()  # idempotent
    p, _ = m2b_merge([0] * 4, [0] * 4)
    assert p.tolist() == [0] * 4


def test_merge_commutes_with_metrics():
    rng = np.random.default_rng(2)
    for _ in range(200):
        p, l = rng.integers(0, 10, 40), rng.integers(0, 10, 40)
        merged = metrics(confusion(*m2b_merge(p, l), 2))
        direct = metrics(confusion((p > 0).astype(int), (l > 0).astype(int), 2))
        assert merged.rows() == direct.rows()


def synth_windows(n=400, length=4, seed=0):
    data = synth_generate(n, 2, 3, seed=seed)
    return data, make_windows(data.records, length)


def test_zero_params_predict_class_zero():
    data, ws = synth_windows()
    spec = ModelSpec("lstm", "binary", (25, 5, 4), 39, hidden=4)
    assert np.all(predict(zero_params(spec), ws) == 0)


def test_predictions_independent_of_batch_size_and_pure():
    data, ws = synth_windows()
    spec = ModelSpec("lstm", "multi", (25, 5, 4), 39, hidden=5)
    params = init_params(spec, np.random.default_rng(0))
    before = {k: v.copy() for k, v in params.tensors.items()}
    a = predict(params, ws, batch_size=7)
    b = predict(params, ws, batch_size=1000)
    assert np.array_equal(a, b)
    assert evaluate(params, ws, "m2b").rows() == evaluate(params, ws, "m2b").rows()
    assert all(np.array_equal(before[k], params.tensors[k]) for k in before)


def test_schema_mismatch_rejected():
    _, ws = synth_windows()
    spec = ModelSpec("lstm", "binary", (25, 5, 4), 39, hidden=2, schema_hash="0" * 64)
    with pytest.raises(ValueError, match="schema"):
        predict(init_params(spec, np.random.default_rng(0)), ws)


def test_sweep_single_length_one_row():
    data = synth_generate(300, 2, 3, seed=0)
    cfg = TrainConfig(epochs=1, hidden=4, batch_size=64)
    rows = sweep_sequence_length(data.records, (25, 5, 4), cfg, [2], test_records=data.records)
    assert len(rows) == 1 and set(rows[0]) == {"length", "val_accuracy", "test_accuracy"}
    with pytest.raises(ValueError):
        sweep_sequence_length(data.records, (25, 5, 4), cfg, [])


@pytest.mark.slow
def test_sweep_context_beats_single_record():
    # planted depth-5 rule: single records are capped at the 0.6875 Bayes rate
    data = synth_generate(6000, 2, 5, seed=4)
    cfg = TrainConfig(epochs=8, hidden=32, learning_rate=3e-3, seed=1, early_stop_patience=3)
    rows = sweep_sequence_length(data.records, (25, 5, 4), cfg, [1, 6])
    by_len = {r["length"]: r["val_accuracy"] for r in rows}
    assert by_len[6] - by_len[1] >= 0.10


def test_benchmark_rows_and_repetition_floor():
    spec = ModelSpec("lstm", "binary", (25, 5, 4), 39, hidden=8)
    params = init_params(spec, np.random.default_rng(0))
    rows = benchmark_prediction_time(params, [5], repetitions=30, warmup=2)
    assert len(rows) == 1 and rows[0]["length"] == 5 and rows[0]["seconds_per_sequence"] > 0
    with pytest.raises(ValueError):
        benchmark_prediction_time(params, [5], repetitions=10)


def test_linear_fit_exact_line():
    slope, intercept, r2 = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert (slope, intercept, r2) == pytest.approx((2.0, 1.0, 1.0))


def test_write_rows_csv(tmp_path):
    write_rows_csv(tmp_path / "t.csv", [{"length": 1, "x": 0.5}])
    assert (tmp_path / "t.csv").read_text() == "length,x\n1,0.5\n"
    with pytest.raises(ValueError):
        write_rows_csv(tmp_path / "u.csv", [])


def test_doubling_length_roughly_doubles_time():
    spec = ModelSpec("lstm", "binary", (25, 5, 4), 39)
    params = init_params(spec, np.random.default_rng(0))
    rows = benchmark_prediction_time(params, [150, 300], repetitions=30)
    ratio = rows[1]["seconds_per_sequence"] / rows[0]["seconds_per_sequence"]
    assert 1.6 <= ratio <= 2.6
