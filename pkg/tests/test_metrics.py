import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overtheair.channel import identity_channel, make_eval_bank, make_train_bank
from overtheair.metrics import EvalRecord, edit_distance, evaluate, plot_progress, ProgressCurve, summary_table

from helpers import tiny_model

words = st.text(alphabet="abc ", max_size=12)


def dp_oracle(a, b):
    """Recursive Levenshtein with memoisation, written independently of the library."""
    from functools import lru_cache

    @lru_cache(None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


def test_edit_distance_examples():
    assert edit_distance("hello world", "hello world") == 0
    assert edit_distance("", "abc") == 3
    assert edit_distance("kitten", "sitting") == 3 == dp_oracle("kitten", "sitting")


@settings(max_examples=200, deadline=None)
@given(words, words)
def test_edit_distance_matches_oracle_and_is_symmetric(a, b):
    assert edit_distance(a, b) == dp_oracle(a, b) == edit_distance(b, a)
    assert (edit_distance(a, b) == 0) == (a == b)


@settings(max_examples=200, deadline=None)
@given(words, words, words)
def test_triangle_inequality(a, b, c):
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_evaluate_clean_clip_fails():
    m = tiny_model()
    x = 0.01 * np.random.default_rng(0).standard_normal(16000)
    rec = evaluate(x, "open the door", m, make_eval_bank(), trials=10, seed=0)
    assert rec.success_rate == 0.0
    assert rec.mean_edit_distance >= 5
    assert len(rec.decodes) == 10


def test_evaluate_all_exact_matches(monkeypatch):
    import overtheair.metrics as M
    monkeypatch.setattr(M, "transcribe", lambda model, x: "hi")
    rec = evaluate(np.zeros(4000), "hi", tiny_model(), identity_channel(), trials=10)
    assert rec.success_rate == 1.0 and rec.mean_edit_distance == 0.0


def test_one_character_off_is_failure(monkeypatch):
    import overtheair.metrics as M
    monkeypatch.setattr(M, "transcribe", lambda model, x: "open the doo")
    rec = evaluate(np.zeros(4000), "open the door", tiny_model(), identity_channel(), trials=3)
    assert rec.success_rate == 0.0 and rec.mean_edit_distance == 1.0


def test_evaluate_deterministic_and_jobs_invariant():
    m = tiny_model()
    x = 0.05 * np.random.default_rng(1).standard_normal(8000)
    ev = make_eval_bank()
    a = evaluate(x, "ab", m, ev, trials=12, seed=3)
    b = evaluate(x, "ab", m, ev, trials=12, seed=3, jobs=4)
    assert a.to_json() == b.to_json()


def test_evaluate_rejects_training_channel():
    tr = make_train_bank(4, seed_base=90_000)
    with pytest.raises(ValueError):
        evaluate(np.zeros(4000), "a", tiny_model(), make_eval_bank(), trials=1, train_channel=tr)
    with pytest.raises(ValueError):
        evaluate(np.zeros(4000), "a", tiny_model(), make_eval_bank(), trials=0)


def test_record_json_and_table():
    rec = EvalRecord("x", "hi", float("inf"), 2, 0.5, 1.0, ["hi", "h"])
    d = json.loads(rec.to_json())
    assert d["snr_db"] == "inf" and d["success_rate"] == 0.5
    assert "inf" in summary_table([rec])


def test_plot_is_deterministic(tmp_path):
    curve = ProgressCurve([0, 50, 100], [float("inf"), 10.0, 8.0], [0.0, 0.5, 1.0], [13.0, 3.0, 0.0])
    plot_progress(curve, tmp_path / "a.svg")
    plot_progress(curve, tmp_path / "b.svg")
    a = (tmp_path / "a.svg").read_bytes()
    assert a.startswith(b"<?xml") and a == (tmp_path / "b.svg").read_bytes()
    assert len(curve.to_jsonl().splitlines()) == 3
