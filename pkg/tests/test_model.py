import numpy as np
import pytest
from scipy.special import log_softmax

from overtheair.corpus import SyntheticCorpusConfig, synth_corpus
from overtheair.ctc import Alphabet, ctc_loss
from overtheair.mfcc import mfcc_forward
from overtheair.model import (TrainConfig, _backward_batch, _forward_batch, decode_accuracy, feature_stats,
                              init_model, load_model, loss_and_grad_wav, model_forward, model_from_bytes,
                              model_to_bytes, save_model, train, transcribe, wav_loss)

from helpers import tiny_model


def loop_forward(m, feats):
    """Plain per-frame recurrence, independent of the batched implementation."""
    p = m.params
    h = np.zeros(m.hidden_size)
    out = []
    for f in feats:
        z = (f - m.feat_mean) / m.feat_std
        h = np.tanh(p["w_in"] @ z + p["b_in"] + p["w_rec"] @ h)
        out.append(p["w_out"] @ h + p["b_out"])
    return np.array(out)


def test_forward_matches_loop():
    m = tiny_model(hidden=12)
    feats = np.random.default_rng(0).standard_normal((20, 13)) * 5
    np.testing.assert_allclose(model_forward(m, feats), loop_forward(m, feats), atol=1e-12)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        model_forward(tiny_model(), np.zeros((5, 12)))


def test_parameter_gradients_finite_differences():
    m = tiny_model(hidden=6, characters="ab")
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((1, 7, 13)) * 5
    labels = [1, 2]

    def loss(model):
        return ctc_loss(model_forward(model, feats[0]), labels)

    from overtheair.ctc import ctc_loss_and_grad
    z, hs, logits = _forward_batch(m, feats)
    _, g = ctc_loss_and_grad(logits[0], labels)
    grads, _ = _backward_batch(m, z, hs, g[None])
    h = 1e-6
    for name, arr in m.params.items():
        for idx in [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(4)]:
            old = arr[idx]
            arr[idx] = old + h
            up = loss(m)
            arr[idx] = old - h
            dn = loss(m)
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - grads[name][idx]) <= 1e-5 * max(abs(fd), 1e-4), name


def test_waveform_gradient_finite_differences():
    m = tiny_model(hidden=10)
    rng = np.random.default_rng(2)
    x = 0.1 * rng.standard_normal(2400)
    loss, g = loss_and_grad_wav(m, x, "ab")
    assert loss == pytest.approx(wav_loss(m, x, "ab"), abs=1e-10)
    h = 1e-5
    ok = 0
    coords = rng.choice(x.size, 40, replace=False)
    for i in coords:
        e = np.zeros_like(x)
        e[i] = h
        fd = (wav_loss(m, x + e, "ab") - wav_loss(m, x - e, "ab")) / (2 * h)
        ok += abs(fd - g[i]) <= 1e-3 * max(abs(g[i]), 1e-8)
    assert ok >= 0.99 * len(coords)


def test_serialization_round_trip(tmp_path):
    m = tiny_model(hidden=8)
    m.loss_curve = [3.0, 2.5]
    blob = model_to_bytes(m)
    back = model_from_bytes(blob)
    assert model_to_bytes(back) == blob
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    assert back.alphabet.characters == m.alphabet.characters and back.loss_curve == [3.0, 2.5]
    save_model(m, tmp_path / "m.bin")
    assert (tmp_path / "m.bin").read_bytes() == blob
    assert model_to_bytes(load_model(tmp_path / "m.bin")) == blob


def test_rejects_foreign_file():
    with pytest.raises(ValueError):
        model_from_bytes(b"RIFF0000WAVEfmt ")


def test_init_deterministic():
    assert model_to_bytes(init_model(seed=3)) == model_to_bytes(init_model(seed=3))
    assert model_to_bytes(init_model(seed=3)) != model_to_bytes(init_model(seed=4))


def small_corpus():
    return synth_corpus(SyntheticCorpusConfig(num_phrases=40, max_length=3, vocabulary="abc", seed=5))


def test_zero_epochs_returns_copy():
    m = tiny_model()
    out = train(m, small_corpus(), TrainConfig(epochs=0))
    assert model_to_bytes(out) == model_to_bytes(m) and out is not m


def test_training_is_deterministic_and_reduces_loss():
    corpus = small_corpus()
    m = init_model(hidden_size=16, seed=1)
    m.feat_mean, m.feat_std = feature_stats(m.mfcc_cfg, [c for c, _ in corpus])
    cfg = TrainConfig(epochs=3, learning_rate=1e-2, batch_size=8, seed=2)
    a = train(m, corpus, cfg)
    b = train(m, corpus, cfg)
    assert model_to_bytes(a) == model_to_bytes(b)
    assert len(a.loss_curve) == 3 and a.loss_curve[-1] < a.loss_curve[0]
    assert 0.0 <= decode_accuracy(a, corpus) <= 1.0


def test_training_rejects_empty_corpus():
    with pytest.raises(ValueError):
        train(tiny_model(), [], TrainConfig(epochs=1))


def test_transcribe_uses_alphabet():
    m = tiny_model(characters="ab")
    text = transcribe(m, 0.1 * np.random.default_rng(3).standard_normal(4000))
    assert set(text) <= set("ab")
