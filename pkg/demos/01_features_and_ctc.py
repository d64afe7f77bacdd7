"""
Features, CTC and gradients on one synthetic phrase
====================================================

Renders a phrase from the tone-pair corpus, shows its MFCCs, and checks the
waveform gradient of the CTC loss against central differences. No training.
"""

import numpy as np

from overtheair.corpus import SyntheticCorpusConfig, render_phrase, tone_table
from overtheair.ctc import ctc_loss_and_grad, greedy_decode
from overtheair.mfcc import MfccConfig, mfcc_forward
from overtheair.model import init_model, loss_and_grad_wav, model_forward, wav_loss

cfg = SyntheticCorpusConfig()
tones = tone_table(cfg)
print("'o' is drawn as", [f"{f:.0f} Hz" for f in tones["o"]])

x = render_phrase("hello world", cfg, np.random.default_rng(0))
feats = mfcc_forward(x, MfccConfig())
print(f"{x.size} samples -> MFCC matrix {feats.values.shape} (frames x coefficients)")

# an untrained recognizer: loss is large and the greedy decode is noise
model = init_model(hidden_size=32, seed=0)
model.feat_mean = feats.values.mean(axis=0)
model.feat_std = feats.values.std(axis=0) + 1e-6
logits = model_forward(model, feats)
loss, g_logits = ctc_loss_and_grad(logits, model.alphabet.encode("hello world"))
print(f"CTC loss {loss:.2f}, greedy decode {greedy_decode(logits, model.alphabet)!r}")
print("each gradient row sums to", np.abs(g_logits.sum(axis=1)).max().round(12))

# waveform gradient vs finite differences at a few samples
loss, g = loss_and_grad_wav(model, x, "hello world")
rng = np.random.default_rng(1)
h = 1e-5
print("sample    analytic        numeric")
for i in sorted(rng.choice(x.size, 6, replace=False)):
    e = np.zeros_like(x)
    e[i] = h
    fd = (wav_loss(model, x + e, "hello world") - wav_loss(model, x - e, "hello world")) / (2 * h)
    print(f"{i:6d}  {g[i]: .6e}  {fd: .6e}")
