"""
Train the surrogate recognizer
==============================

Synthesizes the default corpus (tone-pair "phonemes", part of it reverberated)
and trains the single-layer tanh RNN with CTC. Takes roughly 10-15 minutes on
one CPU core. The checkpoint is written to demos/out/surrogate.bin and reused
by the other demos.
"""

import time

import numpy as np

from _common import MODEL_PATH, get_model
from overtheair.channel import make_eval_bank, sample_channel, simulate
from overtheair.corpus import SyntheticCorpusConfig, synth_corpus
from overtheair.model import transcribe

t0 = time.time()
model = get_model()
print(f"model ready in {time.time() - t0:.0f} s: {MODEL_PATH}")

# a few held-out clips, clean and through one held-out room each
held = synth_corpus(SyntheticCorpusConfig(num_phrases=6, seed=424242))
ev = make_eval_bank()
rng = np.random.default_rng(0)
for clip, phrase in held:
    heard = transcribe(model, simulate(clip.samples, sample_channel(ev, rng), ev))
    print(f"{phrase.text!r:18} clean {transcribe(model, clip.samples)!r:18} over the air {heard!r}")
