"""Shared helper for the demo scripts: train (once) or load the surrogate."""

import os
from pathlib import Path

from overtheair.corpus import SyntheticCorpusConfig, synth_corpus
from overtheair.model import TrainConfig, decode_accuracy, feature_stats, init_model, load_model, save_model, train

OUT = Path(os.environ.get("OVERTHEAIR_DEMO_DIR", Path(__file__).parent / "out"))
OUT.mkdir(parents=True, exist_ok=True)
MODEL_PATH = OUT / "surrogate.bin"


def get_model(verbose=True):
    if MODEL_PATH.exists():
        return load_model(MODEL_PATH)
    corpus = synth_corpus(SyntheticCorpusConfig(seed=0))
    model = init_model(seed=0)
    model.feat_mean, model.feat_std = feature_stats(model.mfcc_cfg, [c for c, _ in corpus])
    report = (lambda e, l: print(f"  epoch {e:3d}  loss {l:.3f}")) if verbose else None
    model = train(model, corpus, TrainConfig(seed=0), progress=report)
    held = synth_corpus(SyntheticCorpusConfig(num_phrases=200, seed=1_000_003, reverb_prob=0.0))
    print(f"held-out clean accuracy: {decode_accuracy(model, held):.1%}")
    save_model(model, MODEL_PATH)
    return model
