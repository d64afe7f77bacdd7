"""Small shared fixtures for the unit tests (no training involved)."""

import numpy as np

from overtheair.ctc import Alphabet
from overtheair.model import init_model


def tiny_model(hidden=16, seed=0, characters=None):
    alphabet = Alphabet(characters) if characters else Alphabet()
    m = init_model(alphabet, hidden_size=hidden, seed=seed)
    # rough feature scale so the untrained net is not saturated
    m.feat_mean = np.full(13, -5.0)
    m.feat_std = np.full(13, 10.0)
    return m
