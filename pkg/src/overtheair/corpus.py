"""Deterministic synthetic "phoneme" corpus and a music-like host clip.

Each character is rendered as a pair of steady tones placed on mel filter
centres, so the surrogate recognizer has a well-defined acoustic target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ctc import Alphabet, TargetPhrase
from .dsp import SAMPLE_RATE, AudioClip, IrSynthesisParams, convolve_ir, synth_ir
from .mfcc import MfccConfig, filter_centers_hz


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    num_phrases: int = 4000
    min_length: int = 1
    max_length: int = 14
    vocabulary: str | None = None           # characters used by random phrases; None = whole alphabet
    phrases: tuple[str, ...] = ()           # fixed phrases rendered before the random ones
    char_ms: float = 120.0
    fade_ms: float = 10.0
    pad_ms: float = 50.0
    tone_low_hz: float = 1000.0
    tone_high_hz: float = 3800.0
    amplitude_range: tuple[float, float] = (0.05, 0.5)
    freq_jitter: float = 0.015
    noise_sigma: float = 0.01
    # room augmentation: without it the recogniser breaks on the smeared features of any real room
    reverb_prob: float = 0.8
    reverb_rt60: tuple[float, float] = (0.1, 0.6)
    reverb_direct: tuple[float, float] = (0.5, 0.95)
    reverb_seed_base: int = 50_000          # keep clear of the attack/eval IR seed ranges
    sample_rate: int = SAMPLE_RATE
    seed: int = 0
    alphabet: Alphabet = field(default_factory=Alphabet)

    def __post_init__(self):
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if self.fade_ms * 2 > self.char_ms:
            raise ValueError("fades longer than a character")
        for p in self.phrases:
            self.alphabet.encode(p)
        if self.vocabulary:
            self.alphabet.encode(self.vocabulary)

    @property
    def char_samples(self) -> int:
        return int(round(self.char_ms * self.sample_rate / 1000))

    @property
    def pad_samples(self) -> int:
        return int(round(self.pad_ms * self.sample_rate / 1000))

    def clip_samples(self, num_chars: int) -> int:
        return 2 * self.pad_samples + num_chars * self.char_samples


def tone_table(cfg: SyntheticCorpusConfig, mfcc_cfg: MfccConfig = MfccConfig()) -> dict[str, tuple[float, float]]:
    """Map every character to a distinct (f1, f2) pair of mel filter centres.

    Pairs are taken widest-separation first, so similar characters never share
    adjacent filters when the band allows it.
    """
    centers = filter_centers_hz(mfcc_cfg)
    usable = [f for f in centers if cfg.tone_low_hz <= f <= cfg.tone_high_hz]
    pairs = [(i, j) for i in range(len(usable)) for j in range(i + 1, len(usable))]
    pairs.sort(key=lambda p: (-(p[1] - p[0]), p[0]))
    chars = cfg.alphabet.characters
    if len(pairs) < len(chars):
        raise ValueError(f"tone band holds only {len(pairs)} pairs for {len(chars)} characters")
    return {c: (float(usable[i]), float(usable[j])) for c, (i, j) in zip(chars, pairs)}


def render_phrase(text: str, cfg: SyntheticCorpusConfig, rng, tones=None) -> np.ndarray:
    tones = tones or tone_table(cfg)
    cfg.alphabet.encode(text)
    n = cfg.char_samples
    nf = int(round(cfg.fade_ms * cfg.sample_rate / 1000))
    env = np.ones(n)
    if nf:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(nf) / nf)
        env[:nf] = ramp
        env[n - nf:] = ramp[::-1]
    t = np.arange(n) / cfg.sample_rate
    lo, hi = cfg.amplitude_range
    amp = np.exp(rng.uniform(np.log(lo), np.log(hi)))
    pad = np.zeros(cfg.pad_samples)
    segs = [pad]
    for c in text:
        f1, f2 = tones[c]
        jit = 1 + cfg.freq_jitter * rng.uniform(-1, 1, 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        a = amp * 10 ** (rng.uniform(-3, 3, 2) / 20)
        seg = a[0] * np.sin(2 * np.pi * f1 * jit[0] * t + ph[0]) + a[1] * np.sin(2 * np.pi * f2 * jit[1] * t + ph[1])
        segs.append(0.5 * seg * env)
    segs.append(pad)
    x = np.concatenate(segs)
    if cfg.reverb_prob > 0 and rng.uniform() < cfg.reverb_prob:
        rt60 = rng.uniform(*cfg.reverb_rt60)
        params = IrSynthesisParams(rt60=rt60, direct_ratio=rng.uniform(*cfg.reverb_direct), length=rt60)
        x = convolve_ir(x, synth_ir(params, cfg.sample_rate, cfg.reverb_seed_base + int(rng.integers(10_000))))
    if cfg.noise_sigma > 0:
        x = x + rng.uniform(0, cfg.noise_sigma) * rng.standard_normal(x.size)
    return x


def random_phrases(cfg: SyntheticCorpusConfig, rng) -> list[str]:
    vocab = cfg.vocabulary or cfg.alphabet.characters
    out = list(cfg.phrases)
    while len(out) < cfg.num_phrases:
        n = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        out.append("".join(vocab[i] for i in rng.integers(0, len(vocab), n)))
    return out


def synth_corpus(cfg: SyntheticCorpusConfig) -> list[tuple[AudioClip, TargetPhrase]]:
    """Render ``cfg.num_phrases`` clips; bit-identical for a given seed."""
    rng = np.random.default_rng(cfg.seed)
    tones = tone_table(cfg)
    corpus = []
    for text in random_phrases(cfg, rng):
        x = render_phrase(text, cfg, rng, tones)
        corpus.append((AudioClip(x, cfg.sample_rate), TargetPhrase.from_text(text, cfg.alphabet)))
    return corpus


def synth_music_clip(duration: float = 3.0, sample_rate: int = SAMPLE_RATE, seed: int = 0,
                     rms: float = 0.1) -> AudioClip:
    """A bowed-string-like melody: low fundamentals with a 1/k harmonic series.

    Non-speech host audio for attacks; most energy sits below 1 kHz.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    x = np.zeros(n)
    note_len = int(0.25 * sample_rate)
    # C major-ish scale over two octaves starting at C2
    scale = 65.41 * 2 ** (np.array([0, 2, 4, 5, 7, 9, 11, 12, 14, 16, 17, 19]) / 12)
    t = np.arange(note_len + sample_rate // 20) / sample_rate
    for start in range(0, n, note_len):
        f0 = scale[rng.integers(0, scale.size)]
        vib = 1 + 0.004 * np.sin(2 * np.pi * 5.5 * t)
        phase = 2 * np.pi * f0 * np.cumsum(vib) / sample_rate
        note = np.zeros(t.size)
        for k in range(1, int(7500 // f0) + 1):
            note += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
        attack = np.minimum(1.0, t / 0.03)
        release = np.clip((t[-1] - t) / 0.06, 0, 1)
        note *= attack * release
        seg = note[: n - start]
        x[start:start + seg.size] += seg
    x *= rms / np.sqrt(np.mean(x ** 2))
    return AudioClip(x, sample_rate)
