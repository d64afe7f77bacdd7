"""Simulated playback/recording channel.

A realization (``ChannelDraw``) fixes the impulse response, loudness and noise
seed, which makes ``simulate`` an affine map of its input with an exact
adjoint (``simulate_vjp``). The same machinery provides the attack's training
transforms and the held-out evaluation oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .dsp import (SAMPLE_RATE, AudioClip, FirFilter, ImpulseResponse, IrBankEntry, IrSynthesisParams,
                  add_noise, apply_fir, apply_fir_vjp, check_rate, convolve_ir, convolve_ir_vjp,
                  design_bandpass, load_ir_bank, save_ir_bank, synth_ir)

TRAIN_SEED_BASE = 10_000
EVAL_SEED_BASE = 90_000
EVAL_RT60_STRATA = (0.1, 0.2, 0.3, 0.5)
TRAIN_RT60_RANGE = (0.1, 0.5)
DIRECT_RATIO_RANGE = (0.8, 0.97)      # near-field playback: direct-to-reverberant ratio about 6-15 dB


class SeedOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelDraw:
    ir_index: int
    noise_seed: int
    gain: float = 1.0


@dataclass
class ChannelConfig:
    ir_bank: list
    noise_sigma: float = 0.01
    device_band: tuple[float, float] | None = (100.0, 7500.0)
    gain_jitter_db: float = 3.0
    device_taps: int = 511
    sample_rate: int = SAMPLE_RATE
    seeds: tuple[int, ...] = ()
    role: str = ""
    meta: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ir_bank:
            raise ValueError("ChannelConfig needs at least one impulse response")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.gain_jitter_db < 0:
            raise ValueError("gain_jitter_db must be non-negative")
        for ir in self.ir_bank:
            check_rate(ir.sample_rate, self.sample_rate)
        if self.device_band is not None:
            self.device_filter  # validates the band

    @cached_property
    def device_filter(self) -> FirFilter | None:
        if self.device_band is None:
            return None
        lo, hi = self.device_band
        return design_bandpass(lo, hi, self.sample_rate, self.device_taps)


def identity_channel(sample_rate: int = SAMPLE_RATE) -> ChannelConfig:
    return ChannelConfig([ImpulseResponse.delta(sample_rate)], noise_sigma=0.0, device_band=None,
                         gain_jitter_db=0.0, sample_rate=sample_rate)


def sample_channel(cfg: ChannelConfig, rng) -> ChannelDraw:
    """Uniform IR choice, a fresh noise seed and a gain from the jitter range."""
    idx = int(rng.integers(len(cfg.ir_bank)))
    noise_seed = int(rng.integers(2 ** 63 - 1))
    j = cfg.gain_jitter_db
    gain = 10 ** (rng.uniform(-j, j) / 20) if j > 0 else 1.0
    return ChannelDraw(idx, noise_seed, float(gain))


def _signal(x):
    if isinstance(x, AudioClip):
        return x.samples, x.sample_rate
    return np.asarray(x, dtype=np.float64), None


def simulate(clip, draw: ChannelDraw, cfg: ChannelConfig):
    """convolve -> gain -> device band-limit -> additive noise.

    Returns an AudioClip when given one, otherwise a plain array.
    """
    x, rate = _signal(clip)
    if rate is not None:
        check_rate(rate, cfg.sample_rate)
    y = convolve_ir(x, cfg.ir_bank[draw.ir_index]) * draw.gain
    if cfg.device_filter is not None:
        y = apply_fir(y, cfg.device_filter)
    y = add_noise(y, cfg.noise_sigma, draw.noise_seed)
    return AudioClip(y, rate) if rate is not None else y


def simulate_vjp(g, draw: ChannelDraw, cfg: ChannelConfig) -> np.ndarray:
    """Adjoint of ``simulate`` for a fixed draw (noise is additive, so it drops out)."""
    g = np.asarray(g, dtype=np.float64)
    if cfg.device_filter is not None:
        g = apply_fir_vjp(g, cfg.device_filter)
    return convolve_ir_vjp(g * draw.gain, cfg.ir_bank[draw.ir_index])


# ---------------------------------------------------------------------------
# IR banks
# ---------------------------------------------------------------------------

def ir_params_for_seed(seed: int, rt60: float | None = None) -> IrSynthesisParams:
    """Room parameters drawn deterministically from ``seed``."""
    rng = np.random.default_rng([seed, 7])
    if rt60 is None:
        rt60 = float(rng.uniform(*TRAIN_RT60_RANGE))
    else:
        rng.uniform()
    return IrSynthesisParams(rt60=rt60, direct_ratio=float(rng.uniform(*DIRECT_RATIO_RANGE)), length=rt60)


def build_bank(params_list, seeds, sample_rate: int = SAMPLE_RATE, role: str = "", **channel_kw) -> ChannelConfig:
    seeds = tuple(int(s) for s in seeds)
    if len(params_list) != len(seeds):
        raise ValueError("need one seed per parameter set")
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate IR seeds")
    irs, meta = [], []
    for p, s in zip(params_list, seeds):
        irs.append(synth_ir(p, sample_rate, s))
        meta.append({"seed": s, "rt60": p.rt60, "direct_ratio": p.direct_ratio, "length": p.length, "split": role})
    return ChannelConfig(irs, sample_rate=sample_rate, seeds=seeds, role=role, meta=meta, **channel_kw)


def make_train_bank(n: int = 64, seed_base: int = TRAIN_SEED_BASE, **channel_kw) -> ChannelConfig:
    seeds = range(seed_base, seed_base + n)
    return build_bank([ir_params_for_seed(s) for s in seeds], seeds, role="train", **channel_kw)


def make_eval_bank(params_list=None, seeds=None, train_seeds=(), **channel_kw) -> ChannelConfig:
    """Held-out bank. Rejects any seed that also appears in ``train_seeds``.

    With no arguments: 16 IRs, four per rt60 stratum, seeds from ``EVAL_SEED_BASE``.
    """
    if seeds is None:
        seeds = list(range(EVAL_SEED_BASE, EVAL_SEED_BASE + 16))
    if params_list is None:
        params_list = [ir_params_for_seed(s, EVAL_RT60_STRATA[i % len(EVAL_RT60_STRATA)])
                       for i, s in enumerate(seeds)]
    overlap = set(int(s) for s in seeds) & set(int(s) for s in train_seeds)
    if overlap:
        raise SeedOverlapError(f"eval seeds overlap the training seeds: {sorted(overlap)}")
    return build_bank(params_list, seeds, role="eval", **channel_kw)


def check_disjoint(train: ChannelConfig, held_out: ChannelConfig):
    overlap = set(train.seeds) & set(held_out.seeds)
    if overlap:
        raise SeedOverlapError(f"held-out channel shares IR seeds with training: {sorted(overlap)}")


def save_bank(cfg: ChannelConfig, directory):
    entries = [IrBankEntry(ir, meta) for ir, meta in zip(cfg.ir_bank, cfg.meta or [{}] * len(cfg.ir_bank))]
    return save_ir_bank(entries, directory)


def load_bank(directory, split: str | None = None, **channel_kw) -> ChannelConfig:
    entries = load_ir_bank(directory, split)
    if not entries:
        raise ValueError(f"no impulse responses for split {split!r} in {directory}")
    seeds = tuple(int(e.meta["seed"]) for e in entries if "seed" in e.meta)
    return ChannelConfig([e.ir for e in entries], seeds=seeds, role=split or "",
                         meta=[e.meta for e in entries], **channel_kw)
