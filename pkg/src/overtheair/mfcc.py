"""Differentiable MFCC front end.

Hann window -> zero-padded rFFT -> power spectrum -> HTK mel filterbank ->
floored log -> orthonormal DCT-II. ``mfcc_vjp`` pushes a cotangent on the
coefficients back to the waveform.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct

from .dsp import SAMPLE_RATE


@dataclass(frozen=True)
class MfccConfig:
    frame_length: int = 400
    hop: int = 160
    fft_size: int = 512
    num_mel_filters: int = 26
    num_coefficients: int = 13
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.frame_length > self.fft_size:
            raise ValueError("frame_length must not exceed fft_size")
        if self.num_coefficients > self.num_mel_filters:
            raise ValueError("num_coefficients must not exceed num_mel_filters")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be positive")
        if self.hop <= 0 or self.frame_length <= 0:
            raise ValueError("frame geometry must be positive")

    def num_frames(self, n: int) -> int:
        if n < self.frame_length:
            return 0
        return 1 + (n - self.frame_length) // self.hop

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray          # [frames, coefficients]
    frame_length: int
    hop: int

    @property
    def num_frames(self):
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def filter_centers_hz(cfg: MfccConfig) -> np.ndarray:
    mels = np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.num_mel_filters + 2)
    return mel_to_hz(mels[1:-1])


@lru_cache(maxsize=16)
def _tables(cfg: MfccConfig):
    nbins = cfg.fft_size // 2 + 1
    freqs = np.arange(nbins) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.num_mel_filters + 2))
    fb = np.zeros((cfg.num_mel_filters, nbins))
    for k in range(cfg.num_mel_filters):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[k] = np.maximum(0.0, np.minimum(rising, falling))
    window = np.hanning(cfg.frame_length + 1)[:-1]   # periodic Hann
    dct_mat = dct(np.eye(cfg.num_mel_filters), type=2, norm="ortho", axis=0)[:cfg.num_coefficients]
    for a in (fb, window, dct_mat):
        a.setflags(write=False)
    return fb, window, dct_mat


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    return _tables(cfg)[0]


def _frame_index(n: int, cfg: MfccConfig) -> np.ndarray:
    t = cfg.num_frames(n)
    return np.arange(t)[:, None] * cfg.hop + np.arange(cfg.frame_length)[None, :]


def _forward(x: np.ndarray, cfg: MfccConfig):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < cfg.frame_length:
        raise ValueError(f"signal of {x.size} samples is shorter than one frame ({cfg.frame_length})")
    fb, window, dct_mat = _tables(cfg)
    idx = _frame_index(x.size, cfg)
    spec = np.fft.rfft(x[idx] * window, cfg.fft_size, axis=1)
    pspec = spec.real ** 2 + spec.imag ** 2
    energies = pspec @ fb.T
    floored = energies <= cfg.log_floor
    logmel = np.log(np.where(floored, cfg.log_floor, energies))
    return idx, spec, energies, floored, logmel, logmel @ dct_mat.T


def log_mel_energies(x, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Floored log filterbank energies (the quantity the DCT is applied to)."""
    return _forward(x, cfg)[4]


def mfcc_forward(x, cfg: MfccConfig = MfccConfig()) -> FeatureMatrix:
    return FeatureMatrix(_forward(x, cfg)[5], cfg.frame_length, cfg.hop)


def mfcc_vjp(x, cfg: MfccConfig, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * mfcc_forward(x).values)`` with respect to ``x``.

    Filter outputs clamped at ``log_floor`` contribute no gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    idx, spec, energies, floored, _, feats = _forward(x, cfg)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != feats.shape:
        raise ValueError(f"upstream shape {upstream.shape} != feature shape {feats.shape}")
    fb, window, dct_mat = _tables(cfg)
    g_log = upstream @ dct_mat
    g_energy = np.where(floored, 0.0, g_log / np.where(floored, 1.0, energies))
    g_pspec = g_energy @ fb
    # d|X_k|^2 / dframe_n = 2 Re(conj(X_k) e^{-2 pi i k n / N}); summing over the half
    # spectrum is an inverse real FFT once the DC and Nyquist terms are doubled.
    y = g_pspec * spec
    y[:, 0] *= 2.0
    if cfg.fft_size % 2 == 0:
        y[:, -1] *= 2.0
    g_frames = np.fft.irfft(y, cfg.fft_size, axis=1)[:, :cfg.frame_length] * cfg.fft_size
    g_frames *= window
    grad = np.zeros_like(x)
    np.add.at(grad, idx, g_frames)
    return grad
