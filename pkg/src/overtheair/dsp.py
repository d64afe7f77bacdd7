"""Waveform containers and the linear DSP blocks used by the attack and the channel.

Every block here that sits inside the attack objective (``apply_fir``,
``convolve_ir``) comes with its vector-Jacobian product so gradients can be
pushed from the recognizer back onto the perturbation.
"""

from __future__ import annotations

import json
import logging
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
_INT16_SCALE = 32768.0


class SampleRateError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("AudioClip needs a non-empty 1-D sample vector")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def check_rate(a: int, b: int):
    if a != b:
        raise SampleRateError(f"sample rate mismatch: {a} Hz vs {b} Hz")


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM 16-bit little-endian)
# ---------------------------------------------------------------------------

def load_wav(path, strict: bool = True, expected_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a 16-bit PCM WAV file. Multi-channel files are averaged to mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            nch = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"unsupported or corrupt WAV file {path}: {exc}") from exc
    if width != 2:
        raise ValueError(f"{path}: only 16-bit PCM is supported (got {8 * width}-bit)")
    if strict and rate != expected_rate:
        raise SampleRateError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _INT16_SCALE
    data = data.reshape(-1, nch).mean(axis=1)
    return AudioClip(data, rate)


def save_wav(clip: AudioClip, path) -> int:
    """Write ``clip`` as mono 16-bit PCM and return the number of clipped samples."""
    if not str(path):
        raise ValueError("empty output path")
    x = clip.samples
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot save non-finite samples")
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if clipped:
        log.warning("save_wav: %d samples outside [-1, 1] were clipped", clipped)
    q = np.clip(np.round(x * _INT16_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(q.tobytes())
    return clipped


# ---------------------------------------------------------------------------
# FIR band-pass
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray
    low_hz: float
    high_hz: float
    sample_rate: int = SAMPLE_RATE

    @property
    def delay(self) -> int:
        return (self.taps.size - 1) // 2


def design_bandpass(low_hz: float, high_hz: float, sample_rate: int = SAMPLE_RATE,
                    num_taps: int = 511) -> FirFilter:
    """Blackman-windowed sinc band-pass with linear phase."""
    if num_taps < 3 or num_taps % 2 == 0:
        raise ValueError(f"num_taps must be odd and >= 3, got {num_taps}")
    if not 0 < low_hz < high_hz < sample_rate / 2:
        raise ValueError(f"invalid band ({low_hz}, {high_hz}) for rate {sample_rate}")
    n = np.arange(num_taps) - (num_taps - 1) / 2
    fl, fh = low_hz / sample_rate, high_hz / sample_rate
    ideal = 2 * fh * np.sinc(2 * fh * n) - 2 * fl * np.sinc(2 * fl * n)
    taps = ideal * np.blackman(num_taps)
    # unity gain at the band centre
    fc = 0.5 * (low_hz + high_hz) / sample_rate
    gain = np.abs(np.sum(taps * np.exp(-2j * np.pi * fc * n)))
    taps = taps / gain
    taps = 0.5 * (taps + taps[::-1])
    return FirFilter(taps, float(low_hz), float(high_hz), sample_rate)


def fir_response_db(filt: FirFilter, freqs_hz, nfft: int = 1 << 16) -> np.ndarray:
    """Magnitude response in dB at ``freqs_hz``, read off a zero-padded FFT of the taps."""
    spec = np.abs(np.fft.rfft(filt.taps, nfft))
    grid = np.fft.rfftfreq(nfft, 1.0 / filt.sample_rate)
    mag = np.interp(np.asarray(freqs_hz, dtype=float), grid, spec)
    return 20 * np.log10(np.maximum(mag, 1e-300))


def _conv_same(x: np.ndarray, taps: np.ndarray, offset: int) -> np.ndarray:
    full = sps.oaconvolve(x, taps) if x.size > 4 * taps.size else np.convolve(x, taps)
    return full[offset:offset + x.size]


def apply_fir(x: np.ndarray, filt: FirFilter) -> np.ndarray:
    """Filter ``x`` with group delay removed, so the output lines up with the input."""
    return _conv_same(np.asarray(x, dtype=np.float64), filt.taps, filt.delay)


def apply_fir_vjp(g: np.ndarray, filt: FirFilter) -> np.ndarray:
    # adjoint of a centred convolution is correlation with the same taps
    return _conv_same(np.asarray(g, dtype=np.float64), filt.taps[::-1], filt.taps.size - 1 - filt.delay)


# ---------------------------------------------------------------------------
# Impulse responses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: int = SAMPLE_RATE
    label: str = ""

    def __post_init__(self):
        h = np.asarray(self.taps, dtype=np.float64)
        if h.ndim != 1 or h.size == 0:
            raise ValueError("impulse response must be a non-empty vector")
        if not np.sum(h * h) > 0:
            raise ValueError("impulse response has zero energy")
        object.__setattr__(self, "taps", h)

    def normalized(self) -> "ImpulseResponse":
        return ImpulseResponse(self.taps / np.sqrt(np.sum(self.taps ** 2)), self.sample_rate, self.label)

    @classmethod
    def delta(cls, sample_rate: int = SAMPLE_RATE, gain: float = 1.0) -> "ImpulseResponse":
        return cls(np.array([gain]), sample_rate, "delta")


@dataclass(frozen=True)
class IrSynthesisParams:
    rt60: float = 0.3
    direct_ratio: float = 0.5
    length: float | None = None   # seconds; defaults to rt60

    def __post_init__(self):
        if self.length is None:
            object.__setattr__(self, "length", float(self.rt60))
        if not self.rt60 > 0:
            raise ValueError("rt60 must be positive")
        if not 0 < self.direct_ratio <= 1:
            raise ValueError("direct_ratio must lie in (0, 1]")
        if self.length < self.rt60 / 2:
            raise ValueError("length must be at least rt60/2")


def synth_ir(params: IrSynthesisParams, sample_rate: int = SAMPLE_RATE, seed: int = 0) -> ImpulseResponse:
    """Exponentially decaying Gaussian tail behind a direct-path impulse.

    The tail amplitude envelope falls 60 dB over ``rt60`` seconds. The direct
    path carries ``direct_ratio`` of the energy; the result has unit energy.
    """
    n = max(int(round(params.length * sample_rate)), 1)
    h = np.zeros(n)
    h[0] = np.sqrt(params.direct_ratio)
    tail_energy = 1.0 - params.direct_ratio
    if tail_energy > 0 and n > 1:
        rng = np.random.default_rng(seed)
        t = np.arange(1, n) / sample_rate
        tail = rng.standard_normal(n - 1) * np.exp(-6.908 * t / params.rt60)
        h[1:] = tail * np.sqrt(tail_energy / np.sum(tail ** 2))
    label = f"synth-{seed}-rt{params.rt60:g}"
    return ImpulseResponse(h, sample_rate, label).normalized()


def convolve_ir(x: np.ndarray, ir: ImpulseResponse, sample_rate: int | None = None) -> np.ndarray:
    """Linear convolution with ``ir``, truncated to the input length."""
    if sample_rate is not None:
        check_rate(sample_rate, ir.sample_rate)
    x = np.asarray(x, dtype=np.float64)
    h = ir.taps
    if h.size == 1:
        return x * h[0]
    return sps.fftconvolve(x, h)[:x.size]


def convolve_ir_vjp(g: np.ndarray, ir: ImpulseResponse) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    h = ir.taps
    if h.size == 1:
        return g * h[0]
    return sps.fftconvolve(g, h[::-1])[h.size - 1:h.size - 1 + g.size]


# ---------------------------------------------------------------------------
# Noise and power
# ---------------------------------------------------------------------------

def add_noise(x: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise. ``rng`` may be a Generator or an integer seed."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(rng)
    return x + sigma * rng.standard_normal(x.size)


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("power of an empty signal")
    return float(np.mean(x * x))


def snr_db(x, v) -> float:
    """10 log10(P_x / P_v). Returns ``inf`` for a zero perturbation."""
    x = x.samples if isinstance(x, AudioClip) else x
    v = v.samples if isinstance(v, AudioClip) else v
    pv = power(v)
    if pv == 0:
        return float("inf")
    return 10.0 * np.log10(power(x) / pv)


# ---------------------------------------------------------------------------
# IR banks on disk: <dir>/<label>.wav plus manifest.jsonl
# ---------------------------------------------------------------------------

@dataclass
class IrBankEntry:
    ir: ImpulseResponse
    meta: dict = field(default_factory=dict)


def save_ir_bank(entries, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for e in entries:
        fname = f"{e.ir.label}.wav"
        peak = np.max(np.abs(e.ir.taps))
        # IR taps can exceed full scale; store scaled and renormalise on load
        save_wav(AudioClip(e.ir.taps / max(peak, 1.0), e.ir.sample_rate), directory / fname)
        lines.append(json.dumps({"label": e.ir.label, "file": fname, **e.meta}, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return directory


def load_ir_bank(directory, split: str | None = None) -> list[IrBankEntry]:
    """Load a bank written by :func:`save_ir_bank`; IRs are energy-normalised."""
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no IR manifest in {directory}")
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        meta = json.loads(line)
        if split is not None and meta.get("split") != split:
            continue
        clip = load_wav(directory / meta["file"])
        ir = ImpulseResponse(clip.samples, clip.sample_rate, meta["label"]).normalized()
        out.append(IrBankEntry(ir, meta))
    return out


def import_ir_files(paths, sample_rate: int = SAMPLE_RATE) -> list[ImpulseResponse]:
    """Import externally recorded IR WAVs (energy-normalised)."""
    irs = []
    for p in paths:
        clip = load_wav(p, strict=True, expected_rate=sample_rate)
        irs.append(ImpulseResponse(clip.samples, clip.sample_rate, os.path.splitext(os.path.basename(p))[0]).normalized())
    return irs
