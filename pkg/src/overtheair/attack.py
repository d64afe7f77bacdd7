"""Robust audio adversarial examples by expectation over simulated channels.

The perturbation ``v`` reaches the recognizer as

    x_tilde = Conv_h(x + BPF(v)) + w,   h ~ training IR bank,  w ~ N(0, sigma^2)

and Adam minimizes the K-sample mean of CTC loss plus ``epsilon * ||v||``.
Each of the three stages can be switched off; with all three off the
objective is the plain direct attack ``Loss(MFCC(x + v), l) + epsilon ||v||``.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelConfig, ChannelDraw, sample_channel, simulate
from .ctc import InadmissibleTarget, TargetPhrase, min_frames
from .dsp import AudioClip, add_noise, apply_fir, apply_fir_vjp, convolve_ir, convolve_ir_vjp, design_bandpass, snr_db
from .metrics import _num, edit_distance
from .model import SurrogateModel, loss_and_grad_wav, transcribe

log = logging.getLogger(__name__)


class AttackDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.003
    learning_rate: float = 1e-3
    max_steps: int = 2000
    transforms_per_step: int = 16
    band: tuple[float, float] = (1000.0, 4000.0)
    band_taps: int = 511
    noise_sigma: float = 0.01
    bandpass: bool = True
    impulse: bool = True
    noise: bool = True
    clamp: float | None = None
    checkpoint_every: int = 50
    probe_every: int = 10
    probe_draws: int = 32          # all must decode, so a stop means near-certain success on the bank
    early_stop: bool = False       # the probe only sees training rooms; the extra steps pay off in unseen ones
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.transforms_per_step < 1:
            raise ValueError("transforms_per_step must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.clamp is not None and self.clamp <= 0:
            raise ValueError("clamp must be positive")

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.bandpass, self.impulse, self.noise)

    def with_flags(self, bandpass: bool, impulse: bool, noise: bool) -> "AttackConfig":
        return replace(self, bandpass=bandpass, impulse=impulse, noise=noise)


@dataclass
class AdamState:
    m: np.ndarray
    u: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, v: np.ndarray, grad: np.ndarray, lr: float, clamp: float | None = None):
    """One bias-corrected Adam update. Returns a new (state, v); inputs are not modified."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != v.shape:
        raise ValueError(f"gradient shape {grad.shape} != perturbation shape {v.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise AttackDiverged(f"non-finite gradient at step {state.t + 1} ({bad.size} entries, first index {bad[0]})")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    u = state.beta2 * state.u + (1 - state.beta2) * grad * grad
    mh = m / (1 - state.beta1 ** t)
    uh = u / (1 - state.beta2 ** t)
    v = v - lr * mh / (np.sqrt(uh) + state.eps)
    if clamp is not None:
        v = np.clip(v, -clamp, clamp)
    return AdamState(m, u, t, state.beta1, state.beta2, state.eps), v


class Transform:
    """The attacker's differentiable model of playback, restricted to the enabled stages."""

    def __init__(self, cfg: AttackConfig, channel: ChannelConfig | None, sample_rate: int):
        self.cfg = cfg
        self.channel = channel
        self.bpf = design_bandpass(cfg.band[0], cfg.band[1], sample_rate, cfg.band_taps) if cfg.bandpass else None
        if cfg.impulse and channel is None:
            raise ValueError("impulse stage needs a channel with an IR bank")

    @property
    def stochastic(self) -> bool:
        return self.cfg.impulse or self.cfg.noise

    def effective(self, v: np.ndarray) -> np.ndarray:
        return apply_fir(v, self.bpf) if self.bpf is not None else np.asarray(v, dtype=np.float64)

    def forward(self, x, v, draw: ChannelDraw) -> np.ndarray:
        s = x + self.effective(v)
        if self.cfg.impulse:
            s = convolve_ir(s, self.channel.ir_bank[draw.ir_index])
        if self.cfg.noise:
            s = add_noise(s, self.cfg.noise_sigma, draw.noise_seed)
        return s

    def backward(self, g, draw: ChannelDraw) -> np.ndarray:
        if self.cfg.impulse:
            g = convolve_ir_vjp(g, self.channel.ir_bank[draw.ir_index])
        if self.bpf is not None:
            g = apply_fir_vjp(g, self.bpf)
        return g


def _samples(x):
    return x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64)


def objective(x, v, target, model: SurrogateModel, draws, cfg: AttackConfig,
              channel: ChannelConfig | None = None, transform: Transform | None = None):
    """Sample mean over ``draws`` of the CTC loss plus the L2 penalty, and its gradient in ``v``."""
    if not draws:
        raise ValueError("objective needs at least one channel draw")
    x = _samples(x)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError("perturbation and host clip differ in length")
    tf = transform or Transform(cfg, channel, model.mfcc_cfg.sample_rate)

    def one(draw):
        loss, g = loss_and_grad_wav(model, tf.forward(x, v, draw), target)
        return loss, tf.backward(g, draw)

    if not tf.stochastic:
        # every draw gives the same term
        parts = [one(draws[0])]
    elif cfg.jobs > 1 and len(draws) > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            parts = list(pool.map(one, draws))
    else:
        parts = [one(d) for d in draws]
    loss = sum(p[0] for p in parts) / len(parts)
    grad = sum(p[1] for p in parts) / len(parts)
    norm = float(np.sqrt(np.sum(v * v)))
    loss += cfg.epsilon * norm
    if norm > 0:
        grad = grad + cfg.epsilon * v / norm
    return float(loss), grad


@dataclass
class Checkpoint:
    step: int
    perturbation: np.ndarray
    snr_db: float
    loss: float
    probe_decode: str
    probe_edit_distance: int

    def record(self) -> dict:
        return {"step": self.step, "loss": _num(self.loss), "snr_db": _num(self.snr_db),
                "probe_decode": self.probe_decode, "probe_edit_distance": self.probe_edit_distance}


@dataclass
class AttackResult:
    host: AudioClip
    target: TargetPhrase
    config: AttackConfig
    perturbation: np.ndarray
    checkpoints: list[Checkpoint] = field(default_factory=list)
    status: str = "max_steps"
    steps: int = 0
    _tf: Transform | None = None

    def effective(self, v=None) -> np.ndarray:
        v = self.perturbation if v is None else v
        return self._tf.effective(v) if self._tf is not None else v

    @property
    def adversarial(self) -> AudioClip:
        return AudioClip(self.host.samples + self.effective(), self.host.sample_rate)

    @property
    def snr_db(self) -> float:
        return snr_db(self.host.samples, self.effective())

    def log_lines(self) -> str:
        return "".join(json.dumps(c.record(), sort_keys=True) + "\n" for c in self.checkpoints)


def check_admissible(x, target: TargetPhrase, model: SurrogateModel):
    frames = model.mfcc_cfg.num_frames(len(_samples(x)))
    need = min_frames(target.label_ids)
    if not len(target):
        raise InadmissibleTarget("attack target must be non-empty")
    if frames < need:
        raise InadmissibleTarget(f"'{target.text}' needs {need} frames, clip has {frames}")


def generate(x: AudioClip, target, model: SurrogateModel, channel: ChannelConfig, cfg: AttackConfig = AttackConfig(),
             progress=None) -> AttackResult:
    """Optimize a perturbation for ``x`` so the model transcribes ``target`` through the channel.

    ``channel`` is the attacker's training bank. With ``early_stop`` set, every
    ``probe_every`` steps the current example is pushed through ``probe_draws``
    fresh draws of that bank's full simulation; if every one decodes to the
    target the run stops early. Otherwise it uses the whole step budget.
    """
    if not isinstance(target, TargetPhrase):
        target = TargetPhrase.from_text(target, model.alphabet)
    check_admissible(x, target, model)
    xs = x.samples
    tf = Transform(cfg, channel, x.sample_rate)
    draw_rng = np.random.default_rng([cfg.seed, 0])
    probe_rng = np.random.default_rng([cfg.seed, 1])
    ck_rng = np.random.default_rng([cfg.seed, 2])
    v = np.zeros_like(xs)
    state = AdamState.zeros(xs.size)
    result = AttackResult(x, target, cfg, v, _tf=tf)

    def checkpoint(step, loss):
        eff = tf.effective(v)
        draw = sample_channel(channel, ck_rng)
        decode = transcribe(model, simulate(xs + eff, draw, channel))
        ck = Checkpoint(step, v.copy(), snr_db(xs, eff), loss, decode, edit_distance(decode, target.text))
        result.checkpoints.append(ck)
        if progress:
            progress(ck)
        return ck

    def probe():
        eff = tf.effective(v)
        for _ in range(cfg.probe_draws):
            draw = sample_channel(channel, probe_rng)
            if transcribe(model, simulate(xs + eff, draw, channel)) != target.text:
                return False
        return True

    checkpoint(0, float("nan"))
    loss = float("nan")
    for step in range(1, cfg.max_steps + 1):
        draws = [sample_channel(channel, draw_rng) for _ in range(cfg.transforms_per_step)]
        loss, grad = objective(xs, v, target, model, draws, cfg, transform=tf)
        state, v = adam_step(state, v, grad, cfg.learning_rate, cfg.clamp)
        result.steps = step
        done = cfg.early_stop and step % cfg.probe_every == 0 and probe()
        if step % cfg.checkpoint_every == 0 or done or step == cfg.max_steps:
            checkpoint(step, loss)
        if done:
            result.status = "success"
            break
    result.perturbation = v
    return result


# Table-style row order: none, B, I, N, BI, BN, IN, BIN
FLAG_COMBINATIONS = [(False, False, False), (True, False, False), (False, True, False), (False, False, True),
                     (True, True, False), (True, False, True), (False, True, True), (True, True, True)]


def flag_label(flags) -> str:
    names = [n for n, f in zip(("bandpass", "impulse", "noise"), flags) if f]
    return "+".join(names) if names else "none"


@dataclass
class AblationRow:
    flags: tuple[bool, bool, bool]
    found: bool
    best_snr_db: float | None
    final_snr_db: float
    final_success: float
    direct_success: bool
    steps: int
    status: str

    @property
    def label(self):
        return flag_label(self.flags)

    def record(self) -> dict:
        return {"bandpass": self.flags[0], "impulse": self.flags[1], "noise": self.flags[2],
                "found": self.found, "best_snr_db": _num(self.best_snr_db), "final_snr_db": _num(self.final_snr_db),
                "final_success": self.final_success, "direct_success": self.direct_success,
                "steps": self.steps, "status": self.status}


@dataclass
class AblationReport:
    rows: list[AblationRow]
    curves: dict = field(default_factory=dict)

    def row(self, bandpass, impulse, noise) -> AblationRow:
        return next(r for r in self.rows if r.flags == (bandpass, impulse, noise))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.record(), sort_keys=True) + "\n" for r in self.rows)

    def table(self) -> str:
        mark = lambda f: "x" if f else " "
        lines = ["band-pass  impulse  noise | best SNR @>=50% | final success",
                 "--------------------------+-----------------+--------------"]
        for r in self.rows:
            snr = f"{r.best_snr_db:7.1f} dB" if r.found else "      --"
            lines.append(f"    {mark(r.flags[0])}         {mark(r.flags[1])}       {mark(r.flags[2])}   |"
                         f" {snr:>15} | {r.final_success:>6.0%}")
        return "\n".join(lines)


def ablate(x: AudioClip, target, model: SurrogateModel, channel: ChannelConfig, eval_channel: ChannelConfig,
           base: AttackConfig = AttackConfig(), trials: int = 20, eval_seed: int = 0, threshold: float = 0.5,
           combinations=FLAG_COMBINATIONS, progress=None) -> AblationReport:
    """Run ``generate`` for each technique combination under one step budget.

    A row counts as found when some checkpoint reaches ``threshold`` success on
    the held-out channel; ``best_snr_db`` is the highest SNR among such checkpoints.
    """
    from .metrics import evaluate, progress_report
    if not isinstance(target, TargetPhrase):
        target = TargetPhrase.from_text(target, model.alphabet)
    rows, curves = [], {}
    for flags in combinations:
        cfg = base.with_flags(*flags)
        res = generate(x, target, model, channel, cfg)
        curve = progress_report(res, eval_channel, model, trials=trials, seed=eval_seed, jobs=cfg.jobs)
        ok = [q for q, r in zip(curve.snr_db, curve.success_rate) if r >= threshold]
        direct = transcribe(model, res.adversarial.samples) == target.text
        final = evaluate(res.adversarial, target, model, eval_channel, trials, eval_seed, jobs=cfg.jobs)
        row = AblationRow(tuple(flags), bool(ok), max(ok) if ok else None, res.snr_db, final.success_rate,
                          direct, res.steps, res.status)
        rows.append(row)
        curves[row.label] = curve
        if progress:
            progress(row)
    return AblationReport(rows, curves)


def all_flag_combinations():
    return [tuple(c) for c in itertools.product((False, True), repeat=3)]
