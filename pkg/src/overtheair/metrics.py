"""Edit distance, held-out channel evaluation and progress curves."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import ChannelConfig, check_disjoint, sample_channel, simulate
from .ctc import TargetPhrase
from .dsp import AudioClip, snr_db
from .model import SurrogateModel, transcribe


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit insert, delete and replace costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass
class EvalRecord:
    label: str
    target: str
    snr_db: float | None
    trials: int
    success_rate: float
    mean_edit_distance: float
    decodes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["snr_db"] = _num(self.snr_db)
        return json.dumps(d, sort_keys=True)


def _num(v):
    if v is None:
        return None
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


def trial_rng(seed: int, trial: int):
    return np.random.default_rng([int(seed), int(trial)])


def evaluate(adv, target, model: SurrogateModel, channel: ChannelConfig, trials: int = 100, seed: int = 0,
             label: str = "", host=None, train_channel: ChannelConfig | None = None,
             jobs: int = 1) -> EvalRecord:
    """Decode ``adv`` through ``trials`` fresh channel draws; success is an exact match only.

    Each trial's draw comes from ``(seed, trial index)`` so results do not depend on ``jobs``.
    Pass ``train_channel`` to assert the evaluation bank is disjoint from it.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if train_channel is not None:
        check_disjoint(train_channel, channel)
    text = target.text if isinstance(target, TargetPhrase) else str(target)
    x = adv.samples if isinstance(adv, AudioClip) else np.asarray(adv, dtype=np.float64)

    def one(i):
        draw = sample_channel(channel, trial_rng(seed, i))
        return transcribe(model, simulate(x, draw, channel))

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            decodes = list(pool.map(one, range(trials)))
    else:
        decodes = [one(i) for i in range(trials)]
    hits = sum(d == text for d in decodes)
    dists = [edit_distance(d, text) for d in decodes]
    snr = None
    if host is not None:
        h = host.samples if isinstance(host, AudioClip) else np.asarray(host)
        snr = snr_db(h, x - h)
    return EvalRecord(label, text, snr, trials, hits / trials, float(np.mean(dists)), decodes)


def summary_table(records) -> str:
    rows = [f"{'label':<24} {'target':<16} {'SNR dB':>8} {'trials':>6} {'success':>8} {'edit':>6}"]
    for r in records:
        snr = "inf" if r.snr_db is None or np.isinf(r.snr_db) else f"{r.snr_db:8.2f}"
        rows.append(f"{r.label:<24} {r.target:<16} {snr:>8} {r.trials:>6} {r.success_rate:>8.0%} "
                    f"{r.mean_edit_distance:>6.2f}")
    return "\n".join(rows)


@dataclass
class ProgressCurve:
    steps: list[int]
    snr_db: list[float]
    success_rate: list[float]
    mean_edit_distance: list[float]

    def rows(self):
        return list(zip(self.steps, self.snr_db, self.success_rate, self.mean_edit_distance))

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"step": s, "snr_db": _num(q), "success_rate": r, "mean_edit_distance": e},
                                  sort_keys=True) + "\n" for s, q, r, e in self.rows())

    def table(self) -> str:
        lines = [f"{'step':>6} {'SNR dB':>8} {'success':>8} {'edit':>6}"]
        for s, q, r, e in self.rows():
            qs = "inf" if np.isinf(q) else f"{q:8.2f}"
            lines.append(f"{s:>6} {qs:>8} {r:>8.0%} {e:>6.2f}")
        return "\n".join(lines)


def progress_report(result, channel: ChannelConfig, model: SurrogateModel, trials: int = 20, seed: int = 0,
                    svg_path=None, jobs: int = 1) -> ProgressCurve:
    """Evaluate every checkpoint of an attack on the held-out channel with one fixed trial seed."""
    steps, snrs, rates, dists = [], [], [], []
    x = result.host.samples
    for ck in result.checkpoints:
        adv = x + result.effective(ck.perturbation)
        rec = evaluate(adv, result.target, model, channel, trials, seed, jobs=jobs)
        steps.append(ck.step)
        snrs.append(snr_db(x, result.effective(ck.perturbation)))
        rates.append(rec.success_rate)
        dists.append(rec.mean_edit_distance)
    curve = ProgressCurve(steps, snrs, rates, dists)
    if svg_path is not None:
        plot_progress(curve, svg_path)
    return curve


def _svg_figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "overtheair"
    return plt


def plot_progress(curve: ProgressCurve, path, title: str = "attack progress"):
    plt = _svg_figure()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    snr = [q if np.isfinite(q) else np.nan for q in curve.snr_db]
    ax.plot(curve.steps, snr, color="tab:blue", marker="o", label="SNR [dB]")
    ax.set_xlabel("step")
    ax.set_ylabel("SNR [dB]", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(curve.steps, curve.mean_edit_distance, color="tab:red", marker="s", label="edit distance")
    ax2.plot(curve.steps, curve.success_rate, color="tab:green", marker="^", label="success rate")
    ax2.set_ylabel("edit distance / success")
    ax.set_title(title)
    fig.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
