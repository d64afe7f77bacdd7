"""Command-line driver: ``overtheair {train,irbank,generate,evaluate,ablate,inspect}``.

Everything lives under one workspace directory::

    <workspace>/corpus/      host clips and the training phrase list
    <workspace>/models/      surrogate checkpoints and training logs
    <workspace>/irbanks/     impulse-response banks (train + eval splits)
    <workspace>/runs/<id>/   one directory per generate/evaluate/ablate run

Configuration is a JSON file whose top-level sections mirror the library
dataclasses (``corpus``, ``model``, ``train``, ``channel``, ``attack``,
``evaluate``, ``host``). Unknown keys are errors. Failures print exactly one
line ``error: <Class>: <message>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import re
import secrets
import sys
from pathlib import Path

import numpy as np

from .attack import FLAG_COMBINATIONS, AttackConfig, ablate, generate
from .channel import (EVAL_RT60_STRATA, EVAL_SEED_BASE, TRAIN_SEED_BASE, build_bank, check_disjoint,
                      ir_params_for_seed, load_bank, save_bank)
from .corpus import SyntheticCorpusConfig, synth_corpus, synth_music_clip
from .ctc import Alphabet, InadmissibleTarget, TargetPhrase
from .dsp import AudioClip, load_wav, power, save_wav, snr_db
from .metrics import evaluate, plot_progress, progress_report, summary_table
from .model import (TrainConfig, decode_accuracy, feature_stats, init_model, load_model, model_to_bytes,
                    save_model, train, transcribe)

log = logging.getLogger("overtheair.cli")

LAYOUT = ("corpus", "models", "irbanks", "runs")


class ConfigError(ValueError):
    pass


class RunLocked(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _fields(cls, exclude=()):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in exclude}


def _section_defaults():
    return {
        "corpus": {k: f.default for k, f in _fields(SyntheticCorpusConfig, ("seed", "alphabet")).items()}
        | {"heldout_phrases": 200, "characters": Alphabet().characters},
        "model": {"hidden_size": 128},
        "train": {k: f.default for k, f in _fields(TrainConfig, ("seed",)).items()},
        "channel": {"noise_sigma": 0.01, "device_band": (100.0, 7500.0), "gain_jitter_db": 3.0,
                    "train_count": 64, "train_seed_base": TRAIN_SEED_BASE,
                    "eval_count": 16, "eval_seed_base": EVAL_SEED_BASE, "eval_rt60": EVAL_RT60_STRATA},
        "attack": {k: f.default for k, f in _fields(AttackConfig, ("seed", "jobs")).items()},
        "evaluate": {"trials": 100, "curve_trials": 20, "ablation_trials": 20, "threshold": 0.5},
        "host": {"duration": 3.0, "rms": 0.1, "seed": 0},
    }


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, tuple) or (default is None and isinstance(value, list)):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if default is not None and value is not None and not isinstance(value, type(default)):
        raise ConfigError(f"{where}: expected {type(default).__name__}")
    return value


def load_config(path=None) -> dict:
    """Defaults merged with an optional JSON file. Unknown keys raise ``ConfigError``."""
    cfg = _section_defaults()
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    for section, values in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown config key '{section}'")
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{section}' must be an object")
        for key, value in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            cfg[section][key] = _coerce(value, cfg[section][key], f"{section}.{key}")
    return cfg


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def corpus_config(cfg, seed, **over) -> SyntheticCorpusConfig:
    c = dict(cfg["corpus"])
    c.pop("heldout_phrases")
    alphabet = Alphabet(c.pop("characters"))
    return SyntheticCorpusConfig(**(c | over), seed=seed, alphabet=alphabet)


def attack_config(cfg, seed, jobs, flags=None) -> AttackConfig:
    a = AttackConfig(**cfg["attack"], seed=seed, jobs=jobs)
    return a.with_flags(*flags) if flags is not None else a


def channel_kw(cfg) -> dict:
    c = cfg["channel"]
    band = tuple(c["device_band"]) if c["device_band"] else None
    return {"noise_sigma": c["noise_sigma"], "device_band": band, "gain_jitter_db": c["gain_jitter_db"]}


# ---------------------------------------------------------------------------
# workspace helpers
# ---------------------------------------------------------------------------

class Workspace:
    def __init__(self, root):
        self.root = Path(root)
        for d in LAYOUT:
            (self.root / d).mkdir(parents=True, exist_ok=True)

    def __getattr__(self, name):
        if name in LAYOUT:
            return self.root / name
        raise AttributeError(name)

    def resolve(self, path, default_dir: str):
        p = Path(path)
        return p if p.is_absolute() else self.root / default_dir / p


class RunDir:
    """A run directory guarded by an exclusive lockfile while a command writes to it."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = path / ".lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"run directory {self.path} is in use (remove {self.lock} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self.path

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "x"


def _write_jsonl(path, records):
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _host_clip(args, ws: Workspace, cfg) -> tuple[AudioClip, str]:
    if args.input:
        path = Path(args.input)
        return load_wav(path), path.stem
    h = cfg["host"]
    clip = synth_music_clip(h["duration"], seed=h["seed"], rms=h["rms"])
    path = ws.corpus / f"music_{h['seed']}.wav"
    save_wav(clip, path)
    # use the stored 16-bit version so a later --input of this file gives the same host
    return load_wav(path), path.stem


def _banks(args, ws: Workspace, cfg):
    d = ws.resolve(args.bank, "irbanks")
    kw = channel_kw(cfg)
    try:
        tr = load_bank(d, "train", **kw)
        ev = load_bank(d, "eval", **kw)
    except FileNotFoundError:
        raise FileNotFoundError(f"IR bank not found: {d} (run 'irbank' first)") from None
    check_disjoint(tr, ev)
    return tr, ev


def _target(model, text) -> TargetPhrase:
    try:
        return TargetPhrase.from_text(text, model.alphabet)
    except ValueError as e:
        raise InadmissibleTarget(str(e)) from None


def _flags(args, cfg):
    a = cfg["attack"]
    return (a["bandpass"] and not args.no_bandpass, a["impulse"] and not args.no_impulse,
            a["noise"] and not args.no_noise)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args, ws, cfg, seed):
    ccfg = corpus_config(cfg, seed)
    log.info("synthesizing %d training phrases", ccfg.num_phrases)
    corpus = synth_corpus(ccfg)
    held = synth_corpus(corpus_config(cfg, seed + 1_000_003, num_phrases=cfg["corpus"]["heldout_phrases"],
                                      phrases=(), reverb_prob=0.0))
    (ws.corpus / "train_phrases.txt").write_text("".join(p.text + "\n" for _, p in corpus))
    model = init_model(ccfg.alphabet, hidden_size=cfg["model"]["hidden_size"], seed=seed)
    model.feat_mean, model.feat_std = feature_stats(model.mfcc_cfg, [c for c, _ in corpus])
    tcfg = TrainConfig(**cfg["train"], seed=seed)
    out = ws.resolve(args.out, "models")
    out.parent.mkdir(parents=True, exist_ok=True)
    model = train(model, corpus, tcfg, progress=lambda e, l: log.info("epoch %3d  loss %.4f", e, l))
    acc = decode_accuracy(model, held)
    save_model(model, out)
    digest = hashlib.sha256(model_to_bytes(model)).hexdigest()
    _write_jsonl(out.with_suffix(".log.jsonl"),
                 [{"epoch": i, "loss": l} for i, l in enumerate(model.loss_curve)]
                 + [{"heldout_accuracy": acc, "heldout_clips": len(held), "seed": seed, "sha256": digest}])
    print(f"model {out}")
    print(f"held-out accuracy {acc:.4f} ({len(held)} clips)")
    print(f"sha256 {digest}")
    return 0


def cmd_irbank(args, ws, cfg, seed):
    c = cfg["channel"]
    out = ws.resolve(args.name, "irbanks")
    train_seeds = list(range(c["train_seed_base"], c["train_seed_base"] + c["train_count"]))
    eval_seeds = list(range(c["eval_seed_base"], c["eval_seed_base"] + c["eval_count"]))
    strata = c["eval_rt60"]
    tr = build_bank([ir_params_for_seed(s) for s in train_seeds], train_seeds, role="train")
    ev = build_bank([ir_params_for_seed(s, strata[i % len(strata)]) for i, s in enumerate(eval_seeds)],
                    eval_seeds, role="eval")
    check_disjoint(tr, ev)
    if (out / "manifest.jsonl").exists():
        for f in out.glob("*.wav"):
            f.unlink()
    save_bank(dataclasses.replace(tr, ir_bank=tr.ir_bank + ev.ir_bank, seeds=tr.seeds + ev.seeds,
                                  meta=tr.meta + ev.meta, role="all"), out)
    print(f"irbank {out}: {len(tr.ir_bank)} train + {len(ev.ir_bank)} eval impulse responses")
    return 0


def _run_id(args, verb, seed, target, flags=None):
    if args.run_id:
        return args.run_id
    parts = [verb, _slug(target)]
    if flags is not None:
        parts.append("".join(n for n, f in zip("BIN", flags) if f) or "none")
    return "-".join(parts + [f"s{seed}"])


def cmd_generate(args, ws, cfg, seed):
    model = load_model(ws.resolve(args.model, "models"))
    target = _target(model, args.target)
    host, host_label = _host_clip(args, ws, cfg)
    tr, ev = _banks(args, ws, cfg)
    flags = _flags(args, cfg)
    acfg = attack_config(cfg, seed, args.jobs, flags)
    with RunDir(ws.runs / _run_id(args, "generate", seed, args.target, flags)) as run:
        ckdir = run / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        for f in ckdir.glob("*"):
            f.unlink()
        (run / "config.json").write_text(json.dumps(_jsonable({"seed": seed, "target": target.text,
                                                               "host": host_label, **cfg}),
                                                    sort_keys=True, indent=1) + "\n")

        def progress(ck):
            log.info("step %5d  loss %9.4f  SNR %6.2f dB  probe %r", ck.step, ck.loss, ck.snr_db, ck.probe_decode)

        res = generate(host, target, model, tr, acfg, progress=progress)
        for ck in res.checkpoints:
            eff = res.effective(ck.perturbation)
            np.save(ckdir / f"step_{ck.step:05d}.npy", eff)
            save_wav(AudioClip(host.samples + eff, host.sample_rate), ckdir / f"step_{ck.step:05d}.wav")
        clipped = save_wav(res.adversarial, run / "adversarial.wav")
        (run / "log.jsonl").write_text(res.log_lines())
        summary = {"status": res.status, "steps": res.steps, "snr_db": res.snr_db, "clipped_samples": clipped,
                   "direct_decode": transcribe(model, res.adversarial.samples), "target": target.text}
        trials = cfg["evaluate"]["curve_trials"]
        if trials > 0:
            curve = progress_report(res, ev, model, trials=trials, seed=seed, jobs=args.jobs)
            (run / "curve.jsonl").write_text(curve.to_jsonl())
            plot_progress(curve, run / "curve.svg", title=f"'{target.text}' on {host_label}")
            summary["final_heldout_success"] = curve.success_rate[-1]
        (run / "result.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(f"run {run}")
    print(f"status {res.status} after {res.steps} steps, SNR {res.snr_db:.2f} dB, "
          f"direct decode {summary['direct_decode']!r}")
    if clipped:
        print(f"warning: {clipped} samples clipped when writing adversarial.wav")
    return 0


def cmd_evaluate(args, ws, cfg, seed):
    model = load_model(ws.resolve(args.model, "models"))
    target = _target(model, args.target)
    tr, ev = _banks(args, ws, cfg)
    adv_path = Path(args.input)
    adv = load_wav(adv_path)
    host = load_wav(args.host) if args.host else None
    trials = args.trials or cfg["evaluate"]["trials"]
    rec = evaluate(adv, target, model, ev, trials, seed, label=adv_path.stem, host=host, train_channel=tr,
                   jobs=args.jobs)
    with RunDir(ws.runs / _run_id(args, "evaluate", seed, f"{adv_path.stem}-{target.text}")) as run:
        (run / "report.jsonl").write_text(rec.to_json() + "\n")
        (run / "summary.txt").write_text(summary_table([rec]) + "\n")
    print(summary_table([rec]))
    return 0


def cmd_ablate(args, ws, cfg, seed):
    model = load_model(ws.resolve(args.model, "models"))
    target = _target(model, args.target)
    host, host_label = _host_clip(args, ws, cfg)
    tr, ev = _banks(args, ws, cfg)
    e = cfg["evaluate"]
    base = attack_config(cfg, seed, args.jobs)
    with RunDir(ws.runs / _run_id(args, "ablate", seed, args.target)) as run:
        report = ablate(host, target, model, tr, ev, base, trials=e["ablation_trials"], eval_seed=seed,
                        threshold=e["threshold"], combinations=FLAG_COMBINATIONS,
                        progress=lambda r: log.info("%-20s found=%s final success %.2f", r.label, r.found,
                                                    r.final_success))
        (run / "ablation.jsonl").write_text(report.to_jsonl())
        (run / "ablation.txt").write_text(report.table() + "\n")
        for label, curve in report.curves.items():
            (run / f"curve_{label}.jsonl").write_text(curve.to_jsonl())
            plot_progress(curve, run / f"curve_{label}.svg", title=f"{label}: '{target.text}' on {host_label}")
    print(report.table())
    return 0


def _inspect_model(path):
    m = load_model(path)
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    n = sum(v.size for v in m.params.values())
    print(f"surrogate model {path}\n  version {m.version}\n  alphabet {m.alphabet.characters!r}"
          f"\n  hidden {m.hidden_size}  parameters {n}\n  epochs {len(m.loss_curve)}"
          + (f"  final loss {m.loss_curve[-1]:.4f}" if m.loss_curve else "") + f"\n  sha256 {digest}")


def _inspect_wav(path, model_path):
    clip = load_wav(path)
    print(f"wav {path}\n  samples {len(clip)}  duration {clip.duration:.3f} s  rms {np.sqrt(power(clip.samples)):.4f}"
          f"  peak {np.max(np.abs(clip.samples)):.4f}")
    if model_path:
        print(f"  decode {transcribe(load_model(model_path), clip.samples)!r}")


def _inspect_dir(path):
    if (path / "manifest.jsonl").exists():
        rows = [json.loads(l) for l in (path / "manifest.jsonl").read_text().splitlines() if l.strip()]
        print(f"IR bank {path}: {len(rows)} impulse responses")
        for r in rows:
            print(f"  {r.get('split', '?'):<6} seed {r.get('seed', '?'):>6}  rt60 {r.get('rt60', float('nan')):.3f}"
                  f"  direct {r.get('direct_ratio', float('nan')):.3f}  {r['file']}")
        return
    if (path / "result.json").exists():
        print(f"run {path}")
        print("  " + json.dumps(json.loads((path / "result.json").read_text()), sort_keys=True))
        for name in ("curve.jsonl", "log.jsonl"):
            if (path / name).exists():
                lines = (path / name).read_text().splitlines()
                print(f"  {name}: {len(lines)} records, last {lines[-1] if lines else '-'}")
        return
    if (path / "ablation.txt").exists():
        print((path / "ablation.txt").read_text(), end="")
        return
    raise FileNotFoundError(f"nothing to inspect in {path}")


def cmd_inspect(args, ws, cfg, seed):
    path = Path(args.path)
    if not path.exists():
        for sub in LAYOUT:
            if (ws.root / sub / args.path).exists():
                path = ws.root / sub / args.path
                break
        else:
            raise FileNotFoundError(f"no such file or directory: {args.path}")
    if path.is_dir():
        _inspect_dir(path)
    elif path.suffix == ".wav":
        _inspect_wav(path, args.model and ws.resolve(args.model, "models"))
    else:
        _inspect_model(path)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="overtheair", description="Over-the-air robust audio adversarial examples.")
    p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    p.add_argument("--seed", type=int, help="master seed; a random one is chosen and logged if omitted")
    p.add_argument("--workspace", default=".", help="workspace directory (default: current directory)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for per-step draws and trials")
    p.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="synthesize the corpus and train the surrogate recognizer")
    s.add_argument("--out", default="surrogate.bin", help="checkpoint path (relative to models/)")

    s = sub.add_parser("irbank", help="synthesize train and held-out impulse-response banks")
    s.add_argument("--name", default="default", help="bank directory (relative to irbanks/)")

    def run_args(s, needs_input=False):
        s.add_argument("--model", default="surrogate.bin", help="model checkpoint (relative to models/)")
        s.add_argument("--target", required=True, help="target phrase")
        s.add_argument("--bank", default="default", help="IR bank directory (relative to irbanks/)")
        s.add_argument("--input", required=needs_input,
                       help="input WAV" + ("" if needs_input else " (default: synthesized music clip)"))
        s.add_argument("--run-id", help="run directory name under runs/")

    s = sub.add_parser("generate", help="optimize an adversarial example")
    run_args(s)
    for flag in ("bandpass", "impulse", "noise"):
        s.add_argument(f"--no-{flag}", action="store_true", help=f"disable the {flag} technique")

    s = sub.add_parser("evaluate", help="score a WAV over the held-out channel")
    run_args(s, needs_input=True)
    s.add_argument("--trials", type=int, help="number of channel trials (default from config)")
    s.add_argument("--host", help="original host WAV, to report SNR")

    s = sub.add_parser("ablate", help="run all eight technique combinations")
    run_args(s)

    s = sub.add_parser("inspect", help="describe a model, WAV, IR bank or run directory")
    s.add_argument("path")
    s.add_argument("--model", help="decode a WAV with this model")
    return p


SEEDED = {"train", "generate", "evaluate", "ablate"}
COMMANDS = {"train": cmd_train, "irbank": cmd_irbank, "generate": cmd_generate, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    log.propagate = False
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        seed = args.seed
        if seed is None and args.command in SEEDED:
            seed = secrets.randbelow(2**31)
            log.warning("no --seed given; using seed %d", seed)
        cfg = load_config(args.config)
        ws = Workspace(args.workspace)
        return COMMANDS[args.command](args, ws, cfg, seed)
    except KeyboardInterrupt:
        print("error: Interrupted: stopped by user", file=sys.stderr)
        return 130
    except Exception as e:  # one machine-parsable line, no traceback
        msg = " ".join(str(e).split()) or "no details"
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        if os.environ.get("OVERTHEAIR_TRACEBACK"):
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
