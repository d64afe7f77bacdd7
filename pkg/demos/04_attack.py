"""
Baseline attack vs the over-the-air attack
==========================================

Both runs start from the same music clip and aim for "open the door".
The baseline optimizes the loss on the clean waveform only; the full method
band-limits the perturbation and averages the loss over sampled rooms and
noise. Each example is then played through rooms it never saw.

The full run takes 15-25 minutes on one core.
"""

from dataclasses import replace

from _common import OUT, get_model
from overtheair.attack import AttackConfig, generate
from overtheair.channel import make_eval_bank, make_train_bank
from overtheair.corpus import synth_music_clip
from overtheair.dsp import save_wav
from overtheair.metrics import evaluate, plot_progress, progress_report, summary_table
from overtheair.model import transcribe

TARGET = "open the door"
model = get_model()
host = synth_music_clip(3.0, seed=0)
train_bank, held_out = make_train_bank(), make_eval_bank()
print("host decodes as", repr(transcribe(model, host.samples)))

full_cfg = AttackConfig(seed=0)
base_cfg = replace(full_cfg, bandpass=False, impulse=False, noise=False)

records = []
for name, cfg in (("baseline", base_cfg), ("full", full_cfg)):
    log = lambda ck: print(f"  [{name}] step {ck.step:5d}  SNR {ck.snr_db:6.2f} dB  probe {ck.probe_decode!r}")
    res = generate(host, TARGET, model, train_bank, cfg, progress=log)
    save_wav(res.adversarial, OUT / f"{name}.wav")
    print(f"{name}: {res.status} after {res.steps} steps, direct decode {transcribe(model, res.adversarial.samples)!r}")
    records.append(evaluate(res.adversarial, TARGET, model, held_out, trials=100, seed=1, label=name, host=host))
    if name == "full":
        curve = progress_report(res, held_out, model, trials=20, seed=1)
        plot_progress(curve, OUT / "progress.svg", title="full method")
        print(curve.table())

print()
print(summary_table(records))
