"""
Which technique matters?
========================

Runs the attack with every on/off combination of band-pass, impulse-response
and noise, under one shared step budget, and reports the best SNR at which
each reached at least 50% success in held-out rooms. Expect about an hour
on one core; lower STEPS for a quick look.
"""

from dataclasses import replace

from _common import OUT, get_model
from overtheair.attack import AttackConfig, ablate
from overtheair.channel import make_eval_bank, make_train_bank
from overtheair.corpus import synth_music_clip

STEPS = 2000
DRAWS = 8

model = get_model()
host = synth_music_clip(3.0, seed=0)
base = replace(AttackConfig(seed=0), max_steps=STEPS, transforms_per_step=DRAWS)
report = ablate(host, "open the door", model, make_train_bank(), make_eval_bank(), base, trials=20,
                progress=lambda r: print(f"  {r.label:<20} found={r.found}  final success {r.final_success:.0%}"))
print(report.table())
(OUT / "ablation.jsonl").write_text(report.to_jsonl())
