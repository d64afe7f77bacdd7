"""
The simulated playback channel
==============================

Synthesizes a few rooms, checks the decay law of one impulse response, and
plots a clip before and after the channel.
"""

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from _common import OUT
from overtheair.channel import make_eval_bank, make_train_bank, sample_channel, simulate
from overtheair.corpus import synth_music_clip
from overtheair.dsp import IrSynthesisParams, synth_ir

train, held_out = make_train_bank(), make_eval_bank()
print(f"{len(train.ir_bank)} training rooms, {len(held_out.ir_bank)} held-out rooms, "
      f"shared seeds: {set(train.seeds) & set(held_out.seeds) or 'none'}")
for meta in held_out.meta[:4]:
    print(f"  seed {meta['seed']}  rt60 {meta['rt60']:.1f} s  direct energy {meta['direct_ratio']:.2f}")

# the tail should fall by 60 dB over rt60
ir = synth_ir(IrSynthesisParams(rt60=0.3, direct_ratio=0.5), seed=7)
t = np.arange(ir.taps.size) / 16000
tail = slice(1, ir.taps.size)
env = 10 * np.log10(np.convolve(ir.taps[tail] ** 2, np.ones(64) / 64, mode="same") + 1e-20)
slope = np.polyfit(t[tail][200:-200], env[200:-200], 1)[0]
print(f"fitted decay {slope:.0f} dB/s (expected {-60 / 0.3:.0f})")

x = synth_music_clip(1.0, seed=3)
y = simulate(x, sample_channel(held_out, np.random.default_rng(0)), held_out)
fig, ax = plt.subplots(2, 1, figsize=(7, 4), sharex=True)
ax[0].plot(np.arange(len(x)) / 16000, x.samples, lw=0.5)
ax[0].set_title("host clip")
ax[1].plot(np.arange(len(y)) / 16000, y.samples, lw=0.5, color="tab:red")
ax[1].set_title("after one held-out channel draw")
ax[1].set_xlabel("time [s]")
fig.tight_layout()
fig.savefig(OUT / "channel.svg")
print("wrote", OUT / "channel.svg")
