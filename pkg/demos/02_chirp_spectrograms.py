"""
Chirps, spectrograms and distractors
====================================

Synthesise one chirp, look at its STFT, then render it as the decorated
plot the ViT is trained on and see where every distractor band lives.
"""

from pathlib import Path

import numpy as np

from chirpscope import chirpgen as cg
from chirpscope.pngio import save_png

out = Path("demo_out")
out.mkdir(exist_ok=True)

sig = cg.SignalConfig()
spec = cg.ChirpSpec(start_time=0.3, duration=1.0, f_start=80.0, f_end=400.0, noise_sigma=0.1, seed=5)
samples = cg.synth_signal(spec, sig.fs, sig.total_dur)
mag = cg.stft(samples, sig.window_len, sig.hop)
print(f"{len(samples)} samples at {sig.fs:g} Hz -> spectrogram of {mag.shape[0]} frames x {mag.shape[1]} bins")
print(f"bin width {sig.bin_hz:g} Hz, hop {sig.hop} samples")

# the ridge of the spectrogram follows the sweep law
for t in (0.5, 0.8, 1.1):
    frame = int(round((t * sig.fs - sig.window_len / 2) / sig.hop))
    peak = np.argmax(mag[frame]) * sig.bin_hz
    print(f"t = {t:.1f} s: peak {peak:6.1f} Hz, instantaneous frequency {float(spec.instantaneous_frequency(t)):6.1f} Hz")

item = cg.generate(spec, cg.Ranges())
save_png(out / "chirp.png", item.pixels)
print("\nrendered", item.pixels.shape, "->", out / "chirp.png")
print("normalised label (start time, start freq, end freq):", np.round(item.label, 3))

print("\nplot layout (x0, y0, x1, y1):")
g = item.geometry
print(f"  {'data':15s}", g.data_rect)
for name, rect in g.distractors().items():
    print(f"  {name:15s}", rect)

mask = cg.chirp_patch_mask(spec, g, 8)
print("\nchirp patches on the 8x8 grid:")
print("\n".join("  " + "".join("#" if v else "." for v in row) for row in mask))
