"""Tour of the frozen generator: sample avatars, truncate, read the parse.

Run: python3 demos/01_generator_tour.py [OUT_DIR]
Writes a few PPM/PGM files and prints what each latent group controls.
"""

import os
import sys

import numpy as np

from garmentedit import ndgrad as nd
from garmentedit import ppm
from garmentedit import stylegen as sg

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out/generator"
os.makedirs(out, exist_ok=True)

gen = sg.build_generator()
w = sg.map_to_w(sg.sample_z(seed=0, count=4), gen)
print("latent stack", w.codes.shape, "groups", w.groups)

render = sg.generate(w, gen)
for i in range(4):
    ppm.write_ppm(os.path.join(out, f"avatar_{i}.ppm"), render.image.data[i])
    ppm.write_pgm(os.path.join(out, f"parse_{i}.pgm"), render.regions.binary[i] * 36)

# Nudge one group at a time and see which decoded fields move.
base = sg.decode_params(w, gen)
for name, (lo, hi) in zip(("coarse", "medium", "fine"), w.groups):
    delta = np.zeros(w.codes.shape)
    delta[:, lo:hi] = 0.5
    moved = sg.decode_params(w + nd.constant(delta), gen)
    changes = {
        "body": np.abs(moved.body.data - base.body.data).max(),
        "garment": np.abs(moved.garment_shape.data - base.garment_shape.data).max(),
        "colors": np.abs(moved.colors.data - base.colors.data).max(),
    }
    print(f"{name:6s} rows {lo:2d}-{hi:2d}:", {k: round(float(v), 3) for k, v in changes.items()})

# psi = 0 collapses every sample onto the average avatar.
flat = sg.generate(sg.map_to_w(sg.sample_z(0, 4), gen.with_psi(0.0)), gen).image.data
print("psi=0 spread across samples:", float(np.ptp(flat, axis=0).max()))

target = sg.EditTarget("upper", "texture")
mask = sg.parse(render.regions, target)
print("upper-clothes pixels per avatar:", mask.reshape(4, -1).sum(axis=1).tolist())
print("wrote", out)
