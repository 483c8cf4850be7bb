"""Train a small attention mapper for upper-body colors, then edit one avatar.

Run: python3 demos/02_train_and_edit.py [STEPS] [OUT_DIR]
A few hundred steps already gives visible color edits; the acceptance
runs use 2000.
"""

import os
import sys

import numpy as np

from garmentedit import embednet as en
from garmentedit import mapper as mp
from garmentedit import metrics
from garmentedit import ndgrad as nd
from garmentedit import ppm
from garmentedit import stylegen as sg
from garmentedit import trainer as tr

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = sys.argv[2] if len(sys.argv) > 2 else "demo_out/edit"
os.makedirs(out, exist_ok=True)

config = tr.TrainConfig(steps=steps)
gen = sg.build_generator(config.generator_seed, psi=config.psi)


def report(step, record):
    if step % 50 == 0:
        print(f"step {step:4d} total {record['total']:.3f} clip {record['clip']:.3f} "
              f"direction {record['direction']:.3f} background {record['background']:.3f}")


result = tr.train(config, gen=gen, progress=report)
tr.save_checkpoint(result.bundle, os.path.join(out, "checkpoint.bin"))

prompt = en.embed_text("a human wearing red upper body clothes")
w = sg.map_to_w(sg.sample_z(42, 1), gen)
with nd.no_grad():
    dw = mp.forward(w, prompt, result.bundle.params)
print("edit size per layer:", np.round(np.linalg.norm(dw.data[0], axis=-1), 3))

w_prime = w + nd.constant(dw.data)
orig, masked, mask = metrics.edited_images(w, w_prime, sg.EditTarget(), gen, "feature")
ppm.write_ppm(os.path.join(out, "original.ppm"), orig[0])
ppm.write_ppm(os.path.join(out, "edited.ppm"), masked[0])
ppm.write_pgm(os.path.join(out, "mask.pgm"), mask[0].astype(np.uint8) * 255)
red_before = orig[0, 0][mask[0]].mean()
red_after = masked[0, 0][mask[0]].mean()
print(f"mean red in the shirt: {red_before:.3f} -> {red_after:.3f}")
