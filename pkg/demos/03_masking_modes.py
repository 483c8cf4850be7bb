"""Compare no masking, pixel-space pasting and feature-space blending.

Run: python3 demos/03_masking_modes.py [CHECKPOINT]
Without a checkpoint a hand-made edit is used: it recolors the shirt and
also lengthens the sleeves, so region boundaries move.
"""

import sys

import numpy as np

from garmentedit import editops as eo
from garmentedit import metrics
from garmentedit import ndgrad as nd
from garmentedit import stylegen as sg
from garmentedit import trainer as tr

gen = sg.build_generator()
w = sg.map_to_w(sg.sample_z(3, 8), gen)

if len(sys.argv) > 1:
    from garmentedit import embednet as en
    from garmentedit import mapper as mp

    bundle = tr.load_checkpoint(sys.argv[1])
    texts = [en.embed_text("a human wearing blue upper body clothes")] * 8
    with nd.no_grad():
        dw = mp.forward(w, texts, bundle.params).data
else:
    dw = np.zeros(w.codes.shape)
    dw[:, 4:10] = np.random.default_rng(0).standard_normal((8, 6, 16)) * 0.3
w_prime = w + nd.constant(dw)

target = sg.EditTarget("upper", "shape")
print(f"{'masking':8s} {'bg_dist':>9s} {'bg_mse':>9s} {'seam':>7s}")
for mode in metrics.MASKINGS:
    orig, edited, mask = metrics.edited_images(w, w_prime, target, gen, mode)
    feat, mse = metrics.background_distance(orig, edited, ~mask)
    seam = eo.seam_energy(edited, mask)
    print(f"{mode:8s} {feat.mean():9.5f} {mse.mean():9.5f} {seam.mean():7.3f}")
print("masking removes background change; feature blending leaves the softer seam")
