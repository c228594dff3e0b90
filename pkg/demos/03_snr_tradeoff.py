"""The trade a hand-designed aperture has to make.

Sweep the circular sub-aperture diameter and score each one on held-out
scenes. Small apertures remove mixing but lose light, so flat regions get
noisy; large ones are clean on flats and smear edges.
"""
import numpy as np

from tofmask.mask import init_mask, throughput
from tofmask.metrics import evaluate_mask, reference_counts
from tofmask.scene import scene_suite

_, test = scene_suite(seed=0, size=48, count=16)
K = 16
ref = reference_counts(test, K=K, eval_seed=5)
print("ones-mask FP counts per scene:", ref)

print("\n%-8s %10s %9s %9s %9s" % ("mask", "throughput", "fp_ratio", "MAE", "thresh15"))
for d in (1, 3, 5, 7, 9):
    patch = init_mask("circle", {"diameter": d}, None, 9, 9, 20)
    agg = evaluate_mask(patch, None, test, K=K, eval_seed=5, reference=ref)["aggregate"]
    print("circle:%d %10.3f %9.3f %9.2f %9.3f"
          % (d, throughput(patch), agg["fp_ratio"], agg["mae"], agg["thresh15"]))

ones = np.ones((9, 9, 20, 20), np.float32)
agg = evaluate_mask(ones, None, test, K=K, eval_seed=5, reference=ref)["aggregate"]
print("ones     %10.3f %9.3f %9.2f %9.3f" % (1.0, agg["fp_ratio"], agg["mae"], agg["thresh15"]))
