"""Learn a mask patch jointly with the depth refiner.

A short run on small scenes so it finishes in a couple of minutes. The mask
stays frozen while the refiner warms up, then both move. Pass an epoch count
on the command line for a longer run.
"""
import sys

import numpy as np

from tofmask.mask import init_mask, throughput
from tofmask.metrics import evaluate_mask, reference_counts
from tofmask.optim import LossConfig, TrainConfig, train
from tofmask.scene import scene_suite

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 120
train_scenes, test_scenes = scene_suite(seed=0, size=64, count=16)

K, P = 8, 10
tcfg = TrainConfig(lr_refiner=1e-3, lr_mask=0.01, epochs=epochs, patch_size=32,
                   crop_side=K, seed=0)
lcfg = LossConfig(unit_mm=1000.0)  # loss in metres


def report(row):
    if row["epoch"] % 20 == 0:
        print("epoch %3d  loss %.5f  throughput %.3f  lr %.2g/%.2g"
              % (row["epoch"], row["loss"], row["throughput"], row["lr_refiner"], row["lr_mask"]))


init = init_mask("circle", {"diameter": 5}, None, 9, 9, P)
learned = train(train_scenes, tcfg, lcfg, mask_init=init, progress=report)
ones = train(train_scenes, tcfg, lcfg, mask_init=np.ones_like(init), train_mask=False)

ref = reference_counts(test_scenes, K=K, eval_seed=7, refiner=ones.weights)
for name, run in (("learned", learned), ("ones", ones)):
    agg = evaluate_mask(run.mask, run.weights, test_scenes, K=K, eval_seed=7,
                        reference=ref)["aggregate"]
    print("%-8s fp_ratio %.3f  MAE %.2f mm  throughput %.3f"
          % (name, agg["fp_ratio"], agg["mae"], throughput(run.mask)))

np.set_printoptions(precision=2, suppress=True)
print("\nlearned mask, mean transmittance per view:")
print(learned.mask.mean(axis=(2, 3)))
