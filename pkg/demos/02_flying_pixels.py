"""Where flying pixels come from, and what the aperture has to do with it.

At an occluding edge the open aperture sees both layers. The sensor sums two
phasors and reports a phase between them, so the point lands in free space.
A pinhole sees one layer only but collects far less light.
"""
import numpy as np

from tofmask.forward import NoiseConfig, ToFConfig
from tofmask.mask import init_mask, throughput
from tofmask.metrics import default_margin, fp_count, reconstruct, rmse_mae
from tofmask.scene import central_depth, preset_scene, render_lightfield
from tofmask.tensor import RngState

tof = ToFConfig()
scene = preset_scene("edge", {"fg": 1000.0, "bg": 3000.0, "size": 64}, RngState(1))
lf = render_lightfield(scene, 9, 9)
gt = central_depth(lf)
margin = default_margin(lf.layer_depths_mm)
print("layers at", lf.layer_depths_mm, "mm; FP band margin %.0f mm" % margin)

for noise in ("off", "on"):
    ncfg = NoiseConfig() if noise == "on" else NoiseConfig.off()
    print("\nnoise", noise)
    for name, params in [("ones", {}), ("circle", {"diameter": 5}), ("circle", {"diameter": 1})]:
        patch = init_mask(name, params, None, 9, 9, 80)
        depth = np.asarray(reconstruct(lf, patch, None, tof, ncfg, 64, RngState(3)))
        _, mae = rmse_mae(depth, gt)
        label = name if not params else "%s:%d" % (name, params["diameter"])
        print("  %-9s throughput %.3f  flying pixels %4d  MAE %7.2f mm"
              % (label, throughput(patch), fp_count(depth, lf.layer_depths_mm, margin), mae))
