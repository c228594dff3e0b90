"""Depth error metrics, flying-pixel counting and mask evaluation."""

from __future__ import annotations

import csv
import math

import numpy as np

from .forward import NoiseConfig, ToFConfig
from .mask import throughput, tile_mask
from .optim import LossConfig, chamfer, simulate_depth
from .reconstruction import PointCloud, project_points
from .refiner import refine_forward
from .scene import LightField, central_depth
from .tensor import RngState

REPORT_FIELDS = ("rmse", "mae", "thresh3", "thresh15", "fp_ratio", "chamfer", "throughput")

# FP band margin as a fraction of the gap between adjacent layers
DEFAULT_GAP_FRACTION = 0.25


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def rmse_mae(pred, gt) -> tuple[float, float]:
    pred, gt = _pair(pred, gt)
    err = pred - gt
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err)))


def thresh_metric(pred, gt, x_mm: float) -> float:
    """Percentage of pixels more than ``x_mm`` away from ground truth."""
    if x_mm <= 0:
        raise ValueError("threshold must be positive")
    pred, gt = _pair(pred, gt)
    return 100.0 * np.count_nonzero(np.abs(pred - gt) > x_mm) / pred.size


def fp_count(z, layer_depths, margin) -> int:
    """Points strictly between the nearest and farthest layer and farther than
    ``margin`` from every layer depth."""
    z = np.asarray(z, dtype=np.float64).ravel()
    depths = np.sort(np.asarray(layer_depths, dtype=np.float64))
    inside = (z > depths[0] + margin) & (z < depths[-1] - margin)
    for d in depths[1:-1]:
        inside &= np.abs(z - d) > margin
    return int(np.count_nonzero(inside))


def fp_ratio(cloud: PointCloud, z_fg: float, z_bg: float, margin: float,
             reference_count: float) -> float:
    """Points with z in (z_fg + margin, z_bg - margin), over ``reference_count``.

    Depths are in mm; the cloud's depth scale is undone before counting.
    """
    if not z_fg + margin < z_bg - margin:
        raise ValueError("empty flying-pixel band")
    z = np.asarray(cloud.points)[:, 2] / cloud.depth_scale
    count = np.count_nonzero((z > z_fg + margin) & (z < z_bg - margin))
    if reference_count <= 0:
        return 0.0 if count == 0 else math.inf
    return count / reference_count


def default_margin(layer_depths, gap_fraction: float = DEFAULT_GAP_FRACTION) -> float:
    depths = np.sort(np.asarray(layer_depths, dtype=np.float64))
    if len(depths) < 2:
        return math.inf
    return gap_fraction * float(np.min(np.diff(depths)))


def noise_margin(depth, gt, k: float = 3.0) -> float:
    """``k`` times the depth error spread over a flat (single-depth) reconstruction."""
    err = np.asarray(depth, np.float64) - np.asarray(gt, np.float64)
    return k * float(np.std(err))


def _scene_rngs(eval_seed, n):
    return RngState(eval_seed).split(n)


def reconstruct(lf: LightField, patch, refiner, tof, ncfg, K, rng, aperture=None):
    mask = tile_mask(patch, lf.H, lf.W, K, (0, 0)).array()
    depth = simulate_depth(lf, mask, tof, ncfg, rng, aperture)
    if refiner is not None:
        depth = refine_forward(depth, mask, refiner)
    return depth


def reference_counts(scenes, tof=None, ncfg=None, K: int = 64, eval_seed: int = 0,
                     refiner=None, margin_mm=None) -> list[int]:
    """FP counts of the all-ones mask under the same evaluation noise."""
    tof, ncfg = tof or ToFConfig(), ncfg or NoiseConfig()
    counts = []
    for lf, rng in zip(scenes, _scene_rngs(eval_seed, len(scenes))):
        ones = np.ones((lf.U, lf.V, K, K), dtype=np.float32)
        depth = reconstruct(lf, ones, refiner, tof, ncfg, K, rng)
        margin = default_margin(lf.layer_depths_mm) if margin_mm is None else margin_mm
        counts.append(fp_count(depth, lf.layer_depths_mm, margin))
    return counts


def evaluate_mask(patch, refiner, scenes, tof: ToFConfig | None = None,
                  ncfg: NoiseConfig | None = None, K: int = 64, eval_seed: int = 0,
                  reference=None, margin_mm=None, lcfg: LossConfig | None = None,
                  aperture=None) -> dict:
    """Simulate, reconstruct, optionally refine and score every scene.

    ``reference`` holds the per-scene FP counts that normalize ``fp_ratio``;
    by default the all-ones mask without refiner under the same noise draws.
    Returns ``{"scenes": [report, ...], "aggregate": report}``. The aggregate
    is the mean over scenes except ``fp_ratio``, which pools counts:
    sum of FP counts over sum of reference counts.
    """
    tof, ncfg, lcfg = tof or ToFConfig(), ncfg or NoiseConfig(), lcfg or LossConfig()
    if reference is None:
        reference = reference_counts(scenes, tof, ncfg, K, eval_seed, margin_mm=margin_mm)
    reports = []
    for lf, rng, ref in zip(scenes, _scene_rngs(eval_seed, len(scenes)), reference):
        depth = np.asarray(reconstruct(lf, patch, refiner, tof, ncfg, K, rng, aperture))
        gt = central_depth(lf)
        rmse, mae = rmse_mae(depth, gt)
        margin = default_margin(lf.layer_depths_mm) if margin_mm is None else margin_mm
        count = fp_count(depth, lf.layer_depths_mm, margin)
        ratio = (count / ref) if ref > 0 else (0.0 if count == 0 else math.nan)
        reports.append({
            "rmse": rmse, "mae": mae,
            "thresh3": thresh_metric(depth, gt, 3.0), "thresh15": thresh_metric(depth, gt, 15.0),
            "fp_ratio": ratio, "fp_count": count,
            "chamfer": chamfer(project_points(depth, lcfg.s_z), project_points(gt, lcfg.s_z)),
            "throughput": throughput(patch),
        })
    agg = {k: float(np.nanmean([r[k] for r in reports])) if reports else math.nan
           for k in REPORT_FIELDS + ("fp_count",)}
    total_ref = float(np.sum(reference)) if reports else 0.0
    total = float(np.sum([r["fp_count"] for r in reports]))
    agg["fp_ratio"] = total / total_ref if total_ref > 0 else (0.0 if total == 0 else math.nan)
    return {"scenes": reports, "aggregate": agg}


def write_report_csv(path, report: dict, names=None) -> None:
    names = names or [f"scene{i}" for i in range(len(report["scenes"]))]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("scene",) + REPORT_FIELDS)
        for name, row in zip(names, report["scenes"]):
            writer.writerow([name] + [repr(float(row[k])) for k in REPORT_FIELDS])
        writer.writerow(["aggregate"] + [repr(float(report["aggregate"][k])) for k in REPORT_FIELDS])
