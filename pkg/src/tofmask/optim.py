"""Losses, Adam, patch sampling and the joint mask/refiner training loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tape
from .forward import NoiseConfig, ToFConfig, add_noise, masked_average, view_correlations
from .mask import project_box, throughput, tile_mask
from .reconstruction import PointCloud, depth_from_phase, phase_estimate, project_points
from .refiner import RefinerConfig, RefinerWeights, refine_forward, refine_init, write_weights
from .scene import LightField, central_depth
from .tensor import RngState, as_tensor, tns_write

log = logging.getLogger(__name__)


# --- losses ----------------------------------------------------------------------

smooth_l1 = ad.smooth_l1


def _dist(a, b):
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def nearest_neighbors(recon: np.ndarray, gt: np.ndarray, mode: str = "accelerated",
                      chunk: int = 512):
    """Index of and distance to the nearest gt point for every recon point.

    Ties resolve to the lowest gt index in both modes, and both modes use
    the same distance arithmetic, so their outputs are identical.
    """
    recon = np.asarray(recon, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if len(gt) == 0:
        raise ValueError("ground-truth cloud is empty")
    if mode == "bruteforce":
        idx = np.empty(len(recon), dtype=np.int64)
        for s in range(0, len(recon), chunk):
            d = _dist(recon[s:s + chunk, None, :], gt[None, :, :])
            idx[s:s + chunk] = np.argmin(d, axis=1)
    elif mode == "accelerated":
        k = min(8, len(gt))
        tree = cKDTree(gt)
        kd, cand = tree.query(recon, k=k)
        kd, cand = kd.reshape(len(recon), k), cand.reshape(len(recon), k)
        order = np.argsort(cand, axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = _dist(recon[:, None, :], gt[cand])
        best = d.min(axis=1)
        idx = cand[np.arange(len(recon)), np.argmin(d, axis=1)]
        # the k-th candidate may tie the best: widen to every point in range
        slack = best * (1 + 1e-9) + 1e-12
        for r in np.flatnonzero((kd[:, -1] <= slack) & (k < len(gt))):
            ball = np.sort(np.asarray(tree.query_ball_point(recon[r], slack[r]), dtype=np.int64))
            idx[r] = ball[np.argmin(_dist(recon[r], gt[ball]))]
    else:
        raise ValueError(f"unknown chamfer mode {mode!r}")
    return idx, _dist(recon, gt[idx])


def chamfer(recon: PointCloud, gt: PointCloud, mode: str = "accelerated") -> float:
    """Mean distance from each reconstructed point to its nearest ground-truth point."""
    _, d = nearest_neighbors(recon.points, gt.points, mode)
    return float(np.mean(d))


def chamfer_depth(pred, gt_depth, s_z: float = 1.0, mode: str = "accelerated"):
    """Per-pixel one-sided Chamfer distances of a depth map, differentiable in ``pred``.

    Nearest-neighbour assignments are frozen for the backward pass.
    """
    p = project_points(ad.value(pred), s_z).points
    g = project_points(gt_depth, s_z).points
    idx, d = nearest_neighbors(p, g, mode)
    H, W = np.shape(gt_depth)
    out = d.reshape(H, W)
    tape = ad._tape_of(pred)
    if tape is None:
        return out
    tape.events.append(idx)
    dz = p[:, 2] - g[idx, 2]
    dd = np.where(d > 0, s_z * dz / np.where(d > 0, d, 1.0), 0.0).reshape(H, W)
    return ad._node(tape, out, (pred,), lambda gr: (gr * dd,))


@dataclass(frozen=True)
class LossConfig:
    w_l: float = 100.0
    w_c: float = 0.08
    delta: float = 1.0
    s_z: float = 1.0
    chamfer_mode: str = "accelerated"
    unit_mm: float = 1.0

    def __post_init__(self):
        if self.w_l < 0 or self.w_c < 0 or self.delta <= 0 or self.s_z <= 0 or self.unit_mm <= 0:
            raise ValueError(f"invalid loss config {asdict(self)}")


def total_loss(pred, gt, cfg: LossConfig | None = None):
    """(1/HW) * sum_i (w_L * smoothL1_i + w_C * chamfer_i).

    Depths are given in mm and measured in units of ``cfg.unit_mm`` inside
    the loss, so ``delta`` and ``s_z`` are per unit.
    """
    cfg = cfg or LossConfig()
    gt = np.asarray(gt, dtype=np.float64)
    if ad.value(pred).shape != gt.shape:
        raise ValueError(f"shape mismatch {ad.value(pred).shape} vs {gt.shape}")
    if cfg.unit_mm != 1.0:
        pred, gt = ad.scale(pred, 1.0 / cfg.unit_mm), gt / cfg.unit_mm
    terms = ad.scale(smooth_l1(pred, gt, cfg.delta), cfg.w_l)
    if cfg.w_c:
        terms = ad.add(terms, ad.scale(chamfer_depth(pred, gt, cfg.s_z, cfg.chamfer_mode), cfg.w_c))
    return ad.mean(terms)


# --- Adam ----------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros(np.shape(p)) for p in params], [np.zeros(np.shape(p)) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns (new params, new state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and moments differ in length")
    t = state.step + 1
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ValueError(f"shape mismatch {np.shape(p)} / {np.shape(g)} / {np.shape(m)}")
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p = np.asarray(p)
        new_params.append((p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype))
        ms.append(m)
        vs.append(v)
    return new_params, replace(state, m=ms, v=vs, step=t)


# --- patches and the simulated pipeline --------------------------------------------------

@dataclass
class PatchSample:
    lf: LightField
    gt: np.ndarray
    origin: tuple[int, int]
    offset: tuple[int, int]


def sample_patch(lf: LightField, rng: RngState, patch: int, K: int = 64) -> PatchSample:
    if patch > min(lf.H, lf.W):
        raise ValueError(f"patch {patch} larger than the {lf.H}x{lf.W} light field")
    gen = rng.generator()
    r0 = int(gen.integers(0, lf.H - patch + 1))
    c0 = int(gen.integers(0, lf.W - patch + 1))
    offset = (int(gen.integers(0, K)), int(gen.integers(0, K)))
    sub = lf.crop(r0, c0, patch, patch)
    return PatchSample(sub, central_depth(sub), (r0, c0), offset)


def simulate_depth(lf: LightField, mask, tof: ToFConfig, ncfg: NoiseConfig, rng: RngState,
                   aperture=None):
    """Masked correlation stack -> noise -> four-bucket depth. Tape-aware in ``mask``."""
    stack = masked_average(view_correlations(lf, tof), mask, aperture)
    stack = add_noise(stack, ncfg, rng)
    return depth_from_phase(phase_estimate(stack), tof)


def pipeline_loss(patch_param, weight_params, weights: RefinerWeights, sample: PatchSample,
                  K: int, tof: ToFConfig, ncfg: NoiseConfig, lcfg: LossConfig, rng: RngState,
                  aperture=None, refine: bool = True):
    """Forward the full pipeline for one patch; returns the loss (a node if params are)."""
    mask = tile_mask(patch_param, sample.lf.H, sample.lf.W, K, sample.offset).array()
    depth = simulate_depth(sample.lf, mask, tof, ncfg, rng, aperture)
    if refine:
        depth = refine_forward(depth, mask, weights, params=weight_params)
    return total_loss(depth, sample.gt, lcfg)


# --- training ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr_refiner: float = 0.004
    lr_mask: float = 0.1
    halve_every: int = 80
    mask_freeze: int = 70
    patch_size: int = 80
    crop_side: int = 64
    batch_size: int = 4
    steps_per_epoch: int = 2
    epochs: int = 200
    seed: int = 0
    threads: int = 1
    eval_seed: int = 12345
    checkpoint_every: int = 0

    def __post_init__(self):
        positive = ("lr_refiner", "lr_mask", "halve_every", "patch_size", "crop_side",
                    "batch_size", "steps_per_epoch", "threads")
        bad = [k for k in positive if getattr(self, k) <= 0]
        if bad or self.epochs < 0 or self.mask_freeze < 0:
            raise ValueError(f"invalid train config fields: {bad or 'epochs/mask_freeze'}")

    def learning_rates(self, epoch: int) -> tuple[float, float]:
        f = 0.5 ** (epoch // self.halve_every)
        return self.lr_refiner * f, self.lr_mask * f


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, dump_path=None):
        super().__init__(f"non-finite loss at epoch {epoch}"
                         + (f"; state dumped to {dump_path}" if dump_path else ""))
        self.epoch = epoch
        self.dump_path = dump_path


@dataclass
class TrainResult:
    mask: np.ndarray
    weights: RefinerWeights
    log: list = field(default_factory=list)


LOG_FIELDS = ("epoch", "loss", "lr_refiner", "lr_mask", "throughput",
              "holdout_fp_ratio", "holdout_mae")


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_state(directory, tag, mask, weights, manifest):
    os.makedirs(directory, exist_ok=True)
    tns_write(mask, os.path.join(directory, f"{tag}.mask.tns"))
    write_weights(os.path.join(directory, f"{tag}.weights.tnsc"), weights)
    with open(os.path.join(directory, f"{tag}.manifest"), "w") as fh:
        for k, v in manifest.items():
            fh.write(f"{k} = {v}\n")


def train(scenes, tcfg: TrainConfig | None = None, lcfg: LossConfig | None = None,
          ncfg: NoiseConfig | None = None, rcfg: RefinerConfig | None = None,
          mask_init=None, tof: ToFConfig | None = None, holdout=None, aperture=None,
          out_dir=None, train_mask: bool = True, weights_init: RefinerWeights | None = None,
          progress=None) -> TrainResult:
    """Jointly fit the mask patch and the refiner on random patches of ``scenes``.

    The refiner is updated every step; the mask only from epoch
    ``mask_freeze`` on (and never when ``train_mask`` is false). Both learning
    rates halve every ``halve_every`` epochs. ``holdout`` scenes, if given,
    are evaluated after each epoch for the log.
    """
    from .metrics import evaluate_mask, reference_counts

    tcfg, lcfg = tcfg or TrainConfig(), lcfg or LossConfig()
    ncfg, rcfg, tof = ncfg or NoiseConfig(), rcfg or RefinerConfig(), tof or ToFConfig()
    if not scenes:
        raise ValueError("need at least one training scene")
    U, V = scenes[0].U, scenes[0].V
    mask = as_tensor(mask_init).copy() if mask_init is not None else np.ones((U, V, 80, 80), np.float32)
    if mask.shape[:2] != (U, V):
        raise ValueError(f"mask views {mask.shape[:2]} do not match light field {(U, V)}")
    rng = RngState(tcfg.seed)
    weights = weights_init or refine_init(rcfg, rng.split(1)[0], views=U * V)
    wparams = [np.asarray(t, np.float32) for t in weights.flat()]
    adam_w = AdamState.zeros_like(wparams)
    adam_m = AdamState.zeros_like([mask])
    ref = reference_counts(holdout, tof, ncfg, tcfg.crop_side, tcfg.eval_seed) if holdout else None
    manifest = {"seed": tcfg.seed, "config_hash": config_hash(tcfg, lcfg, ncfg, rcfg, tof)}

    def element(args):
        sample_rng, = args
        sample = sample_patch(scenes[sample_rng.generator().integers(len(scenes))],
                              sample_rng, tcfg.patch_size, tcfg.crop_side)
        tape = Tape()
        m_leaf = tape.leaf(mask)
        w_leaves = [tape.leaf(t) for t in wparams]
        cur = RefinerWeights.from_flat(wparams, weights.config)
        loss = pipeline_loss(m_leaf, w_leaves, cur, sample, tcfg.crop_side, tof, ncfg,
                             lcfg, sample_rng, aperture)
        grads = tape.backward(loss)
        return float(loss.value), grads.get(m_leaf, np.zeros(mask.shape)), [
            grads.get(w, np.zeros(w.value.shape)) for w in w_leaves]

    history = []
    pool = ThreadPoolExecutor(max_workers=tcfg.threads) if tcfg.threads > 1 else None
    try:
        for epoch in range(tcfg.epochs):
            lr_w, lr_m = tcfg.learning_rates(epoch)
            losses = []
            for _ in range(tcfg.steps_per_epoch):
                jobs = [(r,) for r in rng.split(tcfg.batch_size)]
                results = list(pool.map(element, jobs)) if pool else [element(j) for j in jobs]
                # accumulate in batch order regardless of completion order
                gm = np.zeros(mask.shape)
                gw = [np.zeros(t.shape) for t in wparams]
                for loss_val, g_mask, g_w in results:
                    losses.append(loss_val)
                    gm += g_mask
                    gw = [a + b for a, b in zip(gw, g_w)]
                n = len(results)
                if not np.isfinite(np.sum(losses)):
                    dump = None
                    if out_dir:
                        dump = os.path.join(out_dir, "diverged")
                        _write_state(dump, "state", mask,
                                     RefinerWeights.from_flat(wparams, weights.config), manifest)
                    raise TrainingDiverged(epoch, dump)
                wparams, adam_w = adam_step(wparams, [g / n for g in gw], adam_w, lr_w)
                if train_mask and epoch >= tcfg.mask_freeze:
                    (new_mask,), adam_m = adam_step([mask], [gm / n], adam_m, lr_m)
                    mask = project_box(new_mask)
            cur = RefinerWeights.from_flat(wparams, weights.config)
            row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr_refiner": lr_w,
                   "lr_mask": lr_m, "throughput": throughput(mask),
                   "holdout_fp_ratio": float("nan"), "holdout_mae": float("nan")}
            if holdout:
                rep = evaluate_mask(mask, cur, holdout, tof, ncfg, tcfg.crop_side,
                                    tcfg.eval_seed, reference=ref)
                row["holdout_fp_ratio"] = rep["aggregate"]["fp_ratio"]
                row["holdout_mae"] = rep["aggregate"]["mae"]
            history.append(row)
            log.debug("epoch %d loss %.4f", epoch, row["loss"])
            if progress:
                progress(row)
            if out_dir and tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
                _write_state(os.path.join(out_dir, "checkpoints"), f"epoch{epoch + 1:04d}",
                             mask, cur, manifest)
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(mask, RefinerWeights.from_flat(wparams, weights.config), history)


def write_log_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in LOG_FIELDS})
