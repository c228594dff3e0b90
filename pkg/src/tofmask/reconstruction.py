"""Four-bucket phase estimation, phase-to-depth conversion and point clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .forward import ToFConfig


def phase_estimate(stack, with_validity: bool = False):
    """Recover phase from a [4, H, W] stack ordered as offsets (0, pi/2, 3pi/2, pi).

    phi = atan2(C(3pi/2) - C(pi/2), C(0) - C(pi)), wrapped into [0, 2*pi).
    Pixels where both differences vanish get phase 0 and ``valid == False``.
    """
    if ad.value(stack).shape[0] != 4:
        raise ValueError("expected four correlation images")
    num = ad.sub(ad.take(stack, 2), ad.take(stack, 1))
    den = ad.sub(ad.take(stack, 0), ad.take(stack, 3))
    phi = ad.wrap_2pi(ad.atan2(num, den))
    if not with_validity:
        return phi
    valid = (ad.value(num) != 0) | (ad.value(den) != 0)
    return phi, valid


def depth_from_phase(phi, cfg: ToFConfig | None = None):
    cfg = cfg or ToFConfig()
    return ad.scale(phi, 1.0 / cfg.radians_per_mm)


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 3]: column, row, s_z * depth
    depth_scale: float = 1.0

    def __len__(self):
        return len(self.points)


def project_points(depth, s_z: float = 1.0) -> PointCloud:
    """Point i*W + j is (j, i, s_z * depth[i, j])."""
    if s_z <= 0:
        raise ValueError("depth scale must be positive")
    d = np.asarray(depth, dtype=np.float64)
    H, W = d.shape
    rows, cols = np.mgrid[0:H, 0:W]
    pts = np.stack([cols.ravel(), rows.ravel(), s_z * d.ravel()], axis=1).astype(np.float64)
    return PointCloud(pts, float(s_z))


def write_ply(path, cloud: PointCloud) -> None:
    pts = np.asarray(cloud.points, dtype=np.float32)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"comment depth_scale {cloud.depth_scale!r}\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        # 9 significant digits round-trip float32 exactly
        np.savetxt(fh, pts, fmt="%.9g")


def read_ply(path) -> PointCloud:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n, scale = None, 1.0
        for line in fh:
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            elif parts[:2] == ["comment", "depth_scale"]:
                scale = float(parts[2])
            elif parts and parts[0] == "end_header":
                break
        if n is None:
            raise ValueError(f"{path}: missing vertex count")
        pts = np.loadtxt(fh, dtype=np.float32, ndmin=2, max_rows=n)
    if pts.shape != (n, 3):
        raise ValueError(f"{path}: expected {n} vertices, found {pts.shape[0]}")
    return PointCloud(pts, scale)
