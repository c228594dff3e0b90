"""Layered parametric scenes and their discretized light fields.

A scene is a front-to-back stack of fronto-parallel layers. Rendering a view
at aperture offset (u, v) shifts every layer by its disparity

    s = (u, v) * baseline * (1/z_layer - 1/z_focus)   [pixels]

and composites the shifted layers front to back. ``u`` moves content along
the column axis (x, last axis) and ``v`` along the row axis (y). Content
nearer than the focus plane shifts toward +x for positive ``u``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import RngState, as_tensor, tns_read, tns_write

SPEED_OF_LIGHT_MM_PER_S = 2.998e11
DEFAULT_RANGE_MM = SPEED_OF_LIGHT_MM_PER_S / (2 * 30e6)
# 9x9 views with fg 1000 mm in front of a 3000 mm focus plane -> 3 px at the outer views
DEFAULT_BASELINE = 1125.0


@dataclass
class Layer:
    depth_mm: float
    albedo: np.ndarray
    opacity: np.ndarray


@dataclass
class LayeredScene:
    layers: list[Layer]
    name: str = "custom"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("scene needs at least one layer")
        depths = [layer.depth_mm for layer in self.layers]
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise ValueError(f"layer depths must increase front to back: {depths}")
        if not np.all(self.layers[-1].opacity == 1):
            raise ValueError("backmost layer must be fully opaque")

    @property
    def shape(self):
        return self.layers[0].albedo.shape

    @property
    def depths(self) -> tuple[float, ...]:
        return tuple(float(layer.depth_mm) for layer in self.layers)


@dataclass
class LightField:
    amplitude: np.ndarray    # [U, V, H, W]
    view_depth: np.ndarray   # [U, V, H, W], mm
    baseline: float
    focus_depth_mm: float
    layer_depths_mm: tuple[float, ...] = field(default=())

    def __post_init__(self):
        self.amplitude = as_tensor(self.amplitude)
        self.view_depth = as_tensor(self.view_depth)
        if self.amplitude.ndim != 4 or self.amplitude.shape != self.view_depth.shape:
            raise ValueError("amplitude and view_depth must share a [U, V, H, W] shape")
        U, V = self.amplitude.shape[:2]
        if U % 2 == 0 or V % 2 == 0:
            raise ValueError(f"aperture extents must be odd, got {U}x{V}")

    @property
    def U(self):
        return self.amplitude.shape[0]

    @property
    def V(self):
        return self.amplitude.shape[1]

    @property
    def H(self):
        return self.amplitude.shape[2]

    @property
    def W(self):
        return self.amplitude.shape[3]

    def crop(self, r0: int, c0: int, h: int, w: int) -> "LightField":
        return LightField(self.amplitude[:, :, r0:r0 + h, c0:c0 + w],
                          self.view_depth[:, :, r0:r0 + h, c0:c0 + w],
                          self.baseline, self.focus_depth_mm, self.layer_depths_mm)


def _texture(shape, params, rng: RngState, key: str) -> np.ndarray:
    """Constant albedo, or smoothed noise rescaled into [lo, hi]."""
    const = params.get(f"{key}_albedo", params.get("albedo"))
    if const is not None:
        if not 0 <= float(const) <= 1:
            raise ValueError("albedo must lie in [0, 1]")
        return np.full(shape, float(const), dtype=np.float32)
    lo, hi = params.get("albedo_range", (0.4, 1.0))
    sigma = float(params.get("texture_sigma", 2.0))
    noise = rng.generator().standard_normal(shape)
    if sigma > 0:
        noise = ndimage.gaussian_filter(noise, sigma, mode="wrap")
    span = noise.max() - noise.min()
    unit = (noise - noise.min()) / span if span > 0 else np.full(shape, 0.5)
    return as_tensor(lo + (hi - lo) * unit)


def preset_scene(name: str, params: dict | None = None, rng: RngState | None = None) -> LayeredScene:
    """Build one of the parametric scenes: flat, edge, bars, staircase or disk.

    Common params: ``size`` (or ``height``/``width``), ``albedo`` for a
    constant texture, otherwise ``albedo_range`` and ``texture_sigma`` for
    band-limited noise, and ``range_mm`` for the unambiguous-range check.
    Two-layer presets take ``fg`` and ``bg`` depths in mm.
    """
    params = dict(params or {})
    rng = rng if rng is not None else RngState(int(params.get("seed", 0)))
    size = int(params.get("size", 64))
    H, W = int(params.get("height", size)), int(params.get("width", size))
    range_mm = float(params.get("range_mm", DEFAULT_RANGE_MM))
    ones = np.ones((H, W), dtype=np.float32)

    def check(*depths):
        for d in depths:
            if not 0 < d < range_mm:
                raise ValueError(f"depth {d} mm outside the unambiguous range (0, {range_mm:.1f})")

    if name == "flat":
        depth = float(params.get("depth", 2000.0))
        check(depth)
        layers = [Layer(depth, _texture((H, W), params, rng, "bg"), ones)]
    elif name in ("edge", "bars", "disk"):
        fg, bg = float(params.get("fg", 1000.0)), float(params.get("bg", 3000.0))
        check(fg, bg)
        if fg >= bg:
            raise ValueError("foreground must be nearer than background")
        rows, cols = np.mgrid[0:H, 0:W]
        if name == "edge":
            split = int(params.get("split", W // 2))
            front = cols < split
            if params.get("orientation", "vertical") == "horizontal":
                front = rows < int(params.get("split", H // 2))
        elif name == "bars":
            period = int(params.get("period", 16))
            duty = float(params.get("duty", 0.5))
            front = (cols % period) < duty * period
        else:
            cy = float(params.get("cy", (H - 1) / 2))
            cx = float(params.get("cx", (W - 1) / 2))
            radius = float(params.get("radius", min(H, W) / 4))
            front = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
        layers = [Layer(fg, _texture((H, W), params, rng, "fg"), front.astype(np.float32)),
                  Layer(bg, _texture((H, W), params, rng, "bg"), ones)]
    elif name == "staircase":
        steps = int(params.get("steps", 4))
        near, far = float(params.get("near", 1000.0)), float(params.get("far", 3000.0))
        if steps < 1:
            raise ValueError("staircase needs at least one step")
        depths = np.linspace(near, far, steps) if steps > 1 else np.array([near])
        check(*depths)
        cols = np.broadcast_to(np.arange(W), (H, W))
        band = (cols * steps) // W
        layers = []
        for i, d in enumerate(depths):
            opacity = ones if i == steps - 1 else (band == i).astype(np.float32)
            layers.append(Layer(float(d), _texture((H, W), params, rng, f"s{i}"), opacity))
    else:
        raise ValueError(f"unknown preset {name!r}")
    return LayeredScene(layers, name=name)


def _shift_bilinear(img, sy, sx):
    """Sample img at (y - sy, x - sx), bilinear, clamped at the border."""
    H, W = img.shape
    out = img
    for axis, s, n in ((0, sy, H), (1, sx, W)):
        pos = np.arange(n) - s
        i0 = np.floor(pos)
        frac = pos - i0
        i0 = i0.astype(np.int64)
        a = np.take(out, np.clip(i0, 0, n - 1), axis=axis)
        b = np.take(out, np.clip(i0 + 1, 0, n - 1), axis=axis)
        frac = frac[:, None] if axis == 0 else frac[None, :]
        out = a * (1 - frac) + b * frac
    return out


def _shift_nearest(img, sy, sx):
    H, W = img.shape
    ry = np.clip(np.floor(np.arange(H) - sy + 0.5).astype(np.int64), 0, H - 1)
    rx = np.clip(np.floor(np.arange(W) - sx + 0.5).astype(np.int64), 0, W - 1)
    return img[np.ix_(ry, rx)]


def render_lightfield(scene: LayeredScene, U: int = 9, V: int = 9,
                      baseline: float = DEFAULT_BASELINE,
                      focus_depth: float | None = None) -> LightField:
    """Render all U x V sub-aperture views of a layered scene.

    ``focus_depth`` defaults to the backmost layer depth.
    """
    if U % 2 == 0 or V % 2 == 0:
        raise ValueError("aperture extents must be odd")
    focus = scene.layers[-1].depth_mm if focus_depth is None else float(focus_depth)
    if focus <= 0:
        raise ValueError("focus depth must be positive")
    H, W = scene.shape
    amp = np.zeros((U, V, H, W), dtype=np.float64)
    dep = np.zeros((U, V, H, W), dtype=np.float64)
    for iu in range(U):
        u = iu - (U - 1) // 2
        for iv in range(V):
            v = iv - (V - 1) // 2
            a = np.zeros((H, W))
            d = np.zeros((H, W))
            for layer in reversed(scene.layers):
                k = baseline * (1.0 / layer.depth_mm - 1.0 / focus)
                sx, sy = u * k, v * k
                hit = _shift_nearest(layer.opacity, sy, sx) > 0.5
                a = np.where(hit, _shift_bilinear(layer.albedo.astype(np.float64), sy, sx), a)
                d = np.where(hit, layer.depth_mm, d)
            amp[iu, iv] = a
            dep[iu, iv] = d
    return LightField(np.clip(amp, 0.0, 1.0), dep, float(baseline), focus, scene.depths)


def central_depth(lf: LightField) -> np.ndarray:
    return lf.view_depth[lf.U // 2, lf.V // 2].copy()


def save_lightfield(lf: LightField, stem) -> list[str]:
    stem = os.fspath(stem)
    paths = [stem + ".amp.tns", stem + ".dep.tns", stem + ".meta"]
    tns_write(lf.amplitude, paths[0])
    tns_write(lf.view_depth, paths[1])
    with open(paths[2], "w") as fh:
        fh.write(f"U={lf.U}\nV={lf.V}\nbaseline={lf.baseline!r}\n")
        fh.write(f"focus_depth_mm={lf.focus_depth_mm!r}\n")
        fh.write("layer_depths_mm={}\n".format(",".join(repr(d) for d in lf.layer_depths_mm)))
    return paths


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: expected key=value, got {line!r}")
            out[key.strip()] = val.strip()
    return out


def load_lightfield(stem) -> LightField:
    stem = os.fspath(stem)
    meta = read_keyvalue(stem + ".meta")
    amp = tns_read(stem + ".amp.tns")
    dep = tns_read(stem + ".dep.tns")
    if amp.shape[:2] != (int(meta["U"]), int(meta["V"])):
        raise ValueError(f"{stem}: view extents in meta do not match tensors")
    layers = tuple(float(x) for x in meta.get("layer_depths_mm", "").split(",") if x)
    return LightField(amp, dep, float(meta["baseline"]), float(meta["focus_depth_mm"]), layers)


def scene_suite(seed: int = 0, size: int = 64, views: int = 9, count: int = 16,
                baseline: float = DEFAULT_BASELINE):
    """Sixteen-ish parametric light fields; every fourth one is held out.

    Held-out scenes are always two-layer presets so the flying-pixel band
    is well defined. Returns ``(train, test)`` lists of LightField.
    """
    rng = RngState(seed)
    gen = rng.generator()
    train, test = [], []
    two_layer = ("edge", "disk", "bars")
    for i in range(count):
        held_out = i % 4 == 3
        name = two_layer[i % 3] if held_out else ("edge", "disk", "bars", "staircase", "flat")[i % 5]
        fg = float(gen.uniform(800, 2000))
        bg = float(gen.uniform(fg + 800, 3600))
        params = {"size": size, "fg": fg, "bg": bg, "near": fg, "far": bg, "depth": bg,
                  "split": int(gen.integers(size // 4, 3 * size // 4)),
                  "period": int(gen.integers(10, 24)), "radius": float(gen.uniform(size / 6, size / 3)),
                  "orientation": ("vertical", "horizontal")[int(gen.integers(2))],
                  "steps": int(gen.integers(3, 5))}
        sc = preset_scene(name, params, rng.split(1)[0])
        lf = render_lightfield(sc, views, views, baseline, focus_depth=bg)
        (test if held_out else train).append(lf)
    return train, test
