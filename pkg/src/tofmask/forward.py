"""AMCW time-of-flight image formation.

Per view ``u`` and phase offset ``psi`` the correlation image is

    C[psi, u] = alpha * L_u * (beta + cos(Phi_u + psi)) * g * T / pi

with ``Phi_u`` the phase of the view's depth map. The sensor sees the
mask-weighted average over all U*V views plus per-offset noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .scene import LightField
from .tensor import RngState, rng_gaussian, rng_uniform

# Order in which the four offsets are stacked.
PSI_OFFSETS = (0.0, np.pi / 2, 3 * np.pi / 2, np.pi)


class WrapViolationError(ValueError):
    """Depth at or beyond the unambiguous range."""


@dataclass(frozen=True)
class ToFConfig:
    mod_freq_hz: float = 30e6
    # Illumination amplitude; scales [0, 1] light-field radiance to 8-bit units.
    amplitude: float = 255.0
    bias: float = 0.5
    gain: float = 20.0
    integration_ms: float = 1.0
    speed_of_light_mm_per_ms: float = 2.998e8

    def __post_init__(self):
        if self.mod_freq_hz <= 0 or self.gain <= 0 or self.integration_ms <= 0:
            raise ValueError("mod_freq_hz, gain and integration_ms must be positive")

    @property
    def c_mm_per_s(self) -> float:
        return self.speed_of_light_mm_per_ms * 1e3

    @property
    def unambiguous_range_mm(self) -> float:
        return self.c_mm_per_s / (2 * self.mod_freq_hz)

    @property
    def radians_per_mm(self) -> float:
        return 4 * np.pi * self.mod_freq_hz / self.c_mm_per_s

    @property
    def correlation_scale(self) -> float:
        return self.gain * self.integration_ms / np.pi


@dataclass(frozen=True)
class NoiseConfig:
    a: float = 0.75
    b: float = 1.25
    mu: float = 0.0
    sigma: float = 3.0

    def __post_init__(self):
        if self.a > self.b or self.sigma < 0:
            raise ValueError(f"invalid noise config {asdict(self)}")

    @classmethod
    def off(cls) -> "NoiseConfig":
        return cls(1.0, 1.0, 0.0, 0.0)

    @property
    def enabled(self) -> bool:
        return self.sigma > 0 or self.mu != 0


@dataclass(frozen=True)
class LensGeometry:
    focal_mm: float
    radius_mm: float
    depth_mm: float  # scene depth; may be an array for sweeps

    def __post_init__(self):
        if self.focal_mm <= 0 or self.radius_mm <= 0 or np.any(np.asarray(self.depth_mm) <= 0):
            raise ValueError("focal length, lens radius and depth must be positive")


def phase_from_depth(depth, cfg: ToFConfig):
    d = ad.value(depth)
    bad = np.count_nonzero((d >= cfg.unambiguous_range_mm) | (d < 0))
    if bad:
        raise WrapViolationError(
            f"{bad} depth values outside [0, {cfg.unambiguous_range_mm:.3f}) mm")
    return ad.scale(depth, cfg.radians_per_mm)


def view_correlations(lf: LightField, cfg: ToFConfig) -> np.ndarray:
    """Unmasked per-view correlation images, shape [4, U, V, H, W]."""
    phi = phase_from_depth(lf.view_depth.astype(np.float64), cfg)
    amp = cfg.amplitude * lf.amplitude.astype(np.float64)
    return np.stack([amp * (cfg.bias + np.cos(phi + psi)) * cfg.correlation_scale
                     for psi in PSI_OFFSETS])


def _as_weights(mask, aperture, shape):
    from .mask import MicrolensMask

    if isinstance(mask, MicrolensMask):
        mask = mask.array()
    if ad.value(mask).shape != shape:
        raise ValueError(f"mask shape {ad.value(mask).shape} does not match light field {shape}")
    if aperture is None:
        return mask
    aperture = np.asarray(aperture, dtype=np.float64)
    if aperture.shape != shape[:2]:
        raise ValueError(f"aperture shape {aperture.shape} does not match views {shape[:2]}")
    return ad.mul(mask, aperture[:, :, None, None])


def masked_average(per_view, mask, aperture=None):
    """Average the mask-weighted views: [4, U, V, H, W] -> [4, H, W]."""
    w = _as_weights(mask, aperture, per_view.shape[1:])
    return ad.view_average(ad.mul(per_view, w))


def correlation_stack(lf: LightField, mask, aperture=None, cfg: ToFConfig | None = None):
    """Return (per-view stacks [4, U, V, H, W], averaged stack [4, H, W])."""
    cfg = cfg or ToFConfig()
    per_view = view_correlations(lf, cfg)
    return per_view, masked_average(per_view, mask, aperture)


def noise_field(shape_hw, ncfg: NoiseConfig, rng: RngState) -> np.ndarray:
    """One noise image per offset: uniform(a, b) scalar times a Gaussian field."""
    out = np.empty((len(PSI_OFFSETS),) + tuple(shape_hw))
    for k in range(len(PSI_OFFSETS)):
        s = rng_uniform(rng, ncfg.a, ncfg.b)
        out[k] = s * rng_gaussian(rng, shape_hw, ncfg.mu, ncfg.sigma).astype(np.float64)
    return out


def add_noise(stack, ncfg: NoiseConfig, rng: RngState):
    if not ncfg.enabled:
        return stack
    return ad.add(stack, noise_field(ad.value(stack).shape[1:], ncfg, rng))


def mix_phase_oracle(amp_bg, phi_bg, amp_fg, phi_fg):
    """Phase of the sum of two sinusoids, in [0, 2*pi)."""
    amp_bg, amp_fg = np.asarray(amp_bg, float), np.asarray(amp_fg, float)
    if np.any((amp_bg == 0) & (amp_fg == 0)):
        raise ValueError("both amplitudes are zero; mixed phase undefined")
    y = amp_bg * np.sin(phi_bg) + amp_fg * np.sin(phi_fg)
    x = amp_bg * np.cos(phi_bg) + amp_fg * np.cos(phi_fg)
    out = np.mod(np.arctan2(y, x), 2 * np.pi)
    out = np.where(out >= 2 * np.pi, 0.0, out)
    return float(out) if out.ndim == 0 else out


def ray_length(u, x, geom: LensGeometry):
    """Path length through aperture offset ``u`` to sensor coordinate ``x`` (both mm)."""
    f, r, z = geom.focal_mm, geom.radius_mm, np.asarray(geom.depth_mm, float)
    return np.sqrt((r - u) ** 2 + f ** 2) + np.sqrt(z ** 2 + (x * z / f + u) ** 2)


def residual_path_delta(u, x, geom: LensGeometry, cfg: ToFConfig | None = None) -> dict:
    """Extra path of an off-axis aperture ray and the depth error it would cause.

    ``x`` is the sensor-plane position in the same length unit as the focal
    length. All arguments broadcast.
    """
    cfg = cfg or ToFConfig()
    u, x = np.asarray(u, float), np.asarray(x, float)
    if np.any(np.abs(u) > geom.radius_mm):
        raise ValueError("aperture offset exceeds the lens radius")
    delta = ray_length(u, x, geom) - ray_length(0.0, x, geom)
    phase = 2 * np.pi * cfg.mod_freq_hz * delta / cfg.c_mm_per_s
    bias = phase * cfg.c_mm_per_s / (4 * np.pi * cfg.mod_freq_hz)
    return {"delta_mm": delta, "phase_err_rad": phase, "depth_bias_mm": bias}
