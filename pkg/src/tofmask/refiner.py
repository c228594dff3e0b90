"""Small residual convolutional depth refiner.

Input channels are the coded depth map followed by the U*V per-pixel mask
transmittances (divided by U*V). With ``downsample`` and at least three layers the network
is a one-level encoder/decoder::

    conv -> relu -> e1 -> conv/2 -> relu -> [conv -> relu]* -> up2 (+ e1) -> conv

otherwise a plain stack of stride-1 convolutions. The depth channel is
divided by ``depth_scale_mm`` on the way in; the last conv emits a residual
in units of ``residual_scale_mm`` and the output is ``max(0, depth + residual)``.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .mask import MicrolensMask
from .tensor import RngState, decode_tns, encode_tns

MIN_SIZE = 8


@dataclass(frozen=True)
class RefinerConfig:
    hidden_channels: int = 16
    num_layers: int = 4
    downsample: bool = True
    depth_scale_mm: float = 1000.0
    residual_scale_mm: float = 10.0

    def __post_init__(self):
        if self.num_layers < 2 or self.hidden_channels < 1:
            raise ValueError("refiner needs >= 2 layers and >= 1 channel")

    @property
    def encoder_decoder(self) -> bool:
        return self.downsample and self.num_layers >= 3


@dataclass
class RefinerWeights:
    layers: list  # [(kernel [Cout, Cin, 3, 3], bias [Cout]), ...]
    config: RefinerConfig = field(default_factory=RefinerConfig)

    @property
    def in_channels(self) -> int:
        return self.layers[0][0].shape[1]

    def flat(self) -> list:
        return [t for layer in self.layers for t in layer]

    @classmethod
    def from_flat(cls, tensors, config):
        it = iter(tensors)
        return cls([(k, b) for k, b in zip(it, it)], config)

    def num_parameters(self) -> int:
        return int(sum(np.size(t) for t in self.flat()))


def refine_init(cfg: RefinerConfig, rng: RngState, views: int = 81) -> RefinerWeights:
    """He-normal kernels, zero biases and a zero last layer (identity residual)."""
    gen = rng.generator()
    c = cfg.hidden_channels
    chans = [1 + views] + [c] * (cfg.num_layers - 1) + [1]
    layers = []
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        fan_in = cin * 9
        if i == cfg.num_layers - 1:
            kernel = np.zeros((cout, cin, 3, 3))
        else:
            kernel = gen.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)
        layers.append((kernel.astype(np.float32), np.zeros(cout, dtype=np.float32)))
    return RefinerWeights(layers, cfg)


def _mask_channels(mask):
    """[U, V, H, W] mask (array, Var or MicrolensMask) -> [U*V, H, W]."""
    if isinstance(mask, MicrolensMask):
        mask = mask.array()
    U, V, H, W = ad.value(mask).shape
    # the views are strongly correlated; keep their summed drive O(1)
    return ad.scale(ad.reshape(mask, (U * V, H, W)), 1.0 / (U * V))


def refine_forward(depth, mask, weights: RefinerWeights, params=None):
    """Refined depth ``max(0, depth + residual)``.

    ``params`` optionally overrides ``weights.flat()`` with tape leaves so
    gradients can be taken; the config still comes from ``weights``.
    """
    cfg = weights.config
    tensors = weights.flat() if params is None else params
    H, W = ad.value(depth).shape
    if min(H, W) < MIN_SIZE:
        raise ValueError(f"refiner input must be at least {MIN_SIZE}x{MIN_SIZE}, got {H}x{W}")
    m = _mask_channels(mask)
    if ad.value(m).shape[1:] != (H, W):
        raise ValueError("mask tiling does not match the depth map")
    if ad.value(m).shape[0] + 1 != ad.value(tensors[0]).shape[1]:
        raise ValueError("mask channel count does not match the refiner input layer")

    s = cfg.depth_scale_mm
    x = ad.concat([ad.reshape(ad.scale(depth, 1.0 / s), (1, H, W)), m], axis=0)
    kernels, biases = tensors[0::2], tensors[1::2]
    n = len(kernels)
    if cfg.encoder_decoder:
        e1 = ad.rectify(ad.conv2d(x, kernels[0], biases[0]))
        h = ad.rectify(ad.conv2d(e1, kernels[1], biases[1], stride=2))
        for i in range(2, n - 1):
            h = ad.rectify(ad.conv2d(h, kernels[i], biases[i]))
        h = ad.add(ad.upsample2(h, (H, W)), e1)
    else:
        h = x
        for i in range(n - 1):
            h = ad.rectify(ad.conv2d(h, kernels[i], biases[i]))
    residual = ad.conv2d(h, kernels[-1], biases[-1])
    out = ad.add(depth, ad.scale(ad.reshape(residual, (H, W)), cfg.residual_scale_mm))
    return ad.rectify(out)


# --- weights container ----------------------------------------------------------

CONTAINER_MAGIC = "TNSC1"


def write_weights(path, weights: RefinerWeights) -> None:
    """Text manifest followed by one TNS1 blob per tensor (kernel, bias, kernel, ...)."""
    cfg = weights.config
    tensors = weights.flat()
    lines = [f"{CONTAINER_MAGIC} {len(tensors)}",
             f"config hidden_channels={cfg.hidden_channels} num_layers={cfg.num_layers} "
             f"downsample={int(cfg.downsample)} depth_scale_mm={cfg.depth_scale_mm!r} "
             f"residual_scale_mm={cfg.residual_scale_mm!r}"]
    for i, t in enumerate(tensors):
        kind = "kernel" if i % 2 == 0 else "bias"
        lines.append(f"layer{i // 2}.{kind} " + " ".join(str(d) for d in np.shape(t)))
    lines.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for t in tensors:
        buf.write(encode_tns(t))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_weights(path) -> RefinerWeights:
    with open(path, "rb") as fh:
        buf = fh.read()
    end = buf.find(b"\nend\n")
    if not buf.startswith(CONTAINER_MAGIC.encode()) or end < 0:
        raise ValueError(f"{os.fspath(path)}: not a weights container")
    header = buf[:end].decode("ascii").split("\n")
    count = int(header[0].split()[1])
    conf = dict(item.split("=") for item in header[1].split()[1:])
    cfg = RefinerConfig(int(conf["hidden_channels"]), int(conf["num_layers"]),
                        bool(int(conf["downsample"])), float(conf["depth_scale_mm"]),
                        float(conf["residual_scale_mm"]))
    shapes = [tuple(int(d) for d in line.split()[1:]) for line in header[2:]]
    if len(shapes) != count:
        raise ValueError("manifest tensor count mismatch")
    pos, tensors = end + len(b"\nend\n"), []
    for shape in shapes:
        t, pos = decode_tns(buf, pos)
        if t.shape != shape:
            raise ValueError(f"tensor shape {t.shape} does not match manifest {shape}")
        tensors.append(t)
    if pos != len(buf):
        raise ValueError("trailing bytes after last tensor")
    return RefinerWeights.from_flat(tensors, cfg)
