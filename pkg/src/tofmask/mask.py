"""Microlens mask patches: initial patterns, toroidal tiling, projection, export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tensor import RngState, as_tensor

PATTERNS = ("ones", "circle", "bernoulli", "gaussian", "barcode")


def init_mask(pattern: str, params: dict | None = None, rng: RngState | None = None,
              U: int = 9, V: int = 9, P: int = 80) -> np.ndarray:
    """Return a [U, V, P, P] patch of sub-aperture transmittances.

    ``circle`` takes ``diameter`` in aperture cells: a cell is open when its
    distance from the central view is at most (diameter - 1) / 2.
    """
    params = dict(params or {})
    rng = rng if rng is not None else RngState(int(params.get("seed", 0)))
    shape = (U, V, P, P)
    if pattern == "ones":
        out = np.ones(shape)
    elif pattern == "circle":
        d = float(params.get("diameter", 5))
        if not 1 <= d <= min(U, V):
            raise ValueError(f"circle diameter must be in [1, {min(U, V)}], got {d}")
        u = np.arange(U) - (U - 1) / 2
        v = np.arange(V) - (V - 1) / 2
        disk = (u[:, None] ** 2 + v[None, :] ** 2) <= ((d - 1) / 2) ** 2 + 1e-9
        out = np.broadcast_to(disk[:, :, None, None], shape).astype(np.float64)
    elif pattern == "bernoulli":
        p = float(params.get("p", 0.5))
        if not 0 <= p <= 1:
            raise ValueError("bernoulli p must lie in [0, 1]")
        out = (rng.generator().random(shape) < p).astype(np.float64)
    elif pattern == "gaussian":
        s = float(params.get("std", 0.25))
        if s < 0:
            raise ValueError("gaussian std must be non-negative")
        out = np.clip(0.5 + s * rng.generator().standard_normal(shape), 0.0, 1.0)
    elif pattern == "barcode":
        period = float(params.get("period", 4.0))
        if period <= 0:
            raise ValueError("barcode period must be positive")
        gen = rng.generator()
        theta = gen.uniform(0, np.pi, (P, P))
        phase = gen.uniform(0, 2 * np.pi, (P, P))
        u = (np.arange(U) - (U - 1) / 2)[:, None, None, None]
        v = (np.arange(V) - (V - 1) / 2)[None, :, None, None]
        coord = u * np.cos(theta) + v * np.sin(theta)
        out = (np.cos(2 * np.pi * coord / period + phase) >= 0).astype(np.float64)
    else:
        raise ValueError(f"unknown mask pattern {pattern!r}; expected one of {PATTERNS}")
    return as_tensor(out)


def parse_pattern(text: str) -> tuple[str, dict]:
    """Parse ``circle:5`` / ``bernoulli:0.3`` / ``ones`` style pattern strings."""
    name, _, arg = text.partition(":")
    key = {"circle": "diameter", "bernoulli": "p", "gaussian": "std", "barcode": "period"}
    if arg and name not in key:
        raise ValueError(f"pattern {name!r} takes no argument")
    return name, ({key[name]: float(arg)} if arg else {})


@dataclass
class MicrolensMask:
    """A patch tiled toroidally over an H x W sensor.

    Sensor pixel (x, y) reads patch cell
    ``(cr + (x + off_r) % K, cc + (y + off_c) % K)`` where (cr, cc) anchors the
    centred K x K crop of the patch.
    """

    patch: object  # [U, V, P, P] array or autodiff Var
    H: int
    W: int
    K: int
    offset: tuple[int, int] = (0, 0)

    def __post_init__(self):
        P = ad.value(self.patch).shape[-1]
        if self.K > P:
            raise ValueError(f"crop side {self.K} exceeds patch side {P}")

    @property
    def shape(self):
        U, V = ad.value(self.patch).shape[:2]
        return (U, V, self.H, self.W)

    def flat_index(self) -> np.ndarray:
        U, V, P, _ = ad.value(self.patch).shape
        c0 = (P - self.K) // 2
        rows = c0 + (np.arange(self.H) + self.offset[0]) % self.K
        cols = c0 + (np.arange(self.W) + self.offset[1]) % self.K
        cell = rows[:, None] * P + cols[None, :]
        uv = np.arange(U * V).reshape(U, V, 1, 1) * (P * P)
        return uv + cell

    def array(self):
        """Materialize the [U, V, H, W] mask (a tape node if the patch is one)."""
        return ad.gather(self.patch, self.flat_index())


def tile_mask(patch, H: int, W: int, K: int | None = None, offset=(0, 0)) -> MicrolensMask:
    if K is None:
        K = min(64, ad.value(patch).shape[-1])
    return MicrolensMask(patch, int(H), int(W), int(K), (int(offset[0]), int(offset[1])))


def project_box(patch) -> np.ndarray:
    return np.clip(patch, 0.0, 1.0).astype(np.asarray(patch).dtype, copy=False)


def throughput(patch) -> float:
    return float(np.mean(np.asarray(patch, dtype=np.float64)))


def binarize(patch, threshold: float = 0.5):
    """Threshold to {0, 1}; returns the binary patch and a throughput report."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    patch = np.asarray(patch)
    out = (patch >= threshold).astype(np.float32)
    return out, {"throughput_before": throughput(patch), "throughput_after": throughput(out)}


def mosaic(patch) -> np.ndarray:
    """Lay a [U, V, P, P] patch out as a (P*U) x (P*V) image, one U x V block per pixel."""
    U, V, P, Q = np.shape(patch)
    return np.asarray(patch).transpose(2, 0, 3, 1).reshape(P * U, Q * V)


def unmosaic(img, U: int, V: int) -> np.ndarray:
    R, C = img.shape
    return img.reshape(R // U, U, C // V, V).transpose(1, 3, 0, 2)


def write_pgm(path, patch, threshold: float = 0.5) -> None:
    """Binarize and write a patch as an 8-bit P5 mosaic with 0/255 values."""
    binary, _ = binarize(patch, threshold)
    U, V, P, Q = binary.shape
    img = (mosaic(binary) * 255).astype(np.uint8)
    comment = f"# tofmask U={U} V={V} P={P} layout: row=i*{U}+u col=j*{V}+v"
    header = f"P5\n{comment}\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + img.tobytes())


def read_pgm(path) -> tuple[np.ndarray, dict]:
    """Read a P5 file; returns (uint8 image, key=value fields from comments)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, meta, pos = [], {}, 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            end = buf.index(b"\n", pos)
            for item in buf[pos + 1:end].decode("ascii").split():
                k, sep, v = item.partition("=")
                if sep:
                    meta[k] = v
            pos = end + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError("only 8-bit PGM supported")
    pos += 1
    img = np.frombuffer(buf, np.uint8, count=width * height, offset=pos)
    return img.reshape(height, width), meta


def read_pgm_patch(path) -> np.ndarray:
    img, meta = read_pgm(path)
    return unmosaic(img.astype(np.float32) / 255.0, int(meta["U"]), int(meta["V"]))
