"""Tensor container, counter-based randomness and the TNS1 on-disk format.

Tensors are plain ``numpy`` arrays. Everything persisted or handed between
modules is float32; numerically sensitive code upcasts to float64 while it
works and casts back on the way out.

TNS1 layout::

    TNS1 f32 <ndim> <d0> ... <dk>\\n
    <prod(dims) little-endian IEEE-754 float32 values, row-major>
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

MAGIC = b"TNS1"
_LE_F32 = np.dtype("<f4")


class TensorFormatError(ValueError):
    """Base class for malformed TNS1 content."""


class BadMagicError(TensorFormatError):
    pass


class PayloadMismatchError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


def encode_tns(t) -> bytes:
    arr = np.asarray(t)
    if arr.ndim == 0 or 0 in arr.shape:
        raise ValueError("tensor dims must all be positive")
    arr = np.ascontiguousarray(arr, dtype=_LE_F32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("refusing to write non-finite values")
    header = "TNS1 f32 {} {}\n".format(arr.ndim, " ".join(str(d) for d in arr.shape))
    return header.encode("ascii") + arr.tobytes()


def decode_tns(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one TNS1 tensor starting at ``offset``; return it and the end offset."""
    nl = buf.find(b"\n", offset)
    if nl < 0:
        if buf[offset:offset + 4] != MAGIC:
            raise BadMagicError("missing TNS1 magic")
        raise TensorFormatError("unterminated header")
    tokens = buf[offset:nl].split(b" ")
    if tokens[0] != MAGIC:
        raise BadMagicError(f"bad magic {tokens[0][:8]!r}")
    if len(tokens) < 3 or tokens[1] != b"f32":
        raise TensorFormatError("expected dtype token 'f32'")
    try:
        ndim = int(tokens[2])
        dims = [int(tok) for tok in tokens[3:]]
    except ValueError as exc:
        raise TensorFormatError(f"unparseable header: {exc}") from None
    if ndim < 1 or len(dims) != ndim or any(d <= 0 for d in dims):
        raise TensorFormatError(f"inconsistent dims {dims} for ndim {ndim}")
    count = int(np.prod(dims))
    start = nl + 1
    end = start + 4 * count
    if end > len(buf):
        raise PayloadMismatchError(
            f"payload has {len(buf) - start} bytes, header requires {4 * count}")
    data = np.frombuffer(buf, dtype=_LE_F32, count=count, offset=start)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("payload contains non-finite values")
    return data.astype(np.float32).reshape(dims), end


def tns_write(t, path) -> None:
    blob = encode_tns(t)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise OSError(f"cannot write tensor to {os.fspath(path)}: {exc.strerror}") from exc


def tns_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tns(buf)
    if end != len(buf):
        raise PayloadMismatchError(
            f"{os.fspath(path)}: {len(buf) - end} trailing bytes after payload")
    return arr


@dataclass
class RngState:
    """Counter-based random stream.

    Each draw builds a Philox generator keyed on ``(seed, counter)`` and then
    bumps the counter, so a draw's output depends only on the state it was
    taken from, never on how much was drawn before it.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(self.counter) & 0xFFFFFFFFFFFFFFFF

    def generator(self) -> np.random.Generator:
        key = self.seed | (self.counter << 64)
        self.counter = (self.counter + 1) & 0xFFFFFFFFFFFFFFFF
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, n: int) -> list["RngState"]:
        """Derive ``n`` independent child streams and advance this one."""
        ss = np.random.SeedSequence([self.seed, self.counter, n])
        self.counter = (self.counter + 1) & 0xFFFFFFFFFFFFFFFF
        return [RngState(int(s)) for s in ss.generate_state(n, dtype=np.uint64)]

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)


def rng_gaussian(rng: RngState, dims, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise ValueError(f"stddev must be non-negative, got {stddev}")
    z = rng.generator().standard_normal(tuple(np.atleast_1d(dims)))
    return as_tensor(mean + stddev * z)


def rng_uniform(rng: RngState, lo: float, hi: float) -> float:
    if lo > hi:
        raise ValueError(f"empty interval [{lo}, {hi})")
    u = rng.generator().random()
    x = lo + (hi - lo) * u
    # guard the open upper bound against rounding
    return float(lo if x >= hi else x)
