"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Usage::

    tape = Tape()
    m = tape.leaf(mask_array)
    loss = ops.sum(ops.mul(m, k))
    grads = tape.backward(loss)      # {leaf: gradient}

Every op accepts plain arrays or :class:`Var` objects. When none of its
inputs is a ``Var`` the op is evaluated directly and a plain array comes
back, so the same code serves the differentiable and the non-differentiable
paths. Tapes are not thread-safe; use one tape per worker.
"""

from __future__ import annotations

import numpy as np

_DTYPE = np.float64


class DisconnectedError(RuntimeError):
    """The loss does not depend on any leaf of the tape."""


class Var:
    __slots__ = ("value", "tape", "index", "parents", "vjp", "kind")

    def __init__(self, value, tape, parents=(), vjp=None, kind="op"):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.kind = kind
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.kind}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []
        # rectifier / nearest-neighbour decisions, for locating kinks
        self.events: list[np.ndarray] = []

    def leaf(self, value) -> Var:
        return Var(np.asarray(value, dtype=_DTYPE), self, kind="leaf")

    def backward(self, loss: Var, seed=None) -> dict[Var, np.ndarray]:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise DisconnectedError("loss is not a node of this tape")
        grads: dict[int, np.ndarray] = {
            loss.index: np.ones_like(loss.value) if seed is None else np.asarray(seed, _DTYPE)}
        out = {}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.kind == "leaf":
                out[node] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        if not out:
            raise DisconnectedError("loss is not connected to any leaf")
        return out


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _node(tape, out, inputs, vjp):
    parents = tuple(x if isinstance(x, Var) else None for x in inputs)
    return Var(out, tape, parents, vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise -------------------------------------------------------------

def add(a, b):
    out = value(a) + value(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return _node(tape, out, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    out = value(a) - value(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return _node(tape, out, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(tape, out, (a, b),
                 lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)))


def scale(a, k: float):
    out = value(a) * k
    tape = _tape_of(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (g * k,))


def cos(a):
    va = value(a)
    out = np.cos(va)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (-g * np.sin(va),))


def atan2(y, x):
    """Two-argument arctangent; the gradient at the origin is defined as 0."""
    vy, vx = value(y), value(x)
    out = np.arctan2(vy, vx)
    tape = _tape_of(y, x)
    if tape is None:
        return out
    r2 = vx * vx + vy * vy
    safe = np.where(r2 > 0, r2, 1.0)
    dy = np.where(r2 > 0, vx / safe, 0.0)
    dx = np.where(r2 > 0, -vy / safe, 0.0)
    return _node(tape, out, (y, x), lambda g: (g * dy, g * dx))


def wrap_2pi(a):
    """Map angles into [0, 2*pi); piecewise identity, so the gradient passes through."""
    va = value(a)
    out = np.mod(va, 2 * np.pi)
    out = np.where(out >= 2 * np.pi, 0.0, out)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (g,))


def rectify(a):
    """max(0, a) with subgradient 0 at a == 0."""
    va = value(a)
    on = va > 0
    out = np.where(on, va, 0.0)
    tape = _tape_of(a)
    if tape is None:
        return out
    tape.events.append(on)
    return _node(tape, out, (a,), lambda g: (g * on,))


def clamp(a, lo: float, hi: float):
    va = value(a)
    inside = (va >= lo) & (va <= hi)
    out = np.clip(va, lo, hi)
    tape = _tape_of(a)
    if tape is None:
        return out
    tape.events.append(inside)
    return _node(tape, out, (a,), lambda g: (g * inside,))


def smooth_l1(pred, target, delta: float = 1.0):
    """Elementwise Huber-style loss, quadratic below ``delta`` and linear above."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    vp, vt = value(pred), value(target)
    if np.shape(vp) != np.shape(vt):
        raise ValueError(f"shape mismatch {np.shape(vp)} vs {np.shape(vt)}")
    d = vp - vt
    ad = np.abs(d)
    lin = ad >= delta
    out = np.where(lin, ad - 0.5 * delta, d * d / (2 * delta))
    tape = _tape_of(pred, target)
    if tape is None:
        return out
    dd = np.where(lin, np.sign(d), d / delta)
    return _node(tape, out, (pred, target), lambda g: (g * dd, -g * dd))


# --- shape / reductions ------------------------------------------------------

def reshape(a, shape):
    va = value(a)
    out = va.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    s = va.shape
    return _node(tape, out, (a,), lambda g: (g.reshape(s),))


def take(a, index):
    """``a[index]`` for a basic (non-fancy) index."""
    va = value(a)
    out = va[index]
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(va)
        full[index] = g
        return (full,)
    return _node(tape, out, (a,), vjp)


def concat(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _node(tape, out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum(a):  # noqa: A001 - mirrors numpy naming
    va = value(a)
    out = np.asarray(va.sum())
    tape = _tape_of(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (np.full_like(va, g),))


def mean(a):
    return scale(sum(a), 1.0 / np.size(value(a)))


def view_average(a):
    """Mean over the two aperture axes of ``[..., U, V, H, W]``."""
    va = value(a)
    n = va.shape[-4] * va.shape[-3]
    out = va.sum(axis=(-4, -3)) / n
    tape = _tape_of(a)
    if tape is None:
        return out
    shape = va.shape

    def vjp(g):
        g = np.expand_dims(g / n, axis=(-4, -3))
        return (np.broadcast_to(g, shape).copy(),)
    return _node(tape, out, (a,), vjp)


def gather(a, flat_index):
    """``a.ravel()[flat_index]``; the backward pass scatter-adds repeated indices."""
    va = value(a)
    out = va.reshape(-1)[flat_index]
    tape = _tape_of(a)
    if tape is None:
        return out
    size, shape = va.size, va.shape

    def vjp(g):
        acc = np.bincount(flat_index.reshape(-1), weights=g.reshape(-1), minlength=size)
        return (acc.reshape(shape),)
    return _node(tape, out, (a,), vjp)


# --- convolution ---------------------------------------------------------------

def _reflect_pad_backward(gp):
    """Fold the gradient of a 1-pixel reflect-padded [C, H+2, W+2] map back to [C, H, W]."""
    g = gp[:, 1:-1, :].copy()
    g[:, 1, :] += gp[:, 0, :]
    g[:, -2, :] += gp[:, -1, :]
    out = g[:, :, 1:-1].copy()
    out[:, :, 1] += g[:, :, 0]
    out[:, :, -2] += g[:, :, -1]
    return out


def conv2d(x, w, b, stride: int = 1):
    """3x3 convolution of ``x`` [Cin, H, W] with reflection padding.

    ``w`` is [Cout, Cin, 3, 3], ``b`` is [Cout]. Output is
    [Cout, ceil(H/stride), ceil(W/stride)].
    """
    vx, vw, vb = value(x), value(w), value(b)
    if vx.ndim != 3 or vw.shape[1] != vx.shape[0] or vw.shape[2:] != (3, 3):
        raise ValueError(f"conv shape mismatch: x {vx.shape}, w {vw.shape}")
    if min(vx.shape[1:]) < 2:
        raise ValueError("reflection padding needs spatial extent >= 2")
    xp = np.pad(vx, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [Cin, Ho, Wo, 3, 3]
    out = np.tensordot(vw, win, axes=([1, 2, 3], [0, 3, 4])) + vb[:, None, None]
    tape = _tape_of(x, w, b)
    if tape is None:
        return out
    ho, wo = out.shape[1:]

    def vjp(g):
        gw = np.tensordot(g, win, axes=([1, 2], [1, 2])) if isinstance(w, Var) else None
        gb = g.sum(axis=(1, 2)) if isinstance(b, Var) else None
        gx = None
        if isinstance(x, Var):
            gp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.tensordot(
                        vw[:, :, i, j], g, axes=([0], [0]))
            gx = _reflect_pad_backward(gp)
        return gx, gw, gb
    return _node(tape, out, (x, w, b), vjp)


def upsample2(a, out_hw):
    """Nearest-neighbour 2x upsampling of [C, h, w], cropped to ``out_hw``."""
    va = value(a)
    hh, ww = out_hw
    out = va.repeat(2, axis=1).repeat(2, axis=2)[:, :hh, :ww]
    tape = _tape_of(a)
    if tape is None:
        return out
    shape = va.shape

    def vjp(g):
        full = np.zeros((shape[0], 2 * shape[1], 2 * shape[2]), dtype=g.dtype)
        full[:, :hh, :ww] = g
        return (full.reshape(shape[0], shape[1], 2, shape[2], 2).sum(axis=(2, 4)),)
    return _node(tape, out, (a,), vjp)
