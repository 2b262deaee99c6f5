"""Minimal dense reverse-mode autodiff over float64 numpy arrays.

Graphs are built define-by-run: every op returns a new Tensor holding the
op record (parents + backward closure), so the node list is topologically
ordered by construction and rebuilt per minibatch. Every op validates that
its output is finite; NaN/Inf raises ``NonFiniteError`` instead of
propagating.

The gradient-reversal op is a first-class node with a per-invocation
reversal weight: identity in the forward pass, ``-lam`` times the upstream
gradient in the backward pass.
"""

from __future__ import annotations

import binascii
import json
import struct
from typing import Callable, Sequence

import numpy as np

from .kernels import conv1d_backward, conv1d_forward

LOG_FLOOR = 1e-12


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


def _ensure_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense float64 array plus the op record that produced it."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output; visits each node once."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {self.shape}")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # sugar so loss code reads naturally
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g back to the given (possibly broadcast) shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data
    _ensure_finite(out_data, "add")

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data
    _ensure_finite(out_data, "sub")

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(-g)

    return Tensor(-a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        return _scale(_as_tensor(a), float(b))
    if isinstance(a, (int, float)):
        return _scale(_as_tensor(b), float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data
    _ensure_finite(out_data, "mul")

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def _scale(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c
    _ensure_finite(out_data, "scale")

    def bwd(g):
        a._accumulate(g * c)

    return Tensor(out_data, (a,), bwd)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _scale(_as_tensor(a), 1.0 / float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data
    _ensure_finite(out_data, "div")

    def bwd(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * out_data / b.data, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    _ensure_finite(out_data, "matmul")

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor(out_data, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        a._accumulate(g * (a.data > 0.0))

    return Tensor(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    _ensure_finite(out_data, "sigmoid")

    def bwd(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor(out_data, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis, computed with max-subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    _ensure_finite(out_data, "softmax")

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return Tensor(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    """log with the argument clamped to >= LOG_FLOOR.

    The derivative is taken through the clamp: zero where the input sat
    below the floor, 1/x elsewhere, so analytic and finite-difference
    gradients agree on the function actually computed.
    """
    clamped = np.maximum(a.data, LOG_FLOOR)
    out_data = np.log(clamped)
    _ensure_finite(out_data, "log")

    def bwd(g):
        a._accumulate(np.where(a.data > LOG_FLOOR, g / clamped, 0.0))

    return Tensor(out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    _ensure_finite(out_data, "exp")

    def bwd(g):
        a._accumulate(g * out_data)

    return Tensor(out_data, (a,), bwd)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    out_data = a.data.mean(axis=axis)
    _ensure_finite(out_data, "mean")
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            a._accumulate(np.full_like(a.data, g / count))
        else:
            a._accumulate(np.expand_dims(g, axis).repeat(count, axis) / count)

    return Tensor(out_data, (a,), bwd)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out_data = a.data.sum(axis=axis)
    _ensure_finite(out_data, "sum")

    def bwd(g):
        if axis is None:
            a._accumulate(np.full_like(a.data, g))
        else:
            a._accumulate(np.expand_dims(g, axis).repeat(a.data.shape[axis], axis))

    return Tensor(out_data, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    _ensure_finite(out_data, "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return Tensor(out_data, tuple(tensors), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor(out_data, (a,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx)
    n = a.data.shape[0]
    if idx.shape != (n,):
        raise ValueError(f"index shape {idx.shape} does not match {n} rows")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= a.data.shape[1]:
        raise ValueError("row index out of range")
    rows = np.arange(n)
    out_data = a.data[rows, idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        a._accumulate(full)

    return Tensor(out_data, (a,), bwd)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity per row for 2-D inputs, scalar for 1-D vectors."""
    single = u.data.ndim == 1
    ud = u.data[None, :] if single else u.data
    vd = v.data[None, :] if single else v.data
    if ud.shape != vd.shape:
        raise ValueError(f"cosine_sim shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(ud, axis=1)
    nv = np.linalg.norm(vd, axis=1)
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise ValueError("zero-norm vector in cosine similarity")
    s = (ud * vd).sum(axis=1) / (nu * nv)
    out_data = s[0] if single else s
    _ensure_finite(out_data, "cosine_sim")

    def bwd(g):
        gr = np.atleast_1d(g)
        du = gr[:, None] * (vd / (nu * nv)[:, None] - s[:, None] * ud / (nu**2)[:, None])
        dv = gr[:, None] * (ud / (nu * nv)[:, None] - s[:, None] * vd / (nv**2)[:, None])
        u._accumulate(du[0] if single else du)
        v._accumulate(dv[0] if single else dv)

    return Tensor(out_data, (u, v), bwd)


def temporal_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-length 1-D convolution over the time axis of (B,T,C) clips.

    Edge frames are replicated for padding, so constant-in-time inputs map
    to constant-in-time outputs of the same value for any clip length.
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ValueError("temporal_conv expects x (B,T,Ci) and w (K,Ci,Co)")
    K = w.data.shape[0]
    if x.data.shape[1] < K:
        raise ValueError(f"clip length {x.data.shape[1]} shorter than kernel size {K}")
    if x.data.shape[2] != w.data.shape[1]:
        raise ValueError("channel mismatch between clip and kernel")
    out_data = conv1d_forward(x.data, w.data, b.data)
    _ensure_finite(out_data, "temporal_conv")

    def bwd(g):
        dx, dw, db = conv1d_backward(x.data, w.data, np.ascontiguousarray(g))
        x._accumulate(dx)
        w._accumulate(dw)
        b._accumulate(db)

    return Tensor(out_data, (x, w, b), bwd)


def grl(a: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, -lam times the gradient backward."""
    out_data = a.data

    def bwd(g):
        a._accumulate(-lam * g)

    return Tensor(out_data, (a,), bwd)


# ------------------------------------------------------------ gradient check


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def finite_diff_check(func: Callable[[], Tensor], wrt: Sequence[Tensor],
                      step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``func`` must rebuild its graph from the current ``.data`` of the
    tensors in ``wrt`` on every call. The error for each coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over all
    coordinates of all tensors is returned.
    """
    wrt = list(wrt)
    zero_grads(wrt)
    out = func()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    worst = 0.0
    for t, ga in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = func().item()
            flat[i] = orig - step
            f_minus = func().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------- checkpoint

_CKPT_MAGIC = b"CYCLCKPT"
_CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted checkpoint file."""


def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """Write named parameters to a versioned, checksummed binary file.

    Layout: magic, u32 version, u32 header length, header JSON listing
    (name, shape) in order plus user metadata, the raw little-endian
    float64 buffers concatenated in listed order, and a trailing u32 crc32
    of everything after the magic. Round trips are bit-exact.
    """
    names = list(params)
    header = json.dumps(
        {"meta": meta or {}, "params": [[n, list(params[n].data.shape)] for n in names]},
        sort_keys=True,
    ).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", _CKPT_VERSION)
    body += struct.pack("<I", len(header))
    body += header
    for n in names:
        body += np.ascontiguousarray(params[n].data, dtype="<f8").tobytes()
    crc = binascii.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as (name -> array, meta); verifies the crc."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_CKPT_MAGIC) + 12 or blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, tail = blob[len(_CKPT_MAGIC):-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", tail)
    if binascii.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checkpoint checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 0)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", body, 4)
    header = json.loads(body[8: 8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    params: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float64).copy()
        offset += count * 8
    if offset != len(body):
        raise CheckpointError("checkpoint has trailing or missing data")
    return params, header["meta"]
