"""Hot numeric kernels with a numba lane and a pure-numpy fallback.

The temporal convolution is the only custom inner loop in the engine
(matrix products go through BLAS and stay in numpy). Both lanes implement
the same contract: same-length 1-D convolution over the time axis with
edge-replication padding, so a constant-in-time signal stays constant.

Lane selection happens once at import: set ``CYCLEADAPT_NO_NUMBA=1`` (or
``NUMBA_DISABLE_JIT=1``) to force the numpy lane. ``ACTIVE_LANE`` records
the choice; ``benchmarks/bench_kernels.py`` times the two lanes against
each other.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_disabled() -> bool:
    for var in ("CYCLEADAPT_NO_NUMBA", "NUMBA_DISABLE_JIT"):
        if os.environ.get(var, "").strip() not in ("", "0"):
            return True
    return False


def _clipped_index(t: int, length: int) -> int:
    if t < 0:
        return 0
    if t >= length:
        return length - 1
    return t


# ---------------------------------------------------------------- numpy lane


def conv1d_forward_numpy(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (B,T,Ci), w (K,Ci,Co), b (Co,) -> y (B,T,Co)."""
    B, T, _ = x.shape
    K = w.shape[0]
    r = K // 2
    y = np.broadcast_to(b, (B, T, w.shape[2])).copy()
    base = np.arange(T)
    for k in range(K):
        idx = np.clip(base + k - r, 0, T - 1)
        y += x[:, idx, :] @ w[k]
    return y


def conv1d_backward_numpy(x, w, grad):
    """Gradients of conv1d_forward w.r.t. x, w and b given upstream grad."""
    B, T, Ci = x.shape
    K = w.shape[0]
    r = K // 2
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = grad.sum(axis=(0, 1))
    base = np.arange(T)
    for k in range(K):
        idx = np.clip(base + k - r, 0, T - 1)
        shifted = x[:, idx, :]
        dw[k] = np.einsum("btc,bto->co", shifted, grad)
        contrib = grad @ w[k].T
        raw = base + k - r
        interior = (raw >= 0) & (raw < T)
        # interior indices are unique, fancy += is safe there
        dx[:, raw[interior], :] += contrib[:, interior, :]
        low = raw < 0
        if low.any():
            dx[:, 0, :] += contrib[:, low, :].sum(axis=1)
        high = raw >= T
        if high.any():
            dx[:, T - 1, :] += contrib[:, high, :].sum(axis=1)
    return dx, dw, db


# ---------------------------------------------------------------- numba lane


def _build_numba_lane():
    from numba import njit

    @njit(cache=True)
    def fwd(x, w, b):
        B, T, Ci = x.shape
        K, _, Co = w.shape
        r = K // 2
        y = np.empty((B, T, Co))
        for bi in range(B):
            for t in range(T):
                for co in range(Co):
                    y[bi, t, co] = b[co]
                for k in range(K):
                    ts = t + k - r
                    if ts < 0:
                        ts = 0
                    elif ts >= T:
                        ts = T - 1
                    for ci in range(Ci):
                        xv = x[bi, ts, ci]
                        for co in range(Co):
                            y[bi, t, co] += xv * w[k, ci, co]
        return y

    @njit(cache=True)
    def bwd(x, w, grad):
        B, T, Ci = x.shape
        K, _, Co = w.shape
        r = K // 2
        dx = np.zeros((B, T, Ci))
        dw = np.zeros((K, Ci, Co))
        db = np.zeros(Co)
        for bi in range(B):
            for t in range(T):
                for co in range(Co):
                    db[co] += grad[bi, t, co]
                for k in range(K):
                    ts = t + k - r
                    if ts < 0:
                        ts = 0
                    elif ts >= T:
                        ts = T - 1
                    for ci in range(Ci):
                        xv = x[bi, ts, ci]
                        acc = 0.0
                        for co in range(Co):
                            g = grad[bi, t, co]
                            dw[k, ci, co] += xv * g
                            acc += g * w[k, ci, co]
                        dx[bi, ts, ci] += acc
        return dx, dw, db

    return fwd, bwd


if _numba_disabled():
    ACTIVE_LANE = "numpy"
    conv1d_forward = conv1d_forward_numpy
    conv1d_backward = conv1d_backward_numpy
else:
    try:
        conv1d_forward, conv1d_backward = _build_numba_lane()
        ACTIVE_LANE = "numba"
    except ImportError:
        ACTIVE_LANE = "numpy"
        conv1d_forward = conv1d_forward_numpy
        conv1d_backward = conv1d_backward_numpy
