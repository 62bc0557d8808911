"""Dense float64 tensors with tape-based reverse-mode autodiff.

Layout is row-major and channels-last: spatial tensors are (h, w, c).
Every differentiable op records one tape entry; backward walks the tape
in exact reverse recording order, so recording order doubles as the
topological order of the graph.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, NumericError, ShapeError

_EPS_LOG = 1e-12


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    ``grad`` is allocated lazily: leaves carry a zeroed buffer once they
    are marked ``requires_grad``; intermediates never expose ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._on_tape = False

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Entry:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; reset once per optimization step."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.enabled = True

    def record(self, output: Tensor, inputs: Sequence[Tensor],
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        output._on_tape = True
        self.entries.append(_Entry(output, inputs, backward_fn))

    def reset(self):
        self.entries.clear()

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        Intermediate gradients live in a local dict, so separate backward
        calls over the same tape add up linearly in the leaves.
        """
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            og = grads.pop(id(entry.output), None)
            if og is None:
                continue
            input_grads = entry.backward_fn(og)
            for inp, g in zip(entry.inputs, input_grads):
                if g is None:
                    continue
                if inp._on_tape:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
                elif inp.requires_grad:
                    inp.grad += g


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


class no_grad:
    """Context manager suspending tape recording (eval-mode forward)."""

    def __enter__(self):
        self._prev = _TAPE.enabled
        _TAPE.enabled = False
        return self

    def __exit__(self, *exc):
        _TAPE.enabled = self._prev
        return False


def _track(inputs) -> bool:
    return _TAPE.enabled and any(t.requires_grad or t._on_tape for t in inputs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape` by summing expanded axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by op '{op}'")


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops

def _broadcastable(a: tuple, b: tuple) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


def _binary(a: Tensor, b: Tensor, op: str, fwd, bwd):
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(fwd(a.data, b.data))
    if _track((a, b)):
        def backward(og):
            ga, gb = bwd(og, a.data, b.data)
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))
        _TAPE.record(out, (a, b), backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda og, x, y: (og, og))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda og, x, y: (og, -og))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda og, x, y: (og * y, og * x))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _binary(a, b, "div", lambda x, y: x / y,
                  lambda og, x, y: (og / y, -og * x / (y * y)))
    _check_finite(out.data, "div")
    return out


def sqrt(a: Tensor) -> Tensor:
    s = np.sqrt(a.data)
    _check_finite(s, "sqrt")
    out = Tensor(s)
    if _track((a,)):
        _TAPE.record(out, (a,), lambda og: (og * 0.5 / s,))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    if _track((a,)):
        _TAPE.record(out, (a,), lambda og: (og * c,))
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + float(c))
    if _track((a,)):
        _TAPE.record(out, (a,), lambda og: (og,))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    if _track((a,)):
        mask = a.data > 0.0
        _TAPE.record(out, (a,), lambda og: (og * mask,))
    return out


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = np.where(a.data >= 0,
                     1.0 / (1.0 + np.exp(-np.abs(a.data))),
                     np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    _check_finite(s, "sigmoid")
    out = Tensor(s)
    if _track((a,)):
        _TAPE.record(out, (a,), lambda og: (og * s * (1.0 - s),))
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    _check_finite(e, "exp")
    out = Tensor(e)
    if _track((a,)):
        _TAPE.record(out, (a,), lambda og: (og * e,))
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.data)
    _check_finite(v, "log")
    out = Tensor(v)
    if _track((a,)):
        _TAPE.record(out, (a,), lambda og: (og / a.data,))
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    out = Tensor(np.maximum(a.data, lo))
    if _track((a,)):
        mask = a.data > lo
        _TAPE.record(out, (a,), lambda og: (og * mask,))
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """clip(a, lo, hi); gradient passes only strictly inside the bounds."""
    out = Tensor(np.clip(a.data, lo, hi))
    if _track((a,)):
        mask = (a.data > lo) & (a.data < hi)
        _TAPE.record(out, (a,), lambda og: (og * mask,))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if _track((a,)):
        orig = a.shape
        _TAPE.record(out, (a,), lambda og: (og.reshape(orig),))
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    if _track((a,)):
        shp = a.shape
        _TAPE.record(out, (a,), lambda og: (np.full(shp, og),))
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(tsum(a), 1.0 / n)


def element(a: Tensor, index: int) -> Tensor:
    """Scalar pick from a 1-d tensor (for cross-entropy label lookup)."""
    if a.data.ndim != 1:
        raise ShapeError(f"element expects a vector, got shape {a.shape}")
    out = Tensor(a.data[index])
    if _track((a,)):
        n = a.data.shape[0]

        def backward(og):
            g = np.zeros(n)
            g[index] = og
            return (g,)
        _TAPE.record(out, (a,), backward)
    return out


def dot(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or v.data.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"dot: incompatible shapes {u.shape} and {v.shape}")
    out = Tensor(np.dot(u.data, v.data))
    if _track((u, v)):
        _TAPE.record(out, (u, v), lambda og: (og * v.data, og * u.data))
    return out


def l2_norm_sq(v: Tensor) -> Tensor:
    out = Tensor(np.sum(v.data * v.data))
    if _track((v,)):
        _TAPE.record(out, (v,), lambda og: (og * 2.0 * v.data,))
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    if _track((a, b)):
        _TAPE.record(out, (a, b),
                     lambda og: (og @ b.data.T, a.data.T @ og))
    return out


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Vector-matrix product: x[d_in] @ w[d_in, d_out] -> [d_out]."""
    return reshape(matmul(reshape(x, (1, -1)), w), (-1,))


def softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {a.shape}")
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max()
    e = np.exp(z)
    p = e / e.sum()
    out = Tensor(p)
    if _track((a,)):
        _TAPE.record(out, (a,), lambda og: (p * (og - np.dot(p, og)),))
    return out


# ---------------------------------------------------------------------------
# spatial ops (channels-last)

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[h,w,c_in] with kernel[k,k,c_in,c_out]."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {kcin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.zeros((hp, wp, cin))
    xp[padding:padding + h, padding:padding + w] = x.data
    cols = np.empty((ho, wo, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i:i + ho * stride:stride,
                                     j:j + wo * stride:stride, :]
    cols2 = cols.reshape(ho * wo, kh * kw * cin)
    wm = kernel.data.reshape(kh * kw * cin, cout)
    out = Tensor((cols2 @ wm).reshape(ho, wo, cout))

    if _track((x, kernel)):
        def backward(og):
            ogf = og.reshape(ho * wo, cout)
            gw = (cols2.T @ ogf).reshape(kh, kw, cin, cout)
            dcols = (ogf @ wm.T).reshape(ho, wo, kh, kw, cin)
            gxp = np.zeros((hp, wp, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[i:i + ho * stride:stride,
                        j:j + wo * stride:stride, :] += dcols[:, :, i, j, :]
            gx = gxp[padding:padding + h, padding:padding + w]
            return (gx, gw)
        _TAPE.record(out, (x, kernel), backward)
    return out


def global_avg_pool_spatial(x: Tensor) -> Tensor:
    """(h,w,c) -> (c,): mean over all spatial positions per channel."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool_spatial expects rank 3, got {x.shape}")
    h, w, c = x.shape
    out = Tensor(x.data.mean(axis=(0, 1)))
    if _track((x,)):
        inv = 1.0 / (h * w)
        _TAPE.record(out, (x,),
                     lambda og: (np.broadcast_to(og * inv, (h, w, c)).copy(),))
    return out


def avg_pool_channels(x: Tensor) -> Tensor:
    """(h,w,c) -> (h,w,1): per-pixel mean over channels."""
    if x.data.ndim != 3:
        raise ShapeError(f"avg_pool_channels expects rank 3, got {x.shape}")
    h, w, c = x.shape
    out = Tensor(x.data.mean(axis=2, keepdims=True))
    if _track((x,)):
        inv = 1.0 / c
        _TAPE.record(out, (x,),
                     lambda og: (np.broadcast_to(og * inv, (h, w, c)).copy(),))
    return out


def upsample_nearest(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """(h',w',1) -> (target_h,target_w,1) by nearest-neighbor replication."""
    if x.data.ndim != 3 or x.shape[2] != 1:
        raise ShapeError(f"upsample_nearest expects (h,w,1), got {x.shape}")
    hs, ws, _ = x.shape
    ri = (np.arange(target_h) * hs) // target_h
    ci = (np.arange(target_w) * ws) // target_w
    out = Tensor(x.data[ri][:, ci])
    if _track((x,)):
        def backward(og):
            g = np.zeros((hs, ws, 1))
            np.add.at(g, (ri[:, None], ci[None, :]), og)
            return (g,)
        _TAPE.record(out, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# batch normalization

class BnState:
    """Running statistics for one batchnorm layer (not learnable)."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BnState":
        other = BnState(self.mean.shape[0], self.momentum, self.eps)
        other.mean = self.mean.copy()
        other.var = self.var.copy()
        return other


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BnState,
              training: bool) -> Tensor:
    """Per-feature normalization of a batch x[n,d].

    Training mode uses batch statistics (biased variance) and updates the
    running stats in place; eval mode normalizes with the running stats.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm expects (n,d), got {x.shape}")
    n, d = x.shape
    eps = state.eps
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.mean = (1.0 - m) * state.mean + m * mu
        state.var = (1.0 - m) * state.var + m * var
    else:
        mu = state.mean
        var = state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)
    _check_finite(out.data, "batchnorm")

    if _track((x, gamma, beta)):
        def backward(og):
            ggamma = (og * xhat).sum(axis=0)
            gbeta = og.sum(axis=0)
            if training:
                gx = (gamma.data * inv_std / n) * (
                    n * og - gbeta - xhat * ggamma)
            else:
                gx = og * gamma.data * inv_std
            return (gx, ggamma, gbeta)
        _TAPE.record(out, (x, gamma, beta), backward)
    return out


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack n vectors of identical shape (d,) into an (n,d) matrix."""
    if not vectors:
        raise ShapeError("stack_rows: empty input")
    d = vectors[0].shape
    for v in vectors:
        if v.shape != d:
            raise ShapeError(f"stack_rows: ragged shapes {d} vs {v.shape}")
    out = Tensor(np.stack([v.data for v in vectors]))
    if _track(vectors):
        def backward(og):
            return tuple(og[i] for i in range(len(vectors)))
        _TAPE.record(out, tuple(vectors), backward)
    return out


def concat_rows(matrices: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D blocks along axis 0."""
    if not matrices:
        raise ShapeError("concat_rows: empty input")
    for m in matrices:
        if m.data.ndim != 2 or m.shape[1] != matrices[0].shape[1]:
            raise ShapeError("concat_rows: inputs must be (n_i, d) with a "
                             "common d")
    out = Tensor(np.concatenate([m.data for m in matrices], axis=0))
    if _track(matrices):
        counts = [m.shape[0] for m in matrices]
        bounds = np.cumsum([0] + counts)

        def backward(og):
            return tuple(og[bounds[i]:bounds[i + 1]]
                         for i in range(len(counts)))
        _TAPE.record(out, tuple(matrices), backward)
    return out


def row_block(a: Tensor, lo: int, hi: int) -> Tensor:
    """Slice rows [lo, hi) of a matrix."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_block expects a matrix, got {a.shape}")
    if not 0 <= lo <= hi <= a.shape[0]:
        raise ShapeError(f"row_block [{lo}, {hi}) out of range for {a.shape}")
    out = Tensor(a.data[lo:hi])
    if _track((a,)):
        shp = a.shape

        def backward(og):
            g = np.zeros(shp)
            g[lo:hi] = og
            return (g,)
        _TAPE.record(out, (a,), backward)
    return out


def row(a: Tensor, i: int) -> Tensor:
    """Extract row i of a matrix as a vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"row expects a matrix, got {a.shape}")
    out = Tensor(a.data[i])
    if _track((a,)):
        shp = a.shape

        def backward(og):
            g = np.zeros(shp)
            g[i] = og
            return (g,)
        _TAPE.record(out, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, inputs: Sequence[Tensor], eps: float = 1e-6,
               tol: float = 1e-5, atol: float = 1e-7) -> dict:
    """Compare reverse-mode gradients of scalar f(inputs) to central differences.

    Returns a report dict; never raises on mismatch. `f` must be
    deterministic and must read the inputs' current data each call.
    Pairs where both gradients fall below `atol` count as agreeing: the
    central-difference estimate of a truly-zero gradient is pure
    floating-point noise, so a relative comparison is meaningless there.
    """
    tape = active_tape()
    saved = tape.entries
    tape.entries = []
    for t in inputs:
        t.zero_grad()
    out = f()
    tape.backward(out)
    analytic = [t.grad.copy() for t in inputs]
    tape.entries = saved

    failures = []
    max_rel = 0.0
    with no_grad():
        for pi, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = f().item()
                flat[j] = orig - eps
                fm = f().item()
                flat[j] = orig
                numeric = (fp - fm) / (2.0 * eps)
                a = analytic[pi].reshape(-1)[j]
                if abs(a) < atol and abs(numeric) < atol:
                    continue
                denom = max(abs(a), abs(numeric), 1e-8)
                rel = abs(a - numeric) / denom
                max_rel = max(max_rel, rel)
                if rel > tol:
                    failures.append((pi, j, a, numeric, rel))
    return {"max_rel_error": max_rel, "tol": tol, "passed": not failures,
            "failures": failures,
            "n_params": int(sum(t.data.size for t in inputs))}


# ---------------------------------------------------------------------------
# flat binary serialization ("DTN1")

_MAGIC = b"DTN1"


def write_array(fh, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.astype("<f8").tobytes())


def read_array(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(fh, count * 8)
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor payload: wanted {n} bytes, got {len(buf)}")
    return buf
