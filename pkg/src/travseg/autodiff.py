"""Dense tensors with reverse-mode differentiation on an explicit tape.

Design constants of this engine, fixed so that finite-difference oracles
differentiate exactly the same function:

* fp32 is the production dtype, fp64 the verification dtype; ops never mix
  dtypes silently.
* GeLU is the tanh approximation with c0 = sqrt(2/pi), c1 = 0.044715.
* layer_norm epsilon is 1e-5, l2 row normalization epsilon is 1e-12
  (a norm floor of 1e-6, which maps zero rows to zero output).
* No implicit broadcasting: the only shape-extending ops are the explicit
  ones (`add_rowvec`, `broadcast_mul`, `compose_axes`, conv bias).
* Kernels are plain numpy with a fixed accumulation order, so identical
  inputs give bit-identical outputs.

Tapes are single-threaded; run independent tapes in separate processes if
parallelism is needed.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError, ValidationError

FP32 = np.float32
FP64 = np.float64

GELU_C0 = math.sqrt(2.0 / math.pi)
GELU_C1 = 0.044715
LAYER_NORM_EPS = 1e-5
L2_NORM_EPS = 1e-12

# Module-wide switch for the per-op finiteness assertion.  Kept on by
# default; the episodic hot loop may disable it and instead guard the loss
# and gradients each step (see harness).
_FINITE_CHECKS = True


@contextmanager
def finite_checks(enabled: bool):
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(arr.sum()):
        if np.isfinite(arr).all():  # sum overflowed but elements are fine
            return
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """n-dimensional real array, optionally participating in a tape.

    `data` is read-only after creation; `grad` is the only mutable slot
    (accumulation during backward). Optimizers rebind `data` rather than
    writing into it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if data.dtype not in (FP32, FP64):
            raise ValidationError(f"unsupported dtype {data.dtype}")
        if any(d <= 0 for d in data.shape):
            raise ShapeError(f"dimensions must be positive, got {data.shape}")
        _check_finite(data, "tensor creation")
        data.setflags(write=False)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def assign(self, new_data: np.ndarray) -> None:
        """Rebind the payload (optimizer updates). Shape and dtype are fixed."""
        if new_data.shape != self.data.shape or new_data.dtype != self.dtype:
            raise ShapeError("assign must preserve shape and dtype")
        _check_finite(new_data, "assign")
        new_data.setflags(write=False)
        self.data = new_data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False, dtype=FP32) -> Tensor:
    arr = np.array(values, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=FP32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def constant_like(t: Tensor, values) -> Tensor:
    return tensor(values, requires_grad=False, dtype=t.dtype)


# --------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of operations; inputs always precede outputs.

    Use as a context manager; ops executed inside record themselves when any
    input requires grad. `backward` may be called once.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every requires_grad tensor reachable from loss."""
        if loss.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise ContractError("tape already traversed")
        self._consumed = True
        loss.add_grad(np.ones((), dtype=loss.dtype))
        grads_seen = {id(loss)}
        for out, inputs, bwd in reversed(self.entries):
            if id(out) not in grads_seen or out.grad is None:
                continue
            for inp, g in zip(inputs, bwd(out.grad)):
                if g is None or not inp.requires_grad:
                    continue
                inp.add_grad(g.astype(inp.dtype, copy=False))
                grads_seen.add(id(inp))


_ACTIVE_TAPE: Tape | None = None


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation on the active tape."""
    if _ACTIVE_TAPE is None:
        raise ContractError("backward requires an active tape")
    _ACTIVE_TAPE.backward(loss)


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable, op: str) -> Tensor:
    """Wrap an op result; record on the active tape when gradients may flow."""
    _check_finite(data, op)
    track = _ACTIVE_TAPE is not None and any(i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        _ACTIVE_TAPE.entries.append((out, inputs, bwd))
    return out


def _same_dtype(op: str, *ts: Tensor) -> None:
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise ShapeError(f"{op}: dtype mismatch {d} vs {t.dtype}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} vs {b.shape}")
    _same_dtype(op, a, b)


# --------------------------------------------------------------------------
# Core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    _same_dtype("matmul", a, b)
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        return (g @ b.data.T if need_a else None,
                a.data.T @ g if need_b else None)

    return _emit(a.data @ b.data, (a, b), bwd, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, (x,), bwd, "softmax_rows")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = x.dtype.type(s)
    return _emit(x.data * s, (x,), lambda g: (g * s,), "scale")


def add_scalar(x: Tensor, s: float) -> Tensor:
    s = x.dtype.type(s)
    return _emit(x.data + s, (x,), lambda g: (g,), "add_scalar")


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[r,c] + v[c], the explicit row-broadcast used for biases."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: {x.shape} with {v.shape}")
    _same_dtype("add_rowvec", x, v)
    return _emit(x.data + v.data[None, :], (x, v), lambda g: (g, g.sum(axis=0)), "add_rowvec")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximate GeLU; the approximation is a constant of the build."""
    d = x.data
    inner = x.dtype.type(GELU_C0) * (d + x.dtype.type(GELU_C1) * d * d * d)
    t = np.tanh(inner)
    y = 0.5 * d * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * sech2 * dinner),)

    return _emit(y.astype(x.dtype, copy=False), (x,), bwd, "gelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis and apply the affine pair (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine {gamma.shape}/{beta.shape} for width {d}")
    _same_dtype("layer_norm", x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    y = xhat * gamma.data + beta.data

    def bwd(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * ivar
        return dx, dgamma, dbeta

    return _emit(y.astype(x.dtype, copy=False), (x, gamma, beta), bwd, "layer_norm")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape {x.shape} -> {shape}")
    old = x.shape
    return _emit(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(
        np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose",
    )


def concat_channels(*xs: Tensor) -> Tensor:
    """Concatenate along axis 0; remaining dims must agree exactly."""
    if len(xs) < 2:
        raise ShapeError("concat_channels needs at least two tensors")
    tail = xs[0].shape[1:]
    for t in xs[1:]:
        if t.shape[1:] != tail:
            raise ShapeError(f"concat_channels: trailing dims {t.shape[1:]} vs {tail}")
    _same_dtype("concat_channels", *xs)
    sizes = [t.shape[0] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(xs)))

    return _emit(np.concatenate([t.data for t in xs], axis=0), xs, bwd, "concat_channels")


def broadcast_mul(x: Tensor, m: Tensor) -> Tensor:
    """Modulate every channel of x[C,h,w] by the scalar map m[h,w]."""
    if x.data.ndim != 3 or m.data.ndim != 2 or x.shape[1:] != m.shape:
        raise ShapeError(f"broadcast_mul: {x.shape} with map {m.shape}")
    _same_dtype("broadcast_mul", x, m)

    def bwd(g):
        return g * m.data[None], (g * x.data).sum(axis=0)

    return _emit(x.data * m.data[None], (x, m), bwd, "broadcast_mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bwd(g):
        return (np.full(shape, g, dtype=x.dtype),)

    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape

    def bwd(g):
        return (np.full(shape, g / n, dtype=x.dtype),)

    return _emit(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bwd, "mean_all")


def l2_normalize_rows(x: Tensor, eps: float = L2_NORM_EPS) -> Tensor:
    """Rows scaled to unit norm; zero rows map to zero (epsilon guard)."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows needs 2-D, got {x.shape}")
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    y = x.data / n

    def bwd(g):
        dot = (g * x.data).sum(axis=1, keepdims=True)
        return (g / n - x.data * (dot / (n * n * n)),)

    return _emit(y.astype(x.dtype, copy=False), (x,), bwd, "l2_normalize_rows")


def rowmax(x: Tensor) -> Tensor:
    """Max over axis 1; ties route the gradient to the first maximum."""
    if x.data.ndim != 2:
        raise ShapeError(f"rowmax needs 2-D, got {x.shape}")
    idx = x.data.argmax(axis=1)
    rows = np.arange(x.shape[0])
    y = x.data[rows, idx]

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[rows, idx] = g
        return (dx,)

    return _emit(y.copy(), (x,), bwd, "rowmax")


def compose_axes(row_feat: Tensor, col_feat: Tensor) -> Tensor:
    """Lift two per-axis features to a grid: out[c,i,j] = row[i,c] + col[j,c]."""
    if row_feat.data.ndim != 2 or col_feat.data.ndim != 2:
        raise ShapeError("compose_axes needs 2-D inputs")
    if row_feat.shape[1] != col_feat.shape[1]:
        raise ShapeError(f"compose_axes widths differ: {row_feat.shape} vs {col_feat.shape}")
    _same_dtype("compose_axes", row_feat, col_feat)
    r = row_feat.data.T[:, :, None]  # [c, rows, 1]
    c = col_feat.data.T[:, None, :]  # [c, 1, cols]
    y = np.ascontiguousarray(r + c)

    def bwd(g):
        return g.sum(axis=2).T, g.sum(axis=1).T

    return _emit(y, (row_feat, col_feat), bwd, "compose_axes")


# --------------------------------------------------------------------------
# conv2d / resize / loss

_COL_INDEX_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _col_indices(h: int, w: int, k: int, stride: int, pad: int):
    key = (h, w, k, stride, pad)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is None:
        out_h = (h + 2 * pad - k) // stride + 1
        out_w = (w + 2 * pad - k) // stride + 1
        oy = np.arange(out_h) * stride
        ox = np.arange(out_w) * stride
        ky = np.arange(k)
        iy = (oy[:, None, None, None] + ky[None, None, :, None])
        ix = (ox[None, :, None, None] + ky[None, None, None, :])
        iy = np.broadcast_to(iy, (out_h, out_w, k, k)).reshape(-1)
        ix = np.broadcast_to(ix, (out_h, out_w, k, k)).reshape(-1)
        cached = _COL_INDEX_CACHE[key] = (iy, ix)
    return cached


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """2-D convolution on a [Cin,H,W] tensor with an odd square kernel.

    Default padding k//2 gives ceil(H/stride) x ceil(W/stride) outputs
    (zero-padded borders).
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, weight {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd square, got {k}x{k2}")
    if cin != x.shape[0]:
        raise ShapeError(f"conv2d channels: input {x.shape[0]}, weight expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias {bias.shape} for {cout} outputs")
    _same_dtype("conv2d", x, weight, bias)
    if padding is None:
        padding = k // 2
    h, w = x.shape[1:]
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d output empty for input {x.shape}")
    iy, ix = _col_indices(h, w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = xp[:, iy, ix].reshape(cin, out_h * out_w, k * k)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(cin * k * k, out_h * out_w)
    wmat = weight.data.reshape(cout, cin * k * k)
    y = (wmat @ cols + bias.data[:, None]).reshape(cout, out_h, out_w)

    need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias.requires_grad

    def bwd(g):
        gm = g.reshape(cout, -1)
        dw = (gm @ cols.T).reshape(weight.shape) if need_w else None
        db = gm.sum(axis=1) if need_b else None
        if not need_x:
            return None, dw, db
        dcols = (wmat.T @ gm).reshape(cin, k * k, out_h * out_w).transpose(0, 2, 1)
        dxp = np.zeros_like(xp)
        np.add.at(dxp, (np.arange(cin)[:, None], iy[None, :], ix[None, :]),
                  dcols.reshape(cin, -1))
        dx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
        return np.ascontiguousarray(dx), dw, db

    return _emit(y, (x, weight, bias), bwd, "conv2d")


_RESIZE_CACHE: dict[tuple, np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel rule)."""
    key = (n_in, n_out, np.dtype(dtype).name)
    m = _RESIZE_CACHE.get(key)
    if m is None:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        m = np.zeros((n_out, n_in), dtype=np.float64)
        m[np.arange(n_out), lo] += 1.0 - frac
        m[np.arange(n_out), hi] += frac
        m = _RESIZE_CACHE[key] = m.astype(dtype)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of a [C,h,w] tensor (half-pixel sampling)."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_resize needs [C,h,w], got {x.shape}")
    rh = _resize_matrix(x.shape[1], out_h, x.dtype)
    rw = _resize_matrix(x.shape[2], out_w, x.dtype)
    y = np.matmul(np.matmul(rh, x.data), rw.T)

    def bwd(g):
        return (np.matmul(np.matmul(rh.T, g), rw),)

    return _emit(np.ascontiguousarray(y), (x,), bwd, "bilinear_resize")


def cross_entropy_2class(logits: Tensor, target_mask: np.ndarray) -> Tensor:
    """Mean per-pixel cross entropy; channel index equals the mask value.

    target_mask is plain data (not differentiated) with values in {0,1}.
    """
    if logits.data.ndim != 3 or logits.shape[0] != 2:
        raise ShapeError(f"cross_entropy_2class wants [2,H,W] logits, got {logits.shape}")
    tgt = np.asarray(target_mask)
    if tgt.shape != logits.shape[1:]:
        raise ShapeError(f"target {tgt.shape} vs logits {logits.shape}")
    if not np.isin(tgt, (0, 1)).all():
        raise ValidationError("cross_entropy_2class target must be binary")
    tgt = tgt.astype(np.int64)
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)
    picked = np.take_along_axis(p, tgt[None], axis=0)[0]
    n = tgt.size
    loss = np.asarray(-np.log(np.maximum(picked, np.finfo(logits.dtype).tiny)).mean(),
                      dtype=logits.dtype)

    def bwd(g):
        d = p.copy()
        onehot = np.stack([tgt == 0, tgt == 1]).astype(logits.dtype)
        d -= onehot
        return (d * (g / n),)

    return _emit(loss, (logits,), bwd, "cross_entropy_2class")


# --------------------------------------------------------------------------
# Gradient verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    Evaluations run at x.dtype; use fp64 inputs for meaningful thresholds.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    if y.shape != ():
        raise ContractError(f"grad_check needs a scalar-valued f, got {y.shape}")
    tape.backward(y)
    analytic = (probe.grad if probe.grad is not None
                else np.zeros_like(probe.data)).reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        vals = []
        for delta in (step, -step):
            d = flat.copy()
            d[i] += delta
            out = f(Tensor(d.reshape(x.shape), requires_grad=False))
            v = out.item()
            if not math.isfinite(v):
                raise NumericError(f"non-finite value in finite difference at coordinate {i}")
            vals.append(v)
        numeric[i] = (vals[0] - vals[1]) / (2.0 * step)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(rel.max())
