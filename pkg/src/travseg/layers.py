"""Reusable parameterized layers: linear, conv, norm, MLP, attention block.

Initialization convention (deterministic given a seed): weights uniform in
±1/sqrt(fan_in), biases zero, norm scale one / shift zero. Layers whose
output feeds a residual branch accept ``zero_init`` so the branch starts
silent and training moves it away from a known baseline.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    """Affine map y = x Wᵀ + b with weight stored [out, in]."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int,
                 dtype=ad.FP32, zero_init: bool = False):
        if n_in <= 0 or n_out <= 0:
            raise ShapeError(f"Linear dims must be positive, got {n_in}->{n_out}")
        w = (np.zeros((n_out, n_in), dtype=dtype) if zero_init
             else _uniform(rng, (n_out, n_in), n_in, dtype))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_rowvec(ad.matmul(x, ad.transpose(self.weight)), self.bias)

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


class Conv2dLayer:
    """k×k convolution over [Cin,H,W], padding k//2 unless overridden."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int,
                 stride: int = 1, dtype=ad.FP32, zero_init: bool = False):
        fan_in = c_in * k * k
        w = (np.zeros((c_out, c_in, k, k), dtype=dtype) if zero_init
             else _uniform(rng, (c_out, c_in, k, k), fan_in, dtype))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride)

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


class LayerNormAffine:
    def __init__(self, d: int, dtype=ad.FP32):
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "gamma": self.gamma, prefix + "beta": self.beta}


class Mlp:
    """Two linear maps with a GeLU between; hidden width 2x by convention."""

    def __init__(self, rng: np.random.Generator, d: int, hidden: int | None = None,
                 dtype=ad.FP32, zero_init: bool = False):
        hidden = hidden or 2 * d
        self.fc1 = Linear(rng, d, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, d, dtype=dtype, zero_init=zero_init)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.fc1.named_params(prefix + "fc1."),
                **self.fc2.named_params(prefix + "fc2.")}


class AttentionBlock:
    """Single-head self-attention with residual norm/MLP refinement.

    post-norm (default): a = OutProj(softmax(q kᵀ / sqrt(scale_dim)) v)
                         h = LN1(x + a)
                         y = LN2(h + MLP(h))
    pre-norm:            a = OutProj(attention over LN1(x))
                         h = x + a
                         y = h + MLP(LN2(h))

    scale_dim defaults to the channel width d; it is configurable because
    the scaling constant is a modeling choice, not a consequence of shapes.
    With zero_init the OutProj and MLP second layer start at zero, so the
    block initially computes LN2(LN1(x)) post-norm and exactly x pre-norm.
    The pre-norm form preserves the input basis through the trunk, which
    matters when downstream consumers are shared with a configuration that
    reads the unrefined input directly.
    """

    def __init__(self, rng: np.random.Generator, d: int, scale_dim: int | None = None,
                 dtype=ad.FP32, zero_init: bool = False, pre_norm: bool = False):
        self.wq = Linear(rng, d, d, dtype=dtype)
        self.wk = Linear(rng, d, d, dtype=dtype)
        self.wv = Linear(rng, d, d, dtype=dtype)
        self.proj = Linear(rng, d, d, dtype=dtype, zero_init=zero_init)
        self.ln1 = LayerNormAffine(d, dtype=dtype)
        self.ln2 = LayerNormAffine(d, dtype=dtype)
        self.mlp = Mlp(rng, d, dtype=dtype, zero_init=zero_init)
        self.pre_norm = pre_norm
        self.inv_scale = 1.0 / math.sqrt(scale_dim if scale_dim is not None else d)

    def forward_detailed(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (output, attention weight matrix [L×L])."""
        if x.data.ndim != 2 or x.shape[1] != self.wq.n_in:
            raise ShapeError(f"attention block of width {self.wq.n_in} got {x.shape}")
        if self.pre_norm:
            z = self.ln1(x)
            q, k, v = self.wq(z), self.wk(z), self.wv(z)
            weights = ad.softmax_rows(
                ad.scale(ad.matmul(q, ad.transpose(k)), self.inv_scale))
            h = ad.add(x, self.proj(ad.matmul(weights, v)))
            y = ad.add(h, self.mlp(self.ln2(h)))
            return y, weights
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        weights = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), self.inv_scale))
        a = self.proj(ad.matmul(weights, v))
        h = self.ln1(ad.add(x, a))
        y = self.ln2(ad.add(h, self.mlp(h)))
        return y, weights

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_detailed(x)[0]

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, child in (("q", self.wq), ("k", self.wk), ("v", self.wv),
                            ("proj", self.proj), ("ln1", self.ln1),
                            ("ln2", self.ln2), ("mlp", self.mlp)):
            out.update(child.named_params(f"{prefix}{name}."))
        return out


def export_params(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v.data, dtype=np.float32) for k, v in named.items()}


def import_params(named: dict[str, Tensor], blobs: dict[str, np.ndarray]) -> None:
    """Load checkpoint arrays into live tensors; names must match exactly."""
    missing = sorted(set(named) - set(blobs))
    extra = sorted(set(blobs) - set(named))
    if missing or extra:
        raise ShapeError(f"parameter set mismatch: missing={missing}, extra={extra}")
    for k, t in named.items():
        t.assign(blobs[k].astype(t.dtype).reshape(t.shape))
