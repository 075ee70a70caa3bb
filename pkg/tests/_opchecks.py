"""Shared finite-difference sweep over every differentiable op.

Each entry builds a scalar-valued function of one fp64 probe tensor with
every other operand held fixed, so grad_check differentiates exactly the
op under test plus a fixed reduction.
"""

import numpy as np

from travseg import autodiff as ad
from travseg.autodiff import Tensor


def _t(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape).astype(np.float64))


def op_cases(seed: int):
    """(name, f, probe) triples; f maps one Tensor to a scalar Tensor."""
    rng = np.random.default_rng(seed)
    a34 = _t(rng, (3, 4))
    b45 = _t(rng, (4, 5))
    m34 = _t(rng, (3, 4))
    v4 = _t(rng, (4,))
    gamma = _t(rng, (4,), 0.5, 1.5)
    beta = _t(rng, (4,))
    x3hw = _t(rng, (3, 5, 6))
    map_hw = _t(rng, (5, 6))
    cw = Tensor(rng.uniform(-0.5, 0.5, (2, 3, 3, 3)).astype(np.float64))
    cb = _t(rng, (2,))
    tgt = (rng.random((5, 6)) > 0.5).astype(np.uint8)
    row25 = _t(rng, (2, 5))
    # Keep relu/rowmax probes away from their kinks and ties.
    relu_probe = Tensor(
        np.where(np.abs(a34.data) < 0.1, 0.3, a34.data).copy())

    def red(y):
        return ad.mean_all(y)

    return [
        ("matmul_lhs", lambda x: red(ad.matmul(x, b45)), a34),
        ("matmul_rhs", lambda x: red(ad.matmul(a34, x)), b45),
        ("softmax_rows", lambda x: red(ad.mul(ad.softmax_rows(x), m34)), a34),
        ("add", lambda x: red(ad.add(x, m34)), a34),
        ("sub", lambda x: red(ad.sub(m34, x)), a34),
        ("mul", lambda x: red(ad.mul(x, m34)), a34),
        ("scale", lambda x: red(ad.scale(x, -2.5)), a34),
        ("add_scalar", lambda x: red(ad.add_scalar(x, 0.7)), a34),
        ("add_rowvec_x", lambda x: red(ad.add_rowvec(x, v4)), a34),
        ("add_rowvec_v", lambda v: red(ad.add_rowvec(a34, v)), v4),
        ("relu", lambda x: red(ad.relu(x)), relu_probe),
        ("gelu", lambda x: red(ad.gelu(x)), a34),
        ("layer_norm_x", lambda x: red(ad.layer_norm(x, gamma, beta)), a34),
        ("layer_norm_gamma", lambda g: red(ad.layer_norm(a34, g, beta)), gamma),
        ("layer_norm_beta", lambda b: red(ad.layer_norm(a34, gamma, b)), beta),
        ("reshape", lambda x: red(ad.mul(ad.reshape(x, (4, 3)),
                                         ad.reshape(m34, (4, 3)))), a34),
        ("transpose", lambda x: red(ad.matmul(ad.transpose(x), a34)), a34),
        ("concat_channels",
         lambda x: red(ad.concat_channels(x, m34)), a34),
        ("broadcast_mul_x", lambda x: red(ad.broadcast_mul(x, map_hw)), x3hw),
        ("broadcast_mul_map",
         lambda m: red(ad.broadcast_mul(x3hw, m)), map_hw),
        ("sum_all", lambda x: ad.sum_all(ad.mul(x, m34)), a34),
        ("mean_all", lambda x: ad.mean_all(ad.mul(x, m34)), a34),
        ("l2_normalize_rows",
         lambda x: red(ad.mul(ad.l2_normalize_rows(x), m34)), a34),
        ("rowmax", lambda x: red(ad.rowmax(x)), a34),
        ("compose_axes", lambda x: red(ad.compose_axes(x, row25)), row25),
        ("conv2d_x", lambda x: red(ad.conv2d(x, cw, cb)), x3hw),
        ("conv2d_w", lambda w: red(ad.conv2d(x3hw, w, cb)), cw),
        ("conv2d_b", lambda b: red(ad.conv2d(x3hw, cw, b)), cb),
        ("conv2d_strided",
         lambda x: red(ad.conv2d(x, cw, cb, stride=2)), x3hw),
        ("bilinear_resize",
         lambda x: red(ad.bilinear_resize(x, 7, 4)), x3hw),
        ("cross_entropy",
         lambda x: ad.cross_entropy_2class(
             ad.concat_channels(ad.reshape(x, (1, 5, 6)),
                                ad.reshape(map_hw, (1, 5, 6))), tgt),
         map_hw),
    ]


def sweep(seeds, threshold: float = 1e-4) -> dict[str, float]:
    """Worst relative gradient error per op across the given seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, f, probe in op_cases(seed):
            err = ad.grad_check(f, probe)
            worst[name] = max(worst.get(name, 0.0), err)
    bad = {k: v for k, v in worst.items() if v > threshold}
    assert not bad, f"gradient mismatches: {bad}"
    return worst
