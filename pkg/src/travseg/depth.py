"""1D laser scan to 2D feature map via two-stage attention.

Pipeline: per-beam embedding (normalized range + sinusoidal bearing code),
optional self-attention along the beam axis (stage 1, beam-neighborhood
context), optional learned projection of the beam axis onto image rows
followed by self-attention along the height axis (stage 2), then an outer
composition of the two axis features into a dense grid. The width axis of
the composition always resamples the raw embedding, so in-view columns
cannot depend on out-of-view beams; stage 1 context reaches the map through
the row projection.

The lift is residual around a fixed non-learned baseline: the map always
contains the FOV beams resampled to image columns and duplicated down the
rows (the classic pseudo-2D warp), and attention features enter through a
zero-initialized 1x1 mixing convolution. With both stages disabled the
module has no parameters and the output IS the baseline, exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, ValidationError
from .layers import AttentionBlock, Conv2dLayer

DEFAULT_BEAMS = 360
DEFAULT_MAX_RANGE = 5.0
# Camera-facing beams under the canonical mounting: beam 180 points straight
# ahead, one degree per beam, 90 degree horizontal field of view.
NOMINAL_FOV = (135, 225)
ANGLE_PAIRS = 8

# Fixed amplifier on the learned residual above the constant warp baseline.
# The episodic optimizer takes few small steps, so without amplification the
# attention pathway could never reach feature magnitudes comparable to the
# frozen image branch within one adaptation.
DEFAULT_MIX_GAIN = 8.0

# Initial beam-attention logit contrast between a beam's own neighborhood
# and distant beams (locality prior; see _locality_init).
LOCALITY_LOGIT_GAIN = 1.2

# Per-beam std of the embedding under layer norm: the sin/cos pairs
# contribute exactly ANGLE_PAIRS to the sum of squares, so the value is
# nearly constant across beams and angles.
EMB_LN_STD = 0.51

# Soft occupancy thresholds written by the stage 1 MLP at init: hinge
# features (r_k - range)+ at RANGE_BASIS_CHANNELS depths starting at
# RANGE_BASIS_NEAR (normalized range units), RANGE_BASIS_STEP apart.
# Sharpness sets the hinge transition width, about 4*EMB_LN_STD/a.
RANGE_BASIS_CHANNELS = 8
RANGE_BASIS_NEAR = 0.2
RANGE_BASIS_STEP = 0.1
RANGE_BASIS_SHARPNESS = 17.0


def _locality_init(block, d_model: int, dtype) -> None:
    """Point the beam-axis attention at angular neighborhoods from step 0.

    Query and key become the same scaled selection of the sin/cos octave
    channels, so initial logits are s^2 * sum_o cos(2^o * dtheta): a kernel
    peaked at dtheta = 0. Few-step episodic adaptation cannot discover beam
    locality from random projections, but it can learn how much of the
    neighborhood context to inject through the zero-initialized output path.
    The pre-norm block feeds queries and keys the layer-normed trunk, which
    rescales each beam by about 1/EMB_LN_STD, so s absorbs that factor.
    """
    sel = np.zeros((d_model, d_model), dtype=dtype)
    idx = np.arange(1, 1 + 2 * ANGLE_PAIRS)
    sel[idx, idx] = 1.0
    s = math.sqrt(LOCALITY_LOGIT_GAIN / block.inv_scale) * EMB_LN_STD
    block.wq.weight.assign(sel * dtype(s))
    block.wk.weight.assign(sel * dtype(s))


def _range_basis_init(block, dtype) -> None:
    """Write per-beam soft occupancy thresholds into dead embedding channels.

    The stage 1 MLP reads the layer-normed trunk, where channel 0 minus any
    dead channel recovers range/std exactly (dead channels carry -mean/std
    after the norm). Unit k activates when the beam range falls below depth
    r_k; its hinge, scaled back by std/sharpness, lands in an otherwise
    unused channel at feature value (r_k - range)+ up to the soft corner.
    Episodic adaptation then only has to weight ready-made thresholds, which
    is feasible in a few small steps, instead of discovering nonlinear range
    structure from scratch, which is not. Rows without an assigned hinge
    keep their random init behind the zero columns of the second layer.
    """
    a = dtype(RANGE_BASIS_SHARPNESS)
    dead = 1 + 2 * ANGLE_PAIRS
    w1 = np.array(block.mlp.fc1.weight.data, copy=True)
    b1 = np.array(block.mlp.fc1.bias.data, copy=True)
    w2 = np.array(block.mlp.fc2.weight.data, copy=True)
    d_model = w2.shape[0]
    # Narrow embeddings get fewer hinges; below one spare channel, none.
    n_hinges = min(RANGE_BASIS_CHANNELS, d_model - dead - 1)
    for k in range(max(0, n_hinges)):
        r_k = RANGE_BASIS_NEAR + k * RANGE_BASIS_STEP
        w1[k, :] = 0.0
        w1[k, 0] = -a
        w1[k, dead] = a
        b1[k] = a * r_k / EMB_LN_STD
        w2[dead + 1 + k, k] = EMB_LN_STD / a
    block.mlp.fc1.weight.assign(w1)
    block.mlp.fc1.bias.assign(b1)
    block.mlp.fc2.weight.assign(w2)


@dataclass(frozen=True)
class DepthScan:
    """One 360-beam range ring in meters, clipped to [0, max_range]."""

    values: np.ndarray
    fov_start: int
    fov_end: int
    max_range: float = DEFAULT_MAX_RANGE

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValidationError(f"scan must be a nonempty vector, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("scan contains non-finite ranges")
        if v.min() < 0 or v.max() > self.max_range + 1e-9:
            raise ValidationError(
                f"ranges outside [0, {self.max_range}]: min {v.min()}, max {v.max()}")
        if not 0 <= self.fov_start < self.fov_end <= v.size:
            raise ValidationError(
                f"FOV [{self.fov_start}, {self.fov_end}) invalid for {v.size} beams")
        object.__setattr__(self, "values", v)

    @property
    def beam_count(self) -> int:
        return self.values.size

    @property
    def fov_width(self) -> int:
        return self.fov_end - self.fov_start


def save_scan(path: str | Path, scan: DepthScan) -> None:
    header = (f"beams={scan.beam_count},fov_start={scan.fov_start},"
              f"fov_end={scan.fov_end},max_range={scan.max_range}")
    line = ",".join(f"{v:.6f}" for v in scan.values)
    Path(path).write_text(header + "\n" + line + "\n")


def load_scan(path: str | Path) -> DepthScan:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ValidationError(f"{path}: expected header plus one scan line")
    fields = dict(item.split("=", 1) for item in lines[0].split(","))
    try:
        beams = int(fields["beams"])
        fov_start = int(fields["fov_start"])
        fov_end = int(fields["fov_end"])
        max_range = float(fields["max_range"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed scan header: {lines[0]!r}") from exc
    values = np.array([float(tok) for tok in lines[1].split(",")], dtype=np.float64)
    if values.size != beams:
        raise ValidationError(f"{path}: header says {beams} beams, line has {values.size}")
    # Out-of-range and missing returns read as free space to the horizon.
    values = np.clip(values, 0.0, max_range)
    return DepthScan(values, fov_start, fov_end, max_range)


def embed_scan(scan: DepthScan, d_model: int = 32, dtype=ad.FP32) -> Tensor:
    """Constant per-beam embedding: [range/max_range, sin/cos bearing pairs].

    Channel 0 carries the normalized range; channels 1..2*ANGLE_PAIRS carry
    sin/cos of the beam angle at octave frequencies; any remaining channels
    are zero. Not learned, so the depth module's parameter census reflects
    only the attention stages.
    """
    width = 1 + 2 * ANGLE_PAIRS
    if d_model < width:
        raise ConfigError(f"d_model must be >= {width} to hold the scan embedding")
    n = scan.beam_count
    emb = np.zeros((n, d_model), dtype=np.float64)
    emb[:, 0] = scan.values / scan.max_range
    theta = 2.0 * np.pi * np.arange(n) / n
    for p in range(ANGLE_PAIRS):
        emb[:, 1 + 2 * p] = np.sin(theta * (2 ** p))
        emb[:, 2 + 2 * p] = np.cos(theta * (2 ** p))
    return Tensor(emb.astype(dtype), requires_grad=False)


_RESAMPLE_CACHE: dict[tuple, np.ndarray] = {}


def fov_resample_matrix(beams: int, fov_start: int, fov_end: int, out_w: int,
                        dtype=ad.FP32) -> np.ndarray:
    """Row-stochastic [out_w x beams] matrix resampling the FOV beams to
    columns with endpoint-inclusive linear interpolation.

    Columns outside [fov_start, fov_end) are exactly zero, so the resampled
    signal cannot depend on out-of-view beams. out_w equal to the FOV width
    reduces to row selection (identity resample).
    """
    if not 0 <= fov_start < fov_end <= beams:
        raise ValidationError(f"empty or invalid FOV [{fov_start}, {fov_end})")
    if out_w < 1:
        raise ShapeError(f"out_w must be positive, got {out_w}")
    key = (beams, fov_start, fov_end, out_w, np.dtype(dtype).name)
    m = _RESAMPLE_CACHE.get(key)
    if m is None:
        n_fov = fov_end - fov_start
        if out_w == 1:
            src = np.array([(n_fov - 1) / 2.0])
        else:
            src = np.linspace(0.0, n_fov - 1.0, out_w)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_fov - 1)
        frac = src - lo
        m = np.zeros((out_w, beams), dtype=np.float64)
        m[np.arange(out_w), fov_start + lo] += 1.0 - frac
        m[np.arange(out_w), fov_start + hi] += frac
        m = _RESAMPLE_CACHE[key] = m.astype(dtype)
    return m


def area_resample_matrix(beams: int, fov_start: int, fov_end: int, out_w: int,
                         dtype=ad.FP32) -> np.ndarray:
    """Row-stochastic [out_w x beams] matrix averaging each FOV bin of beams.

    Partition-of-unity counterpart to fov_resample_matrix: output column j
    integrates the beams overlapping bin j, so every in-view beam lands in
    at least one column and a one-beam feature cannot fall between taps.
    Interpolation keeps signals smooth but aliases sub-spacing structure
    away; averaging dilutes it instead, which is the right trade for the
    learned width path where thin obstacles must stay visible. Columns
    outside the FOV are exactly zero, and out_w equal to the FOV width
    reduces to row selection, same as the interpolating matrix.
    """
    if not 0 <= fov_start < fov_end <= beams:
        raise ValidationError(f"empty or invalid FOV [{fov_start}, {fov_end})")
    if out_w < 1:
        raise ShapeError(f"out_w must be positive, got {out_w}")
    key = ("area", beams, fov_start, fov_end, out_w, np.dtype(dtype).name)
    m = _RESAMPLE_CACHE.get(key)
    if m is None:
        n_fov = fov_end - fov_start
        width = n_fov / out_w
        m = np.zeros((out_w, beams), dtype=np.float64)
        for j in range(out_w):
            lo, hi = j * width, (j + 1) * width
            b0, b1 = int(math.floor(lo)), min(int(math.ceil(hi)), n_fov)
            for b in range(b0, b1):
                overlap = min(hi, b + 1.0) - max(lo, float(b))
                if overlap > 0:
                    m[j, fov_start + b] = overlap / width
        m = _RESAMPLE_CACHE[key] = m.astype(dtype)
    return m


def pseudo_2d_warp(scan: DepthScan, out_h: int, out_w: int, dtype=ad.FP32) -> Tensor:
    """Non-learned 1D-to-2D lift: FOV beams resampled to out_w columns of
    normalized range, duplicated down all out_h rows. Shape [1, out_h, out_w].
    """
    r = fov_resample_matrix(scan.beam_count, scan.fov_start, scan.fov_end,
                            out_w, dtype)
    cols = r @ (scan.values / scan.max_range).astype(dtype)
    grid = np.broadcast_to(cols[None, None, :], (1, out_h, out_w)).copy()
    return Tensor(grid.astype(dtype), requires_grad=False)


def horizontal_attention(x_emb: Tensor, block: AttentionBlock) -> Tensor:
    """Stage 1: self-attention along the beam axis; shape preserved."""
    return block(x_emb)


def vertical_attention(h_d1: Tensor, row_proj: Tensor, block: AttentionBlock) -> Tensor:
    """Stage 2: project the beam axis onto image rows, then attend over rows.

    The projection is the build's realization of turning a beam-indexed
    matrix into a height-indexed one; a pure reshape cannot map 360 beams to
    an arbitrary row count.
    """
    if row_proj.shape[1] != h_d1.shape[0]:
        raise ShapeError(f"row projection {row_proj.shape} against beams {h_d1.shape[0]}")
    return block(ad.matmul(row_proj, h_d1))


class DepthModule:
    """Owns the learned pieces of the scan encoder for one configuration.

    use_W gates stage 1 (beam-axis attention feeding the row projection);
    use_H gates stage 2 (row projection plus height-axis attention). With
    use_W alone the learned path reduces to the mixing convolution over
    resampled raw features, since beam context has no outlet of its own. The
    attention scale constant is the channel width by default, configurable
    since the choice is a modeling decision rather than a shape consequence.
    """

    def __init__(self, rng: np.random.Generator, out_h: int, d_model: int = 32,
                 beams: int = DEFAULT_BEAMS, use_H: bool = True, use_W: bool = True,
                 scale_dim: int | None = None, nominal_fov: tuple[int, int] = NOMINAL_FOV,
                 mix_gain: float = DEFAULT_MIX_GAIN, dtype=ad.FP32):
        if out_h < 1:
            raise ConfigError(f"output height must be configured positive, got {out_h}")
        self.out_h = out_h
        self.mix_gain = mix_gain
        self.d_model = d_model
        self.beams = beams
        self.use_H = use_H
        self.use_W = use_W
        self.dtype = dtype
        # Beam attention needs the row projection as its outlet: the width
        # path must stay a resample of the raw embedding, so without the
        # height stage there is no route for beam context into the map and
        # the block would be dead weight in the parameter census.
        self.stage1 = (AttentionBlock(rng, d_model, scale_dim=scale_dim, dtype=dtype,
                                      zero_init=True, pre_norm=True)
                       if (use_W and use_H) else None)
        if self.stage1 is not None:
            _locality_init(self.stage1, d_model, dtype)
            _range_basis_init(self.stage1, dtype)
        if use_H:
            # Row projection starts row-stochastic over the nominal FOV so
            # every image row initially summarizes the in-view beams; rows
            # diverge through training.
            f0, f1 = nominal_fov
            p = np.zeros((out_h, beams), dtype=dtype)
            p[:, f0:f1] = 1.0 / (f1 - f0)
            self.row_proj = Tensor(p, requires_grad=True)
            self.stage2 = AttentionBlock(rng, d_model, scale_dim=scale_dim,
                                         dtype=dtype, zero_init=True)
        else:
            self.row_proj = None
            self.stage2 = None
        self.mix = (Conv2dLayer(rng, d_model, d_model, 1, dtype=dtype, zero_init=True)
                    if (use_H or use_W) else None)

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.stage1 is not None:
            out.update(self.stage1.named_params(prefix + "stage1."))
        if self.row_proj is not None:
            out[prefix + "row_proj"] = self.row_proj
            out.update(self.stage2.named_params(prefix + "stage2."))
        if self.mix is not None:
            out.update(self.mix.named_params(prefix + "mix."))
        return out


def depth_feature_map(scan: DepthScan, module: DepthModule, out_h: int,
                      out_w: int, emb: Tensor | None = None) -> Tensor:
    """Dense [d_model, out_h, out_w] depth feature aligned to the fusion grid.

    Always equals baseline + mix(composed attention features), where the
    baseline is the raw embedding resampled to columns and duplicated down
    rows. At zero-init the mix term vanishes, so every configuration starts
    at the same behavior as the non-learned warp. Callers in a loop may pass
    the constant embedding to avoid recomputing it.
    """
    if scan.beam_count != module.beams:
        raise ShapeError(f"scan has {scan.beam_count} beams, module expects {module.beams}")
    if out_h != module.out_h:
        raise ConfigError(f"module configured for height {module.out_h}, asked {out_h}")
    d = module.d_model
    if emb is None:
        emb = embed_scan(scan, d, dtype=module.dtype)
    elif emb.shape != (scan.beam_count, d):
        raise ShapeError(f"embedding shape {emb.shape} for {scan.beam_count}x{d}")
    r = Tensor(fov_resample_matrix(scan.beam_count, scan.fov_start, scan.fov_end,
                                   out_w, module.dtype), requires_grad=False)
    zero_rows = Tensor(np.zeros((out_h, d), dtype=module.dtype), requires_grad=False)
    base = ad.compose_axes(zero_rows, ad.matmul(r, emb))
    if module.mix is None:
        return base
    # The width component resamples raw per-beam features only, keeping
    # in-view columns independent of out-of-view beams; stage 1 context
    # enters the map through the height path. The learned path uses bin
    # averaging rather than interpolation so sub-spacing dips survive.
    r_area = Tensor(area_resample_matrix(scan.beam_count, scan.fov_start,
                                         scan.fov_end, out_w, module.dtype),
                    requires_grad=False)
    col_feat = ad.matmul(r_area, emb)
    if module.use_H:
        h_d1 = (horizontal_attention(emb, module.stage1)
                if module.stage1 is not None else emb)
        row_feat = vertical_attention(h_d1, module.row_proj, module.stage2)
    else:
        row_feat = zero_rows
    learned = module.mix(ad.compose_axes(row_feat, col_feat))
    return ad.add(base, ad.scale(learned, module.mix_gain))
