"""Prototype extraction and matching for binary few-shot segmentation.

Positive prototypes summarize freespace regions of support features,
negative prototypes summarize obstacle regions. Pooling is RoIAlign-style:
the binary mask is area-averaged down to the feature grid (soft weights),
the soft region's bounding box is split into a G x G part grid, and each
cell contributes one weighted-average vector. G=1 is exactly masked global
average pooling. Matching is max-over-prototypes cosine similarity; the
similarity map gates the query features through (1 + sim) / 2.

Both branches are non-parametric: enabling or disabling the negative branch
changes no trainable parameter count (the decoder sees a zero tensor in
place of the gated negative features when the branch is off).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, EmptyRegionError, ShapeError, ValidationError
from .fusion import _parse_netpbm
from .layers import Conv2dLayer

POLARITIES = ("positive", "negative")
POOLING_MODES = ("mask_pool", "gap")
CELL_WEIGHT_FLOOR = 1e-6


@dataclass(frozen=True)
class SupportMask:
    """Binary [H,W] mask, 1 = freespace, 0 = obstacle."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValidationError("mask values must be 0 or 1")
        object.__setattr__(self, "mask", m.astype(np.uint8))

    def region(self, polarity: str) -> np.ndarray:
        if polarity not in POLARITIES:
            raise ValidationError(f"unknown polarity {polarity!r}")
        return self.mask if polarity == "positive" else 1 - self.mask


def save_pgm(path: str | Path, mask: SupportMask) -> None:
    h, w = mask.mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + (mask.mask * 255).astype(np.uint8).tobytes())


def load_pgm(path: str | Path) -> SupportMask:
    blob = Path(path).read_bytes()
    magic, w, h, _maxval, body = _parse_netpbm(blob, path)
    if magic != b"P5":
        raise ValidationError(f"{path}: expected P5, got {magic.decode(errors='replace')}")
    if len(body) < w * h:
        raise ValidationError(f"{path}: truncated mask payload")
    arr = np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w)
    return SupportMask((arr >= 128).astype(np.uint8))


@dataclass
class PrototypeSet:
    polarity: str
    vectors: Tensor  # [P, C], rows are prototypes
    pooling_mode: str
    grid: int
    shots: list[int]

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise ValidationError(f"unknown polarity {self.polarity!r}")
        if self.pooling_mode not in POOLING_MODES:
            raise ValidationError(f"unknown pooling mode {self.pooling_mode!r}")
        if self.vectors.data.ndim != 2 or self.vectors.shape[0] == 0:
            raise ContractError("prototype set must hold a nonempty [P,C] matrix")
        if len(self.shots) != self.vectors.shape[0]:
            raise ContractError("shot provenance length mismatch")


_DOWNSAMPLE_CACHE: dict[tuple, np.ndarray] = {}


def _axis_average_matrix(n_src: int, n_dst: int, dtype) -> np.ndarray:
    """[n_dst x n_src] area-overlap averaging matrix; rows sum to 1."""
    key = (n_src, n_dst, np.dtype(dtype).name)
    m = _DOWNSAMPLE_CACHE.get(key)
    if m is None:
        m = np.zeros((n_dst, n_src), dtype=np.float64)
        cell = n_src / n_dst
        for i in range(n_dst):
            lo, hi = i * cell, (i + 1) * cell
            j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
            for j in range(j0, min(j1, n_src)):
                overlap = min(hi, j + 1) - max(lo, j)
                if overlap > 0:
                    m[i, j] = overlap / cell
        m = _DOWNSAMPLE_CACHE[key] = m.astype(dtype)
    return m


def downsample_mask(region: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average a binary [H,W] region to soft [h,w] weights in [0,1]."""
    mv = _axis_average_matrix(region.shape[0], h, np.float64)
    mu = _axis_average_matrix(region.shape[1], w, np.float64)
    return mv @ region.astype(np.float64) @ mu.T


def _feature_rows(feat: Tensor) -> Tensor:
    """[C,h,w] -> [h*w, C] with pixel-major rows."""
    c, h, w = feat.shape
    return ad.reshape(ad.transpose(feat, (1, 2, 0)), (h * w, c))


def mask_pool(feat: Tensor, mask: SupportMask, polarity: str, grid: int = 2,
              shot: int = 0) -> PrototypeSet:
    """Part prototypes from the masked region of a [C,h,w] feature map.

    The soft region's bounding box is split into grid x grid cells; cells
    whose total soft weight falls below 1e-6 are dropped. Raises
    EmptyRegionError when nothing survives, which episode sampling treats
    as a resample signal.
    """
    if feat.data.ndim != 3:
        raise ShapeError(f"feature map must be [C,h,w], got {feat.shape}")
    if grid < 1:
        raise ValidationError(f"part grid must be >= 1, got {grid}")
    c, h, w = feat.shape
    region = mask.region(polarity)
    soft = downsample_mask(region, h, w)
    rows = np.where(soft.sum(axis=1) > 1e-12)[0]
    cols = np.where(soft.sum(axis=0) > 1e-12)[0]
    if rows.size == 0 or cols.size == 0:
        raise EmptyRegionError(f"{polarity} region empty at feature resolution")
    r_edges = np.round(np.linspace(rows[0], rows[-1] + 1, grid + 1)).astype(int)
    c_edges = np.round(np.linspace(cols[0], cols[-1] + 1, grid + 1)).astype(int)
    weight_rows = []
    for i in range(grid):
        for j in range(grid):
            cell = np.zeros((h, w), dtype=np.float64)
            sub = soft[r_edges[i]:r_edges[i + 1], c_edges[j]:c_edges[j + 1]]
            total = sub.sum()
            if total < CELL_WEIGHT_FLOOR:
                continue
            cell[r_edges[i]:r_edges[i + 1], c_edges[j]:c_edges[j + 1]] = sub / total
            weight_rows.append(cell.reshape(-1))
    if not weight_rows:
        raise EmptyRegionError(f"{polarity} region vanished in every pooling cell")
    pool = Tensor(np.stack(weight_rows).astype(feat.dtype), requires_grad=False)
    vectors = ad.matmul(pool, _feature_rows(feat))
    mode = "gap" if grid == 1 else "mask_pool"
    return PrototypeSet(polarity, vectors, mode, grid, [shot] * len(weight_rows))


def gap_pool(feat: Tensor, mask: SupportMask, polarity: str,
             shot: int = 0) -> PrototypeSet:
    """Masked global average pooling: the single-cell case of mask_pool."""
    return mask_pool(feat, mask, polarity, grid=1, shot=shot)


def merge_prototypes(sets: list[PrototypeSet]) -> PrototypeSet:
    """Union of per-shot prototype sets; preserves every vector."""
    if not sets:
        raise ContractError("cannot merge an empty list of prototype sets")
    first = sets[0]
    for s in sets[1:]:
        if s.polarity != first.polarity or s.pooling_mode != first.pooling_mode:
            raise ContractError("cannot merge prototype sets of mixed polarity or mode")
    if len(sets) == 1:
        return first
    vectors = ad.concat_channels(*[s.vectors for s in sets])
    shots = [sid for s in sets for sid in s.shots]
    return PrototypeSet(first.polarity, vectors, first.pooling_mode, first.grid, shots)


def cosine_branch(query_feat: Tensor, protos: PrototypeSet) -> Tensor:
    """Per-pixel max cosine similarity against the prototype set, [h,w].

    Zero-feature pixels normalize to the zero vector under the epsilon
    guard and thus score 0 against every prototype.
    """
    if protos.vectors.shape[0] < 1:
        raise ContractError("empty prototype set")
    c, h, w = query_feat.shape
    if protos.vectors.shape[1] != c:
        raise ShapeError(
            f"prototype width {protos.vectors.shape[1]} vs feature channels {c}")
    qn = ad.l2_normalize_rows(_feature_rows(query_feat))
    pn = ad.l2_normalize_rows(protos.vectors)
    sims = ad.matmul(qn, ad.transpose(pn))
    return ad.reshape(ad.rowmax(sims), (h, w))


def modulate(query_feat: Tensor, sim: Tensor) -> Tensor:
    """Gate every channel by (1 + sim) / 2, mapping similarity to [0,1]."""
    if sim.shape != query_feat.shape[1:]:
        raise ShapeError(f"similarity grid {sim.shape} vs feature {query_feat.shape}")
    gate = ad.scale(ad.add_scalar(sim, 1.0), 0.5)
    return ad.broadcast_mul(query_feat, gate)


class SegHead:
    """3x3 conv -> GeLU -> 3x3 conv to 2 logits -> bilinear upsample.

    init_gain shrinks the weight init below the fan-in default; decoders
    trained from scratch inside a short low-lr adaptation want to start
    near zero logits so the learned component dominates the random one.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int, channels: int,
                 out_hw: tuple[int, int], dtype=ad.FP32, init_gain: float = 1.0):
        self.conv1 = Conv2dLayer(rng, in_channels, channels, 3, dtype=dtype)
        self.conv2 = Conv2dLayer(rng, channels, 2, 3, dtype=dtype)
        if init_gain != 1.0:
            for conv in (self.conv1, self.conv2):
                conv.weight.assign(conv.weight.data * dtype(init_gain))
        self.out_hw = tuple(out_hw)

    def __call__(self, feat: Tensor) -> Tensor:
        logits = self.conv2(ad.gelu(self.conv1(feat)))
        return ad.bilinear_resize(logits, *self.out_hw)

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.conv1.named_params(prefix + "conv1."),
                **self.conv2.named_params(prefix + "conv2.")}


@dataclass
class QueryMask:
    """Channel 0 = obstacle logit, channel 1 = freespace logit."""

    logits: Tensor
    mask: np.ndarray

    @classmethod
    def from_logits(cls, logits: Tensor) -> "QueryMask":
        """Per-pixel argmax over the two logit channels."""
        pred = (logits.data[1] > logits.data[0]).astype(np.uint8)
        return cls(logits, pred)


def decode(q_pos: Tensor, q_neg: Tensor, head: SegHead) -> QueryMask:
    if q_pos.shape != q_neg.shape:
        raise ShapeError(f"branch grids differ: {q_pos.shape} vs {q_neg.shape}")
    return QueryMask.from_logits(head(ad.concat_channels(q_pos, q_neg)))


def branch_features(supports: list[tuple[Tensor, SupportMask]], query_feat: Tensor,
                    use_n2p: bool, pooling_mode: str = "mask_pool", grid: int = 2,
                    branch_mode: str = "gated") -> tuple[Tensor, Tensor]:
    """Compute the decoder's two inputs (positive branch, negative branch).

    With use_n2p false the negative input is a zero tensor of matching
    shape, keeping decoder arity and parameter count unchanged. branch_mode
    "gated" feeds similarity-gated query features; "simmap" feeds the raw
    similarity maps as single-channel inputs.
    """
    if not supports:
        raise ContractError("need at least one support")
    if pooling_mode not in POOLING_MODES:
        raise ValidationError(f"unknown pooling mode {pooling_mode!r}")
    g = 1 if pooling_mode == "gap" else grid
    h, w = query_feat.shape[1:]

    def branch(polarity: str) -> Tensor:
        sets = [mask_pool(f, m, polarity, g, shot=i)
                for i, (f, m) in enumerate(supports)]
        sim = cosine_branch(query_feat, merge_prototypes(sets))
        if branch_mode == "simmap":
            return ad.reshape(sim, (1, h, w))
        return modulate(query_feat, sim)

    q_pos = branch("positive")
    if use_n2p:
        q_neg = branch("negative")
    else:
        q_neg = Tensor(np.zeros(q_pos.shape, dtype=q_pos.data.dtype),
                       requires_grad=False)
    return q_pos, q_neg


def ncl_forward(supports: list[tuple[Tensor, SupportMask]], query_feat: Tensor,
                head: SegHead, use_n2p: bool, pooling_mode: str = "mask_pool",
                grid: int = 2, branch_mode: str = "gated") -> QueryMask:
    q_pos, q_neg = branch_features(supports, query_feat, use_n2p,
                                   pooling_mode, grid, branch_mode)
    return decode(q_pos, q_neg, head)


def trainable_param_count(named: dict[str, Tensor]) -> int:
    return sum(int(np.prod(t.shape)) for t in named.values() if t.requires_grad)
