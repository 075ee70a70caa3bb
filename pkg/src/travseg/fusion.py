"""RGB raster embedding and RGB-depth feature fusion.

The RGB side is deliberately small: two stride-2 3x3 convolutions with GeLU,
taking an H x W image to an H/4 x W/4 feature grid. Fusion concatenates the
modality channels, mixes with a 1x1 convolution, GeLU, then a 3x3
convolution back to the shared channel width. Both pieces are trained once
on a held-out scene split and frozen during episodic adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError
from .layers import Conv2dLayer


@dataclass(frozen=True)
class RgbImage:
    """Channel-first float image, values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != 3:
            raise ValidationError(f"image must be [3,H,W], got {p.shape}")
        if not np.isfinite(p).all() or p.min() < 0 or p.max() > 1.0 + 1e-9:
            raise ValidationError("pixel values must be finite and in [0,1]")
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def save_ppm(path: str | Path, img: RgbImage) -> None:
    h, w = img.height, img.width
    raw = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raw.transpose(1, 2, 0).tobytes())


def load_ppm(path: str | Path) -> RgbImage:
    blob = Path(path).read_bytes()
    magic, w, h, maxval, body = _parse_netpbm(blob, path)
    if magic != b"P6":
        raise ValidationError(f"{path}: expected P6, got {magic.decode(errors='replace')}")
    expected = w * h * 3
    if len(body) < expected:
        raise ValidationError(f"{path}: truncated pixel payload")
    arr = np.frombuffer(body[:expected], dtype=np.uint8).reshape(h, w, 3)
    return RgbImage(arr.transpose(2, 0, 1).astype(np.float64) / maxval)


def _parse_netpbm(blob: bytes, path) -> tuple[bytes, int, int, int, bytes]:
    """Parse a binary netpbm header (magic, width, height, maxval, payload)."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4 and i < len(blob):
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":  # comment line
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i:i + 1].isspace():
            i += 1
        tokens.append(blob[start:i])
    if len(tokens) < 4:
        raise ValidationError(f"{path}: malformed netpbm header")
    i += 1  # single whitespace after maxval
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric netpbm header") from exc
    if w <= 0 or h <= 0 or maxval != 255:
        raise ValidationError(f"{path}: unsupported netpbm geometry {w}x{h}/{maxval}")
    return tokens[0], w, h, maxval, blob[i:]


class RgbEncoder:
    """Two stride-2 3x3 convolutions with GeLU; grid shrinks by 4 per axis."""

    def __init__(self, rng: np.random.Generator, channels: int = 32, dtype=ad.FP32):
        self.conv1 = Conv2dLayer(rng, 3, channels, 3, stride=2, dtype=dtype)
        self.conv2 = Conv2dLayer(rng, channels, channels, 3, stride=2, dtype=dtype)
        self.dtype = dtype

    def __call__(self, img: RgbImage) -> Tensor:
        if img.height < 4 or img.width < 4:
            raise ValidationError(f"image too small to embed: {img.height}x{img.width}")
        x = Tensor(img.pixels.astype(self.dtype), requires_grad=False)
        return ad.gelu(self.conv2(ad.gelu(self.conv1(x))))

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.conv1.named_params(prefix + "conv1."),
                **self.conv2.named_params(prefix + "conv2.")}


class FusionBlock:
    """concat(rgb, depth) -> 1x1 conv -> GeLU -> 3x3 conv, C channels out."""

    def __init__(self, rng: np.random.Generator, channels: int = 32, dtype=ad.FP32):
        self.mix = Conv2dLayer(rng, 2 * channels, channels, 1, dtype=dtype)
        self.conv = Conv2dLayer(rng, channels, channels, 3, dtype=dtype)

    def __call__(self, rgb_feat: Tensor, depth_feat: Tensor) -> Tensor:
        if rgb_feat.shape[1:] != depth_feat.shape[1:]:
            raise ShapeError(
                f"fusion grids differ: rgb {rgb_feat.shape} vs depth {depth_feat.shape}")
        return self.conv(ad.gelu(self.mix(ad.concat_channels(rgb_feat, depth_feat))))

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.mix.named_params(prefix + "mix."),
                **self.conv.named_params(prefix + "conv.")}
