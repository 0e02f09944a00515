"""Feature pyramid, RoI level selection and single-sample RoIAlign.

Level ``l`` has stride ``2**l``. Feature values live at pixel centers: the
value stored at integer index ``(i, j)`` of a level map sits at continuous
level coordinate ``(i + 0.5, j + 0.5)``. Sampling outside the map clamps to the
border.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping, Sequence

import numpy as np
import torch
from torch import nn

__all__ = [
    "LEVELS",
    "BBox",
    "ImageRaster",
    "FeaturePyramid",
    "PyramidNet",
    "PyramidError",
    "level_assign",
    "box_size",
    "bilinear_sample",
    "roi_align",
    "roi_align_batch",
    "write_fpyr",
    "read_fpyr",
]

LEVELS = (2, 3, 4, 5)


class PyramidError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0

    def __post_init__(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise PyramidError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clamp(self, w: float, h: float) -> "BBox":
        return BBox(
            min(max(self.x_min, 0.0), w), min(max(self.y_min, 0.0), h),
            min(max(self.x_max, 0.0), w), min(max(self.y_max, 0.0), h), self.score,
        )

    def dilate(self, frac: float) -> "BBox":
        dx, dy = self.width * frac / 2, self.height * frac / 2
        return BBox(self.x_min - dx, self.y_min - dy, self.x_max + dx, self.y_max + dy, self.score)


@dataclass
class ImageRaster:
    """Channel-major image, ``data`` shaped (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise PyramidError("image data must be (channels, height, width)")
        if not np.all(np.isfinite(self.data)):
            raise PyramidError("image values must be finite")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class FeaturePyramid:
    """Per-level maps shaped (C, H_l, W_l) for one image."""

    levels: dict[int, torch.Tensor]

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[0]


class PyramidNet(nn.Module):
    """Stack of stride-2 3x3 convolutions; outputs after strides 4, 8, 16 and 32."""

    def __init__(self, in_channels: int, channels: int) -> None:
        super().__init__()
        self.stem = nn.Conv2d(in_channels, channels, 3, stride=2, padding=1)
        self.down = nn.ModuleList([nn.Conv2d(channels, channels, 3, stride=2, padding=1) for _ in LEVELS])
        self.act = nn.GELU()

    def forward(self, images: torch.Tensor) -> dict[int, torch.Tensor]:
        if images.dim() == 3:
            images = images[None]
        h, w = images.shape[-2:]
        if h < 32 or w < 32:
            raise PyramidError(f"image must be at least 32x32, got {w}x{h}")
        x = self.act(self.stem(images))
        out = {}
        for level, conv in zip(LEVELS, self.down):
            x = self.act(conv(x))
            out[level] = x
        return out

    def build(self, img: ImageRaster) -> FeaturePyramid:
        dtype = self.stem.weight.dtype
        levels = self(torch.as_tensor(img.data, dtype=dtype))
        return FeaturePyramid({k: v[0] for k, v in levels.items()})


def box_size(box) -> float:
    x0, y0, x1, y1 = box.as_tuple() if isinstance(box, BBox) else box[:4]
    return math.sqrt((x1 - x0) * (y1 - y0))


def level_assign(box, l_c: int = 4, s_c: float = 224.0, levels: Sequence[int] = LEVELS) -> int:
    """``clamp(floor(l_c + log2(S / s_c)))`` with S the geometric-mean box side."""
    s = box_size(box)
    if not s > 0:
        raise PyramidError("zero-area box")
    lvl = math.floor(l_c + math.log2(s / s_c))
    return int(min(max(lvl, min(levels)), max(levels)))


def _axis_samples(lo: torch.Tensor, size: torch.Tensor, bins: int):
    """Integer corner index and weight of bin-center samples along one axis.

    ``lo`` and ``size`` are (R,) in level pixels. The origin's integer part is
    split off before anything else so that integer translations of the box
    reproduce the same weights bit for bit.
    """
    base = torch.floor(lo.detach())
    centers = (lo - base)[:, None] + (torch.arange(bins, dtype=lo.dtype) + 0.5)[None, :] * (size / bins)[:, None]
    u = centers - 0.5
    iu = torch.floor(u.detach())
    frac = u - iu
    i0 = (iu + base[:, None]).long()
    return i0, frac


def _gather2d(feat: torch.Tensor, bidx: torch.Tensor, iy: torch.Tensor, ix: torch.Tensor) -> torch.Tensor:
    """feat (B, C, H, W); bidx (R,); iy (R, P); ix (R, P) -> (R, C, P)."""
    H, W = feat.shape[-2:]
    iy = iy.clamp(0, H - 1)
    ix = ix.clamp(0, W - 1)
    flat = feat.flatten(2)  # (B, C, H*W)
    lin = iy * W + ix  # (R, P)
    src = flat[bidx]  # (R, C, HW)
    return torch.gather(src, 2, lin[:, None, :].expand(-1, src.shape[1], -1))


def _bilinear_from_corners(feat, bidx, iy0, fy, ix0, fx):
    v00 = _gather2d(feat, bidx, iy0, ix0)
    v01 = _gather2d(feat, bidx, iy0, ix0 + 1)
    v10 = _gather2d(feat, bidx, iy0 + 1, ix0)
    v11 = _gather2d(feat, bidx, iy0 + 1, ix0 + 1)
    fx = fx[:, None, :]
    fy = fy[:, None, :]
    return (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy


def bilinear_sample(feat: torch.Tensor, bidx: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``feat`` (B, C, H, W) at continuous pixel coordinates ``x, y`` (R, P).

    Returns (R, C, P). Out-of-map positions read the border value.
    """
    ux = x - 0.5
    uy = y - 0.5
    ix0 = torch.floor(ux.detach())
    iy0 = torch.floor(uy.detach())
    return _bilinear_from_corners(feat, bidx, iy0.long(), uy - iy0, ix0.long(), ux - ix0)


def roi_align_batch(
    feat: torch.Tensor,
    boxes: torch.Tensor,
    bidx: torch.Tensor,
    level: int,
    out_h: int = 7,
    out_w: int = 7,
) -> torch.Tensor:
    """RoIAlign with one bilinear sample at each bin center.

    feat: (B, C, H_l, W_l) level map. boxes: (R, 4) image-frame
    ``x_min, y_min, x_max, y_max``. Returns (R, C, out_h, out_w).
    """
    scale = 2.0**level
    b = boxes / scale
    ix0, fx = _axis_samples(b[:, 0], b[:, 2] - b[:, 0], out_w)
    iy0, fy = _axis_samples(b[:, 1], b[:, 3] - b[:, 1], out_h)
    R = boxes.shape[0]
    # broadcast to (R, out_h * out_w), row-major over bins
    ix0g = ix0[:, None, :].expand(R, out_h, out_w).reshape(R, -1)
    fxg = fx[:, None, :].expand(R, out_h, out_w).reshape(R, -1)
    iy0g = iy0[:, :, None].expand(R, out_h, out_w).reshape(R, -1)
    fyg = fy[:, :, None].expand(R, out_h, out_w).reshape(R, -1)
    out = _bilinear_from_corners(feat, bidx, iy0g, fyg, ix0g, fxg)
    return out.reshape(R, feat.shape[1], out_h, out_w)


def roi_align(fmap: torch.Tensor, box, level: int, out_h: int = 7, out_w: int = 7) -> torch.Tensor:
    """Single-map convenience wrapper: fmap (C, H_l, W_l) -> (C, out_h, out_w)."""
    if isinstance(box, BBox):
        box = torch.tensor(box.as_tuple(), dtype=fmap.dtype)
    box = torch.as_tensor(box, dtype=fmap.dtype)
    return roi_align_batch(fmap[None], box[None, :4], torch.zeros(1, dtype=torch.long), level, out_h, out_w)[0]


# ---------------------------------------------------------------------------
# FPYR feature files

_FPYR_MAGIC = b"FPYR"


def write_fpyr(path: str | Path, levels: Mapping[int, np.ndarray | torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(_FPYR_MAGIC)
        fh.write(struct.pack("<II", 1, len(levels)))
        for level in sorted(levels):
            arr = levels[level]
            if isinstance(arr, torch.Tensor):
                arr = arr.detach().cpu().numpy()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            if arr.ndim != 3:
                raise PyramidError("each level must be (C, H, W)")
            fh.write(struct.pack("<IIII", level, *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise PyramidError("truncated FPYR file")
    return buf


def read_fpyr(path: str | Path) -> FeaturePyramid:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _FPYR_MAGIC:
            raise PyramidError("not an FPYR file")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != 1:
            raise PyramidError(f"unsupported FPYR version {version}")
        levels = {}
        for _ in range(count):
            level, c, h, w = struct.unpack("<IIII", _read_exact(fh, 16))
            data = np.frombuffer(_read_exact(fh, 4 * c * h * w), dtype="<f4").reshape(c, h, w)
            levels[int(level)] = torch.from_numpy(data.astype(np.float32))
        if fh.read(1):
            raise PyramidError("trailing bytes in FPYR file")
    return FeaturePyramid(levels)
