"""Space-to-depth downsampling.

Each ``scale``×``scale`` spatial block is moved into the channel axis. For
output position (u, v) the channel vector is the concatenation, row offset
``i`` outer and column offset ``j`` inner, of the C-channel slabs
``x[:, :, u*scale + i, v*scale + j]``. No value is dropped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Conv2dParams, as_tensor4, conv2d

DEFAULT_SCALE = 2


def spd_rearrange(x, scale: int = DEFAULT_SCALE) -> np.ndarray:
    x = as_tensor4(x)
    if scale < 1:
        raise ContractError("scale must be >= 1")
    b, c, h, w = x.shape
    if h % scale or w % scale:
        raise ContractError(f"spatial dims {h}x{w} not divisible by scale {scale}")
    # (b, c, u, i, v, j) -> (b, i, j, c, u, v)
    y = x.reshape(b, c, h // scale, scale, w // scale, scale)
    y = y.transpose(0, 3, 5, 1, 2, 4)
    return np.ascontiguousarray(y.reshape(b, scale * scale * c, h // scale, w // scale))


def spd_inverse(xp, scale: int = DEFAULT_SCALE) -> np.ndarray:
    xp = as_tensor4(xp, "xp")
    b, cs, hs, ws = xp.shape
    if cs % (scale * scale):
        raise ContractError(f"{cs} channels not divisible by scale^2 = {scale * scale}")
    c = cs // (scale * scale)
    y = xp.reshape(b, scale, scale, c, hs, ws).transpose(0, 3, 4, 1, 5, 2)
    return np.ascontiguousarray(y.reshape(b, c, hs * scale, ws * scale))


@dataclass(frozen=True)
class SpdConfig:
    follow_conv: Conv2dParams
    scale: int = DEFAULT_SCALE

    def __post_init__(self):
        if self.scale < 2:
            raise ContractError("SPD scale must be >= 2")
        fc = self.follow_conv
        if fc.kernel_size != (3, 3) or fc.stride != 1 or fc.padding != 1:
            raise ContractError("follow conv must be 3x3, stride 1, same padding")
        if fc.in_channels % (self.scale ** 2):
            raise ContractError("follow conv input channels must be C * scale^2")

    @property
    def in_channels(self) -> int:
        return self.follow_conv.in_channels // self.scale ** 2

    @property
    def out_channels(self) -> int:
        return self.follow_conv.out_channels


def spdconv_forward(x, cfg: SpdConfig) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] != cfg.in_channels:
        raise ContractError(f"SPDConv expects {cfg.in_channels} channels, got {x.shape[1]}")
    return conv2d(spd_rearrange(x, cfg.scale), cfg.follow_conv)


def random_spdconv(rng: np.random.Generator, in_channels: int, out_channels: int,
                   scale: int = DEFAULT_SCALE) -> SpdConfig:
    c = in_channels * scale * scale
    w = rng.normal(0, 1 / np.sqrt(9 * c), (out_channels, c, 3, 3))
    return SpdConfig(Conv2dParams(w, np.zeros(out_channels), stride=1, padding=1), scale)


def flop_report(in_shape, out_channels: int, scale: int = DEFAULT_SCALE) -> dict:
    """MACs of SPDConv versus a stride-2 and a stride-1 3×3 conv on the raw map.

    Relative to stride 1, SPDConv has scale^2 times the MACs per output
    element and 1/scale^2 the output elements.
    """
    from .diffconv import flop_count

    b, c, h, w = in_shape
    spd = flop_count((b, c * scale * scale, h // scale, w // scale), out_channels)
    strided = flop_count(in_shape, out_channels, stride=scale)
    dense = flop_count(in_shape, out_channels, stride=1)
    per_out = lambda macs, hw: macs / (b * out_channels * hw)
    return {
        "spdconv_macs": spd,
        "strided_conv_macs": strided,
        "stride1_conv_macs": dense,
        "spd_over_strided": spd / strided,
        "macs_per_output_ratio": per_out(spd, (h // scale) * (w // scale)) / per_out(dense, h * w),
        "output_elements_ratio": ((h // scale) * (w // scale)) / (h * w),
    }
