"""Dense rank-4 tensor substrate.

Feature maps are plain ``numpy.ndarray`` objects of shape (B, C, H, W) and
dtype float64. Spectra are complex128 arrays of the same shape. The
functions here validate shapes, then hand the inner loops to the kernel
backend chosen in :mod:`sodkit.backend`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import backend
from .errors import ContractError

ACTIVATIONS = ("relu", "sigmoid", "identity")


def as_tensor4(x, name: str = "x") -> np.ndarray:
    """Validate ``x`` as a finite (B, C, H, W) array and return a float64 view."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ContractError(f"{name}: expected rank-4 (B, C, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ContractError(f"{name}: all dimensions must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContractError(f"{name}: non-finite values")
    return arr


def _finite_array(a, name: str, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ContractError(f"{name}: expected {ndim} dims, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContractError(f"{name}: non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Conv2dParams:
    """Weights (C_out, C_in/groups, k_h, k_w), optional bias, stride, padding, groups."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = _finite_array(self.weights, "weights", 4)
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = _finite_array(self.bias, "bias", 1)
            if b.shape[0] != w.shape[0]:
                raise ContractError(f"bias length {b.shape[0]} != out_channels {w.shape[0]}")
            object.__setattr__(self, "bias", b)
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ContractError("stride >= 1, padding >= 0, groups >= 1 required")
        if min(w.shape) < 1:
            raise ContractError(f"empty kernel shape {w.shape}")
        if w.shape[0] % self.groups:
            raise ContractError(f"out_channels {w.shape[0]} not divisible by groups {self.groups}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple:
        return self.weights.shape[2], self.weights.shape[3]

    def output_hw(self, h: int, w: int) -> tuple:
        k_h, k_w = self.kernel_size
        return ((h + 2 * self.padding - k_h) // self.stride + 1,
                (w + 2 * self.padding - k_w) // self.stride + 1)

    @classmethod
    def same(cls, weights, bias=None, groups: int = 1) -> "Conv2dParams":
        """Stride-1 convolution with padding k//2 (odd square or strip kernels)."""
        w = np.asarray(weights)
        k_h, k_w = w.shape[2], w.shape[3]
        if k_h != k_w and min(k_h, k_w) != 1:
            raise ContractError("same padding supports square or 1-wide strip kernels")
        if k_h == k_w:
            return cls(w, bias, stride=1, padding=k_h // 2, groups=groups)
        return StripConv2dParams(w, bias, stride=1, padding=max(k_h, k_w) // 2, groups=groups)


@dataclass(frozen=True)
class StripConv2dParams(Conv2dParams):
    """Same-padded 1×k or k×1 kernel: padding applies only along the long axis."""

    def pad_hw(self) -> tuple:
        k_h, k_w = self.kernel_size
        return k_h // 2, k_w // 2

    def output_hw(self, h: int, w: int) -> tuple:
        return h, w


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        for field in ("gamma", "beta", "mu", "sigma2"):
            object.__setattr__(self, field, _finite_array(getattr(self, field), field, 1))
        n = {len(self.gamma), len(self.beta), len(self.mu), len(self.sigma2)}
        if len(n) != 1:
            raise ContractError("batch-norm arrays must share one channel count")
        if (self.sigma2 < 0).any():
            raise ContractError("running variance must be >= 0")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be > 0")

    @property
    def channels(self) -> int:
        return len(self.gamma)

    def scale(self) -> np.ndarray:
        """Per-channel gamma / sqrt(sigma2 + eps)."""
        return self.gamma / np.sqrt(self.sigma2 + self.epsilon)

    @classmethod
    def identity(cls, channels: int, epsilon: float = 1e-5) -> "BatchNormParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels),
                   np.full(channels, 1.0 - epsilon), epsilon)


def conv2d(x, p: Conv2dParams, kernels=None) -> np.ndarray:
    """Zero-padded 2-D cross-correlation (no kernel flip), grouped if ``p.groups > 1``."""
    x = as_tensor4(x)
    if x.shape[1] != p.in_channels:
        raise ContractError(f"input has {x.shape[1]} channels, conv expects {p.in_channels}")
    if isinstance(p, StripConv2dParams):
        pad_h, pad_w = p.pad_hw()
    else:
        pad_h = pad_w = p.padding
    k_h, k_w = p.kernel_size
    out_h = (x.shape[2] + 2 * pad_h - k_h) // p.stride + 1
    out_w = (x.shape[3] + 2 * pad_w - k_w) // p.stride + 1
    if out_h < 1 or out_w < 1:
        raise ContractError(f"kernel {p.kernel_size} does not fit input {x.shape[2:]} with padding")
    if pad_h or pad_w:
        xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    else:
        xp = x
    bias = p.bias if p.bias is not None else np.zeros(p.out_channels)
    k = kernels if kernels is not None else backend.kernels
    return k.conv2d_valid(np.ascontiguousarray(xp), np.ascontiguousarray(p.weights),
                          np.ascontiguousarray(bias, dtype=np.float64),
                          p.stride, p.groups, out_h, out_w)


def batchnorm_infer(x, bn: BatchNormParams) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] != bn.channels:
        raise ContractError(f"input has {x.shape[1]} channels, batch norm has {bn.channels}")
    shape = (1, -1, 1, 1)
    return (x - bn.mu.reshape(shape)) / np.sqrt(bn.sigma2 + bn.epsilon).reshape(shape) \
        * bn.gamma.reshape(shape) + bn.beta.reshape(shape)


def activation(x, kind: str = "relu") -> np.ndarray:
    if kind == "identity":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        # split by sign so exp never overflows
        out = np.empty_like(x, dtype=np.float64)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    raise ContractError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def gap(x) -> np.ndarray:
    """Global average pooling to (B, C, 1, 1)."""
    x = as_tensor4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def dft2(x, kernels=None) -> np.ndarray:
    """Unnormalized 2-D DFT of every (batch, channel) plane."""
    z = np.asarray(x)
    if z.ndim != 4:
        raise ContractError(f"expected rank-4 input, got shape {z.shape}")
    k = kernels if kernels is not None else backend.kernels
    re = np.ascontiguousarray(z.real, dtype=np.float64)
    im = np.ascontiguousarray(z.imag if np.iscomplexobj(z) else np.zeros_like(re))
    fr, fi = k.dft2_planes(re, im, False)
    return fr + 1j * fi


def idft2(xf, kernels=None) -> np.ndarray:
    """Inverse of :func:`dft2`, carrying the 1/(H*W) factor."""
    z = np.asarray(xf)
    if z.ndim != 4:
        raise ContractError(f"expected rank-4 input, got shape {z.shape}")
    k = kernels if kernels is not None else backend.kernels
    re = np.ascontiguousarray(z.real, dtype=np.float64)
    im = np.ascontiguousarray(z.imag if np.iscomplexobj(z) else np.zeros_like(re))
    fr, fi = k.dft2_planes(re, im, True)
    return fr + 1j * fi


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ContractError("concat_channels needs at least one part")
    parts = [as_tensor4(p, f"parts[{i}]") for i, p in enumerate(parts)]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ContractError(f"cannot concatenate {p.shape} with {ref}")
    return np.concatenate(parts, axis=1)


def split_channels(x, sizes: Sequence[int]) -> list:
    x = as_tensor4(x)
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[1]:
        raise ContractError(f"split sizes {list(sizes)} do not partition {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(x[:, start:start + s].copy())
        start += s
    return out


def save_t4(path, x) -> None:
    """Write ``x`` as a .t4 file: four u64 LE dims then f64 LE values, row-major."""
    x = as_tensor4(x)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4Q", *x.shape))
        fh.write(x.astype("<f8").tobytes(order="C"))


def load_t4(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise ContractError(f"{path}: truncated .t4 header")
    dims = struct.unpack("<4Q", raw[:32])
    n = int(np.prod(dims))
    if len(raw) != 32 + 8 * n:
        raise ContractError(f"{path}: expected {n} values for shape {dims}")
    return as_tensor4(np.frombuffer(raw, dtype="<f8", offset=32).reshape(dims))
