"""Cross-stage dual-domain multi-scale attention.

DMAM projects the input with a 1×1 conv, runs four depthwise branches
(k×k, 1×k, k×1, 1×1) and the frequency–spatial–channel attention (FSCA)
branch on the projection, adds the unprojected input as a residual and
projects again. CSDMAM applies DMAM to one half of the channels and merges
it with the untouched other half through a 1×1 conv.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConsistencyError, ContractError
from .tensor import (
    Conv2dParams,
    activation,
    as_tensor4,
    concat_channels,
    conv2d,
    dft2,
    gap,
    idft2,
    split_channels,
)

DEFAULT_K = 31
IMAG_RESIDUE_TOL = 1e-8


def _check_1x1(p: Conv2dParams, c: Optional[int], name: str):
    if p.kernel_size != (1, 1) or p.stride != 1 or p.groups != 1:
        raise ContractError(f"{name} must be a dense 1x1 stride-1 conv")
    if c is not None and (p.in_channels != c or p.out_channels != c):
        raise ContractError(f"{name} must map {c} -> {c} channels")


@dataclass(frozen=True)
class FscaParams:
    chan_attn_conv: Conv2dParams
    sc_attn_conv: Conv2dParams

    def __post_init__(self):
        c = self.chan_attn_conv.in_channels
        _check_1x1(self.chan_attn_conv, c, "chan_attn_conv")
        _check_1x1(self.sc_attn_conv, c, "sc_attn_conv")

    @property
    def channels(self) -> int:
        return self.chan_attn_conv.in_channels


def fsca_forward(x, p: FscaParams, attn_override=None, taps: Optional[dict] = None) -> np.ndarray:
    """Frequency–spatial–channel attention.

    ``attn_override=(a_c, a_sc)`` replaces both sigmoid attention maps with
    fixed values (scalars or arrays broadcastable to (B, C, 1, 1)); test hook.
    """
    x = as_tensor4(x)
    if x.shape[1] != p.channels:
        raise ContractError(f"FSCA expects {p.channels} channels, got {x.shape[1]}")
    if attn_override is None:
        pooled = gap(x)
        a_c = activation(conv2d(pooled, p.chan_attn_conv), "sigmoid")
        a_sc = activation(conv2d(pooled, p.sc_attn_conv), "sigmoid")
    else:
        a_c, a_sc = (np.broadcast_to(np.asarray(a, dtype=np.float64), (x.shape[0], x.shape[1], 1, 1))
                     for a in attn_override)
    xf = dft2(x)
    xf_scaled = a_c * xf
    back = idft2(xf_scaled)
    scale = float(np.abs(x).max())
    residue = float(np.abs(back.imag).max())
    if residue > IMAG_RESIDUE_TOL * max(scale, np.finfo(float).tiny):
        raise ConsistencyError(f"inverse DFT imaginary residue {residue:.3e} exceeds tolerance")
    x_fs = np.ascontiguousarray(back.real)
    out = a_sc * x_fs
    if taps is not None:
        taps.update(a_c=np.array(a_c), a_sc=np.array(a_sc), imag_residue=residue, x_fs=x_fs)
    return out


@dataclass(frozen=True)
class DmamParams:
    proj_in: Conv2dParams
    dw_kk: Conv2dParams
    dw_1k: Conv2dParams
    dw_k1: Conv2dParams
    dw_11: Conv2dParams
    fsca: FscaParams
    proj_out: Conv2dParams
    k: int = DEFAULT_K

    def __post_init__(self):
        c = self.proj_in.in_channels
        _check_1x1(self.proj_in, c, "proj_in")
        _check_1x1(self.proj_out, c, "proj_out")
        expected = {"dw_kk": (self.k, self.k), "dw_1k": (1, self.k),
                    "dw_k1": (self.k, 1), "dw_11": (1, 1)}
        for name, ks in expected.items():
            p = getattr(self, name)
            if p.kernel_size != ks:
                raise ContractError(f"{name} must be {ks[0]}x{ks[1]}, got {p.kernel_size}")
            if p.groups != c or p.in_channels != c or p.out_channels != c or p.stride != 1:
                raise ContractError(f"{name} must be depthwise over {c} channels, stride 1")
            if p.output_hw(64, 64) != (64, 64):
                raise ContractError(f"{name} must use same padding")
        if self.fsca.channels != c:
            raise ContractError("FSCA channel count mismatch")

    @property
    def channels(self) -> int:
        return self.proj_in.in_channels


def dmam_forward(x, p: DmamParams, fsca_override=None, taps: Optional[dict] = None) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] != p.channels:
        raise ContractError(f"DMAM expects {p.channels} channels, got {x.shape[1]}")
    x_n = conv2d(x, p.proj_in)
    branches = {
        "dw_1k": conv2d(x_n, p.dw_1k),
        "dw_k1": conv2d(x_n, p.dw_k1),
        "dw_kk": conv2d(x_n, p.dw_kk),
        "dw_11": conv2d(x_n, p.dw_11),
        "fsca": fsca_forward(x_n, p.fsca, fsca_override),
    }
    # fixed summation order
    y = x.copy()
    for name in ("dw_1k", "dw_k1", "dw_kk", "dw_11", "fsca"):
        y = y + branches[name]
    out = conv2d(y, p.proj_out)
    if taps is not None:
        taps.update(x_n=x_n, post_branch=y, **{f"branch_{k}": v for k, v in branches.items()})
    return out


@dataclass(frozen=True)
class CsdmamParams:
    inner: DmamParams
    merge_conv: Conv2dParams
    split_ratio: float = 0.5

    def __post_init__(self):
        total = self.merge_conv.in_channels
        if self.branch_channels(total) != self.inner.channels:
            raise ContractError("inner DMAM channels do not match the split")
        _check_1x1(self.merge_conv, None, "merge_conv")

    def branch_channels(self, total: int) -> int:
        return int(round(total * self.split_ratio))

    @property
    def in_channels(self) -> int:
        return self.merge_conv.in_channels


def csdmam_forward(x, p: CsdmamParams, fsca_override=None, taps: Optional[dict] = None) -> np.ndarray:
    x = as_tensor4(x)
    c = x.shape[1]
    if c < 2:
        raise ContractError("CSDMAM needs at least 2 channels")
    if c != p.in_channels:
        raise ContractError(f"CSDMAM expects {p.in_channels} channels, got {c}")
    n_branch = p.branch_channels(c)
    x_branch, x_identity = split_channels(x, [n_branch, c - n_branch])
    inner_taps = {} if taps is not None else None
    processed = dmam_forward(x_branch, p.inner, fsca_override, inner_taps)
    pre_merge = concat_channels([processed, x_identity])
    out = conv2d(pre_merge, p.merge_conv)
    if taps is not None:
        taps.update(inner_taps)
        taps.update(identity_half=x_identity, pre_merge=pre_merge, output=out)
    return out


def _dw(rng, c, kh, kw, std):
    w = rng.normal(0, std, (c, 1, kh, kw)) if std else np.zeros((c, 1, kh, kw))
    return Conv2dParams.same(w, np.zeros(c), groups=c)


def _pw(rng, c_in, c_out, std=None):
    std = 1 / np.sqrt(c_in) if std is None else std
    return Conv2dParams(rng.normal(0, std, (c_out, c_in, 1, 1)), np.zeros(c_out))


def identity_1x1(c: int) -> Conv2dParams:
    return Conv2dParams(np.eye(c).reshape(c, c, 1, 1), np.zeros(c))


def random_dmam(rng: np.random.Generator, channels: int, k: int = DEFAULT_K) -> DmamParams:
    c = channels
    return DmamParams(
        proj_in=_pw(rng, c, c),
        dw_kk=_dw(rng, c, k, k, 1.0 / k),
        dw_1k=_dw(rng, c, 1, k, 1.0 / np.sqrt(k)),
        dw_k1=_dw(rng, c, k, 1, 1.0 / np.sqrt(k)),
        dw_11=_dw(rng, c, 1, 1, 1.0),
        fsca=FscaParams(_pw(rng, c, c), _pw(rng, c, c)),
        proj_out=_pw(rng, c, c),
        k=k,
    )


def zero_dmam(channels: int, k: int = DEFAULT_K) -> DmamParams:
    """All branches zero, both projections identity."""
    c = channels
    z = lambda kh, kw: Conv2dParams.same(np.zeros((c, 1, kh, kw)), np.zeros(c), groups=c)
    zero_pw = Conv2dParams(np.zeros((c, c, 1, 1)), np.zeros(c))
    return DmamParams(identity_1x1(c), z(k, k), z(1, k), z(k, 1), z(1, 1),
                      FscaParams(zero_pw, zero_pw), identity_1x1(c), k)


def random_csdmam(rng: np.random.Generator, channels: int, k: int = DEFAULT_K) -> CsdmamParams:
    half = int(round(channels * 0.5))
    return CsdmamParams(random_dmam(rng, half, k), _pw(rng, channels, channels))
