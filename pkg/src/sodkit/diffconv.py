"""Edge-enhanced convolution (EEConv) and its inference-time fusion.

An EEConv sums a central-difference, a horizontal-difference, a
vertical-difference and a plain 3×3 branch, then applies batch norm and an
activation. Each difference operator is linear and expressible as an
effective 3×3 kernel, so the whole block collapses into one convolution:

    W_sum = cdc(W1) + hdc(W2) + vdc(W3) + W4
    alpha = gamma / sqrt(var + eps)
    W_final = alpha * W_sum,  b_final = alpha * (b_sum - mu) + beta
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractError
from .tensor import (
    ACTIVATIONS,
    BatchNormParams,
    Conv2dParams,
    activation,
    as_tensor4,
    batchnorm_infer,
    conv2d,
)

BRANCHES = ("cdc", "hdc", "vdc", "van")


def _check3x3(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim < 2 or w.shape[-2:] != (3, 3):
        raise ContractError(f"difference kernels must be 3x3, got trailing shape {w.shape[-2:]}")
    return w


def cdc_effective_kernel(w) -> np.ndarray:
    """Central difference: the center tap is debited by the kernel sum.

    Convolving with the result equals convolving the raw kernel with
    ``x(p + offset) - x(p)``, so the effective kernel sums to zero.
    """
    w = _check3x3(w)
    out = w.copy()
    out[..., 1, 1] -= w.sum(axis=(-2, -1))
    return out


def hdc_effective_kernel(w) -> np.ndarray:
    """Horizontal difference: W(i, j) - W(i, 2 - j). Middle column is zero."""
    w = _check3x3(w)
    return w - w[..., :, ::-1]


def vdc_effective_kernel(w) -> np.ndarray:
    """Vertical difference: W(i, j) - W(2 - i, j). Middle row is zero."""
    w = _check3x3(w)
    return w - w[..., ::-1, :]


_EFFECTIVE = {
    "cdc": cdc_effective_kernel,
    "hdc": hdc_effective_kernel,
    "vdc": vdc_effective_kernel,
    "van": lambda w: np.asarray(w, dtype=np.float64),
}


@dataclass(frozen=True)
class ConvBranchSet:
    """Raw trainable parameters of one EEConv.

    ``include_vanilla=False`` gives the three-branch (difference-only)
    reading of the branch sum.
    """

    w_cdc: np.ndarray
    w_hdc: np.ndarray
    w_vdc: np.ndarray
    w_van: np.ndarray
    b_cdc: np.ndarray
    b_hdc: np.ndarray
    b_vdc: np.ndarray
    b_van: np.ndarray
    bn: BatchNormParams
    activation: str = "relu"
    include_vanilla: bool = True

    def __post_init__(self):
        shape = None
        for name in BRANCHES:
            w = np.array(getattr(self, f"w_{name}"), dtype=np.float64)
            b = np.array(getattr(self, f"b_{name}"), dtype=np.float64)
            if w.ndim != 4 or w.shape[2:] != (3, 3):
                raise ContractError(f"w_{name}: expected (C_out, C_in, 3, 3), got {w.shape}")
            if shape is None:
                shape = w.shape
            elif w.shape != shape:
                raise ContractError(f"w_{name} shape {w.shape} differs from {shape}")
            if b.shape != (shape[0],):
                raise ContractError(f"b_{name}: expected length {shape[0]}, got {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ContractError(f"branch {name}: non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            object.__setattr__(self, f"w_{name}", w)
            object.__setattr__(self, f"b_{name}", b)
        if self.bn.channels != shape[0]:
            raise ContractError(f"bn has {self.bn.channels} channels, kernels have {shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def out_channels(self) -> int:
        return self.w_van.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w_van.shape[1]

    def active_branches(self) -> tuple:
        return BRANCHES if self.include_vanilla else BRANCHES[:3]

    def effective_kernels(self) -> dict:
        return {k: _EFFECTIVE[k](getattr(self, f"w_{k}")) for k in self.active_branches()}

    def summed(self) -> tuple:
        """(W_sum, b_sum) over the active branches, effective kernels applied."""
        eff = self.effective_kernels()
        w_sum = np.zeros_like(self.w_van)
        b_sum = np.zeros_like(self.b_van)
        for k in self.active_branches():
            w_sum = w_sum + eff[k]
            b_sum = b_sum + getattr(self, f"b_{k}")
        return w_sum, b_sum

    @classmethod
    def random(cls, rng: np.random.Generator, in_channels: int, out_channels: int,
               activation: str = "relu", include_vanilla: bool = True) -> "ConvBranchSet":
        """Uniform[-0.5, 0.5] kernels and biases; BN variance in [0.5, 2]."""
        shape = (out_channels, in_channels, 3, 3)
        kw = {}
        for k in BRANCHES:
            kw[f"w_{k}"] = rng.uniform(-0.5, 0.5, shape)
            kw[f"b_{k}"] = rng.uniform(-0.5, 0.5, out_channels)
        bn = BatchNormParams(
            gamma=rng.uniform(0.5, 1.5, out_channels),
            beta=rng.uniform(-0.5, 0.5, out_channels),
            mu=rng.uniform(-0.5, 0.5, out_channels),
            sigma2=rng.uniform(0.5, 2.0, out_channels),
        )
        return cls(bn=bn, activation=activation, include_vanilla=include_vanilla, **kw)


@dataclass(frozen=True)
class FusedConv:
    w_final: np.ndarray
    b_final: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        w = np.array(self.w_final, dtype=np.float64)
        b = np.array(self.b_final, dtype=np.float64)
        if w.ndim != 4 or w.shape[2:] != (3, 3) or b.shape != (w.shape[0],):
            raise ContractError(f"fused kernel/bias shapes invalid: {w.shape}, {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ContractError("fused parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "w_final", w)
        object.__setattr__(self, "b_final", b)

    @property
    def out_channels(self) -> int:
        return self.w_final.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w_final.shape[1]

    def conv_params(self) -> Conv2dParams:
        return Conv2dParams(self.w_final, self.b_final, stride=1, padding=1)


def _check_input(x, in_channels: int) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] != in_channels:
        raise ContractError(f"input has {x.shape[1]} channels, EEConv expects {in_channels}")
    return x


def eeconv_forward_train(x, branches: ConvBranchSet) -> np.ndarray:
    """Training-form forward: branch sum, conv, BN with running stats, activation."""
    x = _check_input(x, branches.in_channels)
    w_sum, b_sum = branches.summed()
    z = conv2d(x, Conv2dParams(w_sum, b_sum, stride=1, padding=1))
    return activation(batchnorm_infer(z, branches.bn), branches.activation)


def eeconv_forward_branchwise(x, branches: ConvBranchSet) -> np.ndarray:
    """Evaluate each branch as its own convolution and sum the feature maps.

    Four times the MACs of the fused path; kept as an independent check of
    the branch-sum linearity and as the benchmark's unfused baseline.
    """
    x = _check_input(x, branches.in_channels)
    eff = branches.effective_kernels()
    z = None
    for k in branches.active_branches():
        y = conv2d(x, Conv2dParams(eff[k], getattr(branches, f"b_{k}"), stride=1, padding=1))
        z = y if z is None else z + y
    return activation(batchnorm_infer(z, branches.bn), branches.activation)


def fuse(branches: ConvBranchSet) -> FusedConv:
    w_sum, b_sum = branches.summed()
    bn = branches.bn
    alpha = bn.scale()
    w_final = alpha[:, None, None, None] * w_sum
    b_final = alpha * (b_sum - bn.mu) + bn.beta
    return FusedConv(w_final, b_final, branches.activation)


def eeconv_forward_fused(x, fused: FusedConv) -> np.ndarray:
    x = _check_input(x, fused.in_channels)
    return activation(conv2d(x, fused.conv_params()), fused.activation)


def flop_count(in_shape: Sequence[int], out_channels: int, kernel: Sequence[int] = (3, 3),
               stride: int = 1, padding: Optional[int] = None, groups: int = 1,
               branches: int = 1) -> int:
    """Multiply-accumulate count of a convolution on an input of ``in_shape``.

    ``branches`` multiplies the count for composites that evaluate several
    same-shaped convolutions separately (4 for the unfused EEConv).
    """
    b, c_in, h, w = (int(v) for v in in_shape)
    k_h, k_w = kernel
    if padding is None:
        padding = k_h // 2
    if c_in % groups or out_channels % groups:
        raise ContractError("channels must be divisible by groups")
    out_h = (h + 2 * padding - k_h) // stride + 1
    out_w = (w + 2 * padding - k_w) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ContractError("kernel does not fit input")
    out_elems = b * out_channels * out_h * out_w
    return branches * out_elems * (c_in // groups) * k_h * k_w


def eeconv_flops(in_shape: Sequence[int], out_channels: int, fused: bool) -> int:
    return flop_count(in_shape, out_channels, branches=1 if fused else 4)


# ---------------------------------------------------------------------------
# EEBlock and EE-ResNet


@dataclass(frozen=True)
class Shortcut:
    """1×1 projection shortcut with batch norm (channel or stride change)."""

    conv: Conv2dParams
    bn: BatchNormParams

    def __post_init__(self):
        if self.conv.kernel_size != (1, 1):
            raise ContractError("projection shortcut must be 1x1")
        if self.bn.channels != self.conv.out_channels:
            raise ContractError("shortcut bn channel mismatch")


@dataclass(frozen=True)
class EEBlockParams:
    """Residual basic block whose second 3×3 conv is an EEConv.

    ``shortcut=None`` is the identity shortcut.
    """

    conv1: Conv2dParams
    bn1: BatchNormParams
    eeconv: Union[ConvBranchSet, FusedConv]
    shortcut: Optional[Shortcut] = None
    activation: str = "relu"

    def __post_init__(self):
        if self.conv1.kernel_size != (3, 3):
            raise ContractError("conv1 must be 3x3")
        if self.bn1.channels != self.conv1.out_channels:
            raise ContractError("bn1 channel mismatch")
        if self.eeconv.in_channels != self.conv1.out_channels:
            raise ContractError("EEConv input channels must equal conv1 output channels")
        if self.shortcut is None:
            if self.conv1.stride != 1 or self.conv1.in_channels != self.eeconv.out_channels:
                raise ContractError("identity shortcut needs stride 1 and equal channels")
        else:
            sc = self.shortcut.conv
            if sc.stride != self.conv1.stride or sc.out_channels != self.eeconv.out_channels \
                    or sc.in_channels != self.conv1.in_channels:
                raise ContractError("shortcut does not match main branch shape")

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    @property
    def out_channels(self) -> int:
        return self.eeconv.out_channels

    def fused(self) -> "EEBlockParams":
        if isinstance(self.eeconv, FusedConv):
            return self
        return EEBlockParams(self.conv1, self.bn1, fuse(self.eeconv), self.shortcut, self.activation)


def eeconv_forward(x, conv: Union[ConvBranchSet, FusedConv]) -> np.ndarray:
    if isinstance(conv, FusedConv):
        return eeconv_forward_fused(x, conv)
    return eeconv_forward_train(x, conv)


def eeblock_forward(x, p: EEBlockParams) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] != p.in_channels:
        raise ContractError(f"block expects {p.in_channels} channels, got {x.shape[1]}")
    h = activation(batchnorm_infer(conv2d(x, p.conv1), p.bn1), p.activation)
    main = eeconv_forward(h, p.eeconv)
    if p.shortcut is None:
        skip = x
    else:
        skip = batchnorm_infer(conv2d(x, p.shortcut.conv), p.shortcut.bn)
    if skip.shape != main.shape:
        raise ContractError(f"shortcut shape {skip.shape} != main shape {main.shape}")
    return activation(main + skip, p.activation)


def ee_resnet_stage(x, blocks: Sequence[EEBlockParams]) -> np.ndarray:
    x = as_tensor4(x)
    for i, blk in enumerate(blocks):
        if x.shape[1] != blk.in_channels:
            raise ContractError(f"block {i} expects {blk.in_channels} channels, got {x.shape[1]}")
        x = eeblock_forward(x, blk)
    return x


def _random_bn(rng, c):
    return BatchNormParams(rng.uniform(0.5, 1.5, c), rng.uniform(-0.1, 0.1, c),
                           rng.uniform(-0.1, 0.1, c), rng.uniform(0.5, 2.0, c))


def random_eeblock(rng: np.random.Generator, in_channels: int, out_channels: int,
                   stride: int = 1, weight_scale: Optional[float] = None) -> EEBlockParams:
    """Random EEBlock. The EEConv slot uses identity activation, as in the
    second conv of a basic block; the block applies relu after the add."""
    if weight_scale is None:
        weight_scale = 1.0 / np.sqrt(9 * in_channels)
    conv1 = Conv2dParams(rng.normal(0, weight_scale, (out_channels, in_channels, 3, 3)),
                         None, stride=stride, padding=1)
    ee = ConvBranchSet.random(rng, out_channels, out_channels, activation="identity")
    scale = 1.0 / np.sqrt(9 * out_channels)
    ee = ConvBranchSet(**{f"w_{k}": getattr(ee, f"w_{k}") * scale for k in BRANCHES},
                       **{f"b_{k}": getattr(ee, f"b_{k}") * 0.1 for k in BRANCHES},
                       bn=ee.bn, activation="identity")
    shortcut = None
    if stride != 1 or in_channels != out_channels:
        shortcut = Shortcut(Conv2dParams(rng.normal(0, 1 / np.sqrt(in_channels),
                                                    (out_channels, in_channels, 1, 1)),
                                         None, stride=stride, padding=0),
                            _random_bn(rng, out_channels))
    return EEBlockParams(conv1, _random_bn(rng, out_channels), ee, shortcut)


@dataclass
class EEResNet:
    """Stages of EEBlocks; the first block of every stage after the first halves
    the resolution and doubles the width."""

    stages: list = field(default_factory=list)

    def forward(self, x, taps: Optional[list] = None) -> np.ndarray:
        for stage in self.stages:
            x = ee_resnet_stage(x, stage)
            if taps is not None:
                taps.append(x)
        return x

    def fused(self) -> "EEResNet":
        return EEResNet([[b.fused() for b in stage] for stage in self.stages])


def build_ee_resnet(rng: np.random.Generator, in_channels: int, width: int = 64,
                    layout: Sequence[int] = (2, 2, 2, 2)) -> EEResNet:
    """ResNet-18 style stage layout ([2, 2, 2, 2] by default) at a given base width."""
    stages, c_in = [], in_channels
    for s, n_blocks in enumerate(layout):
        c_out = width * 2 ** s
        blocks = []
        for i in range(n_blocks):
            stride = 2 if (s > 0 and i == 0) else 1
            blocks.append(random_eeblock(rng, c_in, c_out, stride))
            c_in = c_out
        stages.append(blocks)
    return EEResNet(stages)


def save_fused(fused: FusedConv, stem) -> tuple:
    """Write ``<stem>.w.t4``, ``<stem>.b.t4`` and a ``<stem>.json`` sidecar."""
    import json
    from pathlib import Path

    from .tensor import save_t4

    stem = Path(stem)
    w_path = stem.with_name(stem.name + ".w.t4")
    b_path = stem.with_name(stem.name + ".b.t4")
    meta_path = stem.with_name(stem.name + ".json")
    save_t4(w_path, fused.w_final)
    save_t4(b_path, fused.b_final.reshape(1, -1, 1, 1))
    meta_path.write_text(json.dumps({
        "out_channels": fused.out_channels,
        "in_channels": fused.in_channels,
        "activation": fused.activation,
    }, indent=2))
    return w_path, b_path, meta_path


def load_fused(stem) -> FusedConv:
    import json
    from pathlib import Path

    from .tensor import load_t4

    stem = Path(stem)
    meta = json.loads(stem.with_name(stem.name + ".json").read_text())
    w = load_t4(stem.with_name(stem.name + ".w.t4"))
    b = load_t4(stem.with_name(stem.name + ".b.t4")).reshape(-1)
    if w.shape[:2] != (meta["out_channels"], meta["in_channels"]):
        raise ContractError(f"kernel shape {w.shape} disagrees with sidecar {meta}")
    return FusedConv(w, b, meta["activation"])
