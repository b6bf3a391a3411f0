"""Focaler-Wise-SIoU bounding-box regression loss.

Boxes are (cx, cy, w, h). All functions accept either single boxes (length-4
sequences or :class:`BoxCWH`) or arrays of shape (N, 4) and are vectorized
over N. Gradients are taken with respect to the predicted box only and are
returned in (cx, cy, w, h) order.

Non-smooth points (focaler clip corners, min/max switches, |.| at zero)
get derivative 0 on the switching set.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractError


class BoxCWH(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class FocalerConfig:
    d: float = 0.0
    u: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.d < self.u <= 1.0:
            raise ContractError(f"need 0 <= d < u <= 1, got d={self.d}, u={self.u}")


@dataclass(frozen=True)
class SiouConfig:
    theta: float = 4.0
    eps_angle: float = 1e-4
    symmetric_shape_exponent: bool = False

    def __post_init__(self):
        if self.theta < 1 or not self.eps_angle > 0:
            raise ContractError("theta >= 1 and eps_angle > 0 required")


@dataclass(frozen=True)
class WiseConfig:
    """Modulation settings.

    ``modulation="gamma"`` multiplies the SIoU loss by gamma(beta);
    ``"literal"`` uses beta * beta**delta instead, for comparison.
    """

    alpha: float = 1.9
    delta: float = 3.0
    detach_modulation: bool = True
    modulation: str = "gamma"

    def __post_init__(self):
        if not self.alpha > 1 or not self.delta > 0:
            raise ContractError("alpha > 1 and delta > 0 required")
        if self.modulation not in ("gamma", "literal"):
            raise ContractError(f"unknown modulation {self.modulation!r}")


@dataclass(frozen=True)
class WiseState:
    ema_mean: float = 0.0
    momentum: float = 1e-2
    initialized: bool = False

    def __post_init__(self):
        if not 0 < self.momentum <= 1:
            raise ContractError("momentum must be in (0, 1]")


def _boxes(b) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ContractError(f"boxes must have 4 coordinates, got shape {arr.shape}")
    arr = arr.reshape(-1, 4)
    if not np.isfinite(arr).all() or (arr[:, 2:] <= 0).any():
        raise ContractError("boxes need finite coordinates and w, h > 0")
    return arr


def _squeeze(v, single: bool):
    return v[0] if single else v


def _is_single(b) -> bool:
    return np.asarray(b).ndim == 1


def cwh_to_corners(b) -> np.ndarray:
    single = _is_single(b)
    a = _boxes(b)
    out = np.stack([a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2,
                    a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2], axis=1)
    return _squeeze(out, single)


def corners_to_cwh(c) -> np.ndarray:
    single = np.asarray(c).ndim == 1
    a = np.asarray(c, dtype=np.float64).reshape(-1, 4)
    out = np.stack([(a[:, 0] + a[:, 2]) / 2, (a[:, 1] + a[:, 3]) / 2,
                    a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]], axis=1)
    return _squeeze(out, single)


# ---------------------------------------------------------------------------
# forward terms with gradients
#
# Each helper returns (value, grad) with value shape (N,) and grad shape
# (N, 4) = d value / d (cx_p, cy_p, w_p, h_p).


def _axis_overlap(pc, ps, tc, ts, axis: int, n: int):
    """Intersection extent and enclosing extent along one axis, with grads."""
    lo_p, hi_p = pc - ps / 2, pc + ps / 2
    lo_t, hi_t = tc - ts / 2, tc + ts / 2
    # d lo_p / d(center, size) = (1, -1/2); d hi_p = (1, 1/2)
    c_idx, s_idx = (0, 2) if axis == 0 else (1, 3)

    def grad(mask, ds):
        g = np.zeros((n, 4))
        g[:, c_idx] = mask
        g[:, s_idx] = mask * ds
        return g

    inter_raw = np.minimum(hi_p, hi_t) - np.maximum(lo_p, lo_t)
    g_inter = grad((hi_p < hi_t).astype(float), 0.5) - grad((lo_p > lo_t).astype(float), -0.5)
    pos = inter_raw > 0
    inter = np.where(pos, inter_raw, 0.0)
    g_inter = g_inter * pos[:, None]

    encl = np.maximum(hi_p, hi_t) - np.minimum(lo_p, lo_t)
    g_encl = grad((hi_p > hi_t).astype(float), 0.5) - grad((lo_p < lo_t).astype(float), -0.5)
    return inter, g_inter, encl, g_encl


def _iou_terms(p, t):
    n = len(p)
    iw, g_iw, ew, g_ew = _axis_overlap(p[:, 0], p[:, 2], t[:, 0], t[:, 2], 0, n)
    ih, g_ih, eh, g_eh = _axis_overlap(p[:, 1], p[:, 3], t[:, 1], t[:, 3], 1, n)
    inter = iw * ih
    g_inter = ih[:, None] * g_iw + iw[:, None] * g_ih
    union = p[:, 2] * p[:, 3] + t[:, 2] * t[:, 3] - inter
    g_union = -g_inter
    g_union[:, 2] += p[:, 3]
    g_union[:, 3] += p[:, 2]
    iou = inter / union
    g_iou = (g_inter * union[:, None] - inter[:, None] * g_union) / (union ** 2)[:, None]
    return iou, g_iou, (ew, g_ew, eh, g_eh)


def iou(bp, bt) -> np.ndarray:
    single = _is_single(bp) and _is_single(bt)
    p, t = np.broadcast_arrays(_boxes(bp), _boxes(bt))
    return _squeeze(_iou_terms(p, t)[0], single)


def _focaler(iou_raw, g_iou, cfg: FocalerConfig):
    r = np.abs(iou_raw - cfg.d) / (cfg.u - cfg.d)
    val = np.clip(r, 0.0, 1.0)
    slope = np.sign(iou_raw - cfg.d) / (cfg.u - cfg.d) * ((r > 0) & (r < 1))
    return val, slope[:, None] * g_iou


def focaler_normalize(iou_raw, cfg: FocalerConfig = FocalerConfig()):
    v = np.asarray(iou_raw, dtype=np.float64)
    out = np.clip(np.abs(v - cfg.d) / (cfg.u - cfg.d), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _siou_terms(p, t, encl, cfg: SiouConfig):
    n = len(p)
    ew, g_ew, eh, g_eh = encl
    ddx = p[:, 0] - t[:, 0]
    ddy = p[:, 1] - t[:, 1]
    dx, dy = np.abs(ddx), np.abs(ddy)
    g_dx = np.zeros((n, 4))
    g_dx[:, 0] = np.sign(ddx)
    g_dy = np.zeros((n, 4))
    g_dy[:, 1] = np.sign(ddy)

    # angle
    use_x = dx < dy
    m = np.where(use_x, dx, dy)
    g_m = np.where(use_x[:, None], g_dx, g_dy * (dy < dx)[:, None])
    r = np.sqrt(dx ** 2 + dy ** 2 + cfg.eps_angle)
    g_r = (dx[:, None] * g_dx + dy[:, None] * g_dy) / r[:, None]
    s = m / r
    g_s = (g_m * r[:, None] - m[:, None] * g_r) / (r ** 2)[:, None]
    phi = np.arcsin(s)
    sin2 = np.sin(2 * phi)
    c = np.sqrt(1 - s ** 2)
    g_sin2 = (2 * (1 - 2 * s ** 2) / c)[:, None] * g_s
    angle = sin2 - 2
    g_angle = g_sin2

    # distance
    rho_x = dx / ew
    g_rho_x = (g_dx * ew[:, None] - dx[:, None] * g_ew) / (ew ** 2)[:, None]
    rho_y = dy / eh
    g_rho_y = (g_dy * eh[:, None] - dy[:, None] * g_eh) / (eh ** 2)[:, None]
    ex = np.exp(angle * rho_x)
    ey = np.exp(angle * rho_y)
    dist = 2 - ex - ey
    g_dist = -ex[:, None] * (g_angle * rho_x[:, None] + angle[:, None] * g_rho_x) \
             - ey[:, None] * (g_angle * rho_y[:, None] + angle[:, None] * g_rho_y)

    # shape
    def omega(ps, ts, idx):
        big = np.maximum(ps, ts)
        om = np.abs(ps - ts) / big
        g = np.zeros((n, 4))
        # p > t: 1 - t/p ; p < t: (t - p)/t
        g[:, idx] = np.where(ps > ts, ts / ps ** 2, np.where(ps < ts, -1.0 / ts, 0.0))
        e = np.exp(-om)
        return 1 - e, e[:, None] * g

    sw, g_sw = omega(p[:, 2], t[:, 2], 2)
    sh, g_sh = omega(p[:, 3], t[:, 3], 3)
    th = cfg.theta
    shape_h = sh ** th
    g_shape_h = (th * sh ** (th - 1))[:, None] * g_sh
    if cfg.symmetric_shape_exponent:
        shape_w = sw ** th
        g_shape_w = (th * sw ** (th - 1))[:, None] * g_sw
    else:
        shape_w, g_shape_w = sw, g_sw
    shape = shape_w + shape_h
    g_shape = g_shape_w + g_shape_h
    return (angle, g_angle), (dist, g_dist), (shape, g_shape)


def siou_terms(bp, bt, cfg: SiouConfig = SiouConfig()):
    """(angle, dist, shape) penalties."""
    single = _is_single(bp) and _is_single(bt)
    p, t = np.broadcast_arrays(_boxes(bp), _boxes(bt))
    _, _, encl = _iou_terms(p, t)
    (a, _), (d, _), (s, _) = _siou_terms(p, t, encl, cfg)
    return _squeeze(a, single), _squeeze(d, single), _squeeze(s, single)


def _core(p, t, fcfg, scfg):
    iou_raw, g_iou, encl = _iou_terms(p, t)
    f, g_f = _focaler(iou_raw, g_iou, fcfg)
    _, (dist, g_dist), (shape, g_shape) = _siou_terms(p, t, encl, scfg)
    core = (1 - f) + (dist + shape) / 2
    g_core = -g_f + (g_dist + g_shape) / 2
    return core, g_core, iou_raw, g_iou


def siou_core_loss(bp, bt, fcfg: FocalerConfig = FocalerConfig(),
                   scfg: SiouConfig = SiouConfig(), with_grad: bool = False):
    """Focaler IoU loss plus half the distance and shape penalties."""
    single = _is_single(bp) and _is_single(bt)
    p, t = np.broadcast_arrays(_boxes(bp), _boxes(bt))
    core, g_core, _, _ = _core(p, t, fcfg, scfg)
    if with_grad:
        return _squeeze(core, single), _squeeze(g_core, single)
    return _squeeze(core, single)


# ---------------------------------------------------------------------------
# wise modulation


def wise_gamma(beta, cfg: WiseConfig = WiseConfig()):
    """beta / (delta * alpha**(beta - delta)); rises until 1/ln(alpha), then decays."""
    b = np.asarray(beta, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = b / (cfg.delta * np.power(cfg.alpha, b - cfg.delta))
    return float(out) if out.ndim == 0 else out


def wise_gamma_prime(beta, cfg: WiseConfig = WiseConfig()):
    b = np.asarray(beta, dtype=np.float64)
    with np.errstate(over="ignore"):
        return (1 - b * np.log(cfg.alpha)) / (cfg.delta * np.power(cfg.alpha, b - cfg.delta))


def ema_update(state: WiseState, l_iou: float) -> WiseState:
    if not state.initialized:
        return replace(state, ema_mean=float(l_iou), initialized=True)
    m = state.momentum
    return replace(state, ema_mean=(1 - m) * state.ema_mean + m * float(l_iou))


def _modulation(beta, cfg: WiseConfig):
    if cfg.modulation == "gamma":
        return wise_gamma(beta, cfg), wise_gamma_prime(beta, cfg)
    d = cfg.delta
    return beta ** (1 + d), (1 + d) * beta ** d


class FwsResult(NamedTuple):
    loss: np.ndarray
    grad: np.ndarray
    state: WiseState
    gamma: np.ndarray
    iou: np.ndarray


def fws_loss(bp, bt, state: WiseState, fcfg: FocalerConfig = FocalerConfig(),
             scfg: SiouConfig = SiouConfig(), wcfg: WiseConfig = WiseConfig()) -> FwsResult:
    """Focaler-Wise-SIoU loss, its gradient and the advanced EMA state.

    For a batch, beta is taken against the EMA *before* this call and the
    EMA then advances once with the batch-mean raw IoU loss. An
    uninitialized state is warm-started with the current value first, so
    the first call sees beta = 1 on average.
    """
    single = _is_single(bp) and _is_single(bt)
    p, t = np.broadcast_arrays(_boxes(bp), _boxes(bt))
    core, g_core, iou_raw, g_iou = _core(p, t, fcfg, scfg)
    l_raw = 1 - iou_raw
    l_mean = float(l_raw.mean())
    if not state.initialized:
        state = ema_update(state, l_mean)
        new_state = state
    else:
        new_state = ema_update(state, l_mean)
    ema = state.ema_mean
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(l_raw > 0, l_raw / max(ema, 1e-300), 0.0)
    mod, dmod = _modulation(beta, wcfg)
    mod = np.nan_to_num(mod, nan=0.0, posinf=0.0)
    loss = core * mod
    grad = mod[:, None] * g_core
    if not wcfg.detach_modulation and ema > 0:
        # d beta / d p = -d iou / ema
        grad = grad + (core * np.nan_to_num(dmod) / ema)[:, None] * (-g_iou)
    return FwsResult(_squeeze(loss, single), _squeeze(grad, single), new_state,
                     _squeeze(mod, single), _squeeze(iou_raw, single))


# ---------------------------------------------------------------------------
# regression demo


@dataclass
class RegressReport:
    mean_loss: list
    mean_iou: list
    ema_mean: list
    mean_gamma: list
    final_boxes: np.ndarray
    diverged: bool
    steps_run: int

    def rows(self):
        for i in range(len(self.mean_loss)):
            yield i, self.mean_loss[i], self.mean_iou[i], self.ema_mean[i], self.mean_gamma[i]


def random_pairs(rng: np.random.Generator, n: int, min_iou: float = 0.1,
                 extent: float = 100.0) -> tuple:
    """Targets anywhere in an ``extent`` square; predictions are jittered
    copies with raw IoU >= ``min_iou`` (rejection sampled)."""
    preds, targets = [], []
    while len(preds) < n:
        t = np.array([rng.uniform(0, extent), rng.uniform(0, extent),
                      rng.uniform(4, 40), rng.uniform(4, 40)])
        p = np.array([t[0] + rng.normal(0, 0.3) * t[2], t[1] + rng.normal(0, 0.3) * t[3],
                      t[2] * np.exp(rng.normal(0, 0.4)), t[3] * np.exp(rng.normal(0, 0.4))])
        if iou(p, t) >= min_iou:
            preds.append(p)
            targets.append(t)
    return np.array(preds), np.array(targets)


def regress_demo(preds, targets, steps: int, lr: float, state: Optional[WiseState] = None,
                 fcfg: FocalerConfig = FocalerConfig(), scfg: SiouConfig = SiouConfig(),
                 wcfg: WiseConfig = WiseConfig(), min_size: float = 1e-3,
                 stop_iou: Optional[float] = None) -> RegressReport:
    """Plain gradient descent on predicted boxes with a shared EMA state."""
    if not lr > 0:
        raise ContractError("lr must be > 0")
    p = np.array(_boxes(preds), copy=True)
    t = _boxes(targets)
    state = state or WiseState()
    rep = RegressReport([], [], [], [], p, False, 0)
    rises = 0
    for step in range(steps):
        res = fws_loss(p, t, state, fcfg, scfg, wcfg)
        state = res.state
        rep.mean_loss.append(float(res.loss.mean()))
        rep.mean_iou.append(float(res.iou.mean()))
        rep.ema_mean.append(state.ema_mean)
        rep.mean_gamma.append(float(res.gamma.mean()))
        rep.steps_run = step + 1
        if step and rep.mean_loss[-1] > rep.mean_loss[-2]:
            rises += 1
            if rises >= 10:
                rep.diverged = True
        else:
            rises = 0
        if stop_iou is not None and rep.mean_iou[-1] >= stop_iou:
            break
        p = p - lr * res.grad
        p[:, 2:] = np.maximum(p[:, 2:], min_size)
    rep.final_boxes = p
    return rep
