"""Gradient-statistic-triggered recalibration of the attribute network."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .anchors import GaussianAttributeNet
from .btc import BtcPair

log = logging.getLogger(__name__)


@dataclass
class GradientStatistic:
    alpha_d: float = 0.3
    g_current: float = 0.0
    ema: float = 0.0
    step: int = 0


@dataclass(frozen=True)
class RecalConfig:
    eps_d: float = 0.002
    t_recal: int = 200
    lr_recal: float = 5e-3

    def __post_init__(self):
        if self.eps_d <= 0 or self.t_recal < 0:
            raise ValueError("eps_d must be > 0 and t_recal >= 0")


def grad_norm_btc_f(pair: BtcPair) -> float:
    """L2 norm over all BTC_f latent-weight, bias and scale gradients."""
    grads = [p.grad for p in pair.btc_f.params()]
    if any(g is None for g in grads):
        raise RuntimeError("BTC_f gradients are not populated")
    total = 0.0
    for g in grads:
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return float(np.sqrt(total))


def update_ema(stat: GradientStatistic, g_i: float) -> GradientStatistic:
    if g_i < 0:
        raise ValueError("gradient norm must be non-negative")
    ema = stat.alpha_d * stat.ema + (1.0 - stat.alpha_d) * g_i
    return GradientStatistic(stat.alpha_d, g_i, ema, stat.step + 1)


def should_recalibrate(stat: GradientStatistic, cfg: RecalConfig) -> bool:
    return stat.ema > cfg.eps_d


def count_triggers(ema_trace, eps_d: float) -> int:
    return int(np.sum(np.asarray(ema_trace, dtype=np.float64) > eps_d))


def recalibrate(ng: GaussianAttributeNet, loss_fn: Callable[[GaussianAttributeNet, int], ad.Tensor],
                cfg: RecalConfig) -> tuple[GaussianAttributeNet, bool]:
    """Fine-tune a copy of N_G for ``cfg.t_recal`` steps on the rendering loss.

    ``loss_fn(net, step)`` must build L_r with anchors, BTC and N_m held
    constant. Returns ``(net, changed)``; on divergence the original network
    is returned unchanged.
    """
    if cfg.t_recal == 0:
        return ng, False
    net = ng.copy()
    params = net.params()
    for p in params:
        p.reset_optimizer()
        p.zero_grad()
    try:
        for step in range(cfg.t_recal):
            loss = loss_fn(net, step)
            ad.backward(loss)
            ad.adam_step(params, cfg.lr_recal)
    except ad.NonFiniteError as exc:
        log.warning("recalibration aborted, keeping previous N_G: %s", exc)
        return ng, False
    return net, True
