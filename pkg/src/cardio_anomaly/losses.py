"""Training objectives.

All losses accept tensors or arrays.  Per-sample terms are summed over the
signal axis (the last axis) exactly as written; when a leading batch axis is
present the per-sample values are averaged over it.

``loss_res`` can be negative: ``log(sigma)`` is below zero wherever the
predicted uncertainty is under 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import as_tensor
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class AsymmetricLossConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    tau: float = 0.05

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigError("focusing exponents must be non-negative")
        if self.gamma_neg < self.gamma_pos:
            raise ConfigError(f"gamma_neg ({self.gamma_neg}) must be >= gamma_pos ({self.gamma_pos})")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"margin tau must lie in [0, 1), got {self.tau}")


def _batch_mean(per_sample: Tensor) -> Tensor:
    return ops.mean(per_sample) if per_sample.ndim else per_sample


def _uncertain_sq(x, xhat, sigma) -> Tensor:
    x, xhat, sigma = as_tensor(x), as_tensor(xhat), as_tensor(sigma)
    if not (x.shape == xhat.shape == sigma.shape):
        raise ContractError(f"shape mismatch: x {x.shape}, x_hat {xhat.shape}, sigma {sigma.shape}")
    if np.any(sigma.data <= 0):
        raise ContractError("uncertainty sigma must be strictly positive")
    err = ops.square(x - xhat)
    return ops.sum(err / sigma + ops.log(sigma), axis=-1)


def loss_res(x_g, xhat_g, sigma_g, x_l=None, xhat_l=None, sigma_l=None) -> Tensor:
    """Uncertainty-weighted restoration loss over the global and local signals."""
    total = _uncertain_sq(x_g, xhat_g, sigma_g)
    if x_l is not None and np.size(getattr(x_l, "data", x_l)):
        total = total + _uncertain_sq(x_l, xhat_l, sigma_l)
    return _batch_mean(total)


def loss_trend(x_g, xhat_t) -> Tensor:
    x, xh = as_tensor(x_g), as_tensor(xhat_t)
    if x.shape != xh.shape:
        raise ContractError(f"shape mismatch: {x.shape} vs {xh.shape}")
    return _batch_mean(ops.sum(ops.square(x - xh), axis=-1))


def loss_pred(t_attr, that_attr, weights=None) -> Tensor:
    """Mean squared attribute error.

    ``weights`` (same shape, 0/1) drops missing attributes; the mean is then
    taken over the present ones.
    """
    t, th = as_tensor(t_attr), as_tensor(that_attr)
    if t.shape != th.shape:
        raise ContractError(f"shape mismatch: {t.shape} vs {th.shape}")
    m = t.shape[-1] if t.ndim else 0
    if m == 0:
        raise ContractError("attribute vector is empty")
    sq = ops.square(t - th)
    if weights is None:
        return _batch_mean(ops.mean(sq, axis=-1))
    w = np.asarray(weights, dtype=np.float64)
    count = np.maximum(w.sum(axis=-1), 1.0)
    return _batch_mean(ops.sum(sq * Tensor(w), axis=-1) / Tensor(count))


def loss_ad(res, trend, pred, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    if alpha < 0 or beta < 0:
        raise ConfigError("trade-off weights must be non-negative")
    return as_tensor(res) + as_tensor(trend) * alpha + as_tensor(pred) * beta


def loss_cls(y, yhat, cfg: AsymmetricLossConfig = AsymmetricLossConfig()) -> Tensor:
    """Asymmetric multi-label loss on probabilities ``yhat``.

    The negative term uses the shifted probability ``max(yhat - tau, 0)`` in
    both the focusing weight and the log, so negatives scored at or below
    ``tau`` contribute exactly zero.
    """
    y_arr = np.asarray(getattr(y, "data", y), dtype=np.float64)
    p = as_tensor(yhat)
    if y_arr.shape != p.shape:
        raise ContractError(f"label shape {y_arr.shape} != prediction shape {p.shape}")
    if np.any((p.data <= 0) | (p.data >= 1)):
        raise ContractError("predicted probabilities must lie strictly inside (0, 1)")
    if np.any((y_arr != 0) & (y_arr != 1)):
        raise ContractError("labels must be 0 or 1")
    yt = Tensor(y_arr)
    pos = ops.log(p)
    if cfg.gamma_pos:
        pos = pos * ops.power(1.0 - p, cfg.gamma_pos)
    shifted = ops.relu(p - cfg.tau) if cfg.tau else p
    neg = ops.log(1.0 - shifted)
    if cfg.gamma_neg:
        neg = neg * ops.power(shifted, cfg.gamma_neg)
    per_class = -(yt * pos) - (1.0 - yt) * neg
    return _batch_mean(ops.sum(per_class, axis=-1))

