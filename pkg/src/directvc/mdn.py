"""Gaussian mixture output head: parameter split, density, NLL with gradient, point readout.

Raw head layout per frame: ``[weight logits (M) | means (M*D) | log stddevs (M*D or M)]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3
LOG_2PI = float(np.log(2.0 * np.pi))


class MdnError(ValueError):
    pass


@dataclass
class MdnParams:
    weights: np.ndarray  # (..., M)
    means: np.ndarray  # (..., M, D)
    stddevs: np.ndarray  # (..., M, D); isotropic heads broadcast one value over D
    clamped: np.ndarray | None = None
    isotropic: bool = False

    @property
    def mixtures(self) -> int:
        return self.weights.shape[-1]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]


def head_width(m: int, d: int, isotropic: bool = False) -> int:
    return m + m * d + (m if isotropic else m * d)


def _log_softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def split_head(raw: np.ndarray, m: int, d: int, isotropic: bool = False,
               sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX) -> MdnParams:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != head_width(m, d, isotropic):
        raise MdnError(f"head width {raw.shape[-1]} != {head_width(m, d, isotropic)} for M={m}, D={d}")
    lead = raw.shape[:-1]
    weights = np.exp(_log_softmax(raw[..., :m]))
    means = raw[..., m : m + m * d].reshape(*lead, m, d)
    log_s = raw[..., m + m * d :]
    log_s = log_s.reshape(*lead, m, 1) if isotropic else log_s.reshape(*lead, m, d)
    lo, hi = np.log(sigma_min), np.log(sigma_max)
    clamped = (log_s < lo) | (log_s > hi)
    s = np.clip(np.exp(np.clip(log_s, lo, hi)), sigma_min, sigma_max)
    if isotropic:
        s = np.broadcast_to(s, (*lead, m, d))
    return MdnParams(weights, means, s, clamped, isotropic)


def _component_logpdf(p: MdnParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != p.means.shape[:-2] + (p.dim,):
        raise MdnError(f"target shape {x.shape} does not match mixture dims {p.means.shape}")
    z = (x[..., None, :] - p.means) / p.stddevs
    return -0.5 * LOG_2PI * p.dim - np.log(p.stddevs).sum(-1) - 0.5 * (z * z).sum(-1), z


def _log_weights(p: MdnParams) -> np.ndarray:
    # a weight that underflowed to 0 contributes nothing to the mixture
    with np.errstate(divide="ignore"):
        return np.log(p.weights)


def mdn_logpdf(p: MdnParams, x: np.ndarray) -> np.ndarray:
    comp, _ = _component_logpdf(p, x)
    l = _log_weights(p) + comp
    top = l.max(axis=-1)
    return top + np.log(np.exp(l - top[..., None]).sum(axis=-1))


def mdn_pdf(p: MdnParams, x: np.ndarray) -> np.ndarray:
    """Per-frame mixture density Pr(x_t | y_t) with diagonal Gaussian components."""
    return np.exp(mdn_logpdf(p, x))


def mdn_nll(p: MdnParams, x: np.ndarray, mask=None) -> tuple[float, np.ndarray]:
    """Summed negative log likelihood and its gradient w.r.t. the raw head outputs."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise MdnError("non-finite target")
    comp, z = _component_logpdf(p, x)
    l = _log_weights(p) + comp
    top = l.max(axis=-1, keepdims=True)
    e = np.exp(l - top)
    total = e.sum(axis=-1, keepdims=True)
    nll = -(top[..., 0] + np.log(total[..., 0]))
    resp = e / total  # posterior responsibility of each component
    lead = x.shape[:-1]
    mask = np.ones(lead) if mask is None else np.asarray(mask, dtype=np.float64).reshape(lead)
    loss = float((nll * mask).sum())

    g_w = p.weights - resp
    g_mu = -resp[..., None] * z / p.stddevs
    if p.isotropic:
        g_s = resp * (p.dim - (z * z).sum(-1))
    else:
        g_s = resp[..., None] * (1.0 - z * z)
    if p.clamped is not None:
        g_s = np.where(p.clamped.reshape(g_s.shape), 0.0, g_s)
    grad = np.concatenate([g_w, g_mu.reshape(*lead, -1), g_s.reshape(*lead, -1)], axis=-1)
    return loss, grad * mask[..., None]


def point_estimate(p: MdnParams) -> np.ndarray:
    """Mean of the heaviest component per frame; ties go to the lowest index."""
    idx = np.argmax(p.weights, axis=-1)
    return np.take_along_axis(p.means, idx[..., None, None], axis=-2)[..., 0, :]


def point_estimate_linear(h: np.ndarray, w: np.ndarray, b: np.ndarray, m: int, d: int) -> np.ndarray:
    """Point estimate straight from the hidden features feeding a linear head.

    Equivalent to ``point_estimate(split_head(h @ w + b, ...))`` but only the
    weight logits and the winning component's means are computed.
    """
    logits = h @ w[:, :m] + b[:m]
    idx = np.argmax(logits, axis=-1)
    out = np.empty(h.shape[:-1] + (d,))
    for j in np.unique(idx):
        rows = idx == j
        cols = slice(m + j * d, m + (j + 1) * d)
        out[rows] = h[rows] @ w[:, cols] + b[cols]
    return out


def nll_loss_fn(m: int, d: int, isotropic: bool = False):
    """Adapter with the (output, target, mask) -> (loss, grad) signature used by training and grad_check."""

    def loss_fn(raw, target, mask=None):
        return mdn_nll(split_head(raw, m, d, isotropic), target, mask)

    return loss_fn
