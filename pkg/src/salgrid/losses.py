"""Training losses with analytic gradients with respect to the prediction.

Each ``loss_*`` returns ``(value, grad)`` where ``grad`` has the shape of
``pred``. Ground-truth maps are treated as constants.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from .exceptions import DegenerateInputError, DimensionError
from .metrics import KLD_EPS


@dataclass(frozen=True)
class LossWeights:
    nss: float = -1.0
    kld: float = 10.0
    cc: float = -2.0
    sim: float = -1.0

    def __iter__(self):
        return iter(astuple(self))


DEFAULT_WEIGHTS = LossWeights()


def _check(pred, other):
    pred = np.asarray(pred, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if pred.shape != other.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {other.shape}")
    return pred, other


def _normalized(m, label):
    if np.any(m < 0):
        raise DegenerateInputError(f"{label} has negative values")
    total = m.sum()
    if not total > 0:
        raise DegenerateInputError(f"{label} sums to zero")
    return m / total, total


def _through_normalization(g_p, p, total):
    # d(x/sum x): J^T g = (g - <g, p>) / sum
    return (g_p - np.sum(g_p * p)) / total


def loss_nss(pred, fix):
    x, f = _check(pred, fix)
    fmask = (f > 0.5).astype(np.float64)
    nfix = fmask.sum()
    if nfix == 0:
        raise DegenerateInputError("fixation map has no fixations")
    n = x.size
    xc = x - x.mean()
    sd = np.sqrt(np.mean(xc * xc))
    if sd == 0:
        raise DegenerateInputError("nss undefined for a constant prediction")
    a = fmask / nfix
    value = float(np.sum(a * xc) / sd)
    grad = (a - 1.0 / n) / sd - value * xc / (n * sd * sd)
    return value, grad


def loss_kld(pred, gt, eps=KLD_EPS):
    x, g = _check(pred, gt)
    p, sx = _normalized(x, "prediction")
    q, _ = _normalized(g, "ground truth")
    ratio = q / (eps + p)
    value = float(np.sum(q * np.log(eps + ratio)))
    g_p = -q * ratio / ((eps + ratio) * (eps + p))
    return value, _through_normalization(g_p, p, sx)


def loss_cc(pred, gt):
    x, g = _check(pred, gt)
    xc = x - x.mean()
    gc = g - g.mean()
    nx = np.sqrt(np.sum(xc * xc))
    ng = np.sqrt(np.sum(gc * gc))
    if nx == 0 or ng == 0:
        raise DegenerateInputError("cc undefined for a constant map")
    value = float(np.sum(xc * gc) / (nx * ng))
    grad = gc / (nx * ng) - value * xc / (nx * nx)
    return value, grad


def loss_sim(pred, gt):
    """SIM value and a subgradient; ties take the prediction branch."""
    x, g = _check(pred, gt)
    p, sx = _normalized(x, "prediction")
    q, _ = _normalized(g, "ground truth")
    value = float(np.minimum(p, q).sum())
    ind = (p <= q).astype(np.float64)
    return value, _through_normalization(ind, p, sx)


def loss_bce(pred, target, eps=1e-12):
    """Mean per-pixel binary cross-entropy against a [0, 1] target map."""
    x, t = _check(pred, target)
    p = np.clip(x, eps, 1.0 - eps)
    value = float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))
    grad = (p - t) / (p * (1.0 - p)) / x.size
    grad = np.where((x > eps) & (x < 1.0 - eps), grad, 0.0)
    return value, grad


def bce_target(gt_map):
    """Ground-truth density rescaled so its peak is 1."""
    g = np.asarray(gt_map, dtype=np.float64)
    peak = g.max()
    if not peak > 0:
        raise DegenerateInputError("ground truth is all zero")
    return g / peak


def combined_loss(pred, gt_map, gt_fix, weights=DEFAULT_WEIGHTS):
    """Weighted sum of the NSS, KLD, CC, and SIM terms and its gradient.

    Terms with zero weight are skipped entirely.
    """
    pred = np.asarray(pred, dtype=np.float64)
    value = 0.0
    grad = np.zeros_like(pred)
    terms = ((weights.nss, loss_nss, gt_fix), (weights.kld, loss_kld, gt_map),
             (weights.cc, loss_cc, gt_map), (weights.sim, loss_sim, gt_map))
    for w, fn, ref in terms:
        if w == 0:
            continue
        v, g = fn(pred, ref)
        value += w * v
        grad += w * g
    return value, grad


def combine_values(nss, kld, cc, sim, weights=DEFAULT_WEIGHTS):
    """The weighted sum for already-computed sub-loss values."""
    return weights.nss * nss + weights.kld * kld + weights.cc * cc + weights.sim * sim
