"""Saliency evaluation metrics.

Perception-based: NSS, CC, SIM. Non-perception-based: sAUC, AUC, KLD.
Degenerate inputs (constant maps, empty fixations) raise
:class:`DegenerateInputError`; they never produce NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateInputError, DimensionError

KLD_EPS = 2.2204e-16

PERCEPTION = ("cc", "sim", "nss")
NON_PERCEPTION = ("sauc", "auc", "kld")
# Table layout order: perception-based columns first.
TABLE_ORDER = PERCEPTION + NON_PERCEPTION
CSV_ORDER = ("cc", "sim", "kld", "nss", "auc", "sauc")
DISPLAY = {"cc": "CC", "sim": "SIM", "nss": "NSS", "sauc": "sAUC", "auc": "AUC", "kld": "KLD"}
GROUP = {m: "perception" for m in PERCEPTION} | {m: "non-perception" for m in NON_PERCEPTION}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"map shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _as_distribution(m, label):
    if np.any(m < 0):
        raise DegenerateInputError(f"{label} has negative values")
    total = m.sum()
    if not total > 0:
        raise DegenerateInputError(f"{label} sums to zero")
    return m / total


def _fixations(fix):
    mask = np.asarray(fix) > 0.5
    if not mask.any():
        raise DegenerateInputError("fixation map has no fixations")
    return mask


def cc(pred, gt):
    """Pearson correlation between two maps."""
    p, g = _pair(pred, gt)
    pc = p - p.mean()
    gc = g - g.mean()
    sp = np.sqrt(np.mean(pc * pc))
    sg = np.sqrt(np.mean(gc * gc))
    if sp == 0 or sg == 0:
        raise DegenerateInputError("cc undefined for a constant map")
    r = np.mean(pc * gc) / (sp * sg)
    return float(np.clip(r, -1.0, 1.0))


def sim(pred, gt):
    """Histogram intersection of the two sum-normalized maps."""
    p, g = _pair(pred, gt)
    return float(np.minimum(_as_distribution(p, "prediction"), _as_distribution(g, "ground truth")).sum())


def kld(pred, gt, eps=KLD_EPS):
    """KL divergence of the normalized prediction from the normalized ground truth."""
    p, g = _pair(pred, gt)
    p = _as_distribution(p, "prediction")
    g = _as_distribution(g, "ground truth")
    return float(np.sum(g * np.log(eps + g / (eps + p))))


def nss(pred, fix):
    """Mean z-scored prediction (population std) over fixated pixels."""
    p, f = _pair(pred, fix)
    mask = _fixations(f)
    sd = p.std()
    if sd == 0:
        raise DegenerateInputError("nss undefined for a constant prediction")
    return float(((p - p.mean()) / sd)[mask].mean())


def _roc_twice_area(pos, neg):
    """Integer ``2 * P * N * area`` of the trapezoidal ROC curve.

    Thresholds sit at the distinct positive values; at threshold t the curve
    counts positives >= t and negatives >= t, anchored at (0, 0) and (P, N).
    Working in counts keeps the area exact until the final division.
    """
    thresholds = np.unique(pos)[::-1]
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    tp = len(pos_sorted) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg_sorted) - np.searchsorted(neg_sorted, thresholds, side="left")
    tp = np.concatenate(([0], tp, [len(pos)])).astype(np.int64)
    fp = np.concatenate(([0], fp, [len(neg)])).astype(np.int64)
    return int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))


def _roc_area(pos, neg):
    """Trapezoidal ROC area, correctly rounded from the exact rational value."""
    return _roc_twice_area(pos, neg) / (2 * len(pos) * len(neg))


def auc_judd(pred, fix):
    """AUC-Judd: positives are fixated pixels, negatives every other pixel."""
    p, f = _pair(pred, fix)
    mask = _fixations(f)
    if mask.all():
        raise DegenerateInputError("auc needs at least one non-fixated pixel")
    return _roc_area(p[mask], p[~mask])


def shuffle_pool(fix, other_fix):
    """Flat indices fixated in any of ``other_fix`` but not in ``fix``."""
    mask = _fixations(fix)
    union = np.zeros(mask.shape, dtype=bool)
    for o in other_fix:
        o = np.asarray(o)
        if o.shape != mask.shape:
            raise DimensionError(f"shuffle map shape {o.shape} != {mask.shape}")
        union |= o > 0.5
    return np.flatnonzero(union & ~mask)


def sauc(pred, fix, other_fix, seed=0, n_splits=10):
    """Shuffled AUC with negatives drawn from other images' fixations.

    Each split samples as many negatives as there are positives, uniformly
    from the pool (with replacement only when the pool is too small).
    """
    p, f = _pair(pred, fix)
    mask = _fixations(f)
    pool = shuffle_pool(f, other_fix)
    if len(pool) == 0:
        raise DegenerateInputError("sauc negative pool is empty")
    pos = p[mask]
    flat = p.ravel()
    rng = np.random.default_rng(seed)
    replace = len(pool) < len(pos)
    total = 0
    for _ in range(n_splits):
        picked = rng.choice(pool, size=len(pos), replace=replace)
        total += _roc_twice_area(pos, flat[picked])
    # exact mean of the split areas, rounded once
    return total / (2 * len(pos) * len(pos) * n_splits)


@dataclass
class MetricReport:
    """Per-image scores with aggregate means.

    ``scores[i]`` maps metric name to a float; metrics that were undefined for
    an image are absent from it and listed in ``degenerate[i]`` with a reason.
    """

    names: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)

    def add(self, name, scores, degenerate=None):
        self.names.append(name)
        self.scores.append(dict(scores))
        self.degenerate.append(dict(degenerate or {}))

    def extend(self, other):
        for n, s, d in zip(other.names, other.scores, other.degenerate):
            self.add(n, s, d)
        return self

    def __len__(self):
        return len(self.names)

    @property
    def has_degenerate(self):
        return any(self.degenerate)

    def aggregate(self):
        out = {}
        for m in TABLE_ORDER:
            vals = [s[m] for s in self.scores if m in s]
            if vals:
                out[m] = float(np.mean(vals))
        return out

    @staticmethod
    def group(metric):
        return GROUP[metric]


def evaluate_pair(pred, gt_map, gt_fix, shuffle_maps=(), seed=0, n_splits=10, name=""):
    """Score one prediction with all six metrics."""
    calls = {
        "cc": lambda: cc(pred, gt_map),
        "sim": lambda: sim(pred, gt_map),
        "kld": lambda: kld(pred, gt_map),
        "nss": lambda: nss(pred, gt_fix),
        "auc": lambda: auc_judd(pred, gt_fix),
        "sauc": lambda: sauc(pred, gt_fix, shuffle_maps, seed=seed, n_splits=n_splits),
    }
    scores, bad = {}, {}
    for m, fn in calls.items():
        try:
            scores[m] = fn()
        except DegenerateInputError as err:
            bad[m] = str(err)
    report = MetricReport()
    report.add(name, scores, bad)
    return report


def evaluate_batch(preds, gt_maps, gt_fixes, names=None, seed=0, n_splits=10):
    """Evaluate a batch; each image's sAUC pool is the other images' fixations."""
    n = len(preds)
    names = names or [str(i) for i in range(n)]
    report = MetricReport()
    for i in range(n):
        others = [gt_fixes[j] for j in range(n) if j != i]
        report.extend(evaluate_pair(preds[i], gt_maps[i], gt_fixes[i], others,
                                    seed=seed, n_splits=n_splits, name=names[i]))
    return report


def format_table(rows, title="model"):
    """Pretty text table with perception-based columns grouped first.

    ``rows`` is a list of ``(label, {metric: value})`` pairs.
    """
    width = max([len(title)] + [len(r[0]) for r in rows]) + 2
    col = 9
    head1 = " " * width + "|" + "perception".center(3 * col) + "|" + "non-perception".center(3 * col)
    head2 = title.ljust(width) + "|" + "".join(DISPLAY[m].rjust(col) for m in PERCEPTION) + \
        "|" + "".join(DISPLAY[m].rjust(col) for m in NON_PERCEPTION)
    lines = [head1, head2, "-" * len(head2)]
    for label, vals in rows:
        cells = []
        for m in TABLE_ORDER:
            v = vals.get(m)
            cells.append(("-" if v is None else f"{v:.4f}").rjust(col))
        lines.append(label.ljust(width) + "|" + "".join(cells[:3]) + "|" + "".join(cells[3:]))
    return "\n".join(lines)
