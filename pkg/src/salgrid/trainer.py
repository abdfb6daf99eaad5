"""Training protocol: Adam with step decay, early stopping, k-fold plans, ablation grid."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics as M
from .data import density_from_fixations, fixation_map_from_set, FixationSet
from .exceptions import ConfigError, DegenerateInputError, DimensionError, TrainingError
from .losses import DEFAULT_WEIGHTS, LossWeights, bce_target, combined_loss, loss_bce
from .model import VARIANTS, ModelConfig, forward_backward, init_params, predict

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "split", "loss", "cc", "sim", "nss", "kld")


# ---------------------------------------------------------------------------
# data container


@dataclass
class SaliencyDataset:
    """Images (N, 3, H, W), density maps (N, H, W), fixation maps (N, H, W)."""

    images: np.ndarray
    maps: np.ndarray
    fixations: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.maps = np.asarray(self.maps, dtype=np.float64)
        self.fixations = np.asarray(self.fixations, dtype=np.float64)
        n = len(self.images)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DimensionError(f"images must be (N, 3, H, W), got {self.images.shape}")
        hw = self.images.shape[2:]
        if self.maps.shape != (n,) + hw or self.fixations.shape != (n,) + hw:
            raise DimensionError("maps and fixations must be (N, H, W) matching the images")
        if not self.names:
            self.names = [f"{i:04d}" for i in range(n)]

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SaliencyDataset(self.images[idx], self.maps[idx], self.fixations[idx],
                               [self.names[i] for i in idx])


def make_synthetic_dataset(n, width=32, height=32, seed=0, sigma=None):
    """Gaussian-blob images whose ground truth is a fixation density over the blobs.

    Each image has one to three bright coloured blobs on a dim noisy
    background; simulated observers fixate near blob centres.
    """
    rng = np.random.default_rng(seed)
    sigma = width / 12.0 if sigma is None else sigma
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    images, maps, fixes = [], [], []
    for _ in range(n):
        img = 0.1 + 0.05 * rng.random((3, height, width))
        xs, ys = [], []
        for _ in range(rng.integers(1, 4)):
            cx = rng.uniform(0.15, 0.85) * width
            cy = rng.uniform(0.15, 0.85) * height
            radius = rng.uniform(0.06, 0.12) * width
            blob = np.exp(-((cols - cx) ** 2 + (rows - cy) ** 2) / (2 * radius ** 2))
            color = rng.uniform(0.5, 1.0, size=3)
            img = np.maximum(img, color[:, None, None] * blob)
            k = rng.integers(4, 9)
            xs.extend(rng.normal(cx, radius / 2, size=k))
            ys.extend(rng.normal(cy, radius / 2, size=k))
        fx = FixationSet(xs, ys, np.arange(len(xs)) % 5).clamped(width, height)
        images.append(np.clip(img, 0.0, 1.0))
        maps.append(density_from_fixations(fx, width, height, sigma=sigma))
        fixes.append(fixation_map_from_set(fx, width, height))
    return SaliencyDataset(np.stack(images), np.stack(maps), np.stack(fixes))


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class TrainState:
    """Adam moments, counters, and early-stopping bookkeeping."""

    m: dict
    v: dict
    base_lr: float = 1e-5
    seed: int = 0
    step: int = 0
    epoch: int = 0
    best_score: float = float("inf")
    best_epoch: int = -1
    bad_epochs: int = 0

    @classmethod
    def for_params(cls, arrays, base_lr=1e-5, seed=0):
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, base_lr, seed)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the ``params`` arrays."""
    if set(grads) != set(params) or set(state.m) != set(params):
        raise DimensionError("params, grads and optimizer state must share the same names")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def lr_schedule(epoch, base_lr=1e-5, factor=0.1, every=3):
    """Step decay: ``base_lr * factor ** (epoch // every)``; ``every=None`` keeps it constant."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if not every:
        return base_lr
    return base_lr * factor ** (epoch // every)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    """k disjoint subsets; fold i tests on subset i and validates on subset i+1."""

    subsets: tuple

    @property
    def k(self):
        return len(self.subsets)

    def assignment(self, i):
        k = self.k
        test = self.subsets[i % k]
        val = self.subsets[(i + 1) % k]
        train = np.sort(np.concatenate([s for j, s in enumerate(self.subsets)
                                        if j not in (i % k, (i + 1) % k)]))
        return train, val, test


def kfold_split(n_items, k=10, seed=0):
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_items < k:
        raise ValueError(f"cannot split {n_items} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n_items)
    return FoldPlan(tuple(np.sort(s) for s in np.array_split(perm, k)))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    patience: int | None = 5
    base_lr: float = 1e-5
    lr_factor: float = 0.1
    lr_every: int | None = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = DEFAULT_WEIGHTS
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def sample_loss(pred, gt_map, gt_fix, loss_kind, weights):
    if loss_kind == "BCE":
        return loss_bce(pred, bce_target(gt_map))
    return combined_loss(pred, gt_map, gt_fix, weights)


def batch_loss(preds, maps, fixes, loss_kind, weights):
    """Mean of per-image losses; ``preds`` is (N, 1, H, W)."""
    n = len(preds)
    total = 0.0
    grad = np.zeros_like(preds)
    for i in range(n):
        v, g = sample_loss(preds[i, 0], maps[i], fixes[i], loss_kind, weights)
        total += v
        grad[i, 0] = g / n
    return total / n, grad


def validate(dataset, config, params, weights=DEFAULT_WEIGHTS):
    """Eval-mode combined loss and CC/SIM/NSS/KLD means over ``dataset``."""
    preds = predict(dataset.images, config, params)
    losses = []
    scores = {"cc": [], "sim": [], "nss": [], "kld": []}
    for p, g, f in zip(preds, dataset.maps, dataset.fixations):
        losses.append(combined_loss(p, g, f, weights)[0])
        scores["cc"].append(M.cc(p, g))
        scores["sim"].append(M.sim(p, g))
        scores["nss"].append(M.nss(p, f))
        scores["kld"].append(M.kld(p, g))
    out = {k: float(np.mean(v)) for k, v in scores.items()}
    out["loss"] = float(np.mean(losses))
    return out


@dataclass
class TrainResult:
    params: object
    history: list
    state: TrainState
    config: ModelConfig
    train_config: TrainConfig

    def history_csv(self):
        return history_to_csv(self.history)


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def history_to_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([_fmt(row.get(k)) for k in HISTORY_FIELDS])
    return buf.getvalue()


def train_loop(train_set, val_set, config, train_config=TrainConfig(), params=None):
    """Train ``config`` on ``train_set``; keep the params with best validation loss.

    Everything random (initialization, shuffling) derives from
    ``train_config.seed``, so equal seeds give identical histories.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    if val_set is None or len(val_set) == 0:
        raise ConfigError("validation set is empty")
    tc = train_config
    if params is None:
        params = init_params(config, seed=tc.seed)
    arrays = params.arrays()
    state = TrainState.for_params(arrays, tc.base_lr, tc.seed)
    best = params.copy()
    history = []
    n = len(train_set)
    for epoch in range(tc.epochs):
        state.epoch = epoch
        lr = lr_schedule(epoch, tc.base_lr, tc.lr_factor, tc.lr_every)
        order = np.random.default_rng([tc.seed, epoch]).permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            batch = train_set.subset(idx)
            try:
                value, _, grads = forward_backward(
                    batch.images, config, params,
                    lambda out: batch_loss(out, batch.maps, batch.fixations, config.loss_kind, tc.weights))
            except DegenerateInputError as err:
                raise TrainingError(
                    f"degenerate loss at epoch {epoch}, batch {b} (items {batch.names}): {err}") from err
            adam_step(arrays, grads, state, lr, tc.beta1, tc.beta2, tc.adam_eps)
            losses.append(value)
        history.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses))})
        try:
            val = validate(val_set, config, params, tc.weights)
        except DegenerateInputError as err:
            raise TrainingError(f"degenerate validation at epoch {epoch}: {err}") from err
        history.append({"epoch": epoch, "split": "val", **val})
        log.debug("epoch %d lr %.2e train %.5f val %.5f", epoch, lr, history[-2]["loss"], val["loss"])
        if val["loss"] < state.best_score:
            state.best_score = val["loss"]
            state.best_epoch = epoch
            state.bad_epochs = 0
            best = params.copy()
        else:
            state.bad_epochs += 1
            if tc.patience is not None and state.bad_epochs >= tc.patience:
                break
    return TrainResult(best, history, state, config, tc)


def evaluate_model(dataset, config, params, seed=0, n_splits=10):
    preds = predict(dataset.images, config, params)
    return M.evaluate_batch(list(preds), list(dataset.maps), list(dataset.fixations),
                            names=dataset.names, seed=seed, n_splits=n_splits)


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class AblationReport:
    rows: list  # (variant, {metric: value})

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group"] + [M.GROUP[m] for m in M.TABLE_ORDER])
        w.writerow(["variant"] + [M.DISPLAY[m] for m in M.TABLE_ORDER])
        for name, vals in self.rows:
            w.writerow([name] + [_fmt(vals.get(m)) for m in M.TABLE_ORDER])
        return buf.getvalue()

    def to_table(self):
        return M.format_table(self.rows, title="variant")


def ablation_grid(dataset, seed=0, base_config=None, train_config=None, k=None, fold=0):
    """Train and test every ablation variant on one shared fold."""
    n = len(dataset)
    k = min(10, n) if k is None else k
    if k < 3:
        raise ConfigError("ablation grid needs at least 3 items for train/val/test subsets")
    base_config = base_config or ModelConfig(input_w=dataset.images.shape[3],
                                             input_h=dataset.images.shape[2])
    train_config = replace(train_config or TrainConfig(epochs=3, base_lr=1e-3, lr_every=None),
                           seed=seed)
    train_idx, val_idx, test_idx = kfold_split(n, k, seed).assignment(fold)
    train, val, test = (dataset.subset(i) for i in (train_idx, val_idx, test_idx))
    rows = []
    for name in VARIANTS:
        e1, e2, e3, sc, loss, backbone = VARIANTS[name]
        cfg = replace(base_config, use_e1=e1, use_e2=e2, use_e3=e3, use_skip_connections=sc,
                      loss_kind=loss, backbone=backbone)
        result = train_loop(train, val, cfg, train_config)
        report = evaluate_model(test, cfg, result.params, seed=seed)
        rows.append((name, report.aggregate()))
        log.info("ablation %s done", name)
    return AblationReport(rows)


# ---------------------------------------------------------------------------
# sub-loss weight calibration


def sub_loss_minima(train_set, val_set, config, train_config=None):
    """Train once per sub-loss alone and record its best validation value.

    Returns ``{term: minimum}`` and weights that make every term contribute
    the same magnitude as the KLD term does under the default weighting.
    """
    tc = train_config or TrainConfig(epochs=3, base_lr=1e-3, lr_every=None)
    signs = {"nss": -1.0, "kld": 1.0, "cc": -1.0, "sim": -1.0}
    minima = {}
    for term, sign in signs.items():
        w = LossWeights(**{k: (sign if k == term else 0.0) for k in signs})
        res = train_loop(train_set, val_set, config, replace(tc, weights=w))
        best = [r for r in res.history if r["split"] == "val"]
        minima[term] = min(r[term] for r in best)
    target = abs(DEFAULT_WEIGHTS.kld * minima["kld"]) or 1.0
    suggested = {t: signs[t] * target / max(abs(v), 1e-12) for t, v in minima.items()}
    return minima, LossWeights(**suggested)
