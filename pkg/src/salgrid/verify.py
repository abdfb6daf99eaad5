"""Finite-difference gradient suites for ops, losses, and the end-to-end model."""

from __future__ import annotations

import numpy as np

from . import losses as L
from . import tensor as T
from .model import ModelConfig, init_params, model_forward
from .tensor import FD_STEP, GradCheckReport, grad_check


def check_value_grad(fn, x, tol=1e-6, h=FD_STEP, name="fn"):
    """Check ``fn(x) -> (value, grad)`` against central differences of ``value``."""
    x = np.array(x, dtype=np.float64)
    _, analytic = fn(x)
    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        numeric[idx] = (fn(xp)[0] - fn(xm)[0]) / (2 * h)
    err, where = T._relative_error(analytic, numeric)
    return GradCheckReport([err], [tuple(int(c) for c in where)], tol, [name])


def _bn_train(ts):
    x, g, b = ts
    c = x.shape[1]
    return T.batch_norm(x, g, b, np.zeros(c), np.ones(c), training=True)


def _bn_eval(ts):
    x, g, b = ts
    c = x.shape[1]
    return T.batch_norm(x, g, b, np.full(c, 0.1), np.full(c, 0.7), training=False)


def tensor_cases(rng):
    """(name, fn, inputs) triples covering every differentiable op."""
    r = rng.standard_normal
    # keep relu/gelu inputs away from 0 so +-h never straddles the kink
    away = lambda shape: np.sign(r(shape)) * rng.uniform(0.1, 2.0, size=shape)
    return [
        ("matmul", lambda ts: T.matmul(*ts), [r((3, 4)), r((4, 2))]),
        ("matmul_batched", lambda ts: T.matmul(*ts), [r((2, 3, 4, 5)), r((2, 3, 5, 2))]),
        ("linear", lambda ts: T.linear(*ts), [r((2, 5, 4)), r((4, 3)), r(3)]),
        ("conv2d_3x3", lambda ts: T.conv2d(*ts), [r((1, 4, 4)), r((2, 1, 3, 3)), r(2)]),
        ("conv2d_1x1", lambda ts: T.conv2d(*ts), [r((2, 3, 4, 4)), r((2, 3, 1, 1)), r(2)]),
        ("conv2d_stride2", lambda ts: T.conv2d(*ts, stride=2), [r((2, 2, 6, 6)), r((3, 2, 3, 3)), r(3)]),
        ("batch_norm_train", _bn_train, [r((2, 3, 3, 3)), r(3), r(3)]),
        ("batch_norm_eval", _bn_eval, [r((2, 3, 3, 3)), r(3), r(3)]),
        ("layer_norm", lambda ts: T.layer_norm(*ts), [r((4, 6)), r(6), r(6)]),
        ("softmax", lambda ts: T.softmax(ts[0]), [r((1, 8))]),
        ("relu", lambda ts: T.relu(ts[0]), [away((3, 5))]),
        ("gelu", lambda ts: T.gelu(ts[0]), [r((3, 5))]),
        ("sigmoid", lambda ts: T.sigmoid(ts[0]), [r((3, 5))]),
        ("upsample_nearest_2x", lambda ts: T.upsample_nearest_2x(ts[0]), [r((2, 3, 3))]),
        ("avg_pool_2x", lambda ts: T.avg_pool_2x(ts[0]), [r((2, 4, 6))]),
        ("add", lambda ts: T.add(*ts), [r((3, 4)), r((3, 4))]),
        ("mul", lambda ts: T.mul(*ts), [r((3, 4)), r((3, 4))]),
        ("add_broadcast", lambda ts: T.add_broadcast(*ts), [r((2, 3, 4)), r((3, 4))]),
        ("scale", lambda ts: T.scale(ts[0], -1.7), [r((3, 4))]),
        ("reshape", lambda ts: T.reshape(ts[0], (4, 3)), [r((3, 4))]),
        ("transpose", lambda ts: T.transpose(ts[0], (2, 0, 1)), [r((2, 3, 4))]),
        ("concat", lambda ts: T.concat(ts, axis=1), [r((2, 3, 2, 2)), r((2, 1, 2, 2))]),
    ]


def tensor_suite(seeds=range(5), tol=1e-6):
    """Worst relative error per op over ``seeds``."""
    worst = {}
    for seed in seeds:
        for name, fn, inputs in tensor_cases(np.random.default_rng(seed)):
            rep = grad_check(fn, inputs, tol=tol, seed=seed,
                             names=[f"{name}[{i}]" for i in range(len(inputs))])
            _keep_worst(worst, name, rep)
    return worst


def _positive_map(rng, shape):
    return rng.uniform(0.05, 1.0, size=shape)


def loss_cases(rng, shape=(6, 6)):
    pred = _positive_map(rng, shape)
    gt = _positive_map(rng, shape)
    fix = (rng.random(shape) < 0.2).astype(float)
    fix.flat[rng.integers(fix.size)] = 1.0
    # pred/gt gap of at least 0.05 keeps SIM away from its kink
    sim_pred = gt * rng.choice([0.7, 1.3], size=shape)
    w = L.DEFAULT_WEIGHTS
    return [
        ("loss_nss", lambda x: L.loss_nss(x, fix), pred),
        ("loss_kld", lambda x: L.loss_kld(x, gt), pred),
        ("loss_cc", lambda x: L.loss_cc(x, gt), pred),
        ("loss_sim", lambda x: L.loss_sim(x, gt), sim_pred),
        ("loss_bce", lambda x: L.loss_bce(x, gt), pred * 0.9),
        ("combined_loss", lambda x: L.combined_loss(x, gt, fix, w), sim_pred),
    ]


def loss_suite(seeds=range(5), tol=1e-6):
    worst = {}
    for seed in seeds:
        for name, fn, x in loss_cases(np.random.default_rng(seed)):
            _keep_worst(worst, name, check_value_grad(fn, x, tol=tol, name=name))
    return worst


def model_grad_check(config=None, seed=0, n_coords=20, tol=1e-4, h=FD_STEP, batch=2):
    """Compare parameter gradients of a random projection of the model output
    with central differences at ``n_coords`` random parameter coordinates.

    Coordinates whose +-h perturbations change any ReLU on/off pattern sit on
    a kink of the piecewise-smooth network; they are redrawn.
    """
    config = config or ModelConfig(input_w=32, input_h=32)
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed)
    images = rng.uniform(size=(batch, 3, config.input_h, config.input_w))
    proj = None

    def scalar():
        with T.ActivationPatterns() as pat:
            out = model_forward(images, config, params, training=True)
        return float(np.sum(out.data * proj)), pat

    with T.Tape() as tape:
        out = model_forward(images, config, params, training=True)
    proj = rng.standard_normal(out.shape)
    tape.backward(out, proj)
    grads = params.grads()
    names = sorted(params.tensors)
    sizes = np.array([params[n].data.size for n in names])
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    analytic, numeric, labels = [], [], []
    tried = set()
    while len(analytic) < n_coords and len(tried) < sizes.sum():
        flat = int(rng.integers(sizes.sum()))
        if flat in tried:
            continue
        tried.add(flat)
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        arr = params[name].data
        pos = np.unravel_index(flat - int(offsets[k]), arr.shape)
        orig = arr[pos]
        arr[pos] = orig + h
        up, pat_up = scalar()
        arr[pos] = orig - h
        down, pat_down = scalar()
        arr[pos] = orig
        if not pat_up.same_as(pat_down):
            continue
        analytic.append(grads[name][pos])
        numeric.append((up - down) / (2 * h))
        labels.append(f"{name}{tuple(int(p) for p in pos)}")
    err, where = T._relative_error(np.array(analytic), np.array(numeric))
    return GradCheckReport([err], [labels[where[0]]], tol, ["model"])


def model_suite(seeds=range(5), tol=1e-4, config=None):
    worst = {}
    for seed in seeds:
        _keep_worst(worst, "model", model_grad_check(config, seed=seed, tol=tol))
    return worst


def _keep_worst(worst, name, rep):
    i = int(np.argmax(rep.errors))
    if name not in worst or rep.errors[i] > worst[name][0]:
        worst[name] = (rep.errors[i], rep.coords[i])
