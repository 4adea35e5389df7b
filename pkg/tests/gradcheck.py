"""Full-model finite-difference gradient check shared by the unit and acceptance suites."""

import numpy as np

from rsmm.density import batch_logpdf_and_grad
from rsmm.network import ModelConfig, ModelWeights, backward, forward_batch, tensor_shapes

TINY = dict(P=2, hidden=4, c=2, seq_len=12, layers=2)
STEP = 1e-5
SEEDS = (0, 1, 2)


def tiny_problem(variant, seed, batch=2, scale=1.0):
    """Random tiny model, inputs and targets placed near the predicted component means.

    Targets near the bulk of the predicted mixture keep every component's
    responsibility, and so every gradient entry, well above the fp64
    difference-quotient noise floor of roughly eps * |loss| / step.
    """
    cfg = ModelConfig.from_variant(variant, **TINY)
    rng = np.random.default_rng(seed)
    weights = ModelWeights(cfg, {k: rng.uniform(-scale, scale, size=s) for k, s in tensor_shapes(cfg).items()})
    x = rng.normal(size=(batch, cfg.seq_len, cfg.P))
    raw, _ = forward_batch(x, weights)
    y = raw.mu.mean(axis=1) + 0.3 * rng.normal(size=(batch, cfg.P))
    return weights, x, y


def total_nll(weights, x, y):
    raw, _ = forward_batch(x, weights)
    return -float(np.sum(batch_logpdf_and_grad(y, raw, need_grad=False)[0]))


def analytic(weights, x, y):
    raw, trace = forward_batch(x, weights)
    _, g = batch_logpdf_and_grad(y, raw)
    return backward(trace, g.replace(**{k: -v for k, v in g.arrays().items()}))


def max_relative_error(weights, x, y, h=STEP):
    """Worst |analytic - central difference| / max(|analytic|, 1e-8) over every weight entry."""
    grads = analytic(weights, x, y)
    worst = 0.0
    for name, arr in weights.items():
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = total_nll(weights, x, y)
            arr[idx] = orig - h
            fm = total_nll(weights, x, y)
            arr[idx] = orig
            fd = (fp - fm) / (2 * h)
            a = grads[name][idx]
            worst = max(worst, abs(a - fd) / max(abs(a), 1e-8))
    return worst
