"""Finite-difference oracle shared by the model tests and the acceptance suite."""

import numpy as np

from geoshift.core import make_rng
from geoshift.model import ModelConfig, backward, bce_loss, forward, init


def toy_problem(seed: int):
    r = make_rng(seed)
    depth = 1 + r.int_below(2)
    cfg = ModelConfig(
        input_dim=3 + r.int_below(4),
        num_classes=2 + r.int_below(3),
        hidden_dims=tuple(3 + r.int_below(4) for _ in range(depth)),
        dropout_p=float(r.uniform(0.0, 0.5)),
    )
    params = init(cfg, r)
    # move gamma/beta and biases away from their init values so every term is exercised
    params = params.updated({k: v + r.normal(0.0, 0.3, size=v.shape) for k, v in params.arrays.items()
                             if k.endswith(("gamma", "beta", ".b"))})
    n = 6 + r.int_below(5)
    x = r.normal(size=(n, cfg.input_dim))
    y = (r.uniform(size=(n, cfg.num_classes)) < 0.4).astype(np.float64)
    return params, x, y, seed + 1000


def loss_at(params, x, y, drop_seed):
    # fixed dropout stream, so the loss is a deterministic function of params
    scores, cache = forward(params, x, "train", make_rng(drop_seed))
    return bce_loss(scores, y, logits=cache.logits)[0]


def max_relative_error(params, x, y, drop_seed, h=1e-5):
    scores, cache = forward(params, x, "train", make_rng(drop_seed))
    _, g = bce_loss(scores, y, logits=cache.logits)
    grads = backward(params, cache, g)
    worst = 0.0
    for key in params.trainable_keys:
        arr = params[key]
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += h
            minus[idx] -= h
            num = (loss_at(params.updated({key: plus}), x, y, drop_seed)
                   - loss_at(params.updated({key: minus}), x, y, drop_seed)) / (2 * h)
            ana = grads[key][idx]
            # biases feeding a batch norm have an exactly zero gradient; the floor
            # keeps central-difference roundoff (~1e-11) from reading as relative error
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            worst = max(worst, err)
    return worst
