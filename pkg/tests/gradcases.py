"""Randomised finite-difference cases for every differentiable primitive."""

from __future__ import annotations

import numpy as np

from sarbnn import tensor as tc
from oracles import central_difference, rel_error

KINK_GAP = 0.05  # keep inputs well clear of ReLU / max-pool kinks


def _away_from_zero(rng, shape):
    v = rng.uniform(KINK_GAP, 2.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # a shuffled, evenly spaced grid: no two pooled values within KINK_GAP
    n = int(np.prod(shape))
    return (rng.permutation(n) * KINK_GAP * 2 - n * KINK_GAP).reshape(shape).astype(np.float64)


def _case(rng, prim):
    if prim == "add":
        shape = tuple(rng.integers(1, 5, size=2))
        other = shape if rng.random() < 0.5 else (1, shape[1])
        return lambda a, b: tc.add(a, b), [rng.normal(size=shape), rng.normal(size=other)]
    if prim == "mul":
        shape = tuple(rng.integers(1, 5, size=2))
        other = shape if rng.random() < 0.5 else (shape[0], 1)
        return lambda a, b: tc.mul(a, b), [rng.normal(size=shape), rng.normal(size=other)]
    if prim == "softplus":
        return lambda a: tc.softplus(a), [rng.normal(scale=3, size=tuple(rng.integers(1, 6, size=2)))]
    if prim == "relu":
        return lambda a: tc.relu(a), [_away_from_zero(rng, tuple(rng.integers(1, 6, size=2)))]
    if prim == "sum":
        return lambda a: tc.tensor_sum(a), [rng.normal(size=tuple(rng.integers(1, 5, size=3)))]
    if prim == "flatten":
        return lambda a: tc.flatten(a), [rng.normal(size=tuple(rng.integers(1, 4, size=4)))]
    if prim == "linear":
        n, f, m = rng.integers(1, 5, size=3)
        return lambda x, w, b: tc.linear(x, w, b), [rng.normal(size=(n, f)), rng.normal(size=(f, m)),
                                                    rng.normal(size=(m,))]
    if prim == "conv2d":
        c, o = rng.integers(1, 3, size=2)
        h, w = rng.integers(2, 5, size=2)
        kh, kw = rng.integers(1, h + 1), rng.integers(1, w + 1)
        return (lambda x, k, b: tc.conv2d(x, k, b),
                [rng.normal(size=(1, c, h, w)), rng.normal(size=(o, c, kh, kw)), rng.normal(size=(o,))])
    if prim == "maxpool2d":
        window = int(rng.integers(1, 3))
        stride = int(rng.integers(1, 3))
        h, w = rng.integers(window, 6, size=2)
        c = int(rng.integers(1, 3))
        return lambda x: tc.maxpool2d(x, window, stride), [_distinct(rng, (1, c, h, w))]
    if prim == "log_softmax":
        return lambda a: tc.log_softmax(a), [rng.normal(scale=2, size=tuple(rng.integers(1, 6, size=2)))]
    if prim == "nll_loss":
        n, c = rng.integers(1, 6), rng.integers(2, 6)
        labels = rng.integers(0, c, size=n)
        reduction = "mean" if rng.random() < 0.5 else "sum"
        return lambda lp: tc.nll_loss(tc.log_softmax(lp), labels, reduction), [rng.normal(size=(n, c))]
    raise KeyError(prim)


PRIMITIVES = ("add", "mul", "softplus", "relu", "sum", "flatten", "linear", "conv2d", "maxpool2d",
              "log_softmax", "nll_loss")


def run_case(rng, prim) -> float:
    """Worst relative error between tape and central-difference gradients."""
    op, arrays = _case(rng, prim)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with tc.GradTape() as tape:
        ts = [tape.watch(tc.Tensor(a)) for a in arrays]
        out = op(*ts)
    proj = rng.normal(size=out.shape)
    grads = tape.backward(proj, output=out)

    def f():
        return float(np.sum(proj * op(*[tc.Tensor(a) for a in arrays]).data))

    fd = central_difference(f, arrays)
    return max(rel_error(grads[t], g) for t, g in zip(ts, fd))
