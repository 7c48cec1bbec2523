"""Finite-difference checks over every differentiable op and both losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import batch_dice_loss, dice_loss, multiscale_mae

TOL = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-6}


@dataclass
class GradCase:
    name: str
    dtype: str
    seed: int
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tol)


def _cases(rng: np.random.Generator):
    """(name, f, inputs) triples; each f maps tensors to a scalar through a random projection."""
    n, h, w, c = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 3))
    k = int(rng.integers(1, 3))
    shape = (n, h, w, c)

    def rand(*s):
        return rng.standard_normal(s)

    def proj(out_shape):
        g = rand(*out_shape)
        return lambda t: (t * g).sum()

    pos = rng.uniform(0.5, 2.0, shape)
    up = (n, 2 * h, 2 * w, c)
    cases = [
        ("add", lambda a, b: (a + b).sum() + (a * a).sum(), [rand(*shape), rand(*shape)]),
        ("sub", lambda a, b: ((a - b) * (a - b)).sum(), [rand(*shape), rand(*shape)]),
        ("mul", lambda a, b, p=proj(shape): p(a * b), [rand(*shape), rand(*shape)]),
        ("div", lambda a, b, p=proj(shape): p(a / b), [rand(*shape), pos]),
        ("power", lambda a, p=proj(shape): p(a ** 3), [rand(*shape)]),
        ("abs", lambda a, p=proj(shape): p(a.abs()), [rand(*shape)]),
        ("sum_axis", lambda a, p=proj((n, w, c)): p(a.sum(axis=1)), [rand(*shape)]),
        ("mean", lambda a, p=proj((n, h, 1, c)): p(a.mean(axis=2, keepdims=True)), [rand(*shape)]),
        ("reshape", lambda a, p=proj((n * h, w * c)): p(a.reshape((n * h, w * c))), [rand(*shape)]),
        ("leaky_relu", lambda a, p=proj(shape): p(T.leaky_relu(a)), [rand(*shape)]),
        ("relu", lambda a, p=proj(shape): p(T.relu(a)), [rand(*shape)]),
        ("sigmoid", lambda a, p=proj(shape): p(T.sigmoid(a)), [rand(*shape)]),
        ("concat_channels", lambda a, b, p=proj((n, h, w, c + k)): p(T.concat_channels([a, b])),
         [rand(*shape), rand(n, h, w, k)]),
        ("elementwise_mul", lambda a, m, p=proj(shape): p(T.elementwise_mul(a, m)), [rand(*shape), rand(n, h, w, 1)]),
        ("upsample_bilinear2x", lambda a, p=proj(up): p(T.upsample_bilinear2x(a)), [rand(*shape)]),
        ("upsample_conv3x3", lambda a, wt, b, p=proj(up[:3] + (k,)): p(T.upsample_conv3x3(a, wt, b)),
         [rand(*shape), rand(3, 3, c, k), rand(k)]),
    ]
    for kk, s, pad in [(4, 2, "same"), (3, 1, "same"), (3, 1, "valid"), (2, 2, "valid")]:
        if pad == "valid" and (h < kk or w < kk):
            continue
        ho = -(-h // s) if pad == "same" else (h - kk) // s + 1
        wo = -(-w // s) if pad == "same" else (w - kk) // s + 1
        cases.append((f"conv2d_k{kk}_s{s}_{pad}",
                      lambda a, wt, b, s=s, pad=pad, p=proj((n, ho, wo, k)): p(T.conv2d(a, wt, b, s, pad)),
                      [rand(*shape), rand(kk, kk, c, k), rand(k)]))
    bn_shape = (n + 1, h, w, c)
    rm, rv = np.zeros(c), np.ones(c)
    cases.append(("batch_norm", lambda a, g, b, p=proj(bn_shape): p(T.batch_norm(a, g, b, rm.copy(), rv.copy(), True)),
                  [rand(*bn_shape), rng.uniform(0.5, 1.5, c), rand(c)]))
    cases.append(("multiscale_mae", lambda a, b, a2, b2: multiscale_mae([a, a2], [b, b2]),
                  [rand(*shape), rand(*shape), rand(n, h, w, k), rand(n, h, w, k)]))
    g = (rng.random((n, h, w, 1)) > 0.5).astype(float)
    g.flat[0] = 1.0
    p0 = rng.uniform(0.05, 0.95, (n, h, w, 1))
    cases.append(("dice_loss", lambda p, g=g: dice_loss(T.Tensor(g.astype(p.dtype)), p), [p0]))
    cases.append(("batch_dice_loss", lambda p, g=g: batch_dice_loss(T.Tensor(g.astype(p.dtype)), p), [p0.copy()]))
    return cases


def run_gradient_suite(seeds=range(20), dtypes=(np.float64, np.float32)) -> list:
    """One :class:`GradCase` per (op, seed, dtype); shapes are drawn per seed.

    The float64 finite-difference reference is shared by both precisions.
    """
    results = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 7])
        for name, f, inputs in _cases(rng):
            numeric = T.numeric_grad(f, inputs)
            for dt in map(np.dtype, dtypes):
                rep = T.grad_check(f, inputs, dtype=dt, numeric=numeric)
                results.append(GradCase(name, dt.name, int(seed), float(rep.max_error), TOL[dt]))
    return results
