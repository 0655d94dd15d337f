"""Meta-gradient check against central finite differences on a tiny MLP."""
from __future__ import annotations

import numpy as np

from ..model import MlpSpec, init_params
from ..numerics import finite_difference, max_relative_error
from ..numerics.rng import Rng
from ..synthesis import SynthConfig, SyntheticDataset, meta_loss_and_grads


def meta_gradient_error(metric: str, s_prime: int = 2, seed: int = 0, h: float = 1e-5,
                        layer_sizes=(4, 2, 3), n: int = 3) -> tuple[float, float]:
    """(rel. error of dL/dX, rel. error of dL/dYlogits) for one instance."""
    rng = Rng(seed).split("selftest", metric, s_prime)
    spec = MlpSpec(tuple(layer_sizes))
    w0 = init_params(spec, rng.split("start"))
    # positive first-layer bias keeps the hidden units active so dL/dX is not trivially zero
    layers = w0.layers()
    layers[0] = (layers[0][0], layers[0][1] + 1.0)
    w_start = w0.from_layers(spec, layers)
    w_target = w_start.with_values(w_start.values + 0.3 * rng.split("target").standard_normal(spec.n_params))
    X = rng.split("X").standard_normal((n, spec.input_dim))
    Y = 0.5 * rng.split("Y").standard_normal((n, spec.n_classes))
    cfg = SynthConfig(s=2, s_prime=s_prime, N=1, eta_inner=0.5, n=n, target_avg_count=0, metric=metric)
    _, gX, gY = meta_loss_and_grads(SyntheticDataset(X, Y), w_start, w_target, cfg)
    fX = finite_difference(lambda x: meta_loss_and_grads(SyntheticDataset(x, Y), w_start, w_target, cfg)[0], X, h)
    fY = finite_difference(lambda y: meta_loss_and_grads(SyntheticDataset(X, y), w_start, w_target, cfg)[0], Y, h)
    return max_relative_error(gX, fX), max_relative_error(gY, fY)


def run_selftest(seed: int = 0, metrics=("l2", "normalized_l2", "cosine"), s_primes=(1, 2, 4)) -> list:
    rows = []
    for metric in metrics:
        for sp in s_primes:
            ex, ey = meta_gradient_error(metric, sp, seed)
            rows.append((metric, sp, ex, ey))
    return rows


def max_error(rows) -> float:
    return float(max(max(r[2], r[3]) for r in rows))
