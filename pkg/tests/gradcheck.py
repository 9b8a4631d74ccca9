"""Random loss instances for comparing analytic encoder gradients with central differences."""
from __future__ import annotations

import itertools

import numpy as np

from fedscal.model import LossSpec, init_params, loss_and_encoder_grad
from fedscal.numerics import RngStream, finite_diff_grad, softmax

TERMS = ("ent", "div", "pce", "local", "glob")
# every non-empty subset of the five client-objective terms
COMBOS = [c for r in range(1, 6) for c in itertools.combinations(TERMS, r)]


def random_instance(k: int):
    rng = RngStream(1000 + k, 0)
    g = rng.gen
    d, h, J, B = int(g.integers(2, 7)), int(g.integers(2, 9)), int(g.integers(2, 6)), int(g.integers(2, 9))
    params = init_params(d, h, J, rng)
    params = params.with_encoder_vector(params.encoder_vector() + 0.3 * rng.normal(params.encoder_vector().size))
    X = rng.normal((B, d))
    combo = COMBOS[k % len(COMBOS)]
    weights = {t: float(g.uniform(0.2, 2.0)) if t in combo else 0.0 for t in TERMS}
    gated = lambda: np.where(g.random(B) < 0.7, g.integers(0, J, B), -1)
    spec = LossSpec(
        ent=weights["ent"],
        div=weights["div"],
        pce=weights["pce"],
        pseudo_labels=g.integers(0, J, B),
        local=weights["local"],
        glob=weights["glob"],
        strong=X + 0.5 * rng.normal((B, d)),
        local_targets=gated(),
        global_targets=gated(),
    )
    if k % 3 == 0:  # symmetric-CE term used by the BMD labeler
        spec.dyn = float(g.uniform(0.2, 2.0))
        spec.dyn_targets = softmax(rng.normal((B, J)))
    return params, X, spec, combo


def max_relative_error(params, X, spec) -> float:
    analytic = loss_and_encoder_grad(params, X, spec).grad.vector()
    numeric = finite_diff_grad(lambda v: loss_and_encoder_grad(params.with_encoder_vector(v), X, spec).loss, params.encoder_vector())
    mask = np.abs(analytic) > 1e-6
    if not mask.any():
        return float(np.max(np.abs(numeric)))
    rel = np.abs(analytic[mask] - numeric[mask]) / np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    small = np.abs(numeric[~mask]).max() if (~mask).any() else 0.0
    return float(max(rel.max(), small))
