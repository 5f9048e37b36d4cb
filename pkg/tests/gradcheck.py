"""Central-difference check of the full training objective.

Analytic gradients come from the package's reverse pass; the reference is a
symmetric difference of forward values only. Entries whose perturbation
changes any discrete choice (top-k sets, coupling targets) sit on a
selection boundary where the objective is not differentiable, and are
skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from synmoe import numeric as nm
from synmoe.losses import LossWeights, coupling_targets, total_loss
from synmoe.moe import MoeConfig, MoeModel, model_forward

STEP = 1e-5
# gradients smaller than this are compared in absolute terms
REL_FLOOR = 1e-4


@dataclass
class GradcheckResult:
    max_rel_err: float
    checked: int
    skipped: int


def evaluate(model, tokens, targets, weights) -> tuple[float, bytes]:
    """Objective value and a fingerprint of every discrete routing choice."""
    fwd = model_forward(model, tokens)
    outs = fwd.layer_outputs
    value = total_loss(fwd.logits, targets, outs, weights, model.cfg.k).total.item()
    parts = [o.active.tobytes() for o in outs]
    for a, b in zip(outs[:-1], outs[1:]):
        parts.append(coupling_targets(a.scores.data, b.scores.data, model.cfg.k).tobytes())
    return value, b"|".join(parts)


def check_objective(model: MoeModel, tokens, targets, weights, h: float = STEP) -> GradcheckResult:
    model.zero_grads()
    fwd = model_forward(model, tokens)
    nm.backward(total_loss(fwd.logits, targets, fwd.layer_outputs, weights, model.cfg.k).total)
    _, base_sel = evaluate(model, tokens, targets, weights)
    worst, checked, skipped = 0.0, 0, 0
    for p in model.parameters:
        for idx in np.ndindex(p.shape):
            old = p.data[idx]
            p.data[idx] = old + h
            fp, sp = evaluate(model, tokens, targets, weights)
            p.data[idx] = old - h
            fm, sm = evaluate(model, tokens, targets, weights)
            p.data[idx] = old
            if sp != base_sel or sm != base_sel:
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            ana = p.grad[idx]
            err = abs(num - ana) / max(abs(num), abs(ana), REL_FLOOR)
            worst = max(worst, err)
            checked += 1
    return GradcheckResult(worst, checked, skipped)


def random_instance(seed: int):
    """A small random model, token batch and loss weighting with every term switched on."""
    rng = np.random.default_rng(seed)
    E = int(rng.integers(2, 5))
    cfg = MoeConfig(
        E=E,
        k=int(rng.integers(1, E + 1)),
        L=int(rng.integers(1, 4)),
        h=int(rng.integers(3, 6)),
        d_ff=int(rng.integers(3, 5)),
        V=int(rng.integers(4, 8)),
        shared_expert=bool(rng.integers(2)),
    )
    model = MoeModel(cfg, seed)
    B = int(rng.integers(2, 6))
    tokens = rng.integers(0, cfg.V, B)
    targets = rng.integers(0, cfg.V, B)
    w = LossWeights(*rng.uniform(0.1, 1.0, size=4))
    return model, tokens, targets, w
