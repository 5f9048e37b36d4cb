"""Training objective: task cross-entropy plus weighted routing regularizers.

Normalization conventions used throughout:

* every per-token quantity is averaged over the batch;
* ``sp`` and ``cp`` sum over layers (and pairs), ``lb`` and ``z`` average
  over layers;
* ``sp`` counts each unordered expert pair once, i.e. half of the
  ordered-pair sum.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm
from .moe import topk_indices
from .numeric import Tensor


class CouplingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossWeights:
    lb: float = 1e-2
    z: float = 1e-3
    sp: float = 2e-3
    cp: float = 1e-3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Unweighted components and the weighted total; a skipped component is ``None``."""

    task: Tensor
    lb: Tensor | None
    z: Tensor | None
    sp: Tensor | None
    cp: Tensor | None
    total: Tensor
    weights: LossWeights

    def as_dict(self) -> dict[str, float]:
        out = {}
        for name in ("task", "lb", "z", "sp", "cp", "total"):
            t = getattr(self, name)
            out[name] = float("nan") if t is None else t.item()
        return out


def _scores_of(layer_outputs) -> list[Tensor]:
    return [nm.tensor(o.scores if hasattr(o, "scores") else o) for o in layer_outputs]


def specialization_loss(layer_outputs) -> Tensor:
    """Mean over tokens of the squared cosine between co-activated experts' activations."""
    total: Tensor | None = None
    for out in layer_outputs:
        z = out.activations
        k = z.shape[1]
        for a in range(k):
            for b in range(a + 1, k):
                c2 = nm.square(nm.cosine(z[:, a, :], z[:, b, :]))
                term = nm.mean(c2)
                total = term if total is None else nm.add(total, term)
    return total if total is not None else Tensor(0.0)


def coupling_targets(s_cur: np.ndarray, s_next: np.ndarray, k: int) -> np.ndarray:
    """For each token and source expert, the ``k`` next-layer experts with the highest joint score.

    Returns ``(B, E, k)`` indices; ties go to the lowest expert index.
    """
    joint = s_cur[:, :, None] * s_next[:, None, :]
    return topk_indices(joint, k)


def coupling_loss(layer_outputs, k: int) -> Tensor:
    """``-mean_i sum_l sum_e sum_{nu in T_i^{l,e}} s_i^{l,e} s_i^{l+1,nu}``.

    ``layer_outputs`` may be ``LayerOutput`` objects or bare ``(B, E)`` score
    arrays/tensors, one per layer. With fewer than two layers the loss is
    zero and a ``CouplingWarning`` is emitted.
    """
    scores = _scores_of(layer_outputs)
    if len(scores) < 2:
        warnings.warn("coupling loss needs at least two layers; returning 0", CouplingWarning, stacklevel=2)
        return Tensor(0.0)
    B = scores[0].shape[0]
    total: Tensor | None = None
    for cur, nxt in zip(scores[:-1], scores[1:]):
        targets = coupling_targets(cur.data, nxt.data, k)
        joint = nm.mul(nm.reshape(cur, (B, -1, 1)), nm.reshape(nxt, (B, 1, -1)))
        picked = nm.take_along_axis(joint, targets, axis=2)
        term = nm.tsum(picked)
        total = term if total is None else nm.add(total, term)
    return nm.mul(total, -1.0 / B)


def load_balance_loss(scores, active: np.ndarray) -> Tensor:
    """Switch-style ``E * sum_e f_e P_e`` for one layer.

    ``f_e`` is the share of (token, slot) assignments going to ``e`` and
    ``P_e`` the batch-mean routing score of ``e``.
    """
    scores = nm.tensor(scores)
    active = np.asarray(active)
    B, E = scores.shape
    if active.ndim == 1:
        active = active[:, None]
    frac = np.bincount(active.ravel(), minlength=E) / active.size
    mean_score = nm.mean(scores, axis=0)
    return nm.mul(nm.tsum(nm.mul(mean_score, frac)), float(E))


def z_loss(logits_per_layer) -> Tensor:
    """Mean over layers and tokens of ``logsumexp(q)**2``."""
    logits = [nm.tensor(getattr(q, "logits", q)) for q in logits_per_layer]
    terms = [nm.mean(nm.square(nm.logsumexp(q, axis=-1))) for q in logits]
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    return nm.mul(total, 1.0 / len(terms))


def mean_load_balance_loss(layer_outputs) -> Tensor:
    terms = [load_balance_loss(o.scores, o.active) for o in layer_outputs]
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    return nm.mul(total, 1.0 / len(terms))


def total_loss(
    logits,
    targets,
    layer_outputs: Sequence,
    weights: LossWeights | None = None,
    k: int | None = None,
    skip_unweighted: bool = False,
) -> LossBreakdown:
    """Task loss plus the weighted regularizers, composed in a fixed order.

    With ``skip_unweighted`` a regularizer whose weight is zero is not
    evaluated at all (its breakdown entry is ``None``).
    """
    weights = weights or LossWeights()
    logits = nm.tensor(logits)
    targets = np.asarray(targets).reshape(-1)
    if logits.shape[0] != targets.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows vs {targets.shape[0]} targets")
    if k is None:
        k = layer_outputs[0].active.shape[1]
    task = nm.cross_entropy(logits, targets)

    def want(w):
        return w != 0 or not skip_unweighted

    lb = mean_load_balance_loss(layer_outputs) if want(weights.lb) else None
    zl = z_loss(layer_outputs) if want(weights.z) else None
    sp = specialization_loss(layer_outputs) if want(weights.sp) else None
    cp = None
    if want(weights.cp):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CouplingWarning)
            cp = coupling_loss(layer_outputs, k)
    total = task
    for term, w in ((lb, weights.lb), (zl, weights.z), (sp, weights.sp), (cp, weights.cp)):
        if term is not None:
            total = nm.add(total, nm.mul(term, w))
    return LossBreakdown(task=task, lb=lb, z=zl, sp=sp, cp=cp, total=total, weights=weights)
