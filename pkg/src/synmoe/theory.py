"""Executable checks for the routing/specialization bounds.

Each ``check_*`` function evaluates one inequality on concrete inputs and
returns a :class:`BoundReport`. Premises are verified first; when they do
not hold the report is marked ``applicable=False`` and must not be read as a
violation. Expert ids are 0-based throughout.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from . import numeric as nm
from .losses import LossWeights, total_loss
from .moe import MoeModel, model_forward

HOLD_TOL = 1e-9
COND_TOL = 1e-12


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    applicable: bool = True
    context: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return bool(self.lhs <= self.rhs + HOLD_TOL)

    @property
    def slack(self) -> float:
        return float(self.rhs - self.lhs)

    @property
    def ok(self) -> bool:
        """True unless the bound is applicable and violated."""
        return self.holds or not self.applicable

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": float(self.lhs),
            "rhs": float(self.rhs),
            "slack": self.slack,
            "holds": self.holds,
            "applicable": self.applicable,
            "context": _jsonable(self.context),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < nm.COSINE_EPS or nv < nm.COSINE_EPS:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class LatentAllocation:
    """Planted region ``A(t)`` of every vocabulary id; regions partition the vocabulary."""

    token_cluster: np.ndarray  # (V,) int in [0, n_clusters)
    n_clusters: int

    def __post_init__(self):
        a = np.asarray(self.token_cluster, dtype=np.int64)
        object.__setattr__(self, "token_cluster", a)
        if a.ndim != 1 or a.size == 0 or a.min() < 0 or a.max() >= self.n_clusters:
            raise ValueError("allocation must map every id to a region in [0, n_clusters)")

    def of(self, tokens) -> np.ndarray:
        return self.token_cluster[np.asarray(tokens)]

    def block(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.token_cluster == c)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.token_cluster, minlength=self.n_clusters)

    def measure(self) -> np.ndarray:
        """Share of the vocabulary in each region (sums to 1)."""
        return self.sizes() / self.token_cluster.size


# ---------------------------------------------------------------- activation / gradient alignment


def check_prop1_gradient_alignment(model: MoeModel, token: int, target: int | None = None, weights: LossWeights | None = None) -> BoundReport:
    """Compare cos of co-activated experts' ``W_down`` gradients with cos of their activations.

    Runs the full objective on a single token and backpropagates. Gradients
    already stored on ``model`` are overwritten.
    """
    weights = weights or LossWeights()
    target = token if target is None else target
    model.zero_grads()
    fwd = model_forward(model, np.array([token]))
    loss = total_loss(fwd.logits, np.array([target]), fwd.layer_outputs, weights, model.cfg.k)
    nm.backward(loss.total)

    gaps: list[float] = []
    pairs = []
    for l, (layer, out) in enumerate(zip(model.layers, fwd.layer_outputs)):
        active = out.active[0]
        z = out.activations.data[0]
        for a, b in itertools.combinations(range(len(active)), 2):
            ea, eb = int(active[a]), int(active[b])
            g_cos = _cos(layer.w_down.grad[ea].ravel(), layer.w_down.grad[eb].ravel())
            z_cos = _cos(z[a], z[b])
            gaps.append(abs(g_cos - z_cos))
            pairs.append((l, ea, eb, g_cos, z_cos))
    vacuous = not gaps
    return BoundReport(
        name="prop1_gradient_alignment",
        lhs=max(gaps) if gaps else 0.0,
        rhs=1e-8,
        context={"pairs": pairs, "vacuous": vacuous, "token": int(token)},
    )


# ---------------------------------------------------------------- specialization propagation


def prop2_bound(delta: float, eps: float, iota: float) -> float:
    t = delta + 2.0 * iota
    return eps + 2.0 * math.sqrt(2.0) * t + 2.0 * t * t


def check_prop2_propagation(
    routers_l,
    routers_next,
    x_l,
    x_next,
    delta: float,
    eps: float,
    iota: float,
    experts: tuple[int, int, int, int] | None = None,
) -> BoundReport:
    """Cross-layer transfer of router near-orthogonality for one token pair.

    ``x_l``/``x_next`` hold the two tokens' representations at layers l and
    l+1 (shape ``(2, h)``). ``experts`` is ``(e1, nu1, e2, nu2)``: the layer-l
    expert of token i, its layer-(l+1) partner, and the same for token j.
    When omitted, each token's top-1 expert by router logit is used.
    """
    R, Rn = np.asarray(routers_l, float), np.asarray(routers_next, float)
    X, Xn = np.asarray(x_l, float), np.asarray(x_next, float)
    if X.shape[0] != 2 or Xn.shape[0] != 2:
        raise ValueError("x_l and x_next must hold exactly two tokens")
    if experts is None:
        e = np.argmax(X @ R.T, axis=1)
        nu = np.argmax(Xn @ Rn.T, axis=1)
        experts = (int(e[0]), int(nu[0]), int(e[1]), int(nu[1]))
    e1, nu1, e2, nu2 = experts

    failed = []
    cont = [_cos(X[t], Xn[t]) for t in (0, 1)]
    if min(cont) < 1.0 - delta**2 - COND_TOL:
        failed.append("representation_continuity")
    src = abs(_cos(R[e1], R[e2]))
    if src > eps + COND_TOL:
        failed.append("source_specialization")
    conf = [_cos(X[0], R[e1]), _cos(Xn[0], Rn[nu1]), _cos(X[1], R[e2]), _cos(Xn[1], Rn[nu2])]
    if min(conf) < 1.0 - iota**2 - COND_TOL:
        failed.append("cross_layer_coupling")
    if e1 == e2:
        failed.append("same_source_expert")

    lhs = abs(_cos(Rn[nu1], Rn[nu2]))
    return BoundReport(
        name="prop2_propagation",
        lhs=lhs,
        rhs=prop2_bound(delta, eps, iota),
        applicable=not failed,
        context={"failed_conditions": failed, "experts": list(experts), "source_cos": src, "delta": delta, "eps": eps, "iota": iota},
    )


def _rotate(v: np.ndarray, angle: float, toward: np.ndarray) -> np.ndarray:
    """Rotate unit ``v`` by ``angle`` within the plane spanned by ``v`` and ``toward``."""
    w = toward - np.dot(toward, v) * v
    n = np.linalg.norm(w)
    if n < 1e-12:
        return v.copy()
    return math.cos(angle) * v + math.sin(angle) * (w / n)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def sample_prop2_instance(rng: np.random.Generator, h: int, delta: float, eps: float, iota: float, E: int = 4, adversarial: bool = False):
    """Random vectors meeting all three premises; returns kwargs for ``check_prop2_propagation``.

    With ``adversarial`` every rotation uses its full angle budget and turns
    the partner routers toward each other, which is the worst case for the bound.
    """
    a_iota = math.acos(max(-1.0, 1.0 - iota**2))
    a_delta = math.acos(max(-1.0, 1.0 - delta**2))
    # shrink budgets by a hair so float error cannot push a premise over its boundary
    a_iota *= 1 - 1e-9
    a_delta *= 1 - 1e-9
    R = np.stack([_unit(rng.normal(size=h)) for _ in range(E)])
    Rn = np.stack([_unit(rng.normal(size=h)) for _ in range(E)])
    e1, e2, nu1, nu2 = 0, 1, 0, 1
    c = rng.uniform(-eps, eps) if not adversarial else eps * rng.choice([-1.0, 1.0])
    R[e2] = _rotate(R[e1], math.acos(c), rng.normal(size=h))

    def chain(r, pull):
        frac = (lambda: 1.0) if adversarial else (lambda: rng.uniform())
        x = _rotate(r, a_iota * frac(), pull if adversarial else rng.normal(size=h))
        xn = _rotate(x, a_delta * frac(), pull if adversarial else rng.normal(size=h))
        rn = _rotate(xn, a_iota * frac(), pull if adversarial else rng.normal(size=h))
        return x, xn, rn

    xi, xin, rn1 = chain(R[e1], R[e2])
    xj, xjn, rn2 = chain(R[e2], rn1 if adversarial else R[e1])
    Rn[nu1], Rn[nu2] = rn1, rn2
    scale = rng.uniform(0.5, 2.0, size=(4, 1))
    return dict(
        routers_l=R,
        routers_next=Rn,
        x_l=np.stack([xi, xj]) * scale[:2],
        x_next=np.stack([xin, xjn]) * scale[2:],
        delta=delta,
        eps=eps,
        iota=iota,
        experts=(e1, nu1, e2, nu2),
    )


# ---------------------------------------------------------------- entropy corollary


def router_entropy(scores) -> np.ndarray | float:
    """Shannon entropy (natural log) of each routing distribution; ``0 log 0 = 0``."""
    g = np.asarray(scores, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(g > 0, -g * np.log(np.where(g > 0, g, 1.0)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def binary_entropy(p: float) -> float:
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log(p) - (1 - p) * math.log(1 - p)


def entropy_bound(delta: float, E: int) -> float:
    """``h(delta) + delta * ln(E - 1)`` for ``delta in (0, 1/2]``."""
    if not 0.0 < delta <= 0.5:
        raise ValueError(f"delta must lie in (0, 1/2], got {delta}")
    if E < 2:
        raise ValueError("entropy bound needs E >= 2")
    return binary_entropy(delta) + delta * math.log(E - 1)


def check_entropy_corollary(scores, delta: float) -> BoundReport:
    """Max entropy among rows whose top score is at least ``1 - delta`` versus the bound."""
    g = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    bound = entropy_bound(delta, g.shape[1])
    eligible = g.max(axis=1) >= 1.0 - delta
    H = router_entropy(g[eligible]) if eligible.any() else np.zeros(0)
    return BoundReport(
        name="entropy_corollary",
        lhs=float(H.max()) if H.size else 0.0,
        rhs=bound,
        applicable=bool(eligible.any()),
        context={"delta": delta, "E": g.shape[1], "n_eligible": int(eligible.sum()), "violations": int((H > bound + HOLD_TOL).sum())},
    )


def sample_decisive_routing(rng: np.random.Generator, n: int, E: int, delta: float) -> np.ndarray:
    """Routing vectors with top mass in ``[1 - delta, 1]`` and varied tail shapes.

    Tail concentrations span near-uniform (the entropy maximizer) to sparse.
    """
    top = rng.uniform(1.0 - delta, 1.0, size=n)
    top[: n // 10] = 1.0 - delta  # boundary cases
    conc = np.exp(rng.uniform(np.log(0.05), np.log(200.0), size=n))
    tail = rng.gamma(conc[:, None], size=(n, E - 1))
    tail /= tail.sum(axis=1, keepdims=True)
    g = np.empty((n, E))
    star = rng.integers(0, E, size=n)
    rows = np.arange(n)
    mask = np.ones((n, E), dtype=bool)
    mask[rows, star] = False
    g[mask] = (tail * (1.0 - top)[:, None]).ravel()
    g[rows, star] = top
    return g


# ---------------------------------------------------------------- weak specialization => decisive routing


def check_thm_weak_spec(losses, scores, gamma0: float, eps0: float, delta: float) -> BoundReport:
    """Decisive-routing probability lower bound from a loss margin.

    ``losses[t, e]`` is expert e's loss on token t and ``scores[t]`` the
    router's softmax. The report compares the bound (lhs) against the
    empirical ``P[g_{e*} >= 1 - delta]`` (rhs). The router-gradient identity
    ``dL/dz_e = g_e (l_e - L)`` is verified with the gradient engine and
    recorded in the context.
    """
    if gamma0 <= 0:
        raise ValueError(f"gamma0 must be positive, got {gamma0}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    ell = np.asarray(losses, dtype=np.float64)
    g = np.asarray(scores, dtype=np.float64)
    if ell.shape != g.shape or ell.ndim != 2:
        raise ValueError(f"losses {ell.shape} and scores {g.shape} must be the same (N, E) shape")
    N, E = ell.shape
    srt = np.sort(ell, axis=1)
    margin = srt[:, 1] - srt[:, 0] if E > 1 else np.full(N, np.inf)
    star = np.argmin(ell, axis=1)
    rows = np.arange(N)
    mix = (g * ell).sum(axis=1)
    gap = mix - ell[rows, star]

    # gradient identity on the mixture with losses held fixed
    z = nm.Parameter(np.log(np.clip(g, 1e-300, None)), "router_logits")
    mixture = nm.tsum(nm.mul(nm.softmax(z, axis=-1), ell))
    nm.backward(mixture)
    g_soft = nm.softmax(nm.Tensor(z.data)).data
    formula = g_soft * (ell - (g_soft * ell).sum(axis=1, keepdims=True))
    grad_err = float(np.abs(z.grad - formula).max())
    decisive_needed = (margin > 0) & (g[rows, star] < 1.0)
    sign_violations = int((z.grad[rows, star][decisive_needed] >= 0).sum())

    failed = []
    if (margin <= 0).any():
        failed.append("unique_best_expert")
    if (margin >= gamma0).mean() < 1.0 - eps0 - COND_TOL:
        failed.append("margin_probability")

    p_decisive = float((g[rows, star] >= 1.0 - delta).mean())
    bound = 1.0 - eps0 - float(gap.mean()) / (gamma0 * delta)
    return BoundReport(
        name="thm_weak_specialization",
        lhs=bound,
        rhs=p_decisive,
        applicable=not failed,
        context={
            "failed_conditions": failed,
            "gamma0": gamma0,
            "eps0": eps0,
            "delta": delta,
            "mean_oracle_gap": float(gap.mean()),
            "grad_identity_max_err": grad_err,
            "sign_violations": sign_violations,
        },
    )


def sample_weak_spec_population(rng: np.random.Generator, n: int, E: int, gamma0: float, p_margin: float = 0.95, sharpness: float | None = None):
    """Synthetic per-expert losses with margin >= gamma0 on about ``p_margin`` of tokens, plus router scores."""
    star = rng.integers(0, E, size=n)
    best = rng.uniform(0.0, 1.0, size=n)
    big = rng.uniform() < 2  # keep stream layout fixed
    del big
    wide = rng.uniform(size=n) < p_margin
    base_margin = np.where(wide, gamma0 + rng.exponential(0.5, size=n), rng.uniform(1e-3, gamma0, size=n))
    extra = rng.exponential(0.5, size=(n, E))
    ell = best[:, None] + base_margin[:, None] + extra
    ell[np.arange(n), star] = best
    # smallest competitor sits exactly at the sampled margin
    others = ell.copy()
    others[np.arange(n), star] = np.inf
    closest = np.argmin(others, axis=1)
    ell[np.arange(n), closest] = best + base_margin
    sharp = rng.uniform(0.0, 8.0) if sharpness is None else sharpness
    logits = rng.normal(size=(n, E)) - sharp * (ell - best[:, None])
    g = np.exp(logits - logits.max(axis=1, keepdims=True))
    g /= g.sum(axis=1, keepdims=True)
    return ell, g


def per_expert_losses(model: MoeModel, inputs, targets, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-token task loss when ``layer`` is forced to route every token to one expert.

    Returns ``(losses (N, E), router scores (N, E) at that layer)``. Other
    layers route normally. This exposes each expert's own loss so the
    weak-specialization check can run on a trained model.
    """
    from .moe import forced_model_forward

    inputs = np.asarray(inputs).reshape(-1)
    targets = np.asarray(targets).reshape(-1)
    cols = []
    scores = None
    for e in range(model.cfg.E):
        fwd = forced_model_forward(model, inputs, {layer: e})
        lp = nm.log_softmax(fwd.logits).data
        cols.append(-lp[np.arange(len(targets)), targets])
        scores = fwd.layer_outputs[layer].scores.data
    return np.stack(cols, axis=1), scores


# ---------------------------------------------------------------- clear routing => region risk


def check_thm_region_risk(de_weights, in_region, losses_old, losses_new, eta: float, loss_bound: float) -> BoundReport:
    """Region-conditional risk improvement for one expert.

    ``de_weights[t]`` is the router weight ``g(e|t)`` of the expert on token
    t (normalized internally into its effective distribution) and
    ``in_region[t]`` marks the expert's advantage region.
    """
    w = np.asarray(de_weights, dtype=np.float64)
    S = np.asarray(in_region, dtype=bool)
    lo = np.asarray(losses_old, dtype=np.float64)
    ln = np.asarray(losses_new, dtype=np.float64)
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("router weights must be non-negative with positive total")
    De = w / w.sum()
    alpha = float(De[S].sum())
    r_eff_old, r_eff_new = float(De @ lo), float(De @ ln)
    delta_e = r_eff_old - r_eff_new

    failed = []
    if alpha < 1.0 - eta - COND_TOL:
        failed.append("purity")
    if lo.min() < 0 or ln.min() < 0 or lo.max() > loss_bound or ln.max() > loss_bound:
        failed.append("bounded_loss")
    if not delta_e > 0:
        failed.append("effective_risk_decrease")
    vacuous = delta_e <= eta * loss_bound
    if vacuous:
        failed.append("vacuous")

    if alpha > 0:
        rs_old = float(De[S] @ lo[S]) / alpha
        rs_new = float(De[S] @ ln[S]) / alpha
    else:
        rs_old = rs_new = float("nan")
    return BoundReport(
        name="thm_region_risk",
        lhs=rs_new,
        rhs=rs_old - (delta_e - eta * loss_bound),
        applicable=not failed and alpha > 0,
        context={"alpha": alpha, "delta_e": delta_e, "eta": eta, "B": loss_bound, "vacuous": vacuous, "failed_conditions": failed, "r_eff_old": r_eff_old, "r_eff_new": r_eff_new},
    )


def sample_region_risk_instance(rng: np.random.Generator, n: int = 200, loss_bound: float = 1.0):
    """Random purity/risk population meeting (purity, boundedness, non-vacuous decrease)."""
    while True:
        eta = rng.uniform(0.01, 0.3)
        S = rng.uniform(size=n) < rng.uniform(0.2, 0.8)
        if S.all() or not S.any():
            continue
        w = np.where(S, rng.uniform(0.2, 1.0, size=n), rng.uniform(0.0, 1.0, size=n))
        # scale off-region mass to hit the purity target
        target = rng.uniform(1.0 - eta, 1.0)
        on, off = w[S].sum(), w[~S].sum()
        w[~S] *= (1.0 - target) / target * on / off
        lo = rng.uniform(0.0, loss_bound, size=n)
        drop = rng.uniform(0.0, 1.0, size=n) * lo
        ln = lo - drop
        # adversarial: off-region losses move to either extreme
        ln[~S] = np.where(rng.uniform(size=(~S).sum()) < 0.5, 0.0, loss_bound)
        rep = check_thm_region_risk(w, S, lo, ln, eta, loss_bound)
        if rep.applicable:
            return dict(de_weights=w, in_region=S, losses_old=lo, losses_new=ln, eta=eta, loss_bound=loss_bound)


# ---------------------------------------------------------------- coupling coefficient / backward transfer


def co_occurrence(c_l, c_next, E: int) -> np.ndarray:
    c_l, c_next = np.asarray(c_l).ravel(), np.asarray(c_next).ravel()
    if c_l.shape != c_next.shape:
        raise ValueError("assignments must cover the same tokens")
    M = np.zeros((E, E), dtype=np.int64)
    np.add.at(M, (c_l, c_next), 1)
    return M


def coupling_coefficient(c_l, c_next, E: int) -> tuple[float, np.ndarray]:
    """Best agreement between two top-1 assignments over relabelings of the first.

    Returns ``(kappa, perm)`` with ``perm[a]`` the layer-(l+1) expert matched
    to layer-l expert ``a``.
    """
    c_l = np.asarray(c_l).ravel()
    if c_l.size == 0:
        raise ValueError("empty assignment")
    M = co_occurrence(c_l, c_next, E)
    rows, cols = linear_sum_assignment(M, maximize=True)
    perm = np.empty(E, dtype=np.int64)
    perm[rows] = cols
    return int(M[rows, cols].sum()) / c_l.size, perm


def coupling_coefficient_bruteforce(c_l, c_next, E: int) -> tuple[float, np.ndarray]:
    """Exhaustive search over all ``E!`` relabelings (E <= 6 only)."""
    if E > 6:
        raise ValueError("brute force limited to E <= 6")
    c_l = np.asarray(c_l).ravel()
    if c_l.size == 0:
        raise ValueError("empty assignment")
    M = co_occurrence(c_l, c_next, E)
    best, best_perm = -1, None
    idx = np.arange(E)
    for perm in itertools.permutations(range(E)):
        score = int(M[idx, list(perm)].sum())
        if score > best:
            best, best_perm = score, np.array(perm)
    return best / c_l.size, best_perm


def check_backward_transfer(c_l, c_next, allocation, E: int) -> BoundReport:
    """Aligned layer-l error versus ``eps_{l+1} + (1 - kappa)``."""
    c_l, c_next, A = (np.asarray(v).ravel() for v in (c_l, c_next, allocation))
    if not c_l.shape == c_next.shape == A.shape:
        raise ValueError("assignments and allocation must share one token index set")
    kappa, perm = coupling_coefficient(c_l, c_next, E)
    eps_next = float((c_next != A).mean())
    aligned = float((perm[c_l] != A).mean())
    return BoundReport(
        name="backward_transfer",
        lhs=aligned,
        rhs=eps_next + (1.0 - kappa),
        context={"kappa": kappa, "eps_next": eps_next, "perm": perm},
    )


# ---------------------------------------------------------------- load-balance compatibility


def balanced_partition(tokens, direction, E: int) -> tuple[np.ndarray, np.ndarray]:
    """Cut the projections ``u_i = a . x_i`` into ``E`` equal consecutive blocks.

    Returns ``(thresholds (E-1,), assignment (B,))``. Thresholds sit midway
    between neighbouring blocks; equal projections are ordered by token index.
    """
    X = np.asarray(tokens, dtype=np.float64)
    a = np.asarray(direction, dtype=np.float64)
    B = X.shape[0]
    if E < 1 or B % E:
        raise ValueError(f"E={E} must divide the batch size {B}")
    if not np.any(a):
        raise ValueError("direction must be non-zero")
    u = X @ a
    order = np.lexsort((np.arange(B), u))
    m = B // E
    assign = np.empty(B, dtype=np.int64)
    for e in range(E):
        assign[order[e * m : (e + 1) * m]] = e
    thresholds = np.array([(u[order[e * m - 1]] + u[order[e * m]]) / 2.0 for e in range(1, E)])
    return thresholds, assign


def modular_slots(B: int, E: int, k: int, offsets) -> np.ndarray:
    """``f(i)_r = (offset_r + i) mod E`` for tokens ``i = 0..B-1``; shape ``(B, k)``."""
    off = np.asarray(offsets, dtype=np.int64).reshape(-1)
    if off.shape != (k,):
        raise ValueError(f"need {k} offsets, got {off.shape}")
    if len(set(off.tolist())) != k or off.min() < 0 or off.max() >= E:
        raise ValueError("offsets must be k distinct ids in [0, E)")
    return (off[None, :] + np.arange(B)[:, None]) % E


def construct_coupled_balanced(B: int, E: int, k: int, L: int, eta=None, offsets=None) -> np.ndarray:
    """Routing scores ``(L, B, E)`` that reach the coupling optimum with perfectly balanced load.

    Token ``i`` at layer ``l`` puts weight ``eta[l, i, r]`` on expert
    ``(offsets[l, r] + i) mod E`` and zero elsewhere. ``eta`` defaults to
    ``1/k`` per slot, ``offsets`` to ``0..k-1`` on every layer.
    """
    if B % E:
        raise ValueError(f"E={E} must divide B={B}")
    if eta is None:
        eta = np.full((L, B, k), 1.0 / k)
    eta = np.broadcast_to(np.asarray(eta, dtype=np.float64), (L, B, k))
    if (eta < 0).any() or np.abs(eta.sum(axis=2) - 1.0).max() > 1e-12:
        raise ValueError("eta rows must be non-negative and sum to 1")
    if offsets is None:
        offsets = np.tile(np.arange(k), (L, 1))
    offsets = np.broadcast_to(np.asarray(offsets, dtype=np.int64), (L, k))
    scores = np.zeros((L, B, E))
    rows = np.arange(B)[:, None]
    for l in range(L):
        slots = modular_slots(B, E, k, offsets[l])
        scores[l][rows, slots] = eta[l]
    return scores


def slot_loads(B: int, E: int, k: int, L: int, offsets=None) -> np.ndarray:
    """Per-layer expert loads ``(L, E)`` of the modular construction."""
    if offsets is None:
        offsets = np.tile(np.arange(k), (L, 1))
    offsets = np.broadcast_to(np.asarray(offsets, dtype=np.int64), (L, k))
    return np.stack([np.bincount(modular_slots(B, E, k, offsets[l]).ravel(), minlength=E) for l in range(L)])


# ---------------------------------------------------------------- cluster agreement


def farthest_point_seeds(X: np.ndarray, E: int, seed: int) -> np.ndarray:
    rng = nm.make_rng(seed, 7)
    idx = [int(rng.integers(X.shape[0]))]
    dist = np.linalg.norm(X - X[idx[0]], axis=1)
    for _ in range(1, E):
        nxt = int(np.argmax(dist))
        idx.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(X - X[nxt], axis=1))
    return X[idx]


def balanced_kmeans(X, E: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """k-means labels followed by greedy size balancing (cluster sizes at most ``ceil(B/E)``)."""
    X = np.asarray(X, dtype=np.float64)
    B = X.shape[0]
    if B < E:
        raise ValueError(f"need at least E={E} points, got {B}")
    km = KMeans(n_clusters=E, init=farthest_point_seeds(X, E, seed), n_init=1, max_iter=max_iter, algorithm="lloyd")
    labels = km.fit_predict(X).astype(np.int64)
    centers = km.cluster_centers_
    cap = -(-B // E)
    dist = np.linalg.norm(X[:, None, :] - centers[None, :, :], axis=2)
    sizes = np.bincount(labels, minlength=E)
    while sizes.max() > cap:
        c = int(np.argmax(sizes))
        members = np.flatnonzero(labels == c)
        far = members[np.argmax(dist[members, c])]
        open_ = np.flatnonzero(sizes < cap)
        dest = int(open_[np.argmin(dist[far, open_])])
        labels[far] = dest
        sizes[c] -= 1
        sizes[dest] += 1
    return labels


def cluster_agreement(reps_l, reps_next, E: int, seed: int = 0) -> float:
    """Percent of tokens whose balanced cluster at layer l matches the aligned cluster at l+1."""
    X, Y = np.asarray(reps_l), np.asarray(reps_next)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("both layers must hold the same tokens")
    if X.shape[0] < E:
        raise ValueError(f"need at least E={E} tokens")
    a = balanced_kmeans(X, E, seed)
    b = balanced_kmeans(Y, E, seed)
    kappa, _ = coupling_coefficient(a, b, E)
    return 100.0 * kappa
