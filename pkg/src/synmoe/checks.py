"""Self-generating falsification suites over the theory validators.

Each suite draws its own inputs from a seeded stream, runs one validator
many times and summarizes the outcome. Used by ``synmoe check``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from . import theory as th
from .losses import coupling_loss, CouplingWarning
from .moe import MoeConfig, MoeModel


@dataclass
class SuiteResult:
    suite: str
    instances: int = 0
    applicable: int = 0
    violations: int = 0
    worst_excess: float = float("-inf")  # max of lhs - rhs over applicable instances
    details: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def add(self, rep: th.BoundReport) -> None:
        self.reports.append(rep)
        self.instances += 1
        if rep.applicable:
            self.applicable += 1
            self.worst_excess = max(self.worst_excess, float(rep.lhs - rep.rhs))
            self.violations += not rep.holds

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "instances": self.instances,
            "applicable": self.applicable,
            "violations": self.violations,
            "worst_excess": self.worst_excess if self.applicable else None,
            "passed": self.passed,
            "details": th._jsonable(self.details),
        }


def run_prop1(seed: int = 0, n_configs: int = 50) -> SuiteResult:
    res = SuiteResult("prop1")
    rng = nm.make_rng(seed, 100)
    gaps = []
    for i in range(n_configs):
        cfg = MoeConfig(
            E=int(rng.choice([4, 8])),
            k=int(rng.choice([2, 3])),
            L=2,
            h=int(rng.choice([8, 16])),
            d_ff=int(rng.choice([16, 32])),
            V=16,
        )
        model = MoeModel(cfg, seed=int(rng.integers(2**32)))
        rep = th.check_prop1_gradient_alignment(model, int(rng.integers(cfg.V)), int(rng.integers(cfg.V)))
        res.add(rep)
        gaps.append(rep.lhs)
    res.details["max_gap"] = max(gaps)
    return res


def run_prop2(seed: int = 0, n: int = 1000) -> SuiteResult:
    res = SuiteResult("prop2")
    rng = nm.make_rng(seed, 101)
    for i in range(n):
        d, e, io = rng.uniform(0.0, 0.3, size=3)
        inst = th.sample_prop2_instance(rng, int(rng.choice([4, 8, 16])), d, e, io, adversarial=bool(i % 2))
        res.add(th.check_prop2_propagation(**inst))
    return res


def run_entropy(seed: int = 0, n: int = 100_000) -> SuiteResult:
    res = SuiteResult("entropy")
    rng = nm.make_rng(seed, 102)
    per = max(1, -(-n // 9))  # at least n samples in total
    for delta in (0.1, 0.25, 0.5):
        for E in (4, 8, 16):
            g = th.sample_decisive_routing(rng, per, E, delta)
            rep = th.check_entropy_corollary(g, delta)
            res.add(rep)
            res.details[f"delta={delta},E={E}"] = {"samples": per, "violations": rep.context["violations"]}
    res.details["samples"] = per * 9
    return res


def run_weak_spec(seed: int = 0, n: int = 1000) -> SuiteResult:
    res = SuiteResult("weak_spec")
    rng = nm.make_rng(seed, 103)
    grad_err = 0.0
    sign_bad = 0
    for _ in range(n):
        E = int(rng.integers(2, 9))
        gamma0 = float(rng.uniform(0.05, 1.0))
        ell, g = th.sample_weak_spec_population(rng, 200, E, gamma0, p_margin=float(rng.uniform(0.8, 1.0)))
        eps0 = float(1.0 - (np.sort(ell, axis=1)[:, 1] - ell.min(axis=1) >= gamma0).mean())
        rep = th.check_thm_weak_spec(ell, g, gamma0, eps0, float(rng.uniform(0.05, 0.5)))
        res.add(rep)
        grad_err = max(grad_err, rep.context["grad_identity_max_err"])
        sign_bad += rep.context["sign_violations"]
    res.details["grad_identity_max_err"] = grad_err
    res.details["sign_violations"] = sign_bad
    # the gradient identity is part of the statement
    if grad_err > 1e-10 or sign_bad:
        res.violations += 1
    return res


def run_region_risk(seed: int = 0, n: int = 1000) -> SuiteResult:
    res = SuiteResult("region_risk")
    rng = nm.make_rng(seed, 104)
    for _ in range(n):
        res.add(th.check_thm_region_risk(**th.sample_region_risk_instance(rng, n=int(rng.integers(20, 200)))))
    return res


def run_kappa(seed: int = 0, n: int = 200) -> SuiteResult:
    res = SuiteResult("kappa")
    rng = nm.make_rng(seed, 105)
    for _ in range(n):
        E = int(rng.integers(1, 7))
        m = int(rng.integers(1, 80))
        a, b = rng.integers(0, E, m), rng.integers(0, E, m)
        k1, _ = th.coupling_coefficient(a, b, E)
        k2, _ = th.coupling_coefficient_bruteforce(a, b, E)
        res.add(th.BoundReport("kappa_oracle", abs(k1 - k2), 0.0, context={"E": E}))
    return res


def run_backward(seed: int = 0, n: int = 1000) -> SuiteResult:
    res = SuiteResult("backward")
    rng = nm.make_rng(seed, 106)
    for _ in range(n):
        E = int(rng.integers(2, 9))
        m = int(rng.integers(1, 200))
        A = rng.integers(0, E, m)
        noise = rng.uniform(0, 0.6)
        perm = rng.permutation(E)
        c_next = np.where(rng.uniform(size=m) < noise, rng.integers(0, E, m), A)
        inv = np.argsort(perm)
        c_l = np.where(rng.uniform(size=m) < noise, rng.integers(0, E, m), inv[c_next])
        res.add(th.check_backward_transfer(c_l, c_next, A, E))
    return res


def run_partition(seed: int = 0, n: int = 100) -> SuiteResult:
    """Balanced slab construction: equal slab sizes, each slab an interval of the projections."""
    res = SuiteResult("partition")
    rng = nm.make_rng(seed, 107)
    for _ in range(n):
        X = rng.normal(size=(64, 16))
        a = rng.normal(size=16)
        thr, assign = th.balanced_partition(X, a, 8)
        u = X @ a
        bad = int((np.bincount(assign, minlength=8) != 8).sum())
        for e in range(8):
            lo = u[assign == e].min()
            hi = u[assign == e].max()
            inside = (u >= lo) & (u <= hi)
            bad += int((assign[inside] != e).sum())
            if e > 0:
                bad += int(not lo >= thr[e - 1])
            if e < 7:
                bad += int(not hi <= thr[e])
        res.add(th.BoundReport("balanced_partition", float(bad), 0.0))
    return res


def run_construct(seed: int = 0) -> SuiteResult:
    res = SuiteResult("construct")
    for B, E, k, L in ((4, 2, 1, 3), (16, 4, 2, 4), (64, 8, 2, 3)):
        scores = th.construct_coupled_balanced(B, E, k, L)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CouplingWarning)
            cp = coupling_loss([s for s in scores], k).item()
        loads = th.slot_loads(B, E, k, L)
        cp_err = abs(cp - (-(L - 1)))
        load_err = float(np.abs(loads - B * k / E).max())
        res.add(th.BoundReport("construct_cp", cp_err, 1e-12, context={"B": B, "E": E, "k": k, "L": L, "cp": cp}))
        res.add(th.BoundReport("construct_balance", load_err, 0.0, context={"B": B, "E": E, "k": k, "L": L}))
        res.details[f"B={B},E={E},k={k},L={L}"] = {"cp_per_token": cp, "loads": loads.tolist()}
    return res


SUITES = {
    "prop1": run_prop1,
    "prop2": run_prop2,
    "entropy": run_entropy,
    "weak_spec": run_weak_spec,
    "region_risk": run_region_risk,
    "kappa": run_kappa,
    "backward": run_backward,
    "partition": run_partition,
    "construct": run_construct,
}


def run_suite(name: str, seed: int = 0) -> list[SuiteResult]:
    if name == "all":
        return [fn(seed) for fn in SUITES.values()]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(['all', *SUITES])}")
    return [SUITES[name](seed)]
