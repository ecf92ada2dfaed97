"""Randomized identity checks for the pointwise algebra.

Used by ``holonomy-lab algebra-selftest``.  Each check returns the worst
error over its random cases; the suite passes when every error is below
its tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from . import exterior as ext
from . import special_forms as sf


@dataclass
class CheckResult:
    name: str
    cases: int
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tol)

    def to_dict(self) -> dict:
        return {"name": self.name, "cases": self.cases, "max_error": self.max_error,
                "tol": self.tol, "passed": self.passed}


def _rand_form(rng, n, k):
    return rng.uniform(-1, 1, comb(n, k))


def graded_commutativity(rng, cases):
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 9))
        p, q = (int(x) for x in rng.integers(0, n + 1, 2))
        if p + q > n:
            continue
        a, b = _rand_form(rng, n, p), _rand_form(rng, n, q)
        lhs = ext.wedge_coeffs(a, b, n, p, q)
        rhs = (-1) ** (p * q) * ext.wedge_coeffs(b, a, n, q, p)
        worst = max(worst, float(np.abs(lhs - rhs).max(initial=0.0)))
    return worst


def star_star(rng, cases):
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(0, n + 1))
        M = rng.normal(size=(n, n))
        g = M @ M.T + n * np.eye(n)
        o = float(rng.choice([-1.0, 1.0]))
        a = _rand_form(rng, n, k)
        twice = a @ ext.hodge_matrix(g, o, k) @ ext.hodge_matrix(g, o, n - k)
        worst = max(worst, float(np.abs(twice - (-1) ** (k * (n - k)) * a).max()))
    return worst


def interior_adjunction(rng, cases):
    """<v _| a, b> = <a, v^flat ^ b> in the Euclidean metric."""
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(1, n + 1))
        v = rng.uniform(-1, 1, n)
        a, b = _rand_form(rng, n, k), _rand_form(rng, n, k - 1)
        lhs = ext.interior_coeffs(v, a, n, k) @ b
        rhs = a @ ext.wedge_coeffs(v, b, n, 1, k - 1)
        worst = max(worst, abs(float(lhs - rhs)))
    return worst


def pullback_functoriality(rng, cases):
    """(A B)^* = B^* A^*."""
    worst = 0.0
    for _ in range(cases):
        m, n, r = (int(x) for x in rng.integers(1, 9, 3))
        k = int(rng.integers(0, min(m, n, r) + 1))
        A, B = rng.uniform(-1, 1, (m, n)), rng.uniform(-1, 1, (n, r))
        a = _rand_form(rng, m, k)
        lhs = ext.pullback_coeffs(A @ B, a, k)
        rhs = ext.pullback_coeffs(B, ext.pullback_coeffs(A, a, k), k)
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def standard_models(rng, cases):
    phi = sf.standard_phi()
    m, star = sf.metric_from_g2(phi.sigma)
    err = float(np.abs(m.g - np.eye(7)).max())
    Phi = sf.standard_Phi0().assemble().coeffs
    err = max(err, abs(float(np.count_nonzero(Phi)) - 14.0), float(np.abs(np.abs(Phi[Phi != 0]) - 1).max()))
    flat = sf.flat_su3()
    err = max(err, abs(sf.volume_compat_residual(flat)))
    return err


def ss_roundtrip(rng, cases):
    worst = 0.0
    phi = sf.standard_phi().sigma.coeffs
    for _ in range(cases):
        A = np.eye(7) + rng.uniform(-0.3, 0.3, (7, 7)) / 7
        sigma = ext.pullback_coeffs(A, phi, 3)
        tau = sf.ss_coeffs(sigma)
        back, _, _ = sf.ss_inverse_coeffs(tau, 1.0, phi)
        worst = max(worst, float(np.abs(back - sigma).max()),
                    float(np.abs(sf.ss_coeffs(-sigma) - tau).max()))
    return worst


CHECKS = (
    ("graded_commutativity", graded_commutativity, 1e-12, 1.0),
    ("star_star", star_star, 1e-12, 0.25),
    ("interior_adjunction", interior_adjunction, 1e-12, 1.0),
    ("pullback_functoriality", pullback_functoriality, 1e-12, 1.0),
    ("standard_models", standard_models, 1e-12, 0.0),
    ("ss_roundtrip", ss_roundtrip, 1e-10, 0.02),
)


def run(cases: int = 1000, seed: int = 0) -> list[CheckResult]:
    """Run every check; ``cases`` is scaled per check by its weight."""
    rng = np.random.default_rng(seed)
    out = []
    for name, fn, tol, weight in CHECKS:
        n = max(1, int(round(cases * weight)))
        out.append(CheckResult(name, n, fn(rng, n), tol))
    return out
