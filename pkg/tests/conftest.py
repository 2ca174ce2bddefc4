"""Shared fixtures and helpers for the test suite.

The helpers here build small coefficient sets and provide the random expression
generator used by the symbolic-derivative stress test.  Expected values in the
tests are either closed forms derived in place or re-computed by an independent
method (hand-rolled steps, finite differences, direct quadrature) — never bare
magic numbers.
"""

from __future__ import annotations

import numpy as np
import pytest

from stochflow.coefficients import assemble
from stochflow.grids import Box


def make_coeffs(
    sigma,
    U=None,
    V="0",
    nu: float = 0.1,
    n: int = 1,
    box: Box | None = None,
):
    """Assemble a coefficient set from expression strings with light defaults."""
    if isinstance(sigma, str):
        sigma = [[sigma]]
    if U is None:
        U = ["0"] * n
    return assemble(sigma, U, V, nu=nu, n=n, box=box)


@pytest.fixture
def box1d() -> Box:
    return Box((-4.0,), (4.0,))


@pytest.fixture
def box2d() -> Box:
    return Box((-3.0, -3.0), (3.0, 3.0))


# ---------------------------------------------------------------------------
# Random expression generator (shared by the fields tests and the acceptance
# derivative criterion).  It produces globally smooth expressions with moderate
# values and derivatives on [-1, 1]^n so that central finite differences are a
# trustworthy reference at the 1e-6 relative level:
#   * division denominators are built as (1 + s^2)  -> >= 1 everywhere,
#   * log arguments are built as (1.5 + s^2)        -> >= 1.5 everywhere,
#   * exp arguments are damped by a 0.25 factor.
# ---------------------------------------------------------------------------

_LEAF_P = 0.35


def random_expr_source(rng: np.random.Generator, dim: int, depth: int = 4, use_time: bool = True) -> str:
    """Random expression string over x1..x{dim} (and t), bounded depth."""

    def leaf() -> str:
        r = rng.random()
        if r < 0.45:
            return f"x{int(rng.integers(1, dim + 1))}"
        if use_time and r < 0.55:
            return "t"
        return f"{rng.uniform(-2.0, 2.0):.3f}"

    def build(d: int) -> str:
        if d <= 0 or rng.random() < _LEAF_P:
            return leaf()
        kind = rng.integers(0, 8)
        if kind == 0:
            return f"({build(d - 1)} + {build(d - 1)})"
        if kind == 1:
            return f"({build(d - 1)} - {build(d - 1)})"
        if kind == 2:
            return f"({build(d - 1)} * {build(d - 1)})"
        if kind == 3:
            s = build(d - 1)
            return f"({build(d - 1)} / (1 + ({s}) * ({s})))"
        if kind == 4:
            return f"(-{build(d - 1)})"
        if kind == 5:
            return f"({build(d - 1)})^{int(rng.integers(2, 4))}"
        if kind == 6:
            fn = ("sin", "cos", "tanh")[int(rng.integers(0, 3))]
            return f"{fn}({build(d - 1)})"
        sub = rng.random()
        if sub < 0.5:
            return f"exp(0.25 * ({build(d - 1)}))"
        s = build(d - 1)
        return f"log(1.5 + ({s}) * ({s}))"

    return build(depth)


def central_fd(fe, x: np.ndarray, t: float, var_index: int, h: float = 1e-5) -> float:
    """Central finite difference of a parsed field along one coordinate (or t)."""
    from stochflow.fields import evaluate

    if var_index == -1:
        return (evaluate(fe, x, t + h) - evaluate(fe, x, t - h)) / (2.0 * h)
    xp = np.array(x, dtype=float)
    xm = np.array(x, dtype=float)
    xp[var_index] += h
    xm[var_index] -= h
    return (evaluate(fe, xp, t) - evaluate(fe, xm, t)) / (2.0 * h)


def derivative_discrepancies(
    rng: np.random.Generator,
    num_exprs: int,
    dim_choices=(1, 2, 3),
    points_per_expr: int = 3,
    value_cap: float = 1e4,
) -> list[float]:
    """Relative symbolic-vs-central-FD discrepancies over random expressions.

    Returns one worst-case relative error per accepted expression.  Sample points
    where the expression (or its shifted evaluations) exceed ``value_cap`` in
    magnitude are re-drawn so the finite-difference reference stays well
    conditioned; expressions are only counted once they yield a usable point.
    """
    from stochflow.fields import differentiate, evaluate, parse_field

    rels: list[float] = []
    while len(rels) < num_exprs:
        dim = int(rng.choice(dim_choices))
        src = random_expr_source(rng, dim)
        try:
            fe = parse_field(src, dim)
        except Exception:  # pragma: no cover - generator emits only valid sources
            raise AssertionError(f"generator produced an unparsable source: {src!r}")
        derivs = [differentiate(fe, k) for k in range(1, dim + 1)]
        derivs.append(differentiate(fe, "t"))
        worst = 0.0
        accepted_points = 0
        attempts = 0
        while accepted_points < points_per_expr and attempts < 20 * points_per_expr:
            attempts += 1
            x = rng.uniform(-1.0, 1.0, size=dim)
            t = float(rng.uniform(0.0, 1.0))
            try:
                vals = [evaluate(fe, x, t)]
                cand = []
                for k, dfe in enumerate(derivs):
                    var = -1 if k == dim else k
                    sym = evaluate(dfe, x, t)
                    fd = central_fd(fe, x, t, var)
                    vals.extend([sym, fd])
                    cand.append(abs(sym - fd) / max(1.0, abs(sym)))
            except Exception:
                continue
            if not all(np.isfinite(vals)) or max(abs(v) for v in vals) > value_cap:
                continue
            worst = max(worst, max(cand))
            accepted_points += 1
        if accepted_points == points_per_expr:
            rels.append(worst)
    return rels
