"""Convex comparison functions and the convexity validator."""

import numpy as np
import pytest

from stochflow.convex import (
    CONVEX_FUNCTIONS,
    SMOOTHING_DELTA,
    ConvexH,
    convexity_defect,
    get_convex,
    non_convex_control,
)


def test_bundled_function_values():
    r2 = get_convex("r2")
    assert r2(3.0) == 9.0
    assert np.allclose(r2(np.array([-2.0, 0.5])), [4.0, 0.25])

    ab = get_convex("abs_smooth")
    # Smoothed |r - 1|: exact at the kink up to the smoothing scale, asymptotic
    # to the absolute value away from it.
    assert ab(1.0) == pytest.approx(SMOOTHING_DELTA)
    assert ab(4.0) == pytest.approx(3.0, abs=1e-6)
    assert ab(-2.0) == pytest.approx(3.0, abs=1e-6)

    rl = get_convex("rlogr")
    assert rl(1.0) == 0.0
    assert rl(np.e) == pytest.approx(np.e)
    assert rl(0.0) == 0.0  # declared limiting value

    lin = get_convex("linear")
    assert lin(2.5) == 2.5

    pp = get_convex("pos_part_sq")
    assert pp(3.0) == pytest.approx(4.0, abs=1e-5)  # (r-1)_+^2
    assert pp(0.0) == pytest.approx(0.0, abs=1e-6)


def test_positive_domain_enforced():
    rl = get_convex("rlogr")
    with pytest.raises(ValueError):
        rl(-0.5)
    with pytest.raises(ValueError):
        rl(np.array([0.5, -1.0]))
    # Zero is allowed only because a limit was declared.
    assert np.allclose(rl(np.array([0.0, 1.0])), [0.0, 0.0])
    no_limit = ConvexH(name="bare", fn=lambda r: r * np.log(r), domain_positive=True)
    with pytest.raises(ValueError):
        no_limit(0.0)


def test_scalar_in_scalar_out():
    for name in CONVEX_FUNCTIONS:
        h = get_convex(name)
        out = h(1.5)
        assert isinstance(out, float)
        arr = h(np.array([1.5, 2.0]))
        assert arr.shape == (2,)


def test_all_bundled_functions_are_convex():
    for name in CONVEX_FUNCTIONS:
        defect = convexity_defect(get_convex(name))
        assert defect >= -1e-10, f"{name} has convexity defect {defect}"


def test_convexity_defect_detects_concavity():
    control = non_convex_control()
    assert control.name == "neg_r2"
    assert convexity_defect(control) < -1e-6
    assert control(2.0) == -4.0


def test_validator_rejects_non_convex():
    from stochflow.convex import _validated

    with pytest.raises(ValueError):
        _validated("bad", lambda r: -np.asarray(r) ** 2)


def test_get_convex_unknown_name():
    with pytest.raises(KeyError):
        get_convex("nope")


def test_jensen_inequality_holds_for_bundled_functions():
    # Direct finite-sample Jensen check: H(sum w_i r_i) <= sum w_i H(r_i) for a
    # convex combination.
    rng = np.random.default_rng(8)
    for name in ("r2", "abs_smooth", "rlogr", "pos_part_sq"):
        h = get_convex(name)
        for _ in range(50):
            m = int(rng.integers(2, 30))
            w = rng.random(m)
            w /= w.sum()
            r = rng.uniform(0.05, 5.0, m)
            lhs = h(float(np.dot(w, r)))
            rhs = float(np.dot(w, h(r)))
            assert lhs <= rhs + 1e-12 * max(1.0, abs(rhs))
