"""Smooth convex comparison functions for relative-entropy functionals.

Every bundled function is smooth (the kinked classics are smoothed with a small
parameter) so that entropy decay statements hold without distributional caveats.
Construction validates convexity numerically — second central differences must be
nonnegative up to roundoff on a sample of the declared domain.  A deliberately
non-convex control (for power checks of the decay test) bypasses validation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "ConvexH",
    "convexity_defect",
    "get_convex",
    "non_convex_control",
    "CONVEX_FUNCTIONS",
    "SMOOTHING_DELTA",
]

SMOOTHING_DELTA = 1e-6
_CONVEXITY_TOL = 1e-10


@dataclass(frozen=True)
class ConvexH:
    """A smooth convex function of one variable with a declared domain.

    ``domain_positive`` restricts evaluation to r > 0 (e.g. r*log r); when
    ``zero_limit`` is set, evaluation at exactly r = 0 returns that limiting value
    (r*log r -> 0), which transported compactly-supported data produces legitimately.
    ``fn`` is vectorized over numpy arrays.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    domain_positive: bool = False
    zero_limit: float | None = None

    def __call__(self, r):
        arr = np.asarray(r, dtype=float)
        if not self.domain_positive:
            return self.fn(arr)
        scalar = arr.ndim == 0
        flat = np.atleast_1d(arr).astype(float).reshape(-1)
        if np.any(flat < 0) or (self.zero_limit is None and np.any(flat == 0)):
            raise ValueError(f"{self.name} is only defined for r > 0")
        zero = flat == 0
        out = np.empty_like(flat)
        if zero.any():
            out[~zero] = self.fn(flat[~zero])
            out[zero] = self.zero_limit
        else:
            out = self.fn(flat)
        if scalar:
            return float(out[0])
        return out.reshape(arr.shape)


def convexity_defect(h: ConvexH, lo: float | None = None, hi: float | None = None,
                     samples: int = 2001) -> float:
    """Most negative second central difference of h over a sampled range.

    A convex function returns a value >= -1e-10 (roundoff); more negative values
    indicate genuine non-convexity.
    """
    if lo is None:
        lo = 1e-4 if h.domain_positive else -10.0
    if hi is None:
        hi = 10.0
    r = np.linspace(lo, hi, samples)
    vals = h(r)
    second = vals[2:] - 2.0 * vals[1:-1] + vals[:-2]
    return float(np.min(second))


def _validated(name: str, fn, domain_positive: bool = False, zero_limit: float | None = None) -> ConvexH:
    h = ConvexH(name=name, fn=fn, domain_positive=domain_positive, zero_limit=zero_limit)
    defect = convexity_defect(h)
    if defect < -_CONVEXITY_TOL:
        raise ValueError(f"function {name!r} failed the convexity check: defect {defect:.3e}")
    return h


def _square(r):
    return r * r


def _abs_smooth(r):
    d = r - 1.0
    return np.sqrt(d * d + SMOOTHING_DELTA * SMOOTHING_DELTA)


def _rlogr(r):
    return r * np.log(r)


def _pos_part_sq(r):
    d = r - 1.0
    p = 0.5 * (d + np.sqrt(d * d + SMOOTHING_DELTA * SMOOTHING_DELTA))
    return p * p


CONVEX_FUNCTIONS: dict[str, ConvexH] = {
    "r2": _validated("r2", _square),
    "abs_smooth": _validated("abs_smooth", _abs_smooth),
    "rlogr": _validated("rlogr", _rlogr, domain_positive=True, zero_limit=0.0),
    "pos_part_sq": _validated("pos_part_sq", _pos_part_sq),
    "linear": _validated("linear", lambda r: np.asarray(r, dtype=float) + 0.0),
}


def get_convex(name: str) -> ConvexH:
    """Look up a bundled convex function by name."""
    try:
        return CONVEX_FUNCTIONS[name]
    except KeyError:
        raise KeyError(
            f"unknown convex function {name!r}; available: {sorted(CONVEX_FUNCTIONS)}"
        ) from None


def non_convex_control() -> ConvexH:
    """Deliberately concave H(r) = -r^2, bypassing validation.

    Used as a negative control: monotonicity verdicts must fail with it, proving the
    decay tests have statistical power.
    """
    return ConvexH(name="neg_r2", fn=lambda r: -(np.asarray(r, dtype=float) ** 2))
