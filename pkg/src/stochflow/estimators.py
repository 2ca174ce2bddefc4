"""Monte Carlo expectation fields and statistical verification checks.

Sampling design: labels within one realization share a single noise path (the flow
structure requires it); expectations average over independent realizations only.
All estimators reduce over realizations in a fixed order keyed by realization index,
so results are bit-identical for any worker-thread count.

Provided here:
  * ``collect_psi_samples`` drives the path engine over many realizations and records,
    per realization / output time / query point, the weighted transported data pair
    (psi_f, psi_rho) together with the inversion status — the raw material for every
    statistical check below.
  * ``estimate_fields`` / ``fields_from_samples``: per-point sample means and errors.
  * ``conserved_quantity`` (+ batch form): label-space quadrature of the tracked
    integral of motion M * rho0 * h0.
  * ``entropy_martingale`` (+ series form): spatial quadrature of
    psi_rho * H(psi_f / psi_rho) * phi, whose mean is constant in time.
  * ``jensen_check``: the finite-sample convexity inequality, exact up to roundoff.
  * ``entropy_decay_check``: bootstrap-banded monotonicity verdict for the entropy
    time series of the estimated fields.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .brownian import BrownianDriver, auxiliary_rng
from .coefficients import CoefficientSet
from .convex import ConvexH
from .engine import DEFAULT_CHUNK_SIZE, BatchResult, Ensemble, run_chunks, simulate_paths
from .errors import (
    DimensionMismatch,
    InsufficientRealizations,
    NonPositiveDensity,
    SignalTooNoisy,
    SupportEscape,
)
from .fields import FieldExpr, eval_batch
from .grids import Box, mesh_points, multilinear_interp, trapezoid_weights
from .inverse import STATUS_OK, FlowChart, invert_batch
from .oracle import EntropyReport, OracleSeries, entropy_series

__all__ = [
    "McField",
    "PsiSamples",
    "JensenResult",
    "MIN_REALIZATIONS",
    "DEFAULT_SCALAR_REALIZATIONS",
    "DEFAULT_FIELD_REALIZATIONS",
    "constant_phi",
    "exponential_phi",
    "field_phi",
    "validate_compact_support",
    "collect_psi_samples",
    "estimate_fields",
    "fields_from_samples",
    "martingale_values",
    "conserved_quantity",
    "conserved_quantity_batch",
    "entropy_martingale",
    "entropy_martingale_series",
    "jensen_check",
    "entropy_decay_check",
    "z_score",
]

MIN_REALIZATIONS = 100
DEFAULT_SCALAR_REALIZATIONS = 20_000
DEFAULT_FIELD_REALIZATIONS = 2_000
SUPPORT_MARGIN_CELLS = 4
_SUPPORT_REL_TOL = 1e-10


# ---------------------------------------------------------------------------
# Weighting-factor sources (phi)
# ---------------------------------------------------------------------------


def constant_phi(value: float = 1.0) -> Callable:
    """phi(x, t) = value — the admissible weight when V = 0."""

    def phi(points, t):
        pts = np.asarray(points, dtype=float)
        if pts.ndim <= 1:
            return float(value)
        return np.full(pts.shape[0], float(value))

    return phi


def exponential_phi(c: float, T: float) -> Callable:
    """phi(x, t) = exp(c * (T - t)) — the admissible weight when V = c (constant)."""

    def phi(points, t):
        pts = np.asarray(points, dtype=float)
        val = float(np.exp(c * (T - float(t))))
        if pts.ndim <= 1:
            return val
        return np.full(pts.shape[0], val)

    return phi


def field_phi(expr: FieldExpr) -> Callable:
    """Adapt a parsed field expression to the (points, t) callable protocol."""

    def phi(points, t):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts2 = pts[None, :]
            vals = eval_batch(expr, tuple(pts2.T), float(t))
            return float(np.broadcast_to(np.asarray(vals, dtype=float), (1,))[0])
        vals = eval_batch(expr, tuple(pts.T), float(t))
        return np.broadcast_to(np.asarray(vals, dtype=float), (pts.shape[0],)).copy()

    return phi


def _phi_values(phi, pts: np.ndarray, t: float) -> np.ndarray:
    """Evaluate a weight callable at (Q, n) points, tolerating scalar-only callables."""
    q = pts.shape[0]
    try:
        out = np.asarray(phi(pts, t), dtype=float)
        if out.ndim == 0:
            return np.full(q, float(out))
        if out.shape == (q,):
            return out
    except Exception:
        pass
    return np.array([float(phi(pts[i], t)) for i in range(q)])


# ---------------------------------------------------------------------------
# Support validation and quadrature helpers
# ---------------------------------------------------------------------------


def _boundary_ring_mask(shape: tuple, cells: int) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for k, size in enumerate(shape):
        if size <= 2 * cells:
            raise ValueError(
                f"grid axis {k + 1} has {size} nodes — too few to leave a "
                f"{cells}-cell boundary margin"
            )
        sl_lo = tuple(slice(None) if j != k else slice(0, cells) for j in range(len(shape)))
        sl_hi = tuple(slice(None) if j != k else slice(size - cells, size) for j in range(len(shape)))
        mask[sl_lo] = True
        mask[sl_hi] = True
    return mask


def _eval_at_points(expr: FieldExpr, pts: np.ndarray, t: float = 0.0) -> np.ndarray:
    vals = eval_batch(expr, tuple(pts.T), t)
    return np.broadcast_to(np.asarray(vals, dtype=float), (pts.shape[0],)).copy()


def validate_compact_support(
    expr: FieldExpr, label_axes, name: str, cells: int = SUPPORT_MARGIN_CELLS
) -> None:
    """Require |expr| to vanish (to roundoff) within ``cells`` cells of the grid edge.

    Quadrature-based functionals silently lose mass that reaches the label-box
    boundary; this guards the scenarios against that.
    """
    axes = tuple(np.asarray(ax, dtype=float) for ax in label_axes)
    shape = tuple(ax.size for ax in axes)
    pts = mesh_points(axes)
    vals = np.abs(_eval_at_points(expr, pts)).reshape(shape)
    ring = _boundary_ring_mask(shape, cells)
    peak = float(vals.max()) if vals.size else 0.0
    worst = float(vals[ring].max()) if ring.any() else 0.0
    if worst > _SUPPORT_REL_TOL * (1.0 + peak):
        raise ValueError(
            f"{name} does not vanish within {cells} cells of the label-box boundary "
            f"(boundary-ring max {worst:.3e}, overall max {peak:.3e})"
        )


# ---------------------------------------------------------------------------
# Sample containers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class McField:
    """Per-point sample mean and spread of a Monte Carlo field estimate."""

    points: np.ndarray  # (Q, n)
    t: float
    mean: np.ndarray  # (Q,)
    variance: np.ndarray  # (Q,) sample variance, ddof = 1
    count: int  # realizations averaged
    masked: np.ndarray  # (Q,) bool — points excluded (some realization unresolved)

    def __post_init__(self):
        usable = ~self.masked
        if np.any(self.variance[usable] < 0):
            raise ValueError("sample variance must be nonnegative")

    @property
    def se(self) -> np.ndarray:
        out = np.sqrt(self.variance / self.count)
        out[self.masked] = np.nan
        return out

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())


@dataclass(eq=False)
class PsiSamples:
    """Per-realization weighted transported data at query points and output times.

    ``psi_f[r, s, q]`` / ``psi_rho[r, s, q]`` hold f0/rho0 transported along
    realization r to time ``times[s]`` at point ``points[q]``, weighted by the
    accumulated exponential factor; ``status[r, s, q]`` is the inversion status
    (0 = resolved).  Realizations that left the padded domain or went non-finite are
    dropped before this container is built; ``num_discarded`` counts them.
    """

    label_axes: tuple
    points: np.ndarray  # (Q, n)
    times: np.ndarray  # (S,)
    realization_indices: np.ndarray  # (R,)
    psi_f: np.ndarray  # (R, S, Q)
    psi_rho: np.ndarray  # (R, S, Q)
    status: np.ndarray  # (R, S, Q) uint8
    num_discarded: int

    @property
    def num_realizations(self) -> int:
        return int(self.realization_indices.size)

    def time_slot(self, t: float) -> int:
        hits = np.nonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, abs(t)))[0]
        if hits.size == 0:
            raise ValueError(f"time {t!r} not sampled; sampled times: {self.times.tolist()}")
        return int(hits[0])


@dataclass(frozen=True)
class JensenResult:
    """Outcome of the finite-sample convexity inequality."""

    lhs: float
    rhs: float
    slack: float
    holds: bool
    num_samples: int


# ---------------------------------------------------------------------------
# Collection: run the engine, invert, and record psi pairs
# ---------------------------------------------------------------------------


def _store_plan(times, dt: float) -> tuple[int, list[int]]:
    ts = [float(t) for t in times]
    if len(ts) == 0:
        raise ValueError("at least one output time is required")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("output times must be strictly increasing")
    idx = []
    for t in ts:
        i = int(round(t / dt))
        if i < 0 or abs(i * dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"output time {t!r} does not lie on the step grid dt={dt}")
        idx.append(i)
    return max(idx), idx


def _psi_pair_on_chart(chart: FlowChart, f0: FieldExpr, rho0: FieldExpr, pts: np.ndarray):
    """One inversion, two weighted transported values (shared exponential factor)."""
    labels, status = invert_batch(chart, pts)
    ok = status == STATUS_OK
    vf = np.full(pts.shape[0], np.nan)
    vr = np.full(pts.shape[0], np.nan)
    if ok.any():
        lab = labels[ok]
        logw = multilinear_interp(chart.label_axes, chart.log_I, lab, out_of_range="clamp")
        w = np.exp(logw)
        vf[ok] = _eval_at_points(f0, lab) * w
        vr[ok] = _eval_at_points(rho0, lab) * w
    return vf, vr, status.astype(np.uint8)


def collect_psi_samples(
    cs: CoefficientSet,
    label_axes,
    times: Sequence[float],
    driver: BrownianDriver,
    f0: FieldExpr,
    rho0: FieldExpr,
    query_points,
    realizations: int = DEFAULT_FIELD_REALIZATIONS,
    box: Box | None = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    threads: int = 1,
) -> PsiSamples:
    """Simulate ``realizations`` independent flows and record psi pairs.

    The reduction order is fixed by the realization indices, so the result is
    bit-identical for any ``threads``.
    """
    from .inverse import chart_from_batch  # local import to avoid cycle at module load

    pts = np.asarray(query_points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[1] != cs.n:
        raise DimensionMismatch(f"query points have dimension {pts.shape[1]}, expected {cs.n}")
    num_steps, store_indices = _store_plan(times, driver.dt)
    ts = np.array([float(t) for t in times])

    def worker(indices: np.ndarray):
        result = simulate_paths(
            cs, label_axes, num_steps, store_indices, driver, indices, box=box
        )
        r_alive = np.nonzero(result.alive)[0]
        s_count = ts.size
        q = pts.shape[0]
        pf = np.empty((r_alive.size, s_count, q))
        pr = np.empty((r_alive.size, s_count, q))
        st = np.empty((r_alive.size, s_count, q), dtype=np.uint8)
        for out_r, slot in enumerate(r_alive):
            for s, t in enumerate(ts):
                chart = chart_from_batch(result, float(t), int(slot))
                pf[out_r, s], pr[out_r, s], st[out_r, s] = _psi_pair_on_chart(
                    chart, f0, rho0, pts
                )
        return result.realization_indices[r_alive], pf, pr, st, int((~result.alive).sum())

    chunks = run_chunks(range(realizations), worker, chunk_size=chunk_size, threads=threads)
    kept = np.concatenate([c[0] for c in chunks]) if chunks else np.empty(0, dtype=np.int64)
    psi_f = np.concatenate([c[1] for c in chunks], axis=0) if chunks else np.empty((0, ts.size, pts.shape[0]))
    psi_rho = np.concatenate([c[2] for c in chunks], axis=0) if chunks else np.empty_like(psi_f)
    status = (
        np.concatenate([c[3] for c in chunks], axis=0)
        if chunks
        else np.empty((0, ts.size, pts.shape[0]), dtype=np.uint8)
    )
    discarded = sum(c[4] for c in chunks)
    return PsiSamples(
        label_axes=tuple(np.asarray(ax, dtype=float) for ax in (label_axes if isinstance(label_axes, (tuple, list)) else (label_axes,))),
        points=pts,
        times=ts,
        realization_indices=kept,
        psi_f=psi_f,
        psi_rho=psi_rho,
        status=status,
        num_discarded=discarded,
    )


# ---------------------------------------------------------------------------
# Field estimates
# ---------------------------------------------------------------------------


def _mc_field_from_arrays(
    pts: np.ndarray, t: float, values: np.ndarray, status: np.ndarray
) -> McField:
    r = values.shape[0]
    masked = np.any(status != STATUS_OK, axis=0)
    safe = np.where(masked[None, :], 0.0, values)
    mean = np.where(masked, np.nan, safe.mean(axis=0))
    variance = np.where(masked, 0.0, safe.var(axis=0, ddof=1))
    return McField(points=pts, t=float(t), mean=mean, variance=variance, count=r, masked=masked)


def fields_from_samples(samples: PsiSamples, t: float) -> tuple[McField, McField]:
    """Per-point means/SEs of the recorded psi pairs at one sampled time."""
    r = samples.num_realizations
    if r < MIN_REALIZATIONS:
        raise InsufficientRealizations(
            f"{r} realizations available; at least {MIN_REALIZATIONS} required"
        )
    s = samples.time_slot(t)
    f_hat = _mc_field_from_arrays(samples.points, t, samples.psi_f[:, s, :], samples.status[:, s, :])
    rho_hat = _mc_field_from_arrays(samples.points, t, samples.psi_rho[:, s, :], samples.status[:, s, :])
    return f_hat, rho_hat


def estimate_fields(
    charts: Sequence[FlowChart],
    f0: FieldExpr,
    rho0: FieldExpr,
    query_points,
    t: float | None = None,
) -> tuple[McField, McField]:
    """Monte Carlo estimates of the forward solutions with data f0 and rho0.

    ``charts`` hold one stored flow snapshot per realization at a common time.
    Points where any realization could not be inverted are masked and counted.
    """
    if len(charts) < MIN_REALIZATIONS:
        raise InsufficientRealizations(
            f"{len(charts)} realizations given; at least {MIN_REALIZATIONS} required"
        )
    t0 = charts[0].t if t is None else float(t)
    for c in charts:
        if abs(c.t - t0) > 1e-9 * max(1.0, abs(t0)):
            raise ValueError("charts must all be stored at the same time")
    pts = np.asarray(query_points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    rho_at_pts = _eval_at_points(rho0, pts)
    if np.any(rho_at_pts <= 0):
        raise NonPositiveDensity("rho0 must be strictly positive on the query region")
    r = len(charts)
    q = pts.shape[0]
    vf = np.empty((r, q))
    vr = np.empty((r, q))
    st = np.empty((r, q), dtype=np.uint8)
    for i, chart in enumerate(charts):
        vf[i], vr[i], st[i] = _psi_pair_on_chart(chart, f0, rho0, pts)
    f_hat = _mc_field_from_arrays(pts, t0, vf, st)
    rho_hat = _mc_field_from_arrays(pts, t0, vr, st)
    return f_hat, rho_hat


# ---------------------------------------------------------------------------
# Conserved quantity (label-space quadrature of the martingale weight)
# ---------------------------------------------------------------------------


def _support_mask(values: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    return np.abs(values) > _SUPPORT_REL_TOL * (1.0 + peak)


def _check_phi_reach(phi, x_support: np.ndarray) -> None:
    """If phi interpolates a stored grid, trajectories must stay well inside it."""
    axes = getattr(phi, "axes", None)
    if axes is None:
        return
    for k, ax in enumerate(axes):
        h = float(ax[1] - ax[0])
        lo, hi = float(ax[0]) + 2 * h, float(ax[-1]) - 2 * h
        xk = x_support[:, k]
        if np.any(xk < lo) or np.any(xk > hi):
            raise SupportEscape(
                "support trajectories reached within 2 cells of the stored weighting "
                f"grid boundary along axis {k + 1}"
            )


def conserved_quantity(
    ens: Ensemble,
    phi,
    rho0: FieldExpr,
    h0: FieldExpr,
    t: float,
    validate_support: bool = True,
) -> float:
    """Label-grid quadrature of phi(X,t) * D_direct * exp(log-weight) * rho0 * h0.

    This is the integral of motion tracked per realization; its expectation over
    realizations is constant in time.
    """
    axes = ens.label_axes
    if validate_support:
        # The quadrature only needs the *integrand density* rho0*h0 to vanish near the
        # label-box edge; rho0 itself may be a strictly positive plateau.
        validate_compact_support(h0, axes, "h0")
        validate_compact_support(rho0 * h0, axes, "rho0*h0")
    if not ens.alive:
        raise SupportEscape("realization left the padded domain; sample is unusable")
    w = trapezoid_weights(axes)
    labels = ens.labels
    dens = _eval_at_points(rho0, labels) * _eval_at_points(h0, labels)
    s = ens.time_index(t)
    x_t = ens.X[s]  # (L, n)
    support = _support_mask(dens)
    if support.any():
        _check_phi_reach(phi, x_t[support])
    phi_vals = _phi_values(phi, x_t, float(ens.time_grid[s]))
    m = phi_vals * ens.D_direct[s] * np.exp(ens.log_I[s])
    return float(np.sum(w * dens * m))


def conserved_quantity_batch(
    result: BatchResult,
    phi,
    rho0: FieldExpr,
    h0: FieldExpr,
    t: float,
    validate_support: bool = True,
) -> np.ndarray:
    """Per-realization conserved-quantity samples from a batch run (alive rows only)."""
    axes = result.label_axes
    if validate_support:
        validate_compact_support(h0, axes, "h0")
        validate_compact_support(rho0 * h0, axes, "rho0*h0")
    alive = result.alive
    if not np.all(alive):
        raise SupportEscape(
            f"{int((~alive).sum())} of {alive.size} realizations left the padded domain"
        )
    w = trapezoid_weights(axes)
    labels = result.labels
    dens = _eval_at_points(rho0, labels) * _eval_at_points(h0, labels)
    support = _support_mask(dens)
    s = result.time_slot(t)
    x_t = result.X[s]  # (R, L, n)
    if support.any():
        _check_phi_reach(phi, x_t[:, support, :].reshape(-1, result.n))
    t_val = float(result.times[s])
    r_count, l_count = x_t.shape[0], x_t.shape[1]
    phi_vals = _phi_values(phi, x_t.reshape(-1, result.n), t_val).reshape(r_count, l_count)
    m = phi_vals * result.D_direct[s] * np.exp(result.log_I[s])
    return (m * (w * dens)[None, :]).sum(axis=1)


def martingale_values(result: BatchResult, phi, t: float) -> np.ndarray:
    """phi(X,t) * D_direct * exp(log-weight) for all alive realizations: (R, L)."""
    alive = result.alive
    s = result.time_slot(t)
    x_t = result.X[s][alive]
    r_count, l_count = x_t.shape[0], x_t.shape[1]
    phi_vals = _phi_values(phi, x_t.reshape(-1, result.n), float(result.times[s]))
    phi_vals = phi_vals.reshape(r_count, l_count)
    return phi_vals * result.D_direct[s][alive] * np.exp(result.log_I[s][alive])


def z_score(samples: np.ndarray, reference: float) -> float:
    """Standardized distance of the sample mean from a reference value."""
    arr = np.asarray(samples, dtype=float)
    if arr.size < 2:
        raise ValueError("need at least two samples for a z-score")
    se = arr.std(ddof=1) / np.sqrt(arr.size)
    if se == 0.0:
        return 0.0 if abs(float(arr.mean()) - reference) == 0.0 else float("inf")
    return float((arr.mean() - reference) / se)


# ---------------------------------------------------------------------------
# Entropy martingale (x-space quadrature per realization)
# ---------------------------------------------------------------------------


def _entropy_integrand(psi_f, psi_rho, status, phi_vals, weights, H: ConvexH):
    ok = status == STATUS_OK
    if np.any(psi_rho[ok] <= 0):
        raise NonPositiveDensity("transported density weight must stay positive")
    ratio = np.zeros_like(psi_f)
    ratio[ok] = psi_f[ok] / psi_rho[ok]
    vals = np.zeros_like(psi_f)
    vals[ok] = psi_rho[ok] * np.asarray(H(ratio[ok]), dtype=float) * phi_vals[ok]
    return float(np.sum(weights[ok] * vals[ok]))


def entropy_martingale(
    chart: FlowChart,
    phi,
    rho0: FieldExpr,
    f0: FieldExpr,
    H: ConvexH,
    query_axes=None,
    edge_tol: float | None = 1e-8,
) -> float:
    """One realization's entropy functional: quadrature of psi_rho * H(ratio) * phi.

    The convex argument is f0/rho0 at the recovered label — the exponential weight
    cancels in the ratio, so the transported ratio is a passive scalar.  Unresolved
    points contribute zero (valid when the data are compactly supported); if the
    integrand within two cells of the quadrature-grid edge exceeds ``edge_tol``
    relative to its peak the sample is rejected (pass None to skip the guard, e.g.
    for algebraic-identity checks with non-localized integrands).
    """
    axes = query_axes if query_axes is not None else getattr(phi, "axes", None)
    if axes is None:
        axes = chart.label_axes
    axes = tuple(np.asarray(ax, dtype=float) for ax in axes)
    pts = mesh_points(axes)
    w = trapezoid_weights(axes)
    vf, vr, st = _psi_pair_on_chart(chart, f0, rho0, pts)
    phi_vals = _phi_values(phi, pts, chart.t)
    val = _entropy_integrand(vf, vr, st, phi_vals, w, H)

    if edge_tol is not None:
        ok = st == STATUS_OK
        contrib = np.zeros(pts.shape[0])
        ratio = np.where(vr[ok] > 0, vf[ok] / np.where(vr[ok] > 0, vr[ok], 1.0), 0.0)
        contrib[ok] = np.abs(vr[ok] * np.asarray(H(ratio), dtype=float) * phi_vals[ok])
        shape = tuple(ax.size for ax in axes)
        ring = _boundary_ring_mask(shape, 2).reshape(-1)
        peak = float(contrib.max()) if contrib.size else 0.0
        if peak > 0 and float(contrib[ring].max()) > edge_tol * peak:
            raise SupportEscape(
                "entropy integrand is non-negligible within 2 cells of the quadrature "
                "grid boundary — enlarge the grid or shorten the horizon"
            )
    return val


def entropy_martingale_series(samples: PsiSamples, phi, H: ConvexH) -> np.ndarray:
    """Entropy-functional samples for every (realization, time): shape (R, S).

    Quadrature runs over the recorded query points, which must form the flattened
    mesh of a tensor grid in C order (as produced by ``mesh_points``).
    """
    axes = _axes_from_points(samples.points)
    w = trapezoid_weights(axes)
    r_count, s_count, _ = samples.psi_f.shape
    out = np.empty((r_count, s_count))
    for s in range(s_count):
        phi_vals = _phi_values(phi, samples.points, float(samples.times[s]))
        for r in range(r_count):
            out[r, s] = _entropy_integrand(
                samples.psi_f[r, s],
                samples.psi_rho[r, s],
                samples.status[r, s],
                phi_vals,
                w,
                H,
            )
    return out


def _axes_from_points(pts: np.ndarray) -> tuple:
    """Recover tensor-grid axes from flattened mesh points (C order)."""
    n = pts.shape[1]
    axes = []
    for k in range(n):
        ax = np.unique(pts[:, k])
        axes.append(ax)
    if int(np.prod([a.size for a in axes])) != pts.shape[0]:
        raise ValueError("query points do not form a tensor grid")
    rebuilt = mesh_points(tuple(axes))
    if not np.array_equal(rebuilt, pts):
        raise ValueError("query points are not in C (row-major) mesh order")
    return tuple(axes)


# ---------------------------------------------------------------------------
# Jensen inequality on the empirical measure
# ---------------------------------------------------------------------------


def jensen_check(psi_rho, psi_f, H: ConvexH, slack: float = 1e-12) -> JensenResult:
    """Finite-sample convexity inequality for the normalized weight pair.

    With g = psi_rho / mean(psi_rho) and v = psi_f / mean(psi_rho), convexity gives
    H(mean(v)) <= mean(g * H(v / g)) exactly (a finite convex combination), so the
    verdict must hold up to floating-point slack for every positive sample set.
    """
    rho = np.asarray(psi_rho, dtype=float).reshape(-1)
    f = np.asarray(psi_f, dtype=float).reshape(-1)
    if rho.shape != f.shape or rho.size == 0:
        raise ValueError("psi_rho and psi_f must be equal-length nonempty samples")
    if np.any(rho <= 0) or not np.all(np.isfinite(rho)) or not np.all(np.isfinite(f)):
        raise NonPositiveDensity("density weights must be finite and strictly positive")
    mean_rho = float(rho.mean())
    if mean_rho <= 0:
        raise NonPositiveDensity("mean density weight must be positive")
    g = rho / mean_rho
    v = f / mean_rho
    lhs = float(H(float(v.mean())))
    rhs = float(np.mean(g * np.asarray(H(v / g), dtype=float)))
    tol = slack * max(1.0, abs(rhs))
    return JensenResult(lhs=lhs, rhs=rhs, slack=tol, holds=lhs <= rhs + tol, num_samples=rho.size)


# ---------------------------------------------------------------------------
# Entropy decay of the estimated fields, with bootstrap bands
# ---------------------------------------------------------------------------


def _quadrature_entropy(mean_f, mean_rho, phi_vals, weights, usable, H: ConvexH) -> float:
    # Points with zero estimated density contribute zero (compactly supported data
    # transported outside its support); positivity where the integrand matters is
    # enforced by the caller.
    pos = usable & (mean_rho > 0)
    vals = np.zeros_like(mean_f)
    vals[pos] = mean_rho[pos] * np.asarray(H(mean_f[pos] / mean_rho[pos]), dtype=float) * phi_vals[pos]
    return float(np.sum(weights[pos] * vals[pos]))


def entropy_decay_check(
    f,
    rho=None,
    phi=None,
    H: ConvexH | None = None,
    times=None,
    resamples: int = 200,
    band_level: float = 0.95,
    seed: int = 0,
    slack_constant: float = 1.0,
) -> EntropyReport:
    """Monotonicity verdict for the entropy series of the estimated fields.

    Two input forms:
      * deterministic: ``f`` and ``rho`` are OracleSeries (``phi`` too) — delegates to
        the oracle entropy functional with the discretization slack.
      * Monte Carlo: ``f`` is a PsiSamples container (``rho`` ignored) — the series is
        built from per-point sample means, and each increment gets a bootstrap
        confidence band (``resamples`` draws over realizations); the verdict fails
        only where an increment is significantly positive at the ``band_level``.

    Raises SignalTooNoisy when the estimated density does not dominate its own
    standard error (mean <= 4*SE) at quadrature points that matter.
    """
    if isinstance(f, OracleSeries):
        if not isinstance(rho, OracleSeries) or not isinstance(phi, OracleSeries):
            raise TypeError("deterministic form needs OracleSeries for f, rho, and phi")
        if H is None:
            raise ValueError("H is required")
        return entropy_series(f, rho, phi, H, slack_constant=slack_constant)

    if not isinstance(f, PsiSamples):
        raise TypeError("f must be an OracleSeries or a PsiSamples container")
    samples = f
    if H is None or phi is None:
        raise ValueError("H and phi are required")
    r_count = samples.num_realizations
    if r_count < MIN_REALIZATIONS:
        raise InsufficientRealizations(
            f"{r_count} realizations available; at least {MIN_REALIZATIONS} required"
        )
    if times is None:
        times = samples.times
    slots = [samples.time_slot(t) for t in times]
    ts = np.asarray([float(t) for t in times])

    axes = _axes_from_points(samples.points)
    weights = trapezoid_weights(axes)
    q = samples.points.shape[0]
    s_count = len(slots)

    psi_f = samples.psi_f[:, slots, :]
    psi_rho = samples.psi_rho[:, slots, :]
    status = samples.status[:, slots, :]
    masked = np.any(status != STATUS_OK, axis=0)  # (S, Q)

    safe_f = np.where(masked[None, :, :], 0.0, np.nan_to_num(psi_f, nan=0.0))
    safe_rho = np.where(masked[None, :, :], 0.0, np.nan_to_num(psi_rho, nan=0.0))
    mean_f = safe_f.mean(axis=0)
    mean_rho = safe_rho.mean(axis=0)
    se_rho = safe_rho.std(axis=0, ddof=1) / np.sqrt(r_count)

    phi_grid = np.stack([_phi_values(phi, samples.points, float(t)) for t in ts], axis=0)

    # Signal check where the integrand can contribute: either transported data is
    # present, or H(0) != 0 makes the bare density term contribute.
    try:
        h_at_zero = abs(float(H(0.0)))
    except ValueError:
        h_at_zero = 0.0
    proxy = np.abs(mean_f) + h_at_zero * np.abs(mean_rho)
    peak = float(proxy.max()) if proxy.size else 0.0
    matters = (~masked) & (proxy > 1e-6 * peak)
    weak = matters & (mean_rho <= 4.0 * se_rho)
    if np.any(weak):
        raise SignalTooNoisy(
            f"estimated density fails mean > 4*SE at {int(weak.sum())} quadrature points"
        )
    if np.any(mean_rho[matters] <= 0):
        raise NonPositiveDensity("estimated density is not positive where the integrand matters")

    usable = ~masked
    values = np.array(
        [
            _quadrature_entropy(mean_f[s], mean_rho[s], phi_grid[s], weights, usable[s], H)
            for s in range(s_count)
        ]
    )
    increments = np.diff(values)

    rng = auxiliary_rng(seed, "entropy-decay-bootstrap")
    boot_vals = np.empty((resamples, s_count))
    for b in range(resamples):
        pick = rng.integers(0, r_count, size=r_count)
        bf = safe_f[pick].mean(axis=0)
        brho = safe_rho[pick].mean(axis=0)
        brho_floor = np.where(usable & (brho > 0), brho, 1.0)
        ok_b = usable & (brho > 0)
        boot_vals[b] = [
            _quadrature_entropy(bf[s], brho_floor[s], phi_grid[s], weights, ok_b[s], H)
            for s in range(s_count)
        ]
    boot_inc = np.diff(boot_vals, axis=1)  # (B, S-1)
    alpha = 1.0 - band_level
    lo_inc = np.percentile(boot_inc, 100 * (alpha / 2), axis=0)
    lower = np.percentile(boot_vals, 100 * (alpha / 2), axis=0)
    upper = np.percentile(boot_vals, 100 * (1 - alpha / 2), axis=0)
    inc_std = boot_inc.std(axis=0, ddof=1)
    z = np.divide(
        increments, inc_std, out=np.zeros_like(increments), where=inc_std > 0
    )
    violations = int(np.sum(lo_inc > 0))
    max_inc = float(increments.max()) if increments.size else 0.0
    return EntropyReport(
        times=ts,
        values=values,
        increments=increments,
        slack=0.0,
        verdict_nonincreasing=violations == 0,
        num_violations=violations,
        C_used=0.0,
        C_needed=float("nan"),
        scale=1.0,
        max_increment=max_inc,
        lower=lower,
        upper=upper,
        z_scores=z,
        description=(
            f"Monte Carlo entropy series with H={H.name}; verdict fails only on "
            f"increments whose bootstrap {band_level:.0%} band lies above zero"
        ),
    )
