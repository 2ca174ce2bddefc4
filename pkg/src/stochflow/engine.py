"""Euler–Maruyama integration of the stochastic flow map.

One realization = one Brownian path driving a whole grid of labels (shared noise): every
label consumes the same increment vector each step, so the realization transports a full
coordinate chart.  Alongside the positions the engine advances

- the tangent matrix ``J`` (sensitivity of position to label),
- two redundant determinant trackers: ``D_sde`` (multiplicative factor per step) and
  ``log_lambda`` (log-space exponent, positivity-preserving by construction), next to the
  direct determinant ``det(J)`` — their mutual agreement is a discretization diagnostic,
- the exponential growth weight ``log_I`` (left-endpoint time quadrature of the
  zeroth-order coefficient along the path).

The batch kernel works on arrays of shape (R, L, n) — R realizations, L labels — and
evaluates all coefficient expressions through one shared memo per step, so subtrees shared
between sigma, the drift, and their derivatives are computed once for the whole batch.
Exactly-zero coefficients (constant-folded by the expression layer) are skipped, which
makes trivial cases (identity sigma, zero drift) nearly free.

Realizations whose chart leaves the padded integration box, or develops non-finite
state, are flagged and their rows frozen to the box center so the remaining batch can
continue without domain errors; consumers must drop flagged realizations.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .brownian import BrownianDriver
from .coefficients import CoefficientSet
from .errors import DimensionMismatch, NonFiniteState, PathEscapedDomain
from .fields import eval_batch
from .grids import Box, mesh_points

__all__ = [
    "PathState",
    "BatchResult",
    "Ensemble",
    "step_path",
    "simulate_paths",
    "simulate_ensemble",
    "martingale_M",
    "run_chunks",
    "escape_margin",
    "DEFAULT_CHUNK_SIZE",
]

DEFAULT_CHUNK_SIZE = 4096

# Number of diffusive standard deviations sqrt(2*nu*T) added around the label box to
# form the integration domain; leaving it counts as an escape.
ESCAPE_MARGIN_SIGMAS = 6.0


def escape_margin(nu: float, horizon: float) -> float:
    """Padding width around the label box for escape detection."""
    return ESCAPE_MARGIN_SIGMAS * float(np.sqrt(max(2.0 * nu * horizon, 0.0)))


# ---------------------------------------------------------------------------
# Per-path state (single label, single realization)
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PathState:
    """State of one label along one realization.

    ``D_sde`` and ``log_lambda`` track the tangent determinant through its own update
    rule; ``D_direct`` is the determinant of the stored tangent matrix.  At t=0 all
    three equal 1 (log_lambda = 0) and X equals the label.
    """

    a: np.ndarray  # label, shape (n,)
    t: float
    X: np.ndarray  # position, shape (n,)
    J: np.ndarray  # tangent matrix, shape (n, n)
    D_sde: float
    log_lambda: float
    log_I: float

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def D_direct(self) -> float:
        return float(np.linalg.det(self.J)) if self.n > 1 else float(self.J[0, 0])

    @classmethod
    def initial(cls, a, t: float = 0.0) -> "PathState":
        a = np.atleast_1d(np.asarray(a, dtype=float))
        n = a.shape[0]
        return cls(
            a=a.copy(),
            t=float(t),
            X=a.copy(),
            J=np.eye(n),
            D_sde=1.0,
            log_lambda=0.0,
            log_I=0.0,
        )


# ---------------------------------------------------------------------------
# Batch step kernel
# ---------------------------------------------------------------------------


def _is_zero(val) -> bool:
    """True for a constant-folded exact zero (skippable term)."""
    return isinstance(val, float) and val == 0.0


def _add_term(acc, term):
    return term if acc is None else acc + term


def _times_col(val, arr):
    """Multiply a coefficient value (scalar or (R,L)-array) into (R,L,n) rows."""
    if isinstance(val, float):
        return val * arr
    return val[..., None] * arr


def _advance(cs: CoefficientSet, X, J, D, logL, logI, t, dt, dW):
    """One Euler–Maruyama step of the full state, left-endpoint evaluation.

    X: (R, L, n); J: (R, L, n, n); D, logL, logI: (R, L); dW: (R, n).
    Returns new arrays; inputs are not modified.  All coefficient values are taken at
    the pre-step position and time (simultaneous update).
    """
    n = cs.n
    sqrt2nu = float(np.sqrt(2.0 * cs.nu))
    comps = tuple(X[..., k] for k in range(n))
    memo: dict = {}

    def ev(expr):
        return eval_batch(expr, comps, t, memo)

    sig = [[ev(cs.sigma[j][p]) for p in range(n)] for j in range(n)]
    v = [ev(cs.v[j]) for j in range(n)]
    dv = [[ev(cs.dv[k][j]) for j in range(n)] for k in range(n)]
    dsig = [[[ev(cs.dsigma[k][j][p]) for p in range(n)] for j in range(n)] for k in range(n)]
    div_v = ev(cs.div_v)
    e_val = ev(cs.E)
    div_sig = [ev(cs.div_sigma[p]) for p in range(n)]
    p_val = ev(cs.P)

    # Broadcastable per-realization noise columns, shape (R, 1).
    dWb = [dW[:, p][:, None] for p in range(n)]

    # --- position update ---------------------------------------------------
    X_new = np.empty_like(X)
    for j in range(n):
        acc = X[..., j]
        if not _is_zero(v[j]):
            acc = acc + v[j] * dt
        for p in range(n):
            s = sig[j][p]
            if not _is_zero(s):
                acc = acc + (sqrt2nu * s) * dWb[p]
        X_new[..., j] = acc

    # --- tangent matrix update: J' = J + M·J with M[j][k] built per entry ---
    M = [[None] * n for _ in range(n)]
    any_m = False
    for j in range(n):
        for k in range(n):
            acc = None
            g = dv[k][j]
            if not _is_zero(g):
                acc = _add_term(acc, g * dt)
            for p in range(n):
                gs = dsig[k][j][p]
                if not _is_zero(gs):
                    acc = _add_term(acc, (sqrt2nu * gs) * dWb[p])
            M[j][k] = acc
            any_m = any_m or acc is not None
    if any_m:
        J_new = J.copy()
        for j in range(n):
            for k in range(n):
                if M[j][k] is not None:
                    J_new[..., j, :] += _times_col(
                        M[j][k] if isinstance(M[j][k], float) else np.asarray(M[j][k]),
                        J[..., k, :],
                    )
    else:
        J_new = J

    # --- determinant trackers -----------------------------------------------
    drift = None  # div v + 2*nu*E
    if not _is_zero(div_v):
        drift = _add_term(drift, div_v)
    if not _is_zero(e_val):
        drift = _add_term(drift, 2.0 * cs.nu * e_val)
    noise = None  # sqrt(2 nu) * sum_p (div sigma_p) dW_p
    sumsq = None  # sum_p (div sigma_p)^2
    for p in range(n):
        ds = div_sig[p]
        if not _is_zero(ds):
            noise = _add_term(noise, (sqrt2nu * ds) * dWb[p])
            sumsq = _add_term(sumsq, ds * ds)

    if drift is not None or noise is not None:
        factor = 1.0
        if drift is not None:
            factor = factor + drift * dt
        if noise is not None:
            factor = factor + noise
        D_new = D * factor
    else:
        D_new = D

    lam_inc = None
    if drift is not None:
        lam_inc = _add_term(lam_inc, drift * dt)
    if sumsq is not None:
        lam_inc = _add_term(lam_inc, (-cs.nu * dt) * sumsq)
    if noise is not None:
        lam_inc = _add_term(lam_inc, noise)
    logL_new = logL + lam_inc if lam_inc is not None else logL

    logI_new = logI + p_val * dt if not _is_zero(p_val) else logI

    return X_new, J_new, D_new, logL_new, logI_new


def _det_stack(J: np.ndarray) -> np.ndarray:
    """Determinant over the last two axes, cheap closed forms for n <= 2."""
    n = J.shape[-1]
    if n == 1:
        return J[..., 0, 0].copy()
    if n == 2:
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    return np.linalg.det(J)


# ---------------------------------------------------------------------------
# Single-path step (thin wrapper over the batch kernel)
# ---------------------------------------------------------------------------


def step_path(
    cs: CoefficientSet,
    s: PathState,
    dW: np.ndarray,
    dt: float,
    box: Box | None = None,
) -> PathState:
    """Advance one path state by one step.

    ``box``, when given, is the (already padded) integration domain: a new position
    outside it raises PathEscapedDomain.  Non-finite updated state raises
    NonFiniteState.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if dW.shape != (cs.n,):
        raise DimensionMismatch(f"increment has shape {dW.shape}, expected ({cs.n},)")
    if s.a.shape != (cs.n,):
        raise DimensionMismatch(f"state dimension {s.a.shape[0]} != coefficient dimension {cs.n}")

    X = s.X.reshape(1, 1, cs.n)
    J = s.J.reshape(1, 1, cs.n, cs.n)
    D = np.array([[s.D_sde]])
    logL = np.array([[s.log_lambda]])
    logI = np.array([[s.log_I]])
    X2, J2, D2, logL2, logI2 = _advance(cs, X, J, D, logL, logI, s.t, dt, dW.reshape(1, cs.n))

    x_new = np.asarray(X2, dtype=float).reshape(cs.n)
    state = PathState(
        a=s.a,
        t=s.t + dt,
        X=x_new,
        J=np.asarray(J2, dtype=float).reshape(cs.n, cs.n).copy(),
        D_sde=float(np.asarray(D2).reshape(())),
        log_lambda=float(np.asarray(logL2).reshape(())),
        log_I=float(np.asarray(logI2).reshape(())),
    )
    if not (
        np.all(np.isfinite(state.X))
        and np.all(np.isfinite(state.J))
        and np.isfinite(state.D_sde)
        and np.isfinite(state.log_lambda)
        and np.isfinite(state.log_I)
    ):
        raise NonFiniteState(f"non-finite path state at t={state.t:.6g}")
    if box is not None and not box.contains(x_new):
        raise PathEscapedDomain(
            f"path left the integration box at t={state.t:.6g}: position {x_new.tolist()}"
        )
    return state


# ---------------------------------------------------------------------------
# Batch simulation
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class BatchResult:
    """Snapshots of a chunk of realizations over a common label grid.

    Leading axes of the arrays: (stored time, realization, label).  ``alive`` marks
    realizations that stayed finite and inside the padded box for the whole run;
    consumers must discard the rest (``escaped`` / ``nonfinite`` say why).
    ``degenerate`` flags realizations whose direct determinant was <= 0 at some stored
    time while still alive — a sign the step size is too coarse.
    """

    label_axes: tuple  # tuple of 1D arrays
    labels: np.ndarray  # (L, n)
    label_shape: tuple
    times: np.ndarray  # (S,)
    time_indices: np.ndarray  # (S,) step indices
    dt: float
    num_steps: int
    realization_indices: np.ndarray  # (R,)
    X: np.ndarray  # (S, R, L, n)
    J: np.ndarray  # (S, R, L, n, n)
    D_sde: np.ndarray  # (S, R, L)
    log_lambda: np.ndarray  # (S, R, L)
    log_I: np.ndarray  # (S, R, L)
    D_direct: np.ndarray  # (S, R, L)
    alive: np.ndarray  # (R,) bool
    escaped: np.ndarray  # (R,) bool
    nonfinite: np.ndarray  # (R,) bool
    degenerate: np.ndarray  # (R,) bool
    box: Box  # label box
    padded_box: Box  # escape-detection box

    @property
    def num_realizations(self) -> int:
        return int(self.realization_indices.shape[0])

    @property
    def num_labels(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n(self) -> int:
        return int(self.labels.shape[1])

    def time_slot(self, t: float) -> int:
        """Index into the stored-time axis for time t (must match a stored time)."""
        hits = np.nonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, abs(t)))[0]
        if hits.size == 0:
            raise ValueError(f"time {t!r} is not a stored output time; stored: {self.times.tolist()}")
        return int(hits[0])


def _normalize_label_axes(labels, n: int) -> tuple:
    if isinstance(labels, np.ndarray) and labels.ndim == 1:
        if n != 1:
            raise DimensionMismatch("a single 1D label array is only valid in dimension 1")
        axes = (labels,)
    elif isinstance(labels, (tuple, list)):
        axes = tuple(np.asarray(ax, dtype=float).reshape(-1) for ax in labels)
    else:
        raise TypeError("labels must be a tuple/list of 1D axis arrays (or a 1D array when n=1)")
    if len(axes) != n:
        raise DimensionMismatch(f"{len(axes)} label axes given for dimension {n}")
    out = []
    for k, ax in enumerate(axes):
        ax = np.asarray(ax, dtype=float)
        if ax.ndim != 1 or ax.size < 1:
            raise ValueError(f"label axis {k + 1} must be a nonempty 1D array")
        if ax.size > 1 and not np.all(np.diff(ax) > 0):
            raise ValueError(f"label axis {k + 1} must be strictly increasing")
        if not np.all(np.isfinite(ax)):
            raise ValueError(f"label axis {k + 1} contains non-finite entries")
        out.append(ax)
    return tuple(out)


def simulate_paths(
    cs: CoefficientSet,
    labels,
    num_steps: int,
    store_indices: Sequence[int],
    driver: BrownianDriver,
    realization_indices,
    box: Box | None = None,
) -> BatchResult:
    """Advance a chunk of realizations over a label grid, storing snapshots.

    ``labels``: tuple of per-axis 1D arrays (rectangular label grid).  ``store_indices``:
    step indices (0 = initial state) at which full state snapshots are kept.  The step
    size is ``driver.dt``.  Escaped / non-finite realizations are flagged, frozen to the
    box center, and carried along so results stay aligned; they are never raised here.
    """
    n = cs.n
    if driver.n != n:
        raise DimensionMismatch(f"driver dimension {driver.n} != coefficient dimension {n}")
    dt = float(driver.dt)
    num_steps = int(num_steps)
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")

    box = box if box is not None else cs.box
    if box is None:
        raise ValueError("no label box: pass box= or assemble coefficients with one")
    if box.dim != n:
        raise DimensionMismatch(f"box dimension {box.dim} != coefficient dimension {n}")

    axes = _normalize_label_axes(labels, n)
    pts = mesh_points(axes)  # (L, n)
    L = pts.shape[0]
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    if not (np.all(pts >= lo) and np.all(pts <= hi)):
        raise ValueError("label grid extends outside the label box")

    horizon = num_steps * dt
    padded = box.padded(escape_margin(cs.nu, horizon))
    plo = np.asarray(padded.lo)
    phi = np.asarray(padded.hi)
    center = np.array(box.center)

    store = sorted({int(i) for i in store_indices})
    if not store:
        raise ValueError("store_indices must be nonempty")
    if store[0] < 0 or store[-1] > num_steps:
        raise ValueError(f"store_indices must lie in [0, {num_steps}]")
    slot_of = {idx: s for s, idx in enumerate(store)}
    S = len(store)

    r_idx = np.asarray(list(realization_indices), dtype=np.int64)
    R = r_idx.size
    if R < 1:
        raise ValueError("need at least one realization index")
    inc = driver.increments_block(r_idx, num_steps)  # (R, K, n)

    X = np.broadcast_to(pts, (R, L, n)).copy()
    J = np.broadcast_to(np.eye(n), (R, L, n, n)).copy()
    D = np.ones((R, L))
    logL = np.zeros((R, L))
    logI = np.zeros((R, L))
    alive = np.ones(R, dtype=bool)
    escaped = np.zeros(R, dtype=bool)
    nonfinite = np.zeros(R, dtype=bool)
    degenerate = np.zeros(R, dtype=bool)

    Xs = np.empty((S, R, L, n))
    Js = np.empty((S, R, L, n, n))
    Ds = np.empty((S, R, L))
    logLs = np.empty((S, R, L))
    logIs = np.empty((S, R, L))
    Ddir = np.empty((S, R, L))

    def freeze(dead_mask: np.ndarray) -> None:
        X[dead_mask] = center
        J[dead_mask] = np.eye(n)
        D[dead_mask] = 1.0
        logL[dead_mask] = 0.0
        logI[dead_mask] = 0.0

    def snapshot(slot: int) -> None:
        Xs[slot] = X
        Js[slot] = J
        Ds[slot] = D
        logLs[slot] = logL
        logIs[slot] = logI
        dd = _det_stack(J)
        Ddir[slot] = dd
        # Judge tracker health only on live realizations.
        bad_det = alive & np.any(dd <= 0.0, axis=1)
        if bad_det.any():
            degenerate[bad_det] = True
        fin = (
            np.isfinite(J).all(axis=(1, 2, 3))
            & np.isfinite(D).all(axis=1)
            & np.isfinite(logL).all(axis=1)
            & np.isfinite(logI).all(axis=1)
        )
        bad_fin = alive & ~fin
        if bad_fin.any():
            nonfinite[bad_fin] = True
            alive[bad_fin] = False
            freeze(~alive)

    if 0 in slot_of:
        snapshot(slot_of[0])

    for k in range(num_steps):
        t = k * dt
        X, J, D, logL, logI = _advance(cs, X, J, D, logL, logI, t, dt, inc[:, k, :])
        fin = np.isfinite(X).all(axis=(1, 2))
        inside = ((X >= plo) & (X <= phi)).all(axis=(1, 2))  # False wherever X is NaN
        newly_nonfin = alive & ~fin
        newly_esc = alive & fin & ~inside
        if newly_nonfin.any() or newly_esc.any():
            nonfinite[newly_nonfin] = True
            escaped[newly_esc] = True
            alive &= fin & inside
        dead = ~alive
        if dead.any():
            freeze(dead)
        slot = slot_of.get(k + 1)
        if slot is not None:
            snapshot(slot)

    times = np.array([i * dt for i in store])
    return BatchResult(
        label_axes=axes,
        labels=pts,
        label_shape=tuple(ax.size for ax in axes),
        times=times,
        time_indices=np.array(store, dtype=np.int64),
        dt=dt,
        num_steps=num_steps,
        realization_indices=r_idx,
        X=Xs,
        J=Js,
        D_sde=Ds,
        log_lambda=logLs,
        log_I=logIs,
        D_direct=Ddir,
        alive=alive,
        escaped=escaped,
        nonfinite=nonfinite,
        degenerate=degenerate,
        box=box,
        padded_box=padded,
    )


# ---------------------------------------------------------------------------
# Single-realization ensemble (full label grid under one Brownian path)
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Ensemble:
    """One realization transporting a rectangular label grid.

    Snapshots are stored at every point of ``time_grid``.  ``state(i, k)`` materializes
    the path state of label i at time-grid index k.
    """

    label_axes: tuple
    labels: np.ndarray  # (L, n)
    time_grid: np.ndarray  # (K+1,)
    driver: BrownianDriver
    realization_index: int
    result: BatchResult = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.labels.shape[1])

    @property
    def num_labels(self) -> int:
        return int(self.labels.shape[0])

    @property
    def alive(self) -> bool:
        return bool(self.result.alive[0])

    # Stored arrays with the singleton realization axis removed: (S, L, ...).
    @property
    def X(self) -> np.ndarray:
        return self.result.X[:, 0]

    @property
    def J(self) -> np.ndarray:
        return self.result.J[:, 0]

    @property
    def D_sde(self) -> np.ndarray:
        return self.result.D_sde[:, 0]

    @property
    def log_lambda(self) -> np.ndarray:
        return self.result.log_lambda[:, 0]

    @property
    def log_I(self) -> np.ndarray:
        return self.result.log_I[:, 0]

    @property
    def D_direct(self) -> np.ndarray:
        return self.result.D_direct[:, 0]

    def time_index(self, t: float) -> int:
        hits = np.nonzero(np.abs(self.time_grid - t) <= 1e-9 * max(1.0, abs(t)))[0]
        if hits.size == 0:
            raise ValueError(f"time {t!r} is not on the stored time grid")
        return int(hits[0])

    def label_index(self, a) -> int:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        if a.shape != (self.n,):
            raise DimensionMismatch(f"label has shape {a.shape}, expected ({self.n},)")
        dist = np.max(np.abs(self.labels - a), axis=1)
        i = int(np.argmin(dist))
        if dist[i] > 1e-9 * (1.0 + float(np.max(np.abs(a)))):
            raise ValueError(f"label {a.tolist()} is not a grid label")
        return i

    def state(self, label_index: int, time_index: int) -> PathState:
        i, s = int(label_index), int(time_index)
        return PathState(
            a=self.labels[i].copy(),
            t=float(self.time_grid[s]),
            X=self.X[s, i].copy(),
            J=self.J[s, i].copy(),
            D_sde=float(self.D_sde[s, i]),
            log_lambda=float(self.log_lambda[s, i]),
            log_I=float(self.log_I[s, i]),
        )


def simulate_ensemble(
    cs: CoefficientSet,
    labels,
    time_grid,
    driver: BrownianDriver,
    box: Box | None = None,
    realization_index: int | None = None,
    raise_on_escape: bool = True,
) -> Ensemble:
    """Advance a full label grid through one Brownian realization.

    ``time_grid`` must be uniform starting at 0 with spacing equal to ``driver.dt``;
    snapshots are stored at every grid time.  With ``raise_on_escape`` (default), a
    chart that leaves the padded box or turns non-finite raises with the offending
    labels identified; otherwise the ensemble is returned flagged not-alive.
    """
    tg = np.asarray(time_grid, dtype=float).reshape(-1)
    if tg.size < 2:
        raise ValueError("time_grid needs at least two times (0 and the horizon)")
    if abs(tg[0]) > 1e-12:
        raise ValueError("time_grid must start at 0")
    steps = np.diff(tg)
    if np.any(steps <= 0):
        raise ValueError("time_grid must be strictly increasing")
    dt = float(driver.dt)
    if np.any(np.abs(steps - dt) > 1e-9 * max(1.0, dt)):
        raise ValueError("time_grid spacing must equal driver.dt (uniform grid)")
    K = tg.size - 1

    r = driver.realization_index if realization_index is None else int(realization_index)
    result = simulate_paths(
        cs,
        labels,
        num_steps=K,
        store_indices=range(K + 1),
        driver=driver,
        realization_indices=[r],
        box=box,
    )
    ens = Ensemble(
        label_axes=result.label_axes,
        labels=result.labels,
        time_grid=tg.copy(),
        driver=driver.for_realization(r),
        realization_index=r,
        result=result,
    )
    if raise_on_escape and not ens.alive:
        reason = "non-finite state" if result.nonfinite[0] else "left the padded box"
        # The snapshots pinpoint when the chart died: first stored time where some
        # label sits outside the padded box or is non-finite.
        detail = ""
        for s in range(result.times.size):
            snap = result.X[s, 0]
            okfin = np.isfinite(snap).all(axis=1)
            okbox = (
                (snap >= np.asarray(result.padded_box.lo)) & (snap <= np.asarray(result.padded_box.hi))
            ).all(axis=1)
            bad = ~(okfin & okbox)
            if bad.any():
                idx = int(np.nonzero(bad)[0][0])
                detail = (
                    f"; first flagged at stored t={result.times[s]:.6g},"
                    f" label index {idx} = {result.labels[idx].tolist()}"
                )
                break
        msg = f"realization {r}: chart {reason}{detail}"
        if result.nonfinite[0]:
            raise NonFiniteState(msg)
        raise PathEscapedDomain(msg)
    return ens


def martingale_M(ens: Ensemble, phi, a, t: float) -> float:
    """Martingale sample at (label a, time t): phi(X, t) * D_direct * exp(log_I).

    ``phi`` is any callable of (point, time) — a parsed field expression works as-is.
    """
    s = ens.time_index(t)
    i = ens.label_index(a)
    x = ens.X[s, i]
    val = float(phi(x, float(ens.time_grid[s])))
    return val * float(ens.D_direct[s, i]) * float(np.exp(ens.log_I[s, i]))


# ---------------------------------------------------------------------------
# Chunked parallel execution (deterministic reduction order)
# ---------------------------------------------------------------------------


def run_chunks(
    realization_indices,
    worker: Callable,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    threads: int = 1,
) -> list:
    """Run ``worker(chunk_of_indices)`` over fixed-size chunks, results in chunk order.

    Chunk boundaries depend only on ``chunk_size`` and every realization owns a
    counter-based RNG stream, so outputs are identical for any ``threads`` value;
    consumers must reduce over the returned list in order.
    """
    idx = np.asarray(list(realization_indices), dtype=np.int64)
    if idx.size == 0:
        return []
    chunk_size = max(1, int(chunk_size))
    chunks = [idx[i : i + chunk_size] for i in range(0, idx.size, chunk_size)]
    if threads <= 1 or len(chunks) == 1:
        return [worker(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        futures = [pool.submit(worker, c) for c in chunks]
        return [f.result() for f in futures]
