"""Counter-based Brownian increment streams.

Each realization owns an independent Philox stream keyed by (seed, realization index),
so the k-th increment row is a pure function of (seed, realization, k) — independent of
chunking, thread count, or how many labels consume the increments.  All labels of one
realization share the same increment vector per step; that is what makes the transported
fields of a single realization consistent with one underlying Wiener path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

__all__ = ["BrownianDriver", "auxiliary_rng"]

_AUX_SALT = 0x9E3779B97F4A7C15  # distinguishes auxiliary draws from path increments


@dataclass(frozen=True)
class BrownianDriver:
    """Deterministic per-realization Gaussian increment source.

    ``increments(k)`` returns the first k rows of the realization's stream, scaled
    to variance ``dt`` per component; asking for more steps extends the same stream.
    """

    seed: int
    dt: float
    n: int
    realization_index: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def for_realization(self, realization_index: int) -> "BrownianDriver":
        return replace(self, realization_index=int(realization_index))

    def _generator(self, realization_index: int) -> np.random.Generator:
        key = np.array(
            [np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF), np.uint64(realization_index)],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    def increments(self, num_steps: int, realization_index: int | None = None) -> np.ndarray:
        """(num_steps, n) array of N(0, dt) increments for one realization."""
        r = self.realization_index if realization_index is None else int(realization_index)
        gen = self._generator(r)
        return gen.standard_normal((int(num_steps), self.n)) * np.sqrt(self.dt)

    def increments_block(self, realization_indices, num_steps: int) -> np.ndarray:
        """(R, num_steps, n) stacked increments for a chunk of realizations."""
        idx = np.asarray(realization_indices, dtype=np.int64)
        out = np.empty((idx.size, int(num_steps), self.n))
        for row, r in enumerate(idx):
            out[row] = self.increments(num_steps, int(r))
        return out

    def self_test(self, num_draws: int = 200_000) -> dict:
        """Mean/variance sanity of the stream: |z| for both should stay below 4."""
        draws = self.increments(int(np.ceil(num_draws / self.n))).reshape(-1)[:num_draws]
        m = float(draws.mean())
        v = float(draws.var(ddof=1))
        se_mean = np.sqrt(self.dt / num_draws)
        se_var = self.dt * np.sqrt(2.0 / (num_draws - 1))
        z_mean = m / se_mean
        z_var = (v - self.dt) / se_var
        return {
            "mean": m,
            "variance": v,
            "z_mean": float(z_mean),
            "z_variance": float(z_var),
            "ok": bool(abs(z_mean) <= 4.0 and abs(z_var) <= 4.0),
        }


def auxiliary_rng(seed: int, tag: str) -> np.random.Generator:
    """Deterministic generator for non-path randomness (bootstrap resampling etc.).

    The tag is digested with sha256 (process-invariant), unlike builtin ``hash``.
    """
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    tag_hash = np.uint64(int.from_bytes(digest[:8], "little"))
    key = np.array(
        [np.uint64((seed ^ _AUX_SALT) & 0xFFFFFFFFFFFFFFFF), tag_hash], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))
