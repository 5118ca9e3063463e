"""Seeded Brownian increment batches on uniform time grids.

Streams come from the counter-based Philox generator keyed by the user seed.
Raw 64-bit words are laid out path-major with row stride J, so the word
behind increment (path, step) is word[path * J + step] of the keyed stream:
enlarging a batch from P to P' > P paths reproduces the first P paths
bit-exactly, and a given (seed, path, step) triple always yields the same
increment.  Words map to open-interval uniforms and then to Gaussians through
the inverse normal CDF, which keeps the map one-word-one-sample.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

_HEADER_DTYPE = np.dtype([("seed", "<i8"), ("n_steps", "<i8"),
                          ("tau", "<f8"), ("n_paths", "<i8")])


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_J = horizon with step tau."""

    horizon: float
    n_steps: int
    tau: float
    times: np.ndarray  # shape (n_steps + 1,)


def build_time_grid(horizon: float, n_steps: int) -> TimeGrid:
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
        raise ValueError(f"n_steps must be an integer >= 1, got {n_steps!r}")
    tau = horizon / n_steps
    times = np.linspace(0.0, horizon, n_steps + 1)
    return TimeGrid(horizon=float(horizon), n_steps=int(n_steps), tau=tau, times=times)


@dataclass
class BrownianBatch:
    """Increments delta W of shape (n_paths, J) on a TimeGrid.

    values caches the cumulative path W(t_j), shape (n_paths, J + 1), built on
    first use.
    """

    grid: TimeGrid
    seed: int
    increments: np.ndarray
    antithetic: bool = False
    _values: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    def values(self) -> np.ndarray:
        """W(t_j) for all grid points, cumulative from W(0) = 0."""
        if self._values is None:
            n_paths = self.increments.shape[0]
            vals = np.empty((n_paths, self.grid.n_steps + 1))
            vals[:, 0] = 0.0
            np.cumsum(self.increments, axis=1, out=vals[:, 1:])
            self._values = vals
        return self._values

    def value_at(self, j: int) -> np.ndarray:
        return self.values()[:, j]


def _uniform_words(seed: int, n_words: int) -> np.ndarray:
    if not (-2 ** 63 <= int(seed) < 2 ** 64):
        raise ValueError(f"seed out of 64-bit range: {seed}")
    gen = Philox(key=int(seed) & (2 ** 64 - 1))
    return gen.random_raw(n_words)


def sample_brownian(grid: TimeGrid, n_paths: int, seed: int,
                    antithetic: bool = False) -> BrownianBatch:
    """Draw a batch of Brownian increments.

    With antithetic=True, path 2k+1 is the negation of path 2k; the raw
    stream rows feed the even paths, so enlarging the batch still leaves
    existing paths untouched.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    J = grid.n_steps
    if antithetic:
        n_base = (n_paths + 1) // 2
        base = _gaussian_rows(seed, n_base, J)
        inc = np.empty((n_paths, J))
        inc[0::2] = base[: (n_paths + 1) // 2]
        inc[1::2] = -base[: n_paths // 2]
    else:
        inc = _gaussian_rows(seed, n_paths, J)
    inc *= np.sqrt(grid.tau)
    return BrownianBatch(grid=grid, seed=int(seed), increments=inc, antithetic=antithetic)


def _gaussian_rows(seed: int, n_rows: int, J: int) -> np.ndarray:
    words = _uniform_words(seed, n_rows * J)
    # 53-bit mantissa shifted into (0, 1): never exactly 0 or 1, ndtri stays finite
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0 ** 53
    return ndtri(u).reshape(n_rows, J)


def batch_moments(batch: BrownianBatch):
    """Per-step sample mean and variance (ddof=1) across paths.

    Returns (means, variances, single_path_flag); a single-path batch has no
    variance estimate and gets NaNs plus the flag.
    """
    inc = batch.increments
    means = inc.mean(axis=0)
    if inc.shape[0] < 2:
        return means, np.full(inc.shape[1], np.nan), True
    return means, inc.var(axis=0, ddof=1), False


def coarsen_batch(batch: BrownianBatch, factor: int) -> BrownianBatch:
    """Aggregate increments in groups of `factor`: the same paths on a coarser grid."""
    J = batch.grid.n_steps
    if factor < 1 or J % factor != 0:
        raise ValueError(f"factor {factor} does not divide n_steps {J}")
    inc = batch.increments.reshape(batch.n_paths, J // factor, factor).sum(axis=2)
    coarse = build_time_grid(batch.grid.horizon, J // factor)
    return BrownianBatch(grid=coarse, seed=batch.seed, increments=inc,
                         antithetic=batch.antithetic)


def save_batch(path, batch: BrownianBatch) -> None:
    """Write the documented binary layout.

    Header, little-endian 64-bit fields in order: seed (int), n_steps (int),
    tau (float), n_paths (int).  Then the increments, row-major float64.
    """
    header = np.zeros(1, dtype=_HEADER_DTYPE)
    header["seed"] = batch.seed
    header["n_steps"] = batch.grid.n_steps
    header["tau"] = batch.grid.tau
    header["n_paths"] = batch.n_paths
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(batch.increments, dtype="<f8").tobytes())


def load_batch(path) -> BrownianBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    header = np.frombuffer(raw[: _HEADER_DTYPE.itemsize], dtype=_HEADER_DTYPE)[0]
    J = int(header["n_steps"])
    n_paths = int(header["n_paths"])
    inc = np.frombuffer(raw[_HEADER_DTYPE.itemsize:], dtype="<f8")
    if inc.size != n_paths * J:
        raise ValueError(f"file holds {inc.size} increments, header promises {n_paths * J}")
    grid = build_time_grid(float(header["tau"]) * J, J)
    return BrownianBatch(grid=grid, seed=int(header["seed"]),
                         increments=inc.reshape(n_paths, J).copy())
