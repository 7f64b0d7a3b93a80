"""Discretized white noise, its rescaled image, and whiteness estimators.

White noise with <f(t) f(t')> = hbar delta(t - t') is carried as Brownian
increments dW_k ~ N(0, hbar * dt_k); the pointwise value f_k = dW_k / dt_k
is only a derived view.

Every path is addressed by a pair (seed, stream) of 64-bit integers which is
used directly as the 128-bit key of a Philox counter-based generator, so a
path can be regenerated bit-exactly in any order and on any worker.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_bytes, write_csv
from .kernel import PhysicalConstants, TimeWarp, warp_time
from .errors import FrameError

FRAMES = ("physical", "rescaled")
_U64 = 1 << 64


def philox(seed: int, stream: int) -> np.random.Generator:
    """Generator for the (seed, stream) pair; both must fit in 64 bits."""
    seed, stream = int(seed), int(stream)
    if not (0 <= seed < _U64 and 0 <= stream < _U64):
        raise ValueError("seed and stream must be unsigned 64-bit integers")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("noise grid needs at least two time points")
    if not np.all(np.isfinite(grid)) or np.any(np.diff(grid) <= 0):
        raise ValueError("noise grid must be finite and strictly increasing")
    return grid


def _check_frame(frame: str) -> str:
    if frame not in FRAMES:
        raise FrameError(f"unknown frame {frame!r}")
    return frame


def _draw(hbar: float, dt: np.ndarray, seed: int, stream: int) -> np.ndarray:
    if hbar == 0:
        return np.zeros(dt.size)
    return philox(seed, stream).standard_normal(dt.size) * np.sqrt(hbar * dt)


@dataclass(frozen=True, eq=False)
class NoisePath:
    """One white-noise realization on ``grid`` (N+1 times, N increments)."""

    frame: str
    grid: np.ndarray
    increments: np.ndarray
    constants: PhysicalConstants
    seed: int
    stream: int

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def f(self) -> np.ndarray:
        """Formal noise values dW_k / dt_k."""
        return self.increments / self.dt

    def brownian(self) -> np.ndarray:
        """W(t_k) with W(t_0) = 0."""
        return np.concatenate([[0.0], np.cumsum(self.increments)])

    def to_csv(self, path) -> Path:
        k = np.arange(self.increments.size)
        return write_csv(path, ["k", "time", "increment"], [k, self.grid[:-1], self.increments])


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    """M paths sharing one grid; row j was drawn from (seed, streams[j])."""

    frame: str
    grid: np.ndarray
    increments: np.ndarray
    constants: PhysicalConstants
    seed: int
    streams: np.ndarray

    def __len__(self) -> int:
        return self.increments.shape[0]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.grid)

    def path(self, j: int) -> NoisePath:
        return NoisePath(self.frame, self.grid, self.increments[j], self.constants,
                         self.seed, int(self.streams[j]))

    @classmethod
    def from_paths(cls, paths: Sequence[NoisePath]) -> "NoiseEnsemble":
        if len(paths) == 0:
            raise ValueError("empty path collection")
        first = paths[0]
        for p in paths[1:]:
            if p.frame != first.frame:
                raise FrameError("paths mix frames")
            if p.grid.shape != first.grid.shape or not np.array_equal(p.grid, first.grid):
                raise ValueError("paths do not share a grid")
        return cls(first.frame, first.grid, np.stack([p.increments for p in paths]),
                   first.constants, first.seed, np.array([p.stream for p in paths], dtype=np.uint64))

    def to_csv(self, path) -> Path:
        m, n = self.increments.shape
        stream = np.repeat(self.streams, n)
        k = np.tile(np.arange(n), m)
        t = np.tile(self.grid[:-1], m)
        return write_csv(path, ["stream", "k", "time", "increment"],
                         [stream, k, t, self.increments.ravel()])


def sample_noise(constants: PhysicalConstants, grid, seed: int, stream: int,
                 frame: str = "physical") -> NoisePath:
    """Draw one path of increments dW_k ~ N(0, hbar * dt_k).

    With ``hbar == 0`` every increment is exactly zero.
    """
    grid = _check_grid(grid)
    _check_frame(frame)
    inc = _draw(constants.hbar, np.diff(grid), seed, stream)
    return NoisePath(frame, grid, inc, constants, int(seed), int(stream))


def sample_ensemble(constants: PhysicalConstants, grid, seed: int, streams,
                    frame: str = "physical", threads: int = 1) -> NoiseEnsemble:
    """Draw one path per stream id; row j equals ``sample_noise(..., streams[j])``."""
    grid = _check_grid(grid)
    _check_frame(frame)
    streams = np.asarray(list(streams) if not isinstance(streams, np.ndarray) else streams,
                         dtype=np.uint64)
    dt = np.diff(grid)
    inc = np.empty((streams.size, dt.size))

    def fill(rows):
        for j in rows:
            inc[j] = _draw(constants.hbar, dt, seed, int(streams[j]))

    blocks = np.array_split(np.arange(streams.size), max(1, threads))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, blocks))
    else:
        fill(blocks[0])
    return NoiseEnsemble(frame, grid, inc, constants, int(seed), streams)


def rescale_noise(path, warp: TimeWarp, evaluation: str = "left"):
    """Map a physical-frame path (or ensemble) to the rescaled frame.

    Increments become dW_k / rho(t_k) posted on T_k = warp_time(t_k).  The
    default left-endpoint evaluation matches the Ito/Euler-Maruyama
    convention; ``evaluation="midpoint"`` exists only to show that the
    choice is an O(dt) effect.
    """
    if path.frame != "physical":
        raise FrameError("rescale_noise expects a physical-frame path")
    t = path.grid
    if evaluation == "left":
        rho = np.asarray(warp.pinney.rho(t[:-1]))
    elif evaluation == "midpoint":
        rho = np.asarray(warp.pinney.rho(0.5 * (t[:-1] + t[1:])))
    else:
        raise ValueError(f"unknown evaluation point {evaluation!r}")
    T = np.asarray(warp_time(warp, t))
    return replace(path, frame="rescaled", grid=T, increments=path.increments / rho)


# ---------------------------------------------------------------------------
# correlation estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CorrelationEstimate:
    """Second-moment estimates of the formal noise f on a fixed grid.

    ``var`` is the unbiased per-step variance of f_k, ``diag`` is
    <f_k**2> per step, ``diag_mass`` is <f_k**2> * dt_k (the
    weight of the delta function, hbar for white noise).  Off-diagonal
    estimates <f_j f_k> are pooled by lag into bins of ``bin_width``;
    ``lag_values[b-1]`` is bin b.  Standard errors are computed across
    paths.  ``cum_var`` is the ensemble variance of W(t_k) - W(t_0)
    (index 0 is the start of the grid, always 0).
    """

    frame: str
    grid: np.ndarray
    n_paths: int
    bin_width: float
    mean: np.ndarray
    mean_se: np.ndarray
    var: np.ndarray
    diag: np.ndarray
    diag_se: np.ndarray
    diag_mass: np.ndarray
    diag_mass_se: np.ndarray
    lags: np.ndarray
    lag_values: np.ndarray
    lag_se: np.ndarray
    lag_pairs: np.ndarray
    cum_var: np.ndarray
    cum_var_se: np.ndarray

    def cumulative_slope(self) -> float:
        """Least-squares slope of Var W(t) against elapsed time (through 0)."""
        s = self.grid - self.grid[0]
        return float(np.dot(s, self.cum_var) / np.dot(s, s))


def _is_uniform(dt: np.ndarray) -> bool:
    return bool(np.allclose(dt, dt[0], rtol=1e-9, atol=0.0))


class CorrelationAccumulator:
    """Streaming estimator; feed chunks of increments with :meth:`update`.

    Chunk sums are kept separately and combined with ``math.fsum`` at the
    end, so the result does not depend on the order in which chunks (or
    merged accumulators) arrive.
    """

    def __init__(self, grid, max_lag: int, frame: str = "physical"):
        self.grid = _check_grid(grid)
        self.frame = _check_frame(frame)
        if max_lag < 0:
            raise ValueError("max_lag must be >= 0")
        self.max_lag = int(max_lag)
        dt = np.diff(self.grid)
        self.dt = dt
        self.uniform = _is_uniform(dt)
        self.bin_width = float(dt[0] if self.uniform else np.median(dt))
        self._plan = self._lag_plan()
        self._parts: list[dict] = []

    def _lag_plan(self):
        """For each index offset l, the bin (1..max_lag) of every pair, or -1."""
        n = self.dt.size
        left = self.grid[:-1]
        plan = []
        if self.max_lag == 0:
            return plan
        for l in range(1, n):
            if self.uniform:
                if l > self.max_lag:
                    break
                bins = np.full(n - l, l)
            else:
                lag = left[l:] - left[:-l]
                if lag.min() > (self.max_lag + 0.5) * self.bin_width:
                    break
                bins = np.maximum(1, np.rint(lag / self.bin_width).astype(int))
                bins[bins > self.max_lag] = -1
                if np.all(bins < 0):
                    continue
            onehot = np.zeros((n - l, self.max_lag))
            ok = bins > 0
            onehot[np.nonzero(ok)[0], bins[ok] - 1] = 1.0
            plan.append((l, onehot))
        return plan

    def spawn(self) -> "CorrelationAccumulator":
        """Empty accumulator on the same grid, reusing the lag plan."""
        new = object.__new__(CorrelationAccumulator)
        new.__dict__.update(self.__dict__)
        new._parts = []
        return new

    def update(self, increments) -> "CorrelationAccumulator":
        inc = np.atleast_2d(np.asarray(increments, dtype=float))
        if inc.shape[1] != self.dt.size:
            raise ValueError("increments do not match the accumulator grid")
        f = inc / self.dt
        w = np.cumsum(inc, axis=1)
        part = {
            "n": float(inc.shape[0]),
            "f": f.sum(0), "f2": (f * f).sum(0), "f4": (f**4).sum(0),
            "w": w.sum(0), "w2": (w * w).sum(0),
        }
        if self.max_lag:
            per_path = np.zeros((inc.shape[0], self.max_lag))
            counts = np.zeros(self.max_lag)
            for l, onehot in self._plan:
                per_path += (f[:, :-l] * f[:, l:]) @ onehot
                counts += onehot.sum(0)
            with np.errstate(invalid="ignore", divide="ignore"):
                p = per_path / counts
            part.update(p=p.sum(0), p2=(p * p).sum(0), counts=counts)
        self._parts.append(part)
        return self

    def merge(self, other: "CorrelationAccumulator") -> "CorrelationAccumulator":
        if not np.array_equal(self.grid, other.grid) or self.max_lag != other.max_lag:
            raise ValueError("cannot merge accumulators on different grids")
        self._parts.extend(other._parts)
        return self

    def _total(self, key):
        stack = np.stack([np.atleast_1d(p[key]) for p in self._parts])
        return np.array([math.fsum(col) for col in stack.T])

    def result(self) -> CorrelationEstimate:
        if not self._parts:
            raise ValueError("no paths accumulated")
        m = float(self._total("n")[0])
        if m < 2:
            raise ValueError("need at least two paths")
        mean = self._total("f") / m
        m2 = self._total("f2") / m
        m4 = self._total("f4") / m
        var_f = np.maximum(m2 - mean**2, 0.0) * m / (m - 1)
        diag_var = np.maximum(m4 - m2**2, 0.0) * m / (m - 1)
        wm = self._total("w") / m
        cum_var = np.maximum(self._total("w2") / m - wm**2, 0.0) * m / (m - 1)
        cum_var = np.concatenate([[0.0], cum_var])
        if self.max_lag:
            pm = self._total("p") / m
            pvar = np.maximum(self._total("p2") / m - pm**2, 0.0) * m / (m - 1)
            counts = self._parts[0]["counts"]
            lag_se = np.sqrt(pvar / m)
        else:
            pm = lag_se = counts = np.zeros(0)
        return CorrelationEstimate(
            frame=self.frame, grid=self.grid, n_paths=int(m), bin_width=self.bin_width,
            mean=mean, mean_se=np.sqrt(var_f / m), var=var_f,
            diag=m2, diag_se=np.sqrt(diag_var / m),
            diag_mass=m2 * self.dt, diag_mass_se=np.sqrt(diag_var / m) * self.dt,
            lags=np.arange(1, self.max_lag + 1), lag_values=pm, lag_se=lag_se,
            lag_pairs=np.asarray(counts, dtype=int),
            # Gaussian approximation for the standard error of a variance
            cum_var=cum_var, cum_var_se=cum_var * math.sqrt(2.0 / (m - 1)),
        )


def estimate_correlation(paths, max_lag: int, chunk: int = 4096) -> CorrelationEstimate:
    """Correlation estimate from a :class:`NoiseEnsemble` or a list of paths."""
    if not isinstance(paths, NoiseEnsemble):
        paths = NoiseEnsemble.from_paths(list(paths))
    if len(paths) < 2:
        raise ValueError("need at least two paths")
    acc = CorrelationAccumulator(paths.grid, max_lag, paths.frame)
    for start in range(0, len(paths), chunk):
        acc.update(paths.increments[start:start + chunk])
    return acc.result()


def streamed_correlation(constants: PhysicalConstants, grid, seed: int, n_paths: int,
                         max_lag: int, warp: TimeWarp | None = None, chunk: int = 5000,
                         stream_offset: int = 0, threads: int = 1) -> CorrelationEstimate:
    """Generate ``n_paths`` physical paths chunk by chunk and estimate correlations.

    With ``warp`` the paths are rescaled first and the estimate refers to the
    rescaled noise F(T).  Chunk boundaries depend only on ``chunk``, never on
    ``threads``, so the result is identical for any thread count.
    """
    grid = _check_grid(grid)
    out_grid = np.asarray(warp_time(warp, grid)) if warp is not None else grid
    frame = "rescaled" if warp is not None else "physical"
    starts = list(range(0, n_paths, chunk))
    template = CorrelationAccumulator(out_grid, max_lag, frame)

    def work(start):
        streams = np.arange(stream_offset + start, stream_offset + min(start + chunk, n_paths),
                            dtype=np.uint64)
        ens = sample_ensemble(constants, grid, seed, streams)
        if warp is not None:
            ens = rescale_noise(ens, warp)
        return template.spawn().update(ens.increments)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            accs = list(pool.map(work, starts))
    else:
        accs = [work(s) for s in starts]
    total = accs[0]
    for a in accs[1:]:
        total.merge(a)
    return total.result()


# ---------------------------------------------------------------------------
# binary ensemble layout
# ---------------------------------------------------------------------------

HKNZ_MAGIC = b"HKNZ"
HKNZ_VERSION = 1
# magic, version u32, hbar f64, grid length u64, path count u64, seed u64,
# frame u8 (0 physical, 1 rescaled), 7 pad bytes -- all little-endian
_HKNZ_HEADER = struct.Struct("<4sIdQQQB7x")


def write_hknz(path, ensemble: NoiseEnsemble) -> Path:
    """Write an ensemble in the compact binary layout.

    After the 48-byte header come the stream ids (u64 x paths), the grid
    (f64 x grid length) and the increments (f64, row-major, one row per path).
    """
    header = _HKNZ_HEADER.pack(HKNZ_MAGIC, HKNZ_VERSION, ensemble.constants.hbar,
                               ensemble.grid.size, len(ensemble), ensemble.seed,
                               FRAMES.index(ensemble.frame))
    body = (np.asarray(ensemble.streams, dtype="<u8").tobytes()
            + np.asarray(ensemble.grid, dtype="<f8").tobytes()
            + np.asarray(ensemble.increments, dtype="<f8").tobytes())
    return atomic_write_bytes(path, header + body)


def read_hknz(path) -> NoiseEnsemble:
    data = Path(path).read_bytes()
    if len(data) < _HKNZ_HEADER.size:
        raise ValueError("truncated HKNZ file")
    magic, version, hbar, n_grid, n_paths, seed, frame = _HKNZ_HEADER.unpack_from(data)
    if magic != HKNZ_MAGIC:
        raise ValueError("not an HKNZ file")
    if version != HKNZ_VERSION:
        raise ValueError(f"unsupported HKNZ version {version}")
    off = _HKNZ_HEADER.size
    expected = off + 8 * (n_paths + n_grid + n_paths * (n_grid - 1))
    if len(data) != expected:
        raise ValueError("HKNZ payload size does not match header")
    streams = np.frombuffer(data, "<u8", n_paths, off).astype(np.uint64)
    off += 8 * n_paths
    grid = np.frombuffer(data, "<f8", n_grid, off).astype(float)
    off += 8 * n_grid
    inc = np.frombuffer(data, "<f8", n_paths * (n_grid - 1), off).astype(float)
    return NoiseEnsemble(FRAMES[frame], grid, inc.reshape(n_paths, n_grid - 1),
                         PhysicalConstants(hbar), int(seed), streams)
