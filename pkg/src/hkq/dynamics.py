"""Planar stochastic dynamics in the physical and rescaled frames.

Rescaled frame:  dR/dT = Omega x R + F(T) n,  n = (1, 1) / sqrt(2)
Physical frame:  dr/dt = (Omega x r) / rho**2 + (rho'/rho) r + f(t) n

Stochastic integrals are Ito (left-point) sums over the path increments
everywhere, for the Euler-Maruyama integrators as well as for the closed-form
solution and the linear invariants.  The closed form is only evaluated on
grid points, which keeps the invariant identity exact to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import write_csv
from .errors import FrameError, GridError, RangeError
from .kernel import PhysicalConstants, PinneySolution
from .noise import NoisePath, sample_ensemble

INV_SQRT2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class PlanarState:
    """A point (first, second) at ``time``; (x, y, t) or (X, Y, T) by ``frame``."""

    first: float
    second: float
    time: float
    frame: str = "rescaled"

    def __post_init__(self):
        if not (math.isfinite(self.first) and math.isfinite(self.second)):
            raise ValueError("planar state components must be finite")
        if self.frame not in ("physical", "rescaled"):
            raise FrameError(f"unknown frame {self.frame!r}")


@dataclass(frozen=True)
class LinearInvariants:
    X0: float
    Y0: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States on the grid of the driving noise path."""

    frame: str
    times: np.ndarray
    first: np.ndarray
    second: np.ndarray
    path: NoisePath
    omega_cap: float

    def __len__(self) -> int:
        return self.times.size

    def state(self, k: int) -> PlanarState:
        return PlanarState(float(self.first[k]), float(self.second[k]), float(self.times[k]), self.frame)

    def to_csv(self, path) -> Path:
        """Columns k, time, X, Y, X0_recomputed, Y0_recomputed (rescaled frame)."""
        if self.frame != "rescaled":
            raise FrameError("trajectory export with invariants needs the rescaled frame")
        x0, y0 = invariants_along(self.omega_cap, self.path.grid, self.path.increments,
                                  self.first, self.second)
        k = np.arange(self.times.size)
        return write_csv(path, ["k", "time", "X", "Y", "X0_recomputed", "Y0_recomputed"],
                         [k, self.times, self.first, self.second, x0, y0])


# ---------------------------------------------------------------------------
# array kernels (trailing axis = time; leading axes = independent paths)
# ---------------------------------------------------------------------------

def em_rescaled_arrays(omega_cap: float, grid, dW, X0, Y0):
    """Euler-Maruyama for the rescaled equation; returns X, Y of shape (..., N+1)."""
    grid = np.asarray(grid, dtype=float)
    dW = np.asarray(dW, dtype=float)
    dT = np.diff(grid)
    if dW.shape[-1] != dT.size:
        raise GridError("increments do not match the grid")
    if dW.ndim == 1:
        return _em_rescaled_scalar(float(omega_cap), dT, dW, float(X0), float(Y0))
    shape = dW.shape[:-1]
    X = np.empty(shape + (dT.size + 1,))
    Y = np.empty_like(X)
    x = np.array(np.broadcast_to(X0, shape), dtype=float)
    y = np.array(np.broadcast_to(Y0, shape), dtype=float)
    X[..., 0], Y[..., 0] = x, y
    noise = INV_SQRT2 * dW
    for k, h in enumerate(dT):
        wh = omega_cap * h
        x, y = x - wh * y + noise[..., k], y + wh * x + noise[..., k]
        X[..., k + 1], Y[..., k + 1] = x, y
    return X, Y


def _em_rescaled_scalar(omega, dT, dW, x, y):
    xs, ys = [x], [y]
    for h, w in zip(dT.tolist(), (INV_SQRT2 * dW).tolist()):
        wh = omega * h
        x, y = x - wh * y + w, y + wh * x + w
        xs.append(x)
        ys.append(y)
    return np.array(xs), np.array(ys)


def _ito_integrals(omega_cap, grid, dW):
    """Elapsed time tau and the running sums A, B of dW*(cos +- sin)(Omega tau_j)."""
    tau = np.asarray(grid, dtype=float) - grid[0]
    c, s = np.cos(omega_cap * tau), np.sin(omega_cap * tau)
    lead = np.zeros(np.shape(dW)[:-1] + (1,))
    A = np.concatenate([lead, np.cumsum(dW * (c[:-1] + s[:-1]), axis=-1)], axis=-1)
    B = np.concatenate([lead, np.cumsum(dW * (c[:-1] - s[:-1]), axis=-1)], axis=-1)
    return c, s, A, B


def exact_rescaled_arrays(omega_cap: float, grid, dW, X0, Y0):
    """Closed-form solution at every grid point; times measured from grid[0]."""
    c, s, A, B = _ito_integrals(omega_cap, grid, np.asarray(dW, dtype=float))
    X0 = np.asarray(X0, dtype=float)[..., None]
    Y0 = np.asarray(Y0, dtype=float)[..., None]
    X = X0 * c - Y0 * s + INV_SQRT2 * (c * A - s * B)
    Y = Y0 * c + X0 * s + INV_SQRT2 * (c * B + s * A)
    return X, Y


def invariants_along(omega_cap: float, grid, dW, X, Y):
    """X0, Y0 recomputed at every grid point of a trajectory."""
    c, s, A, B = _ito_integrals(omega_cap, grid, np.asarray(dW, dtype=float))
    return X * c + Y * s - INV_SQRT2 * A, -X * s + Y * c - INV_SQRT2 * B


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _require(obj_frame, want, what):
    if obj_frame != want:
        raise FrameError(f"{what} must be in the {want} frame, got {obj_frame}")


def integrate_em_rescaled(omega_cap: float, path: NoisePath, R0: PlanarState) -> Trajectory:
    """Euler-Maruyama: R_{k+1} = R_k + (Omega x R_k) dT_k + n dW_k."""
    _require(path.frame, "rescaled", "noise path")
    _require(R0.frame, "rescaled", "initial state")
    X, Y = em_rescaled_arrays(omega_cap, path.grid, path.increments, R0.first, R0.second)
    return Trajectory("rescaled", path.grid, X, Y, path, float(omega_cap))


def integrate_em_physical(pinney: PinneySolution, path: NoisePath, r0: PlanarState) -> Trajectory:
    """Euler-Maruyama for the physical-frame equation, rho and rho' at left endpoints."""
    _require(path.frame, "physical", "noise path")
    _require(r0.frame, "physical", "initial state")
    t = path.grid
    if t[0] < pinney.t_start - 1e-12 or t[-1] > pinney.t_end + 1e-12:
        raise RangeError("noise grid extends beyond the Pinney solution")
    rho = np.asarray(pinney.rho(t[:-1]))
    rdot = np.asarray(pinney.rho_dot(t[:-1]))
    rot = (pinney.omega_cap / rho**2 * np.diff(t)).tolist()
    stretch = (rdot / rho * np.diff(t)).tolist()
    noise = (INV_SQRT2 * path.increments).tolist()
    x, y = float(r0.first), float(r0.second)
    xs, ys = [x], [y]
    for a, b, w in zip(rot, stretch, noise):
        x, y = x + (-a * y + b * x) + w, y + (a * x + b * y) + w
        xs.append(x)
        ys.append(y)
    return Trajectory("physical", t, np.array(xs), np.array(ys), path, pinney.omega_cap)


def _grid_index(grid, T) -> int:
    k = int(np.argmin(np.abs(grid - T)))
    if abs(grid[k] - T) > 1e-12 * max(1.0, abs(T)):
        raise GridError("closed-form evaluation only at noise grid points (no interpolation)")
    return k


def exact_solution_rescaled(omega_cap: float, path: NoisePath, X0: float, Y0: float,
                            T: float) -> PlanarState:
    """Closed-form (X, Y) at grid time ``T`` for the given realization."""
    _require(path.frame, "rescaled", "noise path")
    k = _grid_index(path.grid, T)
    X, Y = exact_rescaled_arrays(omega_cap, path.grid[:k + 1], path.increments[:k], X0, Y0)
    return PlanarState(float(X[-1]), float(Y[-1]), float(path.grid[k]), "rescaled")


def exact_trajectory_rescaled(omega_cap: float, path: NoisePath, X0: float, Y0: float) -> Trajectory:
    _require(path.frame, "rescaled", "noise path")
    X, Y = exact_rescaled_arrays(omega_cap, path.grid, path.increments, X0, Y0)
    return Trajectory("rescaled", path.grid, X, Y, path, float(omega_cap))


def compute_invariants(traj: Trajectory, path: NoisePath, k: int) -> LinearInvariants:
    """Recompute (X0, Y0) from the state at step ``k`` and the noise up to it."""
    _require(traj.frame, "rescaled", "trajectory")
    _require(path.frame, "rescaled", "noise path")
    if traj.times.shape != path.grid.shape or not np.array_equal(traj.times, path.grid):
        raise GridError("trajectory and noise path do not share a grid")
    if not 0 <= k < len(traj):
        raise IndexError(f"step index {k} out of range")
    x0, y0 = invariants_along(traj.omega_cap, path.grid[:k + 1], path.increments[:k],
                              traj.first[:k + 1], traj.second[:k + 1])
    return LinearInvariants(float(x0[-1]), float(y0[-1]))


def map_to_rescaled(traj: Trajectory, pinney: PinneySolution) -> Trajectory:
    """(x, y, t) -> (x/rho, y/rho, T(t)) for a physical trajectory."""
    _require(traj.frame, "physical", "trajectory")
    rho = np.asarray(pinney.rho(traj.times))
    T = np.asarray(pinney.warp(traj.times))
    return Trajectory("rescaled", T, traj.first / rho, traj.second / rho, traj.path, traj.omega_cap)


@dataclass(frozen=True)
class ShortTimeMoments:
    """Ensemble diagnostics of one short step dT from (X0, Y0).

    The expansion labels follow X = X0 + eps*alpha1 + eps**2*alpha2 + ...,
    eps = dT**0.5, with eps*alpha1 = eps*beta1 the shared noise term and
    eps**2 alpha2 = -Omega Y0 dT, eps**2 beta2 = Omega X0 dT.
    """

    dT: float
    n_paths: int
    mean_dX: float
    se_dX: float
    mean_dY: float
    se_dY: float
    drift_X: float
    drift_Y: float
    noise_mean: float
    noise_se: float
    noise_var: float
    noise_var_se: float
    noise_var_expected: float
    residual_var_X: float
    residual_var_Y: float
    alpha1_var: float

    @property
    def eps(self) -> float:
        return math.sqrt(self.dT)

    @property
    def alpha2(self) -> float:
        return self.drift_X / self.dT

    @property
    def beta2(self) -> float:
        return self.drift_Y / self.dT


def short_time_moments(omega_cap: float, constants: PhysicalConstants, X0: float, Y0: float,
                       dT: float, M: int, seed: int, n_sub: int = 16, stream_offset: int = 0,
                       threads: int = 1) -> ShortTimeMoments:
    """Monte Carlo moments of X(dT) - X0 and Y(dT) - Y0.

    Each of the ``M`` realizations is a rescaled-frame path on ``n_sub``
    sub-steps of [0, dT], pushed through the closed-form solution.
    """
    if not dT > 0:
        raise ValueError("dT must be > 0")
    if M < 1000:
        raise ValueError("short_time_moments needs M >= 1000")
    grid = np.linspace(0.0, dT, n_sub + 1)
    ens = sample_ensemble(constants, grid, seed, np.arange(stream_offset, stream_offset + M),
                          frame="rescaled", threads=threads)
    X, Y = exact_rescaled_arrays(omega_cap, grid, ens.increments, X0, Y0)
    dX, dY = X[:, -1] - X0, Y[:, -1] - Y0
    noise = INV_SQRT2 * ens.increments.sum(axis=1)
    c, s = math.cos(omega_cap * dT), math.sin(omega_cap * dT)
    det_X = X0 * (c - 1.0) - Y0 * s
    det_Y = Y0 * (c - 1.0) + X0 * s
    nvar = float(np.var(noise, ddof=1))
    return ShortTimeMoments(
        dT=float(dT), n_paths=int(M),
        mean_dX=float(dX.mean()), se_dX=float(dX.std(ddof=1) / math.sqrt(M)),
        mean_dY=float(dY.mean()), se_dY=float(dY.std(ddof=1) / math.sqrt(M)),
        drift_X=-omega_cap * Y0 * dT, drift_Y=omega_cap * X0 * dT,
        noise_mean=float(noise.mean()), noise_se=float(noise.std(ddof=1) / math.sqrt(M)),
        noise_var=nvar, noise_var_se=nvar * math.sqrt(2.0 / (M - 1)),
        noise_var_expected=constants.hbar * dT / 2.0,
        residual_var_X=float(np.var(dX - det_X, ddof=1)),
        residual_var_Y=float(np.var(dY - det_Y, ddof=1)),
        alpha1_var=nvar / dT,
    )
