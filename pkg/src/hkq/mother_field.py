"""Holomorphic mother fields, their stochastic push-forward and averaged evolution.

A mother field U = (U1, U2) is stored as a complex polynomial g(Z), Z = X + iY,
with U1 = Re g and U2 = Im g, so the Cauchy-Riemann conditions hold by
construction.  On such fields the averaged evolution operator

    H = (Omega x R) . grad + (hbar / 2) (n . grad)**2

acts as  dg/dT = i Omega Z g'(Z) + (i hbar / 2) g''(Z),  because
(Omega x R).grad = Omega (X d_Y - Y d_X) sends g to i Omega Z g' and
(n.grad)**2 = (d_X + d_Y)**2 / 2 sends g to i g''.  The operator keeps the
degree, so polynomial fields evolve by a finite matrix exponential.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from ._io import atomic_write_text, write_csv
from .dynamics import PlanarState, em_rescaled_arrays, exact_rescaled_arrays
from .errors import GridError, SolverError
from .kernel import PhysicalConstants
from .noise import sample_ensemble

_EPS = np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class HolomorphicField:
    """g(Z) = sum_m coeffs[m] Z**m."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coeffs, dtype=complex))
        if c.ndim != 1 or c.size == 0:
            raise ValueError("coefficients must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def monomial(cls, m: int, scale: complex = 1.0) -> "HolomorphicField":
        c = np.zeros(m + 1, dtype=complex)
        c[m] = scale
        return cls(c)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    def __call__(self, Z):
        """Horner evaluation at complex Z."""
        Z = np.asarray(Z, dtype=complex)
        acc = np.full(Z.shape, self.coeffs[-1], dtype=complex)
        for c in self.coeffs[-2::-1]:
            acc = acc * Z + c
        return acc if acc.ndim else complex(acc)

    def values(self, X, Y):
        """(U1, U2) at real coordinates."""
        g = np.asarray(self(np.asarray(X) + 1j * np.asarray(Y)))
        return g.real, g.imag

    def derivative(self, order: int = 1) -> "HolomorphicField":
        c = self.coeffs
        for _ in range(order):
            if c.size == 1:
                c = np.zeros(1, dtype=complex)
            else:
                c = c[1:] * np.arange(1, c.size)
        return HolomorphicField(c)

    def padded(self, degree: int) -> np.ndarray:
        out = np.zeros(max(degree, self.degree) + 1, dtype=complex)
        out[: self.coeffs.size] = self.coeffs
        return out

    def to_json(self) -> str:
        return json.dumps([[float(c.real), float(c.imag)] for c in self.coeffs])

    @classmethod
    def from_json(cls, text) -> "HolomorphicField":
        data = json.loads(text) if isinstance(text, str) else text
        return cls(np.array([complex(re, im) for re, im in data]))

    def save(self, path) -> Path:
        return atomic_write_text(path, self.to_json() + "\n")


def evaluate_field(field: HolomorphicField, R: PlanarState):
    """(U1, U2) of the field at the point R."""
    g = field(complex(R.first, R.second))
    return g.real, g.imag


def generator(field: HolomorphicField, omega_cap: float, constants: PhysicalConstants) -> HolomorphicField:
    """i Omega Z g' + (i hbar / 2) g'', built from derivatives (no matrix)."""
    d1 = field.derivative(1).coeffs
    d2 = field.derivative(2).coeffs
    out = np.zeros(field.coeffs.size, dtype=complex)
    out[1:1 + d1.size] += 1j * omega_cap * d1[: field.coeffs.size - 1]
    out[: d2.size] += 0.5j * constants.hbar * d2
    return HolomorphicField(out)


def evolution_matrix(degree: int, omega_cap: float, hbar: float) -> np.ndarray:
    """Matrix of the operator on coefficient vectors of length degree + 1.

    dc_m/dT = i Omega m c_m + (i hbar / 2) (m + 2)(m + 1) c_{m+2}
    """
    n = degree + 1
    A = np.zeros((n, n), dtype=complex)
    m = np.arange(n)
    A[m, m] = 1j * omega_cap * m
    k = np.arange(n - 2)
    A[k, k + 2] = 0.5j * hbar * (k + 2) * (k + 1)
    return A


def evolve_pde_polynomial(field: HolomorphicField, omega_cap: float,
                          constants: PhysicalConstants, T: float) -> HolomorphicField:
    """Averaged field at time T, exact for polynomial initial data."""
    A = evolution_matrix(field.degree, omega_cap, constants.hbar)
    return HolomorphicField(expm(A * T) @ field.coeffs)


# ---------------------------------------------------------------------------
# Monte Carlo push-forward
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AveragedField:
    """Ensemble means of U at base points (X, Y) after time T."""

    X: np.ndarray
    Y: np.ndarray
    U1_mean: np.ndarray
    U1_se: np.ndarray
    U2_mean: np.ndarray
    U2_se: np.ndarray
    T: float
    M: int
    n_steps: np.ndarray

    def to_csv(self, path) -> Path:
        return write_csv(path, ["X", "Y", "U1_mean", "U1_se", "U2_mean", "U2_se"],
                         [a.ravel() for a in (self.X, self.Y, self.U1_mean, self.U1_se,
                                              self.U2_mean, self.U2_se)])


def _stream_id(point: int, path: int) -> int:
    return (point << 32) | path


def _pushforward_point(field, omega_cap, constants, T, x0, y0, M, seed, point, n_steps,
                       adaptive, max_steps):
    streams = np.array([_stream_id(point, j) for j in range(M)], dtype=np.uint64)
    n = n_steps if adaptive else n_steps // 2
    while True:
        grid = np.linspace(0.0, T, 2 * n + 1)
        ens = sample_ensemble(constants, grid, seed, streams, frame="rescaled")
        Xf, Yf = em_rescaled_arrays(omega_cap, grid, ens.increments, x0, y0)
        gf = np.asarray(field(Xf[:, -1] + 1j * Yf[:, -1]))
        se = np.array([gf.real.std(ddof=1), gf.imag.std(ddof=1)]) / math.sqrt(M)
        if not adaptive:
            return gf, se, 2 * n
        coarse = ens.increments.reshape(M, n, 2).sum(axis=2)
        Xc, Yc = em_rescaled_arrays(omega_cap, grid[::2], coarse, x0, y0)
        gc = np.asarray(field(Xc[:, -1] + 1j * Yc[:, -1]))
        change = np.abs([gf.real.mean() - gc.real.mean(), gf.imag.mean() - gc.imag.mean()])
        if np.all(change <= 0.25 * se) or 2 * n >= max_steps:
            return gf, se, 2 * n
        n *= 2


def pushforward_mc(field: HolomorphicField, omega_cap: float, constants: PhysicalConstants,
                   T: float, X, Y, M: int, seed: int, n_steps: int = 64, adaptive: bool = True,
                   max_steps: int = 4096, threads: int = 1) -> AveragedField:
    """Average U(R(T)) over ``M`` realizations started at every base point.

    Trajectories use Euler-Maruyama with T/n_steps as the initial step (the
    only step when ``adaptive`` is false; ``n_steps`` must then be even).  With
    ``adaptive`` the step is halved until halving moves both ensemble means
    by less than a quarter of their standard error; the realizations of base
    point p use streams (p << 32) | j, independent across points.
    """
    if not T > 0:
        raise ValueError("T must be > 0")
    if M < 100:
        raise ValueError("pushforward_mc needs M >= 100")
    if n_steps < 2 or (not adaptive and n_steps % 2):
        raise ValueError("n_steps must be >= 2 (and even without adaptive refinement)")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape:
        raise ValueError("X and Y must have the same shape")
    xs, ys = X.ravel(), Y.ravel()

    def work(p):
        g, se, n = _pushforward_point(field, omega_cap, constants, T, xs[p], ys[p], M, seed, p,
                                      n_steps, adaptive, max_steps)
        return g.real.mean(), se[0], g.imag.mean(), se[1], n

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(work, range(xs.size)))
    else:
        rows = [work(p) for p in range(xs.size)]
    cols = np.array(rows, dtype=float).T.reshape((5,) + X.shape)
    return AveragedField(X, Y, cols[0], cols[1], cols[2], cols[3], float(T), int(M),
                         cols[4].astype(int))


# ---------------------------------------------------------------------------
# grid evolution of the component equations
# ---------------------------------------------------------------------------

def _dx(u, h):
    d = np.empty_like(u)
    d[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * h)
    d[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * h)
    d[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * h)
    return d


def _dxx(u, h):
    d = np.empty_like(u)
    d[..., 1:-1] = (u[..., 2:] - 2 * u[..., 1:-1] + u[..., :-2]) / h**2
    d[..., 0] = (2 * u[..., 0] - 5 * u[..., 1] + 4 * u[..., 2] - u[..., 3]) / h**2
    d[..., -1] = (2 * u[..., -1] - 5 * u[..., -2] + 4 * u[..., -3] - u[..., -4]) / h**2
    return d


GRID_PADDING = 3


def evolve_pde_grid(U1, U2, X, Y, omega_cap: float, constants: PhysicalConstants,
                    T: float, step: float | None = None):
    """Evolve sampled (U1, U2) by the component form of the averaged equation.

        dU1/dT = -Omega (X dU2/dX + Y dU1/dX) - (hbar/2) d2U2/dX2
        dU2/dT =  Omega (X dU1/dX - Y dU2/dX) + (hbar/2) d2U1/dX2

    Only X-derivatives appear, so every row of constant Y evolves on its own.
    Second-order differences (one-sided at the two ends of each row) and
    classical RK4 in time.  Probe points should sit at least GRID_PADDING
    cells away from the X edges.  The one-sided stencils are exact for
    quadratic data, so for degree <= 2 fields every row is exact up to
    time-stepping error.  For higher degree the edge closure feeds an O(1)
    error inward that does not shrink with h: the term i Omega X dU/dX is a
    transport with imaginary speed, so the real-line problem is not
    hyperbolic and the data on a finite segment do not determine the
    solution.  Use evolve_pde_polynomial for anything beyond degree 2.

    ``X`` and ``Y`` are meshgrid arrays of shape (ny, nx) with X varying along
    the last axis.  Raises SolverError when ``step`` violates the RK4
    stability bound.
    """
    U1 = np.array(U1, dtype=float)
    U2 = np.array(U2, dtype=float)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if not (U1.shape == U2.shape == X.shape == Y.shape) or X.ndim != 2:
        raise GridError("U1, U2, X, Y must share one 2-D (ny, nx) shape")
    if X.shape[1] < 4:
        raise GridError("need at least 4 points along X")
    hx = np.diff(X[0])
    if not np.allclose(hx, hx[0], rtol=1e-9):
        raise GridError("X spacing must be uniform")
    h = float(hx[0])
    hbar = constants.hbar
    rate = 2.0 * hbar / h**2 + abs(omega_cap) * float(np.max(np.abs(X) + np.abs(Y))) / h
    limit = 2.5 / rate if rate > 0 else math.inf
    if step is None:
        n = max(1, int(math.ceil(T / (0.5 * limit)))) if math.isfinite(limit) else 1
    else:
        if step > limit:
            raise SolverError(f"CFL violation: step {step:g} exceeds stability limit {limit:g} "
                              f"(h={h:g}, hbar={hbar:g})")
        n = max(1, int(math.ceil(T / step - 1e-9)))
    dt = T / n

    def rhs(u1, u2):
        d1u1, d1u2 = _dx(u1, h), _dx(u2, h)
        return (-omega_cap * (X * d1u2 + Y * d1u1) - 0.5 * hbar * _dxx(u2, h),
                omega_cap * (X * d1u1 - Y * d1u2) + 0.5 * hbar * _dxx(u1, h))

    for _ in range(n):
        k1 = rhs(U1, U2)
        k2 = rhs(U1 + 0.5 * dt * k1[0], U2 + 0.5 * dt * k1[1])
        k3 = rhs(U1 + 0.5 * dt * k2[0], U2 + 0.5 * dt * k2[1])
        k4 = rhs(U1 + dt * k3[0], U2 + dt * k3[1])
        U1 = U1 + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        U2 = U2 + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return U1, U2


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HarmonicityReport:
    """5-point Laplacians of both components at interior points.

    ``error_*`` is the one-sigma budget: Monte Carlo error propagated through
    the stencil, plus a truncation estimate from fourth differences, plus a
    rounding floor.  ``within`` compares |residual| with ``n_sigma`` times it.
    """

    X: np.ndarray
    Y: np.ndarray
    residual_U1: np.ndarray
    residual_U2: np.ndarray
    error_U1: np.ndarray
    error_U2: np.ndarray
    n_sigma: float

    @property
    def within(self) -> np.ndarray:
        return ((np.abs(self.residual_U1) <= self.n_sigma * self.error_U1)
                & (np.abs(self.residual_U2) <= self.n_sigma * self.error_U2))

    @property
    def worst_ratio(self) -> float:
        r1 = np.abs(self.residual_U1) / np.maximum(self.error_U1, 1e-300)
        r2 = np.abs(self.residual_U2) / np.maximum(self.error_U2, 1e-300)
        return float(max(r1.max(), r2.max()))


def _fourth_diff(u, h, axis):
    """|d4u| estimated with the 5-point stencil, clamped to the nearest valid position."""
    n = u.shape[axis]
    if n < 5:
        return np.zeros_like(u)
    u = np.moveaxis(u, axis, -1)
    d = (u[..., :-4] - 4 * u[..., 1:-3] + 6 * u[..., 2:-2] - 4 * u[..., 3:-1] + u[..., 4:]) / h**4
    idx = np.clip(np.arange(n) - 2, 0, n - 5)
    return np.moveaxis(np.abs(d[..., idx]), -1, axis)


def _laplacian_budget(u, se, hx, hy):
    lap = ((u[1:-1, 2:] - 2 * u[1:-1, 1:-1] + u[1:-1, :-2]) / hx**2
           + (u[2:, 1:-1] - 2 * u[1:-1, 1:-1] + u[:-2, 1:-1]) / hy**2)
    var = ((se[1:-1, 2:] ** 2 + se[1:-1, :-2] ** 2) / hx**4
           + (se[2:, 1:-1] ** 2 + se[:-2, 1:-1] ** 2) / hy**4
           + se[1:-1, 1:-1] ** 2 * (2 / hx**2 + 2 / hy**2) ** 2)
    stencil = (hx**2 / 12 * _fourth_diff(u, hx, 1) + hy**2 / 12 * _fourth_diff(u, hy, 0))[1:-1, 1:-1]
    rounding = 16 * _EPS * max(float(np.max(np.abs(u))), 1.0) * (1 / hx**2 + 1 / hy**2)
    return lap, np.sqrt(var) + stencil + rounding


def harmonicity_residual(avg: AveragedField, n_sigma: float = 4.0) -> HarmonicityReport:
    """Discrete Laplacian of the averaged components on the grid interior."""
    X, Y = avg.X, avg.Y
    if X.ndim != 2 or min(X.shape) < 3:
        raise GridError("harmonicity check needs a 2-D grid with at least 3x3 points")
    hx, hy = np.diff(X[0]), np.diff(Y[:, 0])
    if not (np.allclose(hx, hx[0], rtol=1e-9) and np.allclose(hy, hy[0], rtol=1e-9)):
        raise GridError("harmonicity check needs uniform spacing")
    hx, hy = float(hx[0]), float(hy[0])
    r1, e1 = _laplacian_budget(avg.U1_mean, avg.U1_se, hx, hy)
    r2, e2 = _laplacian_budget(avg.U2_mean, avg.U2_se, hx, hy)
    return HarmonicityReport(X[1:-1, 1:-1], Y[1:-1, 1:-1], r1, r2, e1, e2, n_sigma)


def sampled_field(field: HolomorphicField, X, Y, T: float = 0.0) -> AveragedField:
    """Exact samples of a field wrapped as an AveragedField with zero errors."""
    U1, U2 = field.values(X, Y)
    zero = np.zeros_like(U1)
    return AveragedField(np.asarray(X, float), np.asarray(Y, float), U1, zero, U2, zero.copy(),
                         float(T), 0, np.zeros(U1.shape, dtype=int))


@dataclass(frozen=True, eq=False)
class ShortTimeFieldReport:
    """Measured vs generator-predicted change of the averaged field after dT.

    ``measured`` is <g(R(dT))> - g(R) (complex), ``predicted`` is
    dT * (H g)(R), ``tolerance`` is 4 standard errors plus a second-order
    remainder bound dT**2 |H H g|.
    """

    dT: float
    Z: np.ndarray
    measured: np.ndarray
    se: np.ndarray
    predicted: np.ndarray
    tolerance: np.ndarray

    @property
    def passed(self) -> np.ndarray:
        return np.abs(self.measured - self.predicted) <= self.tolerance


def short_time_field_check(field: HolomorphicField, omega_cap: float, constants: PhysicalConstants,
                           dT: float, M: int, seed: int, points=None, n_sub: int = 16,
                           n_sigma: float = 4.0) -> ShortTimeFieldReport:
    """Check the averaged short-time expansion of U against the generator.

    Realizations are propagated with the closed-form solution over ``n_sub``
    sub-steps, so the comparison carries no integrator bias.  ``points`` is
    a sequence of complex base points (default: 0.5 + 0.5i and -0.7 + 0.2i).
    """
    if not dT > 0 or abs(omega_cap) * dT >= 0.1:
        raise ValueError("short-time check needs 0 < Omega*dT < 0.1")
    Z = np.atleast_1d(np.asarray([0.5 + 0.5j, -0.7 + 0.2j] if points is None else points,
                                 dtype=complex))
    grid = np.linspace(0.0, dT, n_sub + 1)
    Lg = generator(field, omega_cap, constants)
    LLg = generator(Lg, omega_cap, constants)
    measured, se = [], []
    for p, z in enumerate(Z):
        ens = sample_ensemble(constants, grid, seed, [_stream_id(p, j) for j in range(M)],
                              frame="rescaled")
        Xe, Ye = exact_rescaled_arrays(omega_cap, grid, ens.increments, z.real, z.imag)
        g = np.asarray(field(Xe[:, -1] + 1j * Ye[:, -1]))
        measured.append(g.mean() - field(z))
        se.append(math.hypot(g.real.std(ddof=1), g.imag.std(ddof=1)) / math.sqrt(M))
    se = np.array(se)
    pred = dT * np.asarray(Lg(Z))
    tol = n_sigma * se + dT**2 * np.abs(np.asarray(LLg(Z)))
    return ShortTimeFieldReport(float(dT), Z, np.array(measured), se, pred, tol)
