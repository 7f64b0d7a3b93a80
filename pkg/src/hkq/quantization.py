"""Wave functions in the rescaled and physical frames.

The complex field psi_bar(X, T) = exp(-Omega X**2 / (2 hbar) - i Omega T / 2) g(X)
built from a mother field on the Y = 0 line is treated as a solution of the
time-independent oscillator with frequency Omega (unit mass),

    i hbar d_T psi_bar = -(hbar**2 / 2) d_XX psi_bar + (Omega**2 X**2 / 2) psi_bar,

and mapped back to the time-dependent oscillator by

    psi(x, t) = rho**(-1/2) exp(i rho_dot x**2 / (2 hbar rho)) psi_bar(x / rho, T(t)).

Physical-frame grids move with rho (x = rho X), which keeps the transform
exact pointwise; residual checks interpolate onto one fixed grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.interpolate import make_interp_spline
from scipy.linalg import eig_banded
from scipy.sparse.linalg import splu

from ._io import write_csv, write_json
from .errors import AccuracyWarning, FrameError, GridError
from .kernel import FrequencyProfile, PhysicalConstants, PinneySolution, warp_time
from .mother_field import HolomorphicField, evolve_pde_polynomial

BOUNDARY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class WaveFunction:
    """Complex amplitudes on the uniform grid linspace(x_min, x_max, n)."""

    frame: str
    x_min: float
    x_max: float
    n: int
    psi: np.ndarray
    time: float
    constants: PhysicalConstants
    omega_cap: float | None = None

    def __post_init__(self):
        if self.frame not in ("rescaled", "physical"):
            raise FrameError(f"unknown frame {self.frame!r}")
        psi = np.asarray(self.psi, dtype=complex)
        if psi.shape != (self.n,):
            raise GridError(f"psi has shape {psi.shape}, expected ({self.n},)")
        if self.n < 16:
            raise GridError("grid count must be >= 16")
        if not self.x_max > self.x_min:
            raise GridError("x_max must exceed x_min")
        if not np.all(np.isfinite(psi)):
            raise ValueError("amplitudes must be finite")
        object.__setattr__(self, "psi", psi)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def norm(self) -> float:
        """Trapezoid L2 norm."""
        return math.sqrt(trapezoid(np.abs(self.psi) ** 2, dx=self.dx))

    def moment(self, power: int) -> float:
        w = np.abs(self.psi) ** 2
        return float(trapezoid(w * self.grid**power, dx=self.dx) / trapezoid(w, dx=self.dx))

    def overlap(self, other: "WaveFunction") -> complex:
        """<self|other> on a shared grid."""
        if (self.n, self.x_min, self.x_max) != (other.n, other.x_min, other.x_max):
            raise GridError("overlap needs identical grids")
        return complex(trapezoid(np.conj(self.psi) * other.psi, dx=self.dx))

    def replace(self, psi, time: float | None = None) -> "WaveFunction":
        return WaveFunction(self.frame, self.x_min, self.x_max, self.n, psi,
                            self.time if time is None else time, self.constants, self.omega_cap)

    def metadata(self) -> dict:
        return {"frame": self.frame, "time": self.time, "hbar": self.constants.hbar,
                "omega_cap": self.omega_cap,
                "grid": {"min": self.x_min, "max": self.x_max, "count": self.n},
                "norm": self.norm}

    def to_csv(self, path) -> Path:
        col = "X" if self.frame == "rescaled" else "x"
        return write_csv(path, [col, "re_psi", "im_psi", "abs2"],
                         [self.grid, self.psi.real, self.psi.imag, np.abs(self.psi) ** 2])

    def save(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and ``<stem>.json``."""
        stem = Path(stem)
        return (self.to_csv(stem.with_suffix(".csv")),
                write_json(stem.with_suffix(".json"), self.metadata()))


@dataclass(frozen=True, eq=False)
class SpectralResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    grid: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_json(self, path) -> Path:
        return write_json(path, {"eigenvalues": [float(e) for e in self.eigenvalues],
                                 **self.metadata})


def _need_hbar(constants):
    if not constants.hbar > 0:
        raise ValueError("quantization needs hbar > 0")


def build_psi_bar(U1_line, U2_line, X, omega_cap: float, constants: PhysicalConstants,
                  T: float) -> WaveFunction:
    """psi_bar = exp(-Omega X**2/(2 hbar) - i Omega T/2) (U1 + i U2) on the X grid."""
    _need_hbar(constants)
    X = np.asarray(X, dtype=float)
    U1 = np.asarray(U1_line, dtype=float)
    U2 = np.asarray(U2_line, dtype=float)
    if not (U1.shape == U2.shape == X.shape) or X.ndim != 1:
        raise GridError("U1, U2 and X must be 1-D arrays of equal length")
    dX = np.diff(X)
    if not np.allclose(dX, dX[0], rtol=1e-9, atol=0):
        raise GridError("X grid must be uniform")
    psi = np.exp(-omega_cap * X**2 / (2 * constants.hbar) - 0.5j * omega_cap * T) * (U1 + 1j * U2)
    return WaveFunction("rescaled", float(X[0]), float(X[-1]), X.size, psi, float(T),
                        constants, omega_cap)


def psi_bar_from_field(field: HolomorphicField, omega_cap: float, constants: PhysicalConstants,
                       T: float, X) -> WaveFunction:
    """Evolve the mother field to T and build psi_bar from its Y = 0 line."""
    g = evolve_pde_polynomial(field, omega_cap, constants, T) if T != 0 else field
    U1, U2 = g.values(np.asarray(X, float), np.zeros_like(np.asarray(X, float)))
    return build_psi_bar(U1, U2, X, omega_cap, constants, T)


# ---------------------------------------------------------------------------
# time-independent oscillator
# ---------------------------------------------------------------------------

def _hamiltonian(X, omega_cap, hbar):
    """Interior 3-point Hamiltonian with zero Dirichlet values at both edges."""
    h = X[1] - X[0]
    Xi = X[1:-1]
    off = np.full(Xi.size - 1, -0.5 * hbar**2 / h**2)
    diag = hbar**2 / h**2 + 0.5 * omega_cap**2 * Xi**2
    return sp.diags([off, diag, off], [-1, 0, 1], format="csc")


def _check_boundary(psi: WaveFunction, tol: float):
    scale = float(np.max(np.abs(psi.psi)))
    edge = max(abs(psi.psi[0]), abs(psi.psi[-1]))
    if scale > 0 and edge > tol * scale:
        raise GridError(f"boundary amplitude {edge / scale:.3g} (relative) exceeds {tol:g}; "
                        "widen the grid")


class CrankNicolson:
    """Reusable Crank-Nicolson stepper for a fixed grid and step."""

    def __init__(self, X, omega_cap: float, hbar: float, step: float, imaginary: bool = False):
        H = _hamiltonian(np.asarray(X, float), omega_cap, hbar)
        eye = sp.identity(H.shape[0], format="csc")
        a = (0.5 * step / hbar) * (1.0 if imaginary else 1j)
        self._lu = splu((eye + a * H).astype(complex).tocsc())
        self._rhs = (eye - a * H).astype(complex).tocsr()
        self.H = H

    def step(self, inner: np.ndarray) -> np.ndarray:
        return self._lu.solve(self._rhs @ inner)


def propagate_schrodinger_ti(psi0: WaveFunction, omega_cap: float, T_span, step: float,
                             boundary_tol: float = BOUNDARY_TOL) -> WaveFunction:
    """Crank-Nicolson propagation of the time-independent oscillator.

    ``T_span`` is a duration or a pair (T0, T1); the step is shrunk so an
    integer number of steps fits.  Edge values are pinned to zero, and the
    initial edge amplitude must be below ``boundary_tol`` times max|psi0|.
    """
    if psi0.frame != "rescaled":
        raise FrameError("propagation works in the rescaled frame")
    _need_hbar(psi0.constants)
    T0, T1 = (psi0.time, psi0.time + float(T_span)) if np.ndim(T_span) == 0 else map(float, T_span)
    if not step > 0:
        raise ValueError("step must be > 0")
    _check_boundary(psi0, boundary_tol)
    span = T1 - T0
    if span == 0:
        return psi0.replace(psi0.psi.copy(), T1)
    n = max(1, int(math.ceil(abs(span) / step - 1e-9)))
    cn = CrankNicolson(psi0.grid, omega_cap, psi0.constants.hbar, span / n)
    inner = psi0.psi[1:-1].copy()
    for _ in range(n):
        inner = cn.step(inner)
    out = np.zeros(psi0.n, dtype=complex)
    out[1:-1] = inner
    return psi0.replace(out, T1)


def ground_state_imaginary_time(omega_cap: float, constants: PhysicalConstants, x_min: float,
                                x_max: float, n: int, step: float = 0.05, tol: float = 1e-13,
                                max_steps: int = 100000) -> tuple[WaveFunction, float]:
    """Ground state by imaginary-time Crank-Nicolson relaxation.

    Returns the normalized state and its Rayleigh-quotient energy; stops once
    the energy changes by less than ``tol`` between steps.
    """
    _need_hbar(constants)
    X = np.linspace(x_min, x_max, n)
    h = X[1] - X[0]
    cn = CrankNicolson(X, omega_cap, constants.hbar, step, imaginary=True)
    v = np.exp(-0.25 * X[1:-1] ** 2).astype(complex)
    E_prev = math.inf
    for _ in range(max_steps):
        v = cn.step(v)
        v /= math.sqrt(h * np.vdot(v, v).real)
        E = (h * np.vdot(v, cn.H @ v)).real
        if abs(E - E_prev) < tol:
            break
        E_prev = E
    psi = np.zeros(n, dtype=complex)
    psi[1:-1] = v
    return WaveFunction("rescaled", x_min, x_max, n, psi, 0.0, constants, omega_cap), float(E)


_STENCILS = {2: np.array([-2.0, 1.0]), 4: np.array([-30.0, 16.0, -1.0]) / 12.0}


def eigensolve_ti(omega_cap: float, constants: PhysicalConstants, x_min: float, x_max: float,
                  n: int, n_levels: int = 6, order: int = 4) -> SpectralResult:
    """Lowest eigenpairs of the discretized time-independent oscillator.

    ``n`` counts grid points including the two edges, where the wave function
    is pinned to zero.  ``order`` selects the 3-point (2) or 5-point (4)
    Laplacian; both give E_n -> hbar Omega (n + 1/2) under refinement, at
    rates h**2 and h**4.  Warns with an AccuracyWarning when
    Omega * X_max**2 / (2 hbar) < 20.
    """
    _need_hbar(constants)
    if order not in _STENCILS:
        raise ValueError("order must be 2 or 4")
    hbar = constants.hbar
    reach = min(abs(x_min), abs(x_max))
    width = omega_cap * reach**2 / (2 * hbar)
    if width < 20:
        warnings.warn(f"grid too narrow (Omega X_max^2 / 2 hbar = {width:.3g} < 20); "
                      f"estimated truncation error ~{math.exp(-2 * width):.1e} relative",
                      AccuracyWarning, stacklevel=2)
    X = np.linspace(x_min, x_max, n)
    h = X[1] - X[0]
    Xi = X[1:-1]
    c = _STENCILS[order]
    bands = np.zeros((c.size, Xi.size))
    bands[0] = -0.5 * hbar**2 * c[0] / h**2 + 0.5 * omega_cap**2 * Xi**2
    for k in range(1, c.size):
        bands[k, :-k] = -0.5 * hbar**2 * c[k] / h**2
    vals, vecs = eig_banded(bands, lower=True, select="i", select_range=(0, n_levels - 1))
    full = np.zeros((n_levels, n))
    full[:, 1:-1] = vecs.T
    full /= np.sqrt(trapezoid(full**2, dx=h, axis=1))[:, None]
    # fix sign so every eigenvector starts positive on the left
    lead = np.array([row[np.argmax(np.abs(row) > 1e-3 * np.abs(row).max())] for row in full])
    full *= np.sign(lead)[:, None]
    meta = {"omega_cap": omega_cap, "hbar": hbar, "grid": {"min": x_min, "max": x_max, "count": n},
            "order": order, "boundary": "dirichlet"}
    return SpectralResult(vals, full, X, meta)


# ---------------------------------------------------------------------------
# physical frame
# ---------------------------------------------------------------------------

def transform_to_physical(psi_bar: WaveFunction, pinney: PinneySolution, t: float,
                          time_tol: float = 1e-9) -> WaveFunction:
    """psi(x, t) = rho**(-1/2) exp(i rho_dot x**2 / (2 hbar rho)) psi_bar(x / rho, T(t)).

    The returned grid is rho(t) times the rescaled grid.  rho_dot comes from
    the Pinney dense output.
    """
    if psi_bar.frame != "rescaled":
        raise FrameError("transform_to_physical expects a rescaled wave function")
    _need_hbar(psi_bar.constants)
    T = float(warp_time(pinney.warp, t))
    if abs(psi_bar.time - T) > time_tol * max(1.0, abs(T)):
        raise ValueError(f"psi_bar time stamp {psi_bar.time!r} does not match T(t) = {T!r}")
    rho, rho_dot = float(pinney.rho(t)), float(pinney.rho_dot(t))
    x = rho * psi_bar.grid
    psi = rho**-0.5 * np.exp(1j * rho_dot * x**2 / (2 * psi_bar.constants.hbar * rho)) * psi_bar.psi
    return WaveFunction("physical", rho * psi_bar.x_min, rho * psi_bar.x_max, psi_bar.n, psi,
                        float(t), psi_bar.constants, psi_bar.omega_cap)


@dataclass(frozen=True, eq=False)
class PipelineResult:
    times: np.ndarray
    psi_bar: list
    psi: list
    pinney: PinneySolution

    def moments(self, power: int) -> np.ndarray:
        return np.array([w.moment(power) for w in self.psi])


def run_pipeline(pinney: PinneySolution, constants: PhysicalConstants, times, X_max: float, n: int,
                 field: HolomorphicField | None = None, cn_substeps: int = 1) -> PipelineResult:
    """Mother field -> psi_bar -> psi at every requested physical time.

    psi_bar is built from ``field`` (default g = 1) on the Y = 0 line at the
    rescaled time of ``times[0]`` and then carried between successive
    rescaled times by Crank-Nicolson with ``cn_substeps`` steps per interval.
    """
    times = np.asarray(times, dtype=float)
    field = HolomorphicField([1.0]) if field is None else field
    omega_cap = pinney.omega_cap
    X = np.linspace(-X_max, X_max, n)
    T = np.atleast_1d(warp_time(pinney.warp, times))
    current = psi_bar_from_field(field, omega_cap, constants, float(T[0]), X)
    _check_boundary(current, BOUNDARY_TOL)
    bars = [current]
    inner = current.psi[1:-1].copy()
    for k in range(1, times.size):
        dT = (T[k] - T[k - 1]) / cn_substeps
        cn = CrankNicolson(X, omega_cap, constants.hbar, dT)
        for _ in range(cn_substeps):
            inner = cn.step(inner)
        psi = np.zeros(n, dtype=complex)
        psi[1:-1] = inner
        bars.append(current.replace(psi, float(T[k])))
    phys = [transform_to_physical(b, pinney, t) for b, t in zip(bars, times)]
    return PipelineResult(times, bars, phys, pinney)


@dataclass(frozen=True, eq=False)
class ResidualReport:
    """Discrete TDHO residual on a fixed x-grid.

    ``norm`` is the root-mean-square over interior time levels of the
    trapezoid L2(dx) norm of the residual, divided by the RMS L2 norm of psi.
    """

    x: np.ndarray
    times: np.ndarray
    per_time: np.ndarray
    norm: float
    dt: float
    dx: float


def common_grid(series) -> np.ndarray:
    """The intersection of the moving grids, sampled with the finest series count."""
    lo = max(w.x_min for w in series)
    hi = min(w.x_max for w in series)
    if not hi > lo:
        raise GridError("moving grids do not overlap")
    return np.linspace(lo, hi, max(w.n for w in series))


def tdho_residual(series, profile: FrequencyProfile, x=None) -> ResidualReport:
    """Residual of i hbar psi_t + (hbar**2/2) psi_xx - (omega**2(t) x**2 / 2) psi.

    Each physical-frame wave function is carried onto one fixed grid (default
    :func:`common_grid`) by quintic spline interpolation of its complex
    values; derivatives are second-order central differences in t and x.
    """
    series = list(series)
    if len(series) < 3:
        raise GridError("need at least 3 time levels")
    if any(w.frame != "physical" for w in series):
        raise FrameError("tdho_residual expects physical-frame wave functions")
    times = np.array([w.time for w in series])
    dts = np.diff(times)
    if not np.all(dts > 0) or not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise GridError("time levels must be uniformly spaced")
    hbar = series[0].constants.hbar
    x = common_grid(series) if x is None else np.asarray(x, dtype=float)
    dxs = np.diff(x)
    if not np.allclose(dxs, dxs[0], rtol=1e-9, atol=0):
        raise GridError("residual grid must be uniform")
    for w in series:
        if x[0] < w.x_min - 1e-12 * abs(w.x_min) or x[-1] > w.x_max + 1e-12 * abs(w.x_max):
            raise GridError("residual grid leaves a wave function's support grid")
    psi = np.array([make_interp_spline(w.grid, w.psi, k=5)(x) for w in series])
    dt, dx = float(dts[0]), float(dxs[0])
    c = psi[1:-1, 1:-1]
    psi_t = (psi[2:, 1:-1] - psi[:-2, 1:-1]) / (2 * dt)
    psi_xx = (psi[1:-1, 2:] - 2 * c + psi[1:-1, :-2]) / dx**2
    w2 = np.asarray(profile.omega2(times[1:-1]))[:, None]
    r = 1j * hbar * psi_t + 0.5 * hbar**2 * psi_xx - 0.5 * w2 * x[1:-1] ** 2 * c
    per_time = np.sqrt(trapezoid(np.abs(r) ** 2, dx=dx, axis=1))
    scale = math.sqrt(np.mean(trapezoid(np.abs(c) ** 2, dx=dx, axis=1)))
    norm = math.sqrt(np.mean(per_time**2)) / scale
    return ResidualReport(x[1:-1], times[1:-1], per_time, norm, dt, dx)


@dataclass(frozen=True, eq=False)
class ConvergenceTable:
    dt: np.ndarray
    dx: np.ndarray
    residual: np.ndarray

    @property
    def slopes(self) -> np.ndarray:
        return np.log(self.residual[:-1] / self.residual[1:]) / np.log(self.dt[:-1] / self.dt[1:])

    @property
    def slope(self) -> float:
        return float(np.polyfit(np.log(self.dt), np.log(self.residual), 1)[0])

    def rows(self) -> list[dict]:
        return [{"dt": float(a), "dx": float(b), "residual": float(c)}
                for a, b, c in zip(self.dt, self.dx, self.residual)]


def residual_convergence(pinney: PinneySolution, constants: PhysicalConstants,
                         t_end: float, dt: float, X_max: float, n: int, levels: int = 3,
                         field: HolomorphicField | None = None,
                         residual_profile: FrequencyProfile | None = None) -> ConvergenceTable:
    """TDHO residual of the pipeline under simultaneous halving of dt and dX.

    Level j uses step dt / 2**j and (n - 1) * 2**j + 1 points.  The residual
    is measured against ``residual_profile`` (default: the Pinney profile);
    passing a different profile gives the wrong-rho negative control.
    """
    profile = pinney.profile if residual_profile is None else residual_profile
    t0 = pinney.t_start
    rows = []
    for j in range(levels):
        step = dt / 2**j
        m = int(round((t_end - t0) / step))
        times = t0 + step * np.arange(m + 1)
        npts = (n - 1) * 2**j + 1
        res = run_pipeline(pinney, constants, times, X_max, npts, field=field)
        rep = tdho_residual(res.psi, profile)
        rows.append((step, rep.dx, rep.norm))
    a = np.array(rows)
    return ConvergenceTable(a[:, 0], a[:, 1], a[:, 2])


@dataclass(frozen=True, eq=False)
class FamilyReport:
    """Pipeline outputs for two Pinney solutions of one profile.

    Records the residual convergence of each and the largest difference of
    the physical-frame moments <x> and <x**2>.  It measures; it does not
    decide whether the two quantizations should agree.
    """

    convergence_a: ConvergenceTable
    convergence_b: ConvergenceTable
    times: np.ndarray
    mean_x: tuple
    mean_x2: tuple
    max_mean_x_diff: float
    max_mean_x2_diff: float

    def to_dict(self) -> dict:
        return {"residual_a": self.convergence_a.rows(), "residual_b": self.convergence_b.rows(),
                "slope_a": self.convergence_a.slope, "slope_b": self.convergence_b.slope,
                "max_mean_x_diff": self.max_mean_x_diff,
                "max_mean_x2_diff": self.max_mean_x2_diff}


def family_consistency(profile: FrequencyProfile, constants: PhysicalConstants,
                       pinney_a: PinneySolution, pinney_b: PinneySolution, t_end: float,
                       dt: float, X_max: float, n: int, levels: int = 2,
                       field: HolomorphicField | None = None) -> FamilyReport:
    """Run the pipeline with two rho's of one profile and compare the results."""
    for p in (pinney_a, pinney_b):
        if p.profile is not profile and p.profile.to_dict() != profile.to_dict():
            raise ValueError("both Pinney solutions must belong to the given profile")
    conv = [residual_convergence(p, constants, t_end, dt, X_max, n, levels, field)
            for p in (pinney_a, pinney_b)]
    t0 = max(pinney_a.t_start, pinney_b.t_start)
    times = t0 + dt * np.arange(int(round((t_end - t0) / dt)) + 1)
    runs = [run_pipeline(p, constants, times, X_max, n, field=field) for p in (pinney_a, pinney_b)]
    m1 = tuple(r.moments(1) for r in runs)
    m2 = tuple(r.moments(2) for r in runs)
    return FamilyReport(conv[0], conv[1], times, m1, m2,
                        float(np.max(np.abs(m1[0] - m1[1]))), float(np.max(np.abs(m2[0] - m2[1]))))
