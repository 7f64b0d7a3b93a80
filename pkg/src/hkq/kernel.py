"""Frequency profiles, Pinney-equation solving and the time/amplitude rescaling.

The rescaled frame is defined through a positive solution ``rho`` of

    rho'' + omega(t)**2 * rho = Omega**2 / rho**3

by ``X = x / rho`` and ``T(t) = int_0^t dt' / rho(t')**2``.  Everything
downstream (noise rescaling, frame transforms of trajectories and wave
functions) goes through :class:`PinneySolution` and :class:`TimeWarp`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.integrate import DOP853
from scipy.interpolate import BPoly, PchipInterpolator, make_interp_spline

from ._io import write_csv
from .errors import RangeError, SolverError

_EPS = np.finfo(float).eps
# Relative slack when deciding whether a time lies inside a span.
_SPAN_SLACK = 1e-12


@dataclass(frozen=True)
class PhysicalConstants:
    """Holds the action scale hbar (noise strength and quantum scale).

    ``hbar == 0`` is accepted so that noise-free smoke tests can run.
    """

    hbar: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.hbar) or self.hbar < 0:
            raise ValueError(f"hbar must be finite and >= 0, got {self.hbar!r}")


@dataclass(frozen=True, eq=False)
class FrequencyProfile:
    """Squared frequency omega**2(t) of the oscillator.

    Use the :meth:`constant`, :meth:`modulated` and :meth:`tabulated`
    constructors.  Tabulated profiles interpolate omega**2 (not omega) with a
    monotone cubic (PCHIP) or linear interpolant.
    """

    kind: str
    omega0: float = 1.0
    eps: float = 0.0
    gamma: float = 0.0
    t_samples: np.ndarray | None = None
    omega2_samples: np.ndarray | None = None
    interpolation: str = "pchip"
    t_min: float = -math.inf
    t_max: float = math.inf
    _interp: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("constant", "modulated", "tabulated"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.kind == "tabulated":
            t = np.asarray(self.t_samples, dtype=float)
            w2 = np.asarray(self.omega2_samples, dtype=float)
            if t.ndim != 1 or t.shape != w2.shape or t.size < 2:
                raise ValueError("tabulated profile needs matching 1-D t and omega2 arrays (>= 2 samples)")
            if not np.all(np.isfinite(t)) or not np.all(np.isfinite(w2)):
                raise ValueError("tabulated profile contains non-finite samples")
            if np.any(np.diff(t) <= 0):
                raise ValueError("tabulated profile times must be strictly increasing")
            if self.interpolation == "pchip":
                interp = PchipInterpolator(t, w2, extrapolate=False)
            elif self.interpolation == "linear":
                interp = make_interp_spline(t, w2, k=1)
            else:
                raise ValueError(f"unknown interpolation {self.interpolation!r}")
            object.__setattr__(self, "t_samples", t)
            object.__setattr__(self, "omega2_samples", w2)
            object.__setattr__(self, "t_min", float(t[0]))
            object.__setattr__(self, "t_max", float(t[-1]))
            object.__setattr__(self, "_interp", interp)
        else:
            for name in ("omega0", "eps", "gamma"):
                if not math.isfinite(getattr(self, name)):
                    raise ValueError(f"{name} must be finite")
        if not self.t_min < self.t_max:
            raise ValueError("profile needs t_min < t_max")

    @classmethod
    def constant(cls, omega0: float, t_min=-math.inf, t_max=math.inf) -> "FrequencyProfile":
        return cls("constant", omega0=float(omega0), t_min=t_min, t_max=t_max)

    @classmethod
    def modulated(cls, omega0, eps, gamma, t_min=-math.inf, t_max=math.inf) -> "FrequencyProfile":
        """omega**2(t) = omega0**2 * (1 + eps * cos(gamma * t))."""
        return cls("modulated", omega0=float(omega0), eps=float(eps), gamma=float(gamma),
                   t_min=t_min, t_max=t_max)

    @classmethod
    def tabulated(cls, t, omega2, interpolation="pchip") -> "FrequencyProfile":
        return cls("tabulated", t_samples=t, omega2_samples=omega2, interpolation=interpolation)

    def contains(self, t) -> bool:
        t = np.asarray(t, dtype=float)
        slack = _SPAN_SLACK * max(1.0, abs(self.t_min) if math.isfinite(self.t_min) else 1.0,
                                  abs(self.t_max) if math.isfinite(self.t_max) else 1.0)
        return bool(np.all((t >= self.t_min - slack) & (t <= self.t_max + slack)))

    def omega2(self, t):
        """Evaluate omega**2 at ``t`` (scalar or array)."""
        if not self.contains(t):
            raise RangeError(f"t outside profile span [{self.t_min}, {self.t_max}]")
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            out = np.full_like(t, self.omega0**2)
        elif self.kind == "modulated":
            out = self.omega0**2 * (1.0 + self.eps * np.cos(self.gamma * t))
        else:
            out = np.asarray(self._interp(np.clip(t, self.t_min, self.t_max)), dtype=float)
        return out if out.ndim else float(out)

    def omega2_dot(self, t):
        """Time derivative of omega**2 at ``t``."""
        if not self.contains(t):
            raise RangeError(f"t outside profile span [{self.t_min}, {self.t_max}]")
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            out = np.zeros_like(t)
        elif self.kind == "modulated":
            out = -self.omega0**2 * self.eps * self.gamma * np.sin(self.gamma * t)
        else:
            out = np.asarray(self._interp.derivative()(np.clip(t, self.t_min, self.t_max)), dtype=float)
        return out if out.ndim else float(out)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            d = {"kind": "constant", "omega0": self.omega0}
        elif self.kind == "modulated":
            d = {"kind": "modulated", "omega0": self.omega0, "eps": self.eps, "gamma": self.gamma}
        else:
            return {"kind": "tabulated", "t": self.t_samples.tolist(),
                    "omega2": self.omega2_samples.tolist(), "interpolation": self.interpolation}
        if math.isfinite(self.t_min):
            d["t_min"] = self.t_min
        if math.isfinite(self.t_max):
            d["t_max"] = self.t_max
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FrequencyProfile":
        """Build a profile from its JSON document form.

        Raises ``ValueError`` (or ``KeyError`` wrapped as ``ValueError``) on
        malformed documents.
        """
        try:
            kind = doc["kind"]
            span = {k: float(doc[k]) for k in ("t_min", "t_max") if k in doc}
            if kind == "constant":
                return cls.constant(doc["omega0"], **span)
            if kind == "modulated":
                return cls.modulated(doc["omega0"], doc["eps"], doc["gamma"], **span)
            if kind == "tabulated":
                return cls.tabulated(doc["t"], doc["omega2"], doc.get("interpolation", "pchip"))
        except KeyError as exc:
            raise ValueError(f"profile document missing key {exc}") from None
        except TypeError as exc:
            raise ValueError(f"malformed profile document: {exc}") from None
        raise ValueError(f"unknown profile kind {kind!r}")


def load_profile(source) -> FrequencyProfile:
    """Load a profile from a mapping, a JSON string or a path to a JSON file."""
    if isinstance(source, Mapping):
        return FrequencyProfile.from_dict(source)
    text = str(source)
    if text.lstrip().startswith("{"):
        return FrequencyProfile.from_dict(json.loads(text))
    return FrequencyProfile.from_dict(json.loads(Path(text).read_text()))


@dataclass(frozen=True, eq=False)
class PinneySolution:
    """A positive solution rho(t) of the Pinney equation on a uniform grid.

    Between grid points rho is represented by the degree-7 Hermite interpolant
    through rho and its first three derivatives at the nodes (the second and
    third taken from the equation itself; degree 5 without the third for
    piecewise-linear tabulated profiles), which is what :meth:`rho`,
    :meth:`rho_dot` and :meth:`rho_ddot` evaluate.  ``residual_bound`` is the
    largest |rho'' + omega**2 rho - Omega**2/rho**3| found on the nodes and
    interval midpoints when the solution was built.
    """

    omega_cap: float
    grid: np.ndarray
    rho_values: np.ndarray
    rho_dot_values: np.ndarray
    profile: FrequencyProfile
    residual_bound: float
    order: int = 7
    _dense: BPoly = field(default=None, repr=False)

    def __post_init__(self):
        if self._dense is None:
            object.__setattr__(self, "_dense", _dense_from_nodes(
                self.profile, self.omega_cap, self.grid, self.rho_values, self.rho_dot_values))

    @property
    def t_start(self) -> float:
        return float(self.grid[0])

    @property
    def t_end(self) -> float:
        return float(self.grid[-1])

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        slack = _SPAN_SLACK * max(1.0, abs(self.t_start), abs(self.t_end))
        if np.any(t < self.t_start - slack) or np.any(t > self.t_end + slack):
            raise RangeError(f"t outside Pinney span [{self.t_start}, {self.t_end}]")
        return np.clip(t, self.t_start, self.t_end)

    def rho(self, t):
        return _scalarize(self._dense(self._check(t)))

    def rho_dot(self, t):
        return _scalarize(self._dense(self._check(t), 1))

    def rho_ddot(self, t):
        return _scalarize(self._dense(self._check(t), 2))

    @cached_property
    def warp(self) -> "TimeWarp":
        return TimeWarp.build(self)

    def to_csv(self, path) -> Path:
        """Export columns t, rho, rho_dot, T, residual.

        The residual column holds, for row k, the larger of |residual| at t_k
        and at the midpoint of [t_k, t_{k+1}].
        """
        t = self.grid
        r_nodes = np.abs(pinney_residual(self, self.profile, t))
        mids = 0.5 * (t[:-1] + t[1:])
        r_mid = np.abs(pinney_residual(self, self.profile, mids))
        res = r_nodes.copy()
        res[:-1] = np.maximum(res[:-1], r_mid)
        return write_csv(path, ["t", "rho", "rho_dot", "T", "residual"],
                         [t, self.rho_values, self.rho_dot_values, self.warp.T_grid, res])


def _scalarize(arr):
    arr = np.asarray(arr)
    return float(arr) if arr.ndim == 0 else arr


def _hermite(t, rho, rho_dot, rho_ddot, rho_dddot) -> BPoly:
    return BPoly.from_derivatives(t, np.stack([rho, rho_dot, rho_ddot, rho_dddot], axis=1))


def _pinney_accel(profile, omega_cap, t, rho):
    return omega_cap**2 / rho**3 - np.asarray(profile.omega2(t)) * rho


def _pinney_jerk(profile, omega_cap, t, rho, rho_dot):
    # time derivative of the Pinney right-hand side
    return (-3.0 * omega_cap**2 * rho_dot / rho**4
            - np.asarray(profile.omega2_dot(t)) * rho - np.asarray(profile.omega2(t)) * rho_dot)


def _smooth_jerk(profile) -> bool:
    # piecewise-linear omega**2 has a jumping derivative: the third derivative
    # of rho is one-sided at the knots
    return not (profile.kind == "tabulated" and profile.interpolation == "linear")


def _dense_from_nodes(profile, omega_cap, t, rho, rho_dot) -> BPoly:
    acc = _pinney_accel(profile, omega_cap, t, rho)
    if _smooth_jerk(profile):
        return _hermite(t, rho, rho_dot, acc, _pinney_jerk(profile, omega_cap, t, rho, rho_dot))
    return BPoly.from_derivatives(t, np.stack([rho, rho_dot, acc], axis=1))


def _output_grid(profile, t0, t1, dt_out):
    """Near-uniform grid having every tabulated knot inside (t0, t1) as a node."""
    breaks = np.array([t0, t1])
    if profile.kind == "tabulated":
        knots = profile.t_samples
        breaks = np.unique(np.concatenate([breaks, knots[(knots > t0) & (knots < t1)]]))
    pieces = []
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = max(1, int(math.ceil((b - a) / dt_out - 1e-9)))
        pieces.append(np.linspace(a, b, n + 1)[:-1])
    return np.concatenate(pieces + [[t1]])


def default_rho0(profile: FrequencyProfile, omega_cap: float, t0: float = 0.0) -> float:
    """Equilibrium-like initial value (Omega / omega(t0))**0.5.

    Falls back to 1.0 when omega**2(t0) <= 0, where no equilibrium exists.
    """
    w2 = float(profile.omega2(t0))
    if w2 <= 0:
        return 1.0
    return max(math.sqrt(omega_cap / math.sqrt(w2)), 1e-150)


_MAX_STEPS_PER_INTERVAL = 5000


def _integrate_on_grid(profile, omega_cap, grid, rho0, rho_dot0, rtol):
    """Adaptive DOP853 run, restarted on every grid interval.

    Restarting makes every grid node an accepted step endpoint, so node
    values are mutually consistent to the local error of the method rather
    than to the accuracy of an interpolant.
    """
    floor = 10 * _EPS * rho0
    w0, eps, gam = profile.omega0, profile.eps, profile.gamma

    if profile.kind == "modulated":
        def rhs(t, y):
            return np.array([y[1], omega_cap**2 / y[0] ** 3
                             - w0 * w0 * (1.0 + eps * math.cos(gam * t)) * y[0]])
    else:
        def rhs(t, y):
            return np.array([y[1], omega_cap**2 / y[0] ** 3 - profile.omega2(t) * y[0]])

    out = np.empty((grid.size, 2))
    out[0] = rho0, rho_dot0
    for k in range(grid.size - 1):
        h = grid[k + 1] - grid[k]
        stepper = DOP853(rhs, grid[k], out[k], grid[k + 1], rtol=rtol,
                         atol=rtol * rho0, first_step=h)
        steps = 0
        while stepper.status == "running":
            steps += 1
            if steps > _MAX_STEPS_PER_INTERVAL:
                raise SolverError(f"stiff or singular profile near t={stepper.t:.6g}: "
                                  f"more than {_MAX_STEPS_PER_INTERVAL} steps in one output interval")
            msg = stepper.step()
            if stepper.status == "failed":
                raise SolverError(f"stiff or singular profile near t={stepper.t:.6g}: {msg}")
            if not stepper.y[0] > floor:
                raise SolverError(f"rho reached zero near t={stepper.t:.6g}: "
                                  "internal-consistency failure (cannot happen for Omega != 0)")
        out[k + 1] = stepper.y
    return out[:, 0], out[:, 1]


def solve_pinney(profile: FrequencyProfile, omega_cap: float, rho0: float | None = None,
                 rho_dot0: float = 0.0, t_span=(0.0, 20.0), tol: float = 1e-9,
                 dt_out: float | None = None) -> PinneySolution:
    """Integrate the Pinney equation for a particular positive solution.

    Parameters
    ----------
    profile : FrequencyProfile
        Supplies omega**2(t); must cover ``t_span``.
    omega_cap : float
        The constant Omega (> 0).
    rho0, rho_dot0 : float
        Initial data at ``t_span[0]``; ``rho0`` defaults to
        :func:`default_rho0`.
    t_span : (float, float)
        Integration interval.
    tol : float
        Required bound on the Pinney residual of the returned dense solution.
    dt_out : float, optional
        Output grid spacing (default 0.02, capped at span/64).  Halved
        automatically until the residual bound is met.

    Raises
    ------
    SolverError
        On step-size underflow ("stiff or singular profile") or when rho
        reaches zero.
    """
    omega_cap = float(omega_cap)
    if not (math.isfinite(omega_cap) and omega_cap > 0):
        raise ValueError("omega_cap must be > 0")
    if not tol > 0:
        raise ValueError("tol must be > 0")
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    if not profile.contains([t0, t1]):
        raise RangeError("t_span not covered by the frequency profile")
    if rho0 is None:
        rho0 = default_rho0(profile, omega_cap, t0)
    rho0, rho_dot0 = float(rho0), float(rho_dot0)
    if not rho0 > 0:
        raise ValueError("rho0 must be > 0")

    span = t1 - t0
    if dt_out is None:
        dt_out = min(0.02, span / 64)
    rtol = max(1e-4 * tol, 1e-13)
    bound = math.inf
    for _ in range(6):
        grid = _output_grid(profile, t0, t1, dt_out)
        rho, rho_dot = _integrate_on_grid(profile, omega_cap, grid, rho0, rho_dot0, rtol)
        if np.any(~np.isfinite(rho)) or np.any(rho <= 0):
            raise SolverError("non-positive rho on the output grid: internal-consistency failure")
        dense = _dense_from_nodes(profile, omega_cap, grid, rho, rho_dot)
        probe = np.concatenate([grid, 0.5 * (grid[:-1] + grid[1:])])
        r = dense(probe)
        resid = dense(probe, 2) + profile.omega2(probe) * r - omega_cap**2 / r**3
        bound = float(np.max(np.abs(resid)))
        if bound <= tol:
            return PinneySolution(omega_cap, grid, rho, rho_dot, profile, bound,
                                  order=7 if _smooth_jerk(profile) else 5, _dense=dense)
        dt_out /= 2
    raise SolverError(f"could not reach residual {tol:g} (best {bound:.3g}); "
                      "profile too rough for the dense representation")


def pinney_residual(sol: PinneySolution, profile: FrequencyProfile, t):
    """rho'' + omega**2 rho - Omega**2 / rho**3 from the dense output at ``t``.

    ``profile`` may differ from ``sol.profile``; this is how a solution is
    tested against the wrong equation.
    """
    r = np.asarray(sol.rho(t))
    out = np.asarray(sol.rho_ddot(t)) + np.asarray(profile.omega2(t)) * r - sol.omega_cap**2 / r**3
    return _scalarize(out)


def _simpson_weights(m: int) -> np.ndarray:
    w = np.ones(m + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / (3.0 * m)


@dataclass(frozen=True, eq=False)
class TimeWarp:
    """Cumulative rescaled time T_k = int_{t_0}^{t_k} dt / rho**2 on the Pinney grid.

    The origin of rescaled time is the start of the Pinney span (t = 0 in the
    usual setup).  Each grid interval is integrated by composite Simpson,
    doubling the panel count until the cumulative values stop changing at
    the ``rtol`` level.
    """

    pinney: PinneySolution
    T_grid: np.ndarray
    panels: int

    @classmethod
    def build(cls, pinney: PinneySolution, rtol: float = 1e-12, max_panels: int = 1024) -> "TimeWarp":
        grid = pinney.grid
        a, h = grid[:-1], np.diff(grid)
        prev = None
        m = 2
        while True:
            s = np.linspace(0.0, 1.0, m + 1)
            nodes = a[:, None] + h[:, None] * s[None, :]
            f = 1.0 / pinney._dense(nodes) ** 2
            pieces = h * (f @ _simpson_weights(m))
            T = np.concatenate([[0.0], np.cumsum(pieces)])
            if prev is not None and np.max(np.abs(T - prev)) <= rtol * max(abs(T[-1]), 1e-300):
                return cls(pinney, T, m)
            if m >= max_panels:
                raise SolverError("time-warp quadrature failed to converge")
            prev, m = T, 2 * m

    @property
    def T_end(self) -> float:
        return float(self.T_grid[-1])

    def _interval(self, t):
        k = np.searchsorted(self.pinney.grid, t, side="right") - 1
        return np.clip(k, 0, self.pinney.grid.size - 2)

    def __call__(self, t):
        return warp_time(self, t)


def warp_time(warp: TimeWarp, t):
    """Rescaled time T(t) (scalar or array input)."""
    t = np.asarray(warp.pinney._check(t), dtype=float)
    k = warp._interval(t)
    t_k = warp.pinney.grid[k]
    m = warp.panels
    s = np.linspace(0.0, 1.0, m + 1)
    h = t - t_k
    nodes = t_k[..., None] + h[..., None] * s
    f = 1.0 / warp.pinney._dense(nodes) ** 2
    out = warp.T_grid[k] + h * (f @ _simpson_weights(m))
    return _scalarize(out)


def unwarp_time(warp: TimeWarp, T, tol: float = 1e-15):
    """Inverse of :func:`warp_time` by safeguarded Newton iteration."""
    T = np.asarray(T, dtype=float)
    slack = _SPAN_SLACK * max(1.0, warp.T_end)
    if np.any(T < -slack) or np.any(T > warp.T_end + slack):
        raise RangeError(f"T outside [0, {warp.T_end}]")
    T = np.clip(T, 0.0, warp.T_end)
    grid, Tg = warp.pinney.grid, warp.T_grid
    k = np.clip(np.searchsorted(Tg, T, side="right") - 1, 0, grid.size - 2)
    lo, hi = grid[k], grid[k + 1]
    t = lo + (T - Tg[k]) * (hi - lo) / (Tg[k + 1] - Tg[k])
    for _ in range(60):
        err = np.asarray(warp_time(warp, t)) - T
        step = err * np.asarray(warp.pinney.rho(t)) ** 2
        t = np.clip(t - step, lo, hi)
        if np.all(np.abs(step) <= tol * np.maximum(1.0, np.abs(t))):
            break
    return _scalarize(t)
