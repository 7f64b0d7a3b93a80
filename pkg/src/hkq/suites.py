"""Verification suites shared by the command line and the acceptance tests.

Each ``run_*`` function computes one pipeline stage from an
:class:`~hkq.config.ExperimentConfig`, writes its outputs into ``out`` when a
directory is given, and returns a list of :class:`Gate` verdicts.  Gate
names carry the acceptance criterion number they implement, if any.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import write_csv, write_json
from .config import ExperimentConfig
from .dynamics import (PlanarState, em_rescaled_arrays, exact_rescaled_arrays,
                       exact_trajectory_rescaled, integrate_em_physical, integrate_em_rescaled,
                       invariants_along, map_to_rescaled, short_time_moments)
from .kernel import FrequencyProfile, pinney_residual, solve_pinney
from .mother_field import (AveragedField, HolomorphicField, evolve_pde_grid,
                           evolve_pde_polynomial, generator, harmonicity_residual,
                           pushforward_mc, short_time_field_check)
from .noise import NoisePath, rescale_noise, sample_ensemble, streamed_correlation
from .quantization import (build_psi_bar, eigensolve_ti, family_consistency,
                           propagate_schrodinger_ti, residual_convergence, run_pipeline)


@dataclass
class Gate:
    name: str
    passed: bool
    measured: dict
    tolerance: dict
    criterion: int | None = None
    note: str = ""

    def line(self) -> str:
        tag = f"[{self.criterion:>2}] " if self.criterion else "     "
        vals = ", ".join(f"{k}={_short(v)}" for k, v in self.measured.items())
        return f"{'PASS' if self.passed else 'FAIL'} {tag}{self.name}: {vals}"

    def to_dict(self) -> dict:
        return {"name": self.name, "criterion": self.criterion, "passed": bool(self.passed),
                "measured": self.measured, "tolerance": self.tolerance, "note": self.note}


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _f(x) -> float:
    return float(x)


def _loglog(x, y):
    """Slope and R**2 of a least-squares line through (log x, log y)."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, icpt = np.polyfit(lx, ly, 1)
    fit = slope * lx + icpt
    r2 = 1.0 - np.sum((ly - fit) ** 2) / np.sum((ly - ly.mean()) ** 2)
    return float(slope), float(r2)


def _out(out, name):
    return None if out is None else Path(out) / name


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------

def solve_config_pinney(cfg: ExperimentConfig, t_end: float | None = None, rho_dot0=None):
    p = cfg["pinney"]
    t0, t1 = p["t_span"]
    return solve_pinney(cfg.profile, cfg["omega_cap"], rho0=p["rho0"],
                        rho_dot0=p["rho_dot0"] if rho_dot0 is None else rho_dot0,
                        t_span=(t0, t1 if t_end is None else t_end), tol=p["tol"])


def run_pinney(cfg: ExperimentConfig, out=None) -> list[Gate]:
    p = cfg["pinney"]
    sol = solve_config_pinney(cfg)
    t = np.linspace(sol.t_start, sol.t_end, p["check_points"])
    dense = float(np.max(np.abs(pinney_residual(sol, cfg.profile, t))))
    gates = [Gate("pinney_dense_residual", dense < 10 * p["tol"],
                  {"max_residual": dense, "residual_bound": sol.residual_bound,
                   "nodes": int(sol.grid.size)}, {"max_residual": 10 * p["tol"]}, 3)]

    # constant omega = Omega with rho at equilibrium: rho must stay exactly constant
    omega = float(cfg["omega_cap"])
    eq = solve_pinney(FrequencyProfile.constant(omega), omega, t_span=(0.0, 20.0), tol=1e-12)
    dev = float(max(np.max(np.abs(eq.rho_values - 1.0)), np.max(np.abs(eq.rho_dot_values))))
    node_res = float(np.max(np.abs(pinney_residual(eq, eq.profile, eq.grid))))
    gates.append(Gate("pinney_equilibrium_exact", dev <= 1e-12 and node_res <= 1e-12,
                      {"max_deviation": dev, "node_residual": node_res},
                      {"max_deviation": 1e-12, "node_residual": 1e-12}, 3))
    if out is not None:
        sol.to_csv(_out(out, "pinney.csv"))
    return gates


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def _lag_gate(est):
    if not est.lags.size:
        return 0.0
    return float(np.max(np.abs(est.lag_values) / np.maximum(est.lag_se, 1e-300)))


def run_noise(cfg: ExperimentConfig, out=None) -> list[Gate]:
    n = cfg["noise"]
    const = cfg.constants
    hbar = const.hbar
    grid = np.arange(n["steps"] + 1) * n["dt"]
    est = streamed_correlation(const, grid, cfg.seed_for("noise-check", 0), n["M"], n["max_lag"],
                               chunk=n["chunk"], threads=cfg.threads)
    z = float(np.max(np.abs(est.mean) / est.mean_se)) if hbar > 0 else 0.0
    var_err = float(np.max(np.abs(est.var / (hbar / n["dt"]) - 1.0))) if hbar > 0 else 0.0
    slope = est.cumulative_slope()
    slope_err = abs(slope / hbar - 1.0) if hbar > 0 else abs(slope)
    lag_z = _lag_gate(est) if hbar > 0 else 0.0
    gates = [
        Gate("noise_mean_zero", z <= 4.0, {"max_abs_z": z}, {"max_abs_z": 4.0}, 1),
        Gate("noise_variance", var_err <= 0.05, {"max_rel_error": var_err}, {"max_rel_error": 0.05}, 1),
        Gate("noise_cumulative_slope", slope_err <= 0.05, {"slope": slope, "rel_error": slope_err},
             {"rel_error": 0.05}, 1),
        Gate("noise_offdiagonal", lag_z <= 4.0, {"max_abs_z": lag_z}, {"max_abs_z": 4.0}),
    ]

    pin = solve_config_pinney(cfg, t_end=max(n["rescaled_t_end"], cfg["pinney"]["t_span"][0] + 1e-9))
    t0 = pin.t_start
    tgrid = np.linspace(t0, n["rescaled_t_end"], n["rescaled_steps"] + 1)
    rest = streamed_correlation(const, tgrid, cfg.seed_for("noise-check", 1), n["M"], n["max_lag"],
                                warp=pin.warp, chunk=n["chunk"], threads=cfg.threads)
    if hbar > 0:
        mass_err = float(np.max(np.abs(rest.diag_mass / hbar - 1.0)))
        rz = _lag_gate(rest)
        rmean = float(np.max(np.abs(rest.mean) / rest.mean_se))
    else:
        mass_err = rz = rmean = 0.0
    gates += [
        Gate("rescaled_diagonal_mass", mass_err <= 0.05, {"max_rel_error": mass_err},
             {"max_rel_error": 0.05}, 2),
        Gate("rescaled_offdiagonal", rz <= 4.0, {"max_abs_z": rz}, {"max_abs_z": 4.0}, 2),
        Gate("rescaled_mean_zero", rmean <= 4.5, {"max_abs_z": rmean}, {"max_abs_z": 4.5},
             note="threshold widened to keep the family-wise false-alarm rate near 0.3%"),
    ]
    if out is not None:
        write_csv(_out(out, "noise_physical.csv"),
                  ["k", "time", "mean_f", "mean_se", "var_f", "diag_mass"],
                  [np.arange(est.mean.size), grid[:-1], est.mean, est.mean_se, est.var, est.diag_mass])
        write_csv(_out(out, "noise_rescaled.csv"),
                  ["k", "T", "mean_F", "mean_se", "var_F", "diag_mass"],
                  [np.arange(rest.mean.size), rest.grid[:-1], rest.mean, rest.mean_se, rest.var,
                   rest.diag_mass])
        write_csv(_out(out, "noise_lags.csv"), ["frame", "lag", "value", "se", "pairs"],
                  [["physical"] * est.lags.size + ["rescaled"] * rest.lags.size,
                   np.concatenate([est.lags, rest.lags]),
                   np.concatenate([est.lag_values, rest.lag_values]),
                   np.concatenate([est.lag_se, rest.lag_se]),
                   np.concatenate([est.lag_pairs, rest.lag_pairs])])
    return gates


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def invariant_identity(cfg: ExperimentConfig):
    d = cfg["dynamics"]
    const, omega = cfg.constants, cfg["omega_cap"]
    rng = np.random.default_rng(cfg.seed_for("dynamics", 0))
    starts = rng.uniform(-1.0, 1.0, size=(d["invariant_paths"], 2))
    grid = np.arange(d["invariant_steps"] + 1) * d["invariant_dT"]
    ens = sample_ensemble(const, grid, cfg.seed_for("dynamics", 1),
                          np.arange(d["invariant_paths"]), frame="rescaled", threads=cfg.threads)
    X, Y = exact_rescaled_arrays(omega, grid, ens.increments, starts[:, 0], starts[:, 1])
    x0, y0 = invariants_along(omega, grid, ens.increments, X, Y)
    err = float(max(np.max(np.abs(x0 - starts[:, :1])), np.max(np.abs(y0 - starts[:, 1:]))))
    return err, ens, starts


def em_order(cfg: ExperimentConfig):
    """Mean over paths of max |EM - exact| for each step size, one Brownian path per row."""
    d = cfg["dynamics"]
    dts = sorted(d["order_dts"])
    const, omega = cfg.constants, cfg["omega_cap"]
    T = d["order_T"]
    n_fine = int(round(T / dts[0]))
    fine_grid = np.linspace(0.0, T, n_fine + 1)
    ens = sample_ensemble(const, fine_grid, cfg.seed_for("dynamics", 2), np.arange(d["order_paths"]),
                          frame="rescaled", threads=cfg.threads)
    rng = np.random.default_rng(cfg.seed_for("dynamics", 3))
    starts = rng.uniform(-1.0, 1.0, size=(d["order_paths"], 2))
    errors = []
    for dt in dts:
        lvl = int(round(dt / dts[0]))
        n = n_fine // lvl
        grid = fine_grid[::lvl]
        inc = ens.increments.reshape(-1, n, lvl).sum(axis=2)
        Xe, Ye = em_rescaled_arrays(omega, grid, inc, starts[:, 0], starts[:, 1])
        Xx, Yx = exact_rescaled_arrays(omega, grid, inc, starts[:, 0], starts[:, 1])
        dev = np.maximum(np.abs(Xe - Xx).max(axis=1), np.abs(Ye - Yx).max(axis=1))
        errors.append(float(dev.mean()))
    return np.array(dts), np.array(errors)


def frame_equivalence(cfg: ExperimentConfig):
    d = cfg["dynamics"]
    const = cfg.constants
    pin = solve_config_pinney(cfg, t_end=d["frame_t_end"])
    t0, t1 = pin.t_start, d["frame_t_end"]
    dts = sorted(d["frame_dts"])
    n_fine = int(round((t1 - t0) / dts[0]))
    fine = sample_ensemble(const, np.linspace(t0, t1, n_fine + 1), cfg.seed_for("dynamics", 4),
                           np.arange(d["frame_paths"]))
    r0 = (0.3, -0.2)
    rho0 = float(pin.rho(t0))
    errors = []
    for dt in dts:
        lvl = int(round(dt / dts[0]))
        n = n_fine // lvl
        grid = np.linspace(t0, t1, n + 1)
        devs = []
        for j in range(d["frame_paths"]):
            inc = fine.increments[j].reshape(n, lvl).sum(axis=1)
            path = NoisePath("physical", grid, inc, const, fine.seed, int(fine.streams[j]))
            phys = map_to_rescaled(integrate_em_physical(pin, path, PlanarState(*r0, t0, "physical")), pin)
            resc = integrate_em_rescaled(cfg["omega_cap"], rescale_noise(path, pin.warp),
                                         PlanarState(r0[0] / rho0, r0[1] / rho0, phys.times[0], "rescaled"))
            devs.append(max(np.abs(phys.first - resc.first).max(), np.abs(phys.second - resc.second).max()))
        errors.append(float(np.mean(devs)))
    return np.array(dts), np.array(errors)


def run_dynamics(cfg: ExperimentConfig, out=None) -> list[Gate]:
    d = cfg["dynamics"]
    const, omega = cfg.constants, cfg["omega_cap"]
    inv_err, ens, starts = invariant_identity(cfg)
    gates = [Gate("invariant_identity", inv_err <= 1e-12, {"max_abs_error": inv_err},
                  {"max_abs_error": 1e-12}, 4)]

    dts, errs = em_order(cfg)
    slope, r2 = _loglog(dts, errs)
    gates.append(Gate("em_strong_order", abs(slope - 1.0) <= 0.15,
                      {"slope": slope, "r2": r2, "errors": [_f(e) for e in errs]},
                      {"slope": "1.0 +/- 0.15"}, 5))

    fdts, ferrs = frame_equivalence(cfg)
    fslope, _ = _loglog(fdts, ferrs)
    gates.append(Gate("frame_equivalence", abs(fslope - 1.0) <= 0.15 and ferrs[0] < ferrs[-1],
                      {"slope": fslope, "errors": [_f(e) for e in ferrs]}, {"slope": "1.0 +/- 0.15"}))

    st = short_time_moments(omega, const, d["short_X0"], d["short_Y0"], d["short_dT"], d["short_M"],
                            cfg.seed_for("dynamics", 5), threads=cfg.threads)
    drift_tol = 0.1 * abs(st.drift_X) + 4.0 * st.se_dX
    drift_dev = abs(st.mean_dX - st.drift_X)
    var_err = abs(st.noise_var / st.noise_var_expected - 1.0) if const.hbar > 0 else 0.0
    gates += [
        Gate("short_time_drift", drift_dev <= drift_tol,
             {"mean_dX": st.mean_dX, "expected": st.drift_X, "se": st.se_dX},
             {"abs_deviation": drift_tol}, 6),
        Gate("short_time_noise_variance", var_err <= 0.05,
             {"noise_var": st.noise_var, "expected": st.noise_var_expected, "rel_error": var_err},
             {"rel_error": 0.05}, 6),
    ]
    if out is not None:
        path = ens.path(0)
        traj = exact_trajectory_rescaled(omega, path, starts[0, 0], starts[0, 1])
        traj.to_csv(_out(out, "trajectory_exact.csv"))
        write_csv(_out(out, "em_order.csv"), ["dT", "mean_max_error"], [dts, errs])
        write_csv(_out(out, "frame_equivalence.csv"), ["dt", "mean_max_deviation"], [fdts, ferrs])
        write_json(_out(out, "short_time_moments.json"),
                   {k: getattr(st, k) for k in st.__dataclass_fields__} |
                   {"eps": st.eps, "alpha2": st.alpha2, "beta2": st.beta2})
    return gates


# ---------------------------------------------------------------------------
# mother field
# ---------------------------------------------------------------------------

def generator_consistency(field: HolomorphicField, omega, const, dTs=None):
    dTs = np.logspace(-5, -1, 9) if dTs is None else np.asarray(dTs)
    L = generator(field, omega, const).coeffs
    errs = [np.linalg.norm((evolve_pde_polynomial(field, omega, const, h).coeffs - field.coeffs) / h - L)
            for h in dTs]
    return dTs, np.array(errs)


def run_mother_field(cfg: ExperimentConfig, out=None) -> list[Gate]:
    m = cfg["mother_field"]
    const, omega = cfg.constants, cfg["omega_cap"]
    field = HolomorphicField.from_json(m["coeffs"])
    axis = np.linspace(m["grid"]["min"], m["grid"]["max"], m["grid"]["count"])
    X, Y = np.meshgrid(axis, axis)
    avg = pushforward_mc(field, omega, const, m["T"], X, Y, m["M"], cfg.seed_for("mother-field", 0),
                         n_steps=m["n_steps"], threads=cfg.threads)
    exact = evolve_pde_polynomial(field, omega, const, m["T"])
    U1, U2 = exact.values(X, Y)
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = ((np.abs(avg.U1_mean - U1) <= 4 * avg.U1_se + 1e-14)
              & (np.abs(avg.U2_mean - U2) <= 4 * avg.U2_se + 1e-14))
    frac = float(ok.mean())
    harm = harmonicity_residual(avg, n_sigma=4.0)
    gates = [
        Gate("mc_vs_polynomial", frac >= 0.95, {"fraction_within_4se": frac,
                                                "max_steps": int(avg.n_steps.max())},
             {"fraction_within_4se": 0.95}, 7),
        Gate("mc_harmonicity", bool(harm.within.all()), {"worst_ratio": harm.worst_ratio},
             {"worst_ratio": 4.0}, 7),
    ]

    slopes = {}
    ok8 = True
    for deg in m["generator_degrees"]:
        f = HolomorphicField.monomial(int(deg))
        dTs, errs = generator_consistency(f, omega, const)
        if np.all(errs == 0):
            slope, r2 = 1.0, 1.0  # exact for this degree
        else:
            slope, r2 = _loglog(dTs, errs)
        slopes[f"Z^{deg}"] = {"slope": slope, "r2": r2}
        ok8 &= abs(slope - 1.0) <= 0.05 and r2 > 0.99
    gates.append(Gate("generator_consistency", bool(ok8), slopes, {"slope": "1.0 +/- 0.05", "r2": 0.99}, 8))

    # grid evolver on Z**2 data, a padded 2-D patch around the probe square
    gx = np.linspace(-2.0, 2.0, 81)
    gy = np.linspace(-1.0, 1.0, 5)
    GX, GY = np.meshgrid(gx, gy)
    sq = HolomorphicField.monomial(2)
    u1, u2 = sq.values(GX, GY)
    v1, v2 = evolve_pde_grid(u1, u2, GX, GY, omega, const, m["T"])
    w1, w2 = evolve_pde_polynomial(sq, omega, const, m["T"]).values(GX, GY)
    probe = np.abs(gx) <= 1.0
    grid_err = float(max(np.abs(v1 - w1)[:, probe].max(), np.abs(v2 - w2)[:, probe].max()))
    zero = np.zeros_like(v1)
    gharm = harmonicity_residual(AveragedField(GX, GY, v1, zero, v2, zero, m["T"], 0,
                                               np.zeros(v1.shape, int)))
    gates.append(Gate("grid_evolver_z2", grid_err <= 1e-8 and bool(gharm.within.all()),
                      {"max_abs_error": grid_err, "harmonicity_ratio": gharm.worst_ratio},
                      {"max_abs_error": 1e-8}))

    st = short_time_field_check(field, omega, const, m["short_dT"], m["short_M"],
                                cfg.seed_for("mother-field", 1))
    gates.append(Gate("short_time_field", bool(st.passed.all()),
                      {"max_dev_over_tol": float(np.max(np.abs(st.measured - st.predicted) / st.tolerance))},
                      {"max_dev_over_tol": 1.0}))
    if out is not None:
        avg.to_csv(_out(out, "averaged_field.csv"))
        exact.save(_out(out, "field_T.json"))
        write_json(_out(out, "generator_slopes.json"), slopes)
        write_csv(_out(out, "harmonicity.csv"), ["X", "Y", "lap_U1", "err_U1", "lap_U2", "err_U2"],
                  [a.ravel() for a in (harm.X, harm.Y, harm.residual_U1, harm.error_U1,
                                       harm.residual_U2, harm.error_U2)])
    return gates


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def spectrum_checks(cfg: ExperimentConfig):
    q = cfg["quantize"]["spectrum"]
    const, omega = cfg.constants, cfg["omega_cap"]
    hw = const.hbar * omega
    s = eigensolve_ti(omega, const, -q["x_max"], q["x_max"], q["n"], q["levels"], order=q["order"])
    e0_err = abs(s.eigenvalues[0] - 0.5 * hw)
    gaps = np.diff(s.eigenvalues)[:5]
    gap_err = float(np.max(np.abs(gaps - hw)))
    exact = hw * (np.arange(q["levels"]) + 0.5)
    errs = [float(np.max(np.abs(eigensolve_ti(omega, const, -q["x_max"], q["x_max"], n, q["levels"],
                                              order=2).eigenvalues - exact)))
            for n in q["refinements"]]
    hs = [2 * q["x_max"] / (n - 1) for n in q["refinements"]]
    orders = np.log(np.array(errs[:-1]) / errs[1:]) / np.log(np.array(hs[:-1]) / hs[1:])
    return s, float(e0_err), gap_err, hs, errs, orders


def run_quantize(cfg: ExperimentConfig, out=None) -> list[Gate]:
    q = cfg["quantize"]
    const, omega = cfg.constants, cfg["omega_cap"]
    s, e0_err, gap_err, hs, errs, orders = spectrum_checks(cfg)
    gates = [
        Gate("spectrum_ground", e0_err <= 1e-6, {"E0_error": e0_err}, {"E0_error": 1e-6}, 9),
        Gate("spectrum_spacing", gap_err <= 1e-5, {"max_gap_error": gap_err}, {"max_gap_error": 1e-5}, 9),
        Gate("spectrum_second_order", bool(np.all(np.abs(orders - 2.0) <= 0.2)),
             {"observed_orders": [_f(o) for o in orders]}, {"order": "2 +/- 0.2"}, 9),
    ]

    # one period of the ground state under Crank-Nicolson
    X = np.linspace(-q["X_max"], q["X_max"], 8 * (q["n"] - 1) + 1)
    ground = build_psi_bar(np.ones_like(X), np.zeros_like(X), X, omega, const, 0.0)
    period = 2 * math.pi / omega
    back = propagate_schrodinger_ti(ground, omega, period, period / q["period_steps"])
    drift = abs(back.norm - ground.norm) / ground.norm

    pin = solve_config_pinney(cfg, t_end=q["t_end"] + 0.1)
    times = np.linspace(pin.t_start, q["t_end"], 6)
    pipe = run_pipeline(pin, const, times, q["X_max"], q["n"])
    frame = float(max(abs(a.norm - b.norm) / b.norm for a, b in zip(pipe.psi, pipe.psi_bar)))
    gates.append(Gate("unitarity_and_frame_norms", drift < 1e-10 and frame <= 1e-10,
                      {"cn_norm_drift": drift, "frame_norm_mismatch": frame},
                      {"cn_norm_drift": 1e-10, "frame_norm_mismatch": 1e-10}, 10))

    conv = residual_convergence(pin, const, q["t_end"], q["dt"], q["X_max"], q["n"], q["levels"])
    wrong = solve_pinney(FrequencyProfile.constant(cfg.profile.omega2(pin.t_start) ** 0.5), omega,
                         rho0=pin.rho(pin.t_start), t_span=(pin.t_start, q["t_end"] + 0.1))
    neg = residual_convergence(wrong, const, q["t_end"], q["dt"], q["X_max"], q["n"], q["levels"],
                               residual_profile=cfg.profile)
    neg_slope = float(neg.slopes[-1])
    gates += [
        Gate("tdho_residual_order", bool(np.min(conv.slopes) >= 1.8),
             {"slopes": [_f(v) for v in conv.slopes], "residuals": [_f(v) for v in conv.residual]},
             {"min_slope": 1.8}, 11),
        Gate("tdho_negative_control", neg_slope < 0.5,
             {"last_slope": neg_slope, "residuals": [_f(v) for v in neg.residual]},
             {"last_slope_below": 0.5}, 11),
    ]

    # time-independent reduction: omega = Omega, rho = 1
    flat = solve_pinney(FrequencyProfile.constant(omega), omega, rho0=1.0, t_span=(0.0, period + 0.1))
    k = q["period_steps"]
    run = run_pipeline(flat, const, np.linspace(0.0, period, k + 1), q["X_max"], 8 * (q["n"] - 1) + 1)
    first, last = run.psi[0], run.psi[-1]
    ov = abs(first.overlap(last)) / (first.norm * last.norm)
    gates.append(Gate("time_independent_return", ov > 1 - 1e-6,
                      {"one_minus_overlap": 1 - ov, "phase": float(np.angle(first.overlap(last)))},
                      {"one_minus_overlap": 1e-6}, 12))

    # two rho's of one constant-frequency profile: equilibrium and breathing
    w0 = math.sqrt(max(cfg.profile.omega2(pin.t_start), 1e-12))
    cprof = FrequencyProfile.constant(w0)
    pa = solve_pinney(cprof, omega, t_span=(pin.t_start, q["t_end"] + 0.1))
    pb = solve_pinney(cprof, omega, rho_dot0=q["family_rho_dot0"], t_span=(pin.t_start, q["t_end"] + 0.1))
    fam = family_consistency(cprof, const, pa, pb, q["t_end"], q["dt"], q["X_max"], q["n"], levels=2)
    fam_ok = fam.convergence_a.slopes[0] >= 1.8 and fam.convergence_b.slopes[0] >= 1.8
    gates.append(Gate("family_residual_convergent", bool(fam_ok),
                      {"slope_a": _f(fam.convergence_a.slopes[0]), "slope_b": _f(fam.convergence_b.slopes[0]),
                       "max_mean_x2_diff": fam.max_mean_x2_diff}, {"min_slope": 1.8}))
    if out is not None:
        s.to_json(_out(out, "spectrum.json"))
        write_csv(_out(out, "spectrum_convergence.csv"), ["dx", "max_error_order2"], [hs, errs])
        write_csv(_out(out, "residual_convergence.csv"), ["dt", "dx", "residual"],
                  [conv.dt, conv.dx, conv.residual])
        write_csv(_out(out, "residual_negative_control.csv"), ["dt", "dx", "residual"],
                  [neg.dt, neg.dx, neg.residual])
        write_json(_out(out, "family.json"), fam.to_dict())
        for j, (b, p) in enumerate(zip(pipe.psi_bar, pipe.psi)):
            b.save(_out(out, f"psi_bar_{j:02d}"))
            p.save(_out(out, f"psi_{j:02d}"))
    return gates


RUNNERS = {"pinney": run_pinney, "noise-check": run_noise, "dynamics": run_dynamics,
           "mother-field": run_mother_field, "quantize": run_quantize}


@dataclass
class StageReport:
    stage: str
    gates: list
    seconds: float = 0.0
    files: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.gates)


def run_stage(stage: str, cfg: ExperimentConfig, out=None) -> StageReport:
    start = time.perf_counter()
    gates = RUNNERS[stage](cfg, out)
    return StageReport(stage, gates, time.perf_counter() - start)
