import math

import numpy as np
import pytest

from hkq.dynamics import (PlanarState, compute_invariants, em_rescaled_arrays,
                          exact_rescaled_arrays, exact_solution_rescaled,
                          exact_trajectory_rescaled, integrate_em_physical, integrate_em_rescaled,
                          invariants_along, map_to_rescaled, short_time_moments)
from hkq.errors import FrameError, GridError, RangeError
from hkq.kernel import FrequencyProfile, PhysicalConstants, solve_pinney
from hkq.noise import NoisePath, rescale_noise, sample_ensemble, sample_noise

ZERO = PhysicalConstants(0.0)


def rescaled_path(constants, n, T, seed=1, stream=0):
    return sample_noise(constants, np.linspace(0.0, T, n + 1), seed, stream, frame="rescaled")


def test_pure_rotation_limit():
    path = rescaled_path(ZERO, 20000, math.pi / 2)
    tr = integrate_em_rescaled(1.0, path, PlanarState(1.0, 0.0, 0.0, "rescaled"))
    end = tr.state(len(tr) - 1)
    assert abs(end.first) < 1e-3 and abs(end.second - 1.0) < 1e-3
    # Euler's rotation inflates the radius by O(dT)
    radius = math.hypot(end.first, end.second)
    assert 0 < radius - 1 < 2 * (math.pi / 2) / 20000


def test_no_rotation_no_noise_is_constant():
    tr = integrate_em_rescaled(0.0, rescaled_path(ZERO, 50, 1.0), PlanarState(0.3, -0.4, 0.0, "rescaled"))
    assert np.all(tr.first == 0.3) and np.all(tr.second == -0.4)


def test_frame_checks(hbar1, short_pinney):
    phys = sample_noise(hbar1, np.linspace(0, 1, 11), 1, 0)
    with pytest.raises(FrameError):
        integrate_em_rescaled(1.0, phys, PlanarState(0, 0, 0, "rescaled"))
    with pytest.raises(FrameError):
        integrate_em_physical(short_pinney, phys, PlanarState(0, 0, 0, "rescaled"))
    long = sample_noise(hbar1, np.linspace(0, 5, 11), 1, 0)
    with pytest.raises(RangeError):
        integrate_em_physical(short_pinney, long, PlanarState(0, 0, 0, "physical"))


def test_exact_solution_special_cases(hbar1):
    path = rescaled_path(ZERO, 100, 1.0)
    s = exact_solution_rescaled(2.0, path, 1.0, 0.5, 1.0)
    c, sn = math.cos(2.0), math.sin(2.0)
    assert s.first == pytest.approx(c - 0.5 * sn, abs=1e-15)
    assert s.second == pytest.approx(0.5 * c + sn, abs=1e-15)
    driven = rescaled_path(hbar1, 100, 1.0)
    s = exact_solution_rescaled(0.0, driven, 0.2, 0.1, 1.0)
    total = driven.increments.sum() / math.sqrt(2)
    assert s.first == pytest.approx(0.2 + total, abs=1e-14)
    assert s.second == pytest.approx(0.1 + total, abs=1e-14)


def test_exact_solution_refuses_off_grid_times(hbar1):
    with pytest.raises(GridError):
        exact_solution_rescaled(1.0, rescaled_path(hbar1, 10, 1.0), 0.0, 0.0, 0.55)


def test_exact_solution_solves_the_recursion_exactly():
    # With the closed form, X_{k+1} follows from X_k by an exact rotation plus
    # rotated noise: check against a direct step-by-step construction.
    rng = np.random.default_rng(4)
    grid = np.cumsum(np.concatenate([[0.0], rng.uniform(0.001, 0.02, 200)]))
    dW = rng.normal(size=200) * np.sqrt(np.diff(grid))
    X, Y = exact_rescaled_arrays(1.3, grid, dW, 0.4, -0.7)
    z = 0.4 - 0.7j
    for k in range(200):
        # rotate to t_{k+1} and add the kick applied at t_k, rotated by the remaining angle
        z = z * np.exp(1.3j * (grid[k + 1] - grid[k])) + (1 + 1j) / math.sqrt(2) * dW[k] * np.exp(
            1.3j * (grid[k + 1] - grid[k]))
    assert X[-1] == pytest.approx(z.real, abs=1e-12)
    assert Y[-1] == pytest.approx(z.imag, abs=1e-12)


def test_invariants_are_identity_along_exact_trajectories(hbar1):
    path = rescaled_path(hbar1, 500, 2.0, seed=9)
    tr = exact_trajectory_rescaled(1.0, path, 0.6, -0.9)
    for k in (0, 1, 250, 500):
        inv = compute_invariants(tr, path, k)
        assert inv.X0 == pytest.approx(0.6, abs=1e-12)
        assert inv.Y0 == pytest.approx(-0.9, abs=1e-12)
    with pytest.raises(IndexError):
        compute_invariants(tr, path, 501)


def test_invariant_drift_along_euler_decays(hbar1):
    ens = sample_ensemble(hbar1, np.linspace(0, 1, 4001), 3, range(4), frame="rescaled")
    drift = []
    for lvl in (16, 4, 1):
        grid = np.linspace(0, 1, 4000 // lvl + 1)
        inc = ens.increments.reshape(4, -1, lvl).sum(axis=2)
        X, Y = em_rescaled_arrays(1.0, grid, inc, 0.5, 0.5)
        x0, y0 = invariants_along(1.0, grid, inc, X, Y)
        drift.append(max(np.abs(x0 - 0.5).max(), np.abs(y0 - 0.5).max()))
    rate = np.log(np.array(drift[:-1]) / drift[1:]) / np.log(4)
    assert np.all(np.abs(rate - 1.0) < 0.2)


def test_euler_strong_order(hbar1):
    ens = sample_ensemble(hbar1, np.linspace(0, 1, 10001), 17, range(8), frame="rescaled")
    errs = []
    for lvl in (100, 10, 1):
        grid = np.linspace(0, 1, 10000 // lvl + 1)
        inc = ens.increments.reshape(8, -1, lvl).sum(axis=2)
        Xe, Ye = em_rescaled_arrays(1.0, grid, inc, 0.0, 1.0)
        Xx, Yx = exact_rescaled_arrays(1.0, grid, inc, 0.0, 1.0)
        errs.append(np.mean(np.maximum(np.abs(Xe - Xx).max(1), np.abs(Ye - Yx).max(1))))
    slope = np.polyfit(np.log([1e-2, 1e-3, 1e-4]), np.log(errs), 1)[0]
    assert abs(slope - 1.0) < 0.15


def test_physical_reduces_to_rescaled_for_unit_rho():
    sol = solve_pinney(FrequencyProfile.constant(1.0), 1.0, t_span=(0.0, 1.0))
    path = sample_noise(ZERO, np.linspace(0, 1, 101), 1, 0)
    a = integrate_em_physical(sol, path, PlanarState(1.0, 0.0, 0.0, "physical"))
    b = integrate_em_rescaled(1.0, NoisePath("rescaled", path.grid, path.increments, ZERO, 1, 0),
                              PlanarState(1.0, 0.0, 0.0, "rescaled"))
    assert np.allclose(a.first, b.first, atol=1e-13) and np.allclose(a.second, b.second, atol=1e-13)


def test_frame_equivalence_first_order(hbar1, short_pinney):
    fine = sample_noise(hbar1, np.linspace(0, 2, 4001), 21, 0)
    devs = []
    for lvl in (8, 2):
        grid = np.linspace(0, 2, 4000 // lvl + 1)
        p = NoisePath("physical", grid, fine.increments.reshape(-1, lvl).sum(1), hbar1, 21, 0)
        phys = map_to_rescaled(integrate_em_physical(short_pinney, p, PlanarState(0.3, 0.1, 0.0, "physical")),
                               short_pinney)
        r0 = short_pinney.rho(0.0)
        resc = integrate_em_rescaled(1.0, rescale_noise(p, short_pinney.warp),
                                     PlanarState(0.3 / r0, 0.1 / r0, 0.0, "rescaled"))
        devs.append(max(np.abs(phys.first - resc.first).max(), np.abs(phys.second - resc.second).max()))
    assert devs[0] / devs[1] == pytest.approx(4.0, rel=0.25)


def test_cross_frame_second_moments():
    # omega constant with rho at equilibrium (rho = 2**-0.5, T = 2t): the
    # physical ensemble mapped to the rescaled frame has the rescaled moments
    # E[X**2] = (hbar/2)(T - (1 - cos 2 Omega T) / (2 Omega)) and the same
    # with + for Y, from X = int dW (cos u - sin u) / sqrt2, u = Omega (T - tau).
    c = PhysicalConstants(1.0)
    sol = solve_pinney(FrequencyProfile.constant(2.0), 1.0, t_span=(0.0, 0.2))
    ens = sample_ensemble(c, np.linspace(0, 0.2, 201), 5, range(6000))
    ends = []
    for j in range(len(ens)):
        tr = map_to_rescaled(integrate_em_physical(sol, ens.path(j), PlanarState(0.0, 0.0, 0.0, "physical")), sol)
        ends.append((tr.first[-1], tr.second[-1]))
    ends = np.array(ends)
    T = 0.4
    half = (1 - math.cos(2 * T)) / 2
    se = math.sqrt(2 / len(ends))
    assert np.mean(ends[:, 0] ** 2) == pytest.approx(0.5 * (T - half), rel=4 * se + 0.02)
    assert np.mean(ends[:, 1] ** 2) == pytest.approx(0.5 * (T + half), rel=4 * se + 0.02)


def test_trajectory_csv(tmp_path, hbar1):
    path = rescaled_path(hbar1, 10, 0.1)
    tr = exact_trajectory_rescaled(1.0, path, 0.1, 0.2)
    rows = tr.to_csv(tmp_path / "t.csv").read_text().splitlines()
    assert rows[0] == "k,time,X,Y,X0_recomputed,Y0_recomputed"
    last = [float(v) for v in rows[-1].split(",")]
    assert last[4] == pytest.approx(0.1, abs=1e-12) and last[5] == pytest.approx(0.2, abs=1e-12)


class TestShortTime:
    def test_no_rotation_no_drift(self, hbar1):
        m = short_time_moments(0.0, hbar1, 0.0, 1.0, 1e-3, 20000, seed=3)
        assert abs(m.mean_dX) < 4 * m.se_dX and abs(m.mean_dY) < 4 * m.se_dY

    def test_drift_and_noise_variance(self, hbar1):
        m = short_time_moments(1.0, hbar1, 0.0, 1.0, 1e-3, 50000, seed=8)
        assert abs(m.mean_dX - (-1e-3)) <= 0.1e-3 + 4 * m.se_dX
        assert m.noise_var == pytest.approx(5e-4, rel=0.05)
        assert m.alpha2 == pytest.approx(-1.0) and m.beta2 == pytest.approx(0.0)
        assert m.eps == pytest.approx(math.sqrt(1e-3))

    def test_requires_large_ensemble(self, hbar1):
        with pytest.raises(ValueError):
            short_time_moments(1.0, hbar1, 0.0, 1.0, 1e-3, 10, seed=1)
