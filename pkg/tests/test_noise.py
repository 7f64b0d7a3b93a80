import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkq.errors import FrameError
from hkq.kernel import FrequencyProfile, PhysicalConstants, solve_pinney, warp_time
from hkq.noise import (CorrelationAccumulator, NoiseEnsemble, estimate_correlation, read_hknz,
                       rescale_noise, sample_ensemble, sample_noise, streamed_correlation,
                       write_hknz)


def test_zero_hbar_gives_zero_increments():
    p = sample_noise(PhysicalConstants(0.0), np.linspace(0, 1, 11), seed=1, stream=0)
    assert np.all(p.increments == 0.0)


def test_empty_grid_is_rejected(hbar1):
    with pytest.raises(ValueError):
        sample_noise(hbar1, [], seed=1, stream=0)
    with pytest.raises(ValueError):
        sample_noise(hbar1, [0.0, 0.5, 0.4], seed=1, stream=0)


def test_same_seed_and_stream_reproduce(hbar1):
    g = np.linspace(0, 1, 101)
    a = sample_noise(hbar1, g, 99, 3)
    b = sample_noise(hbar1, g, 99, 3)
    c = sample_noise(hbar1, g, 99, 4)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, c.increments)


def test_ensemble_rows_match_single_paths_for_any_thread_count(hbar1):
    g = np.linspace(0, 1, 51)
    e1 = sample_ensemble(hbar1, g, 5, range(10, 30), threads=1)
    e4 = sample_ensemble(hbar1, g, 5, range(10, 30), threads=4)
    assert np.array_equal(e1.increments, e4.increments)
    assert np.array_equal(e1.increments[7], sample_noise(hbar1, g, 5, 17).increments)


def test_variance_scales_with_step():
    # nonuniform grid: Var(dW_k) = hbar dt_k
    g = np.concatenate([[0.0], np.cumsum(np.tile([0.01, 0.04], 20))])
    ens = sample_ensemble(PhysicalConstants(2.0), g, 3, range(20000))
    ratio = ens.increments.var(axis=0) / (2.0 * np.diff(g))
    assert np.all(np.abs(ratio - 1) < 5 * math.sqrt(2 / 20000))


def test_distinct_streams_uncorrelated(hbar1):
    g = np.linspace(0, 1, 1001)
    a = sample_noise(hbar1, g, 11, 0).increments
    b = sample_noise(hbar1, g, 11, 1).increments
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 4 / math.sqrt(a.size)


def test_rescale_identity_for_unit_rho(hbar1):
    sol = solve_pinney(FrequencyProfile.constant(1.0), 1.0, t_span=(0.0, 2.0))
    p = sample_noise(hbar1, np.linspace(0, 2, 41), 1, 0)
    q = rescale_noise(p, sol.warp)
    assert q.frame == "rescaled"
    assert np.allclose(q.increments, p.increments, rtol=1e-14)
    assert np.allclose(q.grid, p.grid, atol=1e-13)


def test_rescale_constant_rho_stretches_grid(hbar1):
    sol = solve_pinney(FrequencyProfile.constant(2.0), 1.0, t_span=(0.0, 2.0))
    assert sol.rho(1.0) == pytest.approx(2**-0.5)
    p = sample_noise(hbar1, np.linspace(0, 2, 41), 1, 0)
    q = rescale_noise(p, sol.warp)
    assert np.allclose(q.increments, math.sqrt(2) * p.increments, rtol=1e-12)
    assert np.allclose(np.diff(q.grid), 2 * np.diff(p.grid), rtol=1e-12)
    # per-step variance hbar dT_k = 2 hbar dt_k
    ens = sample_ensemble(hbar1, np.linspace(0, 2, 41), 2, range(20000))
    qe = rescale_noise(ens, sol.warp)
    assert np.allclose(qe.increments.var(axis=0) / np.diff(qe.grid), 1.0, atol=0.05)


def test_rescale_preserves_total_path(hbar1, short_pinney):
    p = sample_noise(hbar1, np.linspace(0, 4, 401), 8, 0)
    q = rescale_noise(p, short_pinney.warp)
    ito = math.fsum(p.increments / short_pinney.rho(p.grid[:-1]))
    assert math.fsum(q.increments) == pytest.approx(ito, rel=1e-14, abs=1e-15)


def test_left_and_midpoint_rescaling_converge(hbar1, short_pinney):
    diffs = []
    for n in (100, 400, 1600):
        p = sample_noise(hbar1, np.linspace(0, 4, n + 1), 8, 0)
        a = rescale_noise(p, short_pinney.warp, "left").increments
        b = rescale_noise(p, short_pinney.warp, "midpoint").increments
        diffs.append(np.max(np.abs(a - b) / np.abs(a)))
    assert diffs[1] < diffs[0] / 3 and diffs[2] < diffs[1] / 3


def test_rescale_requires_physical_frame(hbar1, short_pinney):
    p = sample_noise(hbar1, np.linspace(0, 1, 11), 1, 0, frame="rescaled")
    with pytest.raises(FrameError):
        rescale_noise(p, short_pinney.warp)


def test_heterogeneous_paths_rejected(hbar1):
    a = sample_noise(hbar1, np.linspace(0, 1, 11), 1, 0)
    b = sample_noise(hbar1, np.linspace(0, 1, 12), 1, 1)
    with pytest.raises(ValueError):
        estimate_correlation([a, b], 2)


def test_zero_paths_give_zero_bins():
    paths = [sample_noise(PhysicalConstants(0.0), np.linspace(0, 1, 21), 1, j) for j in range(5)]
    est = estimate_correlation(paths, 3)
    assert np.all(est.mean == 0) and np.all(est.diag == 0) and np.all(est.lag_values == 0)


def test_physical_correlation_contract(hbar1):
    g = np.arange(51) * 1e-2
    est = streamed_correlation(hbar1, g, 77, 40000, 4)
    assert np.all(np.abs(est.diag / 100.0 - 1) < 0.05)
    assert np.all(np.abs(est.lag_values) < 4.5 * est.lag_se)
    assert est.cumulative_slope() == pytest.approx(1.0, rel=0.05)


def test_standard_errors_scale_inverse_sqrt_m(hbar1):
    g = np.arange(41) * 1e-2
    a = streamed_correlation(hbar1, g, 4, 10000, 2)
    b = streamed_correlation(hbar1, g, 4, 40000, 2)
    ratio = np.median(a.mean_se / b.mean_se)
    assert ratio == pytest.approx(2.0, rel=0.05)
    assert np.median(a.lag_se / b.lag_se) == pytest.approx(2.0, rel=0.05)


def test_rescaled_whiteness_on_nonuniform_grid(hbar1, short_pinney):
    g = np.linspace(0, 4, 201)
    est = streamed_correlation(hbar1, g, 31, 40000, 3, warp=short_pinney.warp)
    assert est.frame == "rescaled"
    assert np.allclose(est.grid, warp_time(short_pinney.warp, g))
    assert np.all(np.abs(est.diag_mass - 1.0) < 0.05)
    assert np.all(np.abs(est.lag_values) < 4.5 * est.lag_se)


def test_streamed_result_independent_of_threads(hbar1, short_pinney):
    g = np.linspace(0, 4, 101)
    a = streamed_correlation(hbar1, g, 3, 6000, 2, warp=short_pinney.warp, chunk=1000, threads=1)
    b = streamed_correlation(hbar1, g, 3, 6000, 2, warp=short_pinney.warp, chunk=1000, threads=3)
    assert np.array_equal(a.diag, b.diag) and np.array_equal(a.lag_values, b.lag_values)


def test_merge_is_order_insensitive(hbar1):
    g = np.linspace(0, 1, 31)
    ens = sample_ensemble(hbar1, g, 2, range(3000))
    chunks = np.array_split(ens.increments, 7)
    parts = [CorrelationAccumulator(g, 3).update(c) for c in chunks]
    fwd = parts[0].spawn()
    for p in parts:
        fwd.merge(p)
    rev = parts[0].spawn()
    for p in reversed(parts):
        rev.merge(p)
    a, b = fwd.result(), rev.result()
    assert np.array_equal(a.diag, b.diag) and np.array_equal(a.lag_values, b.lag_values)
    direct = estimate_correlation(ens, 3)
    assert np.allclose(direct.diag, a.diag, rtol=1e-13)


def test_hknz_round_trip(tmp_path, hbar1):
    ens = sample_ensemble(hbar1, np.linspace(0, 1, 17), 123, [4, 9, 2**40])
    path = write_hknz(tmp_path / "e.hknz", ens)
    raw = path.read_bytes()
    assert raw[:4] == b"HKNZ"
    back = read_hknz(path)
    assert isinstance(back, NoiseEnsemble)
    assert np.array_equal(back.increments, ens.increments)
    assert np.array_equal(back.grid, ens.grid)
    assert back.seed == 123 and list(back.streams) == [4, 9, 2**40]
    assert back.constants.hbar == 1.0


def test_hknz_rejects_bad_magic(tmp_path):
    f = tmp_path / "bad.hknz"
    f.write_bytes(b"NOPE" + bytes(60))
    with pytest.raises(ValueError):
        read_hknz(f)


def test_csv_exports(tmp_path, hbar1):
    ens = sample_ensemble(hbar1, np.linspace(0, 1, 5), 1, [0, 1])
    text = ens.to_csv(tmp_path / "e.csv").read_text().splitlines()
    assert text[0] == "stream,k,time,increment" and len(text) == 9
    text = ens.path(1).to_csv(tmp_path / "p.csv").read_text().splitlines()
    assert text[0] == "k,time,increment" and len(text) == 5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), stream=st.integers(0, 2**64 - 1),
       hbar=st.floats(0.0, 10.0))
def test_increments_finite_and_reproducible(seed, stream, hbar):
    c = PhysicalConstants(hbar)
    g = np.linspace(0.0, 1.0, 9)
    a = sample_noise(c, g, seed, stream)
    assert np.all(np.isfinite(a.increments))
    assert np.array_equal(a.increments, sample_noise(c, g, seed, stream).increments)
    assert np.allclose(a.brownian()[-1], a.increments.sum())
