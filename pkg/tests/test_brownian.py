"""Brownian batches: stream stability, moments, export format."""

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as strat

from bspdelab import brownian as bw


def test_grid_validation():
    with pytest.raises(ValueError):
        bw.build_time_grid(-1.0, 4)
    with pytest.raises(ValueError):
        bw.build_time_grid(1.0, 0)
    g = bw.build_time_grid(0.5, 5)
    assert g.tau == 0.1
    np.testing.assert_allclose(g.times, [0, 0.1, 0.2, 0.3, 0.4, 0.5])


def test_same_seed_reproduces():
    g = bw.build_time_grid(1.0, 16)
    a = bw.sample_brownian(g, 100, seed=42)
    b = bw.sample_brownian(g, 100, seed=42)
    assert np.array_equal(a.increments, b.increments)
    c = bw.sample_brownian(g, 100, seed=43)
    assert not np.array_equal(a.increments, c.increments)


@settings(deadline=None, max_examples=20)
@given(strat.integers(min_value=1, max_value=50), strat.integers(min_value=1, max_value=80),
       strat.integers(min_value=0, max_value=2 ** 62))
def test_stream_stable_under_enlargement(n_small, extra, seed):
    # invariant: growing the batch leaves the first paths bit-identical
    g = bw.build_time_grid(1.0, 8)
    small = bw.sample_brownian(g, n_small, seed=seed)
    big = bw.sample_brownian(g, n_small + extra, seed=seed)
    assert np.array_equal(big.increments[:n_small], small.increments)


def test_moments_match_tau():
    # n = 1e5, J = 16: per-step mean within 5 SE of 0, variance within 5 SE of tau
    g = bw.build_time_grid(1.0, 16)
    batch = bw.sample_brownian(g, 100_000, seed=2024)
    means, variances, flag = bw.batch_moments(batch)
    assert not flag
    tau = g.tau
    se_mean = np.sqrt(tau / batch.n_paths)
    se_var = tau * np.sqrt(2.0 / (batch.n_paths - 1))
    assert np.all(np.abs(means) <= 5 * se_mean)
    assert np.all(np.abs(variances - tau) <= 5 * se_var)


def test_single_path_variance_flagged():
    g = bw.build_time_grid(1.0, 4)
    batch = bw.sample_brownian(g, 1, seed=0)
    means, variances, flag = bw.batch_moments(batch)
    assert flag and np.all(np.isnan(variances))
    np.testing.assert_allclose(means, batch.increments[0])


def test_antithetic_pairing():
    g = bw.build_time_grid(1.0, 8)
    batch = bw.sample_brownian(g, 10, seed=5, antithetic=True)
    np.testing.assert_array_equal(batch.increments[1::2], -batch.increments[0::2])
    # per-step sum over a full pairing is exactly zero
    np.testing.assert_allclose(batch.increments.sum(axis=0), 0.0, atol=1e-12)
    # odd path counts keep the leading base paths
    odd = bw.sample_brownian(g, 9, seed=5, antithetic=True)
    assert np.array_equal(odd.increments, batch.increments[:9])


def test_values_cumulative():
    g = bw.build_time_grid(1.0, 6)
    batch = bw.sample_brownian(g, 3, seed=9)
    vals = batch.values()
    assert vals.shape == (3, 7)
    np.testing.assert_allclose(vals[:, 0], 0.0)
    np.testing.assert_allclose(np.diff(vals, axis=1), batch.increments, atol=1e-14)


def test_export_round_trip(tmp_path):
    g = bw.build_time_grid(0.7, 12)
    batch = bw.sample_brownian(g, 37, seed=77)
    fn = tmp_path / "batch.bin"
    bw.save_batch(fn, batch)
    loaded = bw.load_batch(fn)
    assert loaded.seed == 77
    assert loaded.grid.n_steps == 12
    np.testing.assert_allclose(loaded.grid.horizon, 0.7, rtol=1e-15)
    assert np.array_equal(loaded.increments, batch.increments)


def test_export_layout_exact(tmp_path):
    # header is (seed, J, tau, n_paths) as little-endian 64-bit values
    g = bw.build_time_grid(1.0, 2)
    batch = bw.sample_brownian(g, 3, seed=11)
    fn = tmp_path / "layout.bin"
    bw.save_batch(fn, batch)
    raw = fn.read_bytes()
    assert len(raw) == 32 + 3 * 2 * 8
    assert np.frombuffer(raw[0:8], "<i8")[0] == 11
    assert np.frombuffer(raw[8:16], "<i8")[0] == 2
    assert np.frombuffer(raw[16:24], "<f8")[0] == 0.5
    assert np.frombuffer(raw[24:32], "<i8")[0] == 3
    body = np.frombuffer(raw[32:], "<f8").reshape(3, 2)
    assert np.array_equal(body, batch.increments)


def test_truncated_file_rejected(tmp_path):
    g = bw.build_time_grid(1.0, 4)
    batch = bw.sample_brownian(g, 5, seed=1)
    fn = tmp_path / "trunc.bin"
    bw.save_batch(fn, batch)
    fn.write_bytes(fn.read_bytes()[:-8])
    with pytest.raises(ValueError):
        bw.load_batch(fn)


def test_coarsen_sums_groups():
    g = bw.build_time_grid(1.0, 8)
    batch = bw.sample_brownian(g, 6, seed=3)
    coarse = bw.coarsen_batch(batch, 4)
    assert coarse.grid.n_steps == 2
    np.testing.assert_allclose(coarse.increments[:, 0], batch.increments[:, :4].sum(axis=1))
    # terminal value of each path is unchanged
    np.testing.assert_allclose(coarse.values()[:, -1], batch.values()[:, -1], atol=1e-14)
    with pytest.raises(ValueError):
        bw.coarsen_batch(batch, 3)


def test_gaussianity_rough():
    # increments / sqrt(tau) should be standard normal: check P(|Z|<1) to 5 SE
    g = bw.build_time_grid(2.0, 4)
    batch = bw.sample_brownian(g, 50_000, seed=8)
    z = batch.increments / np.sqrt(g.tau)
    frac = np.mean(np.abs(z) < 1.0)
    p = 0.6826894921370859
    se = np.sqrt(p * (1 - p) / z.size)
    assert abs(frac - p) <= 5 * se
