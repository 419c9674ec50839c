import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitguard.errors import ConfigError, PrivacyError, ShapeError
from splitguard.privacy import (
    PrivacyConfig,
    calibrate_sigma,
    gaussian_mechanism,
    group_clients,
    microaggregate,
)


def bound_oracle(eps, delta, sens):
    mpmath.mp.dps = 30
    return float(sens * mpmath.sqrt(2 * mpmath.log(mpmath.mpf(1.25) / mpmath.mpf(delta))) / eps)


def test_calibrate_reference_value():
    assert calibrate_sigma(1.0, 1e-5, 1.0) == pytest.approx(bound_oracle(1, 1e-5, 1), abs=1e-12)
    assert calibrate_sigma(1.0, 1e-5, 1.0) == pytest.approx(4.8448, abs=1e-3)


def test_calibrate_homogeneity():
    base = calibrate_sigma(0.7, 1e-4, 1.0)
    assert calibrate_sigma(1.4, 1e-4, 1.0) == base / 2
    assert calibrate_sigma(0.7, 1e-4, 2.0) == 2 * base


@given(st.floats(0.05, 20), st.floats(1e-9, 0.5), st.floats(0.01, 10))
@settings(max_examples=200, deadline=None)
def test_calibrate_monotone(eps, delta, sens):
    s = calibrate_sigma(eps, delta, sens)
    assert s == pytest.approx(bound_oracle(eps, delta, sens), rel=1e-12)
    assert calibrate_sigma(eps * 1.1, delta, sens) < s
    assert calibrate_sigma(eps, min(delta * 1.1, 0.99), sens) < s
    assert calibrate_sigma(eps, delta, sens * 1.1) > s


@pytest.mark.parametrize("args", [(0, 1e-5, 1), (-1, 1e-5, 1), (1, 0, 1), (1, 1, 1), (1, 1e-5, 0)])
def test_calibrate_rejects(args):
    with pytest.raises(PrivacyError):
        calibrate_sigma(*args)


def test_calibrated_config_satisfies_bound():
    cfg = PrivacyConfig.calibrated(2.0, 1e-5, 1.0)
    assert math.sqrt(cfg.sigma2) >= bound_oracle(2.0, 1e-5, 1.0) - 1e-12
    assert cfg.dp_enabled


def test_config_consistency():
    with pytest.raises(ConfigError):
        PrivacyConfig(sigma2=0.0, dp_enabled=True)
    with pytest.raises(ConfigError):
        PrivacyConfig(k=1, ka_enabled=True)
    with pytest.raises(ConfigError):
        PrivacyConfig(sigma2=-0.1)


def test_gaussian_zero_variance_is_identity(rng):
    x = rng.random((3, 1, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(gaussian_mechanism(x, 0.0, rng), x)


def test_gaussian_statistics():
    # law of large numbers: mean within 0.001, std within 2% of sqrt(0.04) = 0.2
    x = np.zeros(10**6, np.float32)
    noise = gaussian_mechanism(x, 0.04, np.random.default_rng(0)).astype(np.float64) - x
    assert abs(noise.mean()) <= 0.001
    assert abs(noise.std() - 0.2) <= 0.02 * 0.2


def test_gaussian_seeding(rng):
    x = rng.random((4, 4)).astype(np.float32)
    a = gaussian_mechanism(x, 0.1, np.random.default_rng(9))
    b = gaussian_mechanism(x, 0.1, np.random.default_rng(9))
    c = gaussian_mechanism(x, 0.1, np.random.default_rng(10))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.dtype == np.float32
    with pytest.raises(PrivacyError):
        gaussian_mechanism(x, -1.0, rng)


def test_gaussian_fresh_noise_per_call(rng):
    x = np.zeros(16, np.float32)
    assert not np.array_equal(gaussian_mechanism(x, 0.1, rng), gaussian_mechanism(x, 0.1, rng))


def test_group_sizes_examples(rng):
    sizes = sorted(len(g) for g in group_clients(range(10), 3, rng).groups)
    assert sizes == [3, 3, 4]
    assert sorted(len(g) for g in group_clients(range(6), 3, rng).groups) == [3, 3]
    singles = group_clients(range(5), 1, rng).groups
    assert sorted(singles) == [(i,) for i in range(5)]
    with pytest.raises(PrivacyError):
        group_clients(range(4), 5, rng)


def test_grouping_is_a_partition_over_many_triples():
    meta = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(meta.integers(1, 60))
        k = int(meta.integers(1, n + 1))
        seed = int(meta.integers(0, 2**32))
        a = group_clients(range(n), k, np.random.default_rng(seed))
        members = [c for g in a.groups for c in g]
        assert sorted(members) == list(range(n))
        assert len(a.groups) == n // k
        sizes = [len(g) for g in a.groups]
        assert min(sizes) >= k and max(sizes) - min(sizes) <= 1
        if n % k <= n // k:
            assert set(sizes) <= {k, k + 1}


def test_grouping_redraws_each_call():
    r = np.random.default_rng(0)
    draws = {group_clients(range(10), 2, r).groups for _ in range(10)}
    assert len(draws) > 1


def test_microaggregate_examples(rng):
    a = rng.random((2, 3, 4)).astype(np.float32)
    np.testing.assert_array_equal(microaggregate([a, a, a], ["x", "y", "z"]), a)
    b = rng.random((2, 3, 4)).astype(np.float32)
    np.testing.assert_allclose(microaggregate([a, b]), (a.astype(np.float64) + b) / 2, atol=1e-7)


def test_microaggregate_matches_brute_force(rng):
    ts = [rng.standard_normal((2, 3, 3)).astype(np.float32) for _ in range(5)]
    out = microaggregate(ts, list(range(5)))
    it = np.nditer(out, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        brute = sum(float(t[idx]) for t in ts) / 5
        assert abs(float(out[idx]) - brute) <= 1e-6


def test_microaggregate_names_offenders(rng):
    with pytest.raises(ShapeError) as info:
        microaggregate([np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2))], ["a", "b", "c"])
    assert info.value.context["offenders"] == ["b"]


@given(st.integers(1, 6), st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_mean_permutation_invariant_and_bounded(m, seed):
    r = np.random.default_rng(seed)
    ts = [r.standard_normal((3, 4)).astype(np.float32) for _ in range(m)]
    out = microaggregate(ts)
    perm = [ts[i] for i in r.permutation(m)]
    np.testing.assert_allclose(microaggregate(perm), out, atol=1e-7)
    stack = np.stack(ts)
    assert np.all(out >= stack.min(axis=0) - 1e-7)
    assert np.all(out <= stack.max(axis=0) + 1e-7)
