import numpy as np
import pytest

from mkvsim import rng


def test_same_inputs_reproduce_exactly():
    a = rng.derive_stream(12345, 7, rng.ROLE_COMMON).standard_normal(64)
    b = rng.derive_stream(12345, 7, rng.ROLE_COMMON).standard_normal(64)
    assert np.array_equal(a, b)


def test_realizations_yield_distinct_streams():
    a = rng.derive_stream(9, 0, rng.ROLE_PARTICLE).standard_normal(64)
    b = rng.derive_stream(9, 1, rng.ROLE_PARTICLE).standard_normal(64)
    assert not np.array_equal(a, b)
    # collision scan over 1e6 draws: no positional coincidences between the
    # two streams (probability ~1e-10 if they were independent, 0 if healthy)
    long_a = rng.derive_stream(9, 0, rng.ROLE_PARTICLE).standard_normal(1_000_000)
    long_b = rng.derive_stream(9, 1, rng.ROLE_PARTICLE).standard_normal(1_000_000)
    assert int(np.sum(long_a == long_b)) == 0


def test_roles_yield_distinct_streams():
    draws = [
        rng.derive_stream(5, 3, role).standard_normal(32)
        for role in (rng.ROLE_COMMON, rng.ROLE_AUX_COMMON, rng.ROLE_PARTICLE, rng.ROLE_INIT)
    ]
    for i in range(len(draws)):
        for j in range(i + 1, len(draws)):
            assert not np.array_equal(draws[i], draws[j])


def test_keys_are_collision_free():
    seen = set()
    for seed in (0, 1, 2**63, 2**64 - 1):
        for realization in (0, 1, 17, 2**40 - 1):
            for role in (0, 1, 2, 3):
                for index in (0, 1, 2**16 - 1):
                    seen.add(rng.stream_key(seed, realization, role, index))
    assert len(seen) == 4 * 4 * 4 * 3


def test_range_validation():
    with pytest.raises(ValueError):
        rng.stream_key(-1, 0, rng.ROLE_COMMON)
    with pytest.raises(ValueError):
        rng.stream_key(0, 2**40, rng.ROLE_COMMON)
    with pytest.raises(ValueError):
        rng.stream_key(0, 0, 99)
    with pytest.raises(ValueError):
        rng.stream_key(0, 0, rng.ROLE_COMMON, 2**16)


def test_stream_set_overrides_pin_channels():
    # coupled legs share particle streams by construction
    a = rng.stream_set(7, 0)
    b = rng.stream_set(7, 1, particle_realization=0)
    assert np.array_equal(a.particles.standard_normal(16), b.particles.standard_normal(16))
    c = rng.stream_set(7, 1)
    assert not np.array_equal(
        rng.stream_set(7, 0).common.standard_normal(16), c.common.standard_normal(16)
    )
    d = rng.stream_set(7, 5, common_realization=0)
    assert np.array_equal(
        rng.stream_set(7, 0).common.standard_normal(16), d.common.standard_normal(16)
    )
