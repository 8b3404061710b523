import numpy as np
import pytest
from scipy import stats

from degen.rng import CounterRNG, philox4x32

# Random123 known-answer vectors for Philox4x32-10
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@pytest.mark.parametrize("ctr, key, expected", KAT)
def test_philox_known_answers(ctr, key, expected):
    out = philox4x32(np.array(ctr, dtype=np.uint32).reshape(4, 1), np.array(key, dtype=np.uint32))
    assert tuple(int(v) for v in np.asarray(out).reshape(4)) == expected


def test_normals_depend_only_on_path_and_step():
    rng = CounterRNG(42)
    full = rng.normals(np.arange(10, dtype=np.uint64), step=3, count=2)
    part = rng.normals(np.array([7, 2], dtype=np.uint64), step=3, count=2)
    assert np.array_equal(part[0], full[7])
    assert np.array_equal(part[1], full[2])


def test_streams_and_seeds_differ():
    paths = np.arange(100, dtype=np.uint64)
    a = CounterRNG(1).normals(paths, 0, 1)
    assert not np.array_equal(a, CounterRNG(2).normals(paths, 0, 1))
    assert not np.array_equal(a, CounterRNG(1).split(1).normals(paths, 0, 1))
    assert not np.array_equal(a, CounterRNG(1).normals(paths, 1, 1))


def test_normals_are_standard_normal():
    z = CounterRNG(0).normals(np.arange(20000, dtype=np.uint64), 0, 2).ravel()
    assert stats.kstest(z, "norm").pvalue > 1e-3
    u = CounterRNG(0).uniforms(np.arange(20000, dtype=np.uint64), 0, 1).ravel()
    assert np.all((u > 0) & (u < 1))
    assert stats.kstest(u, "uniform").pvalue > 1e-3
