import numpy as np
from hypothesis import given, strategies as st

from oracles import SplitMix64
from stochimg import kernels
from stochimg.rng import Stream, derive_key, uniform, word

u64 = st.integers(0, 2**64 - 1)


def test_first_words_match_published_splitmix64_sequence():
    assert [word(0, i) for i in range(3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@given(u64, st.integers(0, 50))
def test_counter_access_equals_sequential_generator(key, count):
    g = SplitMix64(key)
    seq = [g.next() for _ in range(count + 1)]
    assert seq[count] == word(key, count)


@given(u64, st.integers(0, 2**40))
def test_uniform_in_unit_interval_with_53_bit_resolution(key, counter):
    u = uniform(key, counter)
    assert 0.0 <= u < 1.0
    assert (u * 2**53).is_integer()


@given(u64, st.integers(0, 1000), st.integers(1, 20))
def test_stream_continues_from_start(key, start, n):
    s = Stream(key, start)
    got = [s.next_uniform() for _ in range(n)]
    assert got == [uniform(key, start + i) for i in range(n)]
    assert s.counter == start + n


def test_vector_uniforms_match_scalar():
    keys = np.array([0, 1, 2**63 + 5], dtype=np.uint64)
    counters = np.arange(7, dtype=np.uint64)
    mat = kernels.uniforms(keys, counters)
    for i, k in enumerate(keys.tolist()):
        assert mat[i].tolist() == [uniform(k, c) for c in range(7)]


def test_derive_key_is_stable_and_type_sensitive():
    assert derive_key(1, "a") == derive_key(1, "a")
    assert derive_key(1, "a") != derive_key("1", "a")
    assert derive_key(1.0) != derive_key(1)
    assert derive_key(True) != derive_key(1)
    assert derive_key("ab", "c") != derive_key("a", "bc")
    assert 0 <= derive_key(0) < 2**64


def test_uniform_mean_and_variance():
    u = kernels.uniforms(np.array([derive_key("moments")], dtype=np.uint64),
                         np.arange(200_000, dtype=np.uint64))[0]
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / u.size)
    assert abs(u.var() - 1 / 12) < 0.002
