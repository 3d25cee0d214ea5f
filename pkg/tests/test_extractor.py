import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import toeplitz_product_oracle
from stqrng.extractor import (
    extract,
    extract_naive,
    finalize_output,
    read_bits,
    seed_from_column_row,
    seed_length,
    split_output,
    toeplitz_matrix,
    write_bits,
)


def test_example_from_column_and_row():
    s = seed_from_column_row([1, 0], [1, 1, 0])
    assert list(s) == [0, 1, 1, 0]
    T = toeplitz_matrix(s, 3, 2)
    assert T.tolist() == [[1, 1, 0], [0, 1, 1]]
    assert list(extract([1, 0, 1], s, 2)) == [1, 1]
    assert list(toeplitz_product_oracle([1, 0, 1], [1, 0], [1, 1, 0])) == [1, 1]


def test_zero_input():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 2, seed_length(100, 40))
    assert not extract(np.zeros(100, np.uint8), s, 40).any()


def test_linearity():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n, ell = int(rng.integers(1, 200)), int(rng.integers(1, 100))
        s = rng.integers(0, 2, seed_length(n, ell))
        a, b = rng.integers(0, 2, n), rng.integers(0, 2, n)
        assert np.array_equal(extract(a ^ b, s, ell), extract(a, s, ell) ^ extract(b, s, ell))


def test_two_universal_exhaustive():
    n, ell = 6, 3
    seeds = [np.array(v, np.uint8) for v in itertools.product([0, 1], repeat=seed_length(n, ell))]
    assert len(seeds) == 2**8
    # hashes of every input under every seed, as 3-bit integers
    inputs = np.array(list(itertools.product([0, 1], repeat=n)), np.int64)
    weights = np.array([4, 2, 1])
    H = np.array([(toeplitz_matrix(s, n, ell).astype(np.int64) @ inputs.T & 1).T @ weights for s in seeds])
    for i in range(len(inputs)):
        for j in range(i + 1, len(inputs)):
            assert np.count_nonzero(H[:, i] == H[:, j]) * 8 == len(seeds)


def test_fast_path_matches_naive():
    rng = np.random.default_rng(2)
    for k in range(1000):
        n = int(rng.integers(1, 2**16 + 1)) if k % 50 == 0 else int(rng.integers(1, 3000))
        ell = int(rng.integers(1, min(n, 512) + 1))
        s = rng.integers(0, 2, seed_length(n, ell))
        r = rng.integers(0, 2, n)
        assert np.array_equal(extract(r, s, ell), extract_naive(r, s, ell)), (n, ell)


@given(st.integers(1, 3000), st.integers(1, 300), st.integers(1, 2**11), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_block_size_does_not_matter(n, ell, block, seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, seed_length(n, ell))
    r = rng.integers(0, 2, n)
    assert np.array_equal(extract(r, s, ell, block=block), extract(r, s, ell))


def test_long_output_matches_column_oracle():
    rng = np.random.default_rng(3)
    n, ell = 5000, 3000
    col, row = rng.integers(0, 2, ell), rng.integers(0, 2, n)
    row[0] = col[0]
    r = rng.integers(0, 2, n)
    assert np.array_equal(extract(r, seed_from_column_row(col, row), ell), toeplitz_product_oracle(r, col, row))


def test_length_mismatch():
    with pytest.raises(ValueError):
        extract([1, 0, 1], [0, 1, 1], 2)
    with pytest.raises(ValueError):
        seed_from_column_row([1, 0], [0, 1])
    with pytest.raises(ValueError):
        extract([1, 2], [0, 1, 1], 2)


def test_output_order_and_split():
    rng = np.random.default_rng(4)
    z, s = rng.integers(0, 2, 37), rng.integers(0, 2, 80)
    K = finalize_output(z, s)
    assert len(K) == 117 and np.array_equal(K[:37], z)
    zz, ss = split_output(K, 37)
    assert np.array_equal(zz, z) and np.array_equal(ss, s)
    assert np.array_equal(finalize_output([], s), s)


def test_file_bits_are_msb_first(tmp_path):
    p = tmp_path / "k.bin"
    assert write_bits(p, [1, 0, 0, 0, 0, 0, 0, 1, 1, 1]) == 10
    assert p.read_bytes() == bytes([0x81, 0xC0])
    assert list(read_bits(p, 10)) == [1, 0, 0, 0, 0, 0, 0, 1, 1, 1]
    with pytest.raises(ValueError):
        read_bits(p, 17)


def test_shipped_test_vectors():
    from pathlib import Path

    import json

    vec = json.loads((Path(__file__).parents[1] / "fixtures" / "bit_vectors.json").read_text())
    for case in vec["cases"]:
        bits = np.array([int(c) for c in case["bits"]], np.uint8)
        assert np.packbits(bits).tobytes().hex() == case["hex"]
