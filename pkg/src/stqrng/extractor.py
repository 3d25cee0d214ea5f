"""Toeplitz hashing over GF(2) and the output string K = (Z, S).

The seed s of length N + l - 1 defines the l x N Toeplitz matrix
T[i, j] = s[i - j + N - 1]: its first column, read top to bottom, is
s[N-1 : N-1+l] and its first row, read left to right, is s[N-1], ..., s[0].
Then Z = T r is the slice [N-1, N-1+l) of the integer convolution s * r
taken mod 2.

Security rests on the seed being uniform and independent of R; it must come
from an external trusted source, never from the simulation generator.  The
leftover hash lemma gives distance 2 eps_s + 2^{-(H_min - l + 2)/2} from
uniform for l chosen by the rate module.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.linalg import toeplitz
from scipy.signal import fftconvolve

DEFAULT_BLOCK = 1 << 12
# float64 FFT convolution is exact for integer sums well below 2^52; a block of
# 2^20 ones convolved with a window of ones stays below 2^21
MAX_BLOCK = 1 << 20


def _bits(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint8)
    if a.ndim != 1:
        raise ValueError("bit strings are one-dimensional")
    if a.size and a.max() > 1:
        raise ValueError("bit strings hold 0/1 values")
    return a


def seed_length(input_len: int, out_len: int) -> int:
    if out_len < 1:
        raise ValueError("out_len must be at least 1")
    if input_len < 1:
        raise ValueError("input_len must be at least 1")
    return input_len + out_len - 1


def seed_from_column_row(first_col, first_row) -> np.ndarray:
    """Seed for the Toeplitz matrix with the given first column and first row."""
    col, row = _bits(first_col), _bits(first_row)
    if col[0] != row[0]:
        raise ValueError("first column and first row disagree on the corner entry")
    return np.concatenate([row[::-1], col[1:]])


def toeplitz_matrix(seed, input_len: int, out_len: int) -> np.ndarray:
    s = _bits(seed)
    n = input_len
    if len(s) != seed_length(n, out_len):
        raise ValueError(f"seed length {len(s)} != {seed_length(n, out_len)}")
    return toeplitz(s[n - 1:], s[n - 1::-1])


def extract_naive(r, seed, out_len: int) -> np.ndarray:
    """Reference matrix-vector product mod 2."""
    r = _bits(r)
    T = toeplitz_matrix(seed, len(r), out_len).astype(np.int64)
    return ((T @ r.astype(np.int64)) & 1).astype(np.uint8)


def extract(r, seed, out_len: int, block: int | None = None) -> np.ndarray:
    """Z = T_S r over GF(2) by block convolution (overlap-add with XOR).

    The input is cut into blocks of ``block`` bits; each block's contribution
    comes from one FFT convolution with the matching seed window and is XORed
    into Z, so the result does not depend on the block size.  The default
    block is about the output length, which balances FFT size against count.
    """
    r = _bits(r)
    s = _bits(seed)
    n, ell = len(r), out_len
    if len(s) != seed_length(n, ell):
        raise ValueError(f"seed length {len(s)} != {seed_length(n, ell)}")
    if block is None:
        block = int(min(MAX_BLOCK, max(DEFAULT_BLOCK, 1 << max(ell - 1, 1).bit_length())))
    if not 1 <= block <= MAX_BLOCK:
        raise ValueError(f"block must lie in [1, {MAX_BLOCK}]")
    z = np.zeros(ell, dtype=np.uint8)
    for jb in range(0, n, block):
        rb = r[jb:jb + block]
        bsz = len(rb)
        if not rb.any():
            continue
        # Z_i += sum_k s[i + N-1 - jb - k] rb[k]; window w[t] = s[N - jb - bsz + t]
        lo = n - jb - bsz
        w = s[lo:n - 1 - jb + ell]
        conv = fftconvolve(w.astype(np.float64), rb.astype(np.float64))
        part = np.rint(conv[bsz - 1:bsz - 1 + ell]).astype(np.int64) & 1
        z ^= part.astype(np.uint8)
    return z


def finalize_output(z, seed) -> np.ndarray:
    """K = Z || S, Z first."""
    return np.concatenate([_bits(z), _bits(seed)])


def split_output(k, out_len: int) -> tuple[np.ndarray, np.ndarray]:
    k = _bits(k)
    if not 0 <= out_len <= len(k):
        raise ValueError("out_len outside the output string")
    return k[:out_len], k[out_len:]


def write_bits(path: str | Path, bits) -> int:
    """Write bits MSB-first within bytes, zero-padded to a whole byte; returns the bit count."""
    b = _bits(bits)
    Path(path).write_bytes(np.packbits(b).tobytes())
    return len(b)


def read_bits(path: str | Path, n_bits: int | None = None) -> np.ndarray:
    """Read MSB-first bits; ``n_bits`` trims the trailing padding."""
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    bits = np.unpackbits(data)
    if n_bits is not None:
        if n_bits > len(bits):
            raise ValueError(f"file holds {len(bits)} bits, {n_bits} requested")
        bits = bits[:n_bits]
    return bits
