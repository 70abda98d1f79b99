# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Outputs are bit-identical to ``_kernels_py``."""

from libc.stdint cimport int64_t, uint64_t

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix64_fill(uint64_t state, uint64_t[::1] out):
    """Fill ``out`` with consecutive SplitMix64 outputs; return the advanced state."""
    cdef Py_ssize_t i, n = out.shape[0]
    with nogil:
        for i in range(n):
            state += GAMMA
            out[i] = _mix(state)
    return state


def fisher_yates(int64_t[::1] items, uint64_t state):
    """Shuffle ``items`` in place, drawing j = next % (i + 1) for i = n-1 .. 1."""
    cdef Py_ssize_t i, j, n = items.shape[0]
    cdef int64_t tmp
    with nogil:
        i = n - 1
        while i > 0:
            state += GAMMA
            j = <Py_ssize_t>(_mix(state) % <uint64_t>(i + 1))
            tmp = items[i]
            items[i] = items[j]
            items[j] = tmp
            i -= 1
    return state


ctypedef fused floating_in:
    float
    double


def accumulate(double[::1] acc, floating_in[::1] x):
    """acc += x, elementwise, widening x to double."""
    cdef Py_ssize_t i, n = acc.shape[0]
    if x.shape[0] != n:
        raise ValueError(f"length mismatch: {n} vs {x.shape[0]}")
    with nogil:
        for i in range(n):
            acc[i] += <double>x[i]
