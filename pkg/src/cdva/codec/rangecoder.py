"""Adaptive binary range coder.

Carry-propagating range coder with 12-bit probability states (probability
of a 0 bit), adaptation shift 5, 32-bit range renormalised below 2**24, and
a byte cache for carries. Bypass ("direct") bits halve the range instead of
using a probability. The encoder flushes five bytes; the first output byte
is always zero.

Encoding takes a flat decision list, where ``ctx < 0`` marks a bypass bit.
Decoding is done by the section-specific kernels elsewhere in the package,
which all call :func:`dec_bit` / :func:`dec_direct` with a three-slot state
array ``[range, code, pos]``.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

PROB_BITS = 12
PROB_ONE = 1 << PROB_BITS
PROB_INIT = PROB_ONE // 2
ADAPT_SHIFT = 5
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


@njit(cache=True)
def _shift_low(es, out):
    # es = [low, range, cache, cache_size, n_out]
    low = es[0]
    if low < 0xFF000000 or low > MASK32:
        carry = low >> 32
        temp = es[2]
        while True:
            out[es[4]] = (temp + carry) & 0xFF
            es[4] += 1
            temp = 0xFF
            es[3] -= 1
            if es[3] == 0:
                break
        es[2] = (low >> 24) & 0xFF
    es[3] += 1
    es[0] = (low & 0x00FFFFFF) << 8


@njit(cache=True)
def _encode(bits, ctxs, nctx):
    probs = np.full(max(nctx, 1), PROB_INIT, np.int64)
    out = np.zeros(len(bits) + 16, np.uint8)
    es = np.array([0, MASK32, 0, 1, 0], np.int64)
    for i in range(len(bits)):
        c = ctxs[i]
        rng = es[1]
        if c >= 0:
            p = probs[c]
            bound = (rng >> PROB_BITS) * p
            if bits[i] == 0:
                rng = bound
                probs[c] = p + ((PROB_ONE - p) >> ADAPT_SHIFT)
            else:
                es[0] += bound
                rng -= bound
                probs[c] = p - (p >> ADAPT_SHIFT)
        else:
            rng >>= 1
            if bits[i]:
                es[0] += rng
        while rng < TOP:
            rng = (rng << 8) & MASK32
            es[1] = rng
            _shift_low(es, out)
        es[1] = rng
    for _ in range(5):
        _shift_low(es, out)
    return out[:es[4]]


def encode_decisions(bits, ctxs, nctx: int) -> bytes:
    """Code a sequence of binary decisions; ``ctxs[i] < 0`` codes bit i in bypass mode."""
    b = np.ascontiguousarray(bits, dtype=np.uint8)
    c = np.ascontiguousarray(ctxs, dtype=np.int64)
    if len(b) != len(c):
        raise ValueError("bits and contexts differ in length")
    return _encode(b, c, nctx).tobytes()


@njit(cache=True)
def _byte(data, i):
    if i < len(data):
        return np.int64(data[i])
    return np.int64(0)


@njit(cache=True)
def dec_init(data, st):
    code = np.int64(0)
    for i in range(5):
        code = ((code << 8) | _byte(data, i)) & MASK32
    st[0] = MASK32
    st[1] = code
    st[2] = 5


@njit(cache=True)
def _normalize(data, st, rng, code):
    while rng < TOP:
        rng = (rng << 8) & MASK32
        code = ((code << 8) | _byte(data, st[2])) & MASK32
        st[2] += 1
    st[0] = rng
    st[1] = code


@njit(cache=True)
def dec_bit(data, st, probs, ctx):
    rng = st[0]
    code = st[1]
    p = probs[ctx]
    bound = (rng >> PROB_BITS) * p
    if code < bound:
        rng = bound
        probs[ctx] = p + ((PROB_ONE - p) >> ADAPT_SHIFT)
        bit = 0
    else:
        code -= bound
        rng -= bound
        probs[ctx] = p - (p >> ADAPT_SHIFT)
        bit = 1
    _normalize(data, st, rng, code)
    return bit


@njit(cache=True)
def dec_direct(data, st):
    rng = st[0] >> 1
    code = st[1]
    bit = 0
    if code >= rng:
        code -= rng
        bit = 1
    _normalize(data, st, rng, code)
    return bit


@njit(cache=True)
def dec_direct_bits(data, st, nbits):
    v = 0
    for _ in range(nbits):
        v = (v << 1) | dec_direct(data, st)
    return v


@njit(cache=True)
def _decode_generic(data, ctxs, nctx):
    probs = np.full(max(nctx, 1), PROB_INIT, np.int64)
    st = np.zeros(3, np.int64)
    dec_init(data, st)
    out = np.zeros(len(ctxs), np.uint8)
    for i in range(len(ctxs)):
        if ctxs[i] >= 0:
            out[i] = dec_bit(data, st, probs, ctxs[i])
        else:
            out[i] = dec_direct(data, st)
    return out, st[2]


def decode_decisions(data: bytes, ctxs, nctx: int) -> np.ndarray:
    """Inverse of :func:`encode_decisions` when the context sequence is known up front."""
    arr = np.frombuffer(data, dtype=np.uint8)
    out, _ = _decode_generic(arr, np.ascontiguousarray(ctxs, dtype=np.int64), nctx)
    return out


def bits_for(n: int) -> int:
    """Bypass bits needed to index ``n`` alternatives."""
    return 0 if n <= 1 else int(math.ceil(math.log2(n)))


def uint_bits(value: int, nbits: int):
    """MSB-first bits of ``value``."""
    return [(value >> (nbits - 1 - i)) & 1 for i in range(nbits)]


def eg0_bits(n: int):
    """Order-0 Exp-Golomb code of n >= 0."""
    m = n + 1
    nb = m.bit_length()
    return [0] * (nb - 1) + uint_bits(m, nb)


@njit(cache=True)
def dec_eg0(data, st):
    z = 0
    while dec_direct(data, st) == 0:
        z += 1
        if z > 40:
            return -1
    m = 1
    for _ in range(z):
        m = (m << 1) | dec_direct(data, st)
    return m - 1
