"""Local-feature section: location histogram plus ternary descriptors.

Locations are quantised on a grid of ``b`` x ``b`` pixel cells. The binary
occupancy map is coded in raster order with a context equal to the number
of occupied neighbours among left, up-left, up and up-right (5 contexts).
Counts of occupied cells are coded as ``count - 1``: a 3-bin truncated unary
prefix whose context is the bucket {0, 1, 2, >=3} of the neighbour count
sum, then an order-0 Exp-Golomb suffix in bypass mode.

Descriptors follow in cell raster order (relevance order inside a cell).
Each ternary symbol is a nonzero flag (context = position inside its
8-element cell) and, when nonzero, a sign flag (context 8 + position).

In P units each descriptor is preceded by a prediction flag (context 16 +
previous flag). A predicted descriptor is a bypass-coded row index into the
concatenated reference sets (most recent first) instead of symbols.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from ..descriptors import DESC_LEN
from ..errors import CorruptStream, OutOfBounds
from .rangecoder import (bits_for, dec_bit, dec_direct_bits, dec_eg0, dec_init, eg0_bits,
                         encode_decisions, uint_bits)

CTX_MAP = 0
CTX_COUNT = 5
CTX_ZERO = 17
CTX_SIGN = 25
CTX_PRED = 33
N_CTX = 35
UNARY_BINS = 3


def grid_shape(width: int, height: int, b: int):
    return -(-width // b), -(-height // b)


def cell_index(xy: np.ndarray, width: int, height: int, b: int) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(xy) and (np.any(xy < 0) or np.any(xy[:, 0] >= width) or np.any(xy[:, 1] >= height)
                    or not np.all(np.isfinite(xy))):
        raise OutOfBounds(f"keypoint outside the {width}x{height} frame")
    gw, _ = grid_shape(width, height, b)
    cx = np.floor(xy[:, 0] / b).astype(np.int64)
    cy = np.floor(xy[:, 1] / b).astype(np.int64)
    return cy * gw + cx


def coded_order(xy, width, height, b) -> np.ndarray:
    """Permutation putting rows into cell raster order, stable inside a cell."""
    return np.argsort(cell_index(xy, width, height, b), kind="stable")


def cell_centers(cells: np.ndarray, width: int, height: int, b: int) -> np.ndarray:
    """Centre of each cell's visible part (partial edge cells are clipped to the frame)."""
    gw, _ = grid_shape(width, height, b)
    cx, cy = cells % gw, cells // gw
    x0, y0 = cx * b, cy * b
    x = 0.5 * (x0 + np.minimum(x0 + b, width))
    y = 0.5 * (y0 + np.minimum(y0 + b, height))
    return np.stack([x, y], axis=1).astype(np.float64)


def _neighbour_sum(grid):
    """Sum over left, up-left, up and up-right neighbours for each cell."""
    p = np.pad(grid, ((1, 0), (1, 1)))
    gh, gw = grid.shape
    return p[1:, 0:gw] + p[0:gh, 0:gw] + p[0:gh, 1:gw + 1] + p[0:gh, 2:gw + 2]


def location_decisions(cells: np.ndarray, gw: int, gh: int):
    counts = np.bincount(cells, minlength=gw * gh).reshape(gh, gw)
    occ = (counts > 0).astype(np.int64)
    bits = [occ.ravel()]
    ctxs = [CTX_MAP + _neighbour_sum(occ).ravel()]
    nsum = _neighbour_sum(counts).ravel()
    flat = counts.ravel()
    cb, cc = [], []
    for c in np.flatnonzero(flat):
        v = int(flat[c]) - 1
        base = CTX_COUNT + UNARY_BINS * min(3, int(nsum[c]))
        for i in range(UNARY_BINS):
            cb.append(1 if v > i else 0)
            cc.append(base + i)
            if v <= i:
                break
        if v >= UNARY_BINS:
            e = eg0_bits(v - UNARY_BINS)
            cb.extend(e)
            cc.extend([-1] * len(e))
    bits.append(np.array(cb, np.int64))
    ctxs.append(np.array(cc, np.int64))
    return bits, ctxs


def symbol_decisions(symbols: np.ndarray):
    """Zero flag then (if nonzero) sign flag per symbol, rows in order."""
    s = np.asarray(symbols, dtype=np.int64).reshape(-1, DESC_LEN)
    band = np.tile(np.arange(DESC_LEN) % 8, len(s))
    flat = s.ravel()
    nz = flat != 0
    pair_bits = np.stack([nz, flat < 0], axis=1).astype(np.int64)
    pair_ctx = np.stack([CTX_ZERO + band, CTX_SIGN + band], axis=1)
    keep = np.stack([np.ones_like(nz), nz], axis=1)
    return pair_bits[keep], pair_ctx[keep]


def encode_local(xy, symbols, width, height, b, pred=None, n_ref_rows: int = 0) -> bytes:
    """Code a local set whose rows are already in :func:`coded_order`.

    ``pred[i]`` is the reference row for row i or -1 for intra; it is only
    used (and the prediction flags only coded) when ``n_ref_rows > 0``.
    """
    gw, gh = grid_shape(width, height, b)
    cells = cell_index(xy, width, height, b)
    if len(cells) > 1 and np.any(np.diff(cells) < 0):
        raise ValueError("local rows must be in cell raster order")
    bits, ctxs = location_decisions(cells, gw, gh)
    if n_ref_rows > 0:
        nb = bits_for(n_ref_rows)
        pred = np.asarray(pred, dtype=np.int64)
        prev = 0
        for i in range(len(symbols)):
            flag = 1 if pred[i] >= 0 else 0
            bits.append(np.array([flag]))
            ctxs.append(np.array([CTX_PRED + prev]))
            prev = flag
            if flag:
                bits.append(np.array(uint_bits(int(pred[i]), nb), np.int64))
                ctxs.append(np.full(nb, -1, np.int64))
            else:
                sb, sc = symbol_decisions(symbols[i])
                bits.append(sb)
                ctxs.append(sc)
    else:
        sb, sc = symbol_decisions(symbols)
        bits.append(sb)
        ctxs.append(sc)
    return encode_decisions(np.concatenate(bits), np.concatenate(ctxs), N_CTX)


@njit(cache=True)
def _decode_local(data, gw, gh, n_expect, n_ref_rows, ref_bits):
    probs = np.full(N_CTX, 2048, np.int64)
    st = np.zeros(3, np.int64)
    dec_init(data, st)
    occ = np.zeros((gh + 1, gw + 2), np.int64)  # padded: row 0 and columns 0, gw+1 are zero
    for y in range(gh):
        for x in range(gw):
            ctx = occ[y + 1, x] + occ[y, x] + occ[y, x + 1] + occ[y, x + 2]
            occ[y + 1, x + 1] = dec_bit(data, st, probs, CTX_MAP + ctx)
        if st[2] > len(data) + 8:
            return np.zeros(0, np.int64), np.zeros((0, 128), np.int8), np.zeros(0, np.int64), -1
    cnt = np.zeros((gh + 1, gw + 2), np.int64)
    total = 0
    for y in range(gh):
        for x in range(gw):
            if occ[y + 1, x + 1] == 0:
                continue
            s = cnt[y + 1, x] + cnt[y, x] + cnt[y, x + 1] + cnt[y, x + 2]
            base = CTX_COUNT + UNARY_BINS * min(3, s)
            v = 0
            while v < UNARY_BINS and dec_bit(data, st, probs, base + v) == 1:
                v += 1
            if v == UNARY_BINS:
                e = dec_eg0(data, st)
                if e < 0:
                    return np.zeros(0, np.int64), np.zeros((0, 128), np.int8), np.zeros(0, np.int64), -1
                v += e
            cnt[y + 1, x + 1] = v + 1
            total += v + 1
            if total > n_expect:
                return np.zeros(0, np.int64), np.zeros((0, 128), np.int8), np.zeros(0, np.int64), -1
    if total != n_expect:
        return np.zeros(0, np.int64), np.zeros((0, 128), np.int8), np.zeros(0, np.int64), -1
    cells = np.zeros(total, np.int64)
    k = 0
    for y in range(gh):
        for x in range(gw):
            for _ in range(cnt[y + 1, x + 1]):
                cells[k] = y * gw + x
                k += 1
    sym = np.zeros((total, 128), np.int8)
    pred = np.full(total, -1, np.int64)
    prev = 0
    for i in range(total):
        if n_ref_rows > 0:
            flag = dec_bit(data, st, probs, CTX_PRED + prev)
            prev = flag
            if flag:
                r = dec_direct_bits(data, st, ref_bits)
                if r >= n_ref_rows:
                    return cells, sym, pred, -1
                pred[i] = r
                continue
        for j in range(128):
            band = j % 8
            if dec_bit(data, st, probs, CTX_ZERO + band):
                sym[i, j] = -1 if dec_bit(data, st, probs, CTX_SIGN + band) else 1
        if st[2] > len(data) + 8:
            return cells, sym, pred, -1
    return cells, sym, pred, st[2]


def decode_local(data: bytes, n: int, width: int, height: int, b: int, n_ref_rows: int = 0):
    """Returns (xy cell centres, symbols, pred rows); predicted rows have zero symbols here."""
    gw, gh = grid_shape(width, height, b)
    arr = np.frombuffer(data, dtype=np.uint8)
    cells, sym, pred, pos = _decode_local(arr, gw, gh, n, n_ref_rows, bits_for(n_ref_rows))
    if pos < 0 or pos > len(arr):
        raise CorruptStream("local feature section does not decode to its declared size")
    return cell_centers(cells, width, height, b), sym, pred
