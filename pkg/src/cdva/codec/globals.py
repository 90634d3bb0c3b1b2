"""Global descriptor coding: raw SCFV/NIP for I units, SCFV prediction for P units.

P-unit SCFV coding walks the K components in order. A selection bit is
coded with the previous unit's selection state as context. For a component
selected in both units a copy flag follows; if it is not a copy, the XOR of
the two sub-vectors is coded bit by bit. A newly selected component's
sub-vector is written in bypass mode. The variance part, when present,
repeats the scheme over the selected components with its own contexts.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from ..descriptors import NipDescriptor, ScfvDescriptor
from ..errors import CorruptStream, ModelMismatch
from .rangecoder import dec_bit, dec_direct, dec_init, encode_decisions

N_CTX = 8


def _pack(a) -> bytes:
    return np.packbits(np.asarray(a, dtype=np.uint8).ravel()).tobytes()


def _unpack(data, pos, nbits):
    nbytes = (nbits + 7) // 8
    if pos + nbytes > len(data):
        raise CorruptStream("global descriptor section truncated")
    bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, pos))[:nbits]
    return bits, pos + nbytes


def encode_scfv_raw(d: ScfvDescriptor) -> bytes:
    out = _pack(d.mask) + _pack(d.mean_bits)
    if d.var_mask is not None:
        out += _pack(d.var_mask) + _pack(d.var_bits)
    return out


def decode_scfv_raw(data, pos, K, dim, has_var, empty):
    mask, pos = _unpack(data, pos, K)
    mask = mask.astype(bool)
    mb, pos = _unpack(data, pos, int(mask.sum()) * dim)
    vm = vb = None
    if has_var:
        vm, pos = _unpack(data, pos, K)
        vm = vm.astype(bool)
        if np.any(vm & ~mask):
            raise CorruptStream("variance mask selects unselected components")
        vb, pos = _unpack(data, pos, int(vm.sum()) * dim)
        vb = vb.reshape(-1, dim)
    return ScfvDescriptor(mask, mb.reshape(-1, dim), vm, vb, None, empty), pos


def _part_decisions(cur_mask, cur_dense, prev_mask, prev_dense, c0, limit=None):
    bits, ctxs = [], []
    K, dim = cur_dense.shape
    for k in range(K):
        if limit is not None and not limit[k]:
            continue
        sel = int(cur_mask[k])
        bits.append(sel)
        ctxs.append(c0 + int(prev_mask[k]))
        if not sel:
            continue
        if prev_mask[k]:
            same = bool(np.array_equal(cur_dense[k], prev_dense[k]))
            bits.append(int(same))
            ctxs.append(c0 + 2)
            if not same:
                bits.extend((cur_dense[k] ^ prev_dense[k]).tolist())
                ctxs.extend([c0 + 3] * dim)
        else:
            bits.extend(cur_dense[k].tolist())
            ctxs.extend([-1] * dim)
    return bits, ctxs


def _dense_or_zero(d: ScfvDescriptor | None, K, dim):
    if d is None:
        z = np.zeros((K, dim), np.uint8)
        return np.zeros(K, bool), z, np.zeros(K, bool), z.copy()
    m, v = d.dense_bits()
    vm = d.var_mask if d.var_mask is not None else np.zeros(K, bool)
    return d.mask, m, vm, (v if v is not None else np.zeros((K, dim), np.uint8))


def encode_scfv_p(cur: ScfvDescriptor, prev: ScfvDescriptor | None) -> bytes:
    if prev is not None and (prev.K != cur.K or prev.dim != cur.dim):
        raise ModelMismatch("previous SCFV uses a different GMM")
    K, dim = cur.K, cur.dim
    pm, pd, pvm, pvd = _dense_or_zero(prev, K, dim)
    cm, cd, cvm, cvd = _dense_or_zero(cur, K, dim)
    bits, ctxs = _part_decisions(cm, cd, pm, pd, 0)
    if cur.var_mask is not None:
        b2, c2 = _part_decisions(cvm, cvd, pvm, pvd, 4, limit=cm)
        bits += b2
        ctxs += c2
    return encode_decisions(np.array(bits, np.uint8), np.array(ctxs, np.int64), N_CTX)


@njit(cache=True)
def _decode_part(data, st, probs, prev_mask, prev_dense, limit, c0, out_mask, out_dense):
    K, dim = prev_dense.shape
    for k in range(K):
        if not limit[k]:
            continue
        sel = dec_bit(data, st, probs, c0 + prev_mask[k])
        out_mask[k] = sel
        if not sel:
            continue
        if prev_mask[k]:
            if dec_bit(data, st, probs, c0 + 2):
                out_dense[k] = prev_dense[k]
            else:
                for j in range(dim):
                    out_dense[k, j] = prev_dense[k, j] ^ dec_bit(data, st, probs, c0 + 3)
        else:
            for j in range(dim):
                out_dense[k, j] = dec_direct(data, st)


@njit(cache=True)
def _decode_scfv_p(data, pm, pd, pvm, pvd, has_var):
    K, dim = pd.shape
    probs = np.full(N_CTX, 2048, np.int64)
    st = np.zeros(3, np.int64)
    dec_init(data, st)
    cm = np.zeros(K, np.uint8)
    cd = np.zeros((K, dim), np.uint8)
    cvm = np.zeros(K, np.uint8)
    cvd = np.zeros((K, dim), np.uint8)
    _decode_part(data, st, probs, pm, pd, np.ones(K, np.uint8), 0, cm, cd)
    if has_var:
        _decode_part(data, st, probs, pvm, pvd, cm, 4, cvm, cvd)
    return cm, cd, cvm, cvd, st[2]


def decode_scfv_p(data: bytes, prev: ScfvDescriptor | None, K, dim, has_var, empty) -> ScfvDescriptor:
    pm, pd, pvm, pvd = _dense_or_zero(prev, K, dim)
    arr = np.frombuffer(data, np.uint8)
    cm, cd, cvm, cvd, pos = _decode_scfv_p(arr, pm.astype(np.uint8), pd, pvm.astype(np.uint8), pvd, has_var)
    if pos > len(arr):
        raise CorruptStream("predicted SCFV section truncated")
    return ScfvDescriptor.from_dense(cm.astype(bool), cd, cvm.astype(bool) if has_var else None,
                                     cvd if has_var else None, empty)


# ---------------------------------------------------------------- NIP

NIP_NONE, NIP_FLOAT, NIP_BITS = 0, 1, 2


def encode_nip(d: NipDescriptor, mode: int, C: int) -> bytes:
    if d.C != C:
        raise ModelMismatch(f"NIP descriptor has C={d.C}, stream declares {C}")
    if mode == NIP_FLOAT:
        if d.values is None:
            raise ModelMismatch("stream carries float NIP but descriptor is binarized")
        return np.asarray(d.values, "<f4").tobytes()
    bits = d.bits if d.bits is not None else (d.values > 0).astype(np.uint8)
    return _pack(bits)


def decode_nip(data, pos, mode, C, degenerate, whitened=False):
    if mode == NIP_FLOAT:
        if pos + 4 * C > len(data):
            raise CorruptStream("NIP section truncated")
        v = np.frombuffer(data, "<f4", C, pos).astype(np.float64)
        return NipDescriptor(v, whitened=whitened, degenerate=degenerate), pos + 4 * C
    bits, pos = _unpack(data, pos, C)
    return NipDescriptor(bits=bits.astype(np.uint8), whitened=whitened, degenerate=degenerate), pos
