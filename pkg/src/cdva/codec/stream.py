"""Descriptor bitstream container, inter prediction and budget enforcement.

Layout (all integers little-endian; BITSTREAM.md has the normative text)::

    header := "CDVABITS" u8 version  u16 op  u32 crc32(video_id)
              u16 id_len  id_utf8  u16 width  u16 height  f64 fps
              u32 frame_count  u32 unit_count  u16 K  u16 dim  u16 C
              u8 nip_mode  u8 block  u8 n_ref
    unit   := u32 body_len  body
    body   := u8 kind  u8 flags  u32 frame_index  u16 shot  u16 n_local
              scfv  nip  u32 local_len  local
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from ..descriptors import KeyframeDescriptor, LocalDescriptorSet, NipDescriptor, VideoDescriptor
from ..errors import BudgetExceeded, CorruptStream, InvalidConfig
from ..local import N_MAX, ternary_distance_matrix
from ..scfv import SCFV_BUDGET, trim_components
from ..temporal import rate_cap_mask
from . import globals as G
from .locations import cell_centers, cell_index, coded_order, decode_local, encode_local

MAGIC = b"CDVABITS"
VERSION = 1
KIND_I, KIND_P = 0, 1
F_SCFV_EMPTY, F_SCFV_VAR, F_NIP_DEGEN, F_NIP = 1, 2, 4, 8
KEYFRAME_CAP = {16: 2, 64: 4, 256: 8}
BUDGET_SLACK = 0.02
WINDOW_EPS = 1e-9  # timestamps closer than this to a window edge count as on it
_HEAD = struct.Struct("<BBIHH")


@dataclass(frozen=True)
class OperatingPoint:
    label: int
    budget_bytes: int  # per second
    keyframe_cap: int  # units per second before trimming
    n_max: int
    scfv_budget: int

    @classmethod
    def from_label(cls, label: int, keyframe_cap: int | None = None, n_max: int | None = None):
        if label not in N_MAX:
            raise InvalidConfig(f"operating point must be one of 16, 64, 256 (got {label})")
        return cls(label, label * 1000, keyframe_cap or KEYFRAME_CAP[label], n_max or N_MAX[label],
                   SCFV_BUDGET[label])


@dataclass(frozen=True)
class CodecConfig:
    block: int = 3
    n_ref: int = 2
    delta: int = 8
    nip_mode: int = G.NIP_BITS  # 0 none, 1 float32, 2 bits


@dataclass
class EncodeResult:
    bits: bytes
    recon: VideoDescriptor
    unit_sizes: list = field(default_factory=list)  # (timestamp, bytes), header first at t=0
    dropped: list = field(default_factory=list)  # frame indices removed by rate cap or budget
    trimmed: dict = field(default_factory=dict)  # frame index -> (keypoints kept, components kept)


# ---------------------------------------------------------------- prediction

def predict_locals(symbols: np.ndarray, refs: list, delta: int):
    """Nearest reference row by ternary L1 for every current row.

    ``refs`` are decoded symbol arrays of the reference units, most recent
    first; rows index into their concatenation. Returns ``(pred, recon)``
    where ``pred[i]`` is the reference row or -1, and ``recon`` the symbols
    the decoder will hold.
    """
    symbols = np.asarray(symbols, np.int8).reshape(-1, 128)
    pool = np.concatenate(refs) if refs else np.zeros((0, 128), np.int8)
    pred = np.full(len(symbols), -1, np.int64)
    if len(pool) == 0 or len(symbols) == 0:
        return pred, symbols.copy()
    D = ternary_distance_matrix(symbols, pool)
    best = np.argmin(D, axis=1)  # first minimum: most recent unit, lowest row
    ok = D[np.arange(len(symbols)), best] <= delta
    pred[ok] = best[ok]
    recon = symbols.copy()
    recon[ok] = pool[best[ok]]
    return pred, recon


# ---------------------------------------------------------------- header

@dataclass
class StreamHeader:
    op: int
    video_id: str
    width: int
    height: int
    fps: float
    frame_count: int
    unit_count: int
    K: int
    dim: int
    C: int
    nip_mode: int
    block: int
    n_ref: int
    version: int = VERSION

    def pack(self) -> bytes:
        vid = self.video_id.encode("utf-8")
        return (MAGIC + struct.pack("<BHIH", self.version, self.op, zlib.crc32(vid), len(vid)) + vid
                + struct.pack("<HHdIIHHHBBB", self.width, self.height, self.fps, self.frame_count,
                              self.unit_count, self.K, self.dim, self.C, self.nip_mode, self.block,
                              self.n_ref))

    @classmethod
    def unpack(cls, data: bytes):
        if len(data) < 17 or data[:8] != MAGIC:
            raise CorruptStream("not a descriptor bitstream (bad magic)")
        version, op, crc, n = struct.unpack_from("<BHIH", data, 8)
        if version != VERSION:
            raise CorruptStream(f"unsupported bitstream version {version}")
        pos = 17 + n
        tail = struct.Struct("<HHdIIHHHBBB")
        if len(data) < pos + tail.size:
            raise CorruptStream("bitstream header truncated")
        vid = data[17:pos]
        if zlib.crc32(vid) != crc:
            raise CorruptStream("video id checksum mismatch")
        f = tail.unpack_from(data, pos)
        return cls(op, vid.decode("utf-8"), *f, version=version), pos + tail.size


# ---------------------------------------------------------------- units

class _State:
    """Reference state shared (by construction, not by object) by encoder and decoder."""

    def __init__(self, n_ref):
        self.n_ref = n_ref
        self.refs: list = []  # decoded symbol arrays, most recent first
        self.prev_scfv = None

    def push(self, unit: KeyframeDescriptor):
        self.refs = ([unit.local.symbols] + self.refs)[: self.n_ref]
        self.prev_scfv = unit.scfv

    def ref_rows(self):
        return int(sum(len(r) for r in self.refs))


def encode_unit(u: KeyframeDescriptor, hdr: StreamHeader, state: _State, delta: int):
    """Returns (bytes, reconstructed unit). Local rows must be in coded order."""
    kind = KIND_P if u.kind == "P" else KIND_I
    loc = u.local
    flags = 0
    if u.scfv.empty:
        flags |= F_SCFV_EMPTY
    if u.scfv.var_mask is not None:
        flags |= F_SCFV_VAR
    nip_bytes = b""
    recon_nip = None
    if hdr.nip_mode != G.NIP_NONE and u.nip is not None:
        flags |= F_NIP
        if u.nip.degenerate:
            flags |= F_NIP_DEGEN
        nip_bytes = G.encode_nip(u.nip, hdr.nip_mode, hdr.C)
        recon_nip, _ = G.decode_nip(nip_bytes, 0, hdr.nip_mode, hdr.C, u.nip.degenerate)
    if kind == KIND_I:
        scfv_bytes = G.encode_scfv_raw(u.scfv)
        pred = np.full(len(loc), -1, np.int64)
        recon_sym = loc.symbols.copy()
        local_bytes = encode_local(loc.xy, loc.symbols, hdr.width, hdr.height, hdr.block)
    else:
        coded = G.encode_scfv_p(u.scfv, state.prev_scfv)
        scfv_bytes = struct.pack("<H", len(coded)) + coded
        n_rows = state.ref_rows()
        pred, recon_sym = predict_locals(loc.symbols, state.refs, delta)
        local_bytes = encode_local(loc.xy, loc.symbols, hdr.width, hdr.height, hdr.block, pred, n_rows)
    body = (_HEAD.pack(kind, flags, u.frame_index, u.shot_id, len(loc)) + scfv_bytes + nip_bytes
            + struct.pack("<I", len(local_bytes)) + local_bytes)
    cells = cell_index(loc.xy, hdr.width, hdr.height, hdr.block)
    recon_local = LocalDescriptorSet(cell_centers(cells, hdr.width, hdr.height, hdr.block), recon_sym)
    scfv = replace(u.scfv, strengths=None)
    recon = KeyframeDescriptor(u.frame_index, u.frame_index / hdr.fps, u.kind, u.shot_id, recon_local,
                               scfv, recon_nip, pred if kind == KIND_P else None)
    return struct.pack("<I", len(body)) + body, recon


def decode_unit(data: bytes, pos: int, hdr: StreamHeader, state: _State):
    if pos + 4 > len(data):
        raise CorruptStream("unit length field truncated")
    (blen,) = struct.unpack_from("<I", data, pos)
    start = pos + 4
    end = start + blen
    if end > len(data) or blen < _HEAD.size:
        raise CorruptStream("unit truncated")
    body = data[start:end]
    kind, flags, fidx, shot, n_local = _HEAD.unpack_from(body, 0)
    if kind not in (KIND_I, KIND_P):
        raise CorruptStream(f"unknown unit kind {kind}")
    p = _HEAD.size
    empty, has_var = bool(flags & F_SCFV_EMPTY), bool(flags & F_SCFV_VAR)
    if kind == KIND_I:
        scfv, p = G.decode_scfv_raw(body, p, hdr.K, hdr.dim, has_var, empty)
    else:
        if p + 2 > len(body):
            raise CorruptStream("unit truncated in SCFV section")
        (n,) = struct.unpack_from("<H", body, p)
        if p + 2 + n > len(body):
            raise CorruptStream("unit truncated in SCFV section")
        scfv = G.decode_scfv_p(body[p + 2:p + 2 + n], state.prev_scfv, hdr.K, hdr.dim, has_var, empty)
        p += 2 + n
    nip = None
    if flags & F_NIP:
        nip, p = G.decode_nip(body, p, hdr.nip_mode, hdr.C, bool(flags & F_NIP_DEGEN))
    if p + 4 > len(body):
        raise CorruptStream("unit truncated before local section")
    (llen,) = struct.unpack_from("<I", body, p)
    p += 4
    if p + llen != len(body):
        raise CorruptStream("local section length disagrees with unit length")
    n_rows = state.ref_rows() if kind == KIND_P else 0
    xy, sym, pred = decode_local(body[p:], n_local, hdr.width, hdr.height, hdr.block, n_rows)
    if kind == KIND_P and len(sym):
        pool = np.concatenate(state.refs) if state.refs else np.zeros((0, 128), np.int8)
        m = pred >= 0
        sym[m] = pool[pred[m]]
    unit = KeyframeDescriptor(fidx, fidx / hdr.fps, "P" if kind == KIND_P else "I", shot,
                              LocalDescriptorSet(xy, sym), scfv, nip, pred if kind == KIND_P else None)
    return unit, end


# ---------------------------------------------------------------- video

def _relevance_order(loc: LocalDescriptorSet):
    if loc.relevance is None:
        return np.arange(len(loc))
    return np.argsort(-np.asarray(loc.relevance), kind="stable")


def _prepare(loc: LocalDescriptorSet, n: int, hdr: StreamHeader) -> LocalDescriptorSet:
    """Keep the n most relevant rows and put them in coded order."""
    rows = _relevance_order(loc)[:n]
    sub = loc.take(rows)
    return sub.take(coded_order(sub.xy, hdr.width, hdr.height, hdr.block))


def _window_total(sizes, t):
    return sum(s for (ts, s) in sizes if t - 1.0 + WINDOW_EPS < ts <= t + WINDOW_EPS)


def encode_video(video: VideoDescriptor, op: OperatingPoint, cfg: CodecConfig = CodecConfig()) -> EncodeResult:
    """Encode with rate cap and per-second budget enforcement.

    Every unit is checked against the trailing window (t - 1, t]; which is
    enough for every 1-second window because a window's content is fully
    known when its last unit is written. When a unit does not fit, the
    lowest-relevance keypoints go first, then P units are dropped, then
    SCFV components are trimmed from the weakest.
    """
    units = list(video.units)
    idx = [u.frame_index for u in units]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise InvalidConfig("units must be in strictly increasing frame order")
    K = units[0].scfv.K if units else 0
    dim = units[0].scfv.dim if units else 0
    C = 0
    nip_mode = cfg.nip_mode
    for u in units:
        if u.nip is not None:
            C = u.nip.C
            break
    if C == 0 or nip_mode == G.NIP_NONE:
        nip_mode, C = G.NIP_NONE, 0
    ts = [u.frame_index / video.fps for u in units]
    keep = rate_cap_mask(ts, [u.kind for u in units], op.keyframe_cap)
    dropped = [u.frame_index for u, k in zip(units, keep) if not k]
    units = [u for u, k in zip(units, keep) if k]

    hdr = StreamHeader(op.label, video.video_id, video.width, video.height, float(video.fps),
                       video.frame_count, 0, K, dim, C, nip_mode, cfg.block, cfg.n_ref)
    head_len = len(hdr.pack())
    sizes = [(0.0, head_len)]
    state = _State(cfg.n_ref)
    out, recon_units, trimmed = [], [], {}
    for u in units:
        t = u.frame_index / video.fps
        room = op.budget_bytes - _window_total(sizes, t)
        n_full = min(len(u.local), op.n_max)
        res = _fit_unit(u, n_full, room, hdr, state, cfg.delta)
        if res is None:
            if u.kind == "P":
                dropped.append(u.frame_index)
                continue
            res = _fit_scfv(u, room, hdr, state, cfg.delta)
            if res is None:
                raise BudgetExceeded(
                    f"{video.video_id}: I unit at frame {u.frame_index} exceeds the "
                    f"{op.budget_bytes} B/s budget even with no keypoints and one SCFV component")
        data, rec, n_kept, m_kept = res
        if n_kept < n_full or m_kept < len(u.scfv.selected):
            trimmed[u.frame_index] = (n_kept, m_kept)
        out.append(data)
        recon_units.append(rec)
        sizes.append((t, len(data)))
        state.push(rec)
    hdr.unit_count = len(out)
    bits = hdr.pack() + b"".join(out)
    recon = VideoDescriptor(video.video_id, video.fps, video.frame_count, video.width, video.height,
                            recon_units)
    return EncodeResult(bits, recon, sizes, sorted(dropped), trimmed)


def _try(u, n, hdr, state, delta, scfv=None):
    loc = _prepare(u.local, n, hdr)
    cand = KeyframeDescriptor(u.frame_index, u.timestamp, u.kind, u.shot_id, loc,
                              scfv if scfv is not None else u.scfv, u.nip)
    return encode_unit(cand, hdr, state, delta)


def _fit_unit(u, n_full, room, hdr, state, delta):
    """Largest keypoint prefix whose unit fits in ``room`` bytes, or None."""
    data, rec = _try(u, n_full, hdr, state, delta)
    if len(data) <= room:
        return data, rec, n_full, len(u.scfv.selected)
    lo, hi = 0, n_full - 1  # search the largest n in [0, hi] that fits
    best = None
    while lo <= hi:
        mid = (lo + hi) // 2
        d, r = _try(u, mid, hdr, state, delta)
        if len(d) <= room:
            best = (d, r, mid)
            lo = mid + 1
        else:
            hi = mid - 1
    if best is None:
        return None
    return best[0], best[1], best[2], len(u.scfv.selected)


def _fit_scfv(u, room, hdr, state, delta):
    m_all = len(u.scfv.selected)
    lo, hi, best = 1, m_all - 1, None
    while lo <= hi:
        mid = (lo + hi) // 2
        s = trim_components(u.scfv, mid)
        d, r = _try(u, 0, hdr, state, delta, scfv=s)
        if len(d) <= room:
            best = (d, r, 0, mid)
            lo = mid + 1
        else:
            hi = mid - 1
    return best


def decode_video(bits: bytes) -> VideoDescriptor:
    hdr, pos = StreamHeader.unpack(bits)
    state = _State(hdr.n_ref)
    units = []
    for n in range(hdr.unit_count):
        try:
            u, pos = decode_unit(bits, pos, hdr, state)
        except CorruptStream as exc:
            last = units[-1].timestamp if units else None
            raise CorruptStream(f"unit {n}: {exc}", last) from None
        units.append(u)
        state.push(u)
    if pos != len(bits):
        raise CorruptStream(f"{len(bits) - pos} trailing bytes after last unit",
                            units[-1].timestamp if units else None)
    return VideoDescriptor(hdr.video_id, hdr.fps, hdr.frame_count, hdr.width, hdr.height, units)


def read_header(bits: bytes) -> StreamHeader:
    return StreamHeader.unpack(bits)[0]


def unit_sizes(bits: bytes):
    """(timestamp, bytes) per unit, header first at t = 0, without decoding payloads."""
    hdr, pos = StreamHeader.unpack(bits)
    out = [(0.0, pos)]
    for _ in range(hdr.unit_count):
        if pos + 4 + _HEAD.size > len(bits):
            raise CorruptStream("unit truncated", out[-1][0] if len(out) > 1 else None)
        (blen,) = struct.unpack_from("<I", bits, pos)
        fidx = struct.unpack_from("<I", bits, pos + 6)[0]
        out.append((fidx / hdr.fps, 4 + blen))
        pos += 4 + blen
    return out


def audit(bits_or_sizes, budget_bytes: int, slack: float = BUDGET_SLACK):
    """Sliding 1-second window audit. Returns (max window bytes, violating window starts)."""
    sizes = unit_sizes(bits_or_sizes) if isinstance(bits_or_sizes, (bytes, bytearray)) else bits_or_sizes
    ts = np.array([t for t, _ in sizes])
    sz = np.array([s for _, s in sizes], dtype=np.int64)
    order = np.argsort(ts, kind="stable")
    ts, sz = ts[order], sz[order]
    cum = np.concatenate([[0], np.cumsum(sz)])
    # windows [t_i, t_i + 1) starting at each unit cover every maximal window
    ends = np.searchsorted(ts, ts + 1.0 - WINDOW_EPS, side="left")
    totals = cum[ends] - cum[np.arange(len(ts))]
    limit = budget_bytes * (1.0 + slack)
    bad = [float(ts[i]) for i in np.flatnonzero(totals > limit)]
    return int(totals.max()) if len(totals) else 0, bad
