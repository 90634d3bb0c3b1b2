"""Pairwise matching, temporal localization and indexed retrieval.

Global scores are computed in bulk by :class:`GlobalBank`, which lays the
SCFV sub-vectors out as masked +-1 matrices so one matrix product yields
every SCFV similarity between two keyframe sets. The integer partial sums
are exact in float32, so bulk and pairwise scores agree to the last bit
whatever the product's blocking. The same bank backs both brute-force
video matching and the index, which keeps retrieval with K_g = K_l = N
identical to the all-pairs ranking.

Local matching is made symmetric by always running the ratio test and
RANSAC from the set with the smaller fingerprint.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import AnalysisConfig
from .descriptors import KeyframeDescriptor, LocalDescriptorSet, VideoDescriptor
from .errors import DuplicateVideoId, FormMismatch, ModelMismatch

MIN_SCALE, MAX_SCALE = 0.25, 4.0
LOCAL_FLOOR = 8  # local score denominator floor


# ---------------------------------------------------------------- global scores

def _resolve_form(units, nip_form):
    if nip_form != "auto":
        return nip_form
    has = [u.nip for u in units if u.nip is not None]
    if not has:
        return "none"
    return "bits" if any(n.values is None for n in has) else "float"


class GlobalBank:
    """Bulk SCFV and NIP scoring for a fixed list of keyframes."""

    def __init__(self, units, nip_form: str = "auto"):
        units = list(units)
        self.n = len(units)
        self.nip_form = _resolve_form(units, nip_form)
        ref = next((u.scfv for u in units), None)
        self.K, self.dim = (ref.K, ref.dim) if ref is not None else (0, 0)
        n, K, dim = self.n, self.K, self.dim
        self.Sm = np.zeros((n, K * dim), np.float32)
        self.Smv = None
        self.Sv = None
        self.m = np.zeros(n)
        self.empty = np.zeros(n, bool)
        has_var = any(u.scfv.var_mask is not None for u in units)
        if has_var:
            self.Smv = np.zeros((n, K * dim), np.float32)
            self.Sv = np.zeros((n, K * dim), np.float32)
        for i, u in enumerate(units):
            s = u.scfv
            if s.K != K or s.dim != dim:
                raise ModelMismatch("keyframes use different GMMs")
            mb, vb = s.dense_bits()
            sm = (2.0 * mb - 1.0) * s.mask[:, None]
            self.Sm[i] = sm.ravel()
            self.m[i] = s.mask.sum()
            self.empty[i] = s.empty
            if has_var and s.var_mask is not None:
                vm = s.var_mask[:, None]
                self.Smv[i] = (sm * vm).ravel()
                self.Sv[i] = ((2.0 * vb - 1.0) * vm).ravel()
        self.valid = ~self.empty & (self.m > 0)
        self._nip(units)

    def _nip(self, units):
        n = self.n
        self.has_nip = np.zeros(n, bool)
        self.degen = np.zeros(n, bool)
        self.C = 0
        self.F = None
        self.B = None
        if self.nip_form == "none":
            return
        C = next((u.nip.C for u in units if u.nip is not None), 0)
        self.C = C
        if self.nip_form == "float":
            self.F = np.zeros((n, C))
        else:
            self.B = np.zeros((n, (C + 63) // 64), np.uint64)
        for i, u in enumerate(units):
            d = u.nip
            if d is None:
                continue
            if d.C != C:
                raise FormMismatch(f"NIP dimensions differ: {d.C} vs {C}")
            self.has_nip[i] = True
            self.degen[i] = d.degenerate
            if self.F is not None:
                if d.values is None:
                    raise FormMismatch("float NIP scoring requested but descriptor is binarized")
                self.F[i] = d.values
            else:
                bits = d.bits if d.bits is not None else (d.values > 0).astype(np.uint8)
                self.B[i] = pack_bits64(bits)

    def scfv_scores(self, other: "GlobalBank") -> np.ndarray:
        if (self.K, self.dim) != (other.K, other.dim) and self.n and other.n:
            raise ModelMismatch(f"SCFV shapes differ: K={self.K}/{other.K}, dim={self.dim}/{other.dim}")
        dim = float(self.dim or 1)
        dot = (self.Sm @ other.Sm.T).astype(np.float64) / dim
        if self.Smv is not None and other.Smv is not None:
            dot -= (self.Smv @ other.Smv.T).astype(np.float64) / (2 * dim)
            dot += (self.Sv @ other.Sv.T).astype(np.float64) / (2 * dim)
        norm = np.sqrt(np.outer(self.m, other.m))
        ok = np.outer(self.valid, other.valid)
        return np.where(ok, dot / np.where(ok, norm, 1.0), 0.0)

    def nip_scores(self, other: "GlobalBank") -> np.ndarray:
        """NIP similarities and a mask of pairs where both sides carry NIP."""
        both = np.outer(self.has_nip, other.has_nip)
        if self.nip_form == "none" or other.nip_form == "none" or not both.any():
            return np.zeros((self.n, other.n)), np.zeros((self.n, other.n), bool)
        if self.nip_form != other.nip_form:
            raise FormMismatch(f"cannot compare {self.nip_form} and {other.nip_form} NIP descriptors")
        if self.C != other.C:
            raise FormMismatch(f"NIP dimensions differ: {self.C} vs {other.C}")
        if self.F is not None:
            s = self.F @ other.F.T
        else:
            s = 1.0 - 2.0 * hamming_matrix(self.B, other.B) / self.C
        live = np.outer(~self.degen, ~other.degen)
        return np.where(live, s, 0.0), both

    def nip_scan(self, query: "GlobalBank", row: int) -> np.ndarray:
        """Raw NIP scan of the whole bank against one query row: float32 dot
        products, or Hamming distances over packed words (lower is closer)."""
        if self.F is not None:
            F32 = getattr(self, "_F32", None)
            if F32 is None:
                F32 = self._F32 = np.ascontiguousarray(self.F, np.float32)
            return F32 @ query.F[row].astype(np.float32)
        q = query.B[row]
        d = np.bitwise_count(self.B[:, 0] ^ q[0])
        for w in range(1, self.B.shape[1]):
            d += np.bitwise_count(self.B[:, w] ^ q[w])
        return d

    def scores(self, other: "GlobalBank", w_nip: float = 0.5) -> np.ndarray:
        sc = self.scfv_scores(other)
        if w_nip == 0.0:
            return sc
        nv, both = self.nip_scores(other)
        return np.where(both, w_nip * nv + (1.0 - w_nip) * sc, sc)


def pack_bits64(bits) -> np.ndarray:
    b = np.asarray(bits, np.uint8)
    pad = (-len(b)) % 64
    by = np.packbits(np.concatenate([b, np.zeros(pad, np.uint8)]))
    return by.view(">u8").astype(np.uint64)


def hamming_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between rows of packed uint64 bit matrices."""
    out = np.zeros((len(A), len(B)), np.int64)
    for w in range(A.shape[1]):
        out += np.bitwise_count(A[:, w][:, None] ^ B[:, w][None, :])
    return out


def global_score(q: KeyframeDescriptor, r: KeyframeDescriptor, w_nip: float = 0.5,
                 nip_form: str = "auto") -> float:
    form = _resolve_form([q, r], nip_form)
    return float(GlobalBank([q], form).scores(GlobalBank([r], form), w_nip)[0, 0])


# ---------------------------------------------------------------- local matching

def _onehot(loc: LocalDescriptorSet):
    oh = getattr(loc, "_onehot", None)
    if oh is None:
        s = loc.symbols
        oh = np.concatenate([(s == 1), (s == -1)], axis=1).astype(np.float32)
        loc._onehot = oh
        loc._nnz = oh.sum(1)
    return oh, loc._nnz


def correspondences(a: LocalDescriptorSet, b: LocalDescriptorSet, ratio: float = 0.85):
    """Rows (ia, ib): b's nearest neighbour of each a row passing best <= ratio * second."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    oa, na = _onehot(a)
    ob, nb = _onehot(b)
    D = na[:, None] + nb[None, :] - 2.0 * (oa @ ob.T)
    best = np.argmin(D, axis=1)
    d1 = D[np.arange(len(a)), best]
    if len(b) == 1:
        keep = np.ones(len(a), bool)
    else:
        d2 = np.partition(D, 1, axis=1)[:, 1]
        keep = (d2 > 0) & (d1 <= ratio * d2)
    ia = np.flatnonzero(keep)
    return ia, best[ia]


def _count(a, t, z, w, tol):
    r = np.abs(a[:, None] * z[None, :] + t[:, None] - w[None, :])
    lim = tol * np.minimum(1.0, np.abs(a))[:, None]  # forward and backward transfer error both <= tol
    return r <= lim


def ransac_similarity(z: np.ndarray, w: np.ndarray, iters: int, tol: float, rng):
    """Similarity w = a z + t (complex a) by 2-point random sample consensus.

    Returns (inlier mask, a, t); a is 0 when no model was found.
    """
    n = len(z)
    if n < 2:
        return np.zeros(n, bool), 0j, 0j
    if n * (n - 1) // 2 <= iters:
        i, j = np.triu_indices(n, 1)
    else:
        i = rng.integers(0, n, size=iters)
        j = (i + rng.integers(1, n, size=iters)) % n
    dz = z[i] - z[j]
    ok = np.abs(dz) > 1e-9
    i, j, dz = i[ok], j[ok], dz[ok]
    a = (w[i] - w[j]) / dz
    s = np.abs(a)
    ok = (s >= MIN_SCALE) & (s <= MAX_SCALE)
    if not ok.any():
        return np.zeros(n, bool), 0j, 0j
    a, i = a[ok], i[ok]
    t = w[i] - a * z[i]
    inl = _count(a, t, z, w, tol)
    h = int(np.argmax(inl.sum(1)))
    best, ba, bt = inl[h], a[h], t[h]
    if best.sum() >= 2:
        zi, wi = z[best], w[best]
        zc, wc = zi - zi.mean(), wi - wi.mean()
        den = float(np.sum(np.abs(zc) ** 2))
        if den > 0:
            ra = np.sum(np.conj(zc) * wc) / den
            if MIN_SCALE <= abs(ra) <= MAX_SCALE:
                rt = wi.mean() - ra * zi.mean()
                rin = _count(np.array([ra]), np.array([rt]), z, w, tol)[0]
                if rin.sum() >= best.sum():
                    best, ba, bt = rin, ra, rt
    return best, complex(ba), complex(bt)


@dataclass
class LocalResult:
    score: float
    inliers: int
    correspondences: int
    model: tuple  # (scale, rotation rad, tx, ty) mapping query to reference pixels


def _pair_seed(seed, fa, fb):
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(fa), zlib.crc32(fb)]


def local_match(a: LocalDescriptorSet, b: LocalDescriptorSet, cfg: AnalysisConfig = AnalysisConfig(),
                block: int = 3, seed: int = 0) -> LocalResult:
    fa, fb = a.fingerprint(), b.fingerprint()
    flip = fb < fa
    if flip:
        a, b, fa, fb = b, a, fb, fa
    ia, ib = correspondences(a, b, cfg.ratio)
    z = a.xy[ia, 0] + 1j * a.xy[ia, 1]
    w = b.xy[ib, 0] + 1j * b.xy[ib, 1]
    rng = np.random.default_rng(_pair_seed(seed, fa, fb))
    inl, A, t = ransac_similarity(z, w, cfg.ransac_iters, 2.0 * block, rng)
    if flip and A != 0:
        A, t = 1.0 / A, -t / A
    n_in = int(inl.sum())
    n_corr = len(ia)
    score = n_in / max(LOCAL_FLOOR, n_corr) if n_in >= cfg.min_inliers else 0.0
    model = (abs(A), float(np.angle(A)) if A != 0 else 0.0, t.real, t.imag)
    return LocalResult(score, n_in, n_corr, model)


def _invert(res: LocalResult) -> LocalResult:
    s, th, tx, ty = res.model
    if s == 0:
        return res
    A = s * np.exp(1j * th)
    t = -(tx + 1j * ty) / A
    return LocalResult(res.score, res.inliers, res.correspondences, (1.0 / s, -th, t.real, t.imag))


class LocalCache:
    """Memo of local results keyed by the two sets' fingerprints, order-free."""

    def __init__(self):
        self.store = {}
        self.hits = 0

    def get(self, a, b, cfg, block, seed) -> LocalResult:
        fa, fb = a.fingerprint(), b.fingerprint()
        flip = fb < fa
        key = (fb, fa) if flip else (fa, fb)
        key += (cfg.ratio, cfg.ransac_iters, cfg.min_inliers, block, seed)
        res = self.store.get(key)
        if res is None:
            res = local_match(b, a, cfg, block, seed) if flip else local_match(a, b, cfg, block, seed)
            self.store[key] = res
        else:
            self.hits += 1
        return _invert(res) if flip else res


# ---------------------------------------------------------------- keyframe / video matching

@dataclass
class KeyframeMatch:
    query: int  # unit position in the query video
    ref: int
    global_score: float
    local_score: float = 0.0
    combined: float = 0.0
    inliers: int = 0
    correspondences: int = 0
    model: tuple = (0.0, 0.0, 0.0, 0.0)
    gated: bool = False  # global score <= T_g: local stage skipped


def match_keyframes(q: KeyframeDescriptor, r: KeyframeDescriptor, cfg: AnalysisConfig = AnalysisConfig(),
                    block: int = 3, seed: int = 0, nip_form: str = "auto", qi: int = 0, ri: int = 0,
                    g: float | None = None, cache: LocalCache | None = None) -> KeyframeMatch:
    if g is None:
        g = global_score(q, r, cfg.w_nip, nip_form)
    if g <= cfg.t_global:
        return KeyframeMatch(qi, ri, g, gated=True)
    res = cache.get(q.local, r.local, cfg, block, seed) if cache else local_match(q.local, r.local, cfg, block, seed)
    return KeyframeMatch(qi, ri, g, res.score, g * res.score, res.inliers, res.correspondences, res.model)


@dataclass
class MatchResult:
    video_score: float
    matched: bool
    query_intervals: list = field(default_factory=list)
    ref_intervals: list = field(default_factory=list)
    matches: list = field(default_factory=list)  # KeyframeMatch for every pair above the gate


def merge_intervals(intervals, gap: float = 0.5):
    out = []
    for s, e in sorted(intervals):
        if out and s - out[-1][1] <= gap:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(float(s), float(e)) for s, e in out]


def localize(matches, q_units, r_units, q_shots: dict, r_shots: dict, t_kf: float = 0.05,
             gap: float = 0.5):
    """Shots holding an above-T_kf matched keyframe, merged per timeline."""
    qs, rs = set(), set()
    for m in matches:
        if m.combined > t_kf:
            qs.add(q_units[m.query].shot_id)
            rs.add(r_units[m.ref].shot_id)
    return (merge_intervals([q_shots[s] for s in qs], gap),
            merge_intervals([r_shots[s] for s in rs], gap))


def match_videos(q: VideoDescriptor, r: VideoDescriptor, cfg: AnalysisConfig = AnalysisConfig(),
                 block: int = 3, seed: int = 0, nip_form: str = "auto",
                 cache: LocalCache | None = None) -> MatchResult:
    form = _resolve_form(list(q.units) + list(r.units), nip_form)
    G = GlobalBank(q.units, form).scores(GlobalBank(r.units, form), cfg.w_nip)
    matches = []
    for i, j in zip(*np.nonzero(G > cfg.t_global)):
        matches.append(match_keyframes(q.units[i], r.units[j], cfg, block, seed, form, int(i), int(j),
                                       float(G[i, j]), cache))
    score = max((m.combined for m in matches), default=0.0)
    qi, ri = localize(matches, q.units, r.units, q.shots(), r.shots(), cfg.t_keyframe, cfg.merge_gap)
    return MatchResult(score, score > cfg.t_video, qi, ri, matches)


def brute_force_ranking(q: VideoDescriptor, database, cfg: AnalysisConfig = AnalysisConfig(),
                        block: int = 3, seed: int = 0, nip_form: str = "auto", cache=None):
    """All-pairs match_videos ranking: videos with a positive score, descending, ties by id."""
    scored = []
    for r in database:
        s = match_videos(q, r, cfg, block, seed, nip_form, cache).video_score
        if s > 0:
            scored.append((r.video_id, s))
    return sorted(scored, key=lambda x: (-x[1], x[0]))


# ---------------------------------------------------------------- index and retrieval

@dataclass
class KeyframeIndex:
    video_ids: list
    units: list  # flat KeyframeDescriptor list
    owner: np.ndarray  # (N,) index into video_ids
    position: np.ndarray  # (N,) unit position inside its video
    shot: np.ndarray  # (N,) shot id
    bank: GlobalBank
    videos: list  # the VideoDescriptors, for localization

    def __len__(self):
        return len(self.units)


def build_index(database, nip_form: str = "auto") -> KeyframeIndex:
    database = list(database)
    seen = set()
    for v in database:
        if v.video_id in seen:
            raise DuplicateVideoId(f"video id {v.video_id!r} appears twice in the database")
        seen.add(v.video_id)
    units, owner, pos, shot = [], [], [], []
    for n, v in enumerate(database):
        for p, u in enumerate(v.units):
            units.append(u)
            owner.append(n)
            pos.append(p)
            shot.append(u.shot_id)
    bank = GlobalBank(units, nip_form)
    return KeyframeIndex([v.video_id for v in database], units, np.array(owner, np.int64),
                         np.array(pos, np.int64), np.array(shot, np.int64), bank, database)


def retrieve(q: VideoDescriptor, index: KeyframeIndex, cfg: AnalysisConfig = AnalysisConfig(),
             block: int = 3, seed: int = 0, cache: LocalCache | None = None,
             k_global: int | None = None, k_local: int | None = None):
    """Ranked (video id, score) list; videos whose best keyframe scores 0 are left out."""
    kg = cfg.k_global if k_global is None else k_global
    kl = cfg.k_local if k_local is None else k_local
    if kg <= 0 or len(index) == 0 or not q.units:
        return []
    form = index.bank.nip_form
    G = GlobalBank(q.units, form).scores(index.bank, cfg.w_nip)
    best = {}
    for i, u in enumerate(q.units):
        row = G[i]
        cand = np.argsort(-row, kind="stable")[:kg]
        comb = []
        for j in cand:
            m = match_keyframes(u, index.units[j], cfg, block, seed, form, g=float(row[j]), cache=cache)
            comb.append(m.combined)
        comb = np.array(comb)
        order = np.argsort(-comb, kind="stable")[:kl]
        for o in order:
            if comb[o] <= 0:
                continue
            vid = index.video_ids[index.owner[cand[o]]]
            if comb[o] > best.get(vid, 0.0):
                best[vid] = float(comb[o])
    return sorted(best.items(), key=lambda x: (-x[1], x[0]))


# ---------------------------------------------------------------- index files

INDEX_MAGIC = b"CDVAIDX1"


def write_index_pack(path: str, streams: dict):
    """Index file: magic | u32 n | n x (u16 id length | id | u32 size | bitstream)."""
    import os
    import struct

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<I", len(streams)))
        for vid in sorted(streams):
            b = vid.encode()
            fh.write(struct.pack("<H", len(b)) + b + struct.pack("<I", len(streams[vid])))
            fh.write(streams[vid])
    os.replace(tmp, path)


def read_index_pack(path: str) -> dict:
    import struct

    from .errors import CorruptStream

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != INDEX_MAGIC:
        raise CorruptStream(f"{path}: not a CDVAIDX1 index file")
    try:
        (n,) = struct.unpack_from("<I", data, 8)
        pos, out = 12, {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, pos)
            vid = data[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            (size,) = struct.unpack_from("<I", data, pos)
            out[vid] = data[pos + 4:pos + 4 + size]
            if len(out[vid]) != size:
                raise CorruptStream(f"{path}: entry {vid} truncated")
            pos += 4 + size
    except struct.error:
        raise CorruptStream(f"{path}: index truncated") from None
    if pos != len(data):
        raise CorruptStream(f"{path}: trailing bytes")
    return out
