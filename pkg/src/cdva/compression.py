"""Weight-bundle compression: Lloyd-Max scalar quantization, vector
quantization, canonical Huffman coding and whole-layer pruning.

Bundle file (``CDVAWTS1``), little endian::

    magic[8] | u32 n_pruned | n_pruned x name | u32 n_layers |
    n_layers x (name | u8 prunable | u8 ndim | u32 dims[ndim] | f32 data)

where ``name`` is ``u16 length`` + UTF-8 bytes. Compressed bundles
(``CDVAQWT1``) replace each layer's data by a codebook, canonical Huffman
code lengths and the coded index stream; see :func:`serialize_quantized`.
"""
from __future__ import annotations

import heapq
import io
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import CorruptTensor, DegenerateData, DegenerateDataWarning, NotPrunable

WTS_MAGIC = b"CDVAWTS1"
QWT_MAGIC = b"CDVAQWT1"
MAX_ITERS = 100
TOL = 1e-7
METHOD_SCALAR, METHOD_VQ = 1, 2
MAX_CODE_LEN = 63


# ---------------------------------------------------------------- bundles

@dataclass
class WeightBundle:
    layers: dict = field(default_factory=dict)  # name -> float32 ndarray, insertion ordered
    prunable: frozenset = frozenset()
    pruned: tuple = ()  # names removed so far

    def __post_init__(self):
        self.layers = {str(k): np.asarray(v, np.float32) for k, v in self.layers.items()}
        self.prunable = frozenset(self.prunable)
        for k, v in self.layers.items():
            if not np.all(np.isfinite(v)):
                raise CorruptTensor(f"layer {k} has non-finite values")

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.layers.values()))

    def shapes(self) -> dict:
        return {k: v.shape for k, v in self.layers.items()}


def _wname(fh, name):
    b = name.encode()
    fh.write(struct.pack("<H", len(b)))
    fh.write(b)


def _rname(fh):
    (n,) = struct.unpack("<H", _read(fh, 2))
    return _read(fh, n).decode()


def _read(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise CorruptTensor("weight file truncated")
    return b


def write_bundle(path: str, bundle: WeightBundle):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(WTS_MAGIC)
        fh.write(struct.pack("<I", len(bundle.pruned)))
        for n in bundle.pruned:
            _wname(fh, n)
        fh.write(struct.pack("<I", len(bundle.layers)))
        for name, w in bundle.layers.items():
            _wname(fh, name)
            fh.write(struct.pack("<BB", int(name in bundle.prunable), w.ndim))
            fh.write(struct.pack(f"<{w.ndim}I", *w.shape))
            fh.write(np.ascontiguousarray(w, "<f4").tobytes())
    os.replace(tmp, path)


def read_bundle(path: str) -> WeightBundle:
    with open(path, "rb") as fh:
        if fh.read(8) != WTS_MAGIC:
            raise CorruptTensor(f"{path}: not a CDVAWTS1 weight bundle")
        (npr,) = struct.unpack("<I", _read(fh, 4))
        pruned = tuple(_rname(fh) for _ in range(npr))
        (n,) = struct.unpack("<I", _read(fh, 4))
        layers, prunable = {}, set()
        for _ in range(n):
            name = _rname(fh)
            if name in layers:
                raise CorruptTensor(f"{path}: duplicate layer name {name}")
            flag, ndim = struct.unpack("<BB", _read(fh, 2))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
            count = int(np.prod(shape, dtype=np.int64))
            layers[name] = np.frombuffer(_read(fh, 4 * count), "<f4").reshape(shape)
            if flag:
                prunable.add(name)
        if fh.read(1):
            raise CorruptTensor(f"{path}: trailing bytes")
    return WeightBundle(layers, frozenset(prunable), pruned)


def bundle_nbytes(bundle: WeightBundle) -> int:
    """Serialized size of ``bundle`` in the CDVAWTS1 format."""
    n = 8 + 4 + 4 + sum(2 + len(p.encode()) for p in bundle.pruned)
    for name, w in bundle.layers.items():
        n += 2 + len(name.encode()) + 2 + 4 * w.ndim + 4 * w.size
    return n


def prune_layers(bundle: WeightBundle, names) -> WeightBundle:
    names = list(names)
    bad = [n for n in names if n not in bundle.prunable or n not in bundle.layers]
    if bad:
        raise NotPrunable(f"layer(s) not declared prunable: {', '.join(bad)}")
    drop = set(names)
    layers = {k: v for k, v in bundle.layers.items() if k not in drop}
    return WeightBundle(layers, bundle.prunable - drop, bundle.pruned + tuple(n for n in names))


def vgg_like_bundle(total_params: int = 100_000_000, seed: int = 0) -> WeightBundle:
    """Synthetic VGG-shaped bundle: thirteen conv layers holding about 10.6% of
    the parameters, and three prunable fully connected layers holding the rest
    (the split of VGG-16). Weights are He-scaled Gaussians."""
    rng = np.random.default_rng(seed)
    conv = [(64, 3), (64, 64), (128, 64), (128, 128), (256, 128), (256, 256), (256, 256),
            (512, 256), (512, 512), (512, 512), (512, 512), (512, 512), (512, 512)]
    fc = [(4096, 25088), (4096, 4096), (1000, 4096)]
    ref = sum(o * i * 9 for o, i in conv) + sum(o * i for o, i in fc)
    s = np.sqrt(total_params / ref)
    layers, prunable = {}, set()
    for n, (o, i) in enumerate(conv):
        o2, i2 = max(1, round(o * s)), (3 if n == 0 else max(1, round(i * s)))
        layers[f"conv{n + 1}"] = (rng.standard_normal((o2, i2, 3, 3), np.float32) * np.sqrt(2.0 / (i2 * 9))).astype(np.float32)
    for n, (o, i) in enumerate(fc):
        o2, i2 = max(1, round(o * s)), max(1, round(i * s))
        name = f"fc{n + 6}"
        w = rng.standard_normal((o2, i2), np.float32)
        w *= np.float32(np.sqrt(2.0 / i2))
        layers[name] = w
        prunable.add(name)
    return WeightBundle(layers, frozenset(prunable))


# ---------------------------------------------------------------- Lloyd-Max

@dataclass
class Quantized:
    codebook: np.ndarray  # (k,) scalar levels or (k, d) codewords
    indices: np.ndarray  # (n,) int
    distortion: list  # MSE per iteration
    pad: int = 0  # zeros appended to make the tensor size divisible by d


def _check_distortion(hist, d):
    if hist and d > hist[-1] * (1 + 1e-9) + 1e-15:
        raise AssertionError(f"Lloyd distortion increased: {hist[-1]} -> {d}")
    hist.append(d)


def lloyd_max_scalar(values, k: int = 256, seed: int = 0, max_iters: int = MAX_ITERS, tol: float = TOL) -> Quantized:
    """MSE-optimal scalar quantizer by Lloyd iterations from k-quantile init.

    ``seed`` is accepted for interface symmetry; the quantile init makes the
    result deterministic without it.
    """
    x = np.asarray(values, np.float64).ravel()
    if k < 2:
        raise ValueError("k must be at least 2")
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise DegenerateData("lloyd_max_scalar needs a nonempty finite input")
    xs = np.sort(x)
    distinct = np.unique(xs)
    if len(distinct) <= k:
        if len(distinct) < k:
            warnings.warn(f"{len(distinct)} distinct values for k={k}: codebook padded", DegenerateDataWarning,
                          stacklevel=2)
        cb = np.concatenate([distinct, np.full(k - len(distinct), distinct[-1])])
        idx = np.searchsorted(distinct, x)
        return Quantized(cb, idx.astype(np.int64), [0.0])
    n = len(xs)
    c1 = np.concatenate([[0.0], np.cumsum(xs)])
    c2 = np.concatenate([[0.0], np.cumsum(xs * xs)])
    cb = np.quantile(xs, (np.arange(k) + 0.5) / k)
    hist = []
    for _ in range(max_iters):
        cut = np.searchsorted(xs, 0.5 * (cb[1:] + cb[:-1]), side="right")
        lo = np.concatenate([[0], cut])
        hi = np.concatenate([cut, [n]])
        cnt = hi - lo
        s1 = c1[hi] - c1[lo]
        s2 = c2[hi] - c2[lo]
        # distortion of the current partition with the current codebook
        _check_distortion(hist, float(np.sum(s2 - 2 * cb * s1 + cnt * cb * cb) / n))
        new = np.where(cnt > 0, s1 / np.maximum(cnt, 1), cb)
        new = np.maximum.accumulate(new)  # float safety: centroids of ordered cells are ordered
        change = float(np.max(np.abs(new - cb)))
        cb = new
        if change < tol:
            break
    idx = np.searchsorted(0.5 * (cb[1:] + cb[:-1]), x, side="right")
    hist.append(float(np.mean((x - cb[idx]) ** 2)))
    return Quantized(cb, idx.astype(np.int64), hist)


def _assign(X, C, chunk=65536):
    cc = np.einsum("ij,ij->i", C, C)
    idx = np.empty(len(X), np.int64)
    for s in range(0, len(X), chunk):
        d = cc[None, :] - 2.0 * X[s:s + chunk] @ C.T
        idx[s:s + chunk] = np.argmin(d, axis=1)
    return idx


def vq_compress(tensor, d: int = 4, k: int = 256, seed: int = 0, max_iters: int = MAX_ITERS,
                tol: float = TOL) -> Quantized:
    """Generalized Lloyd (k-means) on consecutive d-element blocks."""
    x = np.asarray(tensor, np.float64).ravel()
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise DegenerateData("vq_compress needs a nonempty finite input")
    pad = (-x.size) % d
    X = np.concatenate([x, np.zeros(pad)]).reshape(-1, d)
    uniq = np.unique(X, axis=0)
    if len(uniq) <= k:
        if len(uniq) < k:
            warnings.warn(f"{len(uniq)} distinct blocks for k={k}: codebook padded", DegenerateDataWarning,
                          stacklevel=2)
        cb = np.concatenate([uniq, np.repeat(uniq[-1:], k - len(uniq), axis=0)])
        return Quantized(cb, _assign(X, uniq), [0.0], pad)
    rng = np.random.default_rng(seed)
    cb = uniq[np.sort(rng.choice(len(uniq), k, replace=False))].copy()
    hist = []
    for _ in range(max_iters):
        idx = _assign(X, cb)
        _check_distortion(hist, float(np.mean(np.sum((X - cb[idx]) ** 2, axis=1))) / d)
        cnt = np.bincount(idx, minlength=k)
        sums = np.zeros_like(cb)
        np.add.at(sums, idx, X)
        new = np.where(cnt[:, None] > 0, sums / np.maximum(cnt, 1)[:, None], cb)
        change = float(np.max(np.abs(new - cb)))
        cb = new
        if change < tol:
            break
    idx = _assign(X, cb)
    hist.append(float(np.mean(np.sum((X - cb[idx]) ** 2, axis=1))) / d)
    return Quantized(cb, idx, hist, pad)


def dequantize(q: Quantized, shape) -> np.ndarray:
    vals = q.codebook[q.indices].ravel()
    n = int(np.prod(shape, dtype=np.int64))
    return vals[:n].reshape(shape)


# ---------------------------------------------------------------- Huffman

def huffman_lengths(counts) -> np.ndarray:
    """Code length per symbol (0 for unused symbols); ties broken by symbol order."""
    counts = np.asarray(counts, np.int64)
    used = np.flatnonzero(counts > 0)
    lens = np.zeros(len(counts), np.int64)
    if len(used) == 0:
        return lens
    if len(used) == 1:
        lens[used[0]] = 1
        return lens
    heap = [(int(counts[s]), n, [int(s)]) for n, s in enumerate(used)]
    heapq.heapify(heap)
    tick = len(heap)
    while len(heap) > 1:
        c1, _, a = heapq.heappop(heap)
        c2, _, b = heapq.heappop(heap)
        for s in a:
            lens[s] += 1
        for s in b:
            lens[s] += 1
        heapq.heappush(heap, (c1 + c2, tick, a + b))
        tick += 1
    if lens.max() > MAX_CODE_LEN:
        raise DegenerateData(f"Huffman code length {lens.max()} exceeds {MAX_CODE_LEN}")
    return lens


def canonical_codes(lens) -> np.ndarray:
    lens = np.asarray(lens, np.int64)
    codes = np.zeros(len(lens), np.uint64)
    order = sorted((int(l), s) for s, l in enumerate(lens) if l > 0)
    code, prev = 0, 0
    for l, s in order:
        code <<= l - prev
        codes[s] = code
        code += 1
        prev = l
    return codes


@njit(cache=True)
def _pack(sym, codes, lens, out):
    pos = 0
    for i in range(len(sym)):
        c = codes[sym[i]]
        for j in range(lens[sym[i]] - 1, -1, -1):
            if (c >> np.uint64(j)) & np.uint64(1):
                out[pos >> 3] |= np.uint8(0x80 >> (pos & 7))
            pos += 1
    return pos


@njit(cache=True)
def _unpack(data, nbits, n, first, count, offset, syms, out):
    pos = 0
    for i in range(n):
        code = 0
        L = 0
        while True:
            if pos >= nbits:
                return -1
            code = (code << 1) | ((data[pos >> 3] >> (7 - (pos & 7))) & 1)
            pos += 1
            L += 1
            if L >= len(first):
                return -1
            if count[L] > 0 and code - first[L] < count[L] and code >= first[L]:
                out[i] = syms[offset[L] + code - first[L]]
                break
    return pos


@dataclass
class HuffmanStream:
    lengths: np.ndarray  # (k,) code length per symbol
    nbits: int
    payload: bytes
    n: int

    @property
    def nbytes(self) -> int:
        """Payload plus table: one length byte per symbol, u64 bit count, u64 symbol count."""
        return len(self.payload) + len(self.lengths) + 16


def huffman_code(indices, k: int | None = None) -> HuffmanStream:
    x = np.asarray(indices, np.int64).ravel()
    if x.size == 0:
        raise ValueError("huffman_code needs a nonempty index stream")
    k = int(k or x.max() + 1)
    lens = huffman_lengths(np.bincount(x, minlength=k))
    codes = canonical_codes(lens)
    total = int(np.sum(lens[x]))
    out = np.zeros((total + 7) // 8, np.uint8)
    _pack(x, codes, lens, out)
    return HuffmanStream(lens, total, out.tobytes(), len(x))


def huffman_decode(hs: HuffmanStream) -> np.ndarray:
    lens = np.asarray(hs.lengths, np.int64)
    L = int(lens.max()) + 2
    count = np.bincount(lens[lens > 0], minlength=L).astype(np.int64)
    count[0] = 0
    syms = np.array(sorted(range(len(lens)), key=lambda s: (lens[s], s)), np.int64)[np.sum(lens == 0):]
    first = np.zeros(L, np.int64)
    offset = np.zeros(L, np.int64)
    code = 0
    for l in range(1, L):
        first[l] = code
        offset[l] = offset[l - 1] + count[l - 1]
        code = (code + count[l]) << 1
    out = np.zeros(hs.n, np.int64)
    pos = _unpack(np.frombuffer(hs.payload, np.uint8), hs.nbits, hs.n, first, count, offset, syms, out)
    if pos != hs.nbits:
        raise CorruptTensor("Huffman stream does not decode to the declared length")
    return out


# ---------------------------------------------------------------- bundles end to end

@dataclass
class QuantizedLayer:
    name: str
    shape: tuple
    method: int
    d: int
    pad: int
    codebook: np.ndarray
    stream: HuffmanStream
    prunable: bool = False
    mse: float = 0.0


@dataclass
class QuantizedBundle:
    layers: list = field(default_factory=list)
    pruned: tuple = ()

    def dequantize(self) -> WeightBundle:
        out, prunable = {}, set()
        for q in self.layers:
            idx = huffman_decode(q.stream)
            flat = q.codebook.reshape(len(q.codebook), -1)[idx].ravel()
            n = int(np.prod(q.shape, dtype=np.int64))
            out[q.name] = flat[:n].reshape(q.shape).astype(np.float32)
            if q.prunable:
                prunable.add(q.name)
        return WeightBundle(out, frozenset(prunable), self.pruned)


def compress_bundle(bundle: WeightBundle, k: int = 256, prune=(), method: str = "scalar", d: int = 4,
                    seed: int = 0) -> QuantizedBundle:
    b = prune_layers(bundle, prune) if prune else bundle
    layers = []
    for name, w in b.layers.items():
        if method == "scalar":
            q = lloyd_max_scalar(w, k, seed)
            m, dd = METHOD_SCALAR, 1
        elif method == "vq":
            q = vq_compress(w, d, k, seed)
            m, dd = METHOD_VQ, d
        else:
            raise ValueError(f"unknown method {method!r}")
        rec = dequantize(q, w.shape).astype(np.float32)
        mse = float(np.mean((rec.astype(np.float64) - w) ** 2))
        layers.append(QuantizedLayer(name, w.shape, m, dd, q.pad, q.codebook.astype(np.float32).reshape(k, dd),
                                     huffman_code(q.indices, k), name in b.prunable, mse))
    return QuantizedBundle(layers, b.pruned)


def serialize_quantized(qb: QuantizedBundle) -> bytes:
    """``CDVAQWT1`` | u32 n_pruned | names | u32 n_layers | per layer: name |
    u8 prunable | u8 method | u16 d | u32 pad | u8 ndim | u32 dims | u32 k |
    f32 codebook[k*d] | u8 lengths[k] | u64 nbits | u64 n | payload."""
    fh = io.BytesIO()
    fh.write(QWT_MAGIC)
    fh.write(struct.pack("<I", len(qb.pruned)))
    for n in qb.pruned:
        _wname(fh, n)
    fh.write(struct.pack("<I", len(qb.layers)))
    for q in qb.layers:
        _wname(fh, q.name)
        fh.write(struct.pack("<BBHIB", int(q.prunable), q.method, q.d, q.pad, len(q.shape)))
        fh.write(struct.pack(f"<{len(q.shape)}I", *q.shape))
        k = len(q.codebook)
        fh.write(struct.pack("<I", k))
        fh.write(np.ascontiguousarray(q.codebook, "<f4").tobytes())
        fh.write(np.asarray(q.stream.lengths, np.uint8).tobytes())
        fh.write(struct.pack("<QQ", q.stream.nbits, q.stream.n))
        fh.write(q.stream.payload)
    return fh.getvalue()


def deserialize_quantized(data: bytes) -> QuantizedBundle:
    fh = io.BytesIO(data)
    if fh.read(8) != QWT_MAGIC:
        raise CorruptTensor("not a CDVAQWT1 compressed bundle")
    (npr,) = struct.unpack("<I", _read(fh, 4))
    pruned = tuple(_rname(fh) for _ in range(npr))
    (n,) = struct.unpack("<I", _read(fh, 4))
    layers = []
    for _ in range(n):
        name = _rname(fh)
        prunable, method, d, pad, ndim = struct.unpack("<BBHIB", _read(fh, 9))
        shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
        (k,) = struct.unpack("<I", _read(fh, 4))
        cb = np.frombuffer(_read(fh, 4 * k * d), "<f4").reshape(k, d)
        lens = np.frombuffer(_read(fh, k), np.uint8).astype(np.int64)
        nbits, count = struct.unpack("<QQ", _read(fh, 16))
        payload = _read(fh, (nbits + 7) // 8)
        layers.append(QuantizedLayer(name, tuple(shape), method, d, pad, cb,
                                     HuffmanStream(lens, nbits, payload, count), bool(prunable)))
    if fh.read(1):
        raise CorruptTensor("trailing bytes after compressed bundle")
    return QuantizedBundle(layers, pruned)


@dataclass
class CompressionReport:
    original_bytes: int
    pruned_bytes: int  # CDVAWTS1 size after pruning only
    compressed_bytes: int
    ratio: float
    pruning_ratio: float
    quantization_ratio: float
    params_before: int
    params_after: int
    layer_mse: dict  # surviving layer -> MSE
    layer_rel_mse: dict  # MSE / layer variance
    max_abs_error: float

    def text(self) -> str:
        lines = [f"original {self.original_bytes} B, pruned {self.pruned_bytes} B, compressed {self.compressed_bytes} B",
                 f"ratio {self.ratio:.2f}x (pruning {self.pruning_ratio:.2f}x, quantization+Huffman {self.quantization_ratio:.2f}x)",
                 f"params {self.params_before} -> {self.params_after}, max abs error {self.max_abs_error:.3e}"]
        for k in self.layer_mse:
            lines.append(f"  {k}: mse {self.layer_mse[k]:.3e} (relative {self.layer_rel_mse[k]:.3e})")
        return "\n".join(lines) + "\n"


def compression_report(original: WeightBundle, compressed, compressed_bytes: int | None = None) -> CompressionReport:
    """``compressed`` is a QuantizedBundle or a plain WeightBundle (identity or pruning only)."""
    if isinstance(compressed, QuantizedBundle):
        nbytes = compressed_bytes or len(serialize_quantized(compressed))
        rec = compressed.dequantize()
    else:
        rec = compressed
        nbytes = compressed_bytes or bundle_nbytes(compressed)
    pruned = WeightBundle({k: v for k, v in original.layers.items() if k in rec.layers},
                          original.prunable, rec.pruned)
    mse, rel, mx = {}, {}, 0.0
    for kname, w in rec.layers.items():
        o = original.layers[kname].astype(np.float64)
        e = w.astype(np.float64) - o
        mse[kname] = float(np.mean(e * e))
        var = float(np.var(o))
        rel[kname] = mse[kname] / var if var > 0 else 0.0
        mx = max(mx, float(np.max(np.abs(e))) if e.size else 0.0)
    ob, pb = bundle_nbytes(original), bundle_nbytes(pruned)
    return CompressionReport(ob, pb, nbytes, ob / nbytes, ob / pb, pb / nbytes, original.n_params,
                             rec.n_params, mse, rel, mx)


def quantize_backbone(backbone, k: int = 256, seed: int = 0):
    """Toy NIP backbone with every weight tensor replaced by its k-level
    Lloyd-Max reconstruction (quantize -> Huffman -> dequantize)."""
    from .nip import ToyBackbone

    b = WeightBundle(backbone.bundle())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDataWarning)  # small layers have < k distinct values
        rec = compress_bundle(b, k, seed=seed).dequantize()
    return ToyBackbone.from_bundle(rec.layers)
