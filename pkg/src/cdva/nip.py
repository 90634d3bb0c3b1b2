"""Nested invariance pooling over convolutional feature maps.

The toy backbone is a three-layer group-equivariant CNN on the four-fold
rotation group. Every filter of an output channel group is one base filter
rotated by 0, 90, 180 and 270 degrees (with the input orientation axis cycled
accordingly), which makes the backbone exactly equivariant:

    backbone(rot90(x)) == rotate_stack(backbone(x))

where ``rotate_stack`` rotates the maps spatially and cyclically shifts the
four orientation channels inside each group. Channels are therefore *not*
invariant on their own; invariance comes from pooling over the R input
rotations, which is what nested pooling is meant to demonstrate.

Stacks are held in memory as (R, H, W, C) arrays.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .descriptors import NipDescriptor
from .errors import (CorruptTensor, EmptyRoi, FormMismatch, ImageTooSmall, ModelMismatch,
                     ShapeMismatch)

TENSOR_MAGIC = b"CDVATNSR"
PCA_MAGIC = b"CDVAPCA1"
N_ORIENT = 4
GROUPS = (4, 8, 16)  # channel groups per layer; C = 16 * 4 = 64
BACKBONE_SEED = 20170  # documented seed for the shipped toy weights
INPUT_SIDE = 96  # target side of the square network input


# ---------------------------------------------------------------- stacks

@dataclass
class FeatureMapStack:
    tensor: np.ndarray  # (R, H, W, C)
    angles: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.tensor)
        if t.ndim != 4:
            raise ShapeMismatch(f"feature map stack must be 4-d, got shape {t.shape}")
        if t.shape[0] < 1 or t.shape[3] < 8:
            raise ShapeMismatch(f"need R >= 1 and C >= 8, got R={t.shape[0]}, C={t.shape[3]}")
        if not np.all(np.isfinite(t)):
            raise CorruptTensor("feature maps contain non-finite values")
        self.tensor = t
        if not self.angles:
            self.angles = tuple(90.0 * r for r in range(t.shape[0]))

    @property
    def R(self):
        return self.tensor.shape[0]

    @property
    def H(self):
        return self.tensor.shape[1]

    @property
    def W(self):
        return self.tensor.shape[2]

    @property
    def C(self):
        return self.tensor.shape[3]


def write_feature_maps(path: str, stack: FeatureMapStack):
    """Header: magic, then R, W, H, C as u32; payload f32, rotation-major,
    row-major, channel-minor."""
    t = stack.tensor
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<4I", t.shape[0], t.shape[2], t.shape[1], t.shape[3]))
        fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_feature_maps(path: str) -> FeatureMapStack:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24 or data[:8] != TENSOR_MAGIC:
        raise CorruptTensor(f"{path}: missing or truncated tensor header")
    R, W, H, C = struct.unpack("<4I", data[8:24])
    need = 4 * R * W * H * C
    if len(data) - 24 != need:
        raise ShapeMismatch(f"{path}: header declares {R}x{W}x{H}x{C} ({need} bytes), "
                            f"payload has {len(data) - 24}")
    t = np.frombuffer(data[24:], dtype="<f4").reshape(R, H, W, C)
    return FeatureMapStack(t.copy())


def rotate_stack(stack_tensor: np.ndarray, k: int = 1) -> np.ndarray:
    """Action of a k*90 degree input rotation on backbone output, for a single (H, W, C) map."""
    t = np.rot90(stack_tensor, k, axes=(0, 1))
    H, W, C = t.shape
    g = t.reshape(H, W, C // N_ORIENT, N_ORIENT)
    return np.roll(g, k, axis=3).reshape(H, W, C)


# ---------------------------------------------------------------- toy backbone

def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross-correlation of (Cin, n, n) with (Cout, Cin, 3, 3), replicate padding."""
    cin, h, wd = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    cols = np.empty((cin, 3, 3, h, wd))
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = p[:, dy:dy + h, dx:dx + wd]
    out = np.tensordot(w, cols, axes=([1, 2, 3], [0, 1, 2]))
    return out + b[:, None, None]


def _maxpool2(x):
    c, h, w = x.shape
    x = x[:, :h - h % 2, :w - w % 2]
    return np.maximum(np.maximum(x[:, 0::2, 0::2], x[:, 0::2, 1::2]),
                      np.maximum(x[:, 1::2, 0::2], x[:, 1::2, 1::2]))


def _lift_filters(base):
    """(G, Cin, 3, 3) -> (G*4, Cin, 3, 3): orientation o gets the base filter rotated o times."""
    G = base.shape[0]
    out = np.empty((G, N_ORIENT) + base.shape[1:])
    for o in range(N_ORIENT):
        out[:, o] = np.rot90(base, o, axes=(2, 3))
    return out.reshape((G * N_ORIENT,) + base.shape[1:])


def _group_filters(base):
    """(Gout, Gin, 4, 3, 3) -> (Gout*4, Gin*4, 3, 3) with
    W[(go, o), (gi, oi)] = rot90(base[go, gi, (oi - o) mod 4], o)."""
    Go, Gi = base.shape[:2]
    out = np.empty((Go, N_ORIENT, Gi, N_ORIENT, 3, 3))
    for o in range(N_ORIENT):
        shifted = np.roll(base, o, axis=2)  # shifted[..., oi] = base[..., (oi - o) mod 4]
        out[:, o] = np.rot90(shifted, o, axes=(3, 4))
    return out.reshape(Go * N_ORIENT, Gi * N_ORIENT, 3, 3)


@dataclass
class ToyBackbone:
    """Base filters and per-group biases; the full filter banks are derived."""

    layers: list = field(default_factory=list)  # [(base, bias)], bias per group

    @classmethod
    def from_seed(cls, seed: int = BACKBONE_SEED) -> "ToyBackbone":
        rng = np.random.default_rng(seed)
        layers = []
        cin = 3
        for n, g in enumerate(GROUPS):
            if n == 0:
                fan = cin * 9
                base = rng.normal(0.0, np.sqrt(2.0 / fan), size=(g, cin, 3, 3))
                base -= base.mean(axis=(1, 2, 3), keepdims=True)  # colour-edge detectors
            else:
                fan = cin * N_ORIENT * 9
                base = rng.normal(0.0, np.sqrt(2.0 / fan), size=(g, cin, N_ORIENT, 3, 3))
            bias = rng.uniform(0.0, 0.05, size=g)
            layers.append((base, bias))
            cin = g
        return cls(layers)

    def bundle(self) -> dict:
        out = {}
        for n, (base, bias) in enumerate(self.layers):
            out[f"conv{n + 1}.weight"] = base
            out[f"conv{n + 1}.bias"] = bias
        return out

    @classmethod
    def from_bundle(cls, layers: dict) -> "ToyBackbone":
        n = len(GROUPS)
        return cls([(np.asarray(layers[f"conv{i + 1}.weight"], dtype=np.float64),
                     np.asarray(layers[f"conv{i + 1}.bias"], dtype=np.float64)) for i in range(n)])

    def _banks(self):
        banks = getattr(self, "_cache", None)
        if banks is None:
            banks = []
            for n, (base, bias) in enumerate(self.layers):
                w = _lift_filters(base) if n == 0 else _group_filters(base)
                banks.append((w, np.repeat(bias, N_ORIENT)))
            self._cache = banks
        return banks

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(3, n, n) input -> (n/8, n/8, C) map."""
        for w, b in self._banks():
            x = _maxpool2(np.maximum(_conv3x3(x, w, b), 0.0))
        return np.ascontiguousarray(x.transpose(1, 2, 0))


_DEFAULT = None


def default_backbone() -> ToyBackbone:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = ToyBackbone.from_seed()
    return _DEFAULT


def prepare_input(rgb: np.ndarray, side: int = INPUT_SIDE) -> np.ndarray:
    """Centre square crop, integer block-average downsampling, scaled to [0, 1].

    The crop side is a multiple of 8f where f is the downsampling factor, so
    the three 2x2 pools tile exactly. Rotations commute with this exactly
    when the frame's leftover margins are even.
    """
    _, H, W = rgb.shape
    m = min(H, W)
    if m < 64:
        raise ImageTooSmall(f"frame is {W}x{H}, backbone needs at least 64x64")
    f = max(1, m // side)
    s = (m // (8 * f)) * 8 * f
    y0, x0 = (H - s) // 2, (W - s) // 2
    crop = np.asarray(rgb[:, y0:y0 + s, x0:x0 + s], dtype=np.float64) / 255.0
    if f > 1:
        crop = crop.reshape(3, s // f, f, s // f, f).mean(axis=(2, 4))
    return crop


def toy_backbone(frame, rotations: int = 4, model: ToyBackbone | None = None) -> FeatureMapStack:
    """Feature maps of the frame rotated by 0, 90, ... degrees (``rotations`` of them)."""
    rgb = frame.rgb() if hasattr(frame, "rgb") else np.asarray(frame, dtype=np.float64)
    model = model or default_backbone()
    x = prepare_input(rgb)
    maps = [model.forward(np.rot90(x, r, axes=(1, 2))) for r in range(rotations)]
    return FeatureMapStack(np.stack(maps))


# ---------------------------------------------------------------- pooling

@dataclass
class RoiGrid:
    """Regions per scale as (x0, y0, w, h) in feature-map cells."""

    scales: list  # list of lists of (x0, y0, w, h)

    @classmethod
    def uniform(cls, W: int, H: int, levels=(1, 2, 3)) -> "RoiGrid":
        """n x n square regions of side 2*min(W, H)/(n + 1), evenly spread over the map."""
        scales = []
        m = min(W, H)
        for n in levels:
            side = max(1, int(2 * m // (n + 1))) if n > 1 else m
            xs = _spread(W, side, n)
            ys = _spread(H, side, n)
            scales.append([(x, y, side, side) for y in ys for x in xs])
        return cls(scales)

    def validate(self, W: int, H: int):
        for rois in self.scales:
            for (x0, y0, w, h) in rois:
                if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
                    raise EmptyRoi(f"ROI {(x0, y0, w, h)} is empty or outside the {W}x{H} map")

    @property
    def rois(self):
        return [r for s in self.scales for r in s]


def _spread(L, side, n):
    if n == 1:
        return [(L - side) // 2]
    return [int(round(i * (L - side) / (n - 1))) for i in range(n)]


_POOL = {"avg": np.mean, "max": np.max}


@dataclass(frozen=True)
class PoolOps:
    translation: str = "avg"
    scale: str = "max"
    rotation: str = "avg"

    def __post_init__(self):
        for v in (self.translation, self.scale, self.rotation):
            if v not in _POOL:
                raise ValueError(f"pooling operator must be one of {sorted(_POOL)}, got {v!r}")


def nip_pool(stack: FeatureMapStack, grid: RoiGrid | None = None, ops: PoolOps = PoolOps()) -> NipDescriptor:
    """Translations inside each ROI, then over all ROIs, then over rotations; L2 at the end."""
    t = stack.tensor
    if grid is None:
        grid = RoiGrid.uniform(stack.W, stack.H)
    grid.validate(stack.W, stack.H)
    rois = grid.rois
    if not rois:
        raise EmptyRoi("ROI grid holds no regions")
    pt, ps, pr = _POOL[ops.translation], _POOL[ops.scale], _POOL[ops.rotation]
    per = np.stack([pt(t[:, y:y + h, x:x + w, :], axis=(1, 2)) for (x, y, w, h) in rois], axis=1)
    v = pr(ps(per, axis=1), axis=0).astype(np.float64)
    return _unit(v, whitened=False)


def _unit(v, whitened):
    n = np.linalg.norm(v)
    if n < 1e-12:
        return NipDescriptor(np.zeros_like(v), whitened=whitened, degenerate=True)
    return NipDescriptor(v / n, whitened=whitened)


# ---------------------------------------------------------------- whitening

@dataclass
class WhiteningModel:
    mean: np.ndarray  # (C,)
    projection: np.ndarray  # (C', C)

    @property
    def C(self):
        return len(self.mean)


def train_whitening(X: np.ndarray, dim: int | None = None, eps: float = 1e-6,
                    shrink: float = 1.0) -> WhiteningModel:
    """PCA whitening with eigenvalues regularised by ``shrink`` times their mean.

    ``shrink = 0`` is plain whitening. Pooled toy-backbone features are
    dominated by two global factors and have many near-null directions, so
    plain whitening mostly amplifies noise; shrinkage keeps the decorrelation
    without that.
    """
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False).reshape(X.shape[1], X.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    reg = shrink * float(np.mean(np.maximum(vals, 0.0))) + eps
    order = np.argsort(vals)[::-1][: dim or X.shape[1]]
    vals, vecs = np.maximum(vals[order], 0.0), vecs[:, order].T
    flip = np.sign(vecs[np.arange(len(vecs)), np.argmax(np.abs(vecs), axis=1)])
    return WhiteningModel(mean, (vecs * flip[:, None]) / np.sqrt(vals + reg)[:, None])


def whiten(d: NipDescriptor, model: WhiteningModel) -> NipDescriptor:
    if d.values is None:
        raise FormMismatch("whitening needs a float descriptor")
    if len(d.values) != model.C:
        raise ModelMismatch(f"descriptor has C={len(d.values)}, whitening model expects {model.C}")
    v = (d.values - model.mean) @ model.projection.T
    return _unit(v, whitened=True)


def write_whitening(path: str, model: WhiteningModel):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(PCA_MAGIC + struct.pack("<2I", model.projection.shape[0], model.C))
        fh.write(np.asarray(model.mean, "<f4").tobytes())
        fh.write(np.asarray(model.projection, "<f4").tobytes())
    os.replace(tmp, path)


def read_whitening(path: str) -> WhiteningModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != PCA_MAGIC or len(data) < 16:
        raise CorruptTensor(f"{path}: not a whitening model file")
    out_dim, C = struct.unpack("<2I", data[8:16])
    if len(data) != 16 + 4 * (C + out_dim * C):
        raise CorruptTensor(f"{path}: payload size does not match header")
    flat = np.frombuffer(data[16:], dtype="<f4").astype(np.float64)
    return WhiteningModel(flat[:C], flat[C:].reshape(out_dim, C))


# ---------------------------------------------------------------- similarity

def binarize_nip(d: NipDescriptor) -> NipDescriptor:
    if d.values is None:
        raise FormMismatch("descriptor is already binarized")
    return NipDescriptor(bits=(d.values > 0).astype(np.uint8), whitened=d.whitened, degenerate=d.degenerate)


def nip_similarity(a: NipDescriptor, b: NipDescriptor) -> float:
    if a.binarized != b.binarized:
        raise FormMismatch("cannot compare float and binarized NIP descriptors")
    if a.C != b.C:
        raise FormMismatch(f"NIP dimensions differ: {a.C} vs {b.C}")
    if a.degenerate or b.degenerate:
        return 0.0
    if a.binarized:
        return 1.0 - 2.0 * np.count_nonzero(a.bits != b.bits) / a.C
    return float(np.dot(a.values, b.values))


def fuse_scores(nip_sim: float, scfv_sim: float, w_nip: float = 0.5) -> float:
    if not 0.0 <= w_nip <= 1.0:
        raise ValueError("fusion weight must lie in [0, 1]")
    return w_nip * nip_sim + (1.0 - w_nip) * scfv_sim


def extract_nip(frame, rotations: int = 4, whitening: WhiteningModel | None = None,
                binarize: bool = False, model: ToyBackbone | None = None,
                ops: PoolOps = PoolOps()) -> NipDescriptor:
    d = nip_pool(toy_backbone(frame, rotations, model), None, ops)
    if whitening is not None and not d.degenerate:
        d = whiten(d, whitening)
    if binarize:
        d = binarize_nip(d)
    return d


def default_whitening() -> WhiteningModel | None:
    path = os.path.join(os.path.dirname(__file__), "data", "whitening_default.bin")
    return read_whitening(path) if os.path.exists(path) else None
