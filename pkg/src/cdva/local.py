"""Local features: LoG detection, relevance selection, SIFT-style
descriptors and their ternary quantisation.

Conventions: pixel centres sit at integer coordinates, ``x`` runs along
columns, ``y`` along rows. ``Keypoint.scale`` is the characteristic radius
of the detected blob, ``sqrt(2)`` times the LoG sigma at which it peaks.
Orientation is ``atan2(gy, gx)`` in image coordinates.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .descriptors import DESC_LEN, LocalDescriptorSet
from .errors import CorruptTensor, ImageTooSmall
from .media import MIN_SIDE, Frame

SQRT2 = np.sqrt(2.0)
DC_OFFSET = 8.0 / np.sqrt(DESC_LEN)  # cell sum of a perfectly flat unit descriptor
TAU_MAGIC = b"CDVATAU1"
DEFAULT_WEIGHTS = (0.5, 2.0, 1.0, -1.0)  # (w_scale, w_peak, w_center, bias)
N_MAX = {16: 150, 64: 250, 256: 300}
ORI_BINS = 36


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float = 0.0
    peak_response: float = 0.0
    relevance: float = 0.0
    level: float = 0.0  # fractional scale-space level, kept for descriptor sampling

    @property
    def sigma(self) -> float:
        return self.scale / SQRT2


@dataclass(frozen=True)
class DetectorConfig:
    max_octaves: int = 3
    scales_per_octave: int = 3
    sigma0: float = 1.6
    threshold: float = 0.02
    edge_ratio: float = 10.0
    weights: tuple = DEFAULT_WEIGHTS


def _as_image(src) -> np.ndarray:
    if isinstance(src, Frame):
        return src.luma()
    img = np.asarray(src, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0) if img.shape[0] == 3 else img.mean(axis=-1)
    return img


class ScaleSpace:
    """Scale-normalised LoG stack plus the matching Gaussian-smoothed images.

    All levels stay at full resolution: small frames, and it keeps the
    detector exactly equivariant under 90-degree rotations.
    """

    def __init__(self, image: np.ndarray, cfg: DetectorConfig):
        self.image = image
        self.cfg = cfg
        n = cfg.max_octaves * cfg.scales_per_octave + 2
        self.sigmas = cfg.sigma0 * 2.0 ** (np.arange(n) / cfg.scales_per_octave)
        # incremental blurring: level l is level l-1 blurred by the missing variance
        self._smooth = {}
        prev, ps = image, 0.0
        for lv, s in enumerate(self.sigmas):
            prev = ndimage.gaussian_filter(prev, np.sqrt(s * s - ps * ps), mode="reflect")
            self._smooth[lv] = prev
            ps = s
        self.log = np.stack([s * s * ndimage.laplace(self._smooth[lv], mode="reflect")
                             for lv, s in enumerate(self.sigmas)])
        self._grad = {}

    def sigma_at(self, level: float) -> float:
        return float(self.cfg.sigma0 * 2.0 ** (level / self.cfg.scales_per_octave))

    def smoothed(self, level: int) -> np.ndarray:
        return self._smooth[level]

    def gradients(self, level: int):
        """Central-difference gradient magnitude and orientation-bin split (lower bin, fraction)."""
        g = self._grad.get(level)
        if g is None:
            img = self.smoothed(level)
            gx = np.zeros_like(img)
            gy = np.zeros_like(img)
            gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
            gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
            b = np.mod(np.arctan2(gy, gx), 2 * np.pi) * ORI_BINS / (2 * np.pi)
            fl = np.floor(b)
            g = (np.hypot(gx, gy), fl.astype(np.int64) % ORI_BINS, b - fl)
            self._grad[level] = g
        return g

    def level_for_sigma(self, sigma: float) -> int:
        lv = int(round(self.cfg.scales_per_octave * np.log2(max(sigma, 1e-6) / self.cfg.sigma0)))
        return int(np.clip(lv, 0, len(self.sigmas) - 1))


def _vertex(rm, r0, rp):
    """Offset and value of the parabola through (-1, rm), (0, r0), (1, rp)."""
    g = 0.5 * (rp - rm)
    h = rp - 2.0 * r0 + rm
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(np.abs(h) > 1e-12, -g / h, 0.0)
    off = np.clip(off, -0.5, 0.5)
    return off, r0 + 0.5 * g * off


def detect_log_alp(frame, max_octaves: int = 3, cfg: DetectorConfig | None = None,
                   space: ScaleSpace | None = None) -> list[Keypoint]:
    """LoG scale-space extrema with polynomial refinement across scale and space.

    A degree-2 polynomial through the responses at the three neighbouring
    scales gives the refined scale and peak value; separate quadratic fits in
    x and y give the sub-pixel position.
    """
    cfg = cfg or DetectorConfig(max_octaves=max_octaves)
    img = _as_image(frame)
    h, w = img.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ImageTooSmall(f"image is {w}x{h}, minimum is {MIN_SIDE}")
    space = space or ScaleSpace(img, cfg)
    R = space.log
    fp = np.ones((3, 3, 3), bool)
    mx = ndimage.maximum_filter(R, footprint=fp, mode="nearest")
    mn = ndimage.minimum_filter(R, footprint=fp, mode="nearest")
    cand = ((R == mx) & (R > cfg.threshold)) | ((R == mn) & (R < -cfg.threshold))
    cand[0] = cand[-1] = False
    cand[:, 0, :] = cand[:, -1, :] = False
    cand[:, :, 0] = cand[:, :, -1] = False
    s, y, x = np.nonzero(cand)
    if len(s) == 0:
        return []
    r0 = R[s, y, x]
    # edge suppression on the response Hessian
    dxx = R[s, y, x + 1] + R[s, y, x - 1] - 2 * r0
    dyy = R[s, y + 1, x] + R[s, y - 1, x] - 2 * r0
    dxy = 0.25 * (R[s, y + 1, x + 1] - R[s, y + 1, x - 1] - R[s, y - 1, x + 1] + R[s, y - 1, x - 1])
    tr, det = dxx + dyy, dxx * dyy - dxy * dxy
    er = cfg.edge_ratio
    ok = (det > 0) & (tr * tr * er < (er + 1) ** 2 * det)
    s, y, x, r0 = s[ok], y[ok], x[ok], r0[ok]
    if len(s) == 0:
        return []
    ds, val = _vertex(R[s - 1, y, x], r0, R[s + 1, y, x])
    dx, _ = _vertex(R[s, y, x - 1], r0, R[s, y, x + 1])
    dy, _ = _vertex(R[s, y - 1, x], r0, R[s, y + 1, x])
    level = s + ds
    sig = cfg.sigma0 * 2.0 ** (level / cfg.scales_per_octave)
    X = np.clip(x + dx, 0.0, w - 1e-6)
    Y = np.clip(y + dy, 0.0, h - 1e-6)
    peak = np.abs(val)
    order = np.lexsort((X, Y, -peak))
    kept = []
    kx, ky, ks = [], [], []
    for i in order:
        if kept:
            d2 = (np.asarray(kx) - X[i]) ** 2 + (np.asarray(ky) - Y[i]) ** 2
            rs = np.abs(np.log(np.asarray(ks) / sig[i]))
            if np.any((d2 <= 0.25) & (rs <= np.log(1.05))):
                continue
        kept.append(i)
        kx.append(X[i])
        ky.append(Y[i])
        ks.append(sig[i])
    kps = []
    for i in kept:
        theta = _orientation(space, X[i], Y[i], sig[i])
        kps.append(Keypoint(float(X[i]), float(Y[i]), float(SQRT2 * sig[i]), theta, float(peak[i]),
                            0.0, float(level[i])))
    return kps


def _orientation(space: ScaleSpace, x, y, sigma) -> float:
    lv = space.level_for_sigma(sigma)
    mag, lo, frac = space.gradients(lv)
    h, w = mag.shape
    rad = int(np.ceil(3 * 1.5 * sigma))
    cx, cy = int(round(x)), int(round(y))
    x0, x1 = max(1, cx - rad), min(w - 2, cx + rad)
    y0, y1 = max(1, cy - rad), min(h - 2, cy + rad)
    if x1 < x0 or y1 < y0:
        return 0.0
    gxs = np.exp(-(np.arange(x0, x1 + 1) - x) ** 2 / (2 * (1.5 * sigma) ** 2))
    gys = np.exp(-(np.arange(y0, y1 + 1) - y) ** 2 / (2 * (1.5 * sigma) ** 2))
    wgt = gys[:, None] * gxs[None, :] * mag[y0:y1 + 1, x0:x1 + 1]
    lo = lo[y0:y1 + 1, x0:x1 + 1].ravel()
    frac = frac[y0:y1 + 1, x0:x1 + 1].ravel()
    wgt = wgt.ravel()
    nb = ORI_BINS
    hist = np.bincount(lo, wgt * (1 - frac), nb)
    hist += np.bincount((lo + 1) % nb, wgt * frac, nb)
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    if hist.max() <= 0:
        return 0.0
    k = int(np.argmax(hist))
    off, _ = _vertex(hist[k - 1], hist[k], hist[(k + 1) % nb])
    theta = (k + off) * 2 * np.pi / nb
    return float(np.mod(theta + np.pi, 2 * np.pi) - np.pi)


# ---------------------------------------------------------------- relevance

def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def score_relevance(kp: Keypoint, width: int, height: int, scale_range=(0.0, 1.0),
                    peak_range=(0.0, 1.0), weights=DEFAULT_WEIGHTS) -> float:
    """Fixed logistic relevance model over min-max normalised scale and peak
    response and the normalised distance to the frame centre."""
    ws, wp, wc, b = weights

    def norm(v, rng):
        lo, hi = rng
        return 0.0 if hi <= lo else float(np.clip((v - lo) / (hi - lo), 0.0, 1.0))

    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    dist = np.hypot(kp.x - cx, kp.y - cy) / max(np.hypot(cx, cy), 1e-9)
    z = ws * norm(kp.scale, scale_range) + wp * norm(kp.peak_response, peak_range) + wc * (1.0 - dist) + b
    return float(_logistic(z))


def score_keypoints(kps, width, height, weights=DEFAULT_WEIGHTS) -> list[Keypoint]:
    if not kps:
        return []
    sc = [k.scale for k in kps]
    pk = [k.peak_response for k in kps]
    sr, pr = (min(sc), max(sc)), (min(pk), max(pk))
    return [replace(k, relevance=score_relevance(k, width, height, sr, pr, weights)) for k in kps]


def select_top(kps, n_max: int) -> list[Keypoint]:
    """Highest relevance first; ties by peak response (desc), then y, then x (asc)."""
    if n_max <= 0:
        return []
    ranked = sorted(kps, key=lambda k: (-k.relevance, -k.peak_response, k.y, k.x))
    return ranked[:n_max]


# ---------------------------------------------------------------- descriptor

NS = 4  # spatial cells per side
NO = 8  # orientation bins
SPC = 4  # samples per cell side
MAGNIF = 3.0  # cell width in units of sigma


def _patch_coords(kps, spacing_scale=1.0):
    n = NS * SPC + 2
    u = (np.arange(n) - (n - 1) / 2.0)
    U, V = np.meshgrid(u, u)  # U along patch x, V along patch y
    out = []
    for k in kps:
        sp = MAGNIF * k.sigma / SPC * spacing_scale
        c, s = np.cos(k.orientation), np.sin(k.orientation)
        px = k.x + sp * (c * U - s * V)
        py = k.y + sp * (s * U + c * V)
        out.append((py, px))
    return out


def compute_descriptors(src, kps, space: ScaleSpace | None = None, cfg: DetectorConfig | None = None) -> np.ndarray:
    """(n, 128) float descriptors for ``kps``; rows of zeros for flat patches."""
    img = _as_image(src)
    if not kps:
        return np.zeros((0, DESC_LEN))
    if space is None:
        space = ScaleSpace(img, cfg or DetectorConfig())
    out = np.zeros((len(kps), DESC_LEN))
    coords = _patch_coords(kps)
    levels = [space.level_for_sigma(k.sigma) for k in kps]
    for lv in sorted(set(levels)):
        rows = [i for i, l in enumerate(levels) if l == lv]
        sm = space.smoothed(lv)
        py = np.stack([coords[i][0] for i in rows])
        px = np.stack([coords[i][1] for i in rows])
        vals = ndimage.map_coordinates(sm, [py.ravel(), px.ravel()], order=1, mode="mirror").reshape(py.shape)
        for r, i in enumerate(rows):
            out[i] = _histogram(vals[r])
    return out


def compute_descriptor(src, kp: Keypoint, space: ScaleSpace | None = None) -> np.ndarray:
    return compute_descriptors(src, [kp], space)[0]


_n = NS * SPC
_gv, _gu = np.mgrid[0:_n, 0:_n]
_CELL = (_gv // SPC) * NS + (_gu // SPC)
_c = (_n - 1) / 2.0
_WIN = np.exp(-((_gu - _c) ** 2 + (_gv - _c) ** 2) / (2 * (_n / 2.0) ** 2))


def _histogram(patch: np.ndarray) -> np.ndarray:
    gu = 0.5 * (patch[1:-1, 2:] - patch[1:-1, :-2])
    gv = 0.5 * (patch[2:, 1:-1] - patch[:-2, 1:-1])
    mag = np.hypot(gu, gv) * _WIN
    ang = np.mod(np.arctan2(gv, gu), 2 * np.pi) * NO / (2 * np.pi)
    lo = np.floor(ang).astype(int) % NO
    frac = ang - np.floor(ang)
    h = np.bincount((_CELL * NO + lo).ravel(), (mag * (1 - frac)).ravel(), DESC_LEN)
    h += np.bincount((_CELL * NO + (lo + 1) % NO).ravel(), (mag * frac).ravel(), DESC_LEN)
    return normalize_descriptor(h)


def normalize_descriptor(h):
    n = np.linalg.norm(h)
    if n < 1e-10:
        return np.zeros(DESC_LEN)
    h = np.minimum(h / n, 0.2)
    n = np.linalg.norm(h)
    return h / n


# ---------------------------------------------------------------- ternary

def transform(d: np.ndarray) -> np.ndarray:
    """Per 8-bin cell: centred cell sum, then the seven adjacent-bin differences."""
    d = np.asarray(d, dtype=np.float64)
    cells = d.reshape(d.shape[:-1] + (NS * NS, NO))
    t = np.empty_like(cells)
    t[..., 0] = cells.sum(axis=-1) - DC_OFFSET
    t[..., 1:] = np.diff(cells, axis=-1)
    return t.reshape(d.shape)


def inverse_transform(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    cells = t.reshape(t.shape[:-1] + (NS * NS, NO))
    csum = np.cumsum(cells[..., 1:], axis=-1)
    weights = np.arange(NO - 1, 0, -1)  # h0 appears in all cells; t_j in (8 - j) of them
    total = cells[..., 0] + DC_OFFSET
    h0 = (total - (cells[..., 1:] * weights).sum(axis=-1)) / NO
    out = np.empty_like(cells)
    out[..., 0] = h0
    out[..., 1:] = h0[..., None] + csum
    return out.reshape(t.shape)


def ternary_quantize(d: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Symbols in {-1, 0, 1}: sign of the transformed value when its magnitude
    strictly exceeds the per-element threshold, else 0."""
    t = transform(d)
    sym = np.where(np.abs(t) > tau, np.sign(t), 0.0)
    return sym.astype(np.int8)


def ternary_dequantize(sym: np.ndarray, tau: np.ndarray) -> np.ndarray:
    return inverse_transform(np.asarray(sym, dtype=np.float64) * 2.0 * tau)


def ternary_distance(a, b) -> int:
    return int(np.abs(np.asarray(a, np.int16) - np.asarray(b, np.int16)).sum())


def ternary_distance_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """All-pairs L1 distance between two symbol matrices, via one-hot products."""
    A = np.asarray(A)
    B = np.asarray(B)
    ap, an = (A == 1).astype(np.float32), (A == -1).astype(np.float32)
    bp, bn = (B == 1).astype(np.float32), (B == -1).astype(np.float32)
    d = (ap.sum(1)[:, None] + bp.sum(1)[None, :] - 2 * ap @ bp.T
         + an.sum(1)[:, None] + bn.sum(1)[None, :] - 2 * an @ bn.T)
    return np.rint(d).astype(np.int32)


def train_tau(descriptors: np.ndarray, percentile: float = 100.0 / 3.0) -> np.ndarray:
    t = np.abs(transform(np.asarray(descriptors)))
    tau = np.percentile(t, percentile, axis=0)
    return np.maximum(tau, 1e-6)


def write_tau(path: str, tau: np.ndarray):
    tau = np.asarray(tau, dtype="<f4")
    if tau.shape != (DESC_LEN,):
        raise ValueError("threshold table must hold 128 values")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(TAU_MAGIC + tau.tobytes())
    os.replace(tmp, path)


def read_tau(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != TAU_MAGIC or len(data) != 8 + 4 * DESC_LEN:
        raise CorruptTensor(f"{path}: not a threshold table")
    return np.frombuffer(data[8:], dtype="<f4").astype(np.float64)


def default_tau() -> np.ndarray:
    path = os.path.join(os.path.dirname(__file__), "data", "tau_default.bin")
    if os.path.exists(path):
        return read_tau(path)
    # fallback before the shipped table is generated
    return np.full(DESC_LEN, 0.03)


# ---------------------------------------------------------------- frame level

def extract_local(src, n_max: int, tau: np.ndarray, cfg: DetectorConfig | None = None) -> LocalDescriptorSet:
    """Detect, score, select and quantise: one frame's local descriptor set."""
    cfg = cfg or DetectorConfig()
    img = _as_image(src)
    space = ScaleSpace(img, cfg)
    kps = detect_log_alp(img, cfg.max_octaves, cfg, space)
    h, w = img.shape
    kps = select_top(score_keypoints(kps, w, h, cfg.weights), n_max)
    if not kps:
        return LocalDescriptorSet.empty()
    raw = compute_descriptors(img, kps, space)
    sym = ternary_quantize(raw, tau)
    xy = np.array([[k.x, k.y] for k in kps])
    rel = np.array([k.relevance for k in kps])
    return LocalDescriptorSet(xy, sym, rel, kps, raw)
