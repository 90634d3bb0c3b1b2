"""Descriptor containers shared by extraction, the codec and analysis."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

DESC_LEN = 128


@dataclass
class LocalDescriptorSet:
    """Keypoint locations and ternary descriptors for one frame.

    Before encoding the rows are sorted by relevance (descending) and
    ``relevance``/``keypoints`` are populated. Decoded sets are in coded
    (location raster) order and carry neither.
    """

    xy: np.ndarray  # (n, 2) float64, pixel coordinates
    symbols: np.ndarray  # (n, 128) int8 in {-1, 0, 1}
    relevance: np.ndarray | None = None
    keypoints: list | None = None
    raw: np.ndarray | None = None  # (n, 128) float, pre-quantisation; not coded

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.symbols = np.asarray(self.symbols, dtype=np.int8).reshape(-1, DESC_LEN)
        if len(self.xy) != len(self.symbols):
            raise ValueError("keypoint and descriptor counts differ")

    def __len__(self):
        return len(self.symbols)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros((0, DESC_LEN), np.int8), np.zeros(0))

    def take(self, rows) -> "LocalDescriptorSet":
        rows = np.asarray(rows, dtype=np.int64)
        return LocalDescriptorSet(
            self.xy[rows], self.symbols[rows],
            None if self.relevance is None else self.relevance[rows],
            None if self.keypoints is None else [self.keypoints[i] for i in rows],
            None if self.raw is None else self.raw[rows])

    def fingerprint(self) -> bytes:
        fp = getattr(self, "_fp", None)
        if fp is None:
            h = hashlib.blake2b(digest_size=16)
            h.update(np.ascontiguousarray(self.symbols).tobytes())
            h.update(np.ascontiguousarray(self.xy).tobytes())
            fp = h.digest()
            self._fp = fp
        return fp


@dataclass
class ScfvDescriptor:
    """Selected Gaussian components with one-bit sub-vectors.

    ``mean_bits[j]`` belongs to the j-th set bit of ``mask`` (ascending
    component index). ``var_mask`` is a subset of ``mask``; ``var_bits`` rows
    follow its set bits the same way.
    """

    mask: np.ndarray  # (K,) bool
    mean_bits: np.ndarray  # (m, dim) uint8 0/1
    var_mask: np.ndarray | None = None
    var_bits: np.ndarray | None = None
    strengths: np.ndarray | None = None  # (K,) ranking statistic, pre-encoding only
    empty: bool = False  # frame had no local descriptors: unusable for matching

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.mean_bits = np.asarray(self.mean_bits, dtype=np.uint8)
        if self.mean_bits.ndim != 2:
            raise ValueError("mean_bits must be a 2-d (selected, dim) array")
        if int(self.mask.sum()) != len(self.mean_bits):
            raise ValueError("popcount(mask) must equal the number of mean sub-vectors")
        if self.var_mask is not None:
            self.var_mask = np.asarray(self.var_mask, dtype=bool)
            self.var_bits = np.asarray(self.var_bits, dtype=np.uint8).reshape(-1, self.mean_bits.shape[1])
            if np.any(self.var_mask & ~self.mask) or int(self.var_mask.sum()) != len(self.var_bits):
                raise ValueError("variance sub-vectors must cover a subset of the selected components")

    @property
    def K(self) -> int:
        return len(self.mask)

    @property
    def dim(self) -> int:
        return self.mean_bits.shape[1]

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def dense_bits(self):
        """(K, dim) mean bits, with unselected rows zero, and a (K, dim) var equivalent (or None)."""
        m = np.zeros((self.K, self.dim), np.uint8)
        m[self.mask] = self.mean_bits
        v = None
        if self.var_mask is not None:
            v = np.zeros((self.K, self.dim), np.uint8)
            v[self.var_mask] = self.var_bits
        return m, v

    @classmethod
    def from_dense(cls, mask, mean_dense, var_mask=None, var_dense=None, empty=False, strengths=None):
        mask = np.asarray(mask, bool)
        vb = None
        if var_mask is not None:
            var_mask = np.asarray(var_mask, bool)
            vb = np.asarray(var_dense)[var_mask]
        return cls(mask, np.asarray(mean_dense)[mask], var_mask, vb, strengths, empty)

    def same_content(self, other) -> bool:
        if self.K != other.K or self.dim != other.dim or self.empty != other.empty:
            return False
        if not np.array_equal(self.mask, other.mask) or not np.array_equal(self.mean_bits, other.mean_bits):
            return False
        if (self.var_mask is None) != (other.var_mask is None):
            return False
        if self.var_mask is not None:
            return np.array_equal(self.var_mask, other.var_mask) and np.array_equal(self.var_bits, other.var_bits)
        return True


@dataclass
class NipDescriptor:
    values: np.ndarray | None = None  # (C,) float, unit norm
    bits: np.ndarray | None = None  # (C,) uint8 0/1
    whitened: bool = False
    degenerate: bool = False

    @property
    def binarized(self) -> bool:
        return self.bits is not None

    @property
    def C(self) -> int:
        return len(self.bits) if self.bits is not None else len(self.values)


@dataclass
class KeyframeDescriptor:
    frame_index: int
    timestamp: float
    kind: str  # "I" or "P"
    shot_id: int
    local: LocalDescriptorSet
    scfv: ScfvDescriptor
    nip: NipDescriptor | None = None
    # P units only (filled by the codec): per local row, (ref unit offset, ref row) or (-1, -1) if intra
    prediction: np.ndarray | None = None


@dataclass
class VideoDescriptor:
    video_id: str
    fps: float
    frame_count: int
    width: int
    height: int
    units: list = field(default_factory=list)

    @property
    def duration(self) -> float:
        return self.frame_count / self.fps

    def shots(self) -> dict:
        """shot id -> (start, end) interval on this video's timeline."""
        from .temporal import shot_bounds

        members: dict = {}
        for u in self.units:
            members.setdefault(u.shot_id, []).append(u.timestamp)
        order = sorted(members, key=lambda s: min(members[s]))
        fl = [(min(members[s]), max(members[s])) for s in order]
        return dict(zip(order, shot_bounds(fl, self.duration)))


# ---------------------------------------------------------------- descriptor files

KP_FIELDS = ("x", "y", "scale", "orientation", "peak_response", "relevance", "level")


def save_video_descriptor(path: str, video: VideoDescriptor):
    """Uncompressed descriptor file (numpy ``.npz``) holding everything the
    encoder needs, including relevance order and pre-quantisation rows."""
    import json
    import os

    meta = {"video_id": video.video_id, "fps": video.fps, "frame_count": video.frame_count,
            "width": video.width, "height": video.height, "units": []}
    arrays = {}
    for i, u in enumerate(video.units):
        p = f"u{i}_"
        meta["units"].append({"frame_index": u.frame_index, "timestamp": u.timestamp, "kind": u.kind,
                              "shot_id": u.shot_id, "scfv_empty": bool(u.scfv.empty),
                              "nip": None if u.nip is None else {"whitened": u.nip.whitened,
                                                                 "degenerate": u.nip.degenerate}})
        arrays[p + "xy"] = u.local.xy
        arrays[p + "symbols"] = u.local.symbols
        if u.local.relevance is not None:
            arrays[p + "relevance"] = np.asarray(u.local.relevance, np.float64)
        if u.local.keypoints is not None:
            arrays[p + "keypoints"] = np.array([[getattr(k, f) for f in KP_FIELDS] for k in u.local.keypoints],
                                               np.float64).reshape(-1, len(KP_FIELDS))
        if u.local.raw is not None:
            arrays[p + "raw"] = u.local.raw
        s = u.scfv
        arrays[p + "mask"] = s.mask
        arrays[p + "mean_bits"] = s.mean_bits
        for name in ("var_mask", "var_bits", "strengths"):
            if getattr(s, name) is not None:
                arrays[p + name] = getattr(s, name)
        if u.nip is not None:
            if u.nip.values is not None:
                arrays[p + "nip_values"] = u.nip.values
            if u.nip.bits is not None:
                arrays[p + "nip_bits"] = u.nip.bits
        if u.prediction is not None:
            arrays[p + "prediction"] = u.prediction
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)
    tmp = path + ".tmp.npz"
    np.savez_compressed(tmp, **arrays)
    os.replace(tmp, path)


def load_video_descriptor(path: str) -> VideoDescriptor:
    import json

    from .errors import CorruptStream

    try:
        z = np.load(path, allow_pickle=False)
        meta = json.loads(bytes(z["meta"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptStream(f"{path}: not a descriptor file ({exc})") from None
    units = []
    for i, m in enumerate(meta["units"]):
        p = f"u{i}_"
        get = (lambda k: z[p + k] if p + k in z.files else None)
        kps = get("keypoints")
        if kps is not None:
            from .local import Keypoint

            kps = [Keypoint(*row) for row in kps.tolist()]
        loc = LocalDescriptorSet(get("xy"), get("symbols"), get("relevance"), kps, get("raw"))
        scfv = ScfvDescriptor(get("mask"), get("mean_bits"), get("var_mask"), get("var_bits"), get("strengths"),
                              m["scfv_empty"])
        nip = None
        if m["nip"] is not None:
            nip = NipDescriptor(get("nip_values"), get("nip_bits"), m["nip"]["whitened"], m["nip"]["degenerate"])
        units.append(KeyframeDescriptor(m["frame_index"], m["timestamp"], m["kind"], m["shot_id"], loc, scfv, nip,
                                        get("prediction")))
    return VideoDescriptor(meta["video_id"], meta["fps"], meta["frame_count"], meta["width"], meta["height"], units)
