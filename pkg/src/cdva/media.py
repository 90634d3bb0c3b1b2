"""Frame ingestion and per-frame colour histograms.

Frames come from three kinds of sources, selected by the manifest's
``source`` string:

* a printf-style image path pattern (``frames/%05d.png``; PNG/PPM/anything
  Pillow reads),
* a raw planar file (``*.cdvafrm``, see :func:`write_frames`),
* ``synth:<json>`` -- procedurally rendered video, see :mod:`cdva.synth`.
"""
from __future__ import annotations

import glob
import json
import os
import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, ImageTooSmall, InvalidConfig, MissingFrame

MIN_SIDE = 64
RAW_MAGIC = b"CDVAFRM"
COLORSPACES = ("RGB", "YCbCr")


@dataclass
class Frame:
    index: int
    timestamp_s: float
    planes: np.ndarray  # (3, H, W) uint8
    colorspace: str = "RGB"

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 3 or p.shape[0] != 3:
            raise DimensionMismatch(f"expected 3 planes, got array of shape {p.shape}")
        if p.dtype != np.uint8:
            p = np.clip(np.rint(p), 0, 255).astype(np.uint8)
        self.planes = p

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def check_size(self):
        if self.width < MIN_SIDE or self.height < MIN_SIDE:
            raise ImageTooSmall(f"frame {self.index} is {self.width}x{self.height}, minimum is {MIN_SIDE}")

    def rgb(self) -> np.ndarray:
        """(3, H, W) float64 RGB in [0, 255]."""
        p = self.planes.astype(np.float64)
        if self.colorspace == "RGB":
            return p
        y, cb, cr = p[0], p[1] - 128.0, p[2] - 128.0
        r = y + 1.402 * cr
        g = y - 0.344136 * cb - 0.714136 * cr
        b = y + 1.772 * cb
        return np.clip(np.stack([r, g, b]), 0.0, 255.0)

    def luma(self) -> np.ndarray:
        """(H, W) float64 luma in [0, 1]."""
        if self.colorspace == "YCbCr":
            return self.planes[0].astype(np.float64) / 255.0
        r, g, b = self.planes.astype(np.float64)
        return (0.299 * r + 0.587 * g + 0.114 * b) / 255.0


@dataclass
class ColorHistogram:
    bins: np.ndarray  # (3, nbins), each row sums to 1

    @property
    def nbins(self) -> int:
        return self.bins.shape[1]


@dataclass
class VideoManifest:
    video_id: str
    source: str
    fps: float
    colorspace: str = "RGB"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.fps or self.fps <= 0:
            raise InvalidConfig(f"video {self.video_id!r}: fps must be > 0")
        if self.colorspace not in COLORSPACES:
            raise InvalidConfig(f"video {self.video_id!r}: unknown colorspace {self.colorspace!r}")

    def to_record(self) -> dict:
        rec = {"video_id": self.video_id, "source": self.source, "fps": self.fps,
               "colorspace": self.colorspace}
        rec.update(self.extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict, base_dir: str = "") -> "VideoManifest":
        rec = dict(rec)
        try:
            vid = str(rec.pop("video_id"))
            source = str(rec.pop("source"))
            fps = float(rec.pop("fps"))
        except KeyError as exc:
            raise InvalidConfig(f"manifest record missing field {exc}") from None
        cs = rec.pop("colorspace", "RGB")
        if base_dir and not source.startswith("synth:") and not os.path.isabs(source):
            source = os.path.join(base_dir, source)
        return cls(vid, source, fps, cs, rec)


def read_manifests(path: str) -> list[VideoManifest]:
    """Read a line-delimited JSON manifest (one video per line, ``#`` comments allowed)."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"{path}:{lineno}: {exc}") from None
            out.append(VideoManifest.from_record(rec, base))
    return out


def write_manifests(path: str, manifests: Iterable[VideoManifest]):
    with open(path, "w") as fh:
        for m in manifests:
            fh.write(json.dumps(m.to_record(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- loading

def _pattern_regex(pattern: str):
    m = re.search(r"%0?(\d*)d", pattern)
    if not m:
        raise InvalidConfig(f"frame pattern {pattern!r} has no %d field")
    head, tail = pattern[:m.start()], pattern[m.end():]
    rx = re.compile(re.escape(os.path.basename(head)) + r"(\d+)" + re.escape(tail) + "$")
    return os.path.dirname(head) or ".", rx, glob.escape(head) + "*" + glob.escape(tail)


def _read_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _load_pattern(manifest: VideoManifest) -> list[Frame]:
    _, rx, gpat = _pattern_regex(manifest.source)
    found = {}
    for p in glob.glob(gpat):
        m = rx.search(os.path.basename(p))
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise MissingFrame(f"no frames match {manifest.source!r}")
    idx = sorted(found)
    first = idx[0]
    for expect, got in enumerate(idx, start=first):
        if expect != got:
            raise MissingFrame(f"{manifest.video_id}: frame {expect} missing from sequence")
    return [_mk_frame(manifest, i, _read_image(found[first + i])) for i in range(len(idx))]


def _mk_frame(manifest, i, planes, shape=None):
    f = Frame(i, i / manifest.fps, planes, manifest.colorspace)
    if shape is not None and f.planes.shape != shape:
        raise DimensionMismatch(
            f"{manifest.video_id}: frame {i} is {f.width}x{f.height}, "
            f"expected {shape[2]}x{shape[1]}")
    return f


def read_raw_planar(path: str):
    """Returns (planes array (N, 3, H, W), colorspace)."""
    with open(path, "rb") as fh:
        head = fh.read(len(RAW_MAGIC) + 16)
        if len(head) < len(RAW_MAGIC) + 16 or head[:len(RAW_MAGIC)] != RAW_MAGIC:
            raise MissingFrame(f"{path}: not a raw planar frame file")
        w, h, cs, n = struct.unpack("<4I", head[len(RAW_MAGIC):])
        if cs >= len(COLORSPACES):
            raise MissingFrame(f"{path}: bad colorspace code {cs}")
        payload = fh.read()
    need = n * 3 * h * w
    if n < 1 or len(payload) < need:
        raise MissingFrame(f"{path}: holds {len(payload)} payload bytes, header promises {need}")
    arr = np.frombuffer(payload[:need], dtype=np.uint8).reshape(n, 3, h, w)
    return arr, COLORSPACES[cs]


def write_frames(path: str, frames: Sequence[Frame]):
    """Write frames to the raw planar format: magic, then width, height,
    colorspace code and frame count as little-endian u32, then planes."""
    if not frames:
        raise MissingFrame("cannot write an empty frame sequence")
    shape = frames[0].planes.shape
    cs = COLORSPACES.index(frames[0].colorspace)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<4I", shape[2], shape[1], cs, len(frames)))
        for f in frames:
            if f.planes.shape != shape:
                raise DimensionMismatch(f"frame {f.index} size differs from frame 0")
            fh.write(np.ascontiguousarray(f.planes).tobytes())
    os.replace(tmp, path)


def load_frames(manifest: VideoManifest) -> list[Frame]:
    src = manifest.source
    if src.startswith("synth:"):
        from . import synth

        arrays = synth.render_source(src[len("synth:"):])
        if not arrays:
            raise MissingFrame(f"{manifest.video_id}: synthetic source produced no frames")
        shape = arrays[0].shape
        return [_mk_frame(manifest, i, a, shape) for i, a in enumerate(arrays)]
    if "%" in src:
        frames = _load_pattern(manifest)
    elif os.path.isdir(src):
        raise MissingFrame(f"{src} is a directory; give a frame pattern such as {src}/%05d.png")
    else:
        if not os.path.exists(src):
            raise MissingFrame(f"frame source {src!r} does not exist")
        arr, cs = read_raw_planar(src)
        manifest = VideoManifest(manifest.video_id, src, manifest.fps, cs, manifest.extra)
        frames = [_mk_frame(manifest, i, arr[i]) for i in range(arr.shape[0])]
    shape = frames[0].planes.shape
    for f in frames:
        if f.planes.shape != shape:
            raise DimensionMismatch(
                f"{manifest.video_id}: frame {f.index} is {f.width}x{f.height} "
                f"after frames of {shape[2]}x{shape[1]}")
    return frames


# ---------------------------------------------------------------- histograms

def color_histogram(frame: Frame, nbins: int = 64) -> ColorHistogram:
    """Per-channel histogram of native plane values, each channel L1-normalised."""
    shift = 8 - int(round(np.log2(nbins)))
    if nbins < 1 or (1 << (8 - shift)) != nbins:
        raise InvalidConfig(f"histogram bin count must be a power of two <= 256, got {nbins}")
    planes = frame.planes.reshape(3, -1) >> shift
    bins = np.stack([np.bincount(ch, minlength=nbins) for ch in planes]).astype(np.float64)
    bins /= planes.shape[1]
    return ColorHistogram(bins)


def histogram_distance(a: ColorHistogram, b: ColorHistogram) -> float:
    """Histogram-intersection distance averaged over channels, in [0, 1]."""
    if np.array_equal(a.bins, b.bins):
        return 0.0
    inter = np.minimum(a.bins, b.bins).sum() / a.bins.shape[0]
    return float(min(1.0, max(0.0, 1.0 - inter)))
