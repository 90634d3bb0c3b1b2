"""End-to-end descriptor extraction: frames -> TemporalStructure + VideoDescriptor.

Only the keyframes that survive the operating point's rate cap are
extracted, since the encoder would drop the others anyway; pass
``rate_cap=False`` to get descriptors for every scheduled keyframe.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nip as nipmod
from .config import Models, PipelineConfig, load_models
from .descriptors import KeyframeDescriptor, VideoDescriptor
from .errors import ImageTooSmall
from .local import DetectorConfig, extract_local
from .media import Frame, VideoManifest, color_histogram, load_frames
from .nip import PoolOps
from .scfv import SCFV_BUDGET, scfv_extract, scfv_similarity
from .temporal import TemporalStructure, build_structure, medoid_refine, rate_cap_mask, restrict


@dataclass
class Extraction:
    video: VideoDescriptor
    structure: TemporalStructure


def detector_config(cfg: PipelineConfig) -> DetectorConfig:
    lc = cfg.local
    return DetectorConfig(max_octaves=lc.max_octaves, threshold=lc.threshold, weights=tuple(lc.weights))


class FrameExtractor:
    """Per-frame descriptor extraction bound to one config and model set."""

    def __init__(self, cfg: PipelineConfig, models: Models | None = None):
        self.cfg = cfg
        self.models = models or load_models(cfg)
        self.det = detector_config(cfg)
        p = cfg.nip.pooling
        self.ops = PoolOps(p[0], p[1], p[2])

    def local(self, frame: Frame):
        return extract_local(frame, self.cfg.n_max, self.models.tau, self.det)

    def scfv(self, loc):
        raw = loc.raw if loc.raw is not None else np.zeros((0, 128))
        return scfv_extract(raw, self.models.gmm, SCFV_BUDGET[self.cfg.op])

    def nip(self, frame: Frame):
        if not self.cfg.nip.enabled:
            return None
        return nipmod.extract_nip(frame, self.cfg.nip.rotations, self.models.whitening, False,
                                  self.models.backbone, self.ops)

    def keyframe(self, frame: Frame, kind: str, shot: int) -> KeyframeDescriptor:
        loc = self.local(frame)
        return KeyframeDescriptor(frame.index, frame.timestamp_s, kind, shot, loc, self.scfv(loc),
                                  self.nip(frame))


def sample_structure(frames: list, fps: float, cfg: PipelineConfig, fx: FrameExtractor | None = None,
                     rate_cap: bool = True) -> TemporalStructure:
    """Keyframes, P frames and shots; with ``rate_cap`` restricted to the
    units the operating point's cap admits."""
    fx = fx or FrameExtractor(cfg)
    hists = [color_histogram(f, cfg.sampling.hist_bins) for f in frames]
    scfv_cache = {}

    def scfv_of(i):
        if i not in scfv_cache:
            scfv_cache[i] = fx.scfv(fx.local(frames[i]))
        return scfv_cache[i]

    def refine(segment):
        descs = [scfv_of(i) for i in segment]
        return medoid_refine(segment, descs, cfg.sampling.medoid_scfv_threshold, scfv_similarity)

    structure = build_structure(hists, fps, cfg.sampling, refine if cfg.sampling.medoid_refine else None)
    if rate_cap:
        kf = structure.keyframes
        keep = rate_cap_mask([k.timestamp for k in kf], [k.kind for k in kf], cfg.keyframe_cap)
        structure = restrict(structure, [k.index for k, m in zip(kf, keep) if m])
    return structure


def extract_frames(frames: list, video_id: str, fps: float, cfg: PipelineConfig | None = None,
                   models: Models | None = None, rate_cap: bool = True) -> Extraction:
    cfg = cfg or PipelineConfig()
    if not frames:
        raise ImageTooSmall(f"{video_id}: no frames")
    for f in frames[:1]:
        f.check_size()
    fx = FrameExtractor(cfg, models)
    structure = sample_structure(frames, fps, cfg, fx, rate_cap)
    units = [fx.keyframe(frames[k.index], k.kind, k.shot) for k in structure.keyframes]
    h, w = frames[0].height, frames[0].width
    return Extraction(VideoDescriptor(video_id, float(fps), len(frames), w, h, units), structure)


def extract_manifest(manifest: VideoManifest, cfg: PipelineConfig | None = None,
                     models: Models | None = None, rate_cap: bool = True) -> Extraction:
    frames = load_frames(manifest)
    return extract_frames(frames, manifest.video_id, manifest.fps, cfg, models, rate_cap)
