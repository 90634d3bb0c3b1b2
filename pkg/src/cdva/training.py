"""Training-sample collection for the tau table, the GMM and the NIP whitening."""
from __future__ import annotations

import numpy as np

from . import nip as nipmod
from .config import PipelineConfig
from .extract import detector_config
from .local import ScaleSpace, compute_descriptors, detect_log_alp, score_keypoints, select_top
from .media import Frame
from .nip import PoolOps


def raw_local_descriptors(frames, cfg: PipelineConfig | None = None, n_max: int | None = None) -> np.ndarray:
    """Float descriptors of the top-relevance keypoints of every frame, stacked."""
    cfg = cfg or PipelineConfig()
    det = detector_config(cfg)
    out = []
    for f in frames:
        img = f.luma() if isinstance(f, Frame) else f
        space = ScaleSpace(img, det)
        kps = detect_log_alp(img, det.max_octaves, det, space)
        h, w = img.shape
        kps = select_top(score_keypoints(kps, w, h, det.weights), n_max or cfg.n_max)
        if kps:
            d = compute_descriptors(img, kps, space)
            out.append(d[np.linalg.norm(d, axis=1) > 0])
    return np.concatenate(out) if out else np.zeros((0, 128))


def raw_nip(frames, cfg: PipelineConfig | None = None, backbone=None) -> np.ndarray:
    """Unwhitened pooled NIP vectors, one row per non-degenerate frame."""
    cfg = cfg or PipelineConfig()
    p = cfg.nip.pooling
    ops = PoolOps(p[0], p[1], p[2])
    rows = []
    for f in frames:
        d = nipmod.extract_nip(f, cfg.nip.rotations, None, False, backbone, ops)
        if not d.degenerate:
            rows.append(d.values)
    return np.array(rows).reshape(-1, nipmod.GROUPS[-1] * nipmod.N_ORIENT)

