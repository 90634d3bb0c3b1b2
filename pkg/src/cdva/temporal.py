"""Shot segmentation and I/P keyframe scheduling from colour histograms."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ThresholdOrderWarning
from .media import ColorHistogram, histogram_distance


@dataclass(frozen=True)
class SamplingConfig:
    keyframe_threshold: float = 0.3
    shot_threshold: float = 0.5
    medoid_refine: bool = False
    medoid_scfv_threshold: float = 0.75
    p_frame_stride: int = 5
    hist_bins: int = 64  # per channel, power of two

    def __post_init__(self):
        for name in ("keyframe_threshold", "shot_threshold", "medoid_scfv_threshold"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.p_frame_stride < 0:
            raise ValueError("p_frame_stride must be >= 0")
        if not 1 <= self.hist_bins <= 256 or self.hist_bins & (self.hist_bins - 1):
            raise ValueError(f"hist_bins must be a power of two in [1, 256], got {self.hist_bins}")
        if self.shot_threshold < self.keyframe_threshold:
            warnings.warn("shot threshold below keyframe threshold: shots will be finer than "
                          "keyframe spacing", ThresholdOrderWarning, stacklevel=2)


@dataclass(frozen=True)
class KeyframeEntry:
    index: int
    timestamp: float
    kind: str  # "I" or "P"
    shot: int = 0


@dataclass(frozen=True)
class Shot:
    start: float
    end: float
    members: tuple  # positions into TemporalStructure.keyframes


@dataclass
class TemporalStructure:
    keyframes: list
    shots: list
    duration: float = 0.0

    def i_frames(self):
        return [k.index for k in self.keyframes if k.kind == "I"]

    def to_record(self) -> dict:
        return {
            "duration": self.duration,
            "keyframes": [{"index": k.index, "timestamp": k.timestamp, "kind": k.kind, "shot": k.shot}
                          for k in self.keyframes],
            "shots": [{"start": s.start, "end": s.end, "members": list(s.members)} for s in self.shots],
        }


def sample_keyframes(histograms: Sequence[ColorHistogram], config: SamplingConfig) -> list[int]:
    """Frame 0 plus every frame whose distance to the last kept frame exceeds the threshold."""
    if not histograms:
        return []
    kept = [0]
    last = histograms[0]
    for i in range(1, len(histograms)):
        if histogram_distance(histograms[i], last) > config.keyframe_threshold:
            kept.append(i)
            last = histograms[i]
    return kept


def shot_bounds(first_last: Sequence[tuple], duration: float) -> list[tuple]:
    """Interval per shot given (first timestamp, last timestamp) of its members.

    Boundaries sit halfway between the last member of one shot and the first
    member of the next; the outer shots extend to 0 and ``duration``.
    """
    out = []
    n = len(first_last)
    for s, (first, last) in enumerate(first_last):
        start = 0.0 if s == 0 else 0.5 * (first_last[s - 1][1] + first)
        end = duration if s == n - 1 else 0.5 * (last + first_last[s + 1][0])
        out.append((start, end))
    return out


def detect_shots(keyframes: Sequence[int], histograms: Sequence[ColorHistogram], shot_threshold: float,
                 timestamps: Sequence[float] | None = None, duration: float | None = None) -> list[Shot]:
    """Greedy grouping: a keyframe opens a new shot when its distance to the
    current shot's first keyframe is >= ``shot_threshold``."""
    if not keyframes:
        return []
    if timestamps is None:
        timestamps = np.arange(len(histograms), dtype=float)
    if duration is None:
        duration = float(timestamps[-1]) + (timestamps[1] - timestamps[0] if len(timestamps) > 1 else 1.0)
    groups = [[0]]
    head = histograms[keyframes[0]]
    for pos in range(1, len(keyframes)):
        h = histograms[keyframes[pos]]
        if histogram_distance(h, head) >= shot_threshold:
            groups.append([pos])
            head = h
        else:
            groups[-1].append(pos)
    fl = [(timestamps[keyframes[g[0]]], timestamps[keyframes[g[-1]]]) for g in groups]
    return [Shot(float(a), float(b), tuple(g)) for (a, b), g in zip(shot_bounds(fl, duration), groups)]


def medoid_refine(members: Sequence[int], descriptors: Sequence, threshold: float,
                  similarity: Callable) -> list[int]:
    """Medoid of a segment plus every member less similar to it than ``threshold``.

    ``descriptors[i]`` belongs to frame ``members[i]``; ``similarity`` compares two
    descriptors (SCFV similarity in the pipeline).
    """
    n = len(members)
    if n == 0:
        return []
    if n == 1:
        return [members[0]]
    sim = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = similarity(descriptors[i], descriptors[j])
    medoid = int(np.argmax(sim.sum(axis=1)))  # argmax takes the first on ties
    keep = {members[medoid]}
    keep.update(members[i] for i in range(n) if i != medoid and sim[medoid, i] < threshold)
    return sorted(keep)


def assign_p_frames(i_frames: Sequence[int], total_frames: int, stride: int,
                    fps: float = 1.0, shots: Sequence[Shot] | None = None) -> TemporalStructure:
    """Mark every ``stride``-th frame after each I-frame as P (stopping short of the next I).

    P-frames inherit the shot of the I-frame they follow; shot intervals are
    recomputed over all members.
    """
    i_frames = sorted(i_frames)
    duration = total_frames / fps
    shot_of = {}
    if shots:
        for s_id, s in enumerate(shots):
            for m in s.members:
                shot_of[i_frames[m]] = s_id
    entries = []
    for n, idx in enumerate(i_frames):
        sid = shot_of.get(idx, 0)
        entries.append(KeyframeEntry(idx, idx / fps, "I", sid))
        if stride > 0:
            stop = i_frames[n + 1] if n + 1 < len(i_frames) else total_frames
            for p in range(idx + stride, stop, stride):
                entries.append(KeyframeEntry(p, p / fps, "P", sid))
    return _with_shots(entries, duration)


def _with_shots(entries, duration) -> TemporalStructure:
    entries = sorted(entries, key=lambda e: e.index)
    by_shot: dict = {}
    for pos, e in enumerate(entries):
        by_shot.setdefault(e.shot, []).append(pos)
    order = sorted(by_shot, key=lambda s: by_shot[s][0])
    fl = [(entries[by_shot[s][0]].timestamp, entries[by_shot[s][-1]].timestamp) for s in order]
    bounds = shot_bounds(fl, duration)
    remap = {s: n for n, s in enumerate(order)}
    entries = [KeyframeEntry(e.index, e.timestamp, e.kind, remap[e.shot]) for e in entries]
    shots = [Shot(float(a), float(b), tuple(by_shot[s])) for s, (a, b) in zip(order, bounds)]
    return TemporalStructure(entries, shots, duration)


def restrict(structure: TemporalStructure, keep_indices) -> TemporalStructure:
    """Drop keyframes whose frame index is not in ``keep_indices``; recompute shots."""
    keep = set(keep_indices)
    entries = [e for e in structure.keyframes if e.index in keep]
    return _with_shots(entries, structure.duration)


def rate_cap_mask(timestamps: Sequence[float], kinds: Sequence[str], cap: int, window: float = 1.0):
    """Boolean keep-mask limiting units to ``cap`` per sliding window.

    I units are admitted greedily first, then P units fill whatever room is
    left, so P units are always the first to go.
    """
    t = np.asarray(timestamps, dtype=float)
    keep = np.zeros(len(t), dtype=bool)
    for want in ("I", "P"):
        for i in range(len(t)):
            if kinds[i] != want:
                continue
            keep[i] = True
            if not _window_ok(t, keep, cap, window):
                keep[i] = False
    return keep


def _window_ok(t, keep, cap, window):
    tk = t[keep]
    if len(tk) <= cap:
        return True
    tk = np.sort(tk)
    # any window [s, s+window) holding more than cap units has cap+1 units spanning < window
    return bool(np.all(tk[cap:] - tk[:-cap] >= window))


def build_structure(histograms, fps: float, config: SamplingConfig,
                    refine: Callable | None = None) -> TemporalStructure:
    """Full sampling stage: keyframes, shots, optional medoid refinement, P scheduling.

    ``refine(segment_frame_indices) -> list of I indices`` is supplied by the
    extraction pipeline when medoid refinement is enabled, since it needs SCFVs.
    """
    n = len(histograms)
    ts = np.arange(n) / fps
    duration = n / fps
    kf = sample_keyframes(histograms, config)
    if config.medoid_refine and refine is not None:
        refined = []
        bounds = kf[1:] + [n]
        for start, stop in zip(kf, bounds):
            refined.extend(refine(list(range(start, stop))))
        kf = sorted(set(refined))
    shots = detect_shots(kf, histograms, config.shot_threshold, ts, duration)
    return assign_p_frames(kf, n, config.p_frame_stride, fps, shots)
