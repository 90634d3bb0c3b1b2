"""Procedural videos and descriptor sequences for tests and the planted corpus.

A scene is a large canvas of coloured shapes, blobs and texture patches
drawn from a seed. A shot films one scene with a slowly moving camera
(pan, zoom, roll) rendered by affine resampling. Videos are lists of shots
and are described by small JSON specs, so a manifest entry can carry its
own source as ``synth:<json>``.

Query modifications emulate the usual classes of transformations between
user-captured queries and reference footage: overlays, frame-rate change,
contrast change, grain, monochrome, blur and display capture.
"""
from __future__ import annotations

import colorsys
import json
import os
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .descriptors import (KeyframeDescriptor, LocalDescriptorSet, NipDescriptor, ScfvDescriptor,
                          VideoDescriptor)

CANVAS = 320
FRAME_W, FRAME_H = 128, 96
SHOT_CUT_DISTANCE = 0.6  # canvas histogram distance required across a planted cut
MODIFICATIONS = ("overlay", "fps", "contrast", "grain", "mono", "blur", "capture")


# ---------------------------------------------------------------- scenes

def _palette(rng, n=6):
    """Colours clustered around one hue, saturation and brightness per scene, so
    colour histograms of different scenes overlap little."""
    h0, s0, v0 = rng.random(), rng.uniform(0.3, 1.0), rng.uniform(0.2, 0.95)
    cols = []
    for _ in range(n):
        h = (h0 + rng.normal(0, 0.05)) % 1.0
        s = float(np.clip(s0 + rng.normal(0, 0.1), 0.1, 1.0))
        v = float(np.clip(v0 + rng.normal(0, 0.1), 0.1, 1.0))
        cols.append(colorsys.hsv_to_rgb(h, s, v))
    return np.array(cols) * 255.0


def _box(size, cx, cy, r):
    x0, x1 = max(0, int(cx - r)), min(size, int(cx + r) + 2)
    y0, y1 = max(0, int(cy - r)), min(size, int(cy + r) + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    return (slice(y0, y1), slice(x0, x1)), xx - cx, yy - cy


@lru_cache(maxsize=64)
def scene_canvas(seed: int, size: int = CANVAS) -> np.ndarray:
    """(3, size, size) float canvas in [0, 255].

    Smooth two-colour background, then filled ellipses, boxes and wedges in
    the scene palette, Gaussian blobs and a few fine-texture discs.
    Everything is drawn inside its bounding box to keep generation cheap.
    """
    rng = np.random.default_rng([seed, 7])
    pal = _palette(rng)
    small = rng.normal(size=(size // 8, size // 8))
    mix = ndimage.zoom(ndimage.gaussian_filter(small, 3.0), 8, order=1)
    mix = (mix - mix.min()) / (np.ptp(mix) + 1e-12)
    img = pal[0][:, None, None] * (1 - mix) + pal[1][:, None, None] * mix
    for _ in range(int(rng.integers(320, 400))):
        col = pal[rng.integers(len(pal))] * rng.uniform(0.8, 1.2)
        cx, cy = rng.uniform(0, size, 2)
        a, b = rng.uniform(2.0, 12, 2)
        sl, dx, dy = _box(size, cx, cy, max(a, b) * 1.5)
        th = rng.uniform(0, np.pi)
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        kind = rng.integers(3)
        if kind == 0:
            m = (u / a) ** 2 + (v / b) ** 2 <= 1
        elif kind == 1:
            m = (np.abs(u) <= a) & (np.abs(v) <= b)
        else:
            m = (np.abs(u) <= a) & (np.abs(v) <= b) & (u / a + v / b <= 0.5)
        region = img[:, sl[0], sl[1]]
        region[:, m] = col[:, None]
    for _ in range(int(rng.integers(400, 520))):
        cx, cy = rng.uniform(0, size, 2)
        s = rng.uniform(1.2, 5.0)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(35, 90)
        sl, dx, dy = _box(size, cx, cy, 3.5 * s)
        g = np.exp(-(dx ** 2 + dy ** 2) / (2 * s * s))
        img[:, sl[0], sl[1]] += amp * g[None] * rng.uniform(0.5, 1.0, size=(3, 1, 1))
    for _ in range(4):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(15, 30)
        sl, dx, dy = _box(size, cx, cy, r)
        tex = ndimage.gaussian_filter(rng.normal(size=dx.shape), rng.uniform(1.0, 2.0))
        m = dx ** 2 + dy ** 2 <= r * r
        region = img[:, sl[0], sl[1]]
        region[:, m] += 60 * tex[m] / (tex.std() + 1e-12)
    return np.clip(img, 0, 255)


def random_camera(rng, size: int = CANVAS, w: int = FRAME_W, h: int = FRAME_H):
    """[cx0, cy0, zoom0, roll0, cx1, cy1, zoom1, roll1] for one shot."""
    z0 = rng.uniform(0.9, 1.3)
    margin = 0.5 * np.hypot(w, h) * z0 * 1.15
    c0 = rng.uniform(margin, size - margin, 2)
    c1 = np.clip(c0 + rng.normal(0, 12, 2), margin, size - margin)
    z1 = z0 * rng.uniform(0.92, 1.08)
    r0 = rng.uniform(-0.08, 0.08)
    r1 = r0 + rng.uniform(-0.05, 0.05)
    return [float(c0[0]), float(c0[1]), float(z0), float(r0), float(c1[0]), float(c1[1]), float(z1), float(r1)]


def render_view(canvas: np.ndarray, cx, cy, zoom, roll, w: int, h: int) -> np.ndarray:
    """Output pixel (u, v) samples canvas at c + zoom * R(roll) (u - w/2, v - h/2)."""
    c, s = np.cos(roll), np.sin(roll)
    # affine_transform maps output (row, col) -> input (row, col)
    M = zoom * np.array([[c, s], [-s, c]])  # (v, u) -> (y, x)
    off = np.array([cy, cx]) - M @ np.array([h / 2.0, w / 2.0])
    return np.stack([ndimage.affine_transform(ch, M, off, output_shape=(h, w), order=1, mode="reflect")
                     for ch in canvas])


# ---------------------------------------------------------------- videos

def video_spec(shots, fps=5.0, duration=None, w=FRAME_W, h=FRAME_H, mods=(), mod_seed=0):
    """shots: list of dicts with scene, dur, cam and optional t0 (camera time offset)."""
    total = sum(s["dur"] for s in shots)
    return {"w": w, "h": h, "fps": fps, "duration": duration or total, "shots": list(shots),
            "mods": list(mods), "mod_seed": mod_seed}


def frame_times(spec):
    n = int(round(spec["duration"] * spec["fps"]))
    return np.arange(n) / spec["fps"]


def render_video(spec) -> list:
    w, h = spec["w"], spec["h"]
    starts = np.cumsum([0.0] + [s["dur"] for s in spec["shots"]])
    frames = []
    for k, t in enumerate(frame_times(spec)):
        i = int(np.clip(np.searchsorted(starts, t + 1e-9, side="right") - 1, 0, len(spec["shots"]) - 1))
        sh = spec["shots"][i]
        tau = t - starts[i] + sh.get("t0", 0.0)
        a = min(1.0, max(0.0, tau / max(sh.get("path_dur", sh["dur"]), 1e-9)))
        cam = np.asarray(sh["cam"], dtype=np.float64)
        p = cam[:4] * (1 - a) + cam[4:] * a
        img = render_view(scene_canvas(int(sh["scene"])), p[0], p[1], p[2], p[3], w, h)
        for m in spec.get("mods", []):
            img = apply_modification(img, m, np.random.default_rng([spec.get("mod_seed", 0), k]),
                                     np.random.default_rng([spec.get("mod_seed", 0), 99]))
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    return frames


def render_source(source: str) -> list:
    return render_video(json.loads(source))


def apply_modification(img, kind, rng_frame, rng_fixed):
    """``rng_frame`` varies per frame (noise), ``rng_fixed`` is shared by all frames."""
    _, h, w = img.shape
    if kind == "overlay":
        out = img.copy()
        y0 = h - 18
        out[:, y0:y0 + 14, 6:w // 2 + 20] *= 0.35
        x = 10
        while x < w // 2 + 14:
            gw = int(rng_fixed.integers(3, 7))
            gh = int(rng_fixed.integers(6, 11))
            out[:, y0 + 12 - gh:y0 + 12, x:x + gw] = 240.0
            x += gw + int(rng_fixed.integers(2, 4))
        return out
    if kind == "fps":
        return img  # realised by the video's fps field
    if kind == "contrast":
        return 255.0 * (np.clip(img, 0, 255) / 255.0) ** 0.7 * 0.75 + 30.0
    if kind == "grain":
        return img + rng_frame.normal(0, 8.0, size=img.shape)
    if kind == "mono":
        y = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        return np.stack([y, y, y])
    if kind == "blur":
        out = np.stack([ndimage.gaussian_filter(ch, 0.9) for ch in img])
        return np.round(out / 12.0) * 12.0
    if kind == "capture":
        s = 0.82
        th = 0.04
        c, sn = np.cos(th), np.sin(th)
        M = np.array([[c, sn], [-sn, c]]) / s
        off = np.array([h / 2.0, w / 2.0]) - M @ np.array([h / 2.0, w / 2.0])
        out = np.stack([ndimage.affine_transform(ch, M, off, order=1, mode="constant", cval=20.0)
                        for ch in img])
        yy, xx = np.mgrid[0:h, 0:w]
        shade = 0.85 + 0.25 * xx / w
        return out * shade[None] + rng_frame.normal(0, 3.0, size=img.shape)
    raise ValueError(f"unknown modification {kind!r}")


# ---------------------------------------------------------------- planted corpus

def planted_corpus(n_queries=30, n_distractors=500, seed=0, fps=5.0, query_dur=3.0):
    """Returns (db records, query records, ground truth records).

    Each reference is three shots; the middle one films the query scene.
    Queries re-film the same shot with one modification each. Records are
    manifest/ground-truth dictionaries with ``synth:`` sources.
    """
    rng = np.random.default_rng([seed, 1])
    scene = iter(range(10_000 * (seed + 1), 10_000 * (seed + 2)))
    db, queries, gt = [], [], []
    for q in range(n_queries):
        mod = MODIFICATIONS[q % len(MODIFICATIONS)]
        qs = next(scene)
        bs = _distinct_scene(scene, [qs])
        as_ = _distinct_scene(scene, [qs])
        qshot = {"scene": qs, "dur": query_dur, "cam": random_camera(rng)}
        before = {"scene": bs, "dur": query_dur, "cam": random_camera(rng)}
        after = {"scene": as_, "dur": query_dur, "cam": random_camera(rng)}
        ref_id, q_id = f"ref{q:03d}", f"query{q:03d}"
        db.append(_record(ref_id, video_spec([before, qshot, after], fps)))
        qfps = 3.0 if mod == "fps" else fps
        qspec = video_spec([qshot], qfps, mods=[mod], mod_seed=seed * 1000 + q)
        queries.append(_record(q_id, qspec, modification=mod))
        gt.append({"type": "match", "query": q_id, "ref": ref_id,
                   "ref_interval": [query_dur, 2 * query_dur], "query_interval": [0.0, query_dur]})
    for d in range(n_distractors):
        shots = []
        for _ in range(int(rng.integers(1, 4))):
            shots.append({"scene": next(scene), "dur": float(rng.choice([2.0, 3.0, 4.0])),
                          "cam": random_camera(rng)})
        db.append(_record(f"dist{d:04d}", video_spec(shots, fps)))
    others = [r["video_id"] for r in db]
    for q in range(n_queries):
        q_id, ref_id = f"query{q:03d}", f"ref{q:03d}"
        pool = [o for o in others if o != ref_id]
        for o in rng.choice(len(pool), size=min(10, len(pool)), replace=False):
            gt.append({"type": "nonmatch", "query": q_id, "ref": pool[int(o)]})
    return db, queries, gt


def _canvas_histogram(seed):
    c = np.clip(np.rint(scene_canvas(seed)), 0, 255).astype(np.uint8) >> 2
    return np.stack([np.bincount(ch.ravel(), minlength=64) for ch in c]) / c[0].size


def _distinct_scene(scenes, avoid, min_dist=SHOT_CUT_DISTANCE):
    """Next scene seed whose canvas histogram is at least ``min_dist`` away
    from every scene in ``avoid``, so the planted shot cut is a real cut."""
    hs = [_canvas_histogram(a) for a in avoid]
    while True:
        s = next(scenes)
        h = _canvas_histogram(s)
        if all(1.0 - np.minimum(h, g).sum() / 3.0 >= min_dist for g in hs):
            return s


def _record(video_id, spec, **extra):
    rec = {"video_id": video_id, "source": "synth:" + json.dumps(spec, sort_keys=True),
           "fps": spec["fps"], "colorspace": "RGB"}
    rec.update(extra)
    return rec


def write_corpus(out_dir: str, **kw):
    db, queries, gt = planted_corpus(**kw)
    os.makedirs(out_dir, exist_ok=True)
    for name, recs in (("database.jsonl", db), ("queries.jsonl", queries), ("groundtruth.jsonl", gt)):
        with open(os.path.join(out_dir, name), "w") as fh:
            for r in recs:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return [os.path.join(out_dir, n) for n in ("database.jsonl", "queries.jsonl", "groundtruth.jsonl")]


# ---------------------------------------------------------------- descriptor sequences

def random_scfv(rng, K=128, dim=32, var=False, p_sel=0.8):
    mask = rng.random(K) < p_sel
    mb = rng.integers(0, 2, size=(int(mask.sum()), dim))
    vm = vb = None
    if var:
        vm = mask & (rng.random(K) < 0.5)
        vb = rng.integers(0, 2, size=(int(vm.sum()), dim))
    return ScfvDescriptor(mask, mb, vm, vb, rng.random(K), empty=bool(rng.random() < 0.05))


def random_local(rng, n, w, h, pool=None, flip=0.02):
    if pool is None:
        sym = rng.integers(-1, 2, size=(n, 128)).astype(np.int8)
    else:
        sym = pool[rng.integers(0, len(pool), size=n)].copy()
        f = rng.random(sym.shape) < flip
        sym[f] = rng.integers(-1, 2, size=int(f.sum()))
    xy = rng.uniform(0, 1, size=(n, 2)) * [w, h]
    return LocalDescriptorSet(xy, sym, rng.random(n))


def random_video_descriptor(rng, n_units=None, w=None, h=None, K=128, dim=32, C=64,
                            var=None, nip_float=False, n_max=300) -> VideoDescriptor:
    """Random but codec-valid descriptor with correlated consecutive units."""
    w = int(w or rng.integers(64, 200))
    h = int(h or rng.integers(64, 160))
    fps = float(rng.choice([5.0, 10.0, 25.0, 30.0]))
    n_units = int(n_units if n_units is not None else rng.integers(1, 9))
    var = bool(rng.random() < 0.5) if var is None else var
    pool = rng.integers(-1, 2, size=(400, 128)).astype(np.int8)
    frame = 0
    units = []
    shot = 0
    for i in range(n_units):
        kind = "I" if i == 0 or rng.random() < 0.3 else "P"
        if kind == "I" and i:
            shot += int(rng.random() < 0.5)
        n = int(rng.integers(0, n_max + 1))
        loc = random_local(rng, n, w, h, pool if rng.random() < 0.7 else None)
        if nip_float:
            v = rng.normal(size=C)
            nip = NipDescriptor(v / np.linalg.norm(v))
        else:
            nip = NipDescriptor(bits=rng.integers(0, 2, size=C).astype(np.uint8))
        units.append(KeyframeDescriptor(frame, frame / fps, kind, shot, loc, random_scfv(rng, K, dim, var), nip))
        frame += int(rng.integers(1, int(fps) + 1))
    return VideoDescriptor(f"rand{int(rng.integers(1 << 30))}", fps, frame + 1, w, h, units)


def correlated_sequence(rng, n_units=20, n_desc=200, share=0.85, w=FRAME_W, h=FRAME_H, fps=5.0,
                        stride=5, i_every=4, K=128, dim=32) -> VideoDescriptor:
    """Units sharing ``share`` of their descriptors (same symbols, jittered location) with the previous unit."""
    cur = random_local(rng, n_desc, w, h)
    scfv = random_scfv(rng, K, dim)
    scfv.empty = False
    units = []
    for i in range(n_units):
        if i:
            keep = rng.random(n_desc) < share
            new = random_local(rng, n_desc, w, h)
            xy = np.where(keep[:, None], np.clip(cur.xy + rng.normal(0, 0.7, cur.xy.shape), 0, [w - 1e-6, h - 1e-6]),
                          new.xy)
            sym = np.where(keep[:, None], cur.symbols, new.symbols)
            cur = LocalDescriptorSet(xy, sym, rng.random(n_desc))
            mb = scfv.mean_bits.copy()
            flip = rng.random(mb.shape) < 0.03
            mb[flip] ^= 1
            scfv = ScfvDescriptor(scfv.mask, mb, None, None, scfv.strengths)
        kind = "I" if i % i_every == 0 else "P"
        units.append(KeyframeDescriptor(i * stride, i * stride / fps, kind, i // i_every, cur, scfv))
    return VideoDescriptor("correlated", fps, n_units * stride, w, h, units)
