"""Evaluation metrics and the end-to-end experiment harness.

Metrics: interval-set Jaccard, ROC with TPR at a target FPR, mAP and
Precision@R (normalised and raw), bitrate. ``run_experiment`` drives
sample -> extract -> encode -> decode -> match/retrieve -> metrics over a
corpus of manifests and writes CSV reports. Everything in the report files
is deterministic given the config; wall-clock timings go to a separate
``timing.txt``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis
from .codec.stream import OperatingPoint, CodecConfig, audit, decode_video, encode_video
from .codec import globals as G
from .config import PipelineConfig, load_models
from .descriptors import NipDescriptor
from .errors import CdvaError, EmptyScores, MalformedInterval, NoRelevants
from .media import VideoManifest, load_frames, read_manifests

EPS_FPR = 1e-12


# ---------------------------------------------------------------- intervals

def _check(intervals):
    out = []
    for iv in intervals:
        s, e = float(iv[0]), float(iv[1])
        if not (math.isfinite(s) and math.isfinite(e)) or s > e:
            raise MalformedInterval(f"interval {tuple(iv)} is not a finite [start, end] with start <= end")
        out.append((s, e))
    return out


def _union(intervals):
    merged = []
    for s, e in sorted(intervals):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return merged


def _length(merged):
    return sum(e - s for s, e in merged)


def _intersection_length(a, b):
    i = j = 0
    tot = 0.0
    while i < len(a) and j < len(b):
        lo, hi = max(a[i][0], b[j][0]), min(a[i][1], b[j][1])
        if hi > lo:
            tot += hi - lo
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return tot


def jaccard(pred, truth, return_flag: bool = False):
    """|pred ∩ truth| / |pred ∪ truth| over interval sets (lengths in seconds).

    An empty union is defined as 0 and flagged as degenerate.
    """
    if pred and np.isscalar(pred[0]):
        pred = [pred]
    if truth and np.isscalar(truth[0]):
        truth = [truth]
    a, b = _union(_check(pred)), _union(_check(truth))
    inter = _intersection_length(a, b)
    uni = _length(a) + _length(b) - inter
    degenerate = uni <= 0
    v = 0.0 if degenerate else inter / uni
    return (v, degenerate) if return_flag else v


# ---------------------------------------------------------------- ROC

def roc_curve(pos, neg):
    """(fpr, tpr) points for thresholds sweeping the distinct scores downwards;
    a pair is declared matching when its score is >= the threshold. Starts at (0, 0)."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise EmptyScores("ROC needs at least one matching and one non-matching score")
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    ps, ns = np.sort(pos), np.sort(neg)
    tp = len(ps) - np.searchsorted(ps, thr, side="left")
    fp = len(ns) - np.searchsorted(ns, thr, side="left")
    fpr = np.concatenate([[0.0], fp / len(ns)])
    tpr = np.concatenate([[0.0], tp / len(ps)])
    return list(zip(fpr.tolist(), tpr.tolist())), np.concatenate([[np.inf], thr])


def tpr_at_fpr(roc, target: float = 0.01) -> float:
    """Linear interpolation between the ROC points bracketing ``target``; on a
    vertical segment at exactly ``target`` the highest TPR is taken."""
    f = np.array([p[0] for p in roc])
    t = np.array([p[1] for p in roc])
    i = int(np.searchsorted(f, target + EPS_FPR, side="right")) - 1
    if i < 0:
        return 0.0
    if abs(f[i] - target) <= EPS_FPR or i == len(f) - 1:
        return float(t[i])
    f0, f1, t0, t1 = f[i], f[i + 1], t[i], t[i + 1]
    return float(t0 + (t1 - t0) * (target - f0) / (f1 - f0))


def roc_and_tpr(pos, neg, target: float = 0.01):
    roc, _ = roc_curve(pos, neg)
    return roc, tpr_at_fpr(roc, target)


# ---------------------------------------------------------------- ranking metrics

def _check_relevance(rankings, relevance):
    for q in rankings:
        if not relevance.get(q):
            raise NoRelevants(f"query {q!r} has no relevant items")


def average_precision(ranking, relevant) -> float:
    relevant = set(relevant)
    if not relevant:
        raise NoRelevants("query has no relevant items")
    hits, acc = 0, 0.0
    for rank, item in enumerate(ranking, start=1):
        if item in relevant:
            hits += 1
            acc += hits / rank
    return acc / len(relevant)


def mean_average_precision(rankings: dict, relevance: dict) -> float:
    _check_relevance(rankings, relevance)
    if not rankings:
        raise NoRelevants("no queries")
    return float(np.mean([average_precision(rankings[q], relevance[q]) for q in sorted(rankings)]))


def precision_at_r(rankings: dict, relevance: dict, R: int = 100, normalized: bool = True) -> float:
    _check_relevance(rankings, relevance)
    if not rankings:
        raise NoRelevants("no queries")
    vals = []
    for q in sorted(rankings):
        rel = set(relevance[q])
        hit = len(rel.intersection(rankings[q][:R]))
        vals.append(hit / (min(R, len(rel)) if normalized else R))
    return float(np.mean(vals))


def interpolated_pr(ranking, relevant, levels=np.linspace(0, 1, 11)):
    """11-point interpolated precision for one query."""
    relevant = set(relevant)
    hits, prec, rec = 0, [], []
    for rank, item in enumerate(ranking, start=1):
        if item in relevant:
            hits += 1
            prec.append(hits / rank)
            rec.append(hits / len(relevant))
    prec, rec = np.array(prec), np.array(rec)
    return np.array([prec[rec >= r].max() if np.any(rec >= r) else 0.0 for r in levels])


def measure_bitrate(bits, duration: float) -> float:
    """KBps: total bytes / duration / 1000."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = bits if isinstance(bits, (int, np.integer)) else len(bits)
    return n / duration / 1000.0


# ---------------------------------------------------------------- ground truth

@dataclass
class GroundTruth:
    matches: list = field(default_factory=list)  # dicts: query, ref, ref_interval, query_interval
    nonmatches: list = field(default_factory=list)  # (query, ref)
    relevance: dict = field(default_factory=dict)  # query -> set of ref ids

    def validate(self, durations: dict | None = None):
        mp = {(m["query"], m["ref"]) for m in self.matches}
        both = mp.intersection(self.nonmatches)
        if both:
            raise MalformedInterval(f"pairs listed as both matching and non-matching: {sorted(both)[:3]}")
        for m in self.matches:
            for key, vid in (("ref_interval", m["ref"]), ("query_interval", m["query"])):
                iv = m.get(key)
                if iv is None:
                    continue
                (s, e), = _check([iv])
                if durations and vid in durations and (s < 0 or e > durations[vid] + 1e-6):
                    raise MalformedInterval(f"{key} {iv} of {vid} lies outside [0, {durations[vid]}]")


def read_groundtruth(path: str) -> GroundTruth:
    gt = GroundTruth()
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rec = json.loads(line)
            kind = rec.get("type")
            if kind == "match":
                gt.matches.append(rec)
                gt.relevance.setdefault(rec["query"], set()).add(rec["ref"])
            elif kind == "nonmatch":
                gt.nonmatches.append((rec["query"], rec["ref"]))
            else:
                raise MalformedInterval(f"{path}:{n}: record type must be 'match' or 'nonmatch'")
    gt.validate()
    return gt


# ---------------------------------------------------------------- experiment

VARIANTS = ("fused", "scfv", "nip", "nip_float", "nip_bits", "quantized")


@dataclass
class VariantReport:
    name: str
    roc: list = field(default_factory=list)
    tpr_at_fpr01: float | None = None
    jaccard_detected: float | None = None
    jaccard_all: float | None = None
    n_detected: int = 0
    map: float | None = None
    precision_at_r: float | None = None
    precision_at_r_raw: float | None = None
    per_query: dict = field(default_factory=dict)
    pairs: list = field(default_factory=list)
    pr: list = field(default_factory=list)


@dataclass
class EvalReport:
    op: int
    variants: dict = field(default_factory=dict)
    bitrate_kbps: dict = field(default_factory=dict)  # video id -> KBps
    budget_violations: dict = field(default_factory=dict)  # video id -> violating window starts
    failed: dict = field(default_factory=dict)  # video id -> error message
    nip_perturbation: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    @property
    def main(self) -> VariantReport:
        return self.variants["fused"] if "fused" in self.variants else next(iter(self.variants.values()))


def _log(msg, quiet):
    if not quiet:
        print(msg, file=sys.stderr, flush=True)


def _attach_nip(desc, nips: dict, form: str):
    """Copy of ``desc`` whose units carry the extraction-side NIP vectors."""
    units = []
    for u in desc.units:
        d = nips.get(u.frame_index)
        if d is not None and form == "bits" and d.values is not None:
            d = NipDescriptor(bits=(d.values > 0).astype(np.uint8), whitened=d.whitened, degenerate=d.degenerate)
        units.append(replace(u, nip=d))
    return replace(desc, units=units)


@dataclass
class VideoResult:
    video_id: str
    bits: bytes | None = None
    float_nip: dict | None = None  # frame index -> extraction-side float NIP
    quant_nip: dict | None = None  # frame index -> NIP from the quantized backbone
    perturbation: list | None = None  # per unit (pooled L2 change, whitened L2 change)
    error: str | None = None


def process_video(manifest: VideoManifest, cfg: PipelineConfig, models=None, quantized_backbone=None,
                  reuse_bits: str | None = None) -> VideoResult:
    """Extract and encode one video (or reuse its stored bitstream)."""
    from .extract import FrameExtractor, extract_frames

    vid = manifest.video_id
    try:
        if reuse_bits:
            path = bits_path(reuse_bits, vid)
            if os.path.exists(path):
                with open(path, "rb") as fh:
                    return VideoResult(vid, fh.read())
        models = models or load_models(cfg)
        op = OperatingPoint.from_label(cfg.op, cfg.keyframe_cap, cfg.n_max)
        nm = G.NIP_BITS if cfg.nip.binarize else G.NIP_FLOAT
        codec = CodecConfig(cfg.codec.block, cfg.codec.n_ref, cfg.codec.delta, nm)
        frames = load_frames(manifest)
        ex = extract_frames(frames, vid, manifest.fps, cfg, models)
        enc = encode_video(ex.video, op, codec)
        res = VideoResult(vid, enc.bits, {u.frame_index: u.nip for u in ex.video.units if u.nip is not None})
        if quantized_backbone is not None and cfg.nip.enabled:
            res.quant_nip, res.perturbation = quantized_nip(frames, [u.frame_index for u in enc.recon.units],
                                                            cfg, models, quantized_backbone)
        return res
    except (CdvaError, ValueError, OSError) as exc:
        return VideoResult(vid, error=f"{type(exc).__name__}: {exc}")


def quantized_nip(frames, indices, cfg: PipelineConfig, models, quantized_backbone):
    """NIP of the given frames with the quantized backbone, and per frame the
    L2 change against the original backbone, for pooled and whitened NIP."""
    from . import nip as nipmod

    p = cfg.nip.pooling
    ops = nipmod.PoolOps(p[0], p[1], p[2])
    out, pert = {}, []
    for i in indices:
        a = nipmod.extract_nip(frames[i], cfg.nip.rotations, None, False, models.backbone, ops)
        b = nipmod.extract_nip(frames[i], cfg.nip.rotations, None, False, quantized_backbone, ops)
        wa, wb = a, b
        if models.whitening is not None and not a.degenerate and not b.degenerate:
            wa, wb = nipmod.whiten(a, models.whitening), nipmod.whiten(b, models.whitening)
        out[i] = wb
        if not a.degenerate and not b.degenerate:
            pert.append((float(np.linalg.norm(a.values - b.values)), float(np.linalg.norm(wa.values - wb.values))))
    return out, pert


def bits_path(root: str, vid: str) -> str:
    return os.path.join(root, "bits", f"{vid}.bits")


_WORKER = {}


def _worker_init(cfg, qb, reuse):
    _WORKER.update(cfg=cfg, qb=qb, reuse=reuse, models=load_models(cfg))


def _worker_run(manifest):
    w = _WORKER
    return process_video(manifest, w["cfg"], w["models"], w["qb"], w["reuse"])


class Corpus:
    """Decoded descriptors, bitrates and failures of every video, with per-video error isolation."""

    def __init__(self, cfg: PipelineConfig, out_dir: str | None, quantized_backbone=None, quiet=True,
                 reuse_bits: str | None = None):
        self.cfg = cfg
        self.op = OperatingPoint.from_label(cfg.op, cfg.keyframe_cap, cfg.n_max)
        self.out_dir = out_dir
        self.qbackbone = quantized_backbone
        self.quiet = quiet
        self.reuse_bits = reuse_bits
        self.decoded, self.float_nip, self.quant_nip = {}, {}, {}
        self.durations, self.bitrate, self.violations, self.failed = {}, {}, {}, {}
        self.sizes, self.perturbation = {}, {}
        self._models = None

    def results(self, manifests):
        """VideoResults in manifest order; ``cfg.threads`` worker processes."""
        if self.cfg.threads > 1 and len(manifests) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(self.cfg.threads, initializer=_worker_init,
                                     initargs=(self.cfg, self.qbackbone, self.reuse_bits)) as pool:
                yield from pool.map(_worker_run, manifests, chunksize=4)
            return
        if self._models is None:
            self._models = load_models(self.cfg)
        for m in manifests:
            yield process_video(m, self.cfg, self._models, self.qbackbone, self.reuse_bits)

    def add_result(self, res: VideoResult):
        vid = res.video_id
        if res.error is None:
            try:
                if self.out_dir:
                    path = bits_path(self.out_dir, vid)
                    os.makedirs(os.path.dirname(path), exist_ok=True)
                    _atomic_write(path, res.bits)
                dec = decode_video(res.bits)
                _, bad = audit(res.bits, self.op.budget_bytes)
            except (CdvaError, ValueError, OSError) as exc:
                res.error = f"{type(exc).__name__}: {exc}"
        if res.error is not None:
            self.failed[vid] = res.error
            _log(f"  {vid}: FAILED ({res.error})", self.quiet)
            return
        self.decoded[vid] = dec
        self.durations[vid] = dec.duration
        self.bitrate[vid] = measure_bitrate(res.bits, dec.duration)
        self.sizes[vid] = len(res.bits)
        if bad:
            self.violations[vid] = bad
        if res.float_nip is not None:
            self.float_nip[vid] = res.float_nip
        if res.quant_nip is not None:
            self.quant_nip[vid] = res.quant_nip
            self.perturbation[vid] = res.perturbation


def _atomic_write(path, data):
    tmp = path + ".tmp"
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _variant_setup(name, cfg: PipelineConfig):
    """(analysis config, nip form, NIP source) for an ablation variant."""
    a = cfg.analysis
    if name == "fused":
        return a, "auto", None
    if name == "scfv":
        return replace(a, w_nip=0.0), "none", None
    if name == "nip":
        return replace(a, w_nip=1.0), "auto", None
    if name == "nip_float":
        return replace(a, w_nip=1.0), "float", "float"
    if name == "nip_bits":
        return replace(a, w_nip=1.0), "bits", "float"
    if name == "quantized":
        return a, "auto", "quantized"
    raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")


def evaluate_variant(name, corpus: Corpus, queries, database, gt: GroundTruth, cfg: PipelineConfig,
                     cache: analysis.LocalCache, quiet=True) -> VariantReport:
    acfg, form, src = _variant_setup(name, cfg)
    block, seed = cfg.codec.block, cfg.stage_seed("ransac")
    dec = corpus.decoded
    if src is not None:
        table = corpus.float_nip if src == "float" else corpus.quant_nip
        nform = "float" if form == "float" else "bits"
        dec = {v: _attach_nip(d, table.get(v, {}), nform) for v, d in dec.items()}
    rep = VariantReport(name)
    # pairwise matching
    pos, neg, js = [], [], []
    for m in gt.matches:
        q, r = dec.get(m["query"]), dec.get(m["ref"])
        if q is None or r is None:
            continue
        res = analysis.match_videos(q, r, acfg, block, seed, form, cache)
        pos.append(res.video_score)
        side = res.ref_intervals if acfg.localize_side == "ref" else res.query_intervals
        truth = m.get("ref_interval") if acfg.localize_side == "ref" else m.get("query_interval")
        j = jaccard(side, [truth]) if truth is not None else None
        if res.matched and j is not None:
            js.append(j)
        rep.pairs.append((m["query"], m["ref"], "match", res.video_score, int(res.matched),
                          j if j is not None else "", _fmt_iv(side)))
    for qid, rid in gt.nonmatches:
        q, r = dec.get(qid), dec.get(rid)
        if q is None or r is None:
            continue
        res = analysis.match_videos(q, r, acfg, block, seed, form, cache)
        neg.append(res.video_score)
        rep.pairs.append((qid, rid, "nonmatch", res.video_score, int(res.matched), "", ""))
    if pos and neg:
        rep.roc, rep.tpr_at_fpr01 = roc_and_tpr(pos, neg)
    n_match = len(pos)
    rep.n_detected = len(js)
    rep.jaccard_detected = float(np.mean(js)) if js else None
    rep.jaccard_all = float(np.sum(js) / n_match) if n_match else None
    # retrieval
    db = [dec[v] for v in database if v in dec]
    index = analysis.build_index(db, form)
    rankings = {}
    for qid in queries:
        if qid not in dec or not gt.relevance.get(qid):
            continue
        ranked = analysis.retrieve(dec[qid], index, acfg, block, seed, cache)
        rankings[qid] = [v for v, _ in ranked]
        ap = average_precision(rankings[qid], gt.relevance[qid])
        rep.per_query[qid] = (ap, ranked[0][0] if ranked else "", ranked[0][1] if ranked else 0.0)
    if rankings:
        rep.map = mean_average_precision(rankings, gt.relevance)
        rep.precision_at_r = precision_at_r(rankings, gt.relevance, 100, True)
        rep.precision_at_r_raw = precision_at_r(rankings, gt.relevance, 100, False)
        pr = np.mean([interpolated_pr(rankings[q], gt.relevance[q]) for q in sorted(rankings)], axis=0)
        rep.pr = list(zip(np.linspace(0, 1, 11).tolist(), pr.tolist()))
    return rep


def _fmt_iv(ivs):
    return ";".join(f"{s:.3f}-{e:.3f}" for s, e in ivs)


def nip_scan_timing(corpus: Corpus, queries, database, repeats: int = 7):
    """Best-of-``repeats`` wall time of the NIP-only global scan (every query
    keyframe against the whole database), float vs binarized."""
    out = {}
    for form in ("float", "bits"):
        dec = {v: _attach_nip(corpus.decoded[v], corpus.float_nip.get(v, {}), form)
               for v in list(queries) + list(database) if v in corpus.decoded}
        db_units = [u for v in database if v in dec for u in dec[v].units]
        q_units = [u for v in queries if v in dec for u in dec[v].units]
        if not db_units or not q_units:
            continue
        bank = analysis.GlobalBank(db_units, form)
        qb = analysis.GlobalBank(q_units, form)
        bank.nip_scan(qb, 0)  # warm the packed / float32 copies
        best = np.inf
        for _ in range(repeats):
            t = time.perf_counter()
            for i in range(qb.n):
                bank.nip_scan(qb, i)
            best = min(best, time.perf_counter() - t)
        out[form] = best
    return out


def run_experiment(database_manifest: str, query_manifest: str, groundtruth: str,
                   cfg: PipelineConfig | None = None, out_dir: str | None = None,
                   variants=("fused",), quiet: bool = True, reuse_bits: str | None = None,
                   quantize_k: int = 256) -> EvalReport:
    cfg = cfg or PipelineConfig()
    t0 = time.perf_counter()
    gt = read_groundtruth(groundtruth)
    db_m = read_manifests(database_manifest)
    q_m = read_manifests(query_manifest)
    qb = None
    if "quantized" in variants:
        from .compression import quantize_backbone

        qb = quantize_backbone(load_models(cfg).backbone, quantize_k, cfg.stage_seed("lloyd"))
    corpus = Corpus(cfg, out_dir, qb, quiet, reuse_bits)
    allm = db_m + q_m
    for n, res in enumerate(corpus.results(allm)):
        corpus.add_result(res)
        if n % 50 == 0 or n == len(allm) - 1:
            _log(f"[{n + 1}/{len(allm)}] videos processed ({time.perf_counter() - t0:.0f}s)", quiet)
    t_ex = time.perf_counter() - t0
    gt.validate(corpus.durations)
    rep = EvalReport(cfg.op, bitrate_kbps=dict(corpus.bitrate), budget_violations=dict(corpus.violations),
                     failed=dict(corpus.failed))
    q_ids = [m.video_id for m in q_m]
    db_ids = [m.video_id for m in db_m]
    cache = analysis.LocalCache()
    for name in variants:
        t = time.perf_counter()
        rep.variants[name] = evaluate_variant(name, corpus, q_ids, db_ids, gt, cfg, cache, quiet)
        rep.timing[f"variant_{name}_s"] = time.perf_counter() - t
        _log(f"variant {name}: mAP={_f(rep.variants[name].map)} ({rep.timing[f'variant_{name}_s']:.0f}s)", quiet)
    if not gt.nonmatches:
        rep.flags.append("tpr_at_fpr01 undefined: no non-matching pairs")
    pert = [p for v in sorted(corpus.perturbation) for p in corpus.perturbation[v]]
    if pert:
        P = np.array(pert)
        rep.nip_perturbation = {"pooled_mean_l2": float(P[:, 0].mean()), "pooled_max_l2": float(P[:, 0].max()),
                                "whitened_mean_l2": float(P[:, 1].mean()),
                                "whitened_max_l2": float(P[:, 1].max()), "n": len(P)}
    if {"nip_float", "nip_bits"} <= set(variants) or "nip" in variants:
        rep.timing.update({f"nip_scan_{k}_s": v for k, v in nip_scan_timing(corpus, q_ids, db_ids).items()})
    rep.timing["extraction_s"] = t_ex
    rep.timing["total_s"] = time.perf_counter() - t0
    if out_dir:
        write_report(rep, out_dir)
    return rep


def _f(v, nd=6):
    return "n/a" if v is None else f"{v:.{nd}f}"


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def summary_text(rep: EvalReport) -> str:
    lines = [f"operating point: {rep.op} KBps"]
    rates = list(rep.bitrate_kbps.values())
    if rates:
        lines.append(f"bitrate KBps: mean {np.mean(rates):.3f}, max {np.max(rates):.3f} over {len(rates)} streams")
    lines.append(f"budget violations: {sum(len(v) for v in rep.budget_violations.values())}")
    lines.append(f"failed videos: {len(rep.failed)}")
    for name, v in rep.variants.items():
        lines.append(f"[{name}] mAP {_f(v.map)}  P@100 {_f(v.precision_at_r)} (raw {_f(v.precision_at_r_raw)})  "
                     f"TPR@FPR=0.01 {_f(v.tpr_at_fpr01)}  Jaccard detected {_f(v.jaccard_detected)} "
                     f"(n={v.n_detected}, all-pairs {_f(v.jaccard_all)})")
    if rep.nip_perturbation:
        p = rep.nip_perturbation
        lines.append(f"quantized backbone NIP L2 change (pooled): mean {p['pooled_mean_l2']:.6f}, "
                     f"max {p['pooled_max_l2']:.6f}; whitened: mean {p['whitened_mean_l2']:.6f}, "
                     f"max {p['whitened_max_l2']:.6f} (n={p['n']})")
    lines.extend(f"flag: {f}" for f in rep.flags)
    return "\n".join(lines) + "\n"


def write_report(rep: EvalReport, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "summary.txt"), summary_text(rep))
    rows = []
    for name, v in rep.variants.items():
        for key in ("map", "precision_at_r", "precision_at_r_raw", "tpr_at_fpr01", "jaccard_detected",
                    "jaccard_all", "n_detected"):
            val = getattr(v, key)
            rows.append((name, key, "" if val is None else val))
    for k, v in sorted(rep.nip_perturbation.items()):
        rows.append(("quantized", f"nip_{k}", v))
    _atomic_write(os.path.join(out_dir, "metrics.csv"), _csv(rows, ("variant", "metric", "value")))
    _atomic_write(os.path.join(out_dir, "bitrate.csv"),
                  _csv([(k, v, len(rep.budget_violations.get(k, []))) for k, v in sorted(rep.bitrate_kbps.items())],
                       ("video_id", "kbps", "violations")))
    _atomic_write(os.path.join(out_dir, "failed.txt"),
                  "".join(f"{k}\t{v}\n" for k, v in sorted(rep.failed.items())))
    for name, v in rep.variants.items():
        _atomic_write(os.path.join(out_dir, f"roc_{name}.csv"), _csv(v.roc, ("fpr", "tpr")))
        _atomic_write(os.path.join(out_dir, f"pr_{name}.csv"), _csv(v.pr, ("recall", "precision")))
        _atomic_write(os.path.join(out_dir, f"pairs_{name}.csv"),
                      _csv(v.pairs, ("query", "ref", "type", "score", "matched", "jaccard", "intervals")))
        _atomic_write(os.path.join(out_dir, f"queries_{name}.csv"),
                      _csv([(q,) + v.per_query[q] for q in sorted(v.per_query)], ("query", "ap", "top1", "top1_score")))
    _atomic_write(os.path.join(out_dir, "timing.txt"),
                  "".join(f"{k}\t{v:.6f}\n" for k, v in sorted(rep.timing.items())))
