"""Independent reference implementations used by the unit and acceptance tests."""
import numpy as np

from cdva.codec.locations import coded_order


# ---------------------------------------------------------------- codec

def expected_locals(unit, n, width, height, b):
    """The rows an encoder keeps for ``n`` keypoints, in coded order."""
    loc = unit.local
    rel = np.zeros(len(loc)) if loc.relevance is None else np.asarray(loc.relevance)
    rows = np.argsort(-rel, kind="stable")[:n]
    sub = loc.take(rows)
    return sub.take(coded_order(sub.xy, width, height, b))


def check_roundtrip(video, enc, dec, op, block=3, delta=8):
    """Compare a decoded stream with its source descriptor and the encoder's reconstruction.

    Returns a list of problems (empty when the round trip is faithful).
    """
    bad = []
    kept = [u for u in video.units if u.frame_index not in set(enc.dropped)]
    if [u.frame_index for u in dec.units] != [u.frame_index for u in kept]:
        return [f"unit list differs: {[u.frame_index for u in dec.units]} vs {[u.frame_index for u in kept]}"]
    for f in ("video_id", "fps", "frame_count", "width", "height"):
        if getattr(dec, f) != getattr(video, f):
            bad.append(f"header field {f}")
    for x, d, r in zip(kept, dec.units, enc.recon.units):
        tag = f"frame {x.frame_index}"
        if (d.kind, d.shot_id) != (x.kind, x.shot_id):
            bad.append(f"{tag}: kind/shot")
        n_kept, m_kept = enc.trimmed.get(x.frame_index, (min(len(x.local), op.n_max), len(x.scfv.selected)))
        if m_kept == len(x.scfv.selected):
            if not d.scfv.same_content(x.scfv):
                bad.append(f"{tag}: scfv")
        else:
            dm, _ = d.scfv.dense_bits()
            xm, _ = x.scfv.dense_bits()
            if d.scfv.mask.sum() != m_kept or np.any(d.scfv.mask & ~x.scfv.mask) \
                    or not np.array_equal(dm[d.scfv.mask], xm[d.scfv.mask]):
                bad.append(f"{tag}: trimmed scfv")
        if x.nip is not None and d.nip is not None:
            if x.nip.bits is not None or d.nip.bits is not None:
                xb = x.nip.bits if x.nip.bits is not None else (x.nip.values > 0).astype(np.uint8)
                if d.nip.bits is None or not np.array_equal(d.nip.bits, xb):
                    bad.append(f"{tag}: nip bits")
            elif not np.array_equal(d.nip.values, x.nip.values.astype(np.float32).astype(np.float64)):
                bad.append(f"{tag}: nip values")
            if d.nip.degenerate != x.nip.degenerate:
                bad.append(f"{tag}: nip flag")
        exp = expected_locals(x, n_kept, video.width, video.height, block)
        if len(d.local) != len(exp):
            bad.append(f"{tag}: {len(d.local)} keypoints, expected {len(exp)}")
            continue
        if len(exp) and np.max(np.abs(d.local.xy - exp.xy)) > block / 2 + 1e-9:
            bad.append(f"{tag}: location error above b/2")
        if d.kind == "I" or d.prediction is None:
            if not np.array_equal(d.local.symbols, exp.symbols):
                bad.append(f"{tag}: symbols")
        else:
            intra = d.prediction < 0
            if not np.array_equal(d.local.symbols[intra], exp.symbols[intra]):
                bad.append(f"{tag}: intra symbols")
            err = np.abs(d.local.symbols[~intra].astype(int) - exp.symbols[~intra]).sum(axis=1)
            if len(err) and err.max() > delta:
                bad.append(f"{tag}: predicted rows beyond delta")
        # closed loop: the decoder holds exactly what the encoder referenced
        if not (np.array_equal(d.local.symbols, r.local.symbols) and np.array_equal(d.local.xy, r.local.xy)
                and d.scfv.same_content(r.scfv)):
            bad.append(f"{tag}: decoder state differs from encoder reconstruction")
    return bad


def empirical_entropy_bits(bits, ctxs):
    """Sum over contexts of n_c * H(p_c); bypass decisions (ctx < 0) cost one bit each."""
    bits = np.asarray(bits)
    ctxs = np.asarray(ctxs)
    total = float(np.count_nonzero(ctxs < 0))
    for c in np.unique(ctxs[ctxs >= 0]):
        b = bits[ctxs == c]
        p = b.mean()
        if 0 < p < 1:
            total += len(b) * -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    return total


# ---------------------------------------------------------------- metrics

def jaccard_discrete(pred, truth, res=1e-3):
    """Jaccard of interval unions rasterised at ``res`` seconds."""
    ivs = list(pred) + list(truth)
    if not ivs:
        return 0.0
    hi = max(e for _, e in ivs)
    n = int(round(hi / res)) + 1
    t = (np.arange(n) + 0.5) * res

    def raster(s):
        m = np.zeros(n, bool)
        for a, b in s:
            m |= (t >= a) & (t < b)
        return m

    p, q = raster(pred), raster(truth)
    u = (p | q).sum()
    return float((p & q).sum() / u) if u else 0.0


def jaccard_exact(pred, truth):
    """Exact interval arithmetic by sweeping the sorted endpoints."""
    pts = sorted({x for iv in list(pred) + list(truth) for x in iv})
    inter = union = 0.0
    for a, b in zip(pts, pts[1:]):
        m = 0.5 * (a + b)
        inp = any(s <= m < e for s, e in pred)
        int_ = any(s <= m < e for s, e in truth)
        if inp and int_:
            inter += b - a
        if inp or int_:
            union += b - a
    return inter / union if union else 0.0


def average_precision(ranking, relevant):
    hits, total = 0, 0.0
    for i, v in enumerate(ranking, 1):
        if v in relevant:
            hits += 1
            total += hits / i
    return total / len(relevant)


def precision_at_r(ranking, relevant, R):
    return sum(1 for v in ranking[:R] if v in relevant) / R


def roc_points(pos, neg):
    """(fpr, tpr) for every threshold, 'score >= thr' counted as a match, from (0, 0) upward."""
    pts = [(0.0, 0.0)]
    for thr in sorted(set(pos) | set(neg), reverse=True):
        tpr = sum(s >= thr for s in pos) / len(pos)
        fpr = sum(s >= thr for s in neg) / len(neg)
        pts.append((fpr, tpr))
    return pts


def tpr_at(pts, target):
    """Linear interpolation at ``target`` FPR; the highest TPR if the point is hit exactly."""
    best = None
    for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
        if f0 <= target <= f1:
            if f1 == f0:
                v = max(t0, t1)
            else:
                v = t0 + (t1 - t0) * (target - f0) / (f1 - f0)
            best = v if best is None else max(best, v)
    return best
