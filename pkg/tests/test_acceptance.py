"""The eleven acceptance criteria at their stated tolerances.

Corpus experiments go through the ``cdva`` command line; each criterion
prints one PASS/FAIL line (collected in the terminal summary as well).
"""
import csv
import filecmp
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from cdva.codec import globals as G
from cdva.codec.stream import CodecConfig, OperatingPoint, audit, decode_video, encode_video, unit_sizes
from cdva.nip import extract_nip
from cdva.selftest import GOLDEN, golden_cases
from cdva.synth import correlated_sequence, random_video_descriptor
from cdva import evalkit

import oracles
from conftest import ACCEPTANCE, SCRIPTS
from test_nip import smooth_rgb
from test_scfv import analytic_mean_gradient, fd_mean_gradient, random_gmm

VARIANTS = "fused,scfv,nip,nip_float,nip_bits,quantized"


def record(n, ok, detail):
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def cdva(*args, **kw):
    r = subprocess.run(["cdva", *map(str, args)], capture_output=True, text=True, **kw)
    assert r.returncode == 0, f"cdva {args[0]} exited {r.returncode}: {r.stderr[-2000:]}"
    return r


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    subprocess.run([sys.executable, os.path.join(SCRIPTS, "make_corpus.py"), str(d)], check=True,
                   capture_output=True)
    return d


def _evaluate(corpus, out):
    t = time.perf_counter()
    r = cdva("evaluate", "--db", corpus / "database.jsonl", "--queries", corpus / "queries.jsonl",
             "--gt", corpus / "groundtruth.jsonl", "--out", out, "--variants", VARIANTS)
    return r.stdout, time.perf_counter() - t


@pytest.fixture(scope="module")
def run_a(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval") / "a"
    stdout, secs = _evaluate(corpus, out)
    return out, stdout, secs


def metrics(out):
    with open(out / "metrics.csv") as fh:
        return {(r["variant"], r["metric"]): (float(r["value"]) if r["value"] not in ("",) else None)
                for r in csv.DictReader(fh)}


def timing(out):
    with open(out / "timing.txt") as fh:
        return {k: float(v) for k, v in (ln.split("\t") for ln in fh if ln.strip())}


# ---------------------------------------------------------------- 1

def test_c01_codec_round_trip():
    t = time.perf_counter()
    problems = []
    rng = np.random.default_rng(20260101)
    for i in range(200):
        label = (16, 64, 256)[i % 3]
        op = OperatingPoint.from_label(label)
        v = random_video_descriptor(rng, nip_float=bool(rng.random() < 0.3))
        mode = G.NIP_FLOAT if v.units[0].nip.values is not None else G.NIP_BITS
        enc = encode_video(v, op, CodecConfig(nip_mode=mode))
        problems += [f"#{i} op{label}: {p}" for p in oracles.check_roundtrip(v, enc, decode_video(enc.bits), op)]
    with open(GOLDEN) as fh:
        gold = {s["name"]: s["hex"] for s in json.load(fh)["streams"]}
    fresh = {name: encode_video(v, OperatingPoint.from_label(op), CodecConfig(nip_mode=nm)).bits.hex()
             for name, op, nm, v in golden_cases()}
    golden_ok = fresh == gold and all("selftest OK" in cdva("selftest").stdout for _ in range(2))
    secs = time.perf_counter() - t
    record(1, not problems and golden_ok and secs < 120,
           f"200 descriptors, {len(problems)} round-trip problems; golden vectors "
           f"{'identical' if golden_ok else 'DIFFER'}; {secs:.1f}s (< 120s)")


# ---------------------------------------------------------------- 2

def test_c02_budget_compliance(run_a):
    out, stdout, _ = run_a
    op = OperatingPoint.from_label(64)
    bad, n = {}, 0
    for f in sorted(os.listdir(out / "bits")):
        bits = (out / "bits" / f).read_bytes()
        v = audit(bits, op.budget_bytes, slack=0.0)[1]
        n += 1
        if v:
            bad[f] = v
    # the same audit on correlated 30 s sequences at every operating point
    rng = np.random.default_rng(2)
    for label in (16, 64, 256):
        o = OperatingPoint.from_label(label)
        for k in range(5):
            enc = encode_video(correlated_sequence(rng, n_units=150, n_desc=300, stride=1, i_every=4), o)
            v = audit(enc.bits, o.budget_bytes, slack=0.0)[1]
            n += 1
            if v:
                bad[f"corr{label}_{k}"] = v
    reported = "budget violations: 0" in stdout
    record(2, not bad and reported, f"{n} streams audited in 1 s sliding windows with no slack, "
                                    f"{sum(map(len, bad.values()))} violations (evaluate report agrees: {reported})")


# ---------------------------------------------------------------- 3

def test_c03_inter_prediction_gain():
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    i_sz, p_sz = [], []
    for label in (16, 64, 256):
        op = OperatingPoint.from_label(label)
        for _ in range(4):
            v = correlated_sequence(rng, n_units=24, n_desc=200, share=0.85)
            enc = encode_video(v, op)
            kinds = [u.kind for u in decode_video(enc.bits).units]
            for (_, s), k in zip(unit_sizes(enc.bits)[1:], kinds):
                (i_sz if k == "I" else p_sz).append(s)
    ratio = np.mean(p_sz) / np.mean(i_sz)
    secs = time.perf_counter() - t
    record(3, ratio < 0.5 and secs < 60,
           f"mean P-unit / I-unit size = {ratio:.3f} (< 0.5) over {len(p_sz)} P and {len(i_sz)} I units; {secs:.1f}s")


# ---------------------------------------------------------------- 4

def test_c04_metric_oracles():
    rng = np.random.default_rng(4)
    fails = []
    for i in range(100):
        ivs = lambda: [(a, a + b) for a, b in zip(rng.integers(0, 40, rng.integers(0, 5)) / 2.0,
                                                  rng.integers(0, 20, 5) / 4.0)]
        a, b = ivs(), ivs()
        if evalkit.jaccard(a, b) != pytest.approx(oracles.jaccard_exact(a, b), abs=1e-12):
            fails.append(f"jaccard #{i}")
        n = int(rng.integers(1, 30))
        items = [f"v{j}" for j in range(n)]
        ranking = list(rng.permutation(items)[:int(rng.integers(0, n + 1))])
        rel = set(rng.choice(items, int(rng.integers(1, min(n, 8) + 1)), replace=False))
        R = int(rng.integers(1, 12))
        if evalkit.average_precision(ranking, rel) != oracles.average_precision(ranking, rel):
            fails.append(f"ap #{i}")
        if evalkit.precision_at_r({"q": ranking}, {"q": rel}, R, normalized=False) != \
                oracles.precision_at_r(ranking, rel, R):
            fails.append(f"p@r #{i}")
        pos = list(rng.integers(0, 10, rng.integers(1, 12)) / 10)
        neg = list(rng.integers(0, 10, rng.integers(1, 12)) / 10)
        roc, tpr = evalkit.roc_and_tpr(pos, neg)
        want = oracles.roc_points(pos, neg)
        if roc != want or tpr != oracles.tpr_at(want, 0.01):
            fails.append(f"roc #{i}")
    j = evalkit.jaccard([0, 10], [5, 15])
    record(4, not fails and abs(j - 0.3333) <= 1e-3,
           f"100 random instances per metric, {len(fails)} mismatches; Jaccard([0,10],[5,15]) = {j:.4f}")


# ---------------------------------------------------------------- 5, 6, 8, 9 (corpus)

def test_c05_planted_corpus(run_a):
    out, _, secs = run_a
    m = metrics(out)
    mp, tpr, jac = m[("fused", "map")], m[("fused", "tpr_at_fpr01")], m[("fused", "jaccard_detected")]
    record(5, mp >= 0.90 and tpr >= 0.90 and jac >= 0.60 and secs < 1200,
           f"64 KBps, 30 queries / 500 distractors: mAP {mp:.4f} (>= 0.90), TPR@FPR=0.01 {tpr:.4f} (>= 0.90), "
           f"Jaccard {jac:.4f} (>= 0.60); evaluate of all six variants took {secs / 60:.1f} min (< 20)")


def test_c06_fusion(run_a):
    m = metrics(run_a[0])
    f, s, n = m[("fused", "map")], m[("scfv", "map")], m[("nip", "map")]
    record(6, f >= s and f >= n - 0.01, f"mAP fused {f:.4f} >= SCFV-only {s:.4f}, >= NIP-only {n:.4f} - 0.01")


def test_c08_binarized_nip(run_a):
    m, t = metrics(run_a[0]), timing(run_a[0])
    fl, bi = m[("nip_float", "map")], m[("nip_bits", "map")]
    tf, tb = t["nip_scan_float_s"], t["nip_scan_bits_s"]
    record(8, abs(fl - bi) <= 0.10 and tb <= 0.5 * tf,
           f"mAP binarized {bi:.4f} vs float {fl:.4f} (within 0.10); global scan {tb * 1e3:.3f} ms vs "
           f"{tf * 1e3:.3f} ms = {tb / tf:.2f}x (<= 0.5x)")


def test_c09_model_compression(run_a, tmp_path):
    src, dst = tmp_path / "vgg.wts", tmp_path / "vgg.qwts"
    subprocess.run([sys.executable, os.path.join(SCRIPTS, "make_bundle.py"), str(src)], check=True,
                   capture_output=True)
    r = cdva("compress-model", src, dst, "--k", 256, "--prune", "fc6,fc7,fc8", "--format", "csv")
    vals = {k: float(v) for k, v in (ln.split(",", 1) for ln in r.stdout.splitlines()[1:])}
    ratio = vals["ratio"]
    params = vals["params_before"]
    worst_rel = max(v for k, v in vals.items() if k.startswith("rel_mse:"))
    src.unlink()
    m = metrics(run_a[0])
    pooled = m[("quantized", "nip_pooled_max_l2")]
    whitened = m[("quantized", "nip_whitened_max_l2")]
    dmap = abs(m[("quantized", "map")] - m[("fused", "map")])
    record(9, ratio >= 30 and pooled < 0.02 and dmap < 0.02,
           f"{params / 1e6:.1f} M params pruned (fc6-8) + k=256 Lloyd-Max + Huffman: ratio {ratio:.2f}x (>= 30), "
           f"worst layer MSE/variance {worst_rel:.1e}; quantized toy backbone: NIP L2 change max {pooled:.4f} "
           f"(< 0.02; {whitened:.4f} after whitening), mAP change {dmap:.4f} (< 0.02)")


# ---------------------------------------------------------------- 7, 10

def test_c07_nip_rotation_invariance():
    worst4, ratios, d1s = 0.0, [], []
    for seed in range(50):
        x = smooth_rgb(1000 + seed, 96, 128)
        xr = np.rot90(x, 1, axes=(1, 2)).copy()
        d4 = np.linalg.norm(extract_nip(x, 4).values - extract_nip(xr, 4).values)
        d1 = np.linalg.norm(extract_nip(x, 1).values - extract_nip(xr, 1).values)
        worst4 = max(worst4, d4)
        ratios.append(d1 / max(d4, 1e-300))
        d1s.append(d1)
    record(7, worst4 < 1e-4 and min(ratios) >= 10,
           f"50 frames: max L2(NIP(x), NIP(rot90 x)) with R=4 = {worst4:.2e} (< 1e-4); with R=1 the smallest "
           f"distance is {min(d1s):.2e} (>= 10x the R=4 one on every frame)")


def test_c10_fv_gradient_check():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        gmm = random_gmm(rng, K=int(rng.integers(1, 5)), dim=int(rng.integers(1, 6)))
        Y = rng.normal(size=(int(rng.integers(1, 12)), gmm.dim)) * 1.5
        for k in range(gmm.K):
            a, f = analytic_mean_gradient(gmm, Y, k), fd_mean_gradient(gmm, Y, k)
            worst = max(worst, np.linalg.norm(a - f) / max(np.linalg.norm(f), 1e-3))
    record(10, worst < 1e-4, f"50 random GMM instances: max relative error {worst:.2e} (< 1e-4)")


# ---------------------------------------------------------------- 11

def test_c11_determinism(run_a, corpus):
    out_a, stdout_a, _ = run_a
    out_b = out_a.parent / "b"
    stdout_b, _ = _evaluate(corpus, out_b)
    cmp = filecmp.dircmp(out_a, out_b)
    # timing.txt holds wall-clock seconds only; every report and bitstream must match
    files = sorted(set(os.listdir(out_a)) - {"bits", "timing.txt"})
    same_reports = set(os.listdir(out_a)) == set(os.listdir(out_b)) and \
        all(filecmp.cmp(out_a / f, out_b / f, shallow=False) for f in files)
    bits = sorted(os.listdir(out_a / "bits"))
    same_bits = bits == sorted(os.listdir(out_b / "bits")) and \
        all(filecmp.cmp(out_a / "bits" / f, out_b / "bits" / f, shallow=False) for f in bits)
    record(11, same_reports and same_bits and stdout_a == stdout_b and not cmp.funny_files,
           f"two full evaluate runs, seed 0: {len(files)} report files "
           f"{'identical' if same_reports else 'DIFFER'}, {len(bits)} bitstreams "
           f"{'identical' if same_bits else 'DIFFER'}")
