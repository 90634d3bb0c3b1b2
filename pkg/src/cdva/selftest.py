"""Golden-vector checks run by ``cdva selftest``.

``data/golden.json`` holds bitstreams (hex) with the SHA-256 of their decoded
content. Each must decode to that content and re-encode to the same bytes,
so codec interoperability regressions surface without any corpus. The range
coder is also checked against a fixed decision sequence.
"""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "golden.json")


def content_digest(video) -> str:
    """SHA-256 over every decoded field in a fixed order."""
    h = hashlib.sha256()
    h.update(json.dumps([video.video_id, video.fps, video.frame_count, video.width, video.height]).encode())
    for u in video.units:
        h.update(json.dumps([u.frame_index, u.kind, u.shot_id, bool(u.scfv.empty)]).encode())
        h.update(np.ascontiguousarray(u.local.xy, "<f8").tobytes())
        h.update(np.ascontiguousarray(u.local.symbols, np.int8).tobytes())
        h.update(np.packbits(u.scfv.mask).tobytes())
        h.update(np.ascontiguousarray(u.scfv.mean_bits, np.uint8).tobytes())
        if u.scfv.var_mask is not None:
            h.update(np.packbits(u.scfv.var_mask).tobytes())
            h.update(np.ascontiguousarray(u.scfv.var_bits, np.uint8).tobytes())
        if u.nip is not None:
            if u.nip.bits is not None:
                h.update(np.ascontiguousarray(u.nip.bits, np.uint8).tobytes())
            if u.nip.values is not None:
                h.update(np.ascontiguousarray(u.nip.values, "<f4").tobytes())
        if u.prediction is not None:
            h.update(np.ascontiguousarray(u.prediction, "<i8").tobytes())
    return h.hexdigest()


def range_coder_vector():
    """Fixed decision list: contexts cycle over 3 adaptive states and one bypass."""
    rng = np.random.default_rng(12345)
    bits = (rng.random(400) < 0.2).astype(np.int64)
    ctx = np.arange(400) % 4 - 1  # -1 = bypass
    return bits, ctx


def golden_cases():
    """(name, op, nip_mode, descriptor) for the shipped vectors."""
    from . import synth
    from .codec import globals as G

    out = []
    for n, (op, nm) in enumerate(((16, G.NIP_BITS), (64, G.NIP_BITS), (256, G.NIP_FLOAT), (64, G.NIP_NONE))):
        rng = np.random.default_rng(900 + n)
        v = synth.random_video_descriptor(rng, n_units=3, w=128, h=96, n_max=24, nip_float=nm == G.NIP_FLOAT)
        v.video_id = f"golden{n}"
        out.append((f"golden{n}", op, nm, v))
    return out


def run_selftest(path: str = GOLDEN):
    from .codec.rangecoder import encode_decisions
    from .codec.stream import CodecConfig, OperatingPoint, decode_video, encode_video

    lines, ok = [], True
    with open(path) as fh:
        gold = json.load(fh)
    for case in gold["streams"]:
        bits = bytes.fromhex(case["hex"])
        try:
            video = decode_video(bits)
            dig = content_digest(video)
            re = encode_video(video, OperatingPoint.from_label(case["op"]),
                              CodecConfig(nip_mode=case["nip_mode"])).bits
            good = dig == case["content_sha256"] and re == bits
            lines.append(f"{case['name']}: decode {'ok' if dig == case['content_sha256'] else 'MISMATCH'}, "
                         f"re-encode {'ok' if re == bits else 'MISMATCH'} ({len(bits)} bytes)")
        except Exception as exc:  # report every failure, keep checking the rest
            good = False
            lines.append(f"{case['name']}: {type(exc).__name__}: {exc}")
        ok &= good
    bits, ctx = range_coder_vector()
    rc = encode_decisions(bits, ctx, 3).hex()
    good = rc == gold["range_coder_hex"]
    lines.append(f"range coder: {'ok' if good else 'MISMATCH'}")
    return ok and good, lines
