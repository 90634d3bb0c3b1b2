"""``cdva`` command line.

Every verb reads its inputs from declared paths, writes outputs atomically
(temp file + rename), prints progress to stderr and reports to stdout (or
``-o``). Exit codes: 0 success, 1 internal error, 2 usage, 3 media, 4 model,
5 codec, 6 config, 7 analysis.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
import warnings

from . import __version__
from .errors import CdvaError, InvalidConfig, UsageError

VERBS = ("sample", "extract", "encode", "decode", "match", "retrieve", "build-index", "evaluate",
         "train-gmm", "train-pca", "train-tau", "compress-model", "selftest")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def _atomic(path, data):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb" if isinstance(data, (bytes, bytearray)) else "w") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _emit(args, rows, header, text=None):
    """Report as CSV or aligned text, to ``-o`` if given else stdout."""
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in r])
        out = buf.getvalue()
    else:
        out = text if text is not None else "".join(
            "  ".join(f"{h}={f'{x:.4f}' if isinstance(x, float) else x}" for h, x in zip(header, r)) + "\n"
            for r in rows)
    if getattr(args, "output", None):
        _atomic(args.output, out)
    else:
        sys.stdout.write(out)


def _parse_value(v):
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v


def _config(args):
    from .config import check_models, load_config

    cfg = load_config(args.config)
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = _parse_value(v)
    for key in ("op", "seed", "threads"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if over:
        cfg = cfg.with_overrides(**over)
        check_models(cfg)
    return cfg


def _manifest(path):
    """Records of a manifest file (one JSON object per line)."""
    from .media import read_manifests

    ms = read_manifests(path)
    if not ms:
        raise InvalidConfig(f"{path}: manifest is empty")
    return ms


def _read_bits(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        from .errors import MissingFrame

        raise MissingFrame(f"cannot read {path}: {exc}") from None


def _op_and_codec(cfg):
    from .codec import globals as G
    from .codec.stream import CodecConfig, OperatingPoint

    op = OperatingPoint.from_label(cfg.op, cfg.keyframe_cap, cfg.n_max)
    nm = G.NIP_BITS if cfg.nip.binarize else G.NIP_FLOAT
    return op, CodecConfig(cfg.codec.block, cfg.codec.n_ref, cfg.codec.delta, nm)


def _is_descriptor_file(path):
    with open(path, "rb") as fh:
        return fh.read(4) == b"PK\x03\x04"


def _frames_from(manifests, every):
    from .media import load_frames

    out = []
    for m in manifests:
        fr = load_frames(m)
        out.extend(fr[::every])
        _progress(f"  {m.video_id}: {len(fr[::every])} training frames")
    return out


# ---------------------------------------------------------------- verbs

def cmd_sample(args):
    from .config import load_models
    from .extract import FrameExtractor, sample_structure
    from .media import load_frames

    cfg = _config(args)
    fx = FrameExtractor(cfg, load_models(cfg))
    rows, dump = [], {}
    for m in _manifest(args.manifest):
        st = sample_structure(load_frames(m), m.fps, cfg, fx, rate_cap=not args.no_rate_cap)
        dump[m.video_id] = st.to_record()
        for k in st.keyframes:
            rows.append((m.video_id, k.index, float(k.timestamp), k.kind, k.shot))
    if args.dump_structure:
        _atomic(args.dump_structure, json.dumps(dump, indent=1, sort_keys=True) + "\n")
    _emit(args, rows, ("video_id", "frame", "time", "kind", "shot"))
    return 0


def cmd_extract(args):
    from .config import load_models
    from .descriptors import save_video_descriptor
    from .extract import extract_manifest

    cfg = _config(args)
    ms = _manifest(args.manifest)
    if len(ms) > 1:
        raise UsageError("extract takes a single-video manifest")
    t = time.perf_counter()
    ex = extract_manifest(ms[0], cfg, load_models(cfg), rate_cap=not args.no_rate_cap)
    save_video_descriptor(args.out, ex.video)
    _progress(f"{ms[0].video_id}: {len(ex.video.units)} keyframes in {time.perf_counter() - t:.2f}s")
    rows = [(u.frame_index, float(u.timestamp), u.kind, u.shot_id, len(u.local), int(u.scfv.mask.sum()))
            for u in ex.video.units]
    _emit(args, rows, ("frame", "time", "kind", "shot", "keypoints", "components"))
    return 0


def _encode_descriptor(video, cfg):
    from .codec.stream import audit, encode_video

    op, codec = _op_and_codec(cfg)
    enc = encode_video(video, op, codec)
    peak, bad = audit(enc.bits, op.budget_bytes)
    return enc, peak, bad


def cmd_encode(args):
    from .config import load_models
    from .descriptors import load_video_descriptor
    from .evalkit import measure_bitrate
    from .extract import extract_manifest

    cfg = _config(args)
    if _is_descriptor_file(args.input):
        video = load_video_descriptor(args.input)
    else:
        ms = _manifest(args.input)
        if len(ms) > 1:
            raise UsageError("encode takes a single-video manifest")
        video = extract_manifest(ms[0], cfg, load_models(cfg)).video
    enc, peak, bad = _encode_descriptor(video, cfg)
    _atomic(args.out, enc.bits)
    rate = measure_bitrate(enc.bits, video.duration)
    rows = [(video.video_id, cfg.op, len(enc.bits), float(rate), len(enc.recon.units), len(enc.dropped),
             len(enc.trimmed), peak, len(bad))]
    _emit(args, rows, ("video_id", "op", "bytes", "kbps", "units", "dropped", "trimmed", "peak_window_bytes",
                       "violations"))
    return 0


def cmd_decode(args):
    from .codec.stream import audit, decode_video, read_header
    from .descriptors import save_video_descriptor
    from .evalkit import measure_bitrate

    bits = _read_bits(args.bits)
    hdr = read_header(bits)
    video = decode_video(bits)
    if args.descriptor:
        save_video_descriptor(args.descriptor, video)
    budget = hdr.op * 1000
    peak, bad = audit(bits, budget)
    status = "OK" if not bad else "BUDGET"
    rows = [(status, video.video_id, hdr.op, len(video.units), float(video.duration),
             float(measure_bitrate(bits, video.duration)), peak, len(bad))]
    _emit(args, rows, ("status", "video_id", "op", "units", "duration", "kbps", "peak_window_bytes", "violations"),
          None if args.format == "csv" else
          f"{status} {video.video_id}: {len(video.units)} units, {video.duration:.3f}s, "
          f"{measure_bitrate(bits, video.duration):.3f} KBps at op {hdr.op} (peak window {peak} B, "
          f"{len(bad)} violations)\n")
    return 0


def _nip_form(args):
    return getattr(args, "nip_form", None) or "auto"


def cmd_match(args):
    from .analysis import LocalCache, match_videos
    from .codec.stream import decode_video

    cfg = _config(args)
    q = decode_video(_read_bits(args.query))
    r = decode_video(_read_bits(args.ref))
    res = match_videos(q, r, cfg.analysis, cfg.codec.block, cfg.stage_seed("ransac"), _nip_form(args), LocalCache())
    fmt = lambda ivs: ";".join(f"{s:.3f}-{e:.3f}" for s, e in ivs)
    rows = [(q.video_id, r.video_id, float(res.video_score), int(res.matched), fmt(res.query_intervals),
             fmt(res.ref_intervals))]
    _emit(args, rows, ("query", "ref", "score", "matched", "query_intervals", "ref_intervals"))
    return 0


def cmd_build_index(args):
    from .analysis import write_index_pack
    from .codec.stream import decode_video
    from .errors import DuplicateVideoId

    paths = list(args.bits)
    if args.list:
        with open(args.list) as fh:
            paths += [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not paths:
        raise UsageError("build-index needs bitstreams (positional or --list)")
    streams = {}
    for p in paths:
        b = _read_bits(p)
        vid = decode_video(b).video_id  # validates the stream
        if vid in streams:
            raise DuplicateVideoId(f"video id {vid} appears twice ({p})")
        streams[vid] = b
    write_index_pack(args.out, streams)
    _progress(f"index of {len(streams)} videos written to {args.out}")
    return 0


def cmd_retrieve(args):
    from .analysis import LocalCache, build_index, read_index_pack, retrieve
    from .codec.stream import decode_video

    cfg = _config(args)
    db = [decode_video(b) for _, b in sorted(read_index_pack(args.index).items())]
    index = build_index(db, _nip_form(args))
    rows = []
    cache = LocalCache()
    for qp in args.query:
        q = decode_video(_read_bits(qp))
        ranked = retrieve(q, index, cfg.analysis, cfg.codec.block, cfg.stage_seed("ransac"), cache)
        for rank, (vid, s) in enumerate(ranked[:args.top], 1):
            rows.append((q.video_id, rank, vid, float(s)))
    _emit(args, rows, ("query", "rank", "video_id", "score"))
    return 0


def cmd_evaluate(args):
    from .evalkit import VARIANTS, run_experiment, summary_text

    cfg = _config(args)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {', '.join(bad)}; choose from {', '.join(VARIANTS)}")
    rep = run_experiment(args.db, args.queries, args.gt, cfg, args.out, variants, quiet=False,
                         reuse_bits=args.reuse_bits, quantize_k=args.quantize_k)
    if args.format == "csv":
        with open(os.path.join(args.out, "metrics.csv")) as fh:
            sys.stdout.write(fh.read())
    else:
        sys.stdout.write(summary_text(rep))
    return 0


def cmd_train_tau(args):
    from .local import train_tau, write_tau
    from .training import raw_local_descriptors

    cfg = _config(args)
    X = raw_local_descriptors(_frames_from(_manifest(args.manifest), args.every), cfg)
    write_tau(args.out, train_tau(X, args.percentile))
    _progress(f"tau table from {len(X)} descriptors written to {args.out}")
    return 0


def cmd_train_gmm(args):
    from .scfv import train_gmm, write_gmm
    from .training import raw_local_descriptors

    cfg = _config(args)
    X = raw_local_descriptors(_frames_from(_manifest(args.manifest), args.every), cfg)
    gmm = train_gmm(X, args.k, args.dim, cfg.stage_seed("gmm"))
    write_gmm(args.out, gmm)
    _progress(f"GMM K={args.k} dim={args.dim} from {len(X)} descriptors written to {args.out}")
    return 0


def cmd_train_pca(args):
    from .nip import train_whitening, write_whitening
    from .training import raw_nip

    cfg = _config(args)
    N = raw_nip(_frames_from(_manifest(args.manifest), args.every), cfg)
    write_whitening(args.out, train_whitening(N, args.dim, shrink=args.shrink))
    _progress(f"NIP whitening from {len(N)} frames written to {args.out}")
    return 0


def cmd_compress_model(args):
    from .compression import compress_bundle, compression_report, read_bundle, serialize_quantized

    cfg = _config(args)
    b = read_bundle(args.input)
    prune = [p.strip() for p in (args.prune or "").split(",") if p.strip()]
    t = time.perf_counter()
    qb = compress_bundle(b, args.k, prune, args.method, args.d, cfg.stage_seed("lloyd"))
    data = serialize_quantized(qb)
    _atomic(args.out, data)
    rep = compression_report(b, qb, len(data))
    _progress(f"compressed {b.n_params} parameters in {time.perf_counter() - t:.1f}s")
    rows = [("ratio", rep.ratio), ("pruning_ratio", rep.pruning_ratio),
            ("quantization_ratio", rep.quantization_ratio), ("original_bytes", rep.original_bytes),
            ("compressed_bytes", rep.compressed_bytes), ("params_before", rep.params_before),
            ("params_after", rep.params_after), ("max_abs_error", rep.max_abs_error)]
    rows += [(f"mse:{k}", v) for k, v in rep.layer_mse.items()]
    rows += [(f"rel_mse:{k}", v) for k, v in rep.layer_rel_mse.items()]
    _emit(args, rows, ("metric", "value"), None if args.format == "csv" else rep.text())
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    ok, lines = run_selftest()
    for ln in lines:
        print(ln)
    print("selftest OK" if ok else "selftest FAILED")
    return 0 if ok else 5


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults for every omitted field)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field by dotted name, e.g. analysis.w_nip=0.3 (repeatable)")
    common.add_argument("--op", type=int, help="operating point in KBps: 16, 64 or 256")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--threads", type=int, help="worker process cap")
    common.add_argument("--format", choices=("text", "csv"), default="text")
    common.add_argument("-o", "--output", help="write the report here instead of stdout")

    ap = _Parser(prog="cdva", description="Compact descriptors for video analysis")
    ap.add_argument("--version", action="version", version=f"cdva {__version__}")
    sub = ap.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)

    def verb(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    p = verb("sample", cmd_sample, "keyframes, P frames and shots of every video in a manifest")
    p.add_argument("manifest")
    p.add_argument("--no-rate-cap", action="store_true", help="list every scheduled keyframe")
    p.add_argument("--dump-structure", metavar="PATH", help="write the full temporal structure as JSON")
    p = verb("extract", cmd_extract, "extract descriptors of one video to a descriptor file")
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--no-rate-cap", action="store_true", help="extract every scheduled keyframe")
    p = verb("encode", cmd_encode, "encode a manifest or descriptor file into a bitstream")
    p.add_argument("input")
    p.add_argument("out")
    p = verb("decode", cmd_decode, "decode and audit a bitstream")
    p.add_argument("bits")
    p.add_argument("--descriptor", help="also write the decoded descriptors here")
    p = verb("match", cmd_match, "pairwise video match and temporal localization")
    p.add_argument("query")
    p.add_argument("ref")
    p.add_argument("--nip-form", choices=("auto", "float", "bits", "none"))
    p = verb("build-index", cmd_build_index, "pack database bitstreams into an index file")
    p.add_argument("out")
    p.add_argument("bits", nargs="*")
    p.add_argument("--list", help="file with one bitstream path per line")
    p = verb("retrieve", cmd_retrieve, "rank indexed videos for query bitstreams")
    p.add_argument("index")
    p.add_argument("query", nargs="+")
    p.add_argument("--top", type=int, default=100)
    p.add_argument("--nip-form", choices=("auto", "float", "bits", "none"))
    p = verb("evaluate", cmd_evaluate, "end-to-end experiment over a corpus")
    p.add_argument("--db", required=True, help="database manifest")
    p.add_argument("--queries", required=True, help="query manifest")
    p.add_argument("--gt", required=True, help="ground-truth file")
    p.add_argument("--out", required=True, help="output directory (bitstreams + reports)")
    p.add_argument("--variants", default="fused", help="comma list of: fused,scfv,nip,nip_float,nip_bits,quantized")
    p.add_argument("--reuse-bits", help="directory with bits/<id>.bits to decode instead of extracting")
    p.add_argument("--quantize-k", type=int, default=256, help="levels for the quantized-backbone variant")
    for name, fn, help_ in (("train-tau", cmd_train_tau, "train the ternary threshold table"),
                            ("train-gmm", cmd_train_gmm, "train the SCFV PCA + GMM"),
                            ("train-pca", cmd_train_pca, "train the NIP PCA whitening")):
        p = verb(name, fn, help_)
        p.add_argument("manifest")
        p.add_argument("out")
        p.add_argument("--every", type=int, default=5, help="use every n-th frame")
        if name == "train-tau":
            p.add_argument("--percentile", type=float, default=100.0 / 3.0)
        if name == "train-gmm":
            p.add_argument("--k", type=int, default=128)
            p.add_argument("--dim", type=int, default=32)
        if name == "train-pca":
            p.add_argument("--dim", type=int, default=None)
            p.add_argument("--shrink", type=float, default=1.0, help="eigenvalue shrinkage (0 = plain whitening)")
    p = verb("compress-model", cmd_compress_model, "compress a CDVAWTS1 weight bundle")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--prune", help="comma list of layers to drop")
    p.add_argument("--method", choices=("scalar", "vq"), default="scalar")
    p.add_argument("--d", type=int, default=4, help="VQ codeword dimension")
    verb("selftest", cmd_selftest, "check the embedded golden bitstream vectors")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if not getattr(args, "verb", None):
            ap.print_usage(sys.stderr)
            raise UsageError(f"missing verb; choose from {', '.join(VERBS)}")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return int(args.fn(args) or 0)
    except CdvaError as exc:
        print(f"cdva: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
