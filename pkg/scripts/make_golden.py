"""Regenerate src/cdva/data/golden.json (golden bitstreams for ``cdva selftest``).

Only rerun after a deliberate bitstream format change; the vectors exist to
catch accidental ones.

    python3 scripts/make_golden.py
"""
import json
import os

from cdva.codec.rangecoder import encode_decisions
from cdva.codec.stream import CodecConfig, OperatingPoint, decode_video, encode_video
from cdva.selftest import GOLDEN, content_digest, golden_cases, range_coder_vector


def main():
    streams = []
    for name, op, nm, video in golden_cases():
        bits = encode_video(video, OperatingPoint.from_label(op), CodecConfig(nip_mode=nm)).bits
        streams.append({"name": name, "op": op, "nip_mode": nm, "hex": bits.hex(),
                        "content_sha256": content_digest(decode_video(bits))})
    b, c = range_coder_vector()
    out = {"streams": streams, "range_coder_hex": encode_decisions(b, c, 3).hex()}
    tmp = GOLDEN + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(out, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, GOLDEN)
    for s in streams:
        print(s["name"], s["op"], len(s["hex"]) // 2, "bytes")


if __name__ == "__main__":
    main()
