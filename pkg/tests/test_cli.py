import json
import subprocess

import numpy as np
import pytest

from cdva.synth import random_camera, video_spec


def run(*args, cwd=None):
    return subprocess.run(["cdva", *map(str, args)], capture_output=True, text=True, cwd=cwd)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(2)
    shots = [{"scene": 31, "dur": 2.0, "cam": random_camera(rng)}, {"scene": 4242, "dur": 2.0, "cam": random_camera(rng)}]
    spec = video_spec(shots, 5.0)
    rec = {"video_id": "clip", "source": "synth:" + json.dumps(spec, sort_keys=True), "fps": 5.0}
    p = d / "clip.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    return d, p


def test_usage_errors():
    r = run("frobnicate")
    assert r.returncode == 2 and "usage" in r.stderr
    assert run().returncode == 2
    assert run("decode").returncode == 2


def test_selftest():
    r = run("selftest")
    assert r.returncode == 0 and "selftest OK" in r.stdout


def test_encode_decode(manifest):
    d, m = manifest
    out = d / "out.bits"
    r = run("encode", "--op", 16, m, out)
    assert r.returncode == 0, r.stderr
    r = run("decode", out)
    assert r.returncode == 0 and r.stdout.startswith("OK")
    r = run("decode", out, "--format", "csv")
    assert r.stdout.splitlines()[1].startswith("OK,clip,16")
    bad = d / "bad.bits"
    bad.write_bytes(out.read_bytes()[:-3])
    assert run("decode", bad).returncode == 5
    assert run("decode", d / "missing.bits").returncode == 3


def test_match_and_retrieve(manifest):
    d, m = manifest
    out = d / "m.bits"
    assert run("encode", m, out).returncode == 0
    r = run("match", out, out, "--format", "csv")
    row = r.stdout.splitlines()[1].split(",")
    assert row[:2] == ["clip", "clip"] and float(row[2]) > 0.9 and row[3] == "1"
    idx = d / "db.idx"
    assert run("build-index", idx, out).returncode == 0
    r = run("retrieve", idx, out, "--format", "csv")
    assert r.stdout.splitlines()[1].startswith("clip,1,clip,")


def test_sample_dump(manifest):
    d, m = manifest
    dump = d / "structure.json"
    r = run("sample", m, "--dump-structure", dump, "--format", "csv")
    assert r.returncode == 0, r.stderr
    rows = r.stdout.splitlines()[1:]
    st = json.loads(dump.read_text())["clip"]
    assert len(rows) >= 2 and {row.split(",")[4] for row in rows} == {"0", "1"}
    assert st and json.dumps(st)  # JSON-serialisable full structure


def test_config_flags(manifest, tmp_path):
    d, m = manifest
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps({"op": 128}))
    assert run("sample", m, "--config", cfgp).returncode == 6
    assert run("sample", m, "--set", "analysis.w_nip=2").returncode == 6
    assert run("sample", m, "--set", "nokeyvalue").returncode == 2


def test_compress_model(tmp_path, rng):
    from cdva.compression import WeightBundle, write_bundle

    b = WeightBundle({"conv": rng.standard_normal((64, 64, 3, 3)), "fc": rng.standard_normal((512, 512))}, {"fc"})
    src, dst = tmp_path / "m.wts", tmp_path / "m.qwts"
    write_bundle(str(src), b)
    r = run("compress-model", src, dst, "--k", 256, "--prune", "fc", "--format", "csv")
    assert r.returncode == 0, r.stderr
    vals = dict(line.split(",", 1) for line in r.stdout.splitlines()[1:])
    assert float(vals["ratio"]) > 3.5 and dst.exists()
    assert run("compress-model", src, dst, "--prune", "conv").returncode != 0
