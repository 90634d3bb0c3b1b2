"""Train the shipped default models (tau table, GMM, NIP whitening) on synthetic scenes.

Training scenes use seeds 1..n_scenes, disjoint from every planted-corpus
seed (those start at 10000), so evaluation never sees training content.

    python3 scripts/train_default_models.py [--scenes 160] [--out src/cdva/data]
"""
import argparse
import os
import sys
import time

import numpy as np

from cdva import local, nip, scfv, synth
from cdva.media import Frame
from cdva.training import raw_local_descriptors, raw_nip


def training_frames(n_scenes, views=2, seed=7):
    rng = np.random.default_rng(seed)
    frames = []
    for s in range(1, n_scenes + 1):
        canvas = synth.scene_canvas(s)
        for v in range(views):
            cam = synth.random_camera(rng)
            img = synth.render_view(canvas, cam[0], cam[1], cam[2], cam[3], synth.FRAME_W, synth.FRAME_H)
            if v % 2:
                kind = synth.MODIFICATIONS[int(rng.integers(len(synth.MODIFICATIONS)))]
                img = synth.apply_modification(img, kind, rng, rng)
            frames.append(Frame(len(frames), 0.0, np.clip(np.rint(img), 0, 255)))
        synth.scene_canvas.cache_clear()
    return frames


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=160)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "src", "cdva", "data"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.time()
    frames = training_frames(args.scenes)
    print(f"{len(frames)} training frames ({time.time() - t0:.1f}s)", file=sys.stderr)
    X = raw_local_descriptors(frames, n_max=300)
    print(f"{len(X)} local descriptors ({time.time() - t0:.1f}s)", file=sys.stderr)
    tau = local.train_tau(X)
    local.write_tau(os.path.join(args.out, "tau_default.bin"), tau)
    gmm = scfv.train_gmm(X, K=128, dim=32, seed=args.seed)
    scfv.write_gmm(os.path.join(args.out, "gmm_default.bin"), gmm)
    print(f"GMM trained ({time.time() - t0:.1f}s)", file=sys.stderr)
    N = raw_nip(frames)
    white = nip.train_whitening(N)
    nip.write_whitening(os.path.join(args.out, "whitening_default.bin"), white)
    print(f"whitening trained on {len(N)} frames ({time.time() - t0:.1f}s)", file=sys.stderr)


if __name__ == "__main__":
    main()
