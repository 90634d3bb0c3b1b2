"""Write a synthetic VGG-shaped weight bundle (CDVAWTS1).

Thirteen conv layers and three prunable fully connected layers (fc6, fc7,
fc8) with He-scaled Gaussian weights, scaled to the requested size.

    python3 scripts/make_bundle.py OUT.wts [--params 100000000] [--seed 0]
"""
import argparse

from cdva.compression import vgg_like_bundle, write_bundle


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--params", type=int, default=100_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    b = vgg_like_bundle(args.params, args.seed)
    write_bundle(args.out, b)
    print(f"{args.out}: {b.n_params} parameters, prunable {', '.join(sorted(b.prunable))}")


if __name__ == "__main__":
    main()
