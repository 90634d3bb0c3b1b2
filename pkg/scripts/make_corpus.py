"""Write a planted synthetic corpus: database.jsonl, queries.jsonl, groundtruth.jsonl.

Each query re-films the middle shot of its reference with one modification
(overlay, frame rate, contrast, grain, monochrome, blur, screen capture).
Sources are ``synth:`` specs rendered on demand, so the files stay small.

    python3 scripts/make_corpus.py OUT_DIR [--queries 30] [--distractors 500] [--seed 0]
"""
import argparse

from cdva.synth import write_corpus


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--queries", type=int, default=30)
    ap.add_argument("--distractors", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    for p in write_corpus(args.out, n_queries=args.queries, n_distractors=args.distractors, seed=args.seed):
        print(p)


if __name__ == "__main__":
    main()
