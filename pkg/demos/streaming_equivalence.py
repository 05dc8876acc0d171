"""Streamed output matches the whole-utterance pass, for any chunk size.

Runs the same input through the pipeline in one shot and then chunk by
chunk, and prints the worst sample difference per chunk size. Also shows
that every output sample depends only on input up to the lookahead.

    python demos/streaming_equivalence.py --la-frames 7
"""

import argparse

import numpy as np

from darkstream.streaming import run_stream

from _common import narrow_pipeline, tone


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--la-frames", type=int, default=3)
    ap.add_argument("--seconds", type=float, default=2.0)
    args = ap.parse_args()

    pipe = narrow_pipeline(args.la_frames)
    x = tone(args.seconds)
    target = np.random.default_rng(1).standard_normal(pipe.config.spk_dim)
    ref = pipe.forward(x, target)
    print(f"lookahead {pipe.config.la_ms} ms, {len(x)} samples")
    for chunk_ms in (20, 60, 100, 260):
        y = run_stream(pipe, x, chunk_ms, target)
        print(f"chunk {chunk_ms:4d} ms  max |stream - offline| = {np.max(np.abs(y - ref)):.2e}")

    # perturb the tail; output before (cut - lookahead) must not move
    cut = len(x) // 2
    x2 = x.copy()
    x2[cut:] = 0.0
    y2 = pipe.forward(x2, target)
    safe = cut - pipe.config.la_ms * 16
    moved = np.nonzero(y2 != ref)[0]
    print(f"input changed from sample {cut}; first changed output sample {moved[0]} (bound {safe})")


if __name__ == "__main__":
    main()
