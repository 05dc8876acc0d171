"""Discrete content bottleneck with a k-means codebook.

Fits a codebook on content frames from one utterance, prints the Lloyd
distortion trace, then anonymizes the same input with and without the
bottleneck.

    python demos/kmeans_bottleneck.py --k 16
"""

import argparse

import numpy as np

from darkstream.anonymizer import Pipeline
from darkstream.encoder import fit_kmeans, quantize
from darkstream.weights import init_random

from _common import narrow_config, tone


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=int, default=16)
    args = ap.parse_args()

    cfg = narrow_config()
    weights = init_random(cfg, 42)
    plain = Pipeline(cfg, weights)
    x = tone(4.0)
    frames = plain.encoder.forward(x)
    cb = fit_kmeans(frames, k=args.k, iterations=20)
    print(f"{len(frames)} frames, k={args.k}")
    # relative to the one-centroid distortion, so the scale of untrained frames drops out
    rel = np.asarray(cb.distortion) / np.sum(frames.var(axis=0))
    print("relative distortion", " ".join(f"{d:.3f}" for d in rel[:6]), "...", f"{rel[-1]:.3f}")
    idx, _ = quantize(frames, cb)
    print(f"codes used {len(np.unique(idx))} of {args.k}")

    snapped = Pipeline(cfg.replace(use_kmeans=True), weights, cb)
    target = np.random.default_rng(1).standard_normal(cfg.spk_dim)
    a, b = plain.forward(x, target), snapped.forward(x, target)
    print(f"output rms plain {np.sqrt(np.mean(a**2)):.4f} snapped {np.sqrt(np.mean(b**2)):.4f}, "
          f"rms difference {np.sqrt(np.mean((a - b) ** 2)):.4f}")


if __name__ == "__main__":
    main()
