"""Equal error rate on synthetic verification scores.

Genuine trials score N(mu, 1) and impostor trials N(0, 1); the EER for
that setup is Phi(-mu/2), which the empirical value should track.

    python demos/eer.py --trials 20000
"""

import argparse

import numpy as np
from scipy.stats import norm

from darkstream.metrics import TrialScores, compute_eer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=5000)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'mu':>4} {'eer %':>7} {'expected %':>11}")
    for mu in (0.0, 0.5, 1.0, 2.0, 4.0):
        scores = TrialScores(rng.normal(mu, 1, args.trials), rng.normal(0, 1, args.trials))
        eer, _ = compute_eer(scores)
        print(f"{mu:>4} {eer:>7.2f} {100 * norm.cdf(-mu / 2):>11.2f}")


if __name__ == "__main__":
    main()
