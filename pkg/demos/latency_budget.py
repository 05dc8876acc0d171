"""Latency budget per lookahead setting.

Algorithmic delay is chunk length plus lookahead and needs no timing.
Compute time is measured per chunk on this machine.

    python demos/latency_budget.py --chunk-ms 60
"""

import argparse

from darkstream.audio import AudioBuffer
from darkstream.streaming import measure_latency

from _common import narrow_pipeline, tone


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--chunk-ms", type=int, default=60)
    args = ap.parse_args()

    buf = AudioBuffer(tone(2.0))
    print(f"{'la_ms':>6} {'algo_ms':>8} {'compute_ms':>11} {'total_ms':>9} {'rtf':>6}")
    for la in (0, 7, 14):
        rep = measure_latency(narrow_pipeline(la), buf, args.chunk_ms)
        print(f"{rep.lookahead_ms:>6} {rep.algorithmic_ms:>8} {rep.compute_ms['mean']:>11.2f} "
              f"{rep.total_ms:>9.2f} {rep.rtf:>6.3f}")


if __name__ == "__main__":
    main()
