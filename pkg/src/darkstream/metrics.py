"""Scoring utilities: cosine similarity, equal error rate, real-time factor.

Score files are UTF-8 text with one trial per line::

    genuine 0.91
    impostor 0.12
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySide, MalformedFile, ShapeMismatch, ZeroDuration, ZeroVector


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine_similarity: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class TrialScores:
    """Verification scores split by trial type."""

    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        for name in ("genuine", "impostor"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} scores contain non-finite values")
            object.__setattr__(self, name, v)


def error_rates(scores: TrialScores, thresholds):
    """False-reject and false-accept rates at each threshold.

    A trial is accepted when its score is ``>= threshold``.
    """
    g = np.sort(scores.genuine)
    i = np.sort(scores.impostor)
    th = np.asarray(thresholds, dtype=np.float64)
    frr = np.searchsorted(g, th, side="left") / g.size
    far = (i.size - np.searchsorted(i, th, side="left")) / i.size
    return frr, far


def compute_eer(scores: TrialScores) -> tuple:
    """Equal error rate in percent and the threshold where it occurs.

    Every distinct score (plus +inf) is tried as a threshold. When FRR and
    FAR do not meet exactly at one of them, both rates are interpolated
    linearly between the two thresholds that bracket the crossing.
    """
    if not isinstance(scores, TrialScores):
        scores = TrialScores(*scores)
    if scores.genuine.size == 0 or scores.impostor.size == 0:
        raise EmptySide("EER needs at least one genuine and one impostor score")
    th = np.append(np.unique(np.concatenate([scores.genuine, scores.impostor])), np.inf)
    frr, far = error_rates(scores, th)
    d = frr - far
    # d climbs from <= 0 at the lowest score to 1 at +inf
    k = int(np.argmax(d >= 0))
    if d[k] == 0 or k == 0:
        return 100.0 * float(frr[k]), float(th[k])
    alpha = -d[k - 1] / (d[k] - d[k - 1])
    eer = frr[k - 1] + alpha * (frr[k] - frr[k - 1])
    lo, hi = th[k - 1], th[k]
    theta = lo + alpha * (hi - lo) if np.isfinite(hi) else lo
    return 100.0 * float(eer), float(theta)


def rtf(total_compute_seconds: float, audio_seconds: float) -> float:
    """Real-time factor: processing time over audio duration."""
    if not audio_seconds > 0:
        raise ZeroDuration(f"audio duration must be positive, got {audio_seconds}")
    return float(total_compute_seconds) / float(audio_seconds)


def read_scores(path) -> TrialScores:
    genuine, impostor = [], []
    text = Path(path).read_text(encoding="utf-8")
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 2 or parts[0] not in ("genuine", "impostor"):
            raise MalformedFile(f"{path}:{n}: expected '<genuine|impostor> <score>'")
        try:
            value = float(parts[1])
        except ValueError as exc:
            raise MalformedFile(f"{path}:{n}: bad score {parts[1]!r}") from exc
        (genuine if parts[0] == "genuine" else impostor).append(value)
    try:
        return TrialScores(genuine, impostor)
    except ValueError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc


def write_scores(path, scores: TrialScores) -> None:
    lines = [f"genuine {s!r}" for s in scores.genuine.tolist()]
    lines += [f"impostor {s!r}" for s in scores.impostor.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def report_text(**fields) -> str:
    """JSON report text, laid out like :meth:`LatencyReport.to_text`."""
    return json.dumps(fields, indent=2)
