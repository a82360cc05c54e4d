"""Clip-level error detection from a predicted score evolution."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ZERO_DELTA = 1e-9


@dataclass
class FeedbackReport:
    sample_id: str
    scores: np.ndarray
    deltas: list[tuple[int, float]]
    drops: list[tuple[int, float]]
    gains: list[tuple[int, float]]
    localization: int | None
    head: str = "exec"

    def classify(self, clip: int) -> str:
        for c, _ in self.drops:
            if c == clip:
                return "drop"
        for c, _ in self.gains:
            if c == clip:
                return "gain"
        return "flat"

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "head": self.head,
            "scores": [float(s) for s in self.scores],
            "drops": [{"clip": c, "delta": d} for c, d in self.drops],
            "gains": [{"clip": c, "delta": d} for c, d in self.gains],
            "localization": self.localization,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        lines = [f"sample {self.sample_id}  head={self.head}",
                 f"{'clip':>4}  {'score':>10}  {'delta':>10}  class"]
        lines.append(f"{1:>4}  {self.scores[0]:>10.4f}  {'':>10}  start")
        for (clip, delta), score in zip(self.deltas, self.scores[1:]):
            lines.append(f"{clip:>4}  {score:>10.4f}  {delta:>+10.4f}  {self.classify(clip)}")
        where = "none" if self.localization is None else f"clip {self.localization}"
        lines.append(f"largest drop: {where}")
        return "\n".join(lines) + "\n"


def detect_errors(evolution, head: str = "exec", sample_id: str = "") -> FeedbackReport:
    """Split clip-to-clip score changes into drops and gains.

    ``evolution`` is a ``ScoreEvolution`` (its ``head`` series is used) or a
    plain sequence of cumulative scores. Clip ``c`` (1-based) carries the
    change ``s(c) - s(c-1)``. Drops are sorted by magnitude, largest first;
    gains keep clip order.
    """
    if hasattr(evolution, "series"):
        scores = np.asarray(evolution.series(head), dtype=np.float64)
        sample_id = sample_id or evolution.sample_id
    else:
        scores = np.asarray(evolution, dtype=np.float64)
    if scores.size < 2:
        raise ValueError("need at least two clips to detect score changes")
    deltas = [(c + 1, float(scores[c] - scores[c - 1])) for c in range(1, scores.size)]
    drops = sorted(((c, d) for c, d in deltas if d < -ZERO_DELTA), key=lambda cd: (cd[1], cd[0]))
    gains = [(c, d) for c, d in deltas if d > ZERO_DELTA]
    return FeedbackReport(sample_id, scores, deltas, drops, gains, drops[0][0] if drops else None, head)


@dataclass
class LocalizationResult:
    accuracy: float
    hits: int
    scored: int
    excluded: list[str] = field(default_factory=list)


def localization_accuracy(reports, defect_clips, tolerance: int = 1) -> LocalizationResult:
    """Share of samples whose largest drop lies within ``tolerance`` clips of the defect.

    ``defect_clips[i]`` lists the ground-truth defect clips of ``reports[i]``;
    samples without exactly one defect are excluded and listed.
    """
    hits = scored = 0
    excluded = []
    for rep, truth in zip(reports, defect_clips):
        truth = list(truth)
        if len(truth) != 1:
            excluded.append(rep.sample_id)
            continue
        scored += 1
        if rep.localization is not None and abs(rep.localization - truth[0]) <= tolerance:
            hits += 1
    return LocalizationResult(hits / scored if scored else 0.0, hits, scored, excluded)
