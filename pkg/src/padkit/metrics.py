"""Presentation attack detection metrics.

Scores are liveness probabilities in [0, 1]; the positive class is bona
fide. A sample is classified bona fide when its score is greater than or
equal to the decision threshold (ties side with bona fide, which matters
for tie-heavy score sets and is therefore fixed here).

    APCER  fraction of attacks accepted as bona fide
    BPCER  fraction of bona fide presentations rejected as attacks
    ACER   (APCER + BPCER) / 2, exactly

APCER pools attack species by default; ``max`` mode instead reports the
worst single species. Aggregation across sub-protocols uses the arithmetic
mean and the sample standard deviation (n - 1 denominator; zero for a
single report).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ScoredSet",
    "MetricReport",
    "RocCurve",
    "rates_at",
    "roc",
    "tpr_at_fpr",
    "aggregate",
    "evaluate_scored_set",
    "read_score_file",
    "write_score_file",
    "report_lines",
]

BONAFIDE = "bonafide"
ATTACK = "attack"


@dataclass
class ScoredSet:
    """Scores with ground-truth labels for one evaluation run."""

    scores: np.ndarray                    # float in [0, 1]
    bonafide: np.ndarray                  # bool mask, True = bona fide
    pai: list[str] = field(default_factory=list)
    subprotocol: str = ""
    video_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.bonafide = np.asarray(self.bonafide, dtype=bool)
        if self.scores.shape != self.bonafide.shape:
            raise ValueError("scores and labels differ in length")
        if self.scores.size == 0:
            raise ValueError("empty scored set")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite scores")
        if not self.pai:
            self.pai = ["-" if b else "unknown" for b in self.bonafide]

    def require_both_classes(self):
        if not self.bonafide.any() or self.bonafide.all():
            raise ValueError("need at least one bona fide and one attack entry")


@dataclass
class MetricReport:
    subprotocol: str
    threshold: float
    apcer: float
    bpcer: float
    acer: float
    tpr_at: dict[float, float] = field(default_factory=dict)

    def as_mapping(self) -> dict[str, float]:
        out = {"apcer": self.apcer, "bpcer": self.bpcer, "acer": self.acer}
        for target, tpr in self.tpr_at.items():
            out[f"tpr@fpr={target:g}"] = tpr
        return out


@dataclass
class RocCurve:
    """Operating points swept over all distinct thresholds plus sentinels.

    ``fpr``/``tpr`` run from (0, 0) to (1, 1) as the threshold decreases.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def auc(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))


def rates_at(scored: ScoredSet, threshold: float,
             apcer_mode: str = "pooled") -> tuple[float, float, float]:
    """APCER, BPCER and ACER at one decision threshold."""
    scored.require_both_classes()
    accept = scored.scores >= threshold
    bona = scored.bonafide
    if apcer_mode == "pooled":
        apcer = float(accept[~bona].mean())
    elif apcer_mode == "max":
        species = sorted(set(p for p, b in zip(scored.pai, bona) if not b))
        per = []
        for s in species:
            mask = np.array([p == s for p in scored.pai]) & ~bona
            per.append(float(accept[mask].mean()))
        apcer = max(per)
    else:
        raise ValueError(f"unknown apcer_mode '{apcer_mode}'")
    bpcer = float((~accept[bona]).mean())
    return apcer, bpcer, (apcer + bpcer) / 2.0


def roc(scored: ScoredSet) -> RocCurve:
    """ROC over thresholds at every distinct score, bona fide positive."""
    scored.require_both_classes()
    uniq = np.unique(scored.scores)                      # ascending
    thresholds = np.concatenate(([np.inf], uniq[::-1], [-np.inf]))
    pos = scored.scores[scored.bonafide]
    neg = scored.scores[~scored.bonafide]
    tpr = np.array([(pos >= t).mean() for t in thresholds])
    fpr = np.array([(neg >= t).mean() for t in thresholds])
    return RocCurve(fpr, tpr, thresholds)


def tpr_at_fpr(curve: RocCurve, target: float) -> float:
    """Best TPR among operating points with FPR at most ``target``.

    No interpolation: only realized operating points count, so a set with
    no usable threshold falls back to the TPR at FPR zero.
    """
    if not 0.0 < target < 1.0:
        raise ValueError("target FPR must be in (0, 1)")
    ok = curve.fpr <= target
    return float(curve.tpr[ok].max())


def aggregate(reports: Sequence[MetricReport | Mapping[str, float]]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation per metric across sub-protocols."""
    if not reports:
        raise ValueError("no reports to aggregate")
    maps = [r.as_mapping() if isinstance(r, MetricReport) else dict(r) for r in reports]
    keys = list(maps[0])
    out: dict[str, tuple[float, float]] = {}
    for key in keys:
        vals = np.array([m[key] for m in maps], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key] = (float(vals.mean()), std)
    return out


def evaluate_scored_set(scored: ScoredSet, threshold: float = 0.5,
                        fpr_targets: Iterable[float] = (1e-2,),
                        apcer_mode: str = "pooled") -> MetricReport:
    apcer, bpcer, acer = rates_at(scored, threshold, apcer_mode)
    curve = roc(scored)
    tprs = {t: tpr_at_fpr(curve, t) for t in fpr_targets}
    return MetricReport(scored.subprotocol, threshold, apcer, bpcer, acer, tprs)


# -- score file format -------------------------------------------------------
# text lines: video_id,score,label,pai,subprotocol  (label: bonafide|attack)


def write_score_file(path, scored: ScoredSet) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for i in range(scored.scores.size):
            vid = scored.video_ids[i] if scored.video_ids else f"v{i:06d}"
            label = BONAFIDE if scored.bonafide[i] else ATTACK
            w.writerow([vid, f"{scored.scores[i]:.12g}", label,
                        scored.pai[i], scored.subprotocol])


def read_score_file(path) -> ScoredSet:
    ids, scores, bona, pai, sub = [], [], [], [], ""
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            vid, score, label, species, sub_id = row
            if label not in (BONAFIDE, ATTACK):
                raise ValueError(f"{path}:{lineno}: unknown label '{label}'")
            ids.append(vid)
            scores.append(float(score))
            bona.append(label == BONAFIDE)
            pai.append(species)
            sub = sub_id or sub
    return ScoredSet(np.array(scores), np.array(bona), pai, sub, ids)


def report_lines(reports: Sequence[MetricReport],
                 summary: Mapping[str, tuple[float, float]] | None = None) -> list[str]:
    """Human-readable table, one row per sub-protocol plus the summary row."""
    header = f"{'sub-protocol':>14} {'APCER%':>8} {'BPCER%':>8} {'ACER%':>8}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{r.subprotocol:>14} {100 * r.apcer:8.2f} "
                     f"{100 * r.bpcer:8.2f} {100 * r.acer:8.2f}")
    if summary is None and len(reports) > 1:
        summary = aggregate(reports)
    if summary is not None:
        ap, bp, ac = summary["apcer"], summary["bpcer"], summary["acer"]
        lines.append(f"{'avg+-std':>14} "
                     f"{100 * ap[0]:5.1f}+-{100 * ap[1]:.1f} "
                     f"{100 * bp[0]:5.1f}+-{100 * bp[1]:.1f} "
                     f"{100 * ac[0]:5.1f}+-{100 * ac[1]:.1f}")
    return lines
