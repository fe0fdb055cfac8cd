"""Duration-based precision / recall / F-measure with zero collar, and dev-set tuning."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotations import (
    OUTPUT_CLASSES,
    Annotation,
    VoiceClass,
    as_class,
    derive_speech,
    intersect_intervals,
    total_duration,
)
from .inference import Thresholds, hypothesis
from .model import ScoreTrack

logger = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass(frozen=True)
class DetectionCounts:
    tp: float = 0.0
    fp: float = 0.0
    fn: float = 0.0

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def reference(self) -> float:
        return self.tp + self.fn

    @property
    def precision(self) -> float:
        if self.tp + self.fp > 0:
            return self.tp / (self.tp + self.fp)
        # nothing detected: perfect only if there was nothing to detect
        return 1.0 if self.reference == 0 else 0.0

    @property
    def recall(self) -> float:
        if self.reference > 0:
            return self.tp / self.reference
        return 1.0

    @property
    def f_measure(self) -> float:
        if self.reference == 0 and self.tp + self.fp == 0:
            return 1.0
        return f_measure(self.precision, self.recall)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn}


def f_measure(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (0 when both are 0)."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def detection_counts(
    ref: Annotation,
    hyp: Annotation,
    cls: VoiceClass | str,
    uem: Sequence[tuple[float, float]] | None = None,
) -> DetectionCounts:
    """True/false positive and false negative durations of one class, collar 0."""
    cls = as_class(cls)
    r = ref.intervals(cls)
    h = hyp.intervals(cls)
    if uem is not None:
        r = intersect_intervals(r, uem)
        h = intersect_intervals(h, uem)
    tp = total_duration(intersect_intervals(r, h))
    fp = max(total_duration(h) - tp, 0.0)
    fn = max(total_duration(r) - tp, 0.0)
    return DetectionCounts(tp, fp, fn)


def average_f(values: Iterable[float]) -> float:
    values = list(values)
    return float(sum(values) / len(values))


@dataclass
class EvalReport:
    classes: tuple[VoiceClass, ...]
    counts: dict[VoiceClass, DetectionCounts]
    per_uri: dict[str, dict[VoiceClass, DetectionCounts]] = field(default_factory=dict)
    accumulation: str = "micro"

    def precision(self, cls) -> float:
        return self.counts[as_class(cls)].precision

    def recall(self, cls) -> float:
        return self.counts[as_class(cls)].recall

    def f(self, cls) -> float:
        cls = as_class(cls)
        if self.accumulation == "macro":
            return average_f(u[cls].f_measure for u in self.per_uri.values()) if self.per_uri else 1.0
        return self.counts[cls].f_measure

    @property
    def average(self) -> float:
        return average_f(self.f(c) for c in self.classes)

    def to_dict(self) -> dict:
        return {
            "accumulation": self.accumulation,
            "classes": [c.value for c in self.classes],
            "metrics": {
                c.value: {
                    "precision": self.precision(c),
                    "recall": self.recall(c),
                    "f": self.f(c),
                    **self.counts[c].to_dict(),
                }
                for c in self.classes
            },
            "average_f": self.average,
            "per_uri": {
                uri: {c.value: counts[c].to_dict() for c in self.classes}
                for uri, counts in self.per_uri.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        classes = tuple(VoiceClass(c) for c in d["classes"])
        counts = {
            c: DetectionCounts(d["metrics"][c.value]["tp"], d["metrics"][c.value]["fp"], d["metrics"][c.value]["fn"])
            for c in classes
        }
        per_uri = {
            uri: {VoiceClass(k): DetectionCounts(**v) for k, v in row.items()}
            for uri, row in d.get("per_uri", {}).items()
        }
        return cls(classes, counts, per_uri, d.get("accumulation", "micro"))

    def table(self, name: str = "system") -> str:
        return format_table([(name, self)])


def format_table(rows: Sequence[tuple[str, "EvalReport"]], decimals: int = 1) -> str:
    """Aligned text table: one row per system, F in percent per class, ``Ave.`` last."""
    if not rows:
        raise ValueError("no reports to tabulate")
    classes = rows[0][1].classes
    for name, report in rows:
        if report.classes != classes:
            raise ValueError(f"class set of {name!r} differs from the first report")
    header = ["System"] + [c.value for c in classes] + ["Ave."]
    body = [
        [name] + [f"{100 * r.f(c):.{decimals}f}" for c in classes] + [f"{100 * r.average:.{decimals}f}"]
        for name, r in rows
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def _prepare_reference(ref: Annotation) -> Annotation:
    if VoiceClass.SPEECH not in ref.classes:
        ref = derive_speech(ref)
    return ref.normalized()


def evaluate(
    refs: Mapping[str, Annotation],
    hyps: Mapping[str, Annotation],
    classes: Sequence[VoiceClass | str] = OUTPUT_CLASSES,
    uem: Mapping[str, Sequence[tuple[float, float]]] | None = None,
    accumulation: str = "micro",
) -> EvalReport:
    """Per-class detection metrics over a corpus.

    Durations are summed over files before computing precision and recall
    (``accumulation="micro"``); ``"macro"`` averages per-file F instead.
    """
    if accumulation not in ("micro", "macro"):
        raise ValueError("accumulation must be 'micro' or 'macro'")
    classes = tuple(as_class(c) for c in classes)
    totals = {c: DetectionCounts() for c in classes}
    per_uri = {}
    for uri in sorted(refs):
        ref = _prepare_reference(refs[uri])
        hyp = hyps.get(uri)
        if hyp is None:
            logger.warning("no hypothesis for %s; scoring it as empty", uri)
            hyp = Annotation(uri)
        regions = uem.get(uri) if uem is not None else None
        row = {c: detection_counts(ref, hyp, c, regions) for c in classes}
        per_uri[uri] = row
        for c in classes:
            totals[c] = totals[c] + row[c]
    return EvalReport(classes, totals, per_uri, accumulation)


# ---------------------------------------------------------------------------
# tuning


@dataclass
class TuneResult:
    epoch: int
    thresholds: Thresholds
    average_f: float
    class_f: dict[VoiceClass, float]
    # epoch -> class -> F at every grid point
    curves: dict[int, dict[VoiceClass, list[float]]]
    grid: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "thresholds": self.thresholds.to_dict(),
            "average_f": self.average_f,
            "class_f": {c.value: v for c, v in self.class_f.items()},
            "grid": list(self.grid),
            "curves": {str(e): {c.value: v for c, v in row.items()} for e, row in self.curves.items()},
        }


ScoreSet = Mapping[str, tuple[ScoreTrack, float | None]]  # uri -> (track, duration)


def class_f_at(
    scores: ScoreSet,
    refs: Mapping[str, Annotation],
    cls: VoiceClass,
    sigma: float,
    uem: Mapping[str, Sequence[tuple[float, float]]] | None = None,
) -> float:
    """Corpus F of one class when its scores are thresholded at ``sigma``."""
    total = DetectionCounts()
    for uri in sorted(refs):
        ref = refs[uri]
        if uri in scores:
            track, duration = scores[uri]
            hyp = hypothesis(track.select([cls]), Thresholds({cls: sigma}), uri, duration)
        else:
            hyp = Annotation(uri)
        regions = uem.get(uri) if uem is not None else None
        total = total + detection_counts(ref, hyp, cls, regions)
    return total.f_measure


def tune(
    dumps: Mapping[int, ScoreSet],
    refs: Mapping[str, Annotation],
    grid: Sequence[float] = DEFAULT_GRID,
    classes: Sequence[VoiceClass | str] | None = None,
    uem: Mapping[str, Sequence[tuple[float, float]]] | None = None,
) -> TuneResult:
    """Exhaustive search of (epoch, per-class threshold) maximizing average dev F.

    For each epoch every class gets the grid value maximizing its own F; the
    epoch with the best resulting average wins. Ties go to the lower threshold
    and the earlier epoch.
    """
    grid = tuple(sorted(float(g) for g in grid))
    if not grid:
        raise ValueError("threshold grid is empty")
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise ValueError("thresholds must lie in [0, 1]")
    if not dumps:
        raise ValueError("no checkpoint scores to tune on")
    refs = {uri: _prepare_reference(a) for uri, a in refs.items()}
    best = None
    curves = {}
    for epoch in sorted(dumps):
        scores = dumps[epoch]
        epoch_classes = tuple(as_class(c) for c in classes) if classes else next(iter(scores.values()))[0].classes
        sigma, class_f, curves[epoch] = {}, {}, {}
        for cls in epoch_classes:
            curve = [class_f_at(scores, refs, cls, g, uem) for g in grid]
            i = int(np.argmax(curve))  # first maximum -> lowest threshold
            sigma[cls], class_f[cls] = grid[i], curve[i]
            curves[epoch][cls] = curve
        avg = average_f(class_f.values())
        if best is None or avg > best[2]:
            best = (epoch, Thresholds(sigma), avg, class_f)
    epoch, thresholds, avg, class_f = best
    return TuneResult(epoch, thresholds, avg, class_f, curves, grid)
