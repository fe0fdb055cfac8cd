"""Interval annotations, voice-type taxonomy, frame-grid encoding and RTTM/UEM I/O."""

from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPSILON = 1e-9


class VoiceClass(str, enum.Enum):
    KCHI = "KCHI"
    OCH = "OCH"
    MAL = "MAL"
    FEM = "FEM"
    UNK = "UNK"
    SPEECH = "SPEECH"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def from_label(cls, label: str) -> "VoiceClass":
        """Map a raw RTTM label to a class; unrecognised labels become UNK."""
        label = label.strip().upper()
        if label == "CHI":
            # "CHI" shows up as a spelling of OCH in some corpora
            return cls.OCH
        try:
            return cls(label)
        except ValueError:
            return cls.UNK


REFERENCE_CLASSES = (VoiceClass.KCHI, VoiceClass.OCH, VoiceClass.MAL, VoiceClass.FEM, VoiceClass.UNK)
OUTPUT_CLASSES = (VoiceClass.KCHI, VoiceClass.OCH, VoiceClass.MAL, VoiceClass.FEM, VoiceClass.SPEECH)


def as_class(c: VoiceClass | str) -> VoiceClass:
    if isinstance(c, VoiceClass):
        return c
    try:
        return VoiceClass(str(c).upper())
    except ValueError:
        raise ValueError(f"undefined voice class {c!r}") from None


class RTTMParseError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Segment:
    onset: float
    offset: float

    def __post_init__(self):
        if not (math.isfinite(self.onset) and math.isfinite(self.offset)):
            raise ValueError(f"non-finite segment bounds ({self.onset}, {self.offset})")
        if self.onset < -EPSILON:
            raise ValueError(f"negative onset {self.onset}")
        if self.offset - self.onset <= 0:
            raise ValueError(f"segment must have positive duration, got ({self.onset}, {self.offset})")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    @property
    def middle(self) -> float:
        return 0.5 * (self.onset + self.offset)


# ---------------------------------------------------------------------------
# interval algebra on sorted lists of (onset, offset) pairs

def merge_intervals(intervals: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    """Union of intervals as a sorted list of disjoint, non-touching intervals."""
    out: list[list[float]] = []
    for on, off in sorted(intervals):
        if out and on <= out[-1][1] + EPSILON:
            out[-1][1] = max(out[-1][1], off)
        else:
            out.append([on, off])
    return [(a, b) for a, b in out]


def intersect_intervals(a: Sequence[tuple[float, float]], b: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Intersection of two merged interval lists."""
    i = j = 0
    out = []
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def total_duration(intervals: Iterable[tuple[float, float]]) -> float:
    return float(sum(off - on for on, off in intervals))


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Annotation:
    """Labelled segments of one recording. Entries of different classes may overlap."""

    uri: str
    entries: tuple[tuple[Segment, VoiceClass], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((s, as_class(c)) for s, c in self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def classes(self) -> set[VoiceClass]:
        return {c for _, c in self.entries}

    def intervals(self, cls: VoiceClass | str) -> list[tuple[float, float]]:
        """Merged timeline of one class."""
        cls = as_class(cls)
        return merge_intervals((s.onset, s.offset) for s, c in self.entries if c == cls)

    def normalized(self) -> "Annotation":
        """Merge same-class overlaps, sort by (onset, offset, class)."""
        entries = []
        for cls in VoiceClass:
            entries.extend((Segment(on, off), cls) for on, off in self.intervals(cls))
        entries.sort(key=lambda e: (e[0].onset, e[0].offset, e[1].value))
        return Annotation(self.uri, tuple(entries))

    def without(self, cls: VoiceClass | str) -> "Annotation":
        cls = as_class(cls)
        return Annotation(self.uri, tuple(e for e in self.entries if e[1] != cls))

    def restrict(self, classes: Iterable[VoiceClass | str]) -> "Annotation":
        keep = {as_class(c) for c in classes}
        return Annotation(self.uri, tuple(e for e in self.entries if e[1] in keep))

    def crop(self, onset: float, offset: float, shift: bool = False) -> "Annotation":
        """Entries clipped to [onset, offset); optionally re-timed relative to onset."""
        entries = []
        for s, c in self.entries:
            lo, hi = max(s.onset, onset), min(s.offset, offset)
            if hi - lo > EPSILON:
                if shift:
                    lo, hi = lo - onset, hi - onset
                entries.append((Segment(max(lo, 0.0) if shift else lo, hi), c))
        return Annotation(self.uri, tuple(entries))

    def extent(self) -> float:
        return max((s.offset for s, _ in self.entries), default=0.0)

    def isclose(self, other: "Annotation", atol: float = EPSILON) -> bool:
        if self.uri != other.uri or self.classes != other.classes:
            return False
        for cls in self.classes:
            a, b = self.intervals(cls), other.intervals(cls)
            if len(a) != len(b):
                return False
            if any(abs(x[0] - y[0]) > atol or abs(x[1] - y[1]) > atol for x, y in zip(a, b)):
                return False
        return True


def derive_speech(a: Annotation) -> Annotation:
    """Add SPEECH entries covering the union of every reference speaker class (UNK included)."""
    if VoiceClass.SPEECH in a.classes:
        raise ValueError(f"annotation {a.uri!r} already contains SPEECH")
    union = merge_intervals((s.onset, s.offset) for s, c in a.entries if c in REFERENCE_CLASSES)
    speech = tuple((Segment(on, off), VoiceClass.SPEECH) for on, off in union)
    return Annotation(a.uri, a.entries + speech)


# ---------------------------------------------------------------------------
# frame grids

@dataclass(frozen=True)
class FrameGrid:
    start: float
    step: float
    count: int

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("frame step must be positive")
        if self.count < 0:
            raise ValueError("frame count must be non-negative")

    def onsets(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.count)

    def middles(self) -> np.ndarray:
        return self.start + self.step * (np.arange(self.count) + 0.5)

    @property
    def end(self) -> float:
        return self.start + self.step * self.count


@dataclass(frozen=True)
class LabelMatrix:
    grid: FrameGrid
    classes: tuple[VoiceClass, ...]
    values: np.ndarray  # (count, K) uint8

    def column(self, cls: VoiceClass | str) -> np.ndarray:
        return self.values[:, self.classes.index(as_class(cls))]


def encode_frames(a: Annotation, grid: FrameGrid, classes: Sequence[VoiceClass | str]) -> LabelMatrix:
    """Frame i is active for class j iff the frame midpoint lies inside an entry of j."""
    classes = tuple(as_class(c) for c in classes)
    if (
        VoiceClass.SPEECH in classes
        and VoiceClass.SPEECH not in a.classes
        and a.classes & set(REFERENCE_CLASSES)
    ):
        raise ValueError("SPEECH requested but not derived on this annotation (call derive_speech)")
    mids = grid.middles()
    values = np.zeros((grid.count, len(classes)), dtype=np.uint8)
    for j, cls in enumerate(classes):
        for on, off in a.intervals(cls):
            lo = np.searchsorted(mids, on, side="left")
            hi = np.searchsorted(mids, off, side="left")
            values[lo:hi, j] = 1
    return LabelMatrix(grid, classes, values)


def decode_frames(m: LabelMatrix, uri: str = "", decimals: int | None = None) -> Annotation:
    """Maximal runs of active frames per class become [frame_start, frame_end) segments."""
    entries = []
    for j, cls in enumerate(m.classes):
        col = np.asarray(m.values[:, j]).astype(bool)
        if not col.any():
            continue
        padded = np.concatenate([[False], col, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        for lo, hi in zip(edges[::2], edges[1::2]):
            on = m.grid.start + lo * m.grid.step
            off = m.grid.start + hi * m.grid.step
            if decimals is not None:
                on, off = round(on, decimals), round(off, decimals)
            entries.append((Segment(on, off), cls))
    entries.sort(key=lambda e: (e[0].onset, e[0].offset, e[1].value))
    return Annotation(uri, tuple(entries))


# ---------------------------------------------------------------------------
# RTTM / UEM

def _fmt_time(x: float) -> str:
    s = repr(float(x))
    if "e" in s or "E" in s:
        s = f"{x:.9f}"
    whole, _, frac = s.partition(".")
    return f"{whole}.{frac.ljust(3, '0')}"


def parse_rttm(text: str) -> list[Annotation]:
    annotations: "OrderedDict[str, list]" = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 9 or fields[0] != "SPEAKER":
            raise RTTMParseError(f"line {lineno}: malformed RTTM entry {line!r}")
        uri = fields[1]
        try:
            onset, duration = float(fields[3]), float(fields[4])
        except ValueError:
            raise RTTMParseError(f"line {lineno}: non-numeric onset/duration") from None
        if not (duration > 0):
            raise RTTMParseError(f"line {lineno}: non-positive duration {duration}")
        if onset < 0:
            raise RTTMParseError(f"line {lineno}: negative onset {onset}")
        # nanosecond snap keeps onset + duration equal to the offset that was written
        offset = round(onset + duration, 9)
        annotations.setdefault(uri, []).append((Segment(onset, offset), VoiceClass.from_label(fields[7])))
    return [Annotation(uri, tuple(entries)) for uri, entries in annotations.items()]


def serialize_rttm(annotations: Annotation | Iterable[Annotation], channel: int = 1) -> str:
    if isinstance(annotations, Annotation):
        annotations = [annotations]
    lines = []
    for a in annotations:
        for seg, cls in a.entries:
            lines.append(
                f"SPEAKER {a.uri} {channel} {_fmt_time(seg.onset)} {_fmt_time(seg.duration)} "
                f"<NA> <NA> {cls.value} <NA> <NA>"
            )
    return "".join(line + "\n" for line in lines)


def read_rttm(path: str | Path) -> list[Annotation]:
    path = Path(path)
    try:
        return parse_rttm(path.read_text(encoding="utf-8"))
    except RTTMParseError as e:
        raise RTTMParseError(f"{path}: {e}") from None


def write_rttm(path: str | Path, annotations: Annotation | Iterable[Annotation]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_rttm(annotations), encoding="utf-8")


@dataclass
class UEM:
    regions: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def get(self, uri: str) -> list[tuple[float, float]] | None:
        return self.regions.get(uri)


def parse_uem(text: str) -> UEM:
    regions: dict[str, list[tuple[float, float]]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 4:
            raise ValueError(f"line {lineno}: malformed UEM entry {line!r}")
        onset, offset = float(fields[2]), float(fields[3])
        if offset <= onset:
            raise ValueError(f"line {lineno}: empty UEM region")
        regions.setdefault(fields[0], []).append((onset, offset))
    return UEM({uri: merge_intervals(r) for uri, r in regions.items()})


def serialize_uem(uem: UEM, channel: int = 1) -> str:
    return "".join(
        f"{uri} {channel} {_fmt_time(on)} {_fmt_time(off)}\n"
        for uri, regions in uem.regions.items()
        for on, off in regions
    )
