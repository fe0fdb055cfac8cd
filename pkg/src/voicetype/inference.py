"""Whole-file scoring with overlapping windows, thresholding and hypothesis emission."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
import torch

from .annotations import Annotation, FrameGrid, LabelMatrix, VoiceClass, as_class, decode_frames, write_rttm
from .audio import ManifestEntry, Waveform, load_audio
from .model import Checkpoint, ModelConfig, ScoreTrack, VoiceTypeClassifier

logger = logging.getLogger(__name__)

# hypothesis boundaries are emitted at microsecond resolution
TIME_DECIMALS = 6


@dataclass(frozen=True)
class FrameGeometry:
    """Where a model's output frames sit inside its input window (all in samples)."""

    sample_rate: int
    chunk_samples: int
    frames_per_chunk: int
    frame_stride: int
    frame_center: float

    @classmethod
    def of(cls, config: ModelConfig) -> "FrameGeometry":
        return cls(config.sample_rate, config.chunk_samples, config.frames_per_chunk,
                   config.frame_stride, config.frame_center)

    def grid(self, first_frame: int, count: int) -> FrameGrid:
        step = self.frame_stride / self.sample_rate
        start = (self.frame_center - self.frame_stride / 2) / self.sample_rate + first_frame * step
        return FrameGrid(start, step, count)


class Scorer(Protocol):
    geometry: FrameGeometry
    classes: tuple[VoiceClass, ...]

    def __call__(self, windows: np.ndarray) -> np.ndarray:
        """(batch, chunk_samples) -> (batch, frames_per_chunk, K)"""


class ModelScorer:
    """Evaluation-mode wrapper turning a classifier into a numpy scorer."""

    def __init__(self, model: VoiceTypeClassifier | Checkpoint, batch_size: int = 32):
        if isinstance(model, Checkpoint):
            model = model.build()
        self.model = model.eval()
        self.geometry = FrameGeometry.of(model.config)
        self.classes = model.classes
        self.batch_size = batch_size

    def __call__(self, windows: np.ndarray) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(windows), self.batch_size):
                x = torch.from_numpy(np.ascontiguousarray(windows[i:i + self.batch_size], dtype=np.float32))
                out.append(self.model(x).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.geometry.frames_per_chunk, len(self.classes)))


class CombinedScorer:
    """Concatenates the outputs of several models sharing one frame geometry (binary suites)."""

    def __init__(self, scorers: Sequence[ModelScorer]):
        if not scorers:
            raise ValueError("no models to combine")
        self.scorers = list(scorers)
        self.geometry = scorers[0].geometry
        if any(s.geometry != self.geometry for s in scorers):
            raise ValueError("combined models must share the same frame geometry")
        self.classes = tuple(c for s in scorers for c in s.classes)
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("combined models predict overlapping classes")

    def __call__(self, windows: np.ndarray) -> np.ndarray:
        return np.concatenate([s(windows) for s in self.scorers], axis=-1)


def make_scorer(models) -> "ModelScorer | CombinedScorer":
    if isinstance(models, (Checkpoint, VoiceTypeClassifier)):
        return ModelScorer(models)
    models = list(models)
    if len(models) == 1:
        return ModelScorer(models[0])
    return CombinedScorer([ModelScorer(m) for m in models])


@dataclass(frozen=True)
class SlidingSpec:
    window: float = 2.0
    step: float = 0.5

    def __post_init__(self):
        if not 0 < self.step <= self.window:
            raise ValueError("sliding step must satisfy 0 < step <= window")


def window_onsets(n_samples: int, geometry: FrameGeometry, step: float) -> list[int]:
    """Window start positions (samples), all multiples of the frame stride.

    The step is rounded to a whole number of frames and capped at the span the
    output frames of one window cover, so consecutive windows leave no gap. The
    last window is pulled back to the end of the file (to the frame-stride
    multiple just before ``n_samples - chunk_samples``).
    """
    g = geometry
    stride = g.frame_stride
    step_frames = max(1, int(round(step * g.sample_rate / stride)))
    step_frames = min(step_frames, g.frames_per_chunk)
    if n_samples <= g.chunk_samples:
        return [0]
    last = ((n_samples - g.chunk_samples) // stride) * stride
    onsets = list(range(0, last + 1, step_frames * stride))
    if onsets[-1] != last:
        onsets.append(last)
    return onsets


def slide_scores(scorer, waveform: Waveform, spec: SlidingSpec | None = None) -> ScoreTrack:
    """Per-frame scores of a whole file: unweighted mean over every covering window."""
    spec = spec or SlidingSpec()
    if isinstance(scorer, (VoiceTypeClassifier, Checkpoint)):
        scorer = ModelScorer(scorer)
    g = scorer.geometry
    if waveform.rate != g.sample_rate:
        raise ValueError(f"waveform rate {waveform.rate} Hz does not match model rate {g.sample_rate} Hz")
    if abs(spec.window * g.sample_rate - g.chunk_samples) > 0.5:
        raise ValueError("sliding window must equal the model's chunk duration")

    samples = np.asarray(waveform.samples, dtype=np.float32)
    n = len(samples)
    padded = samples if n >= g.chunk_samples else np.pad(samples, (0, g.chunk_samples - n))
    onsets = window_onsets(n, g, spec.step)
    windows = np.stack([padded[o:o + g.chunk_samples] for o in onsets])
    scores = np.asarray(scorer(windows))

    total = onsets[-1] // g.frame_stride + g.frames_per_chunk
    sums = np.zeros((total, scores.shape[-1]), dtype=np.float64)
    counts = np.zeros(total, dtype=np.int64)
    for o, s in zip(onsets, scores):
        first = o // g.frame_stride
        sums[first:first + g.frames_per_chunk] += s
        counts[first:first + g.frames_per_chunk] += 1
    values = sums / counts[:, None]

    grid = g.grid(0, total)
    if n < g.chunk_samples:
        keep = int(np.searchsorted(grid.middles(), n / g.sample_rate, side="left"))
        values = values[:keep]
        grid = g.grid(0, keep)
    return ScoreTrack(grid, tuple(scorer.classes), values)


# ---------------------------------------------------------------------------
# thresholds


@dataclass(frozen=True)
class Thresholds:
    values: Mapping[VoiceClass, float]

    def __post_init__(self):
        values = {as_class(k): float(v) for k, v in dict(self.values).items()}
        for k, v in values.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"threshold for {k} outside [0, 1]: {v}")
        object.__setattr__(self, "values", values)

    @classmethod
    def uniform(cls, classes: Iterable[VoiceClass | str], value: float = 0.5) -> "Thresholds":
        return cls({as_class(c): value for c in classes})

    def __getitem__(self, cls: VoiceClass | str) -> float:
        return self.values[as_class(cls)]

    def to_dict(self) -> dict[str, float]:
        return {k.value: v for k, v in self.values.items()}

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "Thresholds":
        return cls({as_class(k): v for k, v in d.items()})


def binarize(scores: ScoreTrack, thresholds: Thresholds, uri: str = "") -> Annotation:
    """Frame active for class j iff its score is strictly greater than the class threshold."""
    missing = [c for c in scores.classes if c not in thresholds.values]
    if missing:
        raise ValueError(f"no threshold for classes {[c.value for c in missing]}")
    sigma = np.array([thresholds[c] for c in scores.classes])
    active = (scores.values > sigma).astype(np.uint8)
    return decode_frames(LabelMatrix(scores.grid, scores.classes, active), uri, decimals=TIME_DECIMALS)


def hypothesis(scores: ScoreTrack, thresholds: Thresholds, uri: str, duration: float | None = None) -> Annotation:
    """Binarized hypothesis clipped to the file extent."""
    hyp = binarize(scores, thresholds, uri)
    if duration is not None:
        hyp = hyp.crop(0.0, round(duration, TIME_DECIMALS))
    return hyp


# ---------------------------------------------------------------------------
# score dumps

_MAGIC = b"VTSCORE1"


def write_scores(path: str | Path, uri: str, track: ScoreTrack, duration: float | None = None) -> Path:
    """Binary matrix with a JSON header, plus a ``.json`` sidecar holding the same header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "uri": uri,
        "start": track.grid.start,
        "step": track.grid.step,
        "count": track.grid.count,
        "classes": [c.value for c in track.classes],
        "dtype": "<f8",
        "duration": duration,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    data = np.ascontiguousarray(track.values, dtype="<f8").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_MAGIC + struct.pack("<I", len(blob)) + blob + data)
    tmp.replace(path)
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def read_scores(path: str | Path) -> tuple[str, ScoreTrack, float | None]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a score dump")
    (size,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + size])
    values = np.frombuffer(raw[12 + size:], dtype=header["dtype"]).reshape(header["count"], len(header["classes"]))
    grid = FrameGrid(header["start"], header["step"], header["count"])
    track = ScoreTrack(grid, tuple(VoiceClass(c) for c in header["classes"]), values.copy())
    return header["uri"], track, header.get("duration")


# ---------------------------------------------------------------------------


def score_file(scorer, entry: ManifestEntry, spec: SlidingSpec) -> tuple[ScoreTrack, float]:
    waveform = load_audio(entry.audio, scorer.geometry.sample_rate)
    return slide_scores(scorer, waveform, spec), waveform.duration


def apply(
    checkpoint: Checkpoint | str | Path | Sequence[Checkpoint | str | Path],
    thresholds: Thresholds,
    entries: Sequence[ManifestEntry],
    spec: SlidingSpec | None,
    out_dir: str | Path,
    dump_scores: bool = True,
) -> tuple[dict[str, Path], list[str]]:
    """Score and binarize every entry; returns (uri -> RTTM path, failed uris).

    A failing file is logged and skipped; the remaining files are still processed.
    """
    checkpoints = [checkpoint] if isinstance(checkpoint, (Checkpoint, str, Path)) else list(checkpoint)
    checkpoints = [c if isinstance(c, Checkpoint) else Checkpoint.load(c) for c in checkpoints]
    scorer = make_scorer(checkpoints)
    spec = spec or SlidingSpec(window=checkpoints[0].config.chunk_duration)
    out_dir = Path(out_dir)
    outputs: dict[str, Path] = {}
    failures: list[str] = []
    for entry in entries:
        try:
            track, duration = score_file(scorer, entry, spec)
            hyp = hypothesis(track, thresholds, entry.uri, duration)
            path = out_dir / "rttm" / f"{entry.uri}.rttm"
            write_rttm(path, hyp)
            if dump_scores:
                write_scores(out_dir / "scores" / f"{entry.uri}.scores", entry.uri, track, duration)
            outputs[entry.uri] = path
        except Exception as e:  # noqa: BLE001 - per-file failures must not stop the batch
            logger.error("failed on %s: %s", entry.uri, e)
            failures.append(entry.uri)
    return outputs, failures
