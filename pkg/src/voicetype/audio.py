"""Audio ingestion, manifest handling, random chunk sampling and additive-noise augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .annotations import Annotation, FrameGrid, LabelMatrix, derive_speech, encode_frames, read_rttm, VoiceClass

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
# polyphase resampler settings; fixed so resampled audio is reproducible
RESAMPLER = {"method": "resample_poly", "window": ["kaiser", 5.0]}
CACHE_ENV = "VOICETYPE_CACHE"


class AudioError(IOError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class Chunk:
    waveform: Waveform
    labels: LabelMatrix
    source_uri: str
    source_onset: float


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    return data.astype(np.float64)


def resample(samples: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    if orig_rate == target_rate:
        return samples
    ratio = Fraction(target_rate, orig_rate)
    return resample_poly(samples, ratio.numerator, ratio.denominator, window=tuple(RESAMPLER["window"]))


def _cache_path(path: Path, target_rate: int) -> Path | None:
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    st = path.stat()
    key = f"{path.resolve()}:{st.st_size}:{st.st_mtime_ns}:{target_rate}:{RESAMPLER}"
    return Path(root) / (hashlib.sha1(key.encode()).hexdigest() + ".npy")


def load_audio(path: str | Path, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a PCM WAV file as mono float64 in [-1, 1] at ``target_rate``."""
    path = Path(path)
    try:
        cached = _cache_path(path, target_rate)
        if cached is not None and cached.exists():
            return Waveform(np.load(cached), target_rate)
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as e:
        raise AudioError(f"cannot read audio file {path}: {e}") from e
    samples = _to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    samples = resample(samples, int(rate), target_rate)
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        tmp = cached.with_suffix(".tmp.npy")
        np.save(tmp, samples)
        os.replace(tmp, cached)
    return Waveform(samples, target_rate)


def write_wav(path: str | Path, waveform: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(waveform.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, waveform.rate, pcm)


# ---------------------------------------------------------------------------
# manifest

SPLITS = ("train", "dev", "test")


@dataclass
class ManifestEntry:
    uri: str
    audio: str
    rttm: str
    split: str | None = None
    child_id: str | None = None
    pin_split: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "extra" and v is not None}
        d.update(self.extra)
        return d

    def reference(self) -> Annotation:
        """Reference annotation for this entry (empty when the RTTM lists no turns for it)."""
        for a in read_rttm(self.rttm):
            if a.uri == self.uri:
                return a
        return Annotation(self.uri)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries = []
    known = {"uri", "audio", "rttm", "split", "child_id", "pin_split"}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entry = ManifestEntry(
                uri=obj["uri"],
                audio=str((base / obj["audio"]).resolve()) if obj.get("audio") else "",
                rttm=str((base / obj["rttm"]).resolve()) if obj.get("rttm") else "",
                split=obj.get("split"),
                child_id=obj.get("child_id"),
                pin_split=obj.get("pin_split"),
                extra={k: v for k, v in obj.items() if k not in known},
            )
        except (json.JSONDecodeError, KeyError) as e:
            raise ValueError(f"{path}:{lineno}: invalid manifest line ({e})") from None
        entries.append(entry)
    return entries


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(e.to_json()) + "\n" for e in entries), encoding="utf-8")


def select_split(entries: Sequence[ManifestEntry], split: str | None) -> list[ManifestEntry]:
    if split is None or split == "all":
        return list(entries)
    return [e for e in entries if e.split == split]


# ---------------------------------------------------------------------------
# chunk sampling


@dataclass
class Recording:
    """A manifest entry with its audio and SPEECH-derived reference held in memory."""

    uri: str
    waveform: Waveform
    reference: Annotation

    @classmethod
    def load(cls, entry: ManifestEntry, rate: int = SAMPLE_RATE) -> "Recording":
        reference = entry.reference()
        if VoiceClass.SPEECH not in reference.classes:
            reference = derive_speech(reference)
        return cls(entry.uri, load_audio(entry.audio, rate), reference.normalized())


# (onset seconds) -> model output grid of the window, relative to the recording
GridFn = Callable[[float], FrameGrid]


def sample_chunk(
    recording: Recording,
    rng: np.random.Generator,
    grid_fn: GridFn,
    classes: Sequence[VoiceClass],
    chunk_duration: float = 2.0,
) -> Chunk:
    """Draw a uniformly random fixed-length window and its frame labels."""
    rate = recording.waveform.rate
    n = int(round(chunk_duration * rate))
    total = len(recording.waveform)
    if total < n:
        raise ValueError(f"{recording.uri}: recording shorter than chunk ({total} < {n} samples)")
    start = int(rng.integers(0, total - n + 1))
    onset = start / rate
    samples = recording.waveform.samples[start:start + n]
    labels = encode_frames(recording.reference, grid_fn(onset), classes)
    return Chunk(Waveform(samples, rate), labels, recording.uri, onset)


class ChunkSampler:
    """Reproducible stream of training chunks.

    Chunks are dealt round-robin from ``workers`` independent generators seeded
    ``seed + worker_id``, so the chunk multiset of an epoch only depends on
    ``(seed, workers)``.
    """

    def __init__(
        self,
        recordings: Sequence[Recording],
        grid_fn: GridFn,
        classes: Sequence[VoiceClass],
        chunk_duration: float = 2.0,
        seed: int = 0,
        workers: int = 1,
        noise: "NoiseCorpus | None" = None,
        augment_prob: float = 1.0,
        snr_range: tuple[float, float] = (5.0, 20.0),
    ):
        n = int(round(chunk_duration * SAMPLE_RATE))
        self.recordings = []
        for r in recordings:
            if len(r.waveform) < n:
                logger.warning("skipping %s: shorter than %.2fs chunk", r.uri, chunk_duration)
            else:
                self.recordings.append(r)
        if not self.recordings:
            raise ValueError("no recording long enough to sample chunks from")
        self.grid_fn = grid_fn
        self.classes = tuple(classes)
        self.chunk_duration = chunk_duration
        self.noise = noise
        self.augment_prob = augment_prob
        self.snr_range = snr_range
        self.rngs = [np.random.default_rng(seed + w) for w in range(workers)]
        # separate streams so switching augmentation on does not move the chunks
        self.noise_rngs = [np.random.default_rng([seed + w, 1]) for w in range(workers)]
        self._count = 0

    def __next__(self) -> Chunk:
        worker = self._count % len(self.rngs)
        rng = self.rngs[worker]
        self._count += 1
        recording = self.recordings[int(rng.integers(len(self.recordings)))]
        chunk = sample_chunk(recording, rng, self.grid_fn, self.classes, self.chunk_duration)
        if self.noise is not None:
            noise_rng = self.noise_rngs[worker]
            if noise_rng.random() < self.augment_prob:
                snr = noise_rng.uniform(*self.snr_range)
                chunk = augment_additive(chunk, self.noise.draw(noise_rng, len(chunk.waveform)), snr)
        return chunk

    def __iter__(self):
        return self

    def batch(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        chunks = [next(self) for _ in range(size)]
        x = np.stack([c.waveform.samples for c in chunks]).astype(np.float32)
        y = np.stack([c.labels.values for c in chunks]).astype(np.float32)
        return x, y

    def state(self) -> list[dict]:
        return [r.bit_generator.state for r in self.rngs + self.noise_rngs]


# ---------------------------------------------------------------------------
# augmentation


class NoiseCorpus:
    def __init__(self, waveforms: Sequence[Waveform]):
        if not waveforms:
            raise ValueError("noise corpus is empty")
        self.waveforms = list(waveforms)

    @classmethod
    def from_directory(cls, directory: str | Path, rate: int = SAMPLE_RATE) -> "NoiseCorpus":
        paths = sorted(Path(directory).rglob("*.wav"))
        if not paths:
            raise ValueError(f"no .wav files under {directory}")
        return cls([load_audio(p, rate) for p in paths])

    def draw(self, rng: np.random.Generator, length: int) -> Waveform:
        """Random noise excerpt of ``length`` samples (looped when the source is shorter)."""
        w = self.waveforms[int(rng.integers(len(self.waveforms)))]
        samples = w.samples
        if len(samples) < length:
            samples = np.tile(samples, int(np.ceil(length / len(samples))))
        offset = int(rng.integers(0, len(samples) - length + 1))
        return Waveform(samples[offset:offset + length], w.rate)


def noise_gain(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Scale applied to ``noise`` so that mean-square(signal) / mean-square(scaled noise) = snr_db."""
    p_signal = float(np.mean(np.square(signal)))
    p_noise = float(np.mean(np.square(noise)))
    if p_signal == 0.0 or p_noise == 0.0:
        return 0.0
    return float(np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0))))


def augment_additive(chunk: Chunk, noise: Waveform, snr_db: float) -> Chunk:
    signal = chunk.waveform.samples
    n = len(signal)
    samples = noise.samples
    if len(samples) < n:
        samples = np.tile(samples, int(np.ceil(n / len(samples))))
    samples = samples[:n]
    alpha = noise_gain(signal, samples, snr_db)
    if alpha == 0.0:
        return chunk
    mixed = signal + alpha * samples
    return Chunk(Waveform(mixed, chunk.waveform.rate), chunk.labels, chunk.source_uri, chunk.source_onset)
