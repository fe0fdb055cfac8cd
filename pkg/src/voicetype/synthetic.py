"""Synthetic child-centred corpus: band-limited tone bursts per voice class over a noise floor."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .annotations import Annotation, Segment, VoiceClass, write_rttm
from .audio import SAMPLE_RATE, ManifestEntry, Waveform, write_manifest, write_wav

# frequency band (Hz) each synthetic voice draws its partials from
VOICE_BANDS = {
    VoiceClass.MAL: (250.0, 600.0),
    VoiceClass.FEM: (900.0, 1600.0),
    VoiceClass.KCHI: (2200.0, 3500.0),
}


def _turns(rng: np.random.Generator, duration: float, mean_gap: float, min_len: float, max_len: float):
    t = rng.exponential(mean_gap)
    while True:
        length = rng.uniform(min_len, max_len)
        if t + length > duration - 0.05:
            return
        # keep boundaries on a 1 ms grid so references are exactly representable in RTTM
        yield round(t, 3), round(t + length, 3)
        t += length + rng.exponential(mean_gap) + 0.1


def _burst(rng: np.random.Generator, band: tuple[float, float], n: int, rate: int) -> np.ndarray:
    t = np.arange(n) / rate
    freqs = rng.uniform(*band, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    x = sum(np.sin(2 * np.pi * f * t + p) for f, p in zip(freqs, phases)) / 3.0
    ramp = min(int(0.02 * rate), n // 2)
    env = np.ones(n)
    if ramp:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return rng.uniform(0.15, 0.3) * env * x


def synth_recording(
    uri: str,
    rng: np.random.Generator,
    duration: float = 60.0,
    rate: int = SAMPLE_RATE,
    noise_level: float = 0.005,
    mean_gap: float = 2.5,
) -> tuple[Waveform, Annotation]:
    n = int(round(duration * rate))
    x = noise_level * rng.standard_normal(n)
    entries = []
    for cls, band in VOICE_BANDS.items():
        for on, off in _turns(rng, duration, mean_gap, 0.4, 2.5):
            a, b = int(round(on * rate)), int(round(off * rate))
            x[a:b] += _burst(rng, band, b - a, rate)
            entries.append((Segment(on, off), cls))
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return Waveform(x, rate), Annotation(uri, tuple(entries)).normalized()


def synth_noise(rng: np.random.Generator, duration: float = 10.0, rate: int = SAMPLE_RATE) -> Waveform:
    """Brown-ish background noise for augmentation tests."""
    white = rng.standard_normal(int(duration * rate))
    brown = np.cumsum(white)
    brown -= np.linspace(brown[0], brown[-1], len(brown))
    brown /= np.max(np.abs(brown)) + 1e-12
    return Waveform(0.5 * brown + 0.05 * white, rate)


def make_corpus(
    out_dir: str | Path,
    n_recordings: int = 10,
    duration: float = 60.0,
    seed: int = 0,
    split: str | None = "train",
    n_children: int | None = None,
    noise_files: int = 2,
) -> Path:
    """Write audio, RTTMs, a noise directory and ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    n_children = n_children or n_recordings
    entries = []
    for i in range(n_recordings):
        uri = f"synth{i:03d}"
        wav, ref = synth_recording(uri, rng, duration)
        write_wav(out_dir / "audio" / f"{uri}.wav", wav)
        write_rttm(out_dir / "rttm" / f"{uri}.rttm", ref)
        entries.append(
            ManifestEntry(uri, f"audio/{uri}.wav", f"rttm/{uri}.rttm", split=split, child_id=f"child{i % n_children:02d}")
        )
    for i in range(noise_files):
        write_wav(out_dir / "noise" / f"noise{i}.wav", synth_noise(rng))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest
