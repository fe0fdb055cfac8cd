import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from voicetype.annotations import OUTPUT_CLASSES, Annotation, FrameGrid, Segment, VoiceClass, derive_speech, encode_frames
from voicetype.audio import (
    AudioError,
    Chunk,
    ChunkSampler,
    NoiseCorpus,
    Recording,
    Waveform,
    augment_additive,
    load_audio,
    noise_gain,
    read_manifest,
    sample_chunk,
    write_manifest,
)
from voicetype.model import ModelConfig

CONFIG = ModelConfig.desk()


def test_load_identity_rate(tmp_path):
    x = (0.3 * np.sin(np.arange(32000) / 10) * 32767).astype(np.int16)
    wavfile.write(tmp_path / "a.wav", 16000, x)
    w = load_audio(tmp_path / "a.wav")
    assert len(w) == 32000 and w.rate == 16000
    assert np.allclose(w.samples, x / 32768.0)


def test_load_resamples_32k(tmp_path):
    wavfile.write(tmp_path / "a.wav", 32000, np.zeros(32000, np.int16))
    assert len(load_audio(tmp_path / "a.wav")) == 16000


def test_load_resamples_44k1(tmp_path):
    wavfile.write(tmp_path / "a.wav", 44100, np.zeros(44100 * 2, np.int16))
    assert len(load_audio(tmp_path / "a.wav")) == 32000


def test_stereo_antiphase_is_silent(tmp_path):
    x = (np.random.default_rng(0).uniform(-0.5, 0.5, 16000) * 32767).astype(np.int16)
    wavfile.write(tmp_path / "s.wav", 16000, np.stack([x, -x], axis=1))
    assert np.all(load_audio(tmp_path / "s.wav").samples == 0)


def test_float_wav(tmp_path):
    x = np.linspace(-1, 1, 1600, dtype=np.float32)
    wavfile.write(tmp_path / "f.wav", 16000, x)
    assert np.allclose(load_audio(tmp_path / "f.wav").samples, x)


def test_unreadable_audio(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"not a wav file")
    with pytest.raises(AudioError, match="bad.wav"):
        load_audio(tmp_path / "bad.wav")
    with pytest.raises(AudioError):
        load_audio(tmp_path / "missing.wav")


def test_resample_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("VOICETYPE_CACHE", str(tmp_path / "cache"))
    wavfile.write(tmp_path / "a.wav", 8000, (np.ones(8000) * 1000).astype(np.int16))
    first = load_audio(tmp_path / "a.wav")
    assert len(list((tmp_path / "cache").glob("*.npy"))) == 1
    second = load_audio(tmp_path / "a.wav")
    assert np.array_equal(first.samples, second.samples)


def test_manifest_round_trip(tmp_path, small_corpus):
    entries = read_manifest(small_corpus)
    assert len(entries) == 4
    assert all(e.split == "train" and e.child_id for e in entries)
    write_manifest(tmp_path / "m.jsonl", entries)
    again = read_manifest(tmp_path / "m.jsonl")
    assert [e.audio for e in again] == [e.audio for e in entries]


# --- chunk sampling --------------------------------------------------------------

def _recording(duration=20.0, entries=()):
    n = int(duration * 16000)
    w = Waveform(np.random.default_rng(0).standard_normal(n) * 0.1)
    return Recording("r", w, derive_speech(Annotation("r", tuple(entries))).normalized())


def test_exact_length_recording_onset_zero():
    rec = _recording(2.0)
    for seed in range(5):
        c = sample_chunk(rec, np.random.default_rng(seed), CONFIG.frame_grid, OUTPUT_CLASSES)
        assert c.source_onset == 0.0
        assert len(c.waveform) == 32000


def test_sample_chunk_deterministic():
    rec = _recording()
    a = sample_chunk(rec, np.random.default_rng(7), CONFIG.frame_grid, OUTPUT_CLASSES)
    b = sample_chunk(rec, np.random.default_rng(7), CONFIG.frame_grid, OUTPUT_CLASSES)
    assert a.source_onset == b.source_onset
    assert np.array_equal(a.waveform.samples, b.waveform.samples)


def test_sample_chunk_onset_uniform():
    rec = _recording(20.0)
    rng = np.random.default_rng(42)
    grid_fn = lambda onset: FrameGrid(onset, 1.0, 1)  # cheap labels, only onsets matter here
    onsets = np.array([sample_chunk(rec, rng, grid_fn, [VoiceClass.KCHI]).source_onset for _ in range(10_000)])
    assert onsets.min() >= 0 and onsets.max() <= 18.0
    bins = 18
    counts, _ = np.histogram(onsets, bins=bins, range=(0, 18.0))
    expected = len(onsets) / bins
    sigma = np.sqrt(len(onsets) * (1 / bins) * (1 - 1 / bins))
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


def test_sample_chunk_too_short():
    with pytest.raises(ValueError):
        sample_chunk(_recording(1.0), np.random.default_rng(0), CONFIG.frame_grid, OUTPUT_CLASSES)


def test_sampler_skips_short_recordings(caplog):
    short, ok = _recording(1.0), _recording(5.0)
    sampler = ChunkSampler([short, ok], CONFIG.frame_grid, OUTPUT_CLASSES)
    assert sampler.recordings == [ok]
    assert "skipping" in caplog.text
    with pytest.raises(ValueError):
        ChunkSampler([short], CONFIG.frame_grid, OUTPUT_CLASSES)


def test_chunk_labels_match_encode_of_cropped_reference():
    entries = [(Segment(1.0, 4.5), VoiceClass.KCHI), (Segment(3.0, 9.0), VoiceClass.FEM),
               (Segment(8.2, 8.9), VoiceClass.UNK), (Segment(12.0, 15.0), VoiceClass.MAL)]
    rec = _recording(20.0, entries)
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = sample_chunk(rec, rng, CONFIG.frame_grid, OUTPUT_CLASSES)
        cropped = rec.reference.crop(c.source_onset, c.source_onset + 2.0, shift=True)
        expected = encode_frames(cropped, CONFIG.frame_grid(0.0), OUTPUT_CLASSES)
        mismatch = np.flatnonzero((expected.values != c.labels.values).any(axis=1))
        # shifting by the onset may move a midpoint across a boundary by float rounding only
        for i in mismatch:
            mid = c.labels.grid.middles()[i]
            bounds = [x for s, _ in rec.reference.entries for x in (s.onset, s.offset)]
            assert min(abs(mid - b) for b in bounds) < 1e-9


def test_sampler_reproducible_per_seed_and_workers():
    rec = _recording(10.0)
    a = ChunkSampler([rec], CONFIG.frame_grid, OUTPUT_CLASSES, seed=5, workers=3)
    b = ChunkSampler([rec], CONFIG.frame_grid, OUTPUT_CLASSES, seed=5, workers=3)
    xa, ya = a.batch(8)
    xb, yb = b.batch(8)
    assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    c = ChunkSampler([rec], CONFIG.frame_grid, OUTPUT_CLASSES, seed=5, workers=1)
    assert not np.array_equal(c.batch(8)[0], xa)


# --- augmentation ------------------------------------------------------------------

def _chunk(samples):
    grid = FrameGrid(0.0, 0.1, 3)
    labels = encode_frames(Annotation("c", ((Segment(0, 0.1), VoiceClass.KCHI),)), grid, [VoiceClass.KCHI])
    return Chunk(Waveform(np.asarray(samples, float)), labels, "c", 0.0)


def test_huge_snr_leaves_signal_unchanged():
    rng = np.random.default_rng(0)
    chunk = _chunk(rng.uniform(-0.5, 0.5, 32000))
    out = augment_additive(chunk, Waveform(rng.uniform(-0.5, 0.5, 32000)), 200.0)
    assert np.max(np.abs(out.waveform.samples - chunk.waveform.samples)) < 1e-5


def test_equal_power_zero_db_gain_is_one():
    t = np.arange(32000)
    signal = np.sin(2 * np.pi * 440 * t / 16000)
    noise = np.cos(2 * np.pi * 440 * t / 16000)  # same mean square over whole periods
    assert noise_gain(signal, noise, 0.0) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(5, 20), st.integers(0, 2**32 - 1))
def test_measured_snr_matches_target(snr, seed):
    rng = np.random.default_rng(seed)
    chunk = _chunk(rng.uniform(-0.3, 0.3, 32000))
    noise = Waveform(rng.standard_normal(40000))
    out = augment_additive(chunk, noise, snr)
    added = out.waveform.samples - chunk.waveform.samples
    measured = 10 * np.log10(np.mean(chunk.waveform.samples ** 2) / np.mean(added ** 2))
    assert measured == pytest.approx(snr, abs=1e-6)
    assert out.labels is chunk.labels


def test_silent_chunk_skips_noise():
    chunk = _chunk(np.zeros(32000))
    assert augment_additive(chunk, Waveform(np.ones(32000)), 10.0) is chunk


def test_short_noise_is_looped():
    chunk = _chunk(np.random.default_rng(0).uniform(-1, 1, 32000))
    out = augment_additive(chunk, Waveform(np.random.default_rng(1).standard_normal(5000)), 10.0)
    assert len(out.waveform) == 32000


def test_noise_corpus(small_corpus):
    corpus = NoiseCorpus.from_directory(small_corpus.parent / "noise")
    w = corpus.draw(np.random.default_rng(0), 32000)
    assert len(w) == 32000
    with pytest.raises(ValueError):
        NoiseCorpus([])


def test_sampler_with_augmentation_keeps_labels(small_corpus):
    entries = read_manifest(small_corpus)
    recs = [Recording.load(e) for e in entries]
    noise = NoiseCorpus.from_directory(small_corpus.parent / "noise")
    clean = ChunkSampler(recs, CONFIG.frame_grid, OUTPUT_CLASSES, seed=1)
    noisy = ChunkSampler(recs, CONFIG.frame_grid, OUTPUT_CLASSES, seed=1, noise=noise)
    for _ in range(5):
        a, b = next(clean), next(noisy)
        assert a.source_onset == b.source_onset
        assert np.array_equal(a.labels.values, b.labels.values)
        assert not np.array_equal(a.waveform.samples, b.waveform.samples)
