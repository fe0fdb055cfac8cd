"""Sinc-filterbank front-end followed by a bidirectional LSTM stack and a sigmoid head."""

from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .annotations import OUTPUT_CLASSES, FrameGrid, VoiceClass, as_class

CHECKPOINT_FORMAT = "voicetype-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# sinc filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class SincFilterbankParams:
    low_hz: np.ndarray
    band_hz: np.ndarray
    length: int = 251

    @property
    def count(self) -> int:
        return len(self.low_hz)

    @property
    def high_hz(self) -> np.ndarray:
        return np.abs(self.low_hz) + np.abs(self.band_hz)


def init_filters_mel(count: int, rate: int = 16000, length: int = 251,
                     min_hz: float = 30.0, margin_hz: float = 100.0) -> SincFilterbankParams:
    """Contiguous bands whose edges are equally spaced on the mel scale."""
    if count < 1:
        raise ValueError("need at least one filter")
    edges = mel_to_hz(np.linspace(hz_to_mel(min_hz), hz_to_mel(rate / 2 - margin_hz), count + 1))
    return SincFilterbankParams(edges[:-1].copy(), np.diff(edges), length)


def sinc_kernels(low: torch.Tensor, high: torch.Tensor, length: int, rate: float) -> torch.Tensor:
    """Hamming-windowed band-pass kernels, one row per (low, high) pair in Hz.

    Each kernel is the difference of two ideal low-pass responses; frequencies
    are normalised by ``rate`` so the pass band has unit gain.
    """
    if length % 2 == 0:
        raise ValueError("sinc filter length must be odd")
    low = torch.as_tensor(low)
    dtype = low.dtype if low.is_floating_point() else torch.float64
    low = low.to(dtype).reshape(-1, 1) / rate
    high = torch.as_tensor(high).to(dtype).reshape(-1, 1) / rate
    t = torch.arange(length, dtype=dtype) - (length - 1) / 2
    window = torch.hamming_window(length, periodic=False, dtype=dtype)
    band = 2 * high * torch.sinc(2 * high * t) - 2 * low * torch.sinc(2 * low * t)
    kernel = band * window
    # exact linear phase: average with the time reversal to cancel rounding asymmetry
    return (kernel + kernel.flip(-1)) / 2


def sinc_kernel(f1: float, f2: float, length: int = 251, rate: float = 16000):
    """Single band-pass kernel between ``f1`` and ``f2`` Hz (``f2`` clipped to Nyquist)."""
    f2 = min(float(f2), rate / 2)
    f1 = min(float(f1), f2)
    if f1 < 0:
        raise ValueError("cutoff frequencies must be non-negative")
    k = sinc_kernels(torch.tensor([f1], dtype=torch.float64), torch.tensor([f2], dtype=torch.float64), length, rate)
    return k[0].numpy()


class SincConv(nn.Module):
    """Learnable band-pass filterbank parameterised by low cutoff and bandwidth (Hz)."""

    def __init__(self, count: int = 256, length: int = 251, stride: int = 10, rate: int = 16000):
        super().__init__()
        params = init_filters_mel(count, rate, length)
        self.length = length
        self.stride = stride
        self.rate = rate
        self.low_hz = nn.Parameter(torch.tensor(params.low_hz, dtype=torch.float32))
        self.band_hz = nn.Parameter(torch.tensor(params.band_hz, dtype=torch.float32))

    def cutoffs(self) -> tuple[torch.Tensor, torch.Tensor]:
        nyquist = self.rate / 2
        low = torch.clamp(torch.abs(self.low_hz), max=nyquist)
        high = torch.clamp(low + torch.abs(self.band_hz), max=nyquist)
        return low, high

    def kernels(self) -> torch.Tensor:
        low, high = self.cutoffs()
        return sinc_kernels(low, high, self.length, self.rate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (batch, 1, samples)
        return F.conv1d(x, self.kernels().unsqueeze(1), stride=self.stride)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    sample_rate: int = 16000
    chunk_duration: float = 2.0
    sinc_filters: int = 256
    sinc_length: int = 251
    sinc_stride: int = 10
    sinc_pool: int = 3
    conv_channels: tuple[int, ...] = (60, 60)
    conv_length: int = 5
    conv_pool: int = 3
    layer_norm: bool = True
    rnn_layers: int = 3
    rnn_hidden: int = 128
    bidirectional: bool = True
    ff_layers: int = 2
    ff_hidden: int = 128
    classes: tuple[str, ...] = tuple(c.value for c in OUTPUT_CLASSES)

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "classes", tuple(as_class(c).value for c in self.classes))
        if self.sinc_length % 2 == 0:
            raise ValueError("sinc_length must be odd")
        if VoiceClass.UNK.value in self.classes:
            raise ValueError("UNK is never a model output")
        if not self.classes:
            raise ValueError("at least one output class required")

    @property
    def chunk_samples(self) -> int:
        return int(round(self.chunk_duration * self.sample_rate))

    @property
    def output_classes(self) -> tuple[VoiceClass, ...]:
        return tuple(VoiceClass(c) for c in self.classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def with_classes(self, classes: Sequence[VoiceClass | str]) -> "ModelConfig":
        return replace(self, classes=tuple(as_class(c).value for c in classes))

    # presets -------------------------------------------------------------

    @classmethod
    def figure_variant(cls) -> "ModelConfig":
        """Two recurrent layers and three feed-forward layers."""
        return cls(rnn_layers=2, ff_layers=3)

    @classmethod
    def sincnet_original(cls) -> "ModelConfig":
        """80 filters, as in the original SincNet configuration."""
        return cls(sinc_filters=80)

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Small trunk used for laptop-scale experiments and tests."""
        return cls(sinc_filters=32, conv_channels=(32, 32), rnn_layers=1, rnn_hidden=32, ff_layers=1, ff_hidden=32)

    # geometry ------------------------------------------------------------

    def layer_geometry(self) -> list[tuple[int, int]]:
        """(kernel, stride) of every time-reducing layer in order."""
        layers = [(self.sinc_length, self.sinc_stride), (self.sinc_pool, self.sinc_pool)]
        for _ in self.conv_channels:
            layers += [(self.conv_length, 1), (self.conv_pool, self.conv_pool)]
        return layers

    @property
    def frames_per_chunk(self) -> int:
        n = self.chunk_samples
        for kernel, stride in self.layer_geometry():
            n = (n - kernel) // stride + 1
        return n

    @property
    def frame_stride(self) -> int:
        """Input samples between consecutive output frames."""
        return int(np.prod([s for _, s in self.layer_geometry()]))

    @property
    def frame_center(self) -> float:
        """Input sample index at the centre of the first output frame's receptive field."""
        center = 0.0
        for kernel, stride in reversed(self.layer_geometry()):
            center = stride * center + (kernel - 1) / 2
        return center

    def frame_grid(self, onset: float = 0.0, count: int | None = None) -> FrameGrid:
        step = self.frame_stride / self.sample_rate
        start = onset + (self.frame_center - self.frame_stride / 2) / self.sample_rate
        return FrameGrid(start, step, self.frames_per_chunk if count is None else count)


# ---------------------------------------------------------------------------
# network


class _ChannelNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):  # (batch, channels, time)
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class VoiceTypeClassifier(nn.Module):
    """Raw waveform chunk -> per-frame sigmoid scores, shape (batch, frames, classes)."""

    score_eps = 1e-7

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.sinc = SincConv(config.sinc_filters, config.sinc_length, config.sinc_stride, config.sample_rate)
        norm = (lambda c: _ChannelNorm(c)) if config.layer_norm else (lambda c: nn.Identity())
        self.sinc_norm = norm(config.sinc_filters)
        self.convs = nn.ModuleList()
        self.conv_norms = nn.ModuleList()
        channels = config.sinc_filters
        for out in config.conv_channels:
            self.convs.append(nn.Conv1d(channels, out, config.conv_length))
            self.conv_norms.append(norm(out))
            channels = out
        self.rnn = nn.LSTM(channels, config.rnn_hidden, num_layers=config.rnn_layers,
                           bidirectional=config.bidirectional, batch_first=True)
        width = config.rnn_hidden * (2 if config.bidirectional else 1)
        ff = []
        for _ in range(config.ff_layers):
            ff += [nn.Linear(width, config.ff_hidden), nn.Tanh()]
            width = config.ff_hidden
        self.ff = nn.Sequential(*ff)
        self.head = nn.Linear(width, len(config.classes))

    @property
    def classes(self) -> tuple[VoiceClass, ...]:
        return self.config.output_classes

    @staticmethod
    def prenormalize(x: torch.Tensor) -> torch.Tensor:
        """Per-chunk mean removal and scaling to unit peak amplitude."""
        x = x - x.mean(dim=-1, keepdim=True)
        peak = x.abs().amax(dim=-1, keepdim=True)
        return x / torch.clamp(peak, min=1e-8)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Front-end output, (batch, time, channels)."""
        c = self.config
        h = self.sinc(self.prenormalize(x).unsqueeze(1))
        h = F.leaky_relu(self.sinc_norm(F.max_pool1d(torch.abs(h), c.sinc_pool)))
        for conv, norm in zip(self.convs, self.conv_norms):
            h = F.leaky_relu(norm(F.max_pool1d(conv(h), c.conv_pool)))
        return h.transpose(1, 2)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2 or x.shape[-1] != self.config.chunk_samples:
            raise ValueError(
                f"expected input of shape (batch, {self.config.chunk_samples}), got {tuple(x.shape)}"
            )
        h, _ = self.rnn(self.features(x))
        return self.head(self.ff(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x)).clamp(self.score_eps, 1 - self.score_eps)


# ---------------------------------------------------------------------------
# score tracks


@dataclass(frozen=True)
class ScoreTrack:
    grid: FrameGrid
    classes: tuple[VoiceClass, ...]
    values: np.ndarray  # (count, K) float

    def column(self, cls: VoiceClass | str) -> np.ndarray:
        return self.values[:, self.classes.index(as_class(cls))]

    def select(self, classes: Sequence[VoiceClass | str]) -> "ScoreTrack":
        classes = tuple(as_class(c) for c in classes)
        idx = [self.classes.index(c) for c in classes]
        return ScoreTrack(self.grid, classes, self.values[:, idx])


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    epoch: int
    config: ModelConfig
    state_dict: dict[str, torch.Tensor]
    train_state: dict[str, Any] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)

    def build(self) -> VoiceTypeClassifier:
        model = VoiceTypeClassifier(self.config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    @classmethod
    def from_model(cls, model: VoiceTypeClassifier, epoch: int, **kwargs) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(epoch, model.config, state, **kwargs)

    def to_bytes(self) -> bytes:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "config": json.dumps(self.config.to_dict(), sort_keys=True),
            "train_state": json.dumps(self.train_state, sort_keys=True),
            "losses": list(self.losses),
            "parameters": self.state_dict,
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        """Atomic write (temp file + rename)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a voicetype checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        return cls(
            epoch=int(payload["epoch"]),
            config=ModelConfig.from_dict(json.loads(payload["config"])),
            state_dict=payload["parameters"],
            train_state=json.loads(payload["train_state"]),
            losses=list(payload["losses"]),
        )
