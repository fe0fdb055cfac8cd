"""Binary cross-entropy training with a triangular cyclical learning rate."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .annotations import OUTPUT_CLASSES, VoiceClass, as_class
from .audio import ChunkSampler, ManifestEntry, NoiseCorpus, Recording, select_split
from .model import Checkpoint, ModelConfig, VoiceTypeClassifier

logger = logging.getLogger(__name__)

PRED_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    epoch_duration: float = 240.0  # hours of sampled audio per epoch
    batch_size: int = 32
    base_lr: float = 1e-4
    max_lr: float = 1e-2
    cycle_epochs: float = 1.5
    momentum: float = 0.9
    optimizer: str = "sgd"
    mode: str = "multitask"  # or "binary:<CLASS>"
    seed: int = 0
    augmentation: bool = False
    augment_prob: float = 1.0
    snr_range: tuple[float, float] = (5.0, 20.0)
    noise_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "snr_range", tuple(float(v) for v in self.snr_range))
        if not 0 < self.base_lr < self.max_lr:
            raise ValueError("need 0 < base_lr < max_lr")
        if self.epoch_duration <= 0:
            raise ValueError("epoch_duration must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.classes  # validates mode

    @property
    def classes(self) -> tuple[VoiceClass, ...]:
        if self.mode == "multitask":
            return OUTPUT_CLASSES
        kind, _, cls = self.mode.partition(":")
        if kind != "binary" or not cls:
            raise ValueError(f"invalid mode {self.mode!r}; expected 'multitask' or 'binary:CLASS'")
        cls = as_class(cls)
        if cls not in OUTPUT_CLASSES:
            raise ValueError(f"{cls} is not an output class")
        return (cls,)

    def steps_per_epoch(self, chunk_duration: float) -> int:
        return max(1, math.ceil(self.epoch_duration * 3600.0 / (chunk_duration * self.batch_size)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_range"] = list(self.snr_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over every (chunk, frame, class) slot."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(PRED_EPS, 1 - PRED_EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def cyclical_lr(step: int, steps_per_epoch: int, base_lr: float, max_lr: float, cycle: float = 1.5) -> float:
    """Triangular schedule: base -> max over half a cycle, back to base over the other half."""
    if step < 0:
        raise ValueError("step must be >= 0")
    period = cycle * steps_per_epoch
    phase = (step % period) / period
    x = 1.0 - abs(2.0 * phase - 1.0)  # 0 at cycle edges, 1 at mid-cycle
    return base_lr + (max_lr - base_lr) * x


def _make_optimizer(model, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.base_lr)
    return torch.optim.SGD(model.parameters(), lr=config.base_lr, momentum=config.momentum)


def load_recordings(entries: Sequence[ManifestEntry], rate: int = 16000) -> list[Recording]:
    return [Recording.load(e, rate) for e in entries]


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    manifest: Sequence[ManifestEntry] | Sequence[Recording],
    out_dir: str | Path | None = None,
    split: str | None = "train",
) -> list[Checkpoint]:
    """Train for ``train_config.epochs`` epochs and return one checkpoint per epoch.

    ``manifest`` may hold manifest entries (filtered on ``split``) or already
    loaded recordings. When ``out_dir`` is given, checkpoints are written to
    ``out_dir/checkpoints/epoch_XXX.ckpt`` and every step is appended to
    ``out_dir/train_log.jsonl``.
    """
    classes = train_config.classes
    model_config = model_config.with_classes(classes)
    items = list(manifest)
    if items and isinstance(items[0], ManifestEntry):
        items = select_split(items, split)
        if not items:
            raise ValueError(f"manifest has no {split!r} recordings")
        recordings = load_recordings(items, model_config.sample_rate)
    else:
        recordings = items
    if not recordings:
        raise ValueError("no training recordings")
    noise = None
    if train_config.augmentation:
        if not train_config.noise_dir:
            raise ValueError("augmentation enabled but no noise_dir configured")
        noise = NoiseCorpus.from_directory(train_config.noise_dir, model_config.sample_rate)

    sampler = ChunkSampler(
        recordings,
        grid_fn=model_config.frame_grid,
        classes=classes,
        chunk_duration=model_config.chunk_duration,
        seed=train_config.seed,
        workers=train_config.workers,
        noise=noise,
        augment_prob=train_config.augment_prob,
        snr_range=train_config.snr_range,
    )

    torch.manual_seed(train_config.seed)
    model = VoiceTypeClassifier(model_config)
    model.train()
    optimizer = _make_optimizer(model, train_config)
    steps_per_epoch = train_config.steps_per_epoch(model_config.chunk_duration)

    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log = open(out_dir / "train_log.jsonl", "a", encoding="utf-8")

    checkpoints: list[Checkpoint] = []
    epoch_losses: list[float] = []
    step = 0
    try:
        for epoch in range(1, train_config.epochs + 1):
            losses = []
            for _ in range(steps_per_epoch):
                lr = cyclical_lr(step, steps_per_epoch, train_config.base_lr, train_config.max_lr,
                                 train_config.cycle_epochs)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                x, y = sampler.batch(train_config.batch_size)
                loss = bce_loss(model(torch.from_numpy(x)), torch.from_numpy(y))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
                if log is not None:
                    log.write(json.dumps({"epoch": epoch, "step": step, "lr": lr, "loss": losses[-1]}) + "\n")
                step += 1
            epoch_losses.append(float(np.mean(losses)))
            logger.info("epoch %d: mean loss %.5f", epoch, epoch_losses[-1])
            checkpoint = Checkpoint.from_model(
                model,
                epoch,
                train_state={
                    "global_step": step,
                    "steps_per_epoch": steps_per_epoch,
                    "lr": lr,
                    "sampler_rng": sampler.state(),
                    "torch_rng": int(torch.initial_seed()),
                    "train_config": train_config.to_dict(),
                },
                losses=list(epoch_losses),
            )
            if out_dir is not None:
                checkpoint.save(out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt")
            checkpoints.append(checkpoint)
    finally:
        if log is not None:
            log.close()
    return checkpoints


def class_seed(seed: int, cls: VoiceClass | str) -> int:
    """Seed of one binary model, derived from the base seed and the class."""
    index = OUTPUT_CLASSES.index(as_class(cls))
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def train_binary_suite(
    model_config: ModelConfig,
    train_config: TrainConfig,
    manifest: Sequence[ManifestEntry] | Sequence[Recording],
    out_dir: str | Path | None = None,
    split: str | None = "train",
) -> dict[VoiceClass, list[Checkpoint]]:
    """One single-output model per output class, each trained independently."""
    items = list(manifest)
    if items and isinstance(items[0], ManifestEntry):
        items = load_recordings(select_split(items, split), model_config.sample_rate)
    suite = {}
    for cls in OUTPUT_CLASSES:
        config = replace(train_config, mode=f"binary:{cls.value}", seed=class_seed(train_config.seed, cls))
        sub = None if out_dir is None else Path(out_dir) / cls.value
        suite[cls] = train(model_config, config, items, sub)
    return suite
