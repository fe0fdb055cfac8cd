import json
import math

import numpy as np
import pytest
import torch

from voicetype.annotations import OUTPUT_CLASSES, VoiceClass
from voicetype.audio import ChunkSampler, read_manifest
from voicetype.model import Checkpoint, ModelConfig
from voicetype.training import (
    TrainConfig,
    bce_loss,
    class_seed,
    cyclical_lr,
    load_recordings,
    train,
    train_binary_suite,
)

DESK = ModelConfig.desk()


def tiny(steps=4, batch=4, **kw):
    """Train config with exactly ``steps`` steps per epoch."""
    hours = steps * batch * DESK.chunk_duration / 3600
    kw.setdefault("base_lr", 1e-3)
    kw.setdefault("max_lr", 1e-1)
    return TrainConfig(epoch_duration=hours, batch_size=batch, **kw)


# --- loss --------------------------------------------------------------------------

def test_bce_closed_forms():
    half = torch.full((1, 4, 5), 0.5)
    assert bce_loss(half, torch.ones_like(half)).item() == pytest.approx(math.log(2), abs=1e-6)
    q = torch.full((1, 4, 5), 0.25)
    assert bce_loss(q, torch.ones_like(q)).item() == pytest.approx(-math.log(0.25), abs=1e-6)
    assert bce_loss(q, torch.zeros_like(q)).item() == pytest.approx(-math.log(0.75), abs=1e-6)


def test_bce_logit_gradient():
    # for sigmoid outputs, d loss / d logit = (yhat - y) / (number of slots)
    torch.manual_seed(0)
    z = torch.randn(2, 7, 5, dtype=torch.float64, requires_grad=True)
    y = (torch.rand(2, 7, 5, dtype=torch.float64) > 0.5).double()
    bce_loss(torch.sigmoid(z), y).backward()
    expected = (torch.sigmoid(z) - y) / z.numel()
    assert torch.allclose(z.grad, expected, atol=1e-12)
    # and a central difference on one slot
    h = 1e-6
    with torch.no_grad():
        zp, zm = z.clone(), z.clone()
        zp[0, 3, 2] += h
        zm[0, 3, 2] -= h
        numeric = (bce_loss(torch.sigmoid(zp), y) - bce_loss(torch.sigmoid(zm), y)) / (2 * h)
    assert numeric.item() == pytest.approx(z.grad[0, 3, 2].item(), abs=1e-4)


def test_bce_permutation_invariant():
    torch.manual_seed(1)
    p = torch.rand(3, 10, 5)
    y = (torch.rand(3, 10, 5) > 0.5).float()
    perm = torch.randperm(10)
    assert bce_loss(p[:, perm], y[:, perm]).item() == pytest.approx(bce_loss(p, y).item(), rel=1e-6)
    classes = torch.randperm(5)
    assert bce_loss(p[..., classes], y[..., classes]).item() == pytest.approx(bce_loss(p, y).item(), rel=1e-6)
    batch = torch.randperm(3)
    assert bce_loss(p[batch], y[batch]).item() == pytest.approx(bce_loss(p, y).item(), rel=1e-6)


def test_bce_prefers_correct_predictions():
    y = (torch.rand(2, 10, 5) > 0.5).float()
    good = y * 0.9 + (1 - y) * 0.1
    assert bce_loss(good, y) < bce_loss(1 - good, y)


def test_bce_saturated_predictions_are_finite():
    y = torch.tensor([[[1.0, 0.0]]])
    assert torch.isfinite(bce_loss(torch.tensor([[[0.0, 1.0]]]), y))


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(1, 3, 5), torch.zeros(1, 3, 4))


# --- learning-rate schedule -------------------------------------------------------

def test_cyclical_lr_landmarks():
    spe = 100
    assert cyclical_lr(0, spe, 1e-4, 1e-2) == pytest.approx(1e-4)
    assert cyclical_lr(75, spe, 1e-4, 1e-2) == pytest.approx(1e-2)
    assert cyclical_lr(150, spe, 1e-4, 1e-2) == pytest.approx(1e-4)


def test_cyclical_lr_periodic_and_bounded():
    spe = 40
    for step in range(0, 300):
        lr = cyclical_lr(step, spe, 1e-4, 1e-2)
        assert 1e-4 - 1e-15 <= lr <= 1e-2 + 1e-15
        assert lr == pytest.approx(cyclical_lr(step + 60, spe, 1e-4, 1e-2), rel=1e-9)


def test_cyclical_lr_rejects_negative_step():
    with pytest.raises(ValueError):
        cyclical_lr(-1, 10, 1e-4, 1e-2)


# --- config -------------------------------------------------------------------------

def test_steps_per_epoch_from_hours():
    cfg = TrainConfig()
    assert cfg.steps_per_epoch(2.0) == math.ceil(240 * 3600 / (2.0 * 32))
    assert tiny(steps=7).steps_per_epoch(2.0) == 7


@pytest.mark.parametrize("kw", [
    {"base_lr": 1e-2, "max_lr": 1e-4},
    {"epochs": 0},
    {"optimizer": "rmsprop"},
    {"mode": "binary:UNK"},
    {"mode": "single"},
])
def test_invalid_train_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_dict_round_trip():
    cfg = TrainConfig(mode="binary:FEM", augmentation=True, noise_dir="/n", snr_range=(0, 10))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1})


# --- training loop --------------------------------------------------------------------

@pytest.fixture(scope="module")
def recordings(small_corpus):
    return load_recordings(read_manifest(small_corpus))


def test_train_is_deterministic(recordings, tmp_path):
    cfg = tiny(steps=3, epochs=2, seed=11)
    a = train(DESK, cfg, recordings, tmp_path / "a")
    b = train(DESK, cfg, recordings, tmp_path / "b")
    assert [c.losses for c in a] == [c.losses for c in b]
    for ca, cb in zip(a, b):
        assert all(torch.equal(ca.state_dict[k], cb.state_dict[k]) for k in ca.state_dict)
    for name in ("epoch_001.ckpt", "epoch_002.ckpt"):
        assert (tmp_path / "a/checkpoints" / name).read_bytes() == (tmp_path / "b/checkpoints" / name).read_bytes()
    log = [json.loads(line) for line in (tmp_path / "a/train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(6))
    assert log[0]["lr"] == pytest.approx(cfg.base_lr)


def test_different_seed_changes_weights(recordings):
    a = train(DESK, tiny(steps=2, epochs=1, seed=0), recordings)[0]
    b = train(DESK, tiny(steps=2, epochs=1, seed=1), recordings)[0]
    assert not torch.equal(a.state_dict["convs.0.weight"], b.state_dict["convs.0.weight"])


def test_loss_decreases_on_toy_set(recordings):
    checkpoints = train(DESK, tiny(steps=12, batch=8, epochs=3, seed=0), recordings[:1])
    losses = checkpoints[-1].losses
    assert len(losses) == 3
    decreases = sum(b < a for a, b in zip(losses, losses[1:]))
    assert decreases >= 1 and losses[-1] < losses[0]


def test_binary_mode_has_single_output(recordings):
    (ck,) = train(DESK, tiny(steps=1, epochs=1, mode="binary:FEM"), recordings)
    assert ck.config.classes == (VoiceClass.FEM,)
    model = ck.build()
    assert model(torch.zeros(1, 32000)).shape == (1, DESK.frames_per_chunk, 1)


def test_binary_targets_project_multitask_targets(recordings):
    multi = ChunkSampler(recordings, DESK.frame_grid, OUTPUT_CLASSES, seed=2)
    fem = ChunkSampler(recordings, DESK.frame_grid, [VoiceClass.FEM], seed=2)
    _, y_multi = multi.batch(6)
    _, y_fem = fem.batch(6)
    assert np.array_equal(y_fem[..., 0], y_multi[..., OUTPUT_CLASSES.index(VoiceClass.FEM)])
    assert y_fem[..., 0].any()


def test_binary_suite(recordings, tmp_path):
    suite = train_binary_suite(DESK, tiny(steps=1, epochs=2), recordings, tmp_path)
    assert list(suite) == [VoiceClass.KCHI, VoiceClass.OCH, VoiceClass.MAL, VoiceClass.FEM, VoiceClass.SPEECH]
    assert sum(len(v) for v in suite.values()) == 5 * 2
    assert len(list(tmp_path.glob("*/checkpoints/*.ckpt"))) == 10
    fem = Checkpoint.load(tmp_path / "FEM/checkpoints/epoch_002.ckpt")
    assert fem.config.classes == (VoiceClass.FEM,)
    assert len({class_seed(0, c) for c in suite}) == 5


def test_augmentation_requires_noise_dir(recordings):
    with pytest.raises(ValueError, match="noise"):
        train(DESK, tiny(steps=1, epochs=1, augmentation=True), recordings)


def test_augmented_training_runs(recordings, small_corpus):
    cfg = tiny(steps=1, epochs=1, augmentation=True, noise_dir=str(small_corpus.parent / "noise"))
    (ck,) = train(DESK, cfg, recordings)
    assert np.isfinite(ck.losses[0])


def test_empty_manifest_errors(small_corpus):
    with pytest.raises(ValueError):
        train(DESK, tiny(), [])
    with pytest.raises(ValueError, match="dev"):
        train(DESK, tiny(), read_manifest(small_corpus), split="dev")
