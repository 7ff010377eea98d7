import json
import math

import numpy as np
import pytest

from crcnn import synthetic as S
from crcnn import training as TR
from crcnn.checkpoint import load_checkpoint
from crcnn.dataset import open_video
from crcnn.errors import DataError, DivergenceError
from crcnn.imageio import write_image
from crcnn.tensor import AdamState

SMALL = dict(width=4, depth=1, patch_size=8, max_epochs=3, batch_size=16, background_frames=10)


def _scene(tmp_path, frames=14, seed=0):
    cfg = S.SceneConfig(16, 16, frames, seed=seed,
                        objects=[S.SceneObject("rect", 4, (2, 3), (1, 2))])
    root = tmp_path / "video"
    S.write_cd2014_layout(S.generate(cfg), root, cfg, ext="pgm")
    return root


def test_config_defaults_and_validation():
    c = TR.TrainConfig()
    assert (c.learning_rate, c.plateau_factor, c.plateau_patience, c.max_epochs) == (1e-3, 0.1, 3, 50)
    assert (c.batch_size, c.train_fraction, c.threshold, c.background_frames) == (128, 0.8, 0.8, 100)
    for bad in ({"learning_rate": 0}, {"plateau_factor": 1.0}, {"train_fraction": 1.0},
                {"threshold": 0.0}, {"batch_size": -1}):
        with pytest.raises(ValueError):
            TR.TrainConfig(**bad)
    with pytest.raises(ValueError):
        TR.TrainConfig.from_mapping({"learning_rat": 1})
    assert TR.TrainConfig.from_mapping({"seed": 4}).seed == 4


def test_plateau_schedule_decays_then_stops():
    sched = TR.PlateauSchedule(0.1, 3, 1e-5, 1e-6)
    state = AdamState(learning_rate=1e-3)
    events, stop_at = [], None
    losses = [1.0, 0.5] + [0.5] * 40
    for epoch, loss in enumerate(losses, start=1):
        event, stop = sched.step(loss, state)
        if event:
            events.append((epoch, event["old"], event["new"]))
        if stop:
            stop_at = epoch
            break
    # a stall every 3 epochs multiplies the rate by 0.1; the first stall below
    # 1e-6 (epoch 17) still decays, the second one (epoch 20) stops
    assert [e[0] for e in events] == [5, 8, 11, 14, 17]
    for _, old, new in events:
        assert new == old * 0.1
    assert stop_at == 20


def test_plateau_ignores_tiny_improvements():
    sched = TR.PlateauSchedule(0.1, 2, 1e-3, 1e-6)
    state = AdamState(learning_rate=1.0)
    sched.step(1.0, state)
    sched.step(0.9995, state)
    event, _ = sched.step(0.9991, state)
    assert event == {"old": 1.0, "new": 0.1}


def test_bcnn_training_reduces_loss_and_follows_protocol():
    rng = np.random.default_rng(0)
    bg = rng.uniform(0.2, 0.8, (16, 16)).astype(np.float32)
    frames = [np.clip(bg * 255 + rng.normal(0, 3, bg.shape), 0, 255).astype(np.uint8)
              for _ in range(6)]
    cfg = TR.TrainConfig(**{**SMALL, "max_epochs": 6})
    net, state, report, mean = TR.train_bcnn(frames, bg, cfg)
    assert report.val_losses[-1] < report.val_losses[0]
    assert report.epochs_run == len(report.train_losses) == 6
    n = 6 * 9
    assert report.n_train == math.ceil(0.8 * n) and report.n_train + report.n_val == n
    assert report.batch_sizes[:-1] == [16] * (len(report.batch_sizes) - 1)
    assert sum(report.batch_sizes) == report.n_train
    assert state.step == 6 * len(report.batch_sizes)
    assert mean == pytest.approx(np.mean(frames) / 255)


def test_scnn_training_keeps_bcnn_frozen(tmp_path):
    rng = np.random.default_rng(1)
    frames = [rng.integers(0, 256, (16, 16), dtype=np.uint8) for _ in range(3)]
    masks = [np.where(rng.uniform(size=(16, 16)) > 0.8, 255, 0).astype(np.uint8) for _ in range(3)]
    cfg = TR.TrainConfig(**SMALL)
    bcnn = TR.build_bcnn(0, width=4, depth=1)
    before = {k: v.copy() for k, v in bcnn.state_arrays().items()}
    scnn, _, report = TR.train_scnn(frames, masks, bcnn, cfg, 0.5)
    for k, v in bcnn.state_arrays().items():
        np.testing.assert_array_equal(v, before[k])
    assert report.network == "scnn" and report.epochs_run == 3
    with pytest.raises(DataError):
        TR.train_scnn(frames, masks[:2], bcnn, cfg, 0.5)


def test_divergence_is_reported(monkeypatch):
    rng = np.random.default_rng(2)
    frames = [rng.integers(0, 256, (16, 16), dtype=np.uint8) for _ in range(2)]

    original = TR.bcnn_objective

    def broken(net, f, b, mode="train"):
        loss, grads, g = original(net, f, b, mode)
        return float("nan"), grads, g

    monkeypatch.setattr(TR, "bcnn_objective", broken)
    with pytest.raises(DivergenceError) as info:
        TR.train_bcnn(frames, np.full((16, 16), 0.5, np.float32), TR.TrainConfig(**SMALL))
    assert info.value.epoch == 1 and info.value.batch == 0


def test_frame_selection(tmp_path):
    video = open_video(_scene(tmp_path))
    cfg = TR.TrainConfig(**SMALL)
    bg, bg_numbers, numbers = TR.select_training_frames(video, cfg)
    assert bg is None and bg_numbers == list(range(1, 11)) and numbers == [11, 12, 13, 14]
    _, _, capped = TR.select_training_frames(video, TR.TrainConfig(**{**SMALL, "train_frames": 2}))
    assert capped == [11, 12]
    with pytest.raises(DataError):
        TR.select_training_frames(video, TR.TrainConfig(**{**SMALL, "background_frames": 14}))
    write_image(video.root / "background.pgm", np.full((16, 16), 100, np.uint8))
    bg, bg_numbers, numbers = TR.select_training_frames(video, cfg)
    assert bg[0, 0] == 100 and bg_numbers == [] and numbers == list(range(1, 15))


def test_train_cascade_outputs_and_determinism(tmp_path):
    root = _scene(tmp_path)
    cfg = TR.TrainConfig(**SMALL)
    a = TR.train_cascade(root, cfg, tmp_path / "a", timings=False)
    b = TR.train_cascade(root, cfg, tmp_path / "b", timings=False)
    for name in ("bcnn.ckpt", "scnn.ckpt", "report.json", "background.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    report = json.loads(a.report_path.read_text())
    assert report["background"]["mode"] == "median"
    assert report["parameters"]["total"] == report["parameters"]["bcnn"] + report["parameters"]["scnn"]
    assert "wall_time" not in report["bcnn"]
    _, opt, meta = load_checkpoint(a.bcnn_path)
    assert meta["training_frames"] == [11, 12, 13, 14] and meta["threshold"] == 0.8
    assert opt.step > 0
    c = TR.train_cascade(root, TR.TrainConfig(**{**SMALL, "seed": 1}), tmp_path / "c")
    assert c.bcnn_path.read_bytes() != a.bcnn_path.read_bytes()
    assert "wall_time" in c.report["bcnn"]


def test_resume_reuses_bcnn(tmp_path):
    root = _scene(tmp_path)
    cfg = TR.TrainConfig(**SMALL)
    first = TR.train_cascade(root, cfg, tmp_path / "m", timings=False)
    bcnn_bytes = first.bcnn_path.read_bytes()
    again = TR.train_cascade(root, cfg, tmp_path / "m", resume=True, timings=False)
    assert again.bcnn_path.read_bytes() == bcnn_bytes
    assert again.scnn_path.read_bytes() == first.scnn_path.read_bytes()
