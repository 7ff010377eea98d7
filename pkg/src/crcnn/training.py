"""Two-phase training: BCNN regression, then SCNN segmentation.

BCNN learns to reproduce the deterministic background through
``a = sigmoid(f - BCNN(f))`` under the Frobenius loss. SCNN is then trained
with binary cross-entropy on (frame, residual) patches while BCNN stays
frozen in inference mode.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Video, open_video
from .errors import DataError, DivergenceError, ShapeError
from .imageio import read_image, write_image
from .model import (
    MIDDLE_DEPTH,
    WIDTH,
    NetworkSpec,
    bcnn_forward,
    build_bcnn,
    build_scnn,
    cascade_input,
    count_parameters,
)
from .tensor import AdamState, adam_step, bce_loss, frobenius_loss, sigmoid, sigmoid_backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    max_epochs: int = 50
    batch_size: int = 128
    train_fraction: float = 0.8
    seed: int = 0
    early_stop_delta: float = 1e-5
    min_learning_rate: float = 1e-6
    patch_size: int = 48
    overlap: float = 0.5
    background_frames: int = 100
    train_frames: int | None = None
    threshold: float = 0.8
    # non-canonical overrides, for desk-scale experiments only
    width: int = WIDTH
    depth: int = MIDDLE_DEPTH
    scnn_batchnorm: bool = False

    def __post_init__(self):
        for name in ("learning_rate", "max_epochs", "batch_size", "plateau_patience",
                     "patch_size", "background_frames"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class TrainReport:
    network: str
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)  # index 0 is before any update
    learning_rates: list = field(default_factory=list)  # rate used in each epoch
    lr_events: list = field(default_factory=list)
    batch_sizes: list = field(default_factory=list)  # first epoch
    n_train: int = 0
    n_val: int = 0
    epochs_run: int = 0
    stop_reason: str = ""
    wall_time: float = 0.0
    checkpoint: str | None = None

    @property
    def initial_val_loss(self) -> float:
        return self.val_losses[0]

    @property
    def final_val_loss(self) -> float:
        return self.val_losses[-1]

    def to_dict(self) -> dict:
        return asdict(self)


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` when validation loss stalls.

    A stall is ``patience`` consecutive epochs without an improvement larger
    than ``delta`` over the best loss so far. Once the rate is below
    ``min_lr``, the second further stall stops training.
    """

    def __init__(self, factor=0.1, patience=3, delta=1e-5, min_lr=1e-6):
        self.factor = factor
        self.patience = patience
        self.delta = delta
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0
        self.low_stalls = 0

    def step(self, loss: float, state: AdamState):
        """Returns ``(event, stop)``; ``event`` describes an LR change or is None."""
        if loss < self.best - self.delta:
            self.best = loss
            self.bad_epochs = 0
            return None, False
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return None, False
        self.bad_epochs = 0
        if state.learning_rate < self.min_lr:
            self.low_stalls += 1
            if self.low_stalls >= 2:
                return None, True
        old = state.learning_rate
        state.learning_rate = old * self.factor
        return {"old": old, "new": state.learning_rate}, False


# ---------------------------------------------------------------------------
# objectives


def bcnn_objective(bcnn: NetworkSpec, f: np.ndarray, background: np.ndarray, mode="train"):
    """Frobenius loss of ``sigmoid(f - BCNN(f))`` against the background patches.

    Returns ``(loss, parameter_grads, input_grad)``.
    """
    residual, cache = bcnn.forward(f, mode, keep=True)
    approx = sigmoid(f - residual)
    loss, grad_a = frobenius_loss(background, approx)
    grad_z = sigmoid_backward(approx, grad_a)
    grad_in, grads = bcnn.backward(cache, -grad_z)
    return loss, grads, grad_in + grad_z


def scnn_objective(scnn: NetworkSpec, c: np.ndarray, mask: np.ndarray, mode="train"):
    """Binary cross-entropy of ``SCNN(c)`` against the mask patches."""
    probs, cache = scnn.forward(c, mode, keep=True)
    loss, grad_p = bce_loss(mask, probs)
    grad_in, grads = scnn.backward(cache, grad_p)
    return loss, grads, grad_in


def _bcnn_eval(bcnn, f, b):
    return frobenius_loss(b, sigmoid(f - bcnn.forward(f, "infer")))[0]


def _scnn_eval(scnn, c, g):
    return bce_loss(g, scnn.forward(c, "infer"))[0]


# ---------------------------------------------------------------------------
# loop


def _validation_loss(net, inputs, targets, batches, evaluate, per_pixel):
    total, weight = 0.0, 0
    for idx in batches:
        w = targets[idx].size if per_pixel else len(idx)
        total += evaluate(net, inputs[idx], targets[idx]) * w
        weight += w
    return total / weight


def _fit(net, inputs, targets, objective, evaluate, per_pixel, config: TrainConfig, seed):
    report = TrainReport(net.name)
    split = data.split_and_batch(len(inputs), config.train_fraction, config.batch_size, seed)
    report.n_train, report.n_val = len(split.train_indices), len(split.val_indices)
    # no held-out patch -> fall back to the training patches for the schedule
    val_batches = split.val_batches() or [split.train_indices]
    state = AdamState(learning_rate=config.learning_rate)
    schedule = PlateauSchedule(config.plateau_factor, config.plateau_patience,
                               config.early_stop_delta, config.min_learning_rate)
    params = net.named_parameters()
    start = time.perf_counter()
    report.val_losses.append(
        _validation_loss(net, inputs, targets, val_batches, evaluate, per_pixel))
    report.stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        batches = split.epoch_batches(epoch)
        if epoch == 1:
            report.batch_sizes = [len(b) for b in batches]
        report.learning_rates.append(state.learning_rate)
        total, weight = 0.0, 0
        for bi, idx in enumerate(batches):
            loss, grads, _ = objective(net, inputs[idx], targets[idx], "train")
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergenceError(
                    f"{net.name}: non-finite loss at epoch {epoch}, batch {bi}", epoch, bi)
            adam_step(params, grads, state)
            w = targets[idx].size if per_pixel else len(idx)
            total += loss * w
            weight += w
        report.train_losses.append(total / weight)
        val = _validation_loss(net, inputs, targets, val_batches, evaluate, per_pixel)
        if not math.isfinite(val):
            raise DivergenceError(f"{net.name}: non-finite validation loss at epoch {epoch}", epoch)
        report.val_losses.append(val)
        report.epochs_run = epoch
        log.info("%s epoch %d: train %.6g val %.6g lr %.3g", net.name, epoch,
                 report.train_losses[-1], val, state.learning_rate)
        event, stop = schedule.step(val, state)
        if event is not None:
            report.lr_events.append({"epoch": epoch, **event})
        if stop:
            report.stop_reason = "plateau"
            break
    report.wall_time = time.perf_counter() - start
    return state, report


def _seed(config: TrainConfig, phase: int) -> int:
    return int(np.random.SeedSequence([config.seed, phase]).generate_state(1)[0])


def _check_frames(frames):
    if not frames:
        raise DataError("no training frames")
    shape = frames[0].shape
    for i, fr in enumerate(frames):
        if fr.shape != shape:
            raise ShapeError(f"training frame {i} has shape {fr.shape}, expected {shape}")


def train_bcnn(frames, background: np.ndarray, config: TrainConfig, mean: float | None = None):
    """Fit a fresh BCNN on ``frames`` (uint8 grayscale) against ``background``.

    ``background`` is the [0, 1] deterministic background, (h, w) or (1, 1, h, w).
    Returns ``(bcnn, optimizer_state, report, mean)``.
    """
    _check_frames(frames)
    mean = data.dataset_mean(frames) if mean is None else mean
    bg = np.asarray(background, dtype=np.float32).reshape(frames[0].shape)
    inputs, targets = [], []
    for i, frame in enumerate(frames):
        layout = data.extract_patches(data.normalize(frame, mean), config.patch_size,
                                      config.overlap, frame_id=i)
        inputs.append(layout)
        targets.append(data.replicate_background_patches(bg, layout))
    x = data.concat_patchsets(inputs).patches
    y = data.concat_patchsets(targets).patches
    bcnn = build_bcnn(_seed(config, 1), width=config.width, depth=config.depth)
    state, report = _fit(bcnn, x, y, bcnn_objective, _bcnn_eval, False, config, _seed(config, 2))
    return bcnn, state, report, mean


def residual_inputs(frames, bcnn: NetworkSpec, mean: float) -> list[np.ndarray]:
    """Cascade input (frame, residual) for each frame, BCNN in inference mode."""
    out = []
    for frame in frames:
        f = data.normalize(frame, mean)
        out.append(cascade_input(f, bcnn_forward(f, bcnn, "infer")))
    return out


def train_scnn(frames, masks, bcnn: NetworkSpec, config: TrainConfig, mean: float):
    """Fit a fresh SCNN; ``bcnn`` is only run forward and never modified.

    Returns ``(scnn, optimizer_state, report)``.
    """
    _check_frames(frames)
    if len(masks) != len(frames):
        raise DataError(f"{len(frames)} frames but {len(masks)} masks")
    for i, (fr, gt) in enumerate(zip(frames, masks)):
        if gt.shape != fr.shape:
            raise ShapeError(f"mask {i} shape {gt.shape} != frame shape {fr.shape}")
    inputs, targets = [], []
    for i, (c, gt) in enumerate(zip(residual_inputs(frames, bcnn, mean), masks)):
        layout = data.extract_patches(c, config.patch_size, config.overlap, frame_id=i)
        inputs.append(layout)
        targets.append(data.replicate_background_patches(data.binarize_mask(gt), layout))
    x = data.concat_patchsets(inputs).patches
    y = data.concat_patchsets(targets).patches
    scnn = build_scnn(_seed(config, 3), width=config.width, depth=config.depth,
                      batchnorm=config.scnn_batchnorm)
    state, report = _fit(scnn, x, y, scnn_objective, _scnn_eval, True, config, _seed(config, 4))
    return scnn, state, report


# ---------------------------------------------------------------------------
# full protocol


@dataclass
class CascadeResult:
    bcnn_path: Path
    scnn_path: Path
    report_path: Path
    report: dict


def select_training_frames(video: Video, config: TrainConfig, background_path=None):
    """Pick the background source and the annotated training frames.

    With a background image (``background.pgm`` in the video or an explicit
    path) every annotated frame trains. Otherwise the median of the first
    ``background_frames`` frames is the background and the annotated frames
    after that interval train, at most ``train_frames`` of them.
    Returns ``(background_uint8_or_None, background_numbers, training_numbers)``.
    """
    background_path = background_path or video.background_image()
    annotated = [n for n in video.numbers if n in video.groundtruth]
    if background_path is not None:
        bg = read_image(background_path)
        bg = data.to_grayscale(bg)
        numbers = annotated
        bg_numbers = []
    else:
        k = config.background_frames
        if len(video) < k + 1:
            raise DataError(
                f"{video.root}: {len(video)} frames, need at least {k + 1} "
                f"({k} for the background plus one to train on)")
        bg = None
        bg_numbers = video.numbers[:k]
        numbers = [n for n in video.numbers[k:] if n in video.groundtruth]
        missing = [n for n in video.numbers[k:] if n not in video.groundtruth]
        if not numbers:
            raise DataError(f"{video.root}: no ground truth after the first {k} frames")
        if missing and config.train_frames is None:
            log.warning("%s: %d frames after the background interval lack ground truth",
                        video.root, len(missing))
    if config.train_frames is not None:
        numbers = numbers[:config.train_frames]
    if not numbers:
        raise DataError(f"{video.root}: no annotated training frames")
    return bg, bg_numbers, numbers


def train_cascade(dataset_dir, config: TrainConfig, out_dir, *, background_path=None,
                  resume: bool = False, timings: bool = True) -> CascadeResult:
    """Background, BCNN, then SCNN; writes both checkpoints and ``report.json``.

    With ``resume`` an existing ``bcnn.ckpt`` in ``out_dir`` replaces the BCNN
    phase. ``timings=False`` leaves wall-clock times out of the report so that
    reruns produce identical files.
    """
    video = open_video(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bg_img, bg_numbers, numbers = select_training_frames(video, config, background_path)
    frames = video.frames(numbers)
    masks = video.masks(numbers)
    if bg_img is None:
        background = data.compute_background(video.frames(bg_numbers))
        bg_source = {"mode": "median", "frames": [int(n) for n in bg_numbers]}
    else:
        if bg_img.shape != frames[0].shape:
            raise ShapeError(f"background shape {bg_img.shape} != frame shape {frames[0].shape}")
        background = (bg_img.astype(np.float64) / 255.0).astype(np.float32)[None, None]
        bg_source = {"mode": "image"}
    write_image(out_dir / "background.pgm",
                np.clip(np.rint(background[0, 0] * 255.0), 0, 255).astype(np.uint8))

    bcnn_path = out_dir / "bcnn.ckpt"
    scnn_path = out_dir / "scnn.ckpt"
    common = {"seed": config.seed, "threshold": config.threshold,
              "patch_size": config.patch_size, "overlap": config.overlap,
              "training_frames": [int(n) for n in numbers]}
    if resume and bcnn_path.exists():
        bcnn, _, meta = load_checkpoint(bcnn_path)
        mean = meta["mean"]
        bcnn_report = meta.get("report")
        log.info("resumed BCNN from %s", bcnn_path)
    else:
        bcnn, bstate, brep, mean = train_bcnn(frames, background, config)
        brep.checkpoint = bcnn_path.name
        bcnn_report = brep.to_dict()
        save_checkpoint(bcnn_path, bcnn, bstate, {
            **common, "mean": mean, "epochs_run": brep.epochs_run,
            "final_loss": brep.final_val_loss, "report": _stable(bcnn_report)})

    scnn, sstate, srep = train_scnn(frames, masks, bcnn, config, mean)
    srep.checkpoint = scnn_path.name
    save_checkpoint(scnn_path, scnn, sstate, {
        **common, "mean": mean, "epochs_run": srep.epochs_run,
        "final_loss": srep.final_val_loss, "report": _stable(srep.to_dict())})

    n_b, n_s = count_parameters(bcnn), count_parameters(scnn)
    report = {
        "dataset": str(video.root),
        "config": asdict(config),
        "mean": mean,
        "background": bg_source,
        "parameters": {"bcnn": n_b, "scnn": n_s, "total": n_b + n_s},
        "bcnn": bcnn_report,
        "scnn": srep.to_dict(),
    }
    if not timings:
        for phase in ("bcnn", "scnn"):
            if report[phase] is not None:
                report[phase] = {k: v for k, v in report[phase].items() if k != "wall_time"}
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return CascadeResult(bcnn_path, scnn_path, report_path, report)


def _stable(report: dict) -> dict:
    """Report fields that are reproducible run to run (no timings or paths)."""
    return {k: v for k, v in report.items() if k not in ("wall_time", "checkpoint")}
