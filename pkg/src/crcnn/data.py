"""Frame preprocessing, deterministic background, patches and batching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

MAX_PATCH = 50
MIN_OVERLAP, MAX_OVERLAP = 0.5, 0.75


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luma (0.299 R + 0.587 G + 0.114 B), rounded half up, as uint8."""
    image = np.asarray(image)
    if image.ndim == 2:
        if image.dtype != np.uint8:
            raise DataError(f"expected 8-bit image, got {image.dtype}")
        return image
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"expected 8-bit RGB image (h, w, 3), got {image.dtype} {image.shape}")
    rgb = image.astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def _stack(frames) -> np.ndarray:
    frames = list(frames)
    if not frames:
        raise DataError("no frames given")
    shape = frames[0].shape
    for i, fr in enumerate(frames):
        if fr.shape != shape:
            raise ShapeError(f"frame {i} has shape {fr.shape}, expected {shape}")
    return np.stack(frames)


def compute_background(frames) -> np.ndarray:
    """Per-pixel median of the frames scaled to [0, 1], shape (1, 1, h, w).

    For an even number of frames the two central order statistics are averaged.
    """
    stack = _stack(frames)
    if stack.ndim != 3:
        raise ShapeError(f"frames must be 2-D grayscale, got shape {stack.shape[1:]}")
    median = np.median(stack.astype(np.float64), axis=0)
    return (median / 255.0).astype(np.float32)[None, None]


def dataset_mean(frames) -> float:
    """Mean intensity over every pixel of every frame, on the [0, 1] scale."""
    stack = _stack(frames)
    return float(stack.astype(np.float64).mean() / 255.0)


def normalize(frame: np.ndarray, mean: float) -> np.ndarray:
    """``pixels / 255 - mean`` as a float32 (1, 1, h, w) tensor."""
    if not 0.0 <= mean <= 1.0:
        raise ValueError(f"mean must lie in [0, 1], got {mean}")
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale frame, got shape {frame.shape}")
    return (frame.astype(np.float64) / 255.0 - mean).astype(np.float32)[None, None]


def denormalize(f: np.ndarray, mean: float) -> np.ndarray:
    return np.clip(np.rint((f.astype(np.float64) + mean) * 255.0), 0, 255).astype(np.uint8)


def binarize_mask(gt: np.ndarray) -> np.ndarray:
    """Training targets: label values >= 128 are foreground."""
    return (np.asarray(gt) >= 128).astype(np.float32)


# ---------------------------------------------------------------------------
# patches


def patch_stride(patch_size: int, overlap: float) -> int:
    """Grid step for ``patch_size`` at the requested ``overlap``.

    ``patch_size * (1 - overlap)`` is rounded half up, then clamped so the
    realised overlap ``1 - stride / patch_size`` stays within [0.5, 0.75].
    """
    if patch_size == 1:
        return 1
    stride = max(1, math.floor(patch_size * (1.0 - overlap) + 0.5))
    lo = math.ceil(patch_size * (1.0 - MAX_OVERLAP))
    hi = math.floor(patch_size * (1.0 - MIN_OVERLAP))
    return min(max(stride, lo, 1), hi)


def grid_origins(length: int, patch_size: int, stride: int) -> list[int]:
    starts = list(range(0, length - patch_size + 1, stride))
    if starts[-1] != length - patch_size:
        starts.append(length - patch_size)  # clamped final patch covers the edge
    return starts


@dataclass
class PatchSet:
    patch_size: int
    stride: int
    patches: np.ndarray  # (m, ch, p, p)
    origins: list  # (y, x) per patch
    frame_ids: np.ndarray = field(default=None)  # source frame per patch
    image_shape: tuple = None  # (h, w) of the source frames

    def __post_init__(self):
        if self.frame_ids is None:
            self.frame_ids = np.zeros(len(self.origins), dtype=np.int64)

    def __len__(self):
        return len(self.origins)

    @property
    def overlap(self) -> float:
        return 1.0 - self.stride / self.patch_size


def _as_image4(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image[None, None]
    if image.ndim == 3:
        return image[None]
    if image.ndim == 4 and image.shape[0] == 1:
        return image
    raise ShapeError(f"expected a single image (h, w), (c, h, w) or (1, c, h, w), got {image.shape}")


def _cut(image4: np.ndarray, origins, p: int) -> np.ndarray:
    out = np.empty((len(origins), image4.shape[1], p, p), dtype=image4.dtype)
    for i, (y, x) in enumerate(origins):
        out[i] = image4[0, :, y:y + p, x:x + p]
    return out


def extract_patches(image: np.ndarray, patch_size: int, overlap: float = 0.5,
                    frame_id: int = 0) -> PatchSet:
    """Cut overlapping square patches on a regular grid with clamped edges."""
    image4 = _as_image4(image)
    h, w = image4.shape[2:]
    if not MIN_OVERLAP <= overlap <= MAX_OVERLAP:
        raise ValueError(f"overlap must lie in [{MIN_OVERLAP}, {MAX_OVERLAP}], got {overlap}")
    if patch_size < 1 or patch_size > MAX_PATCH:
        raise ValueError(f"patch size must lie in [1, {MAX_PATCH}], got {patch_size}")
    if patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} exceeds image size {h}x{w}")
    stride = patch_stride(patch_size, overlap)
    origins = [(y, x) for y in grid_origins(h, patch_size, stride)
               for x in grid_origins(w, patch_size, stride)]
    return PatchSet(patch_size, stride, _cut(image4, origins, patch_size), origins,
                    np.full(len(origins), frame_id, dtype=np.int64), (h, w))


def concat_patchsets(sets: list[PatchSet]) -> PatchSet:
    if not sets:
        raise DataError("no patch sets to concatenate")
    first = sets[0]
    for s in sets[1:]:
        if (s.patch_size, s.stride, s.image_shape) != (first.patch_size, first.stride, first.image_shape):
            raise ShapeError("patch sets disagree on patch size, stride or source shape")
    return PatchSet(
        first.patch_size,
        first.stride,
        np.concatenate([s.patches for s in sets]),
        [o for s in sets for o in s.origins],
        np.concatenate([s.frame_ids for s in sets]),
        first.image_shape,
    )


def replicate_background_patches(background: np.ndarray, layout: PatchSet) -> PatchSet:
    """Cut the background at every origin of ``layout``, one patch per input patch."""
    bg4 = _as_image4(background)
    if layout.image_shape is not None and bg4.shape[2:] != tuple(layout.image_shape):
        raise ShapeError(
            f"background shape {bg4.shape[2:]} != source frame shape {tuple(layout.image_shape)}"
        )
    return PatchSet(layout.patch_size, layout.stride, _cut(bg4, layout.origins, layout.patch_size),
                    list(layout.origins), layout.frame_ids.copy(), layout.image_shape)


def reassemble(patchset: PatchSet, image_shape=None) -> np.ndarray:
    """Average overlapping patches back onto a (ch, h, w) canvas."""
    h, w = image_shape or patchset.image_shape
    ch = patchset.patches.shape[1]
    p = patchset.patch_size
    acc = np.zeros((ch, h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.int64)
    for patch, (y, x) in zip(patchset.patches, patchset.origins):
        acc[:, y:y + p, x:x + p] += patch
        hits[y:y + p, x:x + p] += 1
    if np.any(hits == 0):
        raise ShapeError("patches do not cover the whole canvas")
    return (acc / hits).astype(patchset.patches.dtype)


# ---------------------------------------------------------------------------
# split and batching


@dataclass
class PatchSplit:
    train_indices: np.ndarray
    val_indices: np.ndarray
    batch_size: int
    seed: int

    def epoch_batches(self, epoch: int) -> list[np.ndarray]:
        """Training batches for ``epoch``, reshuffled from a per-epoch seed."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1, epoch]))
        order = self.train_indices[rng.permutation(len(self.train_indices))]
        return [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]

    def val_batches(self) -> list[np.ndarray]:
        idx = self.val_indices
        return [idx[i:i + self.batch_size] for i in range(0, len(idx), self.batch_size)]


def split_and_batch(count: int, train_fraction: float = 0.8, batch_size: int = 128,
                    seed: int = 0) -> PatchSplit:
    """Seeded shuffle of ``count`` patch indices into train and validation parts.

    The first ``ceil(train_fraction * count)`` shuffled indices train.
    """
    if count < 1:
        raise DataError("empty patch set")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    order = rng.permutation(count)
    n_train = min(count, math.ceil(train_fraction * count - 1e-9))
    return PatchSplit(order[:n_train], order[n_train:], batch_size, seed)
