"""CD2014-style video directories.

A video directory holds ``input/in%06d.<ext>`` frames and
``groundtruth/gt%06d.<ext>`` masks, paired by frame number. An optional
``temporalROI.txt`` ("first last", 1-based) limits which frames are scored and
an optional ``background.pgm`` selects single-background-frame training.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import to_grayscale
from .errors import DataError
from .imageio import list_images, read_image

_NUMBER = re.compile(r"(\d+)(?!.*\d)")


def frame_number(path: Path) -> int:
    m = _NUMBER.search(path.stem)
    if m is None:
        raise DataError(f"cannot find a frame number in {path.name}")
    return int(m.group(1))


@dataclass
class Video:
    root: Path
    numbers: list  # frame numbers in order
    inputs: dict  # number -> Path
    groundtruth: dict  # number -> Path (may be partial)
    temporal_roi: tuple | None = None

    @property
    def name(self) -> str:
        return self.root.name

    @property
    def category(self) -> str:
        return self.root.parent.name

    def __len__(self):
        return len(self.numbers)

    def frame(self, number: int) -> np.ndarray:
        return to_grayscale(read_image(self.inputs[number]))

    def mask(self, number: int) -> np.ndarray:
        if number not in self.groundtruth:
            raise DataError(f"{self.root}: no ground truth for frame {number}")
        gt = read_image(self.groundtruth[number])
        return gt if gt.ndim == 2 else to_grayscale(gt)

    def frames(self, numbers) -> list[np.ndarray]:
        return [self.frame(n) for n in numbers]

    def masks(self, numbers) -> list[np.ndarray]:
        return [self.mask(n) for n in numbers]

    def background_image(self) -> Path | None:
        path = self.root / "background.pgm"
        return path if path.exists() else None

    def scored_numbers(self) -> list[int]:
        """Frames with ground truth inside the temporal ROI."""
        nums = [n for n in self.numbers if n in self.groundtruth]
        if self.temporal_roi is not None:
            lo, hi = self.temporal_roi
            nums = [n for n in nums if lo <= n <= hi]
        return nums


def is_video_dir(path: Path) -> bool:
    return (path / "input").is_dir() and (path / "groundtruth").is_dir()


def open_video(root) -> Video:
    root = Path(root)
    if not is_video_dir(root):
        raise DataError(f"{root} is not a video directory (needs input/ and groundtruth/)")
    inputs = {frame_number(p): p for p in list_images(root / "input")}
    if not inputs:
        raise DataError(f"{root}/input holds no frames")
    gts = {frame_number(p): p for p in list_images(root / "groundtruth")}
    roi = None
    roi_file = root / "temporalROI.txt"
    if roi_file.exists():
        try:
            lo, hi = (int(v) for v in roi_file.read_text().split()[:2])
        except ValueError:
            raise DataError(f"malformed {roi_file}") from None
        roi = (lo, hi)
    return Video(root, sorted(inputs), inputs, gts, roi)


def find_videos(root) -> list[Video]:
    """All video directories at or below ``root``, in sorted order."""
    root = Path(root)
    if is_video_dir(root):
        return [open_video(root)]
    if not root.is_dir():
        raise DataError(f"missing data directory {root}")
    found = []
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        found.extend(find_videos(child))
    return found
