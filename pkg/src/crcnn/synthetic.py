"""Seeded synthetic videos with exact ground truth.

Frames are 8-bit grayscale. Objects move by whole pixels and bounce off the
frame borders, so masks come straight from geometry. Label values follow the
CD2014 encoding: 0 background, 50 shadow, 255 foreground.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_image, write_image

BACKGROUND, SHADOW, FOREGROUND = 0, 50, 255


@dataclass
class SceneObject:
    shape: str = "rect"  # rect | disc (size is the diameter)
    size: int = 10
    start: tuple = (0, 0)  # top-left (y, x)
    velocity: tuple = (1, 1)  # pixels per frame (vy, vx)
    intensity: int = 230
    cast_shadow: bool = False
    shadow_offset: tuple = (3, 3)
    shadow_attenuation: float = 0.5


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    frame_count: int = 100
    seed: int = 0
    background_kind: str = "textured"  # static | textured | dynamic_noise
    noise_sigma: float = 0.0  # gray levels, dynamic_noise only
    objects: list = field(default_factory=list)
    jitter_amplitude: int = 0
    illumination_drift: float = 0.0  # gray levels per frame, background only

    def __post_init__(self):
        self.objects = [o if isinstance(o, SceneObject) else SceneObject(**o) for o in self.objects]
        if self.width < 1 or self.height < 1 or self.frame_count < 1:
            raise ValueError("width, height and frame_count must be >= 1")
        if self.background_kind not in ("static", "textured", "dynamic_noise"):
            raise ValueError(f"unknown background kind {self.background_kind!r}")
        for obj in self.objects:
            if obj.shape not in ("rect", "disc"):
                raise ValueError(f"unknown object shape {obj.shape!r}")
            if obj.size < 1 or obj.size > min(self.width, self.height):
                raise ValueError(
                    f"object of size {obj.size} does not fit a {self.width}x{self.height} frame")


@dataclass
class LabeledFrame:
    index: int
    frame: np.ndarray  # uint8 (h, w)
    mask: np.ndarray  # uint8 (h, w), CD2014 labels


def _bounce(start: int, velocity: int, t: int, span: int) -> int:
    """Position after ``t`` frames moving inside [0, span], reflecting at the ends."""
    if span == 0:
        return 0
    period = 2 * span
    p = (start + velocity * t) % period
    return p if p <= span else period - p


def object_position(obj: SceneObject, t: int, height: int, width: int) -> tuple:
    y = _bounce(obj.start[0], obj.velocity[0], t, height - obj.size)
    x = _bounce(obj.start[1], obj.velocity[1], t, width - obj.size)
    return y, x


def footprint(obj: SceneObject, y: int, x: int, height: int, width: int) -> np.ndarray:
    """Boolean (h, w) mask of the object with top-left corner at (y, x), clipped."""
    mask = np.zeros((height, width), dtype=bool)
    s = obj.size
    if obj.shape == "rect":
        mask[max(y, 0):max(y + s, 0), max(x, 0):max(x + s, 0)] = True
        return mask
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    disc = (yy - c) ** 2 + (xx - c) ** 2 <= (s / 2.0) ** 2
    y0, x0 = max(y, 0), max(x, 0)
    y1, x1 = min(y + s, height), min(x + s, width)
    if y1 > y0 and x1 > x0:
        mask[y0:y1, x0:x1] = disc[y0 - y:y1 - y, x0 - x:x1 - x]
    return mask


def _smooth_texture(rng, h, w):
    """Smooth random texture in roughly [60, 190]."""
    coarse = rng.uniform(0, 1, size=(h // 8 + 3, w // 8 + 3))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c = coarse
    smooth = ((1 - fy) * (1 - fx) * c[np.ix_(y0, x0)] + (1 - fy) * fx * c[np.ix_(y0, x0 + 1)]
              + fy * (1 - fx) * c[np.ix_(y0 + 1, x0)] + fy * fx * c[np.ix_(y0 + 1, x0 + 1)])
    fine = rng.uniform(-1, 1, size=(h, w))
    return 60.0 + 110.0 * smooth + 20.0 * fine


def generate(config: SceneConfig) -> list[LabeledFrame]:
    """Render the scene. Identical configs give byte-identical sequences."""
    h, w, j = config.height, config.width, config.jitter_amplitude
    root = np.random.SeedSequence(config.seed)
    base_rng, *frame_seeds = [np.random.default_rng(s)
                              for s in root.spawn(config.frame_count + 1)]
    canvas_shape = (h + 2 * j, w + 2 * j)
    if config.background_kind == "static":
        canvas = np.full(canvas_shape, 110.0)
    else:
        canvas = _smooth_texture(base_rng, *canvas_shape)

    frames = []
    for t in range(config.frame_count):
        rng = frame_seeds[t]
        if j:
            dy, dx = (int(v) for v in rng.integers(-j, j + 1, size=2))
        else:
            dy = dx = 0
        bg = canvas[j + dy:j + dy + h, j + dx:j + dx + w] + config.illumination_drift * t
        if config.background_kind == "dynamic_noise" and config.noise_sigma > 0:
            bg = bg + rng.normal(0.0, config.noise_sigma, size=(h, w))
        img = bg.copy()
        mask = np.full((h, w), BACKGROUND, dtype=np.uint8)
        fg = np.zeros((h, w), dtype=bool)
        shapes = []
        for obj in config.objects:
            y, x = object_position(obj, t, h, w)
            shapes.append((obj, footprint(obj, y, x, h, w), y, x))
            fg |= shapes[-1][1]
        for obj, fp, y, x in shapes:
            if obj.cast_shadow:
                sy, sx = obj.shadow_offset
                shadow = footprint(obj, y + sy, x + sx, h, w) & ~fg
                img[shadow] *= obj.shadow_attenuation
                mask[shadow & (mask != FOREGROUND)] = SHADOW
        for obj, fp, _, _ in shapes:
            img[fp] = obj.intensity
            mask[fp] = FOREGROUND
        frames.append(LabeledFrame(t, np.clip(np.rint(img), 0, 255).astype(np.uint8), mask))
    return frames


def foreground_count(config: SceneConfig, t: int) -> int:
    """Analytic number of foreground pixels at frame ``t``."""
    h, w = config.height, config.width
    fg = np.zeros((h, w), dtype=bool)
    for obj in config.objects:
        fg |= footprint(obj, *object_position(obj, t, h, w), h, w)
    return int(fg.sum())


def write_cd2014_layout(sequence, out_dir, config: SceneConfig | None = None,
                        ext: str = "png") -> dict:
    """Write ``input/in%06d`` and ``groundtruth/gt%06d`` files plus ``manifest.json``.

    Frame numbers start at 1 as in CD2014. ``ext`` must be lossless (png/pgm).
    """
    out_dir = Path(out_dir)
    (out_dir / "input").mkdir(parents=True, exist_ok=True)
    (out_dir / "groundtruth").mkdir(parents=True, exist_ok=True)
    entries = []
    for lf in sequence:
        n = lf.index + 1
        in_name = f"input/in{n:06d}.{ext}"
        gt_name = f"groundtruth/gt{n:06d}.{ext}"
        write_image(out_dir / in_name, lf.frame)
        write_image(out_dir / gt_name, lf.mask)
        entries.append({
            "number": n,
            "input": in_name,
            "groundtruth": gt_name,
            "foreground_pixels": int((lf.mask == FOREGROUND).sum()),
            "shadow_pixels": int((lf.mask == SHADOW).sum()),
        })
    manifest = {"frames": entries, "config": asdict(config) if config is not None else None}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_layout(out_dir) -> list[LabeledFrame]:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    return [LabeledFrame(e["number"] - 1, read_image(out_dir / e["input"]),
                         read_image(out_dir / e["groundtruth"]))
            for e in manifest["frames"]]


def acceptance_scene(seed: int = 0) -> SceneConfig:
    """64x64 textured static background with one moving 10x10 rectangle, 120 frames."""
    return SceneConfig(
        width=64, height=64, frame_count=120, seed=seed, background_kind="textured",
        objects=[SceneObject("rect", 10, start=(5, 17), velocity=(2, 3), intensity=230)],
    )
