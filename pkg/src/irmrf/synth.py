"""Synthetic scenes: SAR-textured targets planted on SAR-textured backgrounds.

Fixtures for desk-scale checks of the whole pipeline.  A scene is a
background field with independently sampled target patches pasted into the
truth boxes and, optionally, clutter patches pasted into boxes that are not
part of the truth.  Sequences translate the targets frame by frame and
resample all noise, while clutter stays put.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import BoundingBox, Frame, PixelGrid, box_overlap, write_manifest, write_pgm, write_truth_csv
from .sar import SarParams, sample_sar

# Published learned parameters for one infrared dataset; their betas sum past 1, so fields drawn
# from them on scene-sized grids are dominated by near-singular modes.
PUBLISHED_TARGET = SarParams(117.4, 2.11, (0.044, 0.443, 0.479, 0.068))
PUBLISHED_BACKGROUND = SarParams(86.53, 1.19, (0.016, 0.487, 0.483, 0.016))

STABLE_BETA_SUM = 0.8


def stabilize(params: SarParams, total: float = STABLE_BETA_SUM) -> SarParams:
    """Rescale beta so that ``sum |beta| <= total``; ``I - B`` is then strictly
    diagonally dominant on every grid."""
    s = float(np.sum(np.abs(params.beta)))
    if s <= total:
        return params
    return dataclasses.replace(params, beta=tuple(b * total / s for b in params.beta))


SCENE_TARGET = stabilize(PUBLISHED_TARGET)
SCENE_BACKGROUND = stabilize(PUBLISHED_BACKGROUND)

# Textured-distractor fixture: a speckled (anti-correlated) target on a smooth
# background, plus warm clutter that has the target's brightness but the
# background's smooth texture.  Only the texture tells clutter from target.
SPECKLE_TARGET = SarParams(117.4, 4.5, (-0.2, -0.2, -0.2, -0.2))
SMOOTH_BACKGROUND = SarParams(86.53, 1.0, (0.245, 0.245, 0.245, 0.245))
WARM_CLUTTER = dataclasses.replace(SMOOTH_BACKGROUND, mu=SPECKLE_TARGET.mu)
DEFAULT_FEATHER = 3

DEFAULT_WIDTH = 128
DEFAULT_HEIGHT = 96


@dataclass(frozen=True)
class SceneSpec:
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    background: SarParams = SCENE_BACKGROUND
    target: SarParams = SCENE_TARGET
    boxes: tuple[BoundingBox, ...] = ()
    seed: int = 0
    clutter: tuple[BoundingBox, ...] = ()
    clutter_params: SarParams | None = None
    feather: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "clutter", tuple(self.clutter))
        if self.width < 1 or self.height < 1:
            raise ValueError("scene dimensions must be positive")
        if self.feather < 0:
            raise ValueError("feather width must be >= 0")
        placed = self.boxes + self.clutter
        for box in placed:
            if not box.inside(self.width, self.height):
                raise ValueError(f"box {box.geometry()} outside {self.width}x{self.height} scene")
        for i, a in enumerate(placed):
            for b in placed[i + 1 :]:
                if box_overlap(a, b) > 0:
                    raise ValueError(f"boxes {a.geometry()} and {b.geometry()} overlap")


def _seeds(spec: SceneSpec, frame_index: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(spec.seed, spawn_key=(frame_index,)).spawn(count)


def feather_window(w: int, h: int, feather: int) -> np.ndarray:
    """``(h, w)`` blend weights: 1 in the interior, ramping linearly to
    ``1 / (feather + 1)`` on the outermost ring."""
    def ramp(n: int) -> np.ndarray:
        i = np.arange(n)
        return np.minimum(1.0, np.minimum(i + 1, n - i) / (feather + 1.0))

    return np.outer(ramp(h), ramp(w))


def render_scene(spec: SceneSpec, frame_index: int = 0) -> Frame:
    """Draw one frame.  ``frame_index`` selects an independent noise stream.

    Target patches replace the background outright.  Clutter patches are
    blended in through :func:`feather_window` when ``spec.feather > 0``, so
    their borders carry no intensity step.
    """
    seeds = _seeds(spec, frame_index, 1 + len(spec.boxes) + len(spec.clutter))
    img = np.array(sample_sar(spec.background, spec.width, spec.height, seeds[0]))
    for box, seed in zip(spec.boxes, seeds[1:]):
        img[box.slices()] = np.asarray(sample_sar(spec.target, box.w, box.h, seed))
    clutter_params = spec.clutter_params or spec.target
    for box, seed in zip(spec.clutter, seeds[1 + len(spec.boxes) :]):
        patch = np.asarray(sample_sar(clutter_params, box.w, box.h, seed))
        wgt = feather_window(box.w, box.h, spec.feather)
        img[box.slices()] = wgt * patch + (1.0 - wgt) * img[box.slices()]
    truth = tuple(BoundingBox(*b.geometry()) for b in spec.boxes)
    return Frame(PixelGrid(img), truth)


def render_sequence(
    spec: SceneSpec,
    frames: int,
    motion: tuple[int, int] = (0, 0),
    distractor: BoundingBox | None = None,
) -> list[Frame]:
    """Frames with targets moving ``motion = (dx, dy)`` pixels per frame.

    The optional ``distractor`` is a static box re-rendered with target
    texture in every frame; it never enters the truth.
    """
    if frames < 1:
        raise ValueError("need at least one frame")
    dx, dy = motion
    clutter = spec.clutter + ((distractor,) if distractor is not None else ())
    out = []
    for k in range(frames):
        moved = tuple(b.shifted(k * dx, k * dy) for b in spec.boxes)
        for b in moved:
            if not b.inside(spec.width, spec.height):
                raise ValueError(f"frame {k}: box {b.geometry()} leaves the scene")
        frame_spec = dataclasses.replace(spec, boxes=moved, clutter=clutter)
        out.append(render_scene(frame_spec, frame_index=k))
    return out


def random_boxes(
    rng: np.random.Generator,
    width: int,
    height: int,
    count: int,
    size_range: tuple[tuple[int, int], tuple[int, int]] = ((8, 14), (12, 22)),
    avoid: Sequence[BoundingBox] = (),
    margin: int = 2,
    max_tries: int = 1000,
) -> list[BoundingBox]:
    """``count`` non-overlapping boxes, ``margin`` pixels apart, inside the image.

    ``size_range`` gives inclusive ``(w_min, w_max), (h_min, h_max)``.
    """
    (w_lo, w_hi), (h_lo, h_hi) = size_range
    if w_hi > width or h_hi > height:
        raise ValueError(f"box sizes up to {w_hi}x{h_hi} do not fit a {width}x{height} scene")
    placed = list(avoid)
    out: list[BoundingBox] = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {count} boxes in a {width}x{height} scene")
        w = int(rng.integers(w_lo, w_hi + 1))
        h = int(rng.integers(h_lo, h_hi + 1))
        box = BoundingBox(int(rng.integers(0, width - w + 1)), int(rng.integers(0, height - h + 1)), w, h)
        padded = BoundingBox(box.x0 - margin, box.y0 - margin, w + 2 * margin, h + 2 * margin)
        if any(box_overlap(padded, other) > 0 for other in placed):
            continue
        placed.append(box)
        out.append(box)
    return out


def planted_dataset(
    n_frames: int,
    boxes_per_frame: int = 2,
    seed: int = 0,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    target: SarParams = SCENE_TARGET,
    background: SarParams = SCENE_BACKGROUND,
    clutter_per_frame: int = 0,
    clutter_params: SarParams | None = None,
    feather: int = 0,
) -> list[Frame]:
    """Independent scenes with randomly placed targets (and optional clutter)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1 << 20,)))
    frames = []
    for k in range(n_frames):
        boxes = random_boxes(rng, width, height, boxes_per_frame)
        clutter = random_boxes(rng, width, height, clutter_per_frame, avoid=boxes) if clutter_per_frame else []
        spec = SceneSpec(
            width, height, background, target, tuple(boxes), seed, tuple(clutter), clutter_params, feather
        )
        frames.append(render_scene(spec, frame_index=k))
    return frames


def distractor_dataset(n_frames: int, boxes_per_frame: int = 2, clutter_per_frame: int = 2, seed: int = 0) -> list[Frame]:
    """Planted speckled targets among warm, smooth clutter patches."""
    return planted_dataset(
        n_frames,
        boxes_per_frame,
        seed,
        target=SPECKLE_TARGET,
        background=SMOOTH_BACKGROUND,
        clutter_per_frame=clutter_per_frame,
        clutter_params=WARM_CLUTTER,
        feather=DEFAULT_FEATHER,
    )


def moving_sequence(frames: int = 10, seed: int = 0, distractor: bool = True) -> list[Frame]:
    """One 10x16 target crossing the scene left to right, 11 px per frame, plus
    an optional static target-textured distractor below its path."""
    step = 11
    if frames < 1 or 2 + step * (frames - 1) + 10 > DEFAULT_WIDTH:
        raise ValueError(f"a {frames}-frame crossing does not fit the default scene")
    spec = SceneSpec(boxes=(BoundingBox(2, 10, 10, 16),), seed=seed)
    return render_sequence(spec, frames, (step, 0), BoundingBox(60, 60, 10, 16) if distractor else None)


def write_dataset(frames: Sequence[Frame], out_dir: str | Path, prefix: str = "frame") -> Path:
    """Write frames as PGM + truth CSV pairs and a ``manifest.txt`` listing them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for k, frame in enumerate(frames):
        img_name = f"{prefix}_{k:04d}.pgm"
        truth_name = f"{prefix}_{k:04d}.csv"
        write_pgm(out_dir / img_name, frame.image)
        write_truth_csv(out_dir / truth_name, frame.truth)
        pairs.append((img_name, truth_name))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, pairs)
    return manifest
