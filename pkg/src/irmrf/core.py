"""Grid containers, boxes, 4-neighbourhood geometry and dataset I/O.

Images travel as binary PGM (P5, 8 or 16 bit).  Ground truth is one CSV per
frame with ``x0,y0,w,h`` rows and no header; a dataset manifest lists
``image-path,truth-path`` pairs, resolved relative to the manifest.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Direction slots, in the order used by every beta vector.
UP, LEFT, RIGHT, DOWN = 0, 1, 2, 3
DIRECTIONS = ("up", "left", "right", "down")
OFFSETS = ((-1, 0), (0, -1), (0, 1), (1, 0))  # (drow, dcol)
OPPOSITE = (DOWN, RIGHT, LEFT, UP)


class ImageError(Exception):
    """Base class for image loading failures."""


class ImageNotFoundError(ImageError, FileNotFoundError):
    pass


class MalformedImageError(ImageError):
    pass


class UnsupportedImageError(ImageError):
    """Readable file that is not a grayscale PGM."""


class DatasetError(Exception):
    pass


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PixelGrid:
    """2-D field of finite real intensities, stored row-major as ``(height, width)``.

    ``maxval`` records the sample range of the file the grid came from, if any,
    so that writing it back reproduces the original header.
    """

    values: np.ndarray
    maxval: int | None = None

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"PixelGrid needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("PixelGrid values must be finite")
        object.__setattr__(self, "values", _readonly(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        out = self.values if dtype is None else self.values.astype(dtype)
        return out.copy() if copy and out is self.values else out


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Binary label field, 1 = target and 0 = background."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"LabelGrid needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("LabelGrid entries must be 0 or 1")
        object.__setattr__(self, "labels", _readonly(arr.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def __array__(self, dtype=None, copy=None):
        out = self.labels if dtype is None else self.labels.astype(dtype)
        return out.copy() if copy and out is self.labels else out


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    w: int
    h: int
    score: float = math.nan

    def __post_init__(self) -> None:
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box extents must be positive, got {self.w}x{self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.w / 2.0, self.y0 + self.h / 2.0)

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return (
            self.x0 >= 0
            and self.y0 >= 0
            and self.x0 + self.w <= width
            and self.y0 + self.h <= height
        )

    def shifted(self, dx: int, dy: int) -> BoundingBox:
        return BoundingBox(self.x0 + dx, self.y0 + dy, self.w, self.h, self.score)

    def slices(self) -> tuple[slice, slice]:
        return (slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w))

    def geometry(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.w, self.h)


@dataclass(frozen=True)
class Frame:
    image: PixelGrid
    truth: tuple[BoundingBox, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "truth", tuple(self.truth))
        for box in self.truth:
            if not box.inside(self.image.width, self.image.height):
                raise ValueError(f"truth box {box.geometry()} outside {self.image.width}x{self.image.height} image")

    def truth_labels(self) -> LabelGrid:
        return rasterize_boxes(self.truth, self.image.width, self.image.height)


def rasterize_boxes(boxes: Iterable[BoundingBox], width: int, height: int) -> LabelGrid:
    labels = np.zeros((height, width), dtype=np.uint8)
    for box in boxes:
        labels[box.slices()] = 1
    return LabelGrid(labels)


# ---------------------------------------------------------------------------
# Neighbourhood geometry
# ---------------------------------------------------------------------------


def neighbors(shape: tuple[int, int], site: int) -> list[tuple[int, int]]:
    """In-bounds 4-neighbours of ``site`` as ``(direction, index)`` pairs.

    ``shape`` is ``(height, width)`` and sites are row-major indices.
    Directions follow the fixed up, left, right, down order.
    """
    height, width = shape
    if not 0 <= site < height * width:
        raise IndexError(f"site {site} outside {height}x{width} grid")
    row, col = divmod(site, width)
    out = []
    for d, (dr, dc) in enumerate(OFFSETS):
        r, c = row + dr, col + dc
        if 0 <= r < height and 0 <= c < width:
            out.append((d, r * width + c))
    return out


def shifted_neighbors(values: np.ndarray, fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Stack the four directional neighbours of every site.

    Returns ``(vals, present)`` of shape ``(4, H, W)``; ``vals[d]`` holds the
    neighbour in direction ``d`` (``fill`` where it falls off the grid) and
    ``present[d]`` flags the in-bounds ones.
    """
    values = np.asarray(values)
    height, width = values.shape
    vals = np.full((4, height, width), fill, dtype=np.result_type(values.dtype, type(fill)))
    present = np.zeros((4, height, width), dtype=bool)
    vals[UP, 1:, :] = values[:-1, :]
    present[UP, 1:, :] = True
    vals[LEFT, :, 1:] = values[:, :-1]
    present[LEFT, :, 1:] = True
    vals[RIGHT, :, :-1] = values[:, 1:]
    present[RIGHT, :, :-1] = True
    vals[DOWN, :-1, :] = values[1:, :]
    present[DOWN, :-1, :] = True
    return vals, present


def neighbor_sum(labels: np.ndarray) -> np.ndarray:
    """Sum of in-bounds 4-neighbour values at every site."""
    x = np.asarray(labels, dtype=np.int64)
    s = np.zeros_like(x)
    s[1:, :] += x[:-1, :]
    s[:-1, :] += x[1:, :]
    s[:, 1:] += x[:, :-1]
    s[:, :-1] += x[:, 1:]
    return s


def box_overlap(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes."""
    ix = max(0, min(a.x0 + a.w, b.x0 + b.w) - max(a.x0, b.x0))
    iy = max(0, min(a.y0 + a.h, b.y0 + b.h) - max(a.y0, b.y0))
    inter = ix * iy
    if inter == 0:
        return 0.0
    return inter / float(a.area + b.area - inter)


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise MalformedImageError("malformed image: truncated header")
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def load_image(path: str | Path) -> PixelGrid:
    """Read an 8- or 16-bit grayscale PGM (binary P5 or ASCII P2).

    Sample values are returned unscaled, in the file's native range.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise ImageNotFoundError(f"no such image: {path}") from exc
    magic = data[:2]
    if magic in (b"P1", b"P3", b"P4", b"P6", b"P7"):
        raise UnsupportedImageError(f"{path}: not a grayscale PGM (magic {magic.decode()})")
    if magic not in (b"P2", b"P5"):
        raise MalformedImageError(f"malformed image: {path} has no PGM magic number")
    tokens, pos = _header_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise MalformedImageError(f"malformed image: bad header in {path}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise MalformedImageError(f"malformed image: bad header values in {path}")
    body = data[2 + pos :]
    count = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates the header from the raster
        if not body[:1].isspace():
            raise MalformedImageError(f"malformed image: missing raster separator in {path}")
        raster = body[1:]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(raster) < count * dtype.itemsize:
            raise MalformedImageError(f"malformed image: truncated raster in {path}")
        samples = np.frombuffer(raster, dtype=dtype, count=count)
    else:
        try:
            samples = np.array(body.split()[:count], dtype=np.int64)
        except ValueError as exc:
            raise MalformedImageError(f"malformed image: bad ASCII raster in {path}") from exc
        if samples.size < count:
            raise MalformedImageError(f"malformed image: truncated raster in {path}")
    if np.any(samples > maxval):
        raise MalformedImageError(f"malformed image: sample exceeds maxval in {path}")
    return PixelGrid(samples.reshape(height, width).astype(np.float64), maxval=maxval)


def write_pgm(path: str | Path, image, maxval: int | None = None) -> None:
    """Write a P5 PGM.  Values are rounded to integers and must fit ``maxval``.

    ``maxval`` defaults to the grid's own, else 255 or 65535 by range.
    """
    if maxval is None:
        maxval = getattr(image, "maxval", None)
    arr = np.rint(np.asarray(image, dtype=np.float64))
    if maxval is None:
        maxval = 255 if arr.max() <= 255 else 65535
    if arr.min() < 0 or arr.max() > maxval:
        raise ValueError(f"values span [{arr.min()}, {arr.max()}], outside [0, {maxval}]")
    height, width = arr.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def write_label_pgm(path: str | Path, labels) -> None:
    write_pgm(path, np.asarray(labels, dtype=np.float64) * 255.0, maxval=255)


# ---------------------------------------------------------------------------
# Ground truth and manifests
# ---------------------------------------------------------------------------


def read_truth_csv(path: str | Path) -> list[BoundingBox]:
    boxes = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise DatasetError(f"{path}:{lineno}: expected x0,y0,w,h")
            try:
                x0, y0, w, h = (int(cell) for cell in row)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: non-integer box field") from exc
            boxes.append(BoundingBox(x0, y0, w, h))
    return boxes


def write_truth_csv(path: str | Path, boxes: Iterable[BoundingBox]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for box in boxes:
            writer.writerow(box.geometry())


def read_manifest(path: str | Path) -> list[tuple[Path, Path]]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such manifest: {path}")
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected image-path,truth-path")
        pairs.append(tuple(path.parent / p for p in parts))
    return pairs


def write_manifest(path: str | Path, pairs: Sequence[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{img},{truth}\n" for img, truth in pairs))


def load_frames(manifest: str | Path) -> list[Frame]:
    frames = []
    for image_path, truth_path in read_manifest(manifest):
        image = load_image(image_path)
        if not truth_path.exists():
            raise DatasetError(f"no such truth file: {truth_path}")
        truth = read_truth_csv(truth_path)
        frames.append(Frame(image, tuple(truth)))
    return frames


# ---------------------------------------------------------------------------
# key=value parameter files
# ---------------------------------------------------------------------------


def write_kv(path: str | Path, items: dict[str, object]) -> None:
    lines = []
    for key, value in items.items():
        text = repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)
        lines.append(f"{key}={text}\n")
    Path(path).write_text("".join(lines))


def read_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out
