"""Ratio-map thresholding, box extraction/merging and ROC evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .core import BoundingBox, box_overlap

MERGE_IOU = 0.5
HIT_IOU = 0.3
DEFAULT_MIN_AREA = 4
DEFAULT_LADDER_SIZE = 21

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ThresholdLadder:
    deltas: tuple[float, ...]

    def __post_init__(self) -> None:
        deltas = tuple(float(d) for d in self.deltas)
        if not deltas:
            raise ValueError("threshold ladder is empty")
        if any(b <= a for a, b in zip(deltas, deltas[1:])):
            raise ValueError("threshold ladder must be strictly increasing")
        object.__setattr__(self, "deltas", deltas)

    def __len__(self) -> int:
        return len(self.deltas)

    def __iter__(self):
        return iter(self.deltas)


def default_ladder(rho_maps, k: int = DEFAULT_LADDER_SIZE, floor: float | None = 0.0) -> ThresholdLadder:
    """``k`` evenly spaced quantiles (duplicates dropped) of the pooled log-rho values.

    Only values ``>= floor`` are pooled: below 0 the converged labelling
    already calls a site background, and whole-map quantiles would spend
    nearly every rung inside the background mass.  ``floor=None`` pools
    everything; so does an empty selection.
    """
    if k < 1:
        raise ValueError("ladder size must be >= 1")
    pooled = np.concatenate([np.asarray(r, dtype=np.float64).ravel() for r in rho_maps])
    if pooled.size == 0:
        raise ValueError("no ratio values to build a ladder from")
    if floor is not None and np.any(pooled >= floor):
        pooled = pooled[pooled >= floor]
    return ThresholdLadder(tuple(np.unique(np.quantile(pooled, np.linspace(0.0, 1.0, k)))))


# ---------------------------------------------------------------------------
# Components and merging
# ---------------------------------------------------------------------------


def components_from_mask(mask, scores, min_area: int = DEFAULT_MIN_AREA) -> list[BoundingBox]:
    """Tight boxes of the 8-connected components of ``mask``.

    Each box is scored with the maximum of ``scores`` over its component;
    components with fewer than ``min_area`` pixels are dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    lab, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        return []
    ids = np.arange(1, count + 1)
    sizes = np.bincount(lab.ravel(), minlength=count + 1)[1:]
    peaks = ndimage.maximum(scores, lab, ids)
    boxes = []
    for comp, sl in enumerate(ndimage.find_objects(lab)):
        if sizes[comp] < min_area:
            continue
        rows, cols = sl
        boxes.append(
            BoundingBox(cols.start, rows.start, cols.stop - cols.start, rows.stop - rows.start, float(peaks[comp]))
        )
    return boxes


def extract_components(rho, delta: float, min_area: int = DEFAULT_MIN_AREA) -> list[BoundingBox]:
    """Boxes around connected regions where ``log rho > delta``."""
    log_rho = np.asarray(rho, dtype=np.float64)
    return components_from_mask(log_rho > delta, log_rho, min_area)


def _score_key(box: BoundingBox) -> float:
    return -math.inf if math.isnan(box.score) else box.score


def _merge_group(group: list[BoundingBox]) -> BoundingBox:
    cx = float(np.mean([b.center[0] for b in group]))
    cy = float(np.mean([b.center[1] for b in group]))
    w = max(1, int(round(float(np.mean([b.w for b in group])))))
    h = max(1, int(round(float(np.mean([b.h for b in group])))))
    score = max((b.score for b in group), key=lambda s: -math.inf if math.isnan(s) else s)
    return BoundingBox(int(round(cx - w / 2.0)), int(round(cy - h / 2.0)), w, h, score)


def merge_boxes(boxes: Sequence[BoundingBox], threshold: float = MERGE_IOU) -> list[BoundingBox]:
    """Replace every transitive group of boxes with IoU >= ``threshold`` by one box.

    The merged box is centred on the mean member centre, has the mean member
    extents (rounded to whole pixels) and keeps the best member score.
    Repeats until no pair qualifies.
    """
    current = list(boxes)
    while True:
        n = len(current)
        parent = list(range(n))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        merged_any = False
        for i in range(n):
            for j in range(i + 1, n):
                if box_overlap(current[i], current[j]) >= threshold:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[rj] = ri
                    merged_any = True
        if not merged_any:
            return current
        groups: dict[int, list[BoundingBox]] = {}
        for i, box in enumerate(current):
            groups.setdefault(find(i), []).append(box)
        current = [g[0] if len(g) == 1 else _merge_group(g) for g in groups.values()]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class FrameCounts(NamedTuple):
    hits: int
    misses: int
    false_alarms: int


def match_detections(
    detections: Sequence[BoundingBox], truth: Sequence[BoundingBox], threshold: float = HIT_IOU
) -> list[tuple[int, int]]:
    """Greedy one-to-one matching, best-scored detection first.

    Each detection takes the unmatched truth box it overlaps most, provided
    IoU >= ``threshold``.  Returns ``(detection_index, truth_index)`` pairs.
    """
    order = sorted(range(len(detections)), key=lambda i: _score_key(detections[i]), reverse=True)
    taken: set[int] = set()
    pairs = []
    for i in order:
        best, best_iou = -1, threshold
        for j, gt in enumerate(truth):
            if j in taken:
                continue
            iou = box_overlap(detections[i], gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken.add(best)
            pairs.append((i, best))
    return pairs


def evaluate_frame(
    detections: Sequence[BoundingBox], truth: Sequence[BoundingBox], threshold: float = HIT_IOU
) -> FrameCounts:
    hits = len(match_detections(detections, truth, threshold))
    return FrameCounts(hits, len(truth) - hits, len(detections) - hits)


@dataclass(frozen=True)
class RocPoint:
    delta: float
    hit_rate: float
    fa_per_frame: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.hit_rate <= 1.0:
            raise ValueError(f"hit rate {self.hit_rate} outside [0, 1]")
        if self.fa_per_frame < 0:
            raise ValueError("false alarms per frame must be non-negative")


@dataclass(frozen=True)
class FrameResult:
    detections: tuple[BoundingBox, ...]
    matches: tuple[tuple[int, int], ...]
    counts: FrameCounts


@dataclass
class EvalReport:
    points: list[RocPoint]
    frames: list[list[FrameResult]] = field(default_factory=list)  # [threshold][frame]

    def is_monotone(self) -> bool:
        """Hit rate and FA rate both non-increasing along the ladder."""
        pairs = zip(self.points, self.points[1:])
        return all(b.hit_rate <= a.hit_rate and b.fa_per_frame <= a.fa_per_frame for a, b in pairs)

    def best_hit_rate(self, max_fa: float) -> float:
        rates = [p.hit_rate for p in self.points if p.fa_per_frame <= max_fa]
        return max(rates, default=0.0)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["delta", "hit_rate", "fa_per_frame"])
            for p in self.points:
                writer.writerow([repr(p.delta), repr(p.hit_rate), repr(p.fa_per_frame)])


def detect(rho, delta: float, min_area: int = DEFAULT_MIN_AREA) -> list[BoundingBox]:
    """Threshold, extract and merge: the detections of one frame at ``delta``."""
    return merge_boxes(extract_components(rho, delta, min_area))


def summarize(results: Sequence[FrameCounts]) -> tuple[float, float]:
    """``(hit_rate, fa_per_frame)`` over a list of per-frame counts."""
    total_truth = sum(c.hits + c.misses for c in results)
    hits = sum(c.hits for c in results)
    fas = sum(c.false_alarms for c in results)
    hit_rate = hits / total_truth if total_truth else 0.0
    return hit_rate, fas / len(results)


def build_roc(
    frames: Sequence[tuple[object, Sequence[BoundingBox]]],
    ladder: ThresholdLadder | Sequence[float],
    min_area: int = DEFAULT_MIN_AREA,
) -> EvalReport:
    """Sweep the ladder over ``(ratio map, truth boxes)`` pairs."""
    if not frames:
        raise ValueError("no frames to evaluate")
    if not isinstance(ladder, ThresholdLadder):
        ladder = ThresholdLadder(tuple(ladder))
    points, details = [], []
    for delta in ladder:
        per_frame = []
        for rho, truth in frames:
            dets = detect(rho, delta, min_area)
            matches = match_detections(dets, truth)
            counts = FrameCounts(len(matches), len(truth) - len(matches), len(dets) - len(matches))
            per_frame.append(FrameResult(tuple(dets), tuple(matches), counts))
        hit_rate, fa = summarize([r.counts for r in per_frame])
        points.append(RocPoint(delta, hit_rate, fa))
        details.append(per_frame)
    return EvalReport(points, details)


def write_detections_csv(path: str | Path, detections: Sequence[tuple[str, Sequence[BoundingBox]]]) -> None:
    """Rows ``frame_id,x0,y0,w,h,score``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_id", "x0", "y0", "w", "h", "score"])
        for frame_id, boxes in detections:
            for b in boxes:
                writer.writerow([frame_id, b.x0, b.y0, b.w, b.h, repr(float(b.score))])


def read_detections_csv(path: str | Path) -> dict[str, list[BoundingBox]]:
    out: dict[str, list[BoundingBox]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame_id", "x0", "y0", "w", "h", "score"]:
            raise ValueError(f"{path}: unexpected detections header {header}")
        for row in reader:
            if not row:
                continue
            frame_id, x0, y0, w, h, score = row
            out.setdefault(frame_id, []).append(BoundingBox(int(x0), int(y0), int(w), int(h), float(score)))
    return out
