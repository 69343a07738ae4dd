"""Per-pixel kernel-density background model over a sliding window of frames.

A pixel's background score is the mean Gaussian kernel between its current
value and its values in the last ``T`` frames.  The kernel peaks at 1, so the
score lies in [0, 1] and reads as "how much this pixel looks like its recent
history".  Low scores are foreground.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .core import LabelGrid, PixelGrid

DEFAULT_HISTORY = 50
DEFAULT_BANDWIDTH = 5.0
DEFAULT_TAU = 0.05


class KdeModel:
    """Ring buffer of the last ``history_len`` frames plus a kernel bandwidth.

    Not safe to score and update concurrently.
    """

    def __init__(self, history_len: int = DEFAULT_HISTORY, bandwidth: float = DEFAULT_BANDWIDTH):
        if history_len < 1:
            raise ValueError("history length must be >= 1")
        if not bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        self.history_len = int(history_len)
        self.bandwidth = float(bandwidth)
        self._frames: deque[np.ndarray] = deque(maxlen=self.history_len)

    def __len__(self) -> int:
        return len(self._frames)

    @property
    def shape(self) -> tuple[int, int] | None:
        return self._frames[0].shape if self._frames else None

    def history(self) -> np.ndarray:
        return np.stack(self._frames) if self._frames else np.empty((0, 0, 0))

    def update(self, frame) -> KdeModel:
        """Append ``frame``, evicting the oldest once the buffer is full."""
        arr = np.array(frame, dtype=np.float64)
        if self.shape is not None and arr.shape != self.shape:
            raise ValueError(f"frame shape {arr.shape} does not match model {self.shape}")
        self._frames.append(arr)
        return self

    def background_prob(self, frame) -> PixelGrid:
        if not self._frames:
            raise ValueError("empty history: update the model before scoring")
        y = np.asarray(frame, dtype=np.float64)
        if y.shape != self.shape:
            raise ValueError(f"frame shape {y.shape} does not match model {self.shape}")
        hist = self.history()
        kern = np.exp(-((y[None] - hist) ** 2) / (2.0 * self.bandwidth**2))
        return PixelGrid(np.clip(kern.mean(axis=0), 0.0, 1.0))


def update_model(model: KdeModel, frame) -> KdeModel:
    return model.update(frame)


def kde_background_prob(model: KdeModel, frame) -> PixelGrid:
    return model.background_prob(frame)


def foreground_mask(prob, tau: float = DEFAULT_TAU) -> LabelGrid:
    """1 where the background score falls below ``tau``."""
    return LabelGrid((np.asarray(prob) < tau).astype(np.uint8))


def fuse_and(mrf_labels, fg_mask) -> LabelGrid:
    a = np.asarray(mrf_labels)
    b = np.asarray(fg_mask)
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse grids of shape {a.shape} and {b.shape}")
    return LabelGrid(np.minimum(a, b))
