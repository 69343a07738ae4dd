"""MAP labelling by Iterated Conditional Modes over the coupled posterior.

Every site maximises ``log p(y_i | x_i, y_N) + log p(x_i | x_N)``.  The
intensity term comes from the class SAR models (or i.i.d. Gaussians for the
i-Auto ablation) and does not depend on labels, so it is computed once per
image; only the label prior changes between sweeps.  Sites are visited in a
checkerboard order: all even ``row + col`` sites, then all odd ones.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.special import log_expit

from .autologistic import AutoParams, log_conditional
from .core import LabelGrid, neighbor_sum, neighbors
from .sar import ClassSarModel, SarParams, sar_conditional_logpdf, sar_loglik_map

SAR_AUTO = "SAR-Auto"
SAR_I = "SAR-i"
I_AUTO = "i-Auto"
TAGS = (SAR_AUTO, SAR_I, I_AUTO)

_LOG_2PI = math.log(2.0 * math.pi)


def parse_tag(text: str) -> str:
    for tag in TAGS:
        if text.lower() == tag.lower():
            return tag
    raise ValueError(f"unknown model variant {text!r}; expected one of {', '.join(TAGS)}")


@dataclass(frozen=True)
class IidGaussian:
    mean: float
    var: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mean) and math.isfinite(self.var)) or self.var <= 0:
            raise ValueError(f"invalid Gaussian ({self.mean}, {self.var})")

    def logpdf(self, y):
        return -0.5 * (_LOG_2PI + math.log(self.var)) - (np.asarray(y) - self.mean) ** 2 / (2.0 * self.var)

    @classmethod
    def fit(cls, values) -> IidGaussian:
        v = np.asarray(values, dtype=np.float64).ravel()
        return cls(float(v.mean()), max(float(v.var()), 1e-9))


ClassTerm = Union[SarParams, IidGaussian]


@dataclass(frozen=True)
class ModelVariant:
    """A full model: class intensity terms plus a label prior.

    ``SAR-Auto`` pairs SAR likelihoods with the auto-logistic prior, ``SAR-i``
    keeps SAR but makes labels independent with target rate ``prior``, and
    ``i-Auto`` keeps the prior but treats intensities as i.i.d. Gaussian.
    """

    tag: str
    target: ClassTerm
    background: ClassTerm
    prior: Union[AutoParams, float]

    def __post_init__(self) -> None:
        tag = parse_tag(self.tag)
        object.__setattr__(self, "tag", tag)
        want_class = IidGaussian if tag == I_AUTO else SarParams
        if not (isinstance(self.target, want_class) and isinstance(self.background, want_class)):
            raise TypeError(f"{tag} needs {want_class.__name__} class terms")
        if tag == SAR_I:
            rate = float(self.prior)
            if not 0.0 < rate < 1.0:
                raise ValueError(f"target rate must lie in (0, 1), got {rate}")
            object.__setattr__(self, "prior", rate)
        elif not isinstance(self.prior, AutoParams):
            raise TypeError(f"{tag} needs AutoParams as prior")

    @classmethod
    def sar_auto(cls, sar: ClassSarModel, prior: AutoParams) -> ModelVariant:
        return cls(SAR_AUTO, sar.target, sar.background, prior)

    @classmethod
    def sar_i(cls, sar: ClassSarModel, target_rate: float) -> ModelVariant:
        return cls(SAR_I, sar.target, sar.background, target_rate)

    @classmethod
    def i_auto(cls, target: IidGaussian, background: IidGaussian, prior: AutoParams) -> ModelVariant:
        return cls(I_AUTO, target, background, prior)

    def class_term(self, label: int) -> ClassTerm:
        return self.target if label == 1 else self.background


# ---------------------------------------------------------------------------
# Local posterior
# ---------------------------------------------------------------------------


def _site_intensity_logpdf(term: ClassTerm, y: np.ndarray, site: int) -> float:
    h, w = y.shape
    if isinstance(term, IidGaussian):
        return float(term.logpdf(y.flat[site]))
    nb: list[float | None] = [None] * 4
    for d, j in neighbors((h, w), site):
        nb[d] = float(y.flat[j])
    return sar_conditional_logpdf(term, float(y.flat[site]), nb)


def local_log_posterior(variant: ModelVariant, image, labels, site: int, candidate: int) -> float:
    """log of ``p(y_i | x_i = candidate, y_N) p(x_i = candidate | x_N)`` at one site."""
    y = np.asarray(image, dtype=np.float64)
    x = np.asarray(labels)
    intensity = _site_intensity_logpdf(variant.class_term(candidate), y, site)
    if variant.tag == SAR_I:
        prior = math.log(variant.prior) if candidate == 1 else math.log1p(-variant.prior)
    else:
        nb_labels = [int(x.flat[j]) for _, j in neighbors(x.shape, site)]
        prior = log_conditional(variant.prior, candidate, nb_labels)
    return intensity + prior


def intensity_log_maps(variant: ModelVariant, image) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ``(log p(y|x=0), log p(y|x=1))``."""
    y = np.asarray(image, dtype=np.float64)
    maps = []
    for label in (0, 1):
        term = variant.class_term(label)
        if isinstance(term, IidGaussian):
            maps.append(np.broadcast_to(term.logpdf(y), y.shape).astype(np.float64))
        else:
            maps.append(sar_loglik_map(term, y))
    return maps[0], maps[1]


def prior_log_maps(variant: ModelVariant, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ``(log p(x=0|x_N), log p(x=1|x_N))`` for the current labels."""
    x = np.asarray(labels)
    if variant.tag == SAR_I:
        return (
            np.full(x.shape, math.log1p(-variant.prior)),
            np.full(x.shape, math.log(variant.prior)),
        )
    z = variant.prior.nu + variant.prior.gamma * neighbor_sum(x)
    return log_expit(-z), log_expit(z)


# ---------------------------------------------------------------------------
# ICM
# ---------------------------------------------------------------------------


def checkerboard_phases(shape: tuple[int, int]) -> list[np.ndarray]:
    rows, cols = np.indices(shape)
    parity = (rows + cols) % 2
    return [parity == 0, parity == 1]


def initial_labels(variant: ModelVariant, image) -> LabelGrid:
    """Pointwise maximum-likelihood labels from the intensity term alone."""
    l0, l1 = intensity_log_maps(variant, image)
    return LabelGrid((l1 > l0).astype(np.uint8))


class MonotonicityError(RuntimeError):
    pass


def icm_infer(
    variant: ModelVariant,
    image,
    init_labels=None,
    max_sweeps: int = 50,
) -> tuple[LabelGrid, int]:
    """Run checkerboard ICM to a fixed point.

    Returns the labels and the number of sweeps used.  A sweep updates the
    even phase then the odd phase; iteration stops after the first sweep that
    changes nothing, or after ``max_sweeps``.  Exact ties keep the current
    label.  Every update is checked not to lower its site's local posterior.
    """
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    l0, l1 = intensity_log_maps(variant, image)
    if init_labels is None:
        x = (l1 > l0).astype(np.uint8)
    else:
        x = np.array(init_labels, dtype=np.uint8)
        if x.shape != l0.shape:
            raise ValueError(f"labels shape {x.shape} does not match image {l0.shape}")
    phases = checkerboard_phases(x.shape)

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        changed = 0
        for phase in phases:
            p0, p1 = prior_log_maps(variant, x)
            lp0 = (l0 + p0)[phase]
            lp1 = (l1 + p1)[phase]
            cur = x[phase]
            new = np.where(lp1 > lp0, 1, np.where(lp0 > lp1, 0, cur)).astype(np.uint8)
            before = np.where(cur == 1, lp1, lp0)
            after = np.where(new == 1, lp1, lp0)
            if np.any(after < before):
                raise MonotonicityError("ICM update lowered a local posterior")
            changed += int(np.count_nonzero(new != cur))
            x[phase] = new
        if changed == 0:
            break
    return LabelGrid(x), sweeps


# ---------------------------------------------------------------------------
# Ratio maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RatioMap:
    """Per-pixel ``log rho`` = log posterior(target) - log posterior(background)."""

    log_rho: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.log_rho, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("RatioMap needs a 2-D array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("log rho values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "log_rho", arr)

    @property
    def height(self) -> int:
        return self.log_rho.shape[0]

    @property
    def width(self) -> int:
        return self.log_rho.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_rho.shape

    def __array__(self, dtype=None, copy=None):
        out = self.log_rho if dtype is None else self.log_rho.astype(dtype)
        return out.copy() if copy and out is self.log_rho else out

    def save(self, path: str | Path) -> None:
        """Little-endian ``int32 width, int32 height`` then float64 row-major."""
        header = struct.pack("<ii", self.width, self.height)
        Path(path).write_bytes(header + self.log_rho.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> RatioMap:
        data = Path(path).read_bytes()
        if len(data) < 8:
            raise ValueError(f"{path}: truncated ratio map header")
        width, height = struct.unpack("<ii", data[:8])
        if width < 1 or height < 1 or len(data) != 8 + 8 * width * height:
            raise ValueError(f"{path}: ratio map size does not match header")
        return cls(np.frombuffer(data[8:], dtype="<f8").reshape(height, width))


def ratio_map(variant: ModelVariant, image, labels) -> RatioMap:
    l0, l1 = intensity_log_maps(variant, image)
    p0, p1 = prior_log_maps(variant, labels)
    return RatioMap((l1 + p1) - (l0 + p0))
