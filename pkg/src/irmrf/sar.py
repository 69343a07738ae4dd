"""Simultaneous auto-regressive (SAR) intensity model.

Within class ``l`` each pixel deviates from the class mean by a weighted sum of
its 4-neighbours' deviations plus Gaussian noise::

    y_i - mu = sum_d beta_d (y_{i+d} - mu) + eps,   eps ~ N(0, sigma2)

Neighbours that fall off the grid are dropped from the sum.  Over a whole
rectangular patch this reads ``(I - B)(y - mu) = eps``, which is what
:func:`sample_sar` solves and what the likelihood refinement in
:func:`fit_sar` scores.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize

from .core import DIRECTIONS, OFFSETS, PixelGrid, read_kv, shifted_neighbors, write_kv

VARIANCE_FLOOR = 1e-9
DEFAULT_RIDGE = 1e-8

_LOG_2PI = math.log(2.0 * math.pi)


class InsufficientSamplesError(ValueError):
    pass


class SingularFitError(np.linalg.LinAlgError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SarParams:
    """Per-class SAR parameters; ``beta`` is ordered up, left, right, down."""

    mu: float
    sigma2: float
    beta: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        beta = tuple(float(b) for b in self.beta)
        if len(beta) != 4:
            raise ValueError(f"beta needs 4 directional entries, got {len(beta)}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if not all(math.isfinite(v) for v in (self.mu, self.sigma2, *beta)):
            raise ValueError("SAR parameters must be finite")
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")

    def save(self, path: str | Path) -> None:
        items: dict[str, object] = {"mu": self.mu, "sigma2": self.sigma2}
        items.update({f"beta_{name}": b for name, b in zip(DIRECTIONS, self.beta)})
        write_kv(path, items)

    @classmethod
    def load(cls, path: str | Path) -> SarParams:
        kv = read_kv(path)
        try:
            return cls(
                float(kv["mu"]),
                float(kv["sigma2"]),
                tuple(float(kv[f"beta_{name}"]) for name in DIRECTIONS),
            )
        except KeyError as exc:
            raise ValueError(f"{path}: missing SAR key {exc}") from exc


@dataclass(frozen=True)
class ClassSarModel:
    target: SarParams
    background: SarParams

    def for_label(self, label: int) -> SarParams:
        return self.target if label == 1 else self.background


# ---------------------------------------------------------------------------
# Densities and potentials
# ---------------------------------------------------------------------------


def _present(value) -> bool:
    return value is not None and not (isinstance(value, float) and math.isnan(value))


def sar_conditional_mean(params: SarParams, neighbor_values: Sequence[float | None]) -> float:
    m = params.mu
    for b, y in zip(params.beta, neighbor_values):
        if _present(y):
            m += b * (y - params.mu)
    return m


def sar_conditional_logpdf(
    params: SarParams, y_i: float, neighbor_values: Sequence[float | None]
) -> float:
    """log p(y_i | class, neighbours) for one site.

    ``neighbor_values`` has one slot per direction (up, left, right, down);
    ``None`` or NaN marks a neighbour outside the image.
    """
    resid = y_i - sar_conditional_mean(params, neighbor_values)
    return -0.5 * (_LOG_2PI + math.log(params.sigma2)) - resid * resid / (2.0 * params.sigma2)


def sar_loglik_map(params: SarParams, image) -> np.ndarray:
    """Vectorised :func:`sar_conditional_logpdf` over every pixel of ``image``."""
    y = np.asarray(image, dtype=np.float64)
    nb, present = shifted_neighbors(y - params.mu)
    beta = np.asarray(params.beta)[:, None, None]
    mean = params.mu + np.sum(np.where(present, beta * nb, 0.0), axis=0)
    resid = y - mean
    return -0.5 * (_LOG_2PI + math.log(params.sigma2)) - resid**2 / (2.0 * params.sigma2)


def sar_potentials(params: SarParams, y_i: float, y_j: float, direction: int) -> tuple[float, float]:
    """Pointwise and pairwise clique energies for a site and one neighbour.

    Diagnostic only; the pairwise term squares beta as written in the model's
    energy form, whereas all probabilities use the conditional density.
    """
    di = y_i - params.mu
    dj = y_j - params.mu
    pointwise = di * di / (2.0 * params.sigma2)
    pairwise = params.beta[direction] ** 2 * di * dj / (2.0 * params.sigma2)
    return pointwise, pairwise


# ---------------------------------------------------------------------------
# Training samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SarSamples:
    """Regression samples: centre values and their four neighbours (NaN = absent)."""

    values: np.ndarray
    neighbors: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        nbrs = np.asarray(self.neighbors, dtype=np.float64).reshape(-1, 4)
        if nbrs.shape[0] != values.shape[0]:
            raise ValueError("values and neighbors disagree in length")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "neighbors", nbrs)

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, Sequence[float | None]]]) -> SarSamples:
        values, nbrs = [], []
        for y, nb in pairs:
            values.append(y)
            nbrs.append([v if _present(v) else np.nan for v in nb])
        return cls(np.array(values, dtype=np.float64), np.array(nbrs, dtype=np.float64).reshape(-1, 4))

    @classmethod
    def from_grid(cls, image, mask=None) -> SarSamples:
        """Samples at every pixel (or where ``mask`` is set); neighbours come
        from the full grid, truncated at its border."""
        y = np.asarray(image, dtype=np.float64)
        nb, present = shifted_neighbors(y, fill=np.nan)
        nb = np.where(present, nb, np.nan)
        sel = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        return cls(y[sel], np.moveaxis(nb, 0, -1)[sel])

    @classmethod
    def concat(cls, parts: Iterable[SarSamples]) -> SarSamples:
        parts = list(parts)
        if not parts:
            return cls(np.empty(0), np.empty((0, 4)))
        return cls(
            np.concatenate([p.values for p in parts]),
            np.concatenate([p.neighbors for p in parts]),
        )


# ---------------------------------------------------------------------------
# Least-squares fit
# ---------------------------------------------------------------------------


def _design(samples: SarSamples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    present = ~np.isnan(samples.neighbors)
    nz = np.where(present, samples.neighbors, 0.0)
    return samples.values, nz, present.astype(np.float64)


def _residuals(y, nz, m, mu, beta) -> np.ndarray:
    return y - mu - ((nz - mu) * m) @ beta


def fit_sar_lsq(samples: SarSamples, ridge: float = DEFAULT_RIDGE, max_iter: int = 100) -> SarParams:
    """Least-squares SAR fit over regression samples.

    Minimises ``sum_i (y_i - mu - sum_d beta_d (y_d - mu))^2 + ridge |beta|^2``
    jointly in ``mu`` and ``beta`` with Gauss-Newton, summing only over the
    neighbours each sample actually has.  Border samples are what pin ``mu``
    down when the betas sum to about one.  ``sigma2`` is the mean squared
    residual, floored at :data:`VARIANCE_FLOOR`.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    n = len(samples)
    if n < 5:
        raise InsufficientSamplesError(f"insufficient samples: need at least 5, got {n}")
    y, nz, m = _design(samples)

    # Linear start: y = theta0 - m @ theta_d + (nz*m) @ beta with theta_d = mu*beta_d
    # left free; consistent whenever the border patterns identify theta0.
    x9 = np.column_stack([np.ones(n), -m, nz * m])
    theta, _, rank, _ = np.linalg.lstsq(x9, y, rcond=None)
    if rank == 9:
        mu, beta = float(theta[0]), theta[5:].copy()
    else:
        mu = float(y.mean())
        d = (nz - mu) * m
        a = d.T @ d + ridge * np.eye(4)
        try:
            beta = np.linalg.solve(a, d.T @ (y - mu))
        except np.linalg.LinAlgError:
            beta = np.zeros(4)

    sq = math.sqrt(ridge)
    for _ in range(max_iter):
        d = (nz - mu) * m
        r = y - mu - d @ beta
        jac = np.column_stack([1.0 - m @ beta, d])
        if ridge > 0:
            jac = np.vstack([jac, np.column_stack([np.zeros(4), sq * np.eye(4)])])
            r = np.concatenate([r, -sq * beta])
        step, _, rank, _ = np.linalg.lstsq(jac, r, rcond=None)
        if ridge == 0 and rank < 5:
            raise SingularFitError("singular normal equations; use ridge > 0")
        mu += step[0]
        beta = beta + step[1:]
        if np.max(np.abs(step)) <= 1e-10 * (1.0 + max(abs(mu), np.max(np.abs(beta)))):
            break

    if ridge == 0 and not np.all(np.isfinite(beta)):
        raise SingularFitError("singular normal equations; use ridge > 0")
    resid = _residuals(y, nz, m, mu, beta)
    sigma2 = max(float(np.mean(resid**2)), VARIANCE_FLOOR)
    return SarParams(mu, sigma2, tuple(beta))


# ---------------------------------------------------------------------------
# Exact likelihood on rectangular patches
# ---------------------------------------------------------------------------


def _direction_eigs(b_minus: float, b_plus: float, n: int) -> np.ndarray:
    # tridiagonal Toeplitz with sub-diagonal b_minus, super-diagonal b_plus
    k = np.arange(1, n + 1)
    return 2.0 * np.sqrt(complex(b_minus * b_plus)) * np.cos(k * np.pi / (n + 1))


def sar_eigenvalues(beta: Sequence[float], shape: tuple[int, int]) -> np.ndarray:
    """Eigenvalues of the neighbour-weight matrix B on an ``(h, w)`` grid.

    B is the Kronecker sum of a vertical and a horizontal tridiagonal Toeplitz
    matrix, so its spectrum is every pairwise sum of theirs.
    """
    h, w = shape
    up, left, right, down = beta
    return _direction_eigs(up, down, h)[:, None] + _direction_eigs(left, right, w)[None, :]


def sar_logdet(beta: Sequence[float], shape: tuple[int, int]) -> float:
    """log |det(I - B)| on an ``(h, w)`` grid with truncated borders."""
    return float(np.sum(np.log(np.abs(1.0 - sar_eigenvalues(beta, shape)))))


def spectral_radius(beta: Sequence[float], shape: tuple[int, int]) -> float:
    return float(np.max(np.abs(sar_eigenvalues(beta, shape))))


# Multi-start layout for the likelihood refinement: a 3^4 lattice of
# starting betas around the least-squares estimate, best few polished.
_ML_RADIUS = 0.06
_ML_LEVELS = 3
_ML_KEEP = 4
_ML_SIMPLEX = 0.005
_ML_MAXFEV = 1500


def _as_patches(data) -> list[np.ndarray]:
    if isinstance(data, (PixelGrid, np.ndarray)):
        return [np.asarray(data, dtype=np.float64)]
    return [np.asarray(p, dtype=np.float64) for p in data]


def fit_sar(data, ridge: float = DEFAULT_RIDGE, method: str = "ml") -> SarParams:
    """Fit SAR parameters to one or more rectangular patches.

    Parameters
    ----------
    data : array-like, sequence of array-like, or SarSamples
        A 2-D patch or a list of them.  Each patch is treated as its own grid
        with truncated borders.  Bare regression samples carry no grid
        geometry, so they always get the least-squares fit.
    ridge : float
        Ridge penalty on beta for the least-squares stage.
    method : {"ml", "lsq"}
        ``"lsq"`` stops at the least-squares estimate.  ``"ml"`` (default)
        then maximises the exact Gaussian likelihood of the patches, which
        adds the ``log|det(I - B)|`` Jacobian that least squares ignores; the
        least-squares betas are biased whenever neighbours share noise with
        the centre pixel.

    Returns
    -------
    SarParams
    """
    if method not in ("ml", "lsq"):
        raise ValueError(f"unknown method {method!r}")
    if isinstance(data, SarSamples):
        return fit_sar_lsq(data, ridge=ridge)
    patches = _as_patches(data)
    samples = SarSamples.concat(SarSamples.from_grid(p) for p in patches)
    start = fit_sar_lsq(samples, ridge=ridge)
    if method == "lsq" or start.sigma2 <= VARIANCE_FLOOR:
        return start

    y, nz, m = _design(samples)
    n = y.shape[0]
    shapes: dict[tuple[int, int], int] = {}
    for p in patches:
        shapes[p.shape] = shapes.get(p.shape, 0) + 1

    def profile(beta: np.ndarray) -> tuple[float, float]:
        c = 1.0 - m @ beta
        z = y - (nz * m) @ beta
        cc = float(c @ c)
        mu = float(c @ z) / cc if cc > 0 else float(y.mean())
        r = z - mu * c
        return mu, float(r @ r)

    def objective(beta: np.ndarray) -> float:
        _, rss = profile(beta)
        if rss <= 0:
            return math.inf
        logdet = sum(count * sar_logdet(beta, shape) for shape, count in shapes.items())
        return 0.5 * n * math.log(rss) - logdet

    b0 = np.asarray(start.beta)
    offsets = np.linspace(-_ML_RADIUS, _ML_RADIUS, _ML_LEVELS)
    starts = [b0 + np.array(d) for d in itertools.product(offsets, repeat=4)]
    values = np.array([objective(s) for s in starts])
    best_beta, best_val = b0, objective(b0)
    for idx in np.argsort(values, kind="stable")[:_ML_KEEP]:
        simplex = starts[idx] + np.vstack([np.zeros(4), _ML_SIMPLEX * np.eye(4)])
        res = minimize(
            objective,
            starts[idx],
            method="Nelder-Mead",
            options={"initial_simplex": simplex, "xatol": 1e-7, "fatol": 1e-7, "maxfev": _ML_MAXFEV},
        )
        if res.fun < best_val:
            best_beta, best_val = res.x, float(res.fun)
    mu, rss = profile(best_beta)
    return SarParams(mu, max(rss / n, VARIANCE_FLOOR), tuple(best_beta))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sar_operator(beta: Sequence[float], shape: tuple[int, int]) -> sp.csc_matrix:
    """Sparse ``I - B`` for a row-major ``(h, w)`` grid."""
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for b, (dr, dc) in zip(beta, OFFSETS):
        if b == 0:
            continue
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        src = idx[r0:r1, c0:c1].ravel()
        dst = idx[r0 + dr : r1 + dr, c0 + dc : c1 + dc].ravel()
        rows.append(src)
        cols.append(dst)
        vals.append(np.full(src.size, b))
    eye = sp.identity(h * w, format="csc")
    if not rows:
        return eye
    bmat = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    )
    return (eye - bmat).tocsc()


def sample_sar(params: SarParams, width: int, height: int, seed=None) -> PixelGrid:
    """Exact draw ``y = mu + (I - B)^{-1} eps`` with ``eps ~ N(0, sigma2)`` i.i.d."""
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be positive")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, math.sqrt(params.sigma2), size=width * height)
    op = sar_operator(params.beta, (height, width))
    try:
        dev = spla.splu(op).solve(eps)
    except RuntimeError as exc:
        raise SingularSystemError(f"sparse LU solve of (I - B) failed: {exc}") from exc
    if not np.all(np.isfinite(dev)):
        raise SingularSystemError("sparse LU solve of (I - B) produced non-finite values")
    return PixelGrid(params.mu + dev.reshape(height, width))
