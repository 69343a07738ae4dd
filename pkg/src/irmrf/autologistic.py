"""Auto-logistic prior over binary labels.

Each label's conditional given its 4-neighbours is logistic in the number of
target neighbours::

    p(x_i = 1 | x_N) = sigmoid(nu + gamma * S_i),   S_i = sum_{j in N_i} x_j

with ``nu`` shared by all sites and ``gamma`` shared by all four directions.
Parameters are learned by maximising the log pseudo-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .core import LabelGrid, neighbor_sum, read_kv, write_kv


class DegenerateLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class AutoParams:
    nu: float
    gamma: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "nu", float(self.nu))
        object.__setattr__(self, "gamma", float(self.gamma))
        if not (math.isfinite(self.nu) and math.isfinite(self.gamma)):
            raise ValueError("auto-logistic parameters must be finite")

    def save(self, path: str | Path) -> None:
        write_kv(path, {"nu": self.nu, "gamma": self.gamma})

    @classmethod
    def load(cls, path: str | Path) -> AutoParams:
        kv = read_kv(path)
        try:
            return cls(float(kv["nu"]), float(kv["gamma"]))
        except KeyError as exc:
            raise ValueError(f"{path}: missing auto-logistic key {exc}") from exc


def auto_conditional(params: AutoParams, neighbor_labels: Sequence[int]) -> float:
    """p(x_i = 1 | neighbours) for 0-4 in-bounds neighbour labels."""
    return float(expit(params.nu + params.gamma * sum(neighbor_labels)))


def auto_potentials(params: AutoParams, x_i: int, x_j: int) -> tuple[float, float]:
    """Singleton and pair clique energies ``(nu x_i, gamma x_i x_j)``; diagnostic only."""
    return params.nu * x_i, params.gamma * x_i * x_j


def _grids(labels) -> list[np.ndarray]:
    if isinstance(labels, (LabelGrid, np.ndarray)):
        return [np.asarray(labels, dtype=np.int64)]
    return [np.asarray(g, dtype=np.int64) for g in labels]


def _stats(labels) -> tuple[np.ndarray, np.ndarray]:
    """Flattened ``(x, S)`` over one grid or a list of grids."""
    grids = _grids(labels)
    x = np.concatenate([g.ravel() for g in grids])
    s = np.concatenate([neighbor_sum(g).ravel() for g in grids])
    return x.astype(np.float64), s.astype(np.float64)


def log_pll(params: AutoParams, labels) -> float:
    """Log pseudo-likelihood of one label grid (or the sum over a list of grids).

    Evaluated term by term as
    ``sum_i [nu x_i + gamma x_i S_i] - sum_i log(1 + exp(nu + gamma S_i))``.
    """
    x, s = _stats(labels)
    z = params.nu + params.gamma * s
    return float(np.sum(x * z) - np.sum(np.logaddexp(0.0, z)))


def log_pll_gradient(params: AutoParams, labels) -> tuple[float, float]:
    x, s = _stats(labels)
    resid = x - expit(params.nu + params.gamma * s)
    return float(np.sum(resid)), float(np.sum(s * resid))


@dataclass
class FitTrace:
    """Accepted-step history of :func:`fit_auto`."""

    lpll: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return max(len(self.lpll) - 1, 0)


def fit_auto(
    labels,
    tol: float = 1e-6,
    max_iter: int = 500,
    trace: FitTrace | None = None,
) -> AutoParams:
    """Maximum pseudo-likelihood estimate of ``(nu, gamma)``.

    Ascent along the Newton direction of the (concave) log pseudo-likelihood
    with Armijo backtracking from a unit step, halving on rejection.  Stops
    when the gradient's infinity norm drops below ``tol`` or after
    ``max_iter`` iterations.  Accepts one label grid or a list of them.
    """
    x, s = _stats(labels)
    if x.size == 0 or np.all(x == x[0]):
        raise DegenerateLabelsError("degenerate labels: both classes must be present")
    if trace is None:
        trace = FitTrace()

    def value(theta: np.ndarray) -> float:
        z = theta[0] + theta[1] * s
        return float(np.sum(x * z) - np.sum(np.logaddexp(0.0, z)))

    theta = np.array([math.log(x.mean() / (1.0 - x.mean())), 0.0])
    f = value(theta)
    trace.lpll.append(f)
    for _ in range(max_iter):
        p = expit(theta[0] + theta[1] * s)
        resid = x - p
        grad = np.array([resid.sum(), (s * resid).sum()])
        gnorm = float(np.max(np.abs(grad)))
        trace.grad_norm.append(gnorm)
        if gnorm < tol:
            trace.converged = True
            break
        w = p * (1.0 - p)
        hess = np.array([[w.sum(), (w * s).sum()], [(w * s).sum(), (w * s * s).sum()]])
        try:
            direction = np.linalg.solve(hess + 1e-12 * np.eye(2), grad)
        except np.linalg.LinAlgError:
            direction = grad
        if not np.all(np.isfinite(direction)) or grad @ direction <= 0:
            direction = grad
        slope = float(grad @ direction)
        step = 1.0
        while step > 1e-20:
            candidate = theta + step * direction
            f_new = value(candidate)
            if f_new >= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break  # no ascent possible at machine precision
        theta, f = candidate, f_new
        trace.lpll.append(f)
    return AutoParams(theta[0], theta[1])


def sample_auto(params: AutoParams, width: int, height: int, sweeps: int, seed=None) -> LabelGrid:
    """Gibbs sampler over the auto-logistic conditionals.

    Each sweep visits the even-parity sites then the odd-parity ones; sites of
    one parity share no neighbours, so updating them together is an exact
    systematic scan.  Starts from an i.i.d. fair-coin field.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    rng = np.random.default_rng(seed)
    x = (rng.random((height, width)) < 0.5).astype(np.int64)
    rows, cols = np.indices((height, width))
    phases = [(rows + cols) % 2 == 0, (rows + cols) % 2 == 1]
    for _ in range(sweeps):
        for phase in phases:
            p = expit(params.nu + params.gamma * neighbor_sum(x))
            u = rng.random((height, width))
            x[phase] = (u[phase] < p[phase]).astype(np.int64)
    return LabelGrid(x)


def log_conditional(params: AutoParams, label: int, neighbor_labels: Sequence[int]) -> float:
    """log p(x_i = label | neighbours)."""
    z = params.nu + params.gamma * sum(neighbor_labels)
    return float(log_expit(z if label == 1 else -z))
