from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from irmrf.autologistic import (
    AutoParams,
    DegenerateLabelsError,
    FitTrace,
    auto_conditional,
    auto_potentials,
    fit_auto,
    log_conditional,
    log_pll,
    log_pll_gradient,
    sample_auto,
)
from irmrf.core import LabelGrid, neighbor_sum, neighbors

LEARNED = AutoParams(9.54, -4.6924)

params_st = st.builds(
    AutoParams,
    st.floats(-6.0, 6.0, allow_nan=False),
    st.floats(-3.0, 3.0, allow_nan=False),
)
grid3_st = st.lists(st.integers(0, 1), min_size=9, max_size=9).map(lambda v: np.array(v).reshape(3, 3))


def _site_logcond(params: AutoParams, x: np.ndarray, site: int) -> float:
    nb = [int(x.flat[j]) for _, j in neighbors(x.shape, site)]
    return log_conditional(params, int(x.flat[site]), nb)


def _edges(shape):
    """Undirected 4-neighbour edges of a grid, each listed once."""
    h, w = shape
    out = []
    for r in range(h):
        for c in range(w):
            if c + 1 < w:
                out.append((r * w + c, r * w + c + 1))
            if r + 1 < h:
                out.append((r * w + c, (r + 1) * w + c))
    return out


def _log_weight(params: AutoParams, x: np.ndarray, edges) -> float:
    flat = x.ravel()
    return params.nu * flat.sum() + params.gamma * sum(flat[a] * flat[b] for a, b in edges)


# --- conditional ------------------------------------------------------------


def test_uninformative_prior_is_half():
    for nb in ([], [1], [0, 1, 1], [1, 1, 1, 1]):
        assert auto_conditional(AutoParams(0.0, 0.0), nb) == 0.5


def test_learned_params_no_target_neighbours():
    assert auto_conditional(LEARNED, [0, 0, 0, 0]) == pytest.approx(0.9999281, abs=1e-7)


def test_learned_params_all_target_neighbours():
    # 1 / (1 + e^9.2296) = 9.808e-5
    z = 9.54 - 4 * 4.6924
    assert auto_conditional(LEARNED, [1, 1, 1, 1]) == pytest.approx(1.0 / (1.0 + math.exp(-z)), rel=1e-12)
    assert auto_conditional(LEARNED, [1, 1, 1, 1]) == pytest.approx(9.808e-5, rel=1e-3)


@given(params_st, st.lists(st.integers(0, 1), max_size=4))
def test_conditional_normalizes(params, nb):
    p1 = math.exp(log_conditional(params, 1, nb))
    p0 = math.exp(log_conditional(params, 0, nb))
    assert p1 + p0 == pytest.approx(1.0, abs=1e-12)
    assert auto_conditional(params, nb) == pytest.approx(p1, rel=1e-12)


def test_potentials():
    assert auto_potentials(AutoParams(2.0, -1.5), 1, 1) == (2.0, -1.5)
    assert auto_potentials(AutoParams(2.0, -1.5), 0, 1) == (0.0, -0.0)


@pytest.mark.parametrize("params", [AutoParams(-2.0, 1.5), LEARNED, AutoParams(0.3, -0.7)])
def test_exhaustive_joint_oracle(params):
    edges = _edges((3, 3))
    configs = np.array(list(itertools.product((0, 1), repeat=9)))
    logw = np.array([_log_weight(params, c.reshape(3, 3), edges) for c in configs])
    index = {tuple(c): k for k, c in enumerate(configs)}
    worst = 0.0
    for c in configs:
        for site in range(9):
            on, off = c.copy(), c.copy()
            on[site], off[site] = 1, 0
            a, b = logw[index[tuple(on)]], logw[index[tuple(off)]]
            p_joint = 1.0 / (1.0 + math.exp(b - a))
            nb = [int(c[j]) for _, j in neighbors((3, 3), site)]
            worst = max(worst, abs(p_joint - auto_conditional(params, nb)))
    assert worst < 1e-10


# --- pseudo-likelihood ------------------------------------------------------


def test_lpll_uninformative():
    grid = np.array([[0, 1, 1], [1, 0, 0]])
    assert log_pll(AutoParams(0.0, 0.0), grid) == pytest.approx(-6 * math.log(2.0), rel=1e-14)


def test_lpll_all_zero_closed_form():
    val = log_pll(AutoParams(-10.0, 0.0), LabelGrid(np.zeros((3, 3), dtype=np.uint8)))
    assert val == pytest.approx(-9 * math.log1p(math.exp(-10.0)), rel=1e-12)
    assert val == pytest.approx(-4.086e-4, rel=1e-3)


@given(params_st, grid3_st)
def test_lpll_is_sum_of_log_conditionals(params, grid):
    ref = sum(_site_logcond(params, grid, i) for i in range(grid.size))
    assert abs(log_pll(params, grid) - ref) < 1e-12 * max(1.0, abs(ref)) + 1e-12


def test_lpll_over_grid_list_adds():
    a = np.array([[1, 0], [0, 1]])
    b = np.array([[1, 1, 0]])
    p = AutoParams(-0.5, 0.8)
    assert log_pll(p, [a, b]) == pytest.approx(log_pll(p, a) + log_pll(p, b), rel=1e-14)


def test_gradient_all_zero():
    grid = np.zeros((4, 5), dtype=np.uint8)
    assert log_pll_gradient(AutoParams(0.0, 0.0), grid) == (-10.0, 0.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    grid = (rng.random((8, 9)) < 0.4).astype(np.uint8)
    h = 1e-5
    for _ in range(20):
        nu, gamma = rng.uniform(-3, 3), rng.uniform(-2, 2)
        g = np.array(log_pll_gradient(AutoParams(nu, gamma), grid))
        fd = np.array(
            [
                (log_pll(AutoParams(nu + h, gamma), grid) - log_pll(AutoParams(nu - h, gamma), grid)) / (2 * h),
                (log_pll(AutoParams(nu, gamma + h), grid) - log_pll(AutoParams(nu, gamma - h), grid)) / (2 * h),
            ]
        )
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1.0)


# --- fitting ----------------------------------------------------------------


def test_fit_recovers_sampled_params():
    truth = AutoParams(-2.0, 1.5)
    field = sample_auto(truth, 64, 64, sweeps=200, seed=0)
    est = fit_auto(field)
    assert est.nu == pytest.approx(truth.nu, rel=0.15)
    assert est.gamma == pytest.approx(truth.gamma, rel=0.15)


def test_fit_is_stationary_and_monotone():
    field = sample_auto(AutoParams(-1.0, 0.6), 40, 40, sweeps=100, seed=4)
    trace = FitTrace()
    est = fit_auto(field, trace=trace)
    assert trace.converged
    assert np.linalg.norm(log_pll_gradient(est, field)) < 1e-6
    assert np.all(np.diff(trace.lpll) >= 0)
    assert trace.iterations <= 20


def test_fit_checkerboard_is_antiferromagnetic():
    board = np.indices((16, 16)).sum(axis=0) % 2
    assert fit_auto(board, max_iter=50).gamma < -1


@pytest.mark.parametrize("grid", [np.ones((5, 5)), np.zeros((3, 4)), np.zeros((0, 0))])
def test_fit_degenerate(grid):
    with pytest.raises(DegenerateLabelsError, match="degenerate labels"):
        fit_auto(grid)


def test_fit_accepts_grid_list():
    grids = [sample_auto(AutoParams(-1.0, 0.8), 24, 24, sweeps=50, seed=s) for s in range(3)]
    est = fit_auto(grids)
    assert np.max(np.abs(log_pll_gradient(est, grids))) < 1e-6


# --- sampling ---------------------------------------------------------------


def test_saturated_sampler():
    assert np.all(np.asarray(sample_auto(AutoParams(20.0, 0.0), 7, 5, sweeps=1, seed=1)) == 1)


def test_fair_coin_sampler():
    n = 64 * 64
    mean = float(np.asarray(sample_auto(AutoParams(0.0, 0.0), 64, 64, sweeps=1, seed=2)).mean())
    assert abs(mean - 0.5) < 3 * math.sqrt(0.25 / n)


def test_sampler_deterministic():
    p = AutoParams(-1.0, 1.0)
    a = sample_auto(p, 10, 8, sweeps=5, seed=9)
    b = sample_auto(p, 10, 8, sweeps=5, seed=9)
    assert a.shape == (8, 10)
    np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


def test_sampler_rejects_zero_sweeps():
    with pytest.raises(ValueError):
        sample_auto(AutoParams(0.0, 0.0), 3, 3, sweeps=0)


def test_sampler_conditionals_monte_carlo():
    """Long-run conditional frequencies on 3x3 fields against the logistic form.

    The conditional depends on the neighbourhood only through S, so every
    site of every draw contributes to the bin of its own S.
    """
    params = AutoParams(-0.5, 0.7)
    counts = np.zeros((5, 2))
    for seed in np.random.SeedSequence(11).spawn(20000):
        x = np.asarray(sample_auto(params, 3, 3, sweeps=4, seed=seed))
        np.add.at(counts, (neighbor_sum(x).ravel(), x.ravel()), 1)
    for s in range(5):
        total = counts[s].sum()
        assert total > 2000
        assert counts[s, 1] / total == pytest.approx(auto_conditional(params, [1] * s), abs=1e-2)


def test_save_load_roundtrip(tmp_path):
    path = tmp_path / "prior.auto"
    LEARNED.save(path)
    assert AutoParams.load(path) == LEARNED
    (tmp_path / "bad.auto").write_text("nu=1.0\n")
    with pytest.raises(ValueError):
        AutoParams.load(tmp_path / "bad.auto")


def test_params_must_be_finite():
    with pytest.raises(ValueError):
        AutoParams(float("nan"), 0.0)
