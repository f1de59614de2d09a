import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from smim import models as M
from smim.complexity import (
    ParityGroup,
    XiSpectrum,
    align_complexity,
    best_degree,
    beta_coeff,
    beta_coeff_sum,
    beta_moments,
    cost_exponent,
    default_bins,
    estimate_xi_norm,
    estimate_xi_spectrum,
    gap_rank,
    hermite_tensor,
    leap_plan,
    mixture_groups,
    pair_ustat,
    planted_path,
    symbolic_leap_plan,
    symbolic_xi,
)
from smim.harmonic import harmonic_tensor
from smim.tensor_core import partial_trace, sym_project, tf_project


def eye_frame(d, s):
    return np.eye(d)[:, :s]


# xi norm

def test_xi_norm_degree_zero():
    assert estimate_xi_norm(M.parity(2), eye_frame(10, 2), ell=0) == (1.0, 0.0)


def test_xi_norm_null_link():
    for ell in (1, 2, 3):
        est, se = estimate_xi_norm(M.null(1), eye_frame(15, 1), ell=ell, n_mc=30_000, seed=ell)
        assert abs(est) <= 3 * se


def test_xi_norm_parity():
    W = eye_frame(30, 2)
    e1, s1 = estimate_xi_norm(M.parity(2, 0.1), W, ell=1, n_mc=50_000, seed=1)
    e2, s2 = estimate_xi_norm(M.parity(2, 0.1), W, ell=2, n_mc=50_000, seed=2)
    assert abs(e1) <= 3 * s1
    assert e2 > 0.3 and e2 > 10 * s2


def test_xi_norm_conditioned_staircase():
    # once w1 is known the reduced model carries degree-2 signal
    W = eye_frame(20, 3)
    est, se = estimate_xi_norm(M.staircase(), W, U=W[:, :1], ell=2, n_mc=40_000, seed=3)
    assert est > 10 * se


def test_pair_ustat_matches_brute_force():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((30, 3)) + 0.5
    G = X @ X.T
    u, _ = pair_ustat(G.copy())
    brute = np.mean([G[i, j] for i in range(30) for j in range(30) if i != j])
    assert u == pytest.approx(brute, rel=1e-12)


def test_default_bins():
    assert default_bins(1000) == 10
    assert default_bins(10**9) == 64
    assert default_bins(1000, 2) == 4
    assert default_bins(5) >= 2


# spectrum

def test_spectrum_parity_ranks():
    e = estimate_xi_spectrum(M.parity(2, 0.1), eye_frame(30, 2), ell=2, n_mc=50_000, seed=5)
    assert (e.r, e.t, e.s0) == (1, 2, 2)
    assert e.signal_frame.shape == (2, 2)
    assert e.significant


def test_spectrum_null_is_empty():
    e = estimate_xi_spectrum(M.null(2), eye_frame(20, 2), ell=2, n_mc=30_000, seed=6)
    assert e.r == 0 and not e.significant
    assert np.all(e.eigenvalues <= e.noise_floor)


def test_spectrum_trace_matches_xi_norm():
    link, W = M.parity(2, 0.1), eye_frame(25, 2)
    e = estimate_xi_spectrum(link, W, ell=2, n_mc=60_000, seed=7)
    est, se = estimate_xi_norm(link, W, ell=2, n_mc=60_000, seed=8)
    assert abs(e.xi_norm_sq - est) <= 3 * math.hypot(e.std_error, se)


def test_gap_rank():
    assert gap_rank(np.array([1.0, 0.9, 0.01]), 0.0) == 2
    assert gap_rank(np.array([1.0, 0.05, 0.01]), 0.0) == 1
    assert gap_rank(np.array([0.001, 0.0005]), 0.01) == 0


def test_planted_path_staircase():
    path = planted_path(M.staircase(), [1, 2], 30, 50_000, seed=9)
    assert [(t, s0) for t, s0, _ in path] == [(1, 1), (2, 2)]
    assert path[1][2].shape == (3, 1)
    assert abs(abs(path[1][2][0, 0]) - 1) < 0.05


# degree selection

def test_cost_exponent():
    assert cost_exponent(2, Fraction(0), "sample") == 1
    assert cost_exponent(2, Fraction(0), "query") == 2
    assert cost_exponent(3, -1.0, "sample") == pytest.approx(2.5)
    with pytest.raises(ValueError):
        cost_exponent(1, 0.0, "other")


def test_best_degree_synthetic():
    d = 100
    log_xi = {1: math.log(1e-3) / math.log(d), 2: None, 3: 0.0}
    ell, expo = best_degree(log_xi, "sample")
    assert ell == 3 and d**expo == pytest.approx(10**3)
    # ties resolve to the smaller degree
    assert best_degree({1: 0.0, 3: 1.0}, "sample")[0] == 1


def test_align_complexity_parity():
    d = 30
    spec = XiSpectrum(0)
    for ell in (1, 2, 3):
        spec.entries[ell] = estimate_xi_spectrum(M.parity(2, 0.1), eye_frame(d, 2), ell=ell,
                                                 n_mc=50_000, seed=10 + ell)
    for mode, power in (("sample", 1), ("query", 2)):
        ell, cost, expo = align_complexity(spec, d, mode)
        assert ell == 2
        assert expo == pytest.approx(power - math.log(spec[2].xi_norm_sq) / math.log(d))


@pytest.mark.parametrize("mode", ["sample", "query"])
def test_leap_plan_parity(mode):
    plan = leap_plan(M.parity(2, 0.1), 30, max_ell=3, mode=mode, n_mc=40_000, seed=1)
    assert plan.complete
    assert [(s.ell, s.increment) for s in plan.steps] == [(2, 2)]


def test_leap_plan_staircase():
    plan = leap_plan(M.staircase(), 30, max_ell=3, mode="sample", n_mc=40_000, seed=2)
    assert [(s.ell, s.increment) for s in plan.steps] == [(1, 1), (2, 2)]


def test_leap_plan_null_is_infinite():
    plan = leap_plan(M.null(1), 20, max_ell=2, n_mc=20_000, seed=3)
    assert not plan.complete and plan.total_exponent is None
    assert len(plan.spectra) == 1


# symbolic planning

@pytest.mark.parametrize("q", [1, 2, 3, 5])
def test_symbolic_mixture(q):
    groups = mixture_groups(q)
    sample = symbolic_leap_plan(groups, "sample")
    query = symbolic_leap_plan(groups, "query")
    assert sample.degrees == [8 * q, 2 * q]
    assert sample.total_exponent == 4 * q
    assert query.degrees == [4 * q, 6 * q]
    assert query.total_exponent == 7 * q and query.log_factor


def test_symbolic_xi_parity_rule():
    g = ParityGroup(frozenset({0, 1, 2}), Fraction(0))
    assert symbolic_xi([g], frozenset(), 2) == (None, frozenset())
    assert symbolic_xi([g], frozenset(), 3) == (0, frozenset({0, 1, 2}))
    assert symbolic_xi([g], frozenset({0}), 4)[1] == frozenset({1, 2})


# Hermite tensors and beta coefficients

def test_hermite_low_orders():
    x = np.array([0.3, -1.2, 2.0])
    assert float(hermite_tensor(x, 0)) == 1.0
    assert np.allclose(hermite_tensor(x, 1), x)
    assert np.allclose(hermite_tensor(x, 2), (np.outer(x, x) - np.eye(3)) / math.sqrt(2))
    with pytest.raises(ValueError):
        hermite_tensor(x, 5)


def test_hermite_orthonormality_mc():
    rng = np.random.default_rng(11)
    d, n = 5, 100_000
    X = rng.standard_normal((n, d))
    A = sym_project(rng.standard_normal((d, d)))
    B = sym_project(rng.standard_normal((d, d)))
    fa = (np.einsum("ij,ni,nj->n", A, X, X) - np.trace(A)) / math.sqrt(2)
    fb = (np.einsum("ij,ni,nj->n", B, X, X) - np.trace(B)) / math.sqrt(2)
    x0 = X[0]
    assert np.vdot(A, hermite_tensor(x0, 2)) == pytest.approx(fa[0], rel=1e-12)
    prod = fa * fb
    assert abs(prod.mean() - np.vdot(A, B)) <= 5 * prod.std() / math.sqrt(n)


def test_beta_examples():
    r = np.linspace(0.5, 6, 7)
    for d in (3, 8, 20):
        assert np.allclose(beta_coeff(d, 1, 1, r), r / math.sqrt(d))
        assert np.allclose(beta_coeff(d, 2, 0, r), (r**2 - d) / (math.sqrt(2) * d))
        for k in range(5):
            for ell in range(k % 2, k + 1, 2):
                assert np.allclose(beta_coeff(d, k, ell, r), beta_coeff_sum(d, k, ell, r),
                                   rtol=1e-10, atol=1e-12)
    with pytest.raises(ValueError):
        beta_coeff(5, 3, 2, 1.0)


@settings(max_examples=25, deadline=None)
@given(k=st.integers(0, 4), seed=st.integers(0, 2**31))
def test_hermite_to_harmonic_identity(k, seed):
    rng = np.random.default_rng(seed)
    d = 6
    A = sym_project(rng.standard_normal((d,) * k)) if k else np.array(rng.standard_normal())
    x = rng.standard_normal(d) * rng.uniform(0.3, 3.0)
    r = np.linalg.norm(x)
    lhs = np.vdot(A, hermite_tensor(x, k))
    rhs = 0.0
    for j in range(k // 2 + 1):
        ell = k - 2 * j
        C = partial_trace(A, j) if j else A
        if ell == 0:
            rhs += beta_coeff(d, k, 0, r) * float(C)
        else:
            rhs += beta_coeff(d, k, ell, r) * np.vdot(tf_project(C), harmonic_tensor(x / r, ell))
    assert lhs == pytest.approx(rhs, rel=1e-8, abs=1e-8)


def test_beta_moments_examples():
    for d in (5, 20):
        mean, second = beta_moments(d, 0, 1)
        assert mean == 0.0
        assert second == pytest.approx(1 / d, rel=1e-12)
        m0, s0 = beta_moments(d, 2, 0)
        assert 0 < m0 and 0 < s0


def test_beta_moments_mc():
    rng = np.random.default_rng(12)
    d, n = 20, 200_000
    r = np.sqrt(stats.chi2.rvs(d, size=n, random_state=rng))
    vals = beta_coeff(d, 3, 1, r)
    mean, second = beta_moments(d, 1, 1)
    assert abs(vals.mean() - mean) <= 3 * vals.std() / math.sqrt(n)
    assert abs(np.mean(vals**2) - second) <= 3 * np.std(vals**2) / math.sqrt(n)


def test_beta_second_moment_decay():
    ratio = beta_moments(40, 1, 1)[1] / beta_moments(20, 1, 1)[1]
    assert 0.4 <= ratio <= 0.6
