"""Harmonic coefficient norms, degree planning and Hermite/Gaussian tools.

The planner works with the squared norm ||xi_ell||^2 of the conditional mean
xi_ell(y) = E[H_ell(z) | y] of the (possibly reduced) model.  Per-degree
costs are d^{ell/2} / ||xi||^2 in sample mode and d^ell / ||xi||^2 in query
mode; a degree sequence costs as much as its hardest step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy.special import eval_genlaguerre, gammaln

from .estimator import LabelBins, debiased_second_moment
from .harmonic import frame_coefficients, frame_gram, gegenbauer_gram_inplace
from .models import LinkSpec, condition, sample_mim
from .tensor_core import (
    complement,
    f_coeff,
    harmonic_dim,
    identity_power,
    kappa,
    orthonormalize,
    poch,
    sym_basis,
    sym_project,
    tensor_power,
)

MAX_BLOCK = 4096
RANK_RTOL = 0.1


def default_bins(n: int, arity: int = 1) -> int:
    """Bins per label coordinate: about ceil(n^{1/3}) cells in total, at most 64 per axis."""
    total = math.ceil(n ** (1 / 3))
    return max(2, min(64, math.ceil(total ** (1 / arity))))


def _reduced_sample(link: LinkSpec, W, U, n_mc: int, seed: int):
    # draw from the planted model and reduce given U (a subframe of W)
    W = np.asarray(W, dtype=float)
    ds = sample_mim(link, W, n_mc, seed)
    if U is None or np.size(U) == 0:
        return ds.Y, ds.Z, W, np.zeros((W.shape[1], 0)), np.eye(W.shape[1])
    U = np.asarray(U, dtype=float).reshape(W.shape[0], -1)
    coords = W.T @ U
    if np.max(np.abs(W @ coords - U)) > 1e-8:
        raise ValueError("conditioning frame must lie inside span(W)")
    Up = complement(U)
    C_perp = complement(coords, W.shape[1])
    Y, Z, _ = condition(ds.Y, ds.Z, U, Up)
    return Y, Z, Up.T @ W @ C_perp, coords, C_perp


# ---------------------------------------------------------------------------
# ||xi||^2 by within-bin pair U-statistics
# ---------------------------------------------------------------------------

def _subbins(idx, max_block, rng):
    # split each bin into random blocks of at most max_block samples
    order = np.argsort(idx, kind="stable")
    bounds = np.flatnonzero(np.diff(idx[order])) + 1
    for grp in np.split(order, bounds):
        if len(grp) > max_block:
            grp = rng.permutation(grp)
            k = -(-len(grp) // max_block)
            yield from np.array_split(grp, k)
        else:
            yield grp


def pair_ustat(G):
    """Mean off-diagonal entry of a kernel Gram block and its variance."""
    m = G.shape[0]
    diag = np.diag(G)
    rows = G.sum(axis=1) - diag
    total = rows.sum()
    u = total / (m * (m - 1))
    h1 = rows / (m - 1)
    sq = np.einsum("ij,ij->", G, G)
    zeta2 = max((sq - diag @ diag) / (m * (m - 1)) - u**2, 0.0)
    zeta1 = max(np.var(h1, ddof=1) - zeta2 / (m - 1), 0.0) if m > 2 else 0.0
    var = 4 * (m - 2) / (m * (m - 1)) * zeta1 + 2 / (m * (m - 1)) * zeta2
    return u, var


def estimate_xi_norm(link: LinkSpec, W, U=None, ell: int = 1, n_mc: int = 100_000,
                     n_bins: int | None = None, seed: int = 0, max_block: int = MAX_BLOCK):
    """Monte Carlo estimate of ||xi_{U,ell}||^2 with its standard error.

    Within every label bin the squared conditional mean is estimated by the
    pair U-statistic of <H(z_i), H(z_j)> = sqrt(N) Q_ell(<z_i, z_j>).  Bins
    larger than ``max_block`` are split at random into sub-bins, each still
    unbiased.  The standard error comes from the Hoeffding decomposition of
    each U-statistic.
    """
    if ell == 0:
        return 1.0, 0.0
    Y, Z, _, _, _ = _reduced_sample(link, W, U, n_mc, seed)
    n, d = Z.shape
    nb = n_bins or default_bins(n, Y.shape[1])
    bins = LabelBins(Y, nb)
    idx = bins.index(Y)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    sqrt_n = math.sqrt(harmonic_dim(d, ell))
    est, var, used = 0.0, 0.0, 0
    for grp in _subbins(idx, max_block, rng):
        m = len(grp)
        if m < 2:
            continue
        Zb = Z[grp]
        G = gegenbauer_gram_inplace(Zb @ Zb.T, d, ell, sqrt_n)
        u, v = pair_ustat(G)
        p = m / n
        est += p * u
        var += p * p * v
        used += m
    if used < n / 2:
        raise ValueError("too few samples per bin; increase n_mc or reduce n_bins")
    return float(est), math.sqrt(var)


# ---------------------------------------------------------------------------
# spectrum of the frame-coefficient second moment
# ---------------------------------------------------------------------------

@dataclass
class XiEntry:
    ell: int
    xi_norm_sq: float
    std_error: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray         # zeta-space coefficients on sym_basis, columns
    r: int
    t: int
    s0: int
    noise_floor: float
    signal_frame: np.ndarray         # s' x s0 in residual coordinates

    @property
    def significant(self):
        return self.r > 0 and self.xi_norm_sq > 3 * self.std_error


@dataclass
class XiSpectrum:
    cond_rank: int
    entries: dict = field(default_factory=dict)

    def __getitem__(self, ell):
        return self.entries[ell]


def _signal_tensor(V, s, ell):
    # Z0 = sum_j V_j (x) V_j with V_j given as coefficients on sym_basis
    basis = sym_basis(s, ell)
    Z0 = np.zeros((s,) * (2 * ell))
    for coef in V.T:
        T = np.tensordot(coef, basis, axes=1)
        Z0 += np.multiply.outer(T, T)
    return Z0


def _num_rank(M, rtol=RANK_RTOL):
    sv = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(sv > rtol * sv[0])) if sv.size and sv[0] > 0 else 0


def gap_rank(mu, floor, c_mu=0.25, gamma=2.0):
    """Smallest r with mu_r >= c_mu mu_1 and mu_{r+1} <= c_mu mu_1 / gamma."""
    mu = np.where(np.asarray(mu) > floor, mu, 0.0)
    if mu.size == 0 or mu[0] <= 0:
        return 0
    for r in range(1, mu.size + 1):
        nxt = mu[r] if r < mu.size else 0.0
        if mu[r - 1] >= c_mu * mu[0] and nxt <= c_mu * mu[0] / gamma:
            return r
    return int(np.sum(mu >= c_mu * mu[0]))


def estimate_xi_spectrum(link: LinkSpec, W, U=None, ell: int = 1, n_mc: int = 100_000,
                         n_bins: int | None = None, seed: int = 0, a: int | None = None,
                         c_mu: float = 0.25, gamma: float = 2.0) -> XiEntry:
    """Eigen-decomposition of the second moment of the planted coefficients.

    The coefficients of H(z_U) on the residual planted frame are binned by
    label; the debiased second moment of their conditional means is
    expressed in the Frobenius metric of xi, so its trace estimates
    ||xi||^2.  Ranks r (gap rule), t and s0 (ranks of unfoldings of the
    signal tensor built from the top-r eigenvectors) follow.
    """
    Y, Z, Wres, _, _ = _reduced_sample(link, W, U, n_mc, seed)
    n, d = Z.shape
    s = Wres.shape[1]
    if a is None:
        a = 1 if ell == 1 else ell // 2
    C = frame_coefficients(Z @ Wres, ell, d)
    G = frame_gram(s, ell, d)
    gw, gv = np.linalg.eigh(G)
    g_isqrt = (gv / np.sqrt(gw)) @ gv.T
    X = C @ g_isqrt
    nb = n_bins or default_bins(n, Y.shape[1])
    bins = LabelBins(Y, nb)
    idx = bins.index(Y)
    M, noise_sd = debiased_second_moment(idx, X, bins.size)
    mu, vec = np.linalg.eigh(M)
    mu, vec = mu[::-1], vec[:, ::-1]
    D = X.shape[1]
    floor = 3.0 * noise_sd * 2 * math.sqrt(D)
    trace = float(np.trace(M))
    se = _trace_se(idx, X, bins.size)
    r = gap_rank(mu, floor, c_mu, gamma)
    # zeta-space eigen-tensors: undo the metric change and normalize
    V = g_isqrt @ vec[:, :r]
    V = V / np.maximum(np.linalg.norm(V, axis=0), 1e-300)
    if r:
        Z0 = _signal_tensor(V, s, ell)
        t = _num_rank(Z0.reshape(s**a, -1))
        M1 = Z0.reshape(s, -1)
        s0 = _num_rank(M1)
        u, _, _ = np.linalg.svd(M1, full_matrices=False)
        sig = u[:, :s0]
    else:
        t = s0 = 0
        sig = np.zeros((s, 0))
    return XiEntry(ell, trace, se, mu, V, r, t, s0, floor, sig)


def _trace_se(idx, X, n_cells):
    # standard error of sum_b p_b |mean_b|^2 (debiased) via per-bin U-statistics
    n = X.shape[0]
    var = 0.0
    order = np.argsort(idx, kind="stable")
    bounds = np.flatnonzero(np.diff(idx[order])) + 1
    for grp in np.split(order, bounds):
        m = len(grp)
        if m < 3:
            continue
        Xb = X[grp]
        tot = Xb.sum(axis=0)
        sq = np.sum(Xb**2, axis=1)
        u = (tot @ tot - sq.sum()) / (m * (m - 1))
        h1 = (Xb @ tot - sq) / (m - 1)
        cov = np.cov(Xb, rowvar=False).reshape(X.shape[1], X.shape[1])
        mean = tot / m
        zeta2 = max(np.sum(cov * cov) + 2 * mean @ cov @ mean, 0.0)
        zeta1 = max(np.var(h1, ddof=1) - zeta2 / (m - 1), 0.0)
        v = 4 * (m - 2) / (m * (m - 1)) * zeta1 + 2 / (m * (m - 1)) * zeta2
        var += (m / n) ** 2 * v
        del u
    return math.sqrt(var)


# ---------------------------------------------------------------------------
# degree selection and planning
# ---------------------------------------------------------------------------

def cost_exponent(ell: int, log_xi, mode: str):
    """log_d of d^{ell/2}/||xi||^2 (sample) or d^ell/||xi||^2 (query)."""
    if mode not in ("sample", "query"):
        raise ValueError(f"unknown mode {mode!r}")
    base = Fraction(ell, 2) if mode == "sample" else Fraction(ell)
    if isinstance(log_xi, Fraction):
        return base - log_xi
    return float(base) - log_xi


def best_degree(log_xis: dict, mode: str):
    """argmin over ell of the cost exponent; None entries are zero signal."""
    best = None
    for ell in sorted(log_xis):
        lx = log_xis[ell]
        if lx is None:
            continue
        e = cost_exponent(ell, lx, mode)
        if best is None or e < best[1] - 1e-9:
            best = (ell, e)
    return best


def align_complexity(spectrum: XiSpectrum, d: int, mode: str = "sample"):
    """Optimal degree and predicted cost d^{exponent} for one spectrum.

    Returns (ell, cost, exponent) or None when no degree carries a
    detectable signal.
    """
    log_xis = {}
    for ell, e in spectrum.entries.items():
        if ell == 0:
            continue
        log_xis[ell] = math.log(e.xi_norm_sq) / math.log(d) if e.significant else None
    best = best_degree(log_xis, mode)
    if best is None:
        return None
    ell, expo = best
    return ell, float(d) ** expo, expo


@dataclass
class PlanStep:
    ell: int
    exponent: float | Fraction
    increment: int


@dataclass
class LeapPlan:
    mode: str
    steps: list
    total_exponent: float | Fraction | None
    complete: bool
    log_factor: bool = False
    spectra: list = field(default_factory=list)

    @property
    def degrees(self):
        return [st.ell for st in self.steps]


def _greedy(s: int, mode: str, step_fn: Callable):
    # step_fn(state) -> (ell, exponent, new_state, increment, info) or None
    steps, infos, state, rank = [], [], None, 0
    while rank < s:
        res = step_fn(state)
        if res is None:
            break
        ell, expo, state, inc, info = res
        if inc <= 0:
            break
        steps.append(PlanStep(ell, expo, inc))
        infos.append(info)
        rank += inc
    complete = rank >= s
    total = max((st.exponent for st in steps), default=None) if complete else None
    return LeapPlan(mode, steps, total, complete, mode == "query", infos)


def leap_plan(link: LinkSpec, d: int, max_ell: int = 4, mode: str = "sample",
              n_mc: int = 50_000, n_bins: int | None = None, seed: int = 0, W=None) -> LeapPlan:
    """Greedy Monte Carlo degree plan on the planted model.

    Each step estimates the spectrum of the current reduced model for every
    degree up to ``max_ell``, picks the cheapest, and conditions on the
    recovered span predicted by the population ranks.  An incomplete plan
    (``complete=False``) signals an infinite leap.
    """
    W = np.eye(d)[:, :link.s] if W is None else np.asarray(W, dtype=float)
    s = link.s
    probed = []

    def step(coords):
        coords = np.zeros((s, 0)) if coords is None else coords
        U = W @ coords if coords.shape[1] else None
        C_perp = complement(coords, s) if coords.shape[1] else np.eye(s)
        spec = XiSpectrum(coords.shape[1])
        for ell in range(1, max_ell + 1):
            sub = int(np.random.SeedSequence(seed, spawn_key=(coords.shape[1], ell))
                      .generate_state(1)[0])
            spec.entries[ell] = estimate_xi_spectrum(link, W, U, ell, n_mc, n_bins, seed=sub)
        probed.append(spec)
        best = align_complexity(spec, d, mode)
        if best is None:
            return None
        ell, _, expo = best
        entry = spec[ell]
        new = orthonormalize(np.hstack([coords, C_perp @ entry.signal_frame]))
        return ell, expo, new, entry.s0, spec

    plan = _greedy(s, mode, step)
    # keep the spectrum of a stalled step too
    plan.spectra = probed
    return plan


def planted_path(link: LinkSpec, degrees, d: int, n_mc: int = 50_000, seed: int = 0):
    """Population ranks along a fixed degree sequence.

    Returns one (t, s0, coords) triple per step, where ``coords`` (s x s_U)
    are the planted-frame coordinates recovered before that step.
    """
    W = np.eye(d)[:, :link.s]
    coords = np.zeros((link.s, 0))
    out = []
    for step, ell in enumerate(degrees):
        U = W @ coords if coords.shape[1] else None
        sub = int(np.random.SeedSequence(seed, spawn_key=(step,)).generate_state(1)[0])
        entry = estimate_xi_spectrum(link, W, U, ell, n_mc, seed=sub)
        out.append((entry.t, entry.s0, coords))
        if entry.s0:
            C_perp = complement(coords, link.s) if coords.shape[1] else np.eye(link.s)
            coords = orthonormalize(np.hstack([coords, C_perp @ entry.signal_frame]))
    return out


# symbolic planning: groups of planted coordinates with a parity-type signal

@dataclass(frozen=True)
class ParityGroup:
    """Parity on ``coords`` mixed in with squared weight d^{exponent}."""

    coords: frozenset
    exponent: Fraction


def symbolic_xi(groups, recovered: frozenset, ell: int):
    """log_d ||xi_ell||^2 and the coordinates revealed at degree ``ell``.

    A group with m unrecovered coordinates carries signal at degrees
    ell >= m of the same parity as m.
    """
    best, reveal = None, set()
    for g in groups:
        rest = g.coords - recovered
        m = len(rest)
        if m == 0 or ell < m or (ell - m) % 2:
            continue
        if best is None or g.exponent > best:
            best, reveal = g.exponent, set(rest)
        elif g.exponent == best:
            reveal |= rest
    return best, frozenset(reveal)


def symbolic_leap_plan(groups, mode: str = "sample", max_ell: int | None = None) -> LeapPlan:
    """Greedy plan driven by exact xi scalings instead of Monte Carlo."""
    support = frozenset().union(*(g.coords for g in groups))
    s = len(support)
    max_ell = max_ell or 2 * s

    def step(rec):
        rec = frozenset() if rec is None else rec
        log_xis, reveals = {}, {}
        for ell in range(1, max_ell + 1):
            lx, rv = symbolic_xi(groups, rec, ell)
            log_xis[ell], reveals[ell] = lx, rv
        best = best_degree(log_xis, mode)
        if best is None:
            return None
        ell, expo = best
        return ell, expo, rec | reveals[ell], len(reveals[ell]), {"log_xi": log_xis}

    return _greedy(s, mode, step)


def mixture_groups(q: int, k0: int | None = None, k1: int | None = None, k2: int | None = None,
                   p_exponent: Fraction | None = None):
    """Mixture of parities with k0=2q, k1=4q, k2=8q and p = d^{-3q/2}."""
    k0 = 2 * q if k0 is None else k0
    k1 = 4 * q if k1 is None else k1
    k2 = 8 * q if k2 is None else k2
    p_exp = Fraction(-3 * q, 2) if p_exponent is None else Fraction(p_exponent)
    A = ParityGroup(frozenset(range(k1)), 2 * p_exp)
    B = ParityGroup(frozenset(range(k1 - k0, k1 - k0 + k2)), Fraction(0))
    return [A, B]


# ---------------------------------------------------------------------------
# Hermite tensors and the Hermite-to-harmonic coefficients
# ---------------------------------------------------------------------------

def hermite_tensor(x, k: int) -> np.ndarray:
    """Normalized Hermite tensor He_k(x) (dense, k <= 4)."""
    if k > 4:
        raise ValueError("Hermite tensors are capped at k = 4")
    x = np.asarray(x, dtype=float)
    d = x.size
    out = np.zeros((d,) * k)
    for j in range(k // 2 + 1):
        c = (-1) ** j * math.factorial(k) / (2**j * math.factorial(j) * math.factorial(k - 2 * j))
        out += c * sym_project(np.multiply.outer(tensor_power(x, k - 2 * j), identity_power(d, j)))
    return out / math.sqrt(math.factorial(k))


def _check_beta(k, ell):
    if ell < 0 or ell > k or (k - ell) % 2:
        raise ValueError(f"beta_{{{k},{ell}}} needs 0 <= ell <= k with k - ell even")


def beta_coeff(d: int, k: int, ell: int, r):
    """beta_{k,ell}(r) through generalized Laguerre polynomials."""
    _check_beta(k, ell)
    j = (k - ell) // 2
    r = np.asarray(r, dtype=float)
    pref = ((-1) ** j * math.sqrt(math.factorial(k))
            / (2**j * kappa(d, ell) * math.sqrt(harmonic_dim(d, ell)) * math.factorial(ell)
               * poch(d / 2 + ell, j)))
    out = pref * r**ell * eval_genlaguerre(j, d / 2 + ell - 1, r**2 / 2)
    return float(out) if out.ndim == 0 else out


def beta_coeff_sum(d: int, k: int, ell: int, r):
    """beta_{k,ell}(r) from its defining finite sum."""
    _check_beta(k, ell)
    j = (k - ell) // 2
    r = np.asarray(r, dtype=float)
    total = 0.0
    for i in range(j + 1):
        total = total + ((-1) ** i * r ** (k - 2 * i)
                         / (2**i * math.factorial(i) * math.factorial(k - 2 * i))
                         * f_coeff(d, k - 2 * i, j - i))
    out = math.sqrt(math.factorial(k)) / (kappa(d, ell) * math.sqrt(harmonic_dim(d, ell))) * total
    return float(out) if np.ndim(out) == 0 else out


def beta_moments(d: int, ell: int, j: int):
    """Closed-form E[beta_{ell+2j,ell}(r)] and E[beta^2] for r ~ chi_d.

    The mean vanishes identically when ell = 0 and j >= 1.
    """
    if d < 3:
        raise ValueError("need d >= 3")
    k = ell + 2 * j
    kn = kappa(d, ell) * math.sqrt(harmonic_dim(d, ell))
    log_gamma_ratio = float(gammaln(d / 2 + ell / 2) - gammaln(d / 2))
    mean = ((-1) ** j * 2.0 ** (-j + ell / 2) * math.sqrt(math.factorial(k))
            / (kn * math.factorial(ell) * poch(d / 2 + ell, j))
            * math.exp(log_gamma_ratio) * poch(ell / 2, j) / math.factorial(j))
    second = (2.0 ** (ell - 2 * j) * math.factorial(k) / (kn**2 * math.factorial(ell) ** 2)
              * poch(d / 2, ell) / poch(d / 2 + ell, j) / math.factorial(j))
    return mean, second
