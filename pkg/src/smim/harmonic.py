"""Harmonic tensors, Gegenbauer polynomials and structured unfolded matvecs.

The harmonic tensor of degree ``ell`` at a unit vector z is

    H(z) = kappa * sqrt(N) * P_tf(z^{(x)ell}),

normalized so that ||H(z)||_F^2 = N and E[<A, H(z)> <B, H(z)>] = <A, B> for
traceless symmetric A, B.  The orthonormal Gegenbauer polynomial Q_ell is
pinned by the reproducing identity <H(w), H(z)> = sqrt(N) * Q_ell(<w, z>).
"""
from __future__ import annotations

import math
import string
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from .tensor_core import (
    f_coeff,
    h_coeff,
    harmonic_dim,
    identity_power,
    kappa,
    partial_trace,
    sym_project,
    tensor_power,
)

MAX_PATTERN_ORDER = 4
DENSE_BUDGET = 2_000_000


def _check_unit(z, tol=1e-10):
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ValueError("z must be a vector")
    if abs(np.linalg.norm(z) - 1.0) > tol:
        raise ValueError(f"z must be a unit vector (norm {np.linalg.norm(z):.12g})")
    return z


def harmonic_norm_const(d: int, ell: int) -> float:
    """kappa * sqrt(N), the scale in front of P_tf(z^{(x)ell})."""
    return kappa(d, ell) * math.sqrt(harmonic_dim(d, ell))


def harmonic_tensor(z, ell: int) -> np.ndarray:
    """Dense harmonic tensor H_{d,ell}(z) (small d only)."""
    z = _check_unit(z)
    d = z.size
    if d**ell > DENSE_BUDGET:
        raise MemoryError(f"d^ell = {d**ell} exceeds the dense budget")
    out = np.zeros((d,) * ell)
    for j in range(ell // 2 + 1):
        term = np.multiply.outer(tensor_power(z, ell - 2 * j), identity_power(d, j))
        out += h_coeff(d, ell, j) * sym_project(term)
    return harmonic_norm_const(d, ell) * out


def harmonic_eval(A, z) -> float:
    """<A, H(z)> for traceless symmetric A, without forming H(z)."""
    A = np.asarray(A, dtype=float)
    z = _check_unit(z)
    ell = A.ndim
    if ell == 0:
        return float(A)
    if A.shape[0] != z.size:
        raise ValueError("dimension mismatch between A and z")
    val = A
    for _ in range(ell):
        val = val @ z
    return harmonic_norm_const(z.size, ell) * float(val)


def harmonic_eval_frame(W, B, z) -> float:
    """<P_tf(W^{(x)ell} B), H(z)> for symmetric B over R^s, in O(ell d + s^ell)."""
    W = np.asarray(W, dtype=float)
    B = np.asarray(B, dtype=float)
    z = _check_unit(z)
    d, ell = z.size, B.ndim
    u = W.T @ z
    total = 0.0
    for j in range(ell // 2 + 1):
        tb = partial_trace(B, j)
        for _ in range(ell - 2 * j):
            tb = tb @ u
        total += h_coeff(d, ell, j) * float(tb)
    return harmonic_norm_const(d, ell) * total


# ---------------------------------------------------------------------------
# Gegenbauer polynomials
# ---------------------------------------------------------------------------

def _gegenbauer_normalized(d: int, L: int, t):
    # classical Gegenbauer scaled so that P_ell(1) = 1, degrees 0..L
    t = np.asarray(t, dtype=float)
    out = [np.ones_like(t)]
    if L >= 1:
        out.append(t.copy())
    for ell in range(1, L):
        nxt = ((2 * ell + d - 2) * t * out[ell] - ell * out[ell - 1]) / (ell + d - 2)
        out.append(nxt)
    return out


def gegenbauer(d: int, ell: int, t):
    """Orthonormal Gegenbauer polynomial Q_ell^{(d)}(t) = sqrt(N) P_ell(t)."""
    if d < 3:
        raise ValueError("gegenbauer requires d >= 3")
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(t) > 1 + 1e-12):
        raise ValueError("t must lie in [-1, 1]")
    vals = _gegenbauer_normalized(d, ell, t)
    out = math.sqrt(harmonic_dim(d, ell)) * vals[ell]
    return float(out) if out.ndim == 0 else out


def gegenbauer_coefficients(d: int, ell: int) -> np.ndarray:
    """Monomial coefficients of Q_ell^{(d)}, lowest degree first."""
    from numpy.polynomial import polynomial as npoly

    prev, cur = np.array([1.0]), np.array([0.0, 1.0])
    if ell == 0:
        cur = prev
    for k in range(1, ell):
        nxt = npoly.polysub((2 * k + d - 2) * npoly.polymulx(cur), k * prev) / (k + d - 2)
        prev, cur = cur, nxt
    return math.sqrt(harmonic_dim(d, ell)) * cur


def gegenbauer_gram_inplace(T, d: int, ell: int, scale: float = 1.0) -> np.ndarray:
    """Overwrite an array of inner products t with scale * Q_ell(t) (Horner)."""
    c = scale * gegenbauer_coefficients(d, ell)
    if ell == 0:
        T.fill(c[0])
        return T
    np.clip(T, -1.0, 1.0, out=T)
    t = T.copy()
    T *= c[-1]
    for coef in c[-2:0:-1]:
        if coef != 0.0:
            T += coef
        T *= t
    T += c[0]
    return T


class GegenbauerBasis:
    """Orthonormal family {Q_0, ..., Q_L} for the marginal of z_1 on S^{d-1}."""

    def __init__(self, d: int, L: int):
        if d < 3:
            raise ValueError("GegenbauerBasis requires d >= 3")
        self.d, self.L = d, L
        self.scales = np.array([math.sqrt(harmonic_dim(d, ell)) for ell in range(L + 1)])

    def __call__(self, t):
        vals = _gegenbauer_normalized(self.d, self.L, t)
        return np.array([s * v for s, v in zip(self.scales, vals)])

    def quadrature(self, n_nodes: int | None = None):
        """Gauss-Jacobi nodes and probability weights for the density (1-t^2)^{(d-3)/2}."""
        if self.d > 200:
            raise ValueError("quadrature weights underflow above d = 200; use Monte Carlo")
        alpha = (self.d - 3) / 2
        nodes, weights = roots_jacobi(n_nodes or (self.L + 2), alpha, alpha)
        return nodes, weights / weights.sum()


# ---------------------------------------------------------------------------
# structured unfolded matvecs
# ---------------------------------------------------------------------------

def _pairings(slots, j):
    # all sets of j disjoint unordered pairs drawn from ``slots``
    if j == 0:
        yield ()
        return
    slots = list(slots)
    for idx, first in enumerate(slots):
        for second in slots[idx + 1:]:
            rest = [s for s in slots[idx + 1:] if s != second]
            for tail in _pairings(rest, j - 1):
                yield ((first, second),) + tail


@lru_cache(maxsize=None)
def _index_patterns(ell: int, a: int):
    """Einsum recipes for Mat_{a,ell-a}(P_sym(z^{ell-2j} (x) I^j)) per pattern.

    Returns a tuple of (j, weight, z_rows, z_cols, eye_pairs, x_letters,
    out_letters) where letters name the contraction indices.  ``weight`` is
    the reciprocal pattern count for the given j.
    """
    letters = string.ascii_lowercase.replace("n", "")
    recipes = []
    for j in range(ell // 2 + 1):
        pats = list(_pairings(range(ell), j))
        for pairs in pats:
            slot_letter = {k: letters[k] for k in range(ell)}
            eye_pairs = []
            for p, q in pairs:
                if p >= a:
                    # both in the column group: trace of x
                    slot_letter[q] = slot_letter[p]
                elif q >= a:
                    # row-column pair identifies the two indices
                    slot_letter[q] = slot_letter[p]
                else:
                    eye_pairs.append((slot_letter[p], slot_letter[q]))
            paired = {k for pair in pairs for k in pair}
            z_slots = [k for k in range(ell) if k not in paired]
            z_rows = tuple(slot_letter[k] for k in z_slots if k < a)
            z_cols = tuple(slot_letter[k] for k in z_slots if k >= a)
            x_letters = "".join(slot_letter[k] for k in range(a, ell))
            out_letters = "".join(letters[k] for k in range(a))
            recipes.append((j, 1.0 / len(pats), z_rows, z_cols, tuple(eye_pairs), x_letters, out_letters))
    return tuple(recipes)


def unfold_apply(Z, ell: int, a: int, b: int, X, weights=None, reduce: bool = True):
    """Apply unfolded harmonic tensors of a batch of points to vectors.

    Computes ``Mat_{a,b}(H(z_i)) @ x_i`` for every row ``z_i`` of ``Z``,
    never forming the d^a x d^b matrices.  ``X`` is either one vector of
    length d^b shared by all samples, or an (n, d^b) array of per-sample
    vectors.  With ``reduce`` the weighted sum over samples is returned
    (length d^a); otherwise an (n, d^a) array.

    The cost is O(n (d^a + d^b)) per index pattern.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n, d = Z.shape
    if a < 0 or b < 0 or a + b != ell:
        raise ValueError(f"split ({a},{b}) does not match degree {ell}")
    if ell > MAX_PATTERN_ORDER:
        raise ValueError(f"structured matvec supports ell <= {MAX_PATTERN_ORDER}")
    X = np.asarray(X, dtype=float)
    batched = X.ndim == 2 or (b == 0 and X.ndim == 1 and X.size == n and n > 1)
    if b == 0:
        X = X.reshape(n) if batched else X.reshape(())
    else:
        X = X.reshape((n,) + (d,) * b) if batched else X.reshape((d,) * b)
    w = None if weights is None else np.asarray(weights, dtype=float).reshape(n)
    scale = harmonic_norm_const(d, ell)
    h = [h_coeff(d, ell, j) for j in range(ell // 2 + 1)]
    eye = np.eye(d)
    out_shape = (d,) * a if reduce else (n,) + (d,) * a
    out = np.zeros(out_shape)
    for j, pw, z_rows, z_cols, eye_pairs, x_letters, out_letters in _index_patterns(ell, a):
        subs, ops = [], []
        if w is not None:
            subs.append("n")
            ops.append(w)
        for lt in z_rows + z_cols:
            subs.append("n" + lt)
            ops.append(Z)
        for p, q in eye_pairs:
            subs.append(p + q)
            ops.append(eye)
        subs.append(("n" if batched else "") + x_letters)
        ops.append(X)
        target = ("" if reduce else "n") + out_letters
        has_n = any("n" in s for s in subs)
        if not has_n:
            # pattern without any sample dependence: sum of weights factor
            term = np.einsum(",".join(subs) + "->" + out_letters, *ops)
            if reduce:
                term = term * n
            else:
                term = np.broadcast_to(term, out_shape)
        else:
            term = np.einsum(",".join(subs) + "->" + target, *ops, optimize="greedy")
        out += (scale * h[j] * pw) * term
    return out.reshape(d**a) if reduce else out.reshape(n, d**a)


def unfolded_matvec(z, ell: int, a: int, b: int, v):
    """Mat_{a,b}(H_{d,ell}(z)) @ v without materializing the matrix."""
    z = _check_unit(z)
    v = np.asarray(v, dtype=float)
    d = z.size
    if v.size != d**b:
        raise ValueError(f"v has length {v.size}, expected {d**b}")
    return unfold_apply(z[None, :], ell, a, b, v.reshape(-1) if b else v.reshape(()))


class HarmonicEvaluator:
    """Cached constants for evaluating degree-``ell`` harmonic tensors in R^d."""

    def __init__(self, d: int, ell: int):
        self.d, self.ell = d, ell
        self.kappa = kappa(d, ell)
        self.N = harmonic_dim(d, ell)
        self.h = tuple(h_coeff(d, ell, j) for j in range(ell // 2 + 1))

    def tensor(self, z):
        return harmonic_tensor(z, self.ell)

    def eval(self, A, z):
        return harmonic_eval(A, z)

    def matvec(self, z, a, b, v):
        return unfolded_matvec(z, self.ell, a, b, v)

    def gram(self, Z1, Z2=None):
        """Matrix of <H(z_i), H(z'_j)> via the reproducing identity."""
        Z2 = Z1 if Z2 is None else Z2
        t = np.clip(Z1 @ Z2.T, -1.0, 1.0)
        return math.sqrt(self.N) * gegenbauer(self.d, self.ell, t)


# ---------------------------------------------------------------------------
# products of harmonics
# ---------------------------------------------------------------------------

def product_b_coeff(d: int, p: int, q: int, j: int) -> float:
    """Coefficient b_{p,q,j} in the product-of-harmonics decomposition.

    <A (x) B, H_p(z) (x) H_q(z)> = sum_j b_{p,q,j} <A <>_j B, H_{p+q-2j}(z)>
    for traceless symmetric A (order p) and B (order q).
    """
    if j < 0 or j > min(p, q):
        raise ValueError(f"j={j} out of range for p={p}, q={q}")
    m = p + q - 2 * j
    norm = (kappa(d, p) * kappa(d, q) * math.sqrt(harmonic_dim(d, p) * harmonic_dim(d, q))
            / (kappa(d, m) * math.sqrt(harmonic_dim(d, m))))
    comb = (2**j * math.factorial(p) * math.factorial(q) * math.factorial(m)
            / (math.factorial(p + q) * math.factorial(p - j) * math.factorial(q - j)))
    return f_coeff(d, p + q, j) * norm * comb


# ---------------------------------------------------------------------------
# coefficients of harmonic tensors on a planted frame
# ---------------------------------------------------------------------------

def _poly_eval(T, U):
    # <T, u^{(x)m}> for every row u of U, with m = T.ndim
    val = np.broadcast_to(T, (U.shape[0],) + T.shape)
    for _ in range(T.ndim):
        val = np.einsum("n...i,ni->n...", val, U)
    return val


def frame_coefficients(U, ell: int, d: int) -> np.ndarray:
    """Coordinates <P_tf(W^{(x)ell} E_k), H_{d,ell}(z)> for a batch.

    ``U`` holds the projections W^T z (n x s) and ``E_k`` runs over the
    orthonormal basis of symmetric tensors over R^s returned by
    :func:`smim.tensor_core.sym_basis`.  Cost O(n s^ell) per basis element.
    """
    from .tensor_core import sym_basis

    U = np.atleast_2d(np.asarray(U, dtype=float))
    n, s = U.shape
    basis = sym_basis(s, ell)
    scale = harmonic_norm_const(d, ell)
    out = np.zeros((n, basis.shape[0]))
    for j in range(ell // 2 + 1):
        hj = h_coeff(d, ell, j)
        for k, E in enumerate(basis):
            out[:, k] += hj * _poly_eval(partial_trace(E, j), U)
    return scale * out


def frame_gram(s: int, ell: int, d: int) -> np.ndarray:
    """Gram matrix <P_tf(W^{(x)ell} E_k), P_tf(W^{(x)ell} E_m)> in R^d."""
    from .tensor_core import sym_basis

    basis = sym_basis(s, ell)
    G = np.zeros((basis.shape[0],) * 2)
    for j in range(ell // 2 + 1):
        tr = np.array([partial_trace(E, j).ravel() for E in basis])
        G += h_coeff(d, ell, j) * tr @ tr.T
    return G
