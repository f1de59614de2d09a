"""Dense symmetric tensor algebra over R^d.

Tensors are plain numpy arrays of shape ``(d,) * order``; an order-0 tensor
is a 0-d array.  Index order is row-major and 0-based, so the (a, b)
unfolding of a tensor is exactly ``T.reshape(d**a, d**b)``.
"""
from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

MAX_ORDER = 6
LOG_SPACE_DIM = 80


# ---------------------------------------------------------------------------
# dimensions and scalar coefficients
# ---------------------------------------------------------------------------

def sym_dim(s: int, ell: int) -> int:
    """Dimension of the space of symmetric order-``ell`` tensors over R^s."""
    if s < 1 or ell < 0:
        raise ValueError("need s >= 1 and ell >= 0")
    return math.comb(s + ell - 1, ell)


def harmonic_dim(d: int, ell: int) -> int:
    """Dimension N_{d,ell} of degree-``ell`` spherical harmonics on S^{d-1}."""
    if d < 2 or ell < 0:
        raise ValueError("need d >= 2 and ell >= 0")
    if ell == 0:
        return 1
    if ell == 1:
        return d
    return (d + 2 * ell - 2) * math.comb(d + ell - 3, ell - 1) // ell


def _log_poch(x: float, n: int) -> float:
    # log of the rising factorial (x)_n for x > 0
    return float(gammaln(x + n) - gammaln(x))


def poch(x: float, n: int) -> float:
    """Rising factorial (x)_n, accumulated in log space for large arguments."""
    if n == 0:
        return 1.0
    if x > LOG_SPACE_DIM / 2:
        return math.exp(_log_poch(x, n))
    out = 1.0
    for i in range(n):
        out *= x + i
    return out


def _log_double_factorial(n: int) -> float:
    # n!! for integer n >= -1, via the gamma function
    if n in (-1, 0):
        return 0.0
    if n % 2 == 0:
        return (n // 2) * math.log(2.0) + float(gammaln(n // 2 + 1))
    return ((n + 1) / 2) * math.log(2.0) + float(gammaln(n / 2 + 1)) - 0.5 * math.log(math.pi)


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def kappa(d: int, ell: int) -> float:
    """Normalizing constant with kappa * ||P_tf(w^{(x)ell})||_F = 1 for unit w."""
    if d < 3:
        raise ValueError("kappa requires d >= 3")
    if ell == 0:
        return 1.0
    if d > LOG_SPACE_DIM:
        log_k2 = ell * math.log(2.0) + _log_poch(d / 2 - 1, ell) - _log_poch(d - 2, ell)
        return math.exp(0.5 * log_k2)
    return math.sqrt(2.0**ell * poch(d / 2 - 1, ell) / poch(d - 2, ell))


def _check_j(ell: int, j: int) -> None:
    if ell < 0 or j < 0 or 2 * j > ell:
        raise ValueError(f"j={j} out of range for order {ell}")


def h_coeff_recursive(d: int, ell: int, j: int) -> float:
    """Traceless-projection coefficient by the defining recursion."""
    _check_j(ell, j)
    h = 1.0
    for i in range(1, j + 1):
        h *= -(ell - 2 * i + 2) * (ell - 2 * i + 1) / (2 * i * (d + 2 * ell - 2 * i - 2))
    return h


def h_coeff(d: int, ell: int, j: int) -> float:
    """Traceless-projection coefficient h_{ell,j} in closed form.

    Uses exact integer double factorials up to d = 80 and log-gamma above.
    """
    _check_j(ell, j)
    if j == 0:
        return 1.0
    sign = -1.0 if j % 2 else 1.0
    comb = math.factorial(ell) // (2**j * math.factorial(j) * math.factorial(ell - 2 * j))
    top, bottom = d + 2 * ell - 2 * j - 4, d + 2 * ell - 4
    if d <= LOG_SPACE_DIM:
        return sign * comb * _double_factorial(top) / _double_factorial(bottom)
    return sign * comb * math.exp(_log_double_factorial(top) - _log_double_factorial(bottom))


def f_coeff(d: int, ell: int, j: int) -> float:
    """Fischer decomposition weight f_{ell,j}."""
    _check_j(ell, j)
    num = math.factorial(ell)
    den = 4**j * math.factorial(j) * math.factorial(ell - 2 * j)
    return num / den / poch(d / 2 + ell - 2 * j, j)


# ---------------------------------------------------------------------------
# projections, traces, contractions
# ---------------------------------------------------------------------------

def _order(T: np.ndarray) -> int:
    return np.ndim(T)


def _check_cubical(T: np.ndarray) -> int:
    T = np.asarray(T)
    if T.ndim and len(set(T.shape)) != 1:
        raise ValueError(f"tensor must have equal mode sizes, got {T.shape}")
    return T.shape[0] if T.ndim else 0


def sym_project(T) -> np.ndarray:
    """Average of ``T`` over all index permutations."""
    T = np.asarray(T, dtype=float)
    ell = T.ndim
    if ell > MAX_ORDER:
        raise ValueError(f"order {ell} exceeds cap {MAX_ORDER}")
    _check_cubical(T)
    if ell <= 1:
        return T.copy()
    out = np.zeros_like(T)
    for perm in itertools.permutations(range(ell)):
        out += np.transpose(T, perm)
    return out / math.factorial(ell)


def is_symmetric(T, tol: float = 1e-12) -> bool:
    T = np.asarray(T)
    scale = max(1.0, float(np.max(np.abs(T)))) if T.size else 1.0
    return all(
        np.allclose(T, np.transpose(T, p), atol=tol * scale, rtol=0)
        for p in itertools.permutations(range(T.ndim))
    )


def partial_trace(T, j: int = 1) -> np.ndarray:
    """Trace out the first two indices ``j`` times."""
    T = np.asarray(T, dtype=float)
    if T.ndim < 2 * j:
        raise ValueError(f"cannot take {j} traces of an order-{T.ndim} tensor")
    for _ in range(j):
        T = np.trace(T, axis1=0, axis2=1)
    return np.asarray(T)


def identity_power(d: int, j: int) -> np.ndarray:
    """I^{(x)j} as an order-2j tensor."""
    out = np.ones(())
    eye = np.eye(d)
    for _ in range(j):
        out = np.multiply.outer(out, eye)
    return out


def tensor_power(x, ell: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.ones(())
    for _ in range(ell):
        out = np.multiply.outer(out, x)
    return out


def tf_project(T, d: int | None = None) -> np.ndarray:
    """Orthogonal projection onto traceless symmetric tensors.

    Non-symmetric input is symmetrized first.  ``d`` is only needed for
    order-0 input, where the projection is the identity.
    """
    T = sym_project(T)
    ell = T.ndim
    if ell < 2:
        return T
    dim = T.shape[0]
    out = np.zeros_like(T)
    for j in range(ell // 2 + 1):
        tj = partial_trace(T, j)
        out += h_coeff(dim, ell, j) * sym_project(np.multiply.outer(tj, identity_power(dim, j)))
    return out


def is_traceless(T, tol: float = 1e-10) -> bool:
    T = np.asarray(T)
    if T.ndim < 2:
        return True
    return np.linalg.norm(partial_trace(T)) <= tol * max(np.linalg.norm(T), 1e-300)


def fischer_decompose(A) -> list[tuple[int, np.ndarray]]:
    """Components ``(j, P_tf(tau^j A))`` of the Fischer decomposition."""
    A = sym_project(A)
    return [(j, tf_project(partial_trace(A, j))) for j in range(A.ndim // 2 + 1)]


def fischer_reconstruct(components, d: int, ell: int) -> np.ndarray:
    """Inverse of :func:`fischer_decompose`."""
    out = np.zeros((d,) * ell)
    for j, C in components:
        out += f_coeff(d, ell, j) * sym_project(np.multiply.outer(C, identity_power(d, j)))
    return out


def contract(A, B, r: int) -> np.ndarray:
    """Sum the last ``r`` indices of ``A`` against the first ``r`` of ``B``."""
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    if r < 0 or r > min(A.ndim, B.ndim):
        raise ValueError(f"cannot contract {r} indices of orders {A.ndim}, {B.ndim}")
    return np.asarray(np.tensordot(A, B, axes=r))


def diamond(A, B, j: int) -> np.ndarray:
    """A <>_j B = P_tf(P_sym(A contracted_j B))."""
    A, B = np.asarray(A), np.asarray(B)
    if j < 0 or j > min(A.ndim, B.ndim):
        raise ValueError(f"j={j} out of range for orders {A.ndim}, {B.ndim}")
    return tf_project(contract(A, B, j))


# ---------------------------------------------------------------------------
# unfoldings and frames
# ---------------------------------------------------------------------------

def unfold(T, a: int, b: int) -> np.ndarray:
    """(a, b)-matricization with row-major multi-index encoding."""
    T = np.asarray(T)
    if a < 0 or b < 0 or a + b != T.ndim:
        raise ValueError(f"split ({a},{b}) does not match order {T.ndim}")
    d = _check_cubical(T) if T.ndim else 1
    return T.reshape(d**a, d**b)


def refold(M, d: int, a: int, b: int) -> np.ndarray:
    M = np.asarray(M)
    if M.shape != (d**a, d**b):
        raise ValueError(f"matrix shape {M.shape} is not ({d**a}, {d**b})")
    return M.reshape((d,) * (a + b))


def check_frame(W, tol: float = 1e-12) -> np.ndarray:
    """Validate that ``W`` has orthonormal columns and return it as 2-d."""
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if W.ndim != 2 or W.shape[1] > W.shape[0]:
        raise ValueError(f"frame must be d x s with s <= d, got {W.shape}")
    err = np.max(np.abs(W.T @ W - np.eye(W.shape[1]))) if W.shape[1] else 0.0
    if err > tol:
        raise ValueError(f"columns are not orthonormal (error {err:.2e})")
    return W


def orthonormalize(X) -> np.ndarray:
    """Thin QR with positive-diagonal convention."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] == 0:
        return X.copy()
    Q, R = np.linalg.qr(X)
    sgn = np.sign(np.diag(R))
    sgn[sgn == 0] = 1.0
    return Q * sgn


def complement(U, d: int | None = None) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of span(U)."""
    U = np.asarray(U, dtype=float)
    if d is None:
        d = U.shape[0]
    if U.size == 0:
        return np.eye(d)
    # full QR gives a deterministic completion
    Q, R = np.linalg.qr(U, mode="complete")
    return Q[:, U.shape[1]:]


def apply_frame(W, T) -> np.ndarray:
    """W^{(x)ell} T: apply ``W`` (d x s) to every index of ``T``."""
    W = np.asarray(W, dtype=float)
    T = np.asarray(T, dtype=float)
    if T.ndim and T.shape[0] != W.shape[1]:
        raise ValueError(f"tensor dim {T.shape[0]} does not match frame rank {W.shape[1]}")
    out = T
    for _ in range(T.ndim):
        # contract the leading axis and move the new axis to the back
        out = np.tensordot(out, W, axes=([0], [1]))
    return out


def frame_distance(U, V) -> float:
    """Operator norm of the difference of projectors onto span(U), span(V)."""
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    U = U[:, None] if U.ndim == 1 else U
    V = V[:, None] if V.ndim == 1 else V
    if U.shape[0] != V.shape[0]:
        raise ValueError("frames live in different ambient dimensions")
    X = np.hstack([U, V])
    if X.shape[1] == 0:
        return 0.0
    # basis of span(U, V); the projector difference vanishes off it
    B, sv, _ = np.linalg.svd(X, full_matrices=False)
    B = B[:, sv > 1e-12 * max(sv.max(), 1.0)]
    bu, bv = B.T @ U, B.T @ V
    M = bu @ bu.T - bv @ bv.T
    return float(np.max(np.abs(np.linalg.eigvalsh(M)))) if M.size else 0.0


@lru_cache(maxsize=None)
def sym_basis(s: int, ell: int) -> np.ndarray:
    """Orthonormal basis of symmetric order-``ell`` tensors over R^s.

    Returns an array of shape ``(sym_dim(s, ell),) + (s,) * ell``, one basis
    tensor per multiset of indices.
    """
    out = []
    for combo in itertools.combinations_with_replacement(range(s), ell):
        E = np.zeros((s,) * ell)
        for perm in set(itertools.permutations(combo)):
            E[perm] = 1.0
        out.append(E / np.linalg.norm(E))
    basis = np.array(out).reshape((len(out),) + (s,) * ell)
    basis.setflags(write=False)
    return basis
