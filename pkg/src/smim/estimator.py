"""One-step and multi-step harmonic tensor unfolding.

The one-step estimator forms the kernel-weighted second moment

    M = 1/n^2 sum_{i,j} K(y_i, y_j) Mat(H(z_i)) Mat(H(z_j))^T

(diagonal pairs removed and renormalized when a != b), takes its top-t
eigenvectors by subspace iteration, contracts them to a d x d matrix and
returns the leading s0 eigenvectors.  M is never formed: it is applied
through the finite-rank kernel features and structured unfolded matvecs.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .harmonic import frame_coefficients, unfold_apply
from .models import Dataset, LinkSpec, condition, sample_mim
from .tensor_core import complement, frame_distance, orthonormalize

log = logging.getLogger(__name__)


class DegenerateKernelError(ValueError):
    """The calibration data carry no detectable signal at this degree."""


class EstimatorStall(RuntimeError):
    """A multi-step run produced a degenerate frame; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@dataclass
class Kernel:
    """Finite-rank kernel K(y, y') = sum_r T_r(y) T_r(y')."""

    features: Callable[[np.ndarray], np.ndarray]
    rank: int
    bound: float
    label_arity: int
    info: dict = field(default_factory=dict)

    def __call__(self, Y1, Y2=None):
        F1 = self.features(_as_labels(Y1, self.label_arity))
        F2 = F1 if Y2 is None else self.features(_as_labels(Y2, self.label_arity))
        return F1 @ F2.T


def _as_labels(Y, arity):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None] if arity == 1 else Y[None, :]
    if Y.shape[1] != arity:
        raise ValueError(f"kernel expects labels of arity {arity}, got {Y.shape[1]}")
    return Y


class LabelBins:
    """Equal-mass product bins over the label coordinates."""

    def __init__(self, Y, n_bins: int):
        Y = np.asarray(Y, dtype=float)
        qs = np.linspace(0, 1, n_bins + 1)[1:-1]
        self.edges = [np.unique(np.quantile(col, qs)) for col in Y.T]
        self.shape = tuple(len(e) + 1 for e in self.edges)

    @property
    def size(self):
        return int(np.prod(self.shape))

    def index(self, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        idx = [np.searchsorted(e, col, side="right") for e, col in zip(self.edges, Y.T)]
        return np.ravel_multi_index(idx, self.shape)


def binned_means(idx, X, n_cells):
    """Per-bin counts, means and sums of squared deviations."""
    counts = np.bincount(idx, minlength=n_cells)
    sums = np.zeros((n_cells, X.shape[1]))
    np.add.at(sums, idx, X)
    safe = np.maximum(counts, 1)[:, None]
    means = sums / safe
    dev = X - means[idx]
    ss = np.zeros((n_cells, X.shape[1], X.shape[1]))
    np.add.at(ss, idx, dev[:, :, None] * dev[:, None, :])
    return counts, means, ss


def debiased_second_moment(idx, X, n_cells):
    """Sum_b p_b E[x|b] E[x|b]^T with the within-bin noise removed.

    Returns (moment, noise_sd) where ``noise_sd`` is the approximate
    standard deviation of the moment's entries under no signal.
    """
    n = X.shape[0]
    counts, means, ss = binned_means(idx, X, n_cells)
    D = X.shape[1]
    M = np.zeros((D, D))
    var_terms = 0.0
    for b in np.flatnonzero(counts >= 2):
        nb = counts[b]
        cov = ss[b] / (nb - 1)
        pb = nb / n
        M += pb * (np.outer(means[b], means[b]) - cov / nb)
        var_terms += 2 * (pb * np.linalg.norm(cov, 2) / nb) ** 2
    return (M + M.T) / 2, math.sqrt(var_terms)


def _calibration_frame(link: LinkSpec, d: int):
    # the law is rotation invariant, so coordinate axes serve as planted frame
    return np.eye(d)[:, :link.s]


def residual_frame(W, U):
    """Orthonormal residual signal frame U_perp^T W in the reduced space."""
    Up = complement(U, W.shape[0])
    R = Up.T @ W
    u, sv, _ = np.linalg.svd(R, full_matrices=False)
    return Up, u[:, sv > 1e-8]


def oracle_kernel(link: LinkSpec, ell: int, d: int, n_cal: int = 50_000,
                  n_bins: int = 16, seed: int = 0, cond=None, rcond: float = 0.05,
                  bound_cap: float | None = None) -> Kernel:
    """Binned estimate of the oracle kernel lambda^T E[lambda lambda^T]^+ lambda.

    lambda(y) is the conditional mean of the harmonic-tensor coordinates on
    the planted (residual) frame, estimated on ``n_cal`` calibration samples
    by equal-mass label binning.  ``cond`` is an s x s_U orthonormal matrix
    of planted-frame coordinates to condition on (reduced models); labels
    are then augmented with r_U.  The kernel is the bin-lookup table of the
    whitened means; unseen bins map to zero features.
    """
    W = _calibration_frame(link, d)
    ds = sample_mim(link, W, n_cal, seed)
    Y, Z = ds.Y, ds.Z
    d_res = d
    if cond is not None and np.size(cond):
        U = W @ np.asarray(cond, dtype=float).reshape(link.s, -1)
        Up, Wres = residual_frame(W, U)
        Y, Z, _ = condition(Y, Z, U, Up)
        d_res = Z.shape[1]
    else:
        Wres = W
    if Wres.shape[1] == 0:
        raise DegenerateKernelError("no residual signal directions")
    C = frame_coefficients(Z @ Wres, ell, d_res)
    # keep roughly 50 calibration samples per cell for multi-coordinate labels
    per_axis = max(2, min(n_bins, int((n_cal / 50) ** (1 / Y.shape[1]))))
    bins = LabelBins(Y, per_axis)
    idx = bins.index(Y)
    M, noise_sd = debiased_second_moment(idx, C, bins.size)
    evals, evecs = np.linalg.eigh(M)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    floor = 3.0 * noise_sd * 2 * math.sqrt(C.shape[1])
    if evals[0] <= floor:
        raise DegenerateKernelError(
            f"top second-moment eigenvalue {evals[0]:.3g} is below the noise floor {floor:.3g}")
    keep = evals > max(rcond * evals[0], floor)
    counts, means, _ = binned_means(idx, C, bins.size)
    table = (means @ evecs[:, keep]) / np.sqrt(evals[keep])
    table[counts < 2] = 0.0
    norms = np.sum(table**2, axis=1)
    bound = float(norms.max())
    if bound_cap is not None and bound > bound_cap:
        table *= np.sqrt(np.minimum(1.0, bound_cap / np.maximum(norms, 1e-300)))[:, None]
        bound = bound_cap
    table.setflags(write=False)

    def features(Yq):
        return table[bins.index(Yq)]

    return Kernel(features, int(keep.sum()), bound, Y.shape[1],
                  info={"eigenvalues": evals.tolist(), "noise_floor": floor,
                        "n_bins": bins.size, "ell": ell})


def table_kernel(edges, table, label_arity: int = 1) -> Kernel:
    """Kernel from explicit bin edges (per label coordinate) and feature rows."""
    edges = [np.asarray(e, dtype=float) for e in edges]
    table = np.asarray(table, dtype=float)
    shape = tuple(len(e) + 1 for e in edges)
    if table.shape[0] != int(np.prod(shape)):
        raise ValueError("feature table does not match the bin layout")

    def features(Y):
        Y = np.asarray(Y, dtype=float)
        idx = [np.searchsorted(e, col, side="right") for e, col in zip(edges, Y.T)]
        return table[np.ravel_multi_index(idx, shape)]

    return Kernel(features, table.shape[1], float(np.sum(table**2, axis=1).max()), label_arity)


def haar_rotations(s: int, n_rot: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Haar-distributed orthogonal s x s matrices."""
    return np.array([orthonormalize(rng.standard_normal((s, s))) for _ in range(n_rot)])


def symmetrize_kernel(base: Kernel, s_rot: int, n_rot: int = 16, seed: int = 0) -> Kernel:
    """Average ``base`` over random rotations of the trailing ``s_rot`` label coordinates."""
    if s_rot < 1:
        raise ValueError("need at least one coordinate to rotate")
    rots = haar_rotations(s_rot, n_rot, np.random.default_rng(seed))
    k0 = base.label_arity - s_rot

    def features(Y):
        Y = np.asarray(Y, dtype=float)
        parts = []
        for g in rots:
            Yg = Y.copy()
            Yg[:, k0:] = Y[:, k0:] @ g.T
            parts.append(base.features(Yg))
        return np.hstack(parts) / math.sqrt(n_rot)

    return Kernel(features, base.rank * n_rot, base.bound, base.label_arity,
                  info={**base.info, "n_rot": n_rot, "rotations": rots})


# ---------------------------------------------------------------------------
# implicit M-hat operator
# ---------------------------------------------------------------------------

@dataclass
class UnfoldConfig:
    """Degree, unfolding split, target ranks and solver settings."""

    ell: int
    a: int | None = None
    b: int | None = None
    t: int = 1
    s0: int = 1
    tol: float = 1e-6
    max_iter: int | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.ell < 1:
            raise ValueError("degree must be >= 1")
        if self.a is None and self.b is None:
            self.a, self.b = (1, 0) if self.ell == 1 else (self.ell // 2, self.ell - self.ell // 2)
        elif self.b is None:
            self.b = self.ell - self.a
        elif self.a is None:
            self.a = self.ell - self.b
        if self.a + self.b != self.ell or self.a < 1 or self.b < 0:
            raise ValueError(f"invalid split ({self.a},{self.b}) for degree {self.ell}")
        if self.t < 1 or self.s0 < 1:
            raise ValueError("ranks t and s0 must be >= 1")


class MhatOperator:
    """Implicit kernel-weighted second moment of unfolded harmonic tensors."""

    def __init__(self, Z, features, cfg: UnfoldConfig):
        self.Z = np.asarray(Z, dtype=float)
        self.T = np.asarray(features, dtype=float)
        self.cfg = cfg
        self.n, self.d = self.Z.shape
        self.offdiag = cfg.a != cfg.b
        self.dim = self.d**cfg.a
        self.kdiag = np.sum(self.T**2, axis=1)

    def _left(self, X, weights=None, reduce=True):
        c = self.cfg
        return unfold_apply(self.Z, c.ell, c.a, c.b, X, weights=weights, reduce=reduce)

    def _right(self, v):
        # per-sample Mat(H_i)^T v, i.e. Mat_{b,a}(H_i) v
        c = self.cfg
        return unfold_apply(self.Z, c.ell, c.b, c.a, v, reduce=False)

    def _vprod(self, u):
        # sum_r S_r S_r^T v given u_i = Mat(H_i)^T v
        coef = self.T.T @ u / self.n            # (m, d^b): S_r^T v
        x = self.T @ coef                       # per-sample combination
        return self._left(x) / self.n

    def diag_matvec(self, v):
        """sum_r D_r v = 1/n^2 sum_i K(y_i, y_i) Mat(H_i) Mat(H_i)^T v."""
        return self._left(self._right(v), weights=self.kdiag) / self.n**2

    def matvec(self, v):
        v = np.asarray(v, dtype=float).reshape(self.dim)
        u = self._right(v)
        out = self._vprod(u)
        if self.offdiag:
            out = out - self._left(u, weights=self.kdiag) / self.n**2
            out *= 1 + 1 / (self.n - 1)
        return out

    def matmat(self, X):
        return np.column_stack([self.matvec(x) for x in np.asarray(X).T])

    def dense(self):
        return self.matmat(np.eye(self.dim))


def dense_mhat(Z, K, ell, a, b):
    """Explicit double-sum form of M-hat (small instances only)."""
    from .harmonic import harmonic_tensor
    from .tensor_core import unfold

    n = len(Z)
    mats = [unfold(harmonic_tensor(z, ell), a, b) for z in Z]
    M = np.zeros((mats[0].shape[0],) * 2)
    for i in range(n):
        for j in range(n):
            if a != b and i == j:
                continue
            M += K[i, j] * mats[i] @ mats[j].T
    return M / (n * (n - 1) if a != b else n * n)


# ---------------------------------------------------------------------------
# subspace iteration
# ---------------------------------------------------------------------------

@dataclass
class EigResult:
    vectors: np.ndarray
    values: np.ndarray
    iterations: int
    converged: bool


def subspace_iteration(matmat, D: int, k: int, tol: float = 1e-6, max_iter: int = 200,
                       rng=None, init=None, shift: float = 0.0,
                       oversample: int | None = None) -> EigResult:
    """Top-k eigenpairs of a symmetric operator by block power iteration.

    ``matmat`` maps a D x p block to D x p.  Iterates on ``A + shift I``
    (make it PSD for indefinite operators), applies Rayleigh-Ritz every
    step and stops once the projector distance between consecutive top-k
    Ritz spaces drops below ``tol``.
    """
    if k > D:
        raise ValueError(f"k={k} exceeds operator dimension {D}")
    p = min(D, k + (oversample if oversample is not None else max(2, k)))
    if init is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        init = rng.standard_normal((D, p))
    X = orthonormalize(np.asarray(init, dtype=float)[:, :p])
    if X.shape[1] < p:
        extra = np.random.default_rng(0).standard_normal((D, p - X.shape[1]))
        X = orthonormalize(np.hstack([X, extra]))
    prev = None
    converged = False
    it = 0
    vals = np.zeros(k)
    V = X[:, :k]
    for it in range(1, max_iter + 1):
        AX = matmat(X) + shift * X
        B = X.T @ AX
        theta, S = np.linalg.eigh((B + B.T) / 2)
        order = np.argsort(theta)[::-1]
        theta, S = theta[order], S[:, order]
        V = X @ S[:, :k]
        vals = theta[:k] - shift
        if prev is not None and frame_distance(V, prev) < tol:
            converged = True
            break
        prev = V
        X = orthonormalize(AX @ S)
    return EigResult(V, vals, it, converged)


def _operator_norm_psd(matmat, D, iters=30, seed=0):
    x = np.random.default_rng(seed).standard_normal((D, 1))
    lam = 0.0
    for _ in range(iters):
        y = matmat(x)
        lam = float(np.linalg.norm(y))
        if lam == 0:
            return 0.0
        x = y / lam
    return lam


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    frame: np.ndarray
    mhat_eigenvalues: np.ndarray
    p_eigenvalues: np.ndarray
    iterations: int
    converged: bool
    rank_deficient: bool
    wall_time: float
    ell: int = 0


def adaptive_rank(values, n_sig: float = 4.0) -> int:
    """Count of eigenvalues above median + n_sig * MAD."""
    values = np.sort(np.asarray(values, dtype=float))[::-1]
    # median and MAD tolerate the few signal spikes
    med = np.median(values)
    mad = np.median(np.abs(values - med)) * 1.4826
    return max(1, int(np.sum(values > med + n_sig * max(mad, 1e-12 * abs(values[0])))))


def one_step(data: Dataset, cfg: UnfoldConfig, kernel: Kernel, seed: int = 0,
             init=None, n_probe: int | None = None, adaptive: bool = False) -> StepResult:
    """Algorithm 1: one-step harmonic tensor unfolding with split (a, b)."""
    start = time.perf_counter()
    features = kernel.features(data.Y)
    op = MhatOperator(data.Z, features, cfg)
    d = data.d
    max_iter = cfg.max_iter or 50 * math.ceil(math.log(d))
    k = max(cfg.t, n_probe or 0)
    if adaptive:
        k = max(k, min(op.dim, 12))
    if k > op.dim:
        raise ValueError(f"t={k} exceeds unfolding dimension {op.dim}")
    shift = 0.0
    if op.offdiag:
        # diagonal removal can make M-hat indefinite; shift by a bound on it
        shift = (1 + 1 / (op.n - 1)) * _operator_norm_psd(
            lambda X: np.column_stack([op.diag_matvec(x) for x in X.T]), op.dim, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    eig = subspace_iteration(op.matmat, op.dim, k, tol=cfg.tol, max_iter=max_iter,
                             rng=rng, init=init, shift=shift)
    t = adaptive_rank(eig.values) if adaptive else cfg.t
    V = eig.vectors[:, :t]
    P = np.zeros((d, d))
    for v in V.T:
        Mv = v.reshape(d, -1)
        P += Mv @ Mv.T
    pvals, pvecs = np.linalg.eigh(P)
    pvals, pvecs = pvals[::-1], pvecs[:, ::-1]
    s0 = adaptive_rank(pvals) if adaptive else cfg.s0
    if s0 > d:
        raise ValueError(f"s0={s0} exceeds d={d}")
    deficient = bool(pvals[s0 - 1] <= 1e-8 * max(pvals[0], 1e-300)) or \
        bool(eig.values[t - 1] <= 1e-12 * max(abs(eig.values[0]), 1e-300))
    frame = orthonormalize(pvecs[:, :s0])
    return StepResult(frame, eig.values, pvals, eig.iterations, eig.converged, deficient,
                      time.perf_counter() - start, ell=cfg.ell)


# ---------------------------------------------------------------------------
# multi step
# ---------------------------------------------------------------------------

@dataclass
class RecoveryTrace:
    steps: list = field(default_factory=list)
    frame: np.ndarray | None = None

    def ranks(self):
        return [s.frame.shape[1] for s in self.steps]


def multi_step(batches: Sequence[Dataset], degrees: Sequence[int], kernels: Sequence[Kernel],
               ranks: Sequence[tuple], n_rot: int = 16, seed: int = 0, tol: float = 1e-6,
               max_iter: int | None = None):
    """Algorithm 2: iterate one-step unfolding on successively reduced data.

    ``kernels[t]`` acts on labels augmented by the coordinates already
    recovered (arity k + s_{<t}); it is symmetrized over rotations of those
    coordinates.  Returns the accumulated frame and a RecoveryTrace.
    """
    if not (len(batches) == len(degrees) == len(kernels) == len(ranks)):
        raise ValueError("need one batch, degree, kernel and rank pair per step")
    d = batches[0].d
    if sum(s0 for _, s0 in ranks) > d:
        raise ValueError("total requested rank exceeds d")
    trace = RecoveryTrace()
    U = np.zeros((d, 0))
    for step, (ds, ell, kern, (t, s0)) in enumerate(zip(batches, degrees, kernels, ranks)):
        if ds.d != d:
            raise ValueError("all batches must share the ambient dimension")
        if U.shape[1]:
            Up = complement(U)
            Y, Zr, _ = condition(ds.Y, ds.Z, U, Up)
            reduced = Dataset(Y, Zr, seed=ds.seed)
            kern = symmetrize_kernel(kern, U.shape[1], n_rot,
                                     seed=int(np.random.SeedSequence(seed, spawn_key=(step, 1))
                                              .generate_state(1)[0]))
        else:
            Up = np.eye(d)
            reduced = ds
        cfg = UnfoldConfig(ell, t=t, s0=s0, tol=tol, max_iter=max_iter)
        res = one_step(reduced, cfg, kern, seed=seed + step)
        lifted = Up @ res.frame
        res.frame = lifted
        trace.steps.append(res)
        if res.rank_deficient:
            trace.frame = U
            raise EstimatorStall(f"step {step} (degree {ell}) returned a degenerate frame", trace)
        U = orthonormalize(np.hstack([U, lifted]))
    trace.frame = U
    return U, trace


def alignment(U, w) -> float:
    """Squared norm of the projection of unit ``w`` onto span(U)."""
    w = np.asarray(w, dtype=float).ravel()
    return float(np.sum((np.asarray(U).T @ w) ** 2))
