import numpy as np
import pytest
from conftest import planted_kernels, trial_frames

from smim import models as M
from smim.estimator import (
    DegenerateKernelError,
    EstimatorStall,
    Kernel,
    LabelBins,
    MhatOperator,
    UnfoldConfig,
    adaptive_rank,
    alignment,
    debiased_second_moment,
    dense_mhat,
    multi_step,
    one_step,
    oracle_kernel,
    subspace_iteration,
    symmetrize_kernel,
    table_kernel,
)
from smim.harmonic import harmonic_tensor
from smim.tensor_core import frame_distance, orthonormalize, unfold


def unit_rows(rng, n, d):
    Z = rng.standard_normal((n, d))
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


# kernels

def test_oracle_kernel_noiseless_parity():
    K = oracle_kernel(M.parity(2), 2, 20, seed=1)
    assert K.rank <= 2
    y = np.array([[1.0], [-1.0]])
    G = K(y)
    assert G[0, 0] > 0 and G[1, 1] > 0
    assert G[0, 1] < 0


def test_oracle_kernel_rank_bound():
    s, ell = 2, 2
    K = oracle_kernel(M.parity(s, 0.1), ell, 20, seed=2)
    assert 1 <= K.rank <= s**ell + 1


def test_oracle_kernel_null_is_degenerate():
    with pytest.raises(DegenerateKernelError):
        oracle_kernel(M.null(2), 2, 20, seed=3)


def test_oracle_kernel_invariant_to_label_transform():
    # equal-mass bins depend only on the label order
    link = M.directional("linear", 1, 0.1)
    K = oracle_kernel(link, 1, 15, seed=4)
    y = np.linspace(-3, 3, 50)[:, None]
    base = K(y)
    assert np.all(np.isfinite(base))
    assert np.diag(base).max() <= K.bound + 1e-12


def test_table_kernel():
    K = table_kernel([[0.0]], [[1.0], [-1.0]])
    assert np.allclose(K(np.array([[-0.5], [0.5]])), [[1, -1], [-1, 1]])
    with pytest.raises(ValueError):
        table_kernel([[0.0, 1.0]], [[1.0], [2.0]])


def test_debiased_second_moment_unbiased_under_null():
    rng = np.random.default_rng(5)
    n, cells, D = 40_000, 8, 3
    idx = rng.integers(0, cells, n)
    X = rng.standard_normal((n, D))
    Mh, sd = debiased_second_moment(idx, X, cells)
    assert np.abs(Mh).max() < 5 * sd


def test_label_bins_equal_mass():
    rng = np.random.default_rng(6)
    Y = rng.standard_normal((10_000, 1))
    bins = LabelBins(Y, 10)
    counts = np.bincount(bins.index(Y), minlength=bins.size)
    assert counts.min() > 900 and counts.max() < 1100


def test_symmetrize_sign_invariant_base():
    base = Kernel(lambda Y: np.column_stack([Y[:, 0], Y[:, 1] ** 2]), 2, 1.0, 2)
    sym = symmetrize_kernel(base, 1, n_rot=8, seed=0)
    Y = np.random.default_rng(7).standard_normal((5, 2))
    assert np.allclose(sym(Y), base(Y))
    assert sym.rank == base.rank * 8


def test_symmetrize_error_shrinks_with_rotations():
    base = Kernel(lambda Y: np.column_stack([Y[:, 1], Y[:, 1] * Y[:, 2], Y[:, 2] ** 2]),
                  3, 1.0, 3)
    rng = np.random.default_rng(8)
    Y = rng.standard_normal((30, 3))
    errs = {}
    for n_rot in (4, 16, 64):
        vals = []
        for rep in range(10):
            sym = symmetrize_kernel(base, 2, n_rot=n_rot, seed=rep)
            g = orthonormalize(rng.standard_normal((2, 2)))
            Yg = Y.copy()
            Yg[:, 1:] = Y[:, 1:] @ g.T
            vals.append(np.abs(sym(Yg) - sym(Y)).mean())
        errs[n_rot] = np.mean(vals)
    assert errs[64] < errs[16] < errs[4]


# implicit operator

@pytest.mark.parametrize("ell,a", [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (4, 2), (4, 1)])
def test_mhat_matches_dense(ell, a):
    rng = np.random.default_rng(9)
    d, n = 4 if ell <= 3 else 3, 12
    Z = unit_rows(rng, n, d)
    T = rng.standard_normal((n, 2))
    cfg = UnfoldConfig(ell, a=a, b=ell - a)
    op = MhatOperator(Z, T, cfg)
    assert np.allclose(op.dense(), dense_mhat(Z, T @ T.T, ell, a, ell - a), atol=1e-9)


def test_mhat_example_rank_one():
    rng = np.random.default_rng(10)
    d, n = 5, 50
    Z = unit_rows(rng, n, d)
    T = rng.standard_normal((n, 1))
    op = MhatOperator(Z, T, UnfoldConfig(2))
    v = rng.standard_normal(d)
    assert np.allclose(op.matvec(v), dense_mhat(Z, T @ T.T, 2, 1, 1) @ v, atol=1e-9)
    for _ in range(5):
        v = rng.standard_normal(d)
        assert v @ op.matvec(v) >= -1e-12


def test_mhat_two_samples_offdiagonal():
    rng = np.random.default_rng(11)
    d = 3
    Z = unit_rows(rng, 2, d)
    T = rng.standard_normal((2, 1))
    K12 = float(T[0, 0] * T[1, 0])
    M1, M2 = (unfold(harmonic_tensor(z, 3), 1, 2) for z in Z)
    expected = K12 * (M1 @ M2.T + M2 @ M1.T) / 2
    op = MhatOperator(Z, T, UnfoldConfig(3, a=1, b=2))
    assert np.allclose(op.dense(), expected, atol=1e-12)


# eigensolver

def test_subspace_iteration_diagonal():
    diag = np.zeros(10)
    diag[:3] = [5.0, 3.0, 1.0]
    res = subspace_iteration(lambda X: diag[:, None] * X, 10, 2, tol=1e-10)
    assert np.allclose(res.values, [5, 3])
    assert frame_distance(res.vectors, np.eye(10)[:, :2]) < 1e-8


def test_subspace_iteration_rank_one():
    u = np.random.default_rng(12).standard_normal(8)
    res = subspace_iteration(lambda X: np.outer(u, u) @ X, 8, 1, tol=1e-12)
    assert res.values[0] == pytest.approx(u @ u)
    assert abs(abs(res.vectors[:, 0] @ u) / np.linalg.norm(u) - 1) < 1e-10


def test_subspace_iteration_random_psd():
    rng = np.random.default_rng(13)
    A = rng.standard_normal((50, 50))
    A = A @ A.T
    res = subspace_iteration(lambda X: A @ X, 50, 3, tol=1e-12, max_iter=2000)
    w, V = np.linalg.eigh(A)
    assert frame_distance(res.vectors, V[:, -3:]) < 1e-8


def test_adaptive_rank():
    vals = np.r_[[10.0, 8.0], 0.01 * np.random.default_rng(14).standard_normal(20)]
    assert adaptive_rank(vals) == 2


# one step

def test_one_step_parity():
    d, n = 20, 4000
    link = M.parity(2, 0.1)
    K = oracle_kernel(link, 2, d, seed=15)
    hits = 0
    for tr, W in enumerate(trial_frames(d, 2, 20, 16)):
        ds = M.sample_mim(link, W, n, seed=100 + tr)
        res = one_step(ds, UnfoldConfig(2, t=2, s0=2), K, seed=tr)
        hits += frame_distance(res.frame, W) <= 0.3
    assert hits >= 16


def test_one_step_null_gap():
    d, n = 20, 4000
    link = M.parity(2, 0.1)
    K = oracle_kernel(link, 2, d, seed=17)
    W = trial_frames(d, 2, 1, 18)[0]
    cfg = UnfoldConfig(2, t=2, s0=2)
    sig = one_step(M.sample_mim(link, W, n, 19), cfg, K, seed=1)
    null = one_step(M.sample_mim(M.null(2), W, n, 19), cfg, K, seed=1)
    assert sig.mhat_eigenvalues[0] >= 5 * null.mhat_eigenvalues[0]


def test_one_step_degree_one():
    d, n = 50, 2000
    link = M.directional("linear", 1, 0.1)
    K = oracle_kernel(link, 1, d, seed=20)
    al = []
    for tr, W in enumerate(trial_frames(d, 1, 10, 21)):
        res = one_step(M.sample_mim(link, W, n, 200 + tr), UnfoldConfig(1, a=1, b=0), K, seed=tr)
        al.append(alignment(res.frame, W[:, 0]))
    assert np.median(al) >= 0.8


def test_one_step_deterministic():
    d = 15
    link = M.parity(2, 0.1)
    K = oracle_kernel(link, 2, d, seed=22)
    ds = M.sample_mim(link, trial_frames(d, 2, 1, 23)[0], 1500, 24)
    a = one_step(ds, UnfoldConfig(2, t=2, s0=2), K, seed=5)
    b = one_step(ds, UnfoldConfig(2, t=2, s0=2), K, seed=5)
    assert np.array_equal(a.frame, b.frame)
    assert np.array_equal(a.mhat_eigenvalues, b.mhat_eigenvalues)


def test_one_step_rejects_bad_rank():
    d = 5
    link = M.parity(2, 0.1)
    K = Kernel(lambda Y: Y, 1, 1.0, 1)
    ds = M.sample_mim(link, trial_frames(d, 2, 1, 25)[0], 200, 26)
    with pytest.raises(ValueError):
        one_step(ds, UnfoldConfig(1, t=6), K)


# multi step

def test_multi_step_single_equals_one_step():
    d = 15
    link = M.parity(2, 0.1)
    K = oracle_kernel(link, 2, d, seed=27)
    ds = M.sample_mim(link, trial_frames(d, 2, 1, 28)[0], 1500, 29)
    U, trace = multi_step([ds], [2], [K], [(2, 2)], seed=3)
    res = one_step(ds, UnfoldConfig(2, t=2, s0=2), K, seed=3)
    assert np.array_equal(U, orthonormalize(res.frame))
    assert trace.ranks() == [2]


def test_multi_step_staircase():
    d, n = 30, 8000
    link = M.staircase(sigma=0.0)
    kernels, ranks = planted_kernels(link, [1, 2], d, seed=30)
    assert ranks == [(1, 1), (2, 2)]
    dists = []
    for tr, W in enumerate(trial_frames(d, 3, 5, 31)):
        batches = [M.sample_mim(link, W, n, 300 + 2 * tr + k) for k in range(2)]
        U, trace = multi_step(batches, [1, 2], kernels, ranks, seed=tr)
        dists.append(frame_distance(U, W))
    assert np.median(dists) <= 0.4


def test_multi_step_mixture_recovers_full_rank():
    d, n = 25, 20000
    link = M.mixture_of_parities(1, 2, 3, 0.3, 0.1)
    kernels, ranks = planted_kernels(link, [2, 2], d, seed=32)
    assert ranks == [(2, 2), (2, 2)]
    for tr, W in enumerate(trial_frames(d, 4, 2, 33)):
        batches = [M.sample_mim(link, W, n, 400 + 2 * tr + k) for k in range(2)]
        U, _ = multi_step(batches, [2, 2], kernels, ranks, seed=tr)
        assert U.shape[1] == 4
        assert frame_distance(U, W) <= 0.3


def test_multi_step_stall_carries_trace():
    d = 10
    link = M.parity(2, 0.1)
    ds = M.sample_mim(link, trial_frames(d, 2, 1, 34)[0], 500, 35)
    zero = Kernel(lambda Y: np.zeros((len(Y), 1)), 1, 0.0, 1)
    with pytest.raises(EstimatorStall) as info:
        multi_step([ds], [2], [zero], [(1, 1)])
    assert info.value.trace is not None
    assert len(info.value.trace.steps) == 1


def test_multi_step_validates_inputs():
    ds = M.sample_mim(M.parity(2), trial_frames(6, 2, 1, 36)[0], 100, 37)
    K = Kernel(lambda Y: Y, 1, 1.0, 1)
    with pytest.raises(ValueError):
        multi_step([ds], [2, 2], [K], [(1, 1)])
    with pytest.raises(ValueError):
        multi_step([ds], [2], [K], [(1, 7)])


def test_unfold_config_defaults():
    assert (UnfoldConfig(1).a, UnfoldConfig(1).b) == (1, 0)
    assert (UnfoldConfig(3).a, UnfoldConfig(3).b) == (1, 2)
    assert (UnfoldConfig(4).a, UnfoldConfig(4).b) == (2, 2)
    with pytest.raises(ValueError):
        UnfoldConfig(2, a=0)


def test_one_step_adaptive_ranks():
    d = 20
    link = M.parity(2, 0.1)
    K = oracle_kernel(link, 2, d, seed=38)
    W = trial_frames(d, 2, 1, 39)[0]
    res = one_step(M.sample_mim(link, W, 4000, 40), UnfoldConfig(2), K, seed=1, adaptive=True)
    assert res.frame.shape[1] == 2
    assert frame_distance(res.frame, W) <= 0.3
