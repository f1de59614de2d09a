import sys

import numpy as np

from smim.complexity import planted_path
from smim.estimator import oracle_kernel


def planted_kernels(link, degrees, d, n_cal=50_000, seed=0):
    """Oracle kernels and population ranks along a degree sequence."""
    path = planted_path(link, degrees, d, n_cal, seed=seed)
    kernels, ranks = [], []
    for step, (ell, (t, s0, coords)) in enumerate(zip(degrees, path)):
        kernels.append(oracle_kernel(link, ell, d, n_cal, seed=seed + 1 + step,
                                     cond=coords if coords.shape[1] else None))
        ranks.append((max(t, 1), max(s0, 1)))
    return kernels, ranks


def trial_frames(d, s, trials, seed):
    rng = np.random.default_rng(seed)
    from smim.models import random_frame
    return [random_frame(d, s, rng) for _ in range(trials)]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.line(k))
