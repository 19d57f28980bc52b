import numpy as np
import pytest
import torch

from ftdiff.ftm import CoreSequence

torch.set_num_threads(1)


def lowdim_sequences(B=200, M=8, ranks=(4, 4), seed=0):
    """Core sequences on a 3-d smooth manifold: sum_j a_j sin(w_j t + p_j) * basis_j."""
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((3, *ranks))
    times = np.linspace(0, 1, M)
    out = []
    for _ in range(B):
        a = rng.uniform(0.5, 1.5, 3)
        w = rng.uniform(1.0, 3.0, 3)
        p = rng.uniform(0, 2 * np.pi, 3)
        coef = a * np.sin(np.outer(times, w) + p)  # (M, 3)
        out.append(CoreSequence(times, np.einsum("mj,j...->m...", coef, basis)))
    allc = np.concatenate([s.cores.ravel() for s in out])
    mu, sd = allc.mean(), allc.std()
    return [CoreSequence(s.times, (s.cores - mu) / sd) for s in out]


@pytest.fixture(scope="session")
def lowdim_corpus():
    return lowdim_sequences()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from test_acceptance import ACCEPTANCE_KEY

    table = config.stash.get(ACCEPTANCE_KEY, None)
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        status, detail, seconds = table[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
