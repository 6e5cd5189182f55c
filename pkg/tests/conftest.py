import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from plrnn_lab.core import PlrnnParams


def make_params(M=3, K=0, N=2, seed=0, a_range=(-0.6, 0.6), w_scale=0.5,
                h_scale=0.5, m_reg=0, obs_kind="linear_gaussian",
                sigma=0.0, gamma=1.0):
    """Random small PLRNN for tests (not an initialization scheme)."""
    rng = np.random.Generator(np.random.Philox(seed))
    a = rng.uniform(*a_range, size=M)
    w = rng.normal(0.0, w_scale / np.sqrt(M), size=(M, M))
    np.fill_diagonal(w, 0.0)
    return PlrnnParams(
        a_diag=a, w_offdiag=w,
        c_input=rng.normal(0.0, 1.0, size=(M, K)),
        h_bias=rng.normal(0.0, h_scale, size=M),
        sigma_diag=np.full(M, sigma), b_loading=rng.normal(0.0, 1.0, size=(N, M)),
        gamma_diag=np.full(N, gamma), mu0=np.zeros(M),
        m_reg=m_reg, obs_kind=obs_kind)


@pytest.fixture
def addition_network():
    """Exact 2-unit solution of the addition problem."""
    return PlrnnParams(
        a_diag=[1.0, 0.0], w_offdiag=[[0.0, 1.0], [0.0, 0.0]],
        c_input=[[0.0, 0.0], [1.0, 1.0]], h_bias=[0.0, -1.0],
        sigma_diag=[0.0, 0.0], b_loading=[[1.0, 0.0]], gamma_diag=[1.0],
        mu0=[0.0, 0.0])
