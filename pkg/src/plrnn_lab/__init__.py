"""Manifold-attractor-regularized piecewise-linear RNNs.

Library layout:

- :mod:`plrnn_lab.core` -- model parameters, latent recursion, generation
- :mod:`plrnn_lab.analysis` -- fixed points, cycles, gradient/Jacobian norms
- :mod:`plrnn_lab.regularizers` -- penalties and initialization schemes
- :mod:`plrnn_lab.train_sgd` -- supervised BPTT training
- :mod:`plrnn_lab.train_em` -- EM-based dynamical-systems reconstruction
- :mod:`plrnn_lab.tasks_data` -- benchmark generators, ODE ground truths, IDX loader
- :mod:`plrnn_lab.metrics` -- KL/state-space, PSD and n-step measures
- :mod:`plrnn_lab.cli` -- command-line experiment surface
"""

from . import analysis, blocktri, core, metrics, moments, regularizers, tasks_data
from . import train_em, train_sgd
from .core import (DivergedError, PlrnnParams, RegionConfig, Trajectory,
                   VanillaRnnWeights, generate, load_params, load_trajectory,
                   observe, save_params, save_trajectory, step_latent,
                   step_vanilla_rnn)
from .regularizers import RegSpec, init_params, init_vanilla, penalty, penalty_grad
from .train_em import EmConfig, EmState, estep, expectations, fit_em, mstep
from .train_sgd import SgdConfig, TrainTestSplit, bptt_grads, p_correct, train

__version__ = "0.1.0"
