"""Loss penalties pushing states toward a manifold-attractor configuration.

The manifold-attractor penalty acts on the first ``m_reg`` states:

    L_reg = tau_A * sum_i (A_ii - 1)^2
          + tau_W * sum_i sum_{j != i} W_ij^2
          + tau_h * sum_i h_i^2          (i <= m_reg)

Comparison penalties (partial/full L2, orthogonality) and the initialization
schemes used by the baseline models live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PlrnnParams, VanillaRnnWeights, make_rng

__all__ = ["RegSpec", "penalty", "penalty_grad", "init_params", "init_vanilla"]

REG_KINDS = ("manifold_attractor", "l2_full", "l2_partial", "orthogonal", "none")


@dataclass(frozen=True)
class RegSpec:
    """Regularizer kind, strengths and the number of targeted states."""

    kind: str = "none"
    tau_a: float = 0.0
    tau_w: float = 0.0
    tau_h: float = 0.0
    m_reg: int = 0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"kind must be one of {REG_KINDS}")
        if min(self.tau_a, self.tau_w, self.tau_h) < 0:
            raise ValueError("tau values must be nonnegative")
        if self.kind == "manifold_attractor" and self.m_reg < 1:
            raise ValueError("manifold_attractor requires m_reg >= 1")

    @classmethod
    def common_tau(cls, kind: str, tau: float, m_reg: int = 0) -> "RegSpec":
        """A single strength shared by all three factors (the usual setting)."""
        return cls(kind=kind, tau_a=tau, tau_w=tau, tau_h=tau, m_reg=m_reg)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tau_a": self.tau_a, "tau_w": self.tau_w,
                "tau_h": self.tau_h, "m_reg": self.m_reg}

    @classmethod
    def from_dict(cls, d: dict) -> "RegSpec":
        return cls(**d)


def _offdiag_mask(M: int) -> np.ndarray:
    return 1.0 - np.eye(M)


def penalty(spec: RegSpec, params) -> float:
    """Penalty value for PLRNN parameters or vanilla-RNN weights."""
    if spec.kind == "none":
        return 0.0
    if isinstance(params, VanillaRnnWeights):
        return _penalty_vanilla(spec, params)
    if spec.m_reg > params.M:
        raise ValueError(f"m_reg={spec.m_reg} exceeds M={params.M}")
    r = spec.m_reg
    a, w, h = params.a_diag, params.w_offdiag, params.h_bias
    if spec.kind == "manifold_attractor":
        return float(spec.tau_a * np.sum((a[:r] - 1.0) ** 2)
                     + spec.tau_w * np.sum(w[:r, :] ** 2)
                     + spec.tau_h * np.sum(h[:r] ** 2))
    if spec.kind == "l2_partial":
        return float(spec.tau_a * np.sum(a[:r] ** 2)
                     + spec.tau_w * np.sum(w[:r, :] ** 2)
                     + spec.tau_h * np.sum(h[:r] ** 2))
    if spec.kind == "l2_full":
        return float(spec.tau_a * (np.sum(a ** 2) + np.sum(w ** 2) + np.sum(h ** 2)))
    # orthogonal: (A + W)(A + W)^T pushed toward the identity
    aw = np.diag(a) + w
    gram = aw @ aw.T - np.eye(params.M)
    return float(spec.tau_a * np.sum(gram ** 2))


def _penalty_vanilla(spec: RegSpec, weights: VanillaRnnWeights) -> float:
    w, h = weights.w_full, weights.h_bias
    if spec.kind == "l2_full":
        return float(spec.tau_a * (np.sum(w ** 2) + np.sum(h ** 2)))
    if spec.kind == "orthogonal":
        gram = w @ w.T - np.eye(weights.M)
        return float(spec.tau_a * np.sum(gram ** 2))
    raise ValueError(f"{spec.kind} penalty is not defined for the vanilla RNN")


def penalty_grad(spec: RegSpec, params) -> dict:
    """Closed-form gradient of :func:`penalty`.

    Returns a dict of arrays keyed like the parameter fields; entries outside
    the regularized index set are zero for the partial schemes.
    """
    if isinstance(params, VanillaRnnWeights):
        return _penalty_grad_vanilla(spec, params)
    M, r = params.M, spec.m_reg
    ga = np.zeros(M)
    gw = np.zeros((M, M))
    gh = np.zeros(M)
    if spec.kind == "none":
        pass
    elif spec.kind == "manifold_attractor":
        ga[:r] = 2.0 * spec.tau_a * (params.a_diag[:r] - 1.0)
        gw[:r, :] = 2.0 * spec.tau_w * params.w_offdiag[:r, :]
        gh[:r] = 2.0 * spec.tau_h * params.h_bias[:r]
    elif spec.kind == "l2_partial":
        ga[:r] = 2.0 * spec.tau_a * params.a_diag[:r]
        gw[:r, :] = 2.0 * spec.tau_w * params.w_offdiag[:r, :]
        gh[:r] = 2.0 * spec.tau_h * params.h_bias[:r]
    elif spec.kind == "l2_full":
        ga = 2.0 * spec.tau_a * params.a_diag.copy()
        gw = 2.0 * spec.tau_a * params.w_offdiag.copy()
        gh = 2.0 * spec.tau_a * params.h_bias.copy()
    else:  # orthogonal
        aw = np.diag(params.a_diag) + params.w_offdiag
        gram = aw @ aw.T - np.eye(M)
        full = 4.0 * spec.tau_a * (gram @ aw)
        ga = np.diag(full).copy()
        gw = full * _offdiag_mask(M)
    gw *= _offdiag_mask(M)
    return {"a_diag": ga, "w_offdiag": gw, "h_bias": gh}


def _penalty_grad_vanilla(spec: RegSpec, weights: VanillaRnnWeights) -> dict:
    M = weights.M
    gw = np.zeros((M, M))
    gh = np.zeros(M)
    if spec.kind == "l2_full":
        gw = 2.0 * spec.tau_a * weights.w_full.copy()
        gh = 2.0 * spec.tau_a * weights.h_bias.copy()
    elif spec.kind == "orthogonal":
        gram = weights.w_full @ weights.w_full.T - np.eye(M)
        gw = 4.0 * spec.tau_a * (gram @ weights.w_full)
    elif spec.kind != "none":
        raise ValueError(f"{spec.kind} penalty is not defined for the vanilla RNN")
    return {"w_full": gw, "h_bias": gh}


INIT_SCHEMES = ("regularized", "identity_plrnn", "random", "np_spectral")


def _random_parts(rng, M, K, N, scale):
    # off-diagonal weights at std 1/sqrt(M); diagonal decay in [0.5, 0.9]
    a = rng.uniform(0.5, 0.9, size=M)
    w = rng.normal(0.0, scale / np.sqrt(M), size=(M, M))
    np.fill_diagonal(w, 0.0)
    c = rng.normal(0.0, scale / np.sqrt(max(K, 1)), size=(M, K))
    b = rng.normal(0.0, scale / np.sqrt(M), size=(N, M))
    return a, w, c, b


def init_params(scheme: str, M: int, K: int, N: int, m_reg: int = 0,
                seed: int = 0, scale: float = 1.0,
                obs_kind: str = "linear_gaussian") -> PlrnnParams:
    """Seeded PLRNN initialization.

    ``regularized`` places the first m_reg rows exactly on the manifold
    attractor configuration (A_ii = 1, W row = 0, h_i = 0) and leaves the
    remaining entries random.  ``identity_plrnn`` sets A = I, W = 0, h = 0.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"scheme must be one of {INIT_SCHEMES}")
    if scheme == "np_spectral":
        raise NotImplementedError("normalized-positive spectral init is out of scope")
    rng = make_rng(seed)
    a, w, c, b = _random_parts(rng, M, K, N, scale)
    h = np.zeros(M)
    if scheme == "identity_plrnn":
        a = np.ones(M)
        w = np.zeros((M, M))
    elif scheme == "regularized":
        if m_reg < 1:
            raise ValueError("regularized scheme requires m_reg >= 1")
        a[:m_reg] = 1.0
        w[:m_reg, :] = 0.0
    return PlrnnParams(
        a_diag=a, w_offdiag=w, c_input=c, h_bias=h,
        sigma_diag=np.zeros(M), b_loading=b, gamma_diag=np.ones(N),
        mu0=np.zeros(M), m_reg=m_reg, obs_kind=obs_kind,
    )


def init_vanilla(scheme: str, M: int, K: int, N: int, seed: int = 0,
                 scale: float = 1.0) -> VanillaRnnWeights:
    """Vanilla ReLU RNN weights; ``identity_rnn`` sets W = I and h = 0."""
    if scheme not in ("random", "identity_rnn"):
        raise ValueError("scheme must be 'random' or 'identity_rnn'")
    rng = make_rng(seed)
    w = rng.normal(0.0, scale / np.sqrt(M), size=(M, M))
    c = rng.normal(0.0, scale / np.sqrt(max(K, 1)), size=(M, K))
    b = rng.normal(0.0, scale / np.sqrt(M), size=(N, M))
    if scheme == "identity_rnn":
        w = np.eye(M)
    return VanillaRnnWeights(w_full=w, c_input=c, h_bias=np.zeros(M), b_loading=b)
