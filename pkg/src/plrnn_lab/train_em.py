"""EM trainer for the stochastic PLRNN state-space model.

The E-step finds the posterior mode of the piecewise-Gaussian joint density
by alternating region assignment with a block-tridiagonal linear solve, and
takes the tridiagonal blocks of the inverse negative Hessian as the state
covariance.  The M-step solves (penalized) normal equations built from
posterior moments; rectified-Gaussian moment formulas supply the
expectations involving the ReLU.  A stepwise annealing protocol shifts the
burden of fitting the observations from the observation model to the latent
dynamics across stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blocktri
from .core import PlrnnParams, Trajectory, relu
from .moments import relu_cross_phiphi, relu_cross_zphi, relu_mean, relu_second
from .regularizers import RegSpec, init_params, penalty

__all__ = [
    "EmAbortError",
    "EmConfig",
    "EmState",
    "estep",
    "expectations",
    "fit_em",
    "joint_log_density",
    "mstep",
]

_LOG2PI = np.log(2.0 * np.pi)
_VAR_FLOOR = 1e-6


class EmAbortError(RuntimeError):
    """ELBO proxy kept decreasing; carries the trace collected so far."""

    def __init__(self, message: str, trace):
        super().__init__(message)
        self.elbo_trace = list(trace)


@dataclass
class EmState:
    """Posterior mode, tridiagonal covariance blocks and region assignment."""

    z_mode: np.ndarray                    # (T, M)
    v_diag: np.ndarray                    # (T, M, M) diagonal blocks of V
    v_sub: np.ndarray                     # (T-1, M, M) blocks V[t+1, t]
    d_omega: np.ndarray                   # (T, M) binary region indicators
    mode_objective: float                 # joint log density at the mode
    logdet_v: float
    elbo_trace: list = field(default_factory=list)
    anneal_stage: int = 0
    n_iter: int = 0
    loop_detected: bool = False
    jittered: bool = False

    @property
    def T(self) -> int:
        return self.z_mode.shape[0]

    @property
    def M(self) -> int:
        return self.z_mode.shape[1]


@dataclass(frozen=True)
class EmConfig:
    """Settings for one EM fit."""

    latent_dim: int = 10
    reg: RegSpec = field(default_factory=RegSpec)
    obs_kind: str = "relu_gaussian"       # or "linear_gaussian"
    max_iter: int = 15                    # EM iterations per anneal stage
    tol: float = 1e-2                     # proxy improvement regarded as progress
    anneal_weights: tuple = (1e-3, 1e-2, 1e-1, 0.5, 1.0)
    expectation_mode: str = "rectified_moments"   # or "delta"
    max_estep_iter: int = 50
    sigma2_init: float = 0.01
    gamma2_init: float | None = None      # default: half the data variance
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.obs_kind not in ("relu_gaussian", "linear_gaussian"):
            raise ValueError("obs_kind must be 'relu_gaussian' or 'linear_gaussian'")
        if self.expectation_mode not in ("rectified_moments", "delta"):
            raise ValueError("expectation_mode must be 'rectified_moments' or 'delta'")


def _obs_inputs(observations, inputs):
    if isinstance(observations, Trajectory):
        if inputs is None:
            inputs = observations.inputs
        observations = observations.observations
    x = np.asarray(observations, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"observations must be (T, N), got {x.shape}")
    s = None if inputs is None else np.asarray(inputs, dtype=np.float64)
    if s is not None and s.shape[0] != x.shape[0]:
        raise ValueError("inputs and observations must share T")
    return x, s


def _drive_terms(params: PlrnnParams, s, T):
    """c_t = C s_t + h for transitions into step t (t >= 1, 0-based)."""
    c = np.tile(params.h_bias, (T, 1))
    if s is not None and params.K > 0:
        c += s @ params.c_input.T
    return c


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def _assemble_system(params, x, c, d, anneal_weight, linear_obs):
    """Blocks of H = U0 + D U1 + U1' D + D U2 D and rhs b = v0 + D v1."""
    T, M = d.shape
    p = anneal_weight / np.maximum(params.sigma_diag, _VAR_FLOOR)   # latent precision
    g = 1.0 / np.maximum(params.gamma_diag, _VAR_FLOOR)
    a, w, b_load = params.a_diag, params.w_offdiag, params.b_loading

    bgb = b_load.T @ (g[:, None] * b_load)
    bgx = x @ (g[:, None] * b_load)                      # (T, M): B' G x_t
    wtpa = w.T * (p * a)[None, :]                        # W' P A
    wtp = w.T * p[None, :]                               # W' P
    wtpw = w.T @ (p[:, None] * w)                        # W' P W
    pa_sub = -(p[:, None] * (np.diag(a)))                # -P A part of H[t+1, t]
    pw = p[:, None] * w

    diag = np.zeros((T, M, M))
    diag[:] = np.diag(p)
    diag[:-1] += np.diag(p * a * a)
    u1_diag = np.zeros((T, M, M))
    u1_diag[:-1] = wtpa
    u2_diag = np.zeros((T, M, M))
    u2_diag[:-1] = wtpw
    if linear_obs:
        diag += bgb
    else:
        u2_diag += bgb

    du1 = d[:, :, None] * u1_diag
    diag = diag + du1 + np.transpose(du1, (0, 2, 1)) \
        + u2_diag * (d[:, :, None] * d[:, None, :])

    sub = np.tile(pa_sub, (T - 1, 1, 1)) if T > 1 else np.zeros((0, M, M))
    if T > 1:
        sub = sub - pw[None, :, :] * d[:-1, None, :]

    v0 = np.zeros((T, M))
    v0[0] += p * params.mu0
    v0[1:] += p * c[1:]
    v0[:-1] -= (p * a) * c[1:]                            # -A' P c_{t+1}
    v1 = np.zeros((T, M))
    v1[:-1] -= c[1:] @ wtp.T                              # -W' P c_{t+1}
    if linear_obs:
        v0 += bgx
    else:
        v1 += bgx
    rhs = v0 + d * v1
    return diag, sub, rhs


def joint_log_density(params: PlrnnParams, z: np.ndarray, x: np.ndarray,
                      inputs=None, anneal_weight: float = 1.0) -> float:
    """log p(X, Z) under the (annealed) model, penalty not included."""
    T, M = z.shape
    sig = np.maximum(params.sigma_diag, _VAR_FLOOR) / anneal_weight
    gam = np.maximum(params.gamma_diag, _VAR_FLOOR)
    c = _drive_terms(params, inputs, T)
    r0 = z[0] - params.mu0
    ll = -0.5 * np.sum(r0 * r0 / sig) - 0.5 * np.sum(np.log(2 * np.pi * sig))
    if T > 1:
        pred = z[:-1] * params.a_diag + relu(z[:-1]) @ params.w_offdiag.T + c[1:]
        r = z[1:] - pred
        ll += -0.5 * np.sum(r * r / sig) - 0.5 * (T - 1) * np.sum(np.log(2 * np.pi * sig))
    gz = z if params.obs_kind == "linear_gaussian" else relu(z)
    e = x - gz @ params.b_loading.T
    ll += -0.5 * np.sum(e * e / gam) - 0.5 * T * np.sum(np.log(2 * np.pi * gam))
    return float(ll)


def _clamp_system(diag, sub, rhs, clamped):
    """Pin the flagged coordinates to zero by symmetric row/col elimination.

    Keeps the system block-tridiagonal, symmetric and positive definite.
    Operates in place.
    """
    T = diag.shape[0]
    for t in range(T):
        idx = np.where(clamped[t])[0]
        if idx.size == 0:
            continue
        diag[t][idx, :] = 0.0
        diag[t][:, idx] = 0.0
        diag[t][idx, idx] = 1.0
        rhs[t][idx] = 0.0
        if t > 0:
            sub[t - 1][idx, :] = 0.0
        if t < T - 1:
            sub[t][:, idx] = 0.0


def _coordinate_polish(params, x, s, c, z, anneal_weight, sweeps=6):
    """Exact cyclic coordinate ascent on the piecewise-quadratic log joint.

    Each coordinate's 1-D slice is quadratic on either side of its ReLU kink,
    so the update evaluates both branch maximizers in closed form.  Used to
    polish loop-terminated modes, which typically sit on region boundaries.
    """
    T, M = z.shape
    a, w_mat, b_load = params.a_diag, params.w_offdiag, params.b_loading
    p_lat = anneal_weight / np.maximum(params.sigma_diag, _VAR_FLOOR)
    g_obs = 1.0 / np.maximum(params.gamma_diag, _VAR_FLOOR)
    linear_obs = params.obs_kind == "linear_gaussian"
    gb2 = g_obs @ (b_load ** 2)                   # per-m: sum_n G_n B_nm^2
    pw2 = np.einsum("i,im->m", p_lat, w_mat ** 2)  # per-m: sum_i P_i W_im^2

    for _ in range(sweeps):
        moved = 0.0
        for t in range(T):
            pred_in = (params.mu0 if t == 0
                       else a * z[t - 1] + w_mat @ relu(z[t - 1]) + c[t])
            for m in range(M):
                u_cur = z[t, m]
                phi_cur = max(u_cur, 0.0)
                p_pos = p_lat[m]
                q_pos = p_lat[m] * pred_in[m]
                p_neg, q_neg = p_pos, q_pos
                if t < T - 1:
                    # residual of the outgoing transition with u's terms removed;
                    # u re-enters as a_m u on row m plus W[:, m] phi(u) (W_mm = 0)
                    r = z[t + 1] - (a * z[t] + w_mat @ relu(z[t]) + c[t + 1])
                    rho = r + w_mat[:, m] * phi_cur
                    rho_m = rho[m] + a[m] * u_cur
                    p_pos += pw2[m] + p_lat[m] * a[m] ** 2
                    q_pos += p_lat @ (rho * w_mat[:, m]) + p_lat[m] * a[m] * rho_m
                    p_neg += p_lat[m] * a[m] ** 2
                    q_neg += p_lat[m] * a[m] * rho_m
                if linear_obs:
                    xi = x[t] - b_load @ z[t] + b_load[:, m] * u_cur
                    p_pos += gb2[m]
                    q_pos += g_obs @ (xi * b_load[:, m])
                    p_neg += gb2[m]
                    q_neg += g_obs @ (xi * b_load[:, m])
                else:
                    xi = x[t] - b_load @ relu(z[t]) + b_load[:, m] * phi_cur
                    p_pos += gb2[m]
                    q_pos += g_obs @ (xi * b_load[:, m])
                u_pos = max(q_pos / p_pos, 0.0)
                f_pos = -0.5 * p_pos * u_pos ** 2 + q_pos * u_pos
                u_neg = min(q_neg / p_neg, 0.0)
                f_neg = -0.5 * p_neg * u_neg ** 2 + q_neg * u_neg
                u_new = u_pos if f_pos >= f_neg else u_neg
                moved = max(moved, abs(u_new - u_cur))
                z[t, m] = u_new
        if moved < 1e-10:
            break
    return z


def estep(params: PlrnnParams, observations, inputs=None,
          anneal_weight: float = 1.0, z_init: np.ndarray | None = None,
          max_iter: int = 50, refine_max: int = 30,
          polish_sweeps: int = 20) -> EmState:
    """Posterior mode by fixed-point iteration over region assignments.

    Alternates (1) solving the block-tridiagonal linear system for the mode
    given the current ReLU indicator with (2) recomputing the indicator,
    until the assignment repeats or the joint density stops improving; the
    best iterate is kept.  A detected assignment loop (the signature of a
    boundary mode) triggers an exact coordinate-ascent polish.  The
    covariance is the tridiagonal part of the inverse negative Hessian at
    the returned mode.
    """
    x, s = _obs_inputs(observations, inputs)
    T, M = x.shape[0], params.M
    linear_obs = params.obs_kind == "linear_gaussian"
    if params.obs_kind == "softmax_categorical":
        raise ValueError("E-step requires a Gaussian observation model")
    c = _drive_terms(params, s, T)

    if z_init is not None:
        starts = [np.asarray(z_init, float).copy()]
    else:
        # cold start: zeros plus a data-informed guess (B z ~ x), which helps
        # the region iteration escape the d = 0 trap of rectified observations
        z_data, *_ = np.linalg.lstsq(params.b_loading, x.T, rcond=None)
        starts = [np.zeros((T, M)), z_data.T.copy()]

    best = (-np.inf, None, None)
    jittered = False
    loop = False
    n_iter = 0
    for z in starts:
        d = (z > 0.0).astype(np.float64)
        seen = {d.tobytes()}
        # the start itself competes, so a warm-started E-step never returns a
        # mode below the previous one (keeps EM a coordinate ascent)
        obj = joint_log_density(params, z, x, s, anneal_weight)
        if obj > best[0]:
            best = (obj, z.copy(), d.copy())
        for _ in range(max_iter):
            n_iter += 1
            diag, sub, rhs = _assemble_system(params, x, c, d, anneal_weight,
                                              linear_obs)
            try:
                fac = blocktri.factor(diag, sub)
            except np.linalg.LinAlgError:
                jittered = True
                diag = diag + 1e-8 * np.eye(M)[None, :, :]
                fac = blocktri.factor(diag, sub)
            z = blocktri.solve(fac, rhs)
            obj = joint_log_density(params, z, x, s, anneal_weight)
            if obj > best[0]:
                best = (obj, z, (z > 0.0).astype(np.float64))
            d_new = (z > 0.0).astype(np.float64)
            if d_new.tobytes() == d.tobytes():
                break
            if d_new.tobytes() in seen:
                loop = True
                break
            seen.add(d_new.tobytes())
            d = d_new

    if loop:
        # an assignment loop signals a mode clamped to a region boundary (no
        # self-consistent indicator exists there); polish the best iterate by
        # exact cyclic coordinate ascent, then solve exactly for the interior
        # coordinates with the boundary set held at zero (active-set finish)
        z = _coordinate_polish(params, x, s, c, best[1].copy(), anneal_weight,
                               sweeps=polish_sweeps)
        obj = joint_log_density(params, z, x, s, anneal_weight)
        if obj >= best[0]:
            best = (obj, z, (z > 0.0).astype(np.float64))
        for _ in range(3):
            clamped = np.abs(z) <= 1e-9
            d = (z > 0.0).astype(np.float64)
            diag, sub, rhs = _assemble_system(params, x, c, d, anneal_weight,
                                              linear_obs)
            _clamp_system(diag, sub, rhs, clamped)
            try:
                fac = blocktri.factor(diag, sub)
            except np.linalg.LinAlgError:
                break
            z_fin = blocktri.solve(fac, rhs)
            n_iter += 1
            obj_fin = joint_log_density(params, z_fin, x, s, anneal_weight)
            if obj_fin <= best[0] + 1e-12:
                break
            best = (obj_fin, z_fin, (z_fin > 0.0).astype(np.float64))
            z = z_fin

    obj, z, d = best
    diag, sub, rhs = _assemble_system(params, x, c, d, anneal_weight, linear_obs)
    try:
        fac = blocktri.factor(diag, sub)
    except np.linalg.LinAlgError:
        jittered = True
        diag = diag + 1e-8 * np.eye(M)[None, :, :]
        fac = blocktri.factor(diag, sub)
    v_diag, v_sub = blocktri.inverse_blocks(fac)
    return EmState(z_mode=z, v_diag=v_diag, v_sub=v_sub, d_omega=d,
                   mode_objective=obj, logdet_v=-fac.logdet(),
                   n_iter=n_iter, loop_detected=loop, jittered=jittered)


# ---------------------------------------------------------------------------
# posterior expectations
# ---------------------------------------------------------------------------

def expectations(em: EmState, mode: str = "rectified_moments") -> dict:
    """Moments of z and phi(z) under the Gaussian posterior approximation.

    ``delta`` evaluates everything at the mode.  ``rectified_moments`` uses
    the exact rectified-Gaussian formulas with the marginal means/variances
    and the tridiagonal covariance blocks; cross-time terms use the lag-1
    blocks (more distant dependencies do not enter the M-step).
    """
    z, vd, vs = em.z_mode, em.v_diag, em.v_sub
    T, M = z.shape
    out: dict = {"Ez": z.copy()}
    if mode == "delta":
        phi = relu(z)
        out["Ezz"] = np.einsum("ti,tj->tij", z, z)
        out["Ephi"] = phi
        out["Ezphi"] = np.einsum("ti,tj->tij", z, phi)
        out["Ephiphi"] = np.einsum("ti,tj->tij", phi, phi)
        if T > 1:
            out["Ezt_zprev"] = np.einsum("ti,tj->tij", z[1:], z[:-1])
            out["Ezt_phiprev"] = np.einsum("ti,tj->tij", z[1:], phi[:-1])
        else:
            out["Ezt_zprev"] = np.zeros((0, M, M))
            out["Ezt_phiprev"] = np.zeros((0, M, M))
        return out
    if mode != "rectified_moments":
        raise ValueError("mode must be 'delta' or 'rectified_moments'")

    var = np.clip(np.diagonal(vd, axis1=1, axis2=2), 0.0, None)  # (T, M)
    out["Ezz"] = vd + np.einsum("ti,tj->tij", z, z)
    out["Ephi"] = relu_mean(z, var)

    mu_i = z[:, :, None]           # broadcast pair grids per t
    mu_j = z[:, None, :]
    var_i = var[:, :, None]
    var_j = var[:, None, :]
    cov_same = vd
    out["Ezphi"] = relu_cross_zphi(mu_i, mu_j, var_j, cov_same)
    ephiphi = relu_cross_phiphi(mu_i, mu_j, var_i, var_j, cov_same)
    idx = np.arange(M)
    ephiphi[:, idx, idx] = relu_second(z, var)
    out["Ephiphi"] = ephiphi

    if T > 1:
        out["Ezt_zprev"] = vs + np.einsum("ti,tj->tij", z[1:], z[:-1])
        out["Ezt_phiprev"] = relu_cross_zphi(
            z[1:, :, None], z[:-1, None, :], var[:-1, None, :], vs)
    else:
        out["Ezt_zprev"] = np.zeros((0, M, M))
        out["Ezt_phiprev"] = np.zeros((0, M, M))
    return out


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def _penalty_terms(reg: RegSpec, row: int, M: int, K: int):
    """Quadratic penalty (diag weights, linear target) on one latent row."""
    dim = 1 + (M - 1) + K + 1
    weights = np.zeros(dim)
    target = np.zeros(dim)
    if reg.kind == "none" or row >= reg.m_reg and reg.kind != "l2_full":
        return weights, target
    if reg.kind == "manifold_attractor":
        weights[0] = reg.tau_a
        weights[1:M] = reg.tau_w
        weights[-1] = reg.tau_h
        target[0] = reg.tau_a          # from d/dA of tau_a (A - 1)^2
    elif reg.kind == "l2_partial":
        weights[0] = reg.tau_a
        weights[1:M] = reg.tau_w
        weights[-1] = reg.tau_h
    elif reg.kind == "l2_full":
        weights[0] = reg.tau_a
        weights[1:M] = reg.tau_a
        weights[-1] = reg.tau_a
    else:
        raise ValueError(f"{reg.kind} penalty has no closed-form M-step")
    return weights, target


def _solve_ridge(mat, rhs):
    """Normal-equation solve with degenerate-design fallbacks.

    A rank-deficient moment matrix (e.g. z and phi(z) exactly collinear in an
    all-positive regime) first falls back to the minimum-norm least-squares
    solution, which is still an exact minimizer of the quadratic objective;
    a small ridge is the last resort.
    """
    scale = max(float(np.max(np.abs(rhs))), 1.0)

    def _ok(sol):
        return (np.all(np.isfinite(sol))
                and float(np.max(np.abs(mat @ sol - rhs))) < 1e-8 * scale)

    try:
        sol = np.linalg.solve(mat, rhs)
        if _ok(sol):
            return sol, False
    except np.linalg.LinAlgError:
        pass
    sol, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    if _ok(sol):
        return sol, True
    ridge = 1e-6 * max(float(np.mean(np.diag(mat))), 1.0)
    return np.linalg.solve(mat + ridge * np.eye(mat.shape[0]), rhs), True


def mstep(em: EmState, observations, inputs=None, reg: RegSpec = RegSpec(),
          params: PlrnnParams | None = None, anneal_weight: float = 1.0,
          expectation_mode: str = "rectified_moments",
          update_obs: bool = True, update_sigma: bool = True) -> PlrnnParams:
    """Parameter update from posterior moments (ridge-adjusted normal equations).

    The latent model is regressed row by row on [z_{t-1}; phi(z_{t-1}); s_t; 1]
    honoring the diagonal/off-diagonal structure of A and W; a quadratic
    penalty shifts the normal equations in closed form.  Observation
    parameters come from the analogous regression on g(z_t); noise variances
    are residual variances floored at 1e-6.
    """
    if params is None:
        raise ValueError("mstep requires the current params (dims and frozen parts)")
    x, s = _obs_inputs(observations, inputs)
    T, M = em.z_mode.shape
    K = params.K
    mom = expectations(em, expectation_mode)
    Ez, Ezz, Ephi = mom["Ez"], mom["Ezz"], mom["Ephi"]
    Ezphi, Ephiphi = mom["Ezphi"], mom["Ephiphi"]

    dim = 2 * M + K + 1
    Mbb = np.zeros((dim, dim))
    s_rows = s if (s is not None and K > 0) else np.zeros((T, 0))
    sl_z = slice(0, M)
    sl_p = slice(M, 2 * M)
    sl_s = slice(2 * M, 2 * M + K)

    if T > 1:
        Mbb[sl_z, sl_z] = Ezz[:-1].sum(axis=0)
        Mbb[sl_z, sl_p] = Ezphi[:-1].sum(axis=0)
        Mbb[sl_p, sl_z] = Mbb[sl_z, sl_p].T
        Mbb[sl_p, sl_p] = Ephiphi[:-1].sum(axis=0)
        Mbb[sl_z, sl_s] = Ez[:-1].T @ s_rows[1:]
        Mbb[sl_s, sl_z] = Mbb[sl_z, sl_s].T
        Mbb[sl_p, sl_s] = Ephi[:-1].T @ s_rows[1:]
        Mbb[sl_s, sl_p] = Mbb[sl_p, sl_s].T
        Mbb[sl_s, sl_s] = s_rows[1:].T @ s_rows[1:]
        Mbb[sl_z, -1] = Ez[:-1].sum(axis=0)
        Mbb[-1, sl_z] = Mbb[sl_z, -1]
        Mbb[sl_p, -1] = Ephi[:-1].sum(axis=0)
        Mbb[-1, sl_p] = Mbb[sl_p, -1]
        Mbb[sl_s, -1] = s_rows[1:].sum(axis=0)
        Mbb[-1, sl_s] = Mbb[sl_s, -1]
        Mbb[-1, -1] = T - 1

        Mzb = np.zeros((M, dim))
        Mzb[:, sl_z] = mom["Ezt_zprev"].sum(axis=0)
        Mzb[:, sl_p] = mom["Ezt_phiprev"].sum(axis=0)
        Mzb[:, sl_s] = Ez[1:].T @ s_rows[1:]
        Mzb[:, -1] = Ez[1:].sum(axis=0)
        Ez2_sum = np.diagonal(Ezz[1:].sum(axis=0)).copy()
    else:
        Mzb = np.zeros((M, dim))
        Ez2_sum = np.zeros(M)

    a_new = params.a_diag.copy()
    w_new = params.w_offdiag.copy()
    c_new = params.c_input.copy()
    h_new = params.h_bias.copy()
    sigma_new = params.sigma_diag.copy()
    resid = np.zeros(M)

    if T > 1:
        sigma_eff = np.maximum(params.sigma_diag, _VAR_FLOOR)
        for m in range(M):
            others = [j for j in range(M) if j != m]
            sel = np.array([m] + [M + j for j in others]
                           + list(range(2 * M, 2 * M + K)) + [dim - 1])
            mat = Mbb[np.ix_(sel, sel)]
            rhs = Mzb[m, sel]
            weights, target = _penalty_terms(reg, m, M, K)
            scale = sigma_eff[m] / anneal_weight
            mat = mat + 2.0 * scale * np.diag(weights)
            rhs = rhs + 2.0 * scale * target
            theta, _ = _solve_ridge(mat, rhs)
            a_new[m] = theta[0]
            w_new[m, others] = theta[1:M]
            w_new[m, m] = 0.0
            if K:
                c_new[m, :] = theta[M:M + K]
            h_new[m] = theta[-1]
            # residual second moment for the variance update
            mat0 = Mbb[np.ix_(sel, sel)]
            resid[m] = (Ez2_sum[m] - 2.0 * theta @ Mzb[m, sel]
                        + theta @ mat0 @ theta)

    mu0_new = Ez[0].copy()
    if update_sigma and T > 1:
        prior_var = np.clip(np.diagonal(em.v_diag[0]), 0.0, None) \
            if expectation_mode == "rectified_moments" else np.zeros(M)
        sigma_new = np.maximum((prior_var + np.maximum(resid, 0.0)) / T, _VAR_FLOOR)

    b_new = params.b_loading.copy()
    gamma_new = params.gamma_diag.copy()
    if update_obs:
        relu_obs = params.obs_kind == "relu_gaussian"
        Eg = Ephi if relu_obs else Ez
        Egg_sum = (Ephiphi if relu_obs else Ezz).sum(axis=0)
        Exg = x.T @ Eg
        bt, _ = _solve_ridge(Egg_sum.T, Exg.T)
        b_new = bt.T
        quad = np.einsum("nm,mk,nk->n", b_new, Egg_sum, b_new)
        gamma_new = (np.sum(x * x, axis=0) - 2.0 * np.sum(x * (Eg @ b_new.T), axis=0)
                     + quad) / T
        gamma_new = np.maximum(gamma_new, _VAR_FLOOR)

    return params.replace(a_diag=a_new, w_offdiag=w_new, c_input=c_new,
                          h_bias=h_new, sigma_diag=sigma_new,
                          b_loading=b_new, gamma_diag=gamma_new, mu0=mu0_new)


# ---------------------------------------------------------------------------
# full EM loop with annealing
# ---------------------------------------------------------------------------

def _pca_loading(x: np.ndarray, M: int, seed: int) -> np.ndarray:
    """Loading whose columns span the data's principal axes at data scale."""
    T, N = x.shape
    xc = x - x.mean(axis=0)
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    k = min(M, vt.shape[0])
    b = np.zeros((N, M))
    b[:, :k] = vt[:k].T * (sv[:k] / np.sqrt(T))
    if M > k:  # extra latent directions start with small random couplings
        rng = np.random.Generator(np.random.Philox([seed, 7]))
        b[:, k:] = rng.normal(0.0, 0.1 * np.std(x), size=(N, M - k))
    return b


def fit_em(config: EmConfig, observations, inputs=None,
           init: PlrnnParams | None = None):
    """Alternate E- and M-steps under the stepwise annealing protocol.

    Stage s scales the latent-consistency precision by the configured factor;
    the observation model (B, Gamma) is fit during the first stage and frozen
    afterwards, and the process noise is re-estimated once the final stage
    (full precision) is reached.  Each stage stops when the ELBO proxy has
    improved by less than ``tol`` over 5 iterations or ``max_iter`` is
    reached; a proxy decreasing for more than 10 consecutive iterations
    aborts with :class:`EmAbortError`.

    Returns (params, final EmState, elbo trace).
    """
    x, s = _obs_inputs(observations, inputs)
    if x.shape[0] < 2:
        raise ValueError("EM requires at least 2 time steps")
    T, N = x.shape
    M = config.latent_dim
    K = 0 if s is None else s.shape[1]

    if init is not None:
        params = init
    else:
        scheme = ("regularized" if config.reg.kind == "manifold_attractor"
                  else "random")
        params = init_params(scheme, M, K, N, m_reg=config.reg.m_reg,
                             seed=config.seed, scale=config.init_scale,
                             obs_kind=config.obs_kind)
        # anchor the latent scale: initialize the loading from the data's
        # principal axes so unit-scale states map onto the observed cloud
        params = params.replace(b_loading=_pca_loading(x, M, config.seed))
    gamma2 = (config.gamma2_init if config.gamma2_init is not None
              else np.maximum(0.5 * np.var(x, axis=0), 1e-3))
    params = params.replace(sigma_diag=np.full(M, config.sigma2_init),
                            gamma_diag=np.broadcast_to(
                                np.asarray(gamma2, dtype=float), (N,)).copy(),
                            obs_kind=config.obs_kind)

    trace: list = []
    em = None
    n_stages = len(config.anneal_weights)
    for stage, weight in enumerate(config.anneal_weights):
        final_stage = stage == n_stages - 1
        last_proxy = -np.inf
        small_improve = 0
        decreasing = 0
        for _ in range(config.max_iter):
            em = estep(params, x, s, anneal_weight=weight,
                       z_init=None if em is None else em.z_mode,
                       max_iter=config.max_estep_iter)
            params = mstep(em, x, s, reg=config.reg, params=params,
                           anneal_weight=weight,
                           expectation_mode=config.expectation_mode,
                           update_obs=(stage == 0),
                           update_sigma=final_stage)
            # penalized joint at the mode under the *updated* parameters; with
            # delta expectations this sequence is non-decreasing within a stage
            mode_obj = (joint_log_density(params, em.z_mode, x, s, weight)
                        - penalty(config.reg, params))
            proxy = mode_obj + 0.5 * em.logdet_v + 0.5 * em.T * em.M * _LOG2PI
            em.anneal_stage = stage
            em.elbo_trace = trace
            trace.append({"stage": stage, "anneal_weight": weight,
                          "elbo_proxy": proxy, "mode_objective": mode_obj})
            if proxy < last_proxy:
                decreasing += 1
                if decreasing > 10:
                    raise EmAbortError(
                        f"ELBO proxy decreased {decreasing} iterations in a row "
                        f"(stage {stage}); moment approximation likely broke down",
                        trace)
            else:
                decreasing = 0
            if proxy - last_proxy < config.tol:
                small_improve += 1
                if small_improve >= 5:
                    break
            else:
                small_improve = 0
            last_proxy = proxy
    # refresh the posterior under the final parameters
    em = estep(params, x, s, anneal_weight=1.0, z_init=em.z_mode,
               max_iter=config.max_estep_iter)
    em.anneal_stage = n_stages - 1
    em.elbo_trace = trace
    return params, em, trace
