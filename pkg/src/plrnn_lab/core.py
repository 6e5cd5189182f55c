"""Piecewise-linear RNN state model: parameters, recursion, observation, generation.

The latent recursion is

    z_t = A z_{t-1} + W relu(z_{t-1}) + C s_t + h + eps_t,   eps_t ~ N(0, Sigma)

with A diagonal and W off-diagonal (zero diagonal).  Observations couple to the
latent states through a factor loading matrix B, either linearly, through a
rectified map, or through a softmax over categories.

Within an orthant of latent space the recursion is linear with effective matrix
W_Omega = A + W D_Omega, where D_Omega is the diagonal 0/1 matrix of ReLU
derivatives.  `RegionConfig` captures that description.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DIVERGENCE_LIMIT",
    "DivergedError",
    "PlrnnParams",
    "RegionConfig",
    "Trajectory",
    "VanillaRnnWeights",
    "generate",
    "load_blocks",
    "load_params",
    "load_trajectory",
    "make_rng",
    "observe",
    "save_params",
    "region_config",
    "relu",
    "save_blocks",
    "save_trajectory",
    "step_latent",
    "step_vanilla_rnn",
    "trajectory_to_csv",
]

#: generation aborts once any |z| exceeds this (explicit, testable cutoff)
DIVERGENCE_LIMIT = 1e12

OBS_KINDS = ("linear_gaussian", "relu_gaussian", "softmax_categorical")


class DivergedError(RuntimeError):
    """Raised when a generated latent state leaves the finite range.

    Carries the first offending step index in ``step``.
    """

    def __init__(self, step: int, message: str | None = None):
        super().__init__(message or f"latent state diverged at step {step}")
        self.step = step


def relu(z):
    return np.maximum(z, 0.0)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; seeds are part of every experiment config."""
    return np.random.Generator(np.random.Philox(seed))


def _as_f64(x, name, shape=None):
    # always copy: construction must never freeze a caller's array in place
    arr = np.array(x, dtype=np.float64, copy=True)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def _freeze(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PlrnnParams:
    """All PLRNN model matrices and vectors.

    Immutable after construction (arrays are marked read-only), so parameter
    objects can be shared freely across threads.
    """

    a_diag: np.ndarray          # (M,)  diagonal of A
    w_offdiag: np.ndarray       # (M, M) off-diagonal coupling, zero diagonal
    c_input: np.ndarray         # (M, K) input loading
    h_bias: np.ndarray          # (M,)
    sigma_diag: np.ndarray      # (M,)  process noise variances, >= 0
    b_loading: np.ndarray       # (N, M) observation loading
    gamma_diag: np.ndarray      # (N,)  observation noise variances, > 0
    mu0: np.ndarray             # (M,)  initial state mean
    m_reg: int = 0              # number of regularized ('memory') states
    obs_kind: str = "linear_gaussian"

    def __post_init__(self):
        a = _freeze(_as_f64(self.a_diag, "a_diag"))
        M = a.shape[0]
        w = _freeze(_as_f64(self.w_offdiag, "w_offdiag", (M, M)))
        if np.any(np.diag(w) != 0.0):
            raise ValueError("w_offdiag must have an exactly zero diagonal")
        c = _freeze(_as_f64(self.c_input, "c_input"))
        if c.ndim != 2 or c.shape[0] != M:
            raise ValueError(f"c_input: expected shape ({M}, K), got {c.shape}")
        h = _freeze(_as_f64(self.h_bias, "h_bias", (M,)))
        sig = _freeze(_as_f64(self.sigma_diag, "sigma_diag", (M,)))
        if np.any(sig < 0):
            raise ValueError("sigma_diag must be nonnegative")
        b = _freeze(_as_f64(self.b_loading, "b_loading"))
        if b.ndim != 2 or b.shape[1] != M:
            raise ValueError(f"b_loading: expected shape (N, {M}), got {b.shape}")
        gam = _freeze(_as_f64(self.gamma_diag, "gamma_diag", (b.shape[0],)))
        if np.any(gam <= 0):
            raise ValueError("gamma_diag must be positive")
        mu = _freeze(_as_f64(self.mu0, "mu0", (M,)))
        if not (0 <= self.m_reg <= M):
            raise ValueError(f"m_reg must lie in [0, {M}], got {self.m_reg}")
        if self.obs_kind not in OBS_KINDS:
            raise ValueError(f"obs_kind must be one of {OBS_KINDS}")
        object.__setattr__(self, "a_diag", a)
        object.__setattr__(self, "w_offdiag", w)
        object.__setattr__(self, "c_input", c)
        object.__setattr__(self, "h_bias", h)
        object.__setattr__(self, "sigma_diag", sig)
        object.__setattr__(self, "b_loading", b)
        object.__setattr__(self, "gamma_diag", gam)
        object.__setattr__(self, "mu0", mu)

    @property
    def M(self) -> int:
        return self.a_diag.shape[0]

    @property
    def K(self) -> int:
        return self.c_input.shape[1]

    @property
    def N(self) -> int:
        return self.b_loading.shape[0]

    def replace(self, **updates) -> "PlrnnParams":
        fields = {
            "a_diag": self.a_diag, "w_offdiag": self.w_offdiag,
            "c_input": self.c_input, "h_bias": self.h_bias,
            "sigma_diag": self.sigma_diag, "b_loading": self.b_loading,
            "gamma_diag": self.gamma_diag, "mu0": self.mu0,
            "m_reg": self.m_reg, "obs_kind": self.obs_kind,
        }
        fields.update(updates)
        return PlrnnParams(**fields)


@dataclass(frozen=True)
class VanillaRnnWeights:
    """Weights of the baseline ReLU RNN, z_t = relu(W z_{t-1} + C s_t + h)."""

    w_full: np.ndarray     # (M, M)
    c_input: np.ndarray    # (M, K)
    h_bias: np.ndarray     # (M,)
    b_loading: np.ndarray  # (N, M)

    def __post_init__(self):
        w = _freeze(_as_f64(self.w_full, "w_full"))
        M = w.shape[0]
        if w.shape != (M, M):
            raise ValueError(f"w_full must be square, got {w.shape}")
        c = _freeze(_as_f64(self.c_input, "c_input"))
        if c.ndim != 2 or c.shape[0] != M:
            raise ValueError(f"c_input: expected shape ({M}, K), got {c.shape}")
        h = _freeze(_as_f64(self.h_bias, "h_bias", (M,)))
        b = _freeze(_as_f64(self.b_loading, "b_loading"))
        if b.ndim != 2 or b.shape[1] != M:
            raise ValueError(f"b_loading: expected shape (N, {M}), got {b.shape}")
        object.__setattr__(self, "w_full", w)
        object.__setattr__(self, "c_input", c)
        object.__setattr__(self, "h_bias", h)
        object.__setattr__(self, "b_loading", b)

    @property
    def M(self) -> int:
        return self.w_full.shape[0]


@dataclass(frozen=True)
class RegionConfig:
    """Orthant indicator d (1 where z_m > 0) and effective map A + W diag(d)."""

    d_vec: np.ndarray    # (M,) binary
    w_omega: np.ndarray  # (M, M)

    def __post_init__(self):
        d = _freeze(_as_f64(self.d_vec, "d_vec"))
        if not np.all((d == 0.0) | (d == 1.0)):
            raise ValueError("d_vec entries must be 0 or 1")
        w = _freeze(_as_f64(self.w_omega, "w_omega", (d.shape[0],) * 2))
        object.__setattr__(self, "d_vec", d)
        object.__setattr__(self, "w_omega", w)

    def key(self) -> tuple:
        return tuple(int(v) for v in self.d_vec)


def region_indicator(z) -> np.ndarray:
    """ReLU outer derivative pattern; z_m == 0 maps to d_m = 0."""
    return (np.asarray(z) > 0.0).astype(np.float64)


def region_config(params: PlrnnParams, z=None, d_vec=None) -> RegionConfig:
    """Region of the state z (or of an explicit indicator vector)."""
    if (z is None) == (d_vec is None):
        raise ValueError("pass exactly one of z or d_vec")
    d = region_indicator(z) if z is not None else np.asarray(d_vec, dtype=np.float64)
    if d.shape != (params.M,):
        raise ValueError(f"indicator: expected shape ({params.M},), got {d.shape}")
    w_om = np.diag(params.a_diag) + params.w_offdiag * d[None, :]
    return RegionConfig(d_vec=d, w_omega=w_om)


@dataclass
class Trajectory:
    """Latent and observed multivariate series, stored time-major.

    ``latents`` has shape (T, M); ``observations`` (T, N) and ``inputs``
    (T, K) are optional but must share T when present.
    """

    latents: np.ndarray
    observations: np.ndarray | None = None
    inputs: np.ndarray | None = None
    dt: float = 1.0

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.latents.ndim != 2 or self.latents.shape[0] < 1:
            raise ValueError(f"latents must be (T>=1, M), got {self.latents.shape}")
        T = self.latents.shape[0]
        for name in ("observations", "inputs"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                if arr.ndim != 2 or arr.shape[0] != T:
                    raise ValueError(
                        f"{name} must be (T={T}, dim), got {arr.shape}")
                setattr(self, name, arr)

    @property
    def T(self) -> int:
        return self.latents.shape[0]

    @property
    def M(self) -> int:
        return self.latents.shape[1]


def _check_vec(x, dim, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (dim,):
        raise ValueError(f"{name}: expected shape ({dim},), got {arr.shape}")
    return arr


def step_latent(params: PlrnnParams, z_prev, s_t=None, noise=None) -> np.ndarray:
    """One application of the latent recursion; absent input/noise are zero."""
    z = _check_vec(z_prev, params.M, "z_prev")
    out = params.a_diag * z + params.w_offdiag @ relu(z) + params.h_bias
    if s_t is not None:
        out = out + params.c_input @ _check_vec(s_t, params.K, "s_t")
    if noise is not None:
        out = out + _check_vec(noise, params.M, "noise")
    return out


def step_vanilla_rnn(weights: VanillaRnnWeights, z_prev, s_t=None) -> np.ndarray:
    """Baseline map z_t = relu(W z_{t-1} + C s_t + h)."""
    z = _check_vec(z_prev, weights.M, "z_prev")
    pre = weights.w_full @ z + weights.h_bias
    if s_t is not None:
        pre = pre + weights.c_input @ _check_vec(s_t, weights.c_input.shape[1], "s_t")
    return relu(pre)


def softmax_probs(logits) -> np.ndarray:
    """Numerically stabilized softmax (invariant to adding a constant)."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def observe(params: PlrnnParams, z_t, noise=None) -> np.ndarray:
    """Map a latent state to an observation (or category probabilities)."""
    z = _check_vec(z_t, params.M, "z_t")
    if params.obs_kind == "softmax_categorical":
        return softmax_probs(params.b_loading @ z)
    g = z if params.obs_kind == "linear_gaussian" else relu(z)
    x = params.b_loading @ g
    if noise is not None:
        x = x + _check_vec(noise, params.N, "noise")
    return x


def generate(params: PlrnnParams, z0=None, inputs=None, T: int = 1,
             rng_seed: int = 0, noiseless: bool = False) -> Trajectory:
    """Run the model forward for T steps and observe each state.

    ``z0`` is the state *before* the first step (defaults to mu0); the
    returned trajectory holds z_1..z_T with input row t applied at step t.
    With ``noiseless`` the run is a pure function of (params, z0, inputs).
    Softmax observations are sampled one-hot (argmax when noiseless).

    Raises :class:`DivergedError` at the first step where the state leaves
    the finite range (|z| > DIVERGENCE_LIMIT).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    z = _check_vec(z0 if z0 is not None else params.mu0, params.M, "z0")
    if inputs is not None:
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.shape != (T, params.K):
            raise ValueError(
                f"inputs: expected shape ({T}, {params.K}), got {inputs.shape}")
    rng = make_rng(rng_seed)
    sig_std = np.sqrt(params.sigma_diag)
    gam_std = np.sqrt(params.gamma_diag)
    softmax = params.obs_kind == "softmax_categorical"

    lat = np.empty((T, params.M))
    obs = np.empty((T, params.N))
    for t in range(T):
        s_t = inputs[t] if inputs is not None else None
        eps = None if noiseless else rng.normal(0.0, sig_std)
        z = step_latent(params, z, s_t, eps)
        if not np.all(np.isfinite(z)) or np.any(np.abs(z) > DIVERGENCE_LIMIT):
            raise DivergedError(t)
        lat[t] = z
        if softmax:
            p = observe(params, z)
            cat = int(np.argmax(p)) if noiseless else int(rng.choice(params.N, p=p))
            obs[t] = 0.0
            obs[t, cat] = 1.0
        else:
            eta = None if noiseless else rng.normal(0.0, gam_std)
            obs[t] = observe(params, z, eta)
    return Trajectory(latents=lat, observations=obs, inputs=inputs)


# ---------------------------------------------------------------------------
# serialization: flat little-endian float64 block + JSON sidecar
# ---------------------------------------------------------------------------

def save_blocks(path, blocks: dict, meta: dict | None = None) -> None:
    """Write named float64 arrays as one flat binary block plus a JSON sidecar.

    ``path`` is a base path; ``<path>.bin`` and ``<path>.json`` are written.
    """
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    order = []
    with open(base.with_suffix(".bin"), "wb") as f:
        for name, arr in blocks.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
            f.write(arr.tobytes())
            order.append({"name": name, "shape": list(arr.shape)})
    header = dict(meta or {})
    header["blocks"] = order
    with open(base.with_suffix(".json"), "w") as f:
        json.dump(header, f, indent=1, sort_keys=True)
        f.write("\n")


def load_blocks(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_blocks`; returns (blocks, meta)."""
    base = Path(path)
    with open(base.with_suffix(".json")) as f:
        header = json.load(f)
    raw = np.fromfile(base.with_suffix(".bin"), dtype="<f8")
    blocks, offset = {}, 0
    for entry in header["blocks"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        blocks[entry["name"]] = raw[offset:offset + n].reshape(entry["shape"]).copy()
        offset += n
    if offset != raw.size:
        raise ValueError(f"binary block has {raw.size} values, header expects {offset}")
    meta = {k: v for k, v in header.items() if k != "blocks"}
    return blocks, meta


def save_params(params: PlrnnParams | VanillaRnnWeights, path) -> None:
    """Persist a model with the same binary-block scheme as trajectories."""
    if isinstance(params, PlrnnParams):
        blocks = {"a_diag": params.a_diag, "w_offdiag": params.w_offdiag,
                  "c_input": params.c_input, "h_bias": params.h_bias,
                  "sigma_diag": params.sigma_diag, "b_loading": params.b_loading,
                  "gamma_diag": params.gamma_diag, "mu0": params.mu0}
        meta = {"kind": "plrnn", "m_reg": params.m_reg, "obs_kind": params.obs_kind}
    else:
        blocks = {"w_full": params.w_full, "c_input": params.c_input,
                  "h_bias": params.h_bias, "b_loading": params.b_loading}
        meta = {"kind": "vanilla_rnn"}
    save_blocks(path, blocks, meta)


def load_params(path) -> PlrnnParams | VanillaRnnWeights:
    blocks, meta = load_blocks(path)
    kind = meta.get("kind")
    if kind == "plrnn":
        return PlrnnParams(m_reg=int(meta["m_reg"]), obs_kind=meta["obs_kind"],
                           **blocks)
    if kind == "vanilla_rnn":
        return VanillaRnnWeights(**blocks)
    raise ValueError(f"unknown model kind {kind!r} in {path}")


def save_trajectory(traj: Trajectory, path) -> None:
    """Persist a trajectory with the {T, M, N, K, dt, fields} sidecar header."""
    fields = ["latents"]
    blocks = {"latents": traj.latents}
    if traj.observations is not None:
        fields.append("observations")
        blocks["observations"] = traj.observations
    if traj.inputs is not None:
        fields.append("inputs")
        blocks["inputs"] = traj.inputs
    meta = {
        "T": traj.T,
        "M": traj.M,
        "N": 0 if traj.observations is None else traj.observations.shape[1],
        "K": 0 if traj.inputs is None else traj.inputs.shape[1],
        "dt": traj.dt,
        "fields": fields,
    }
    save_blocks(path, blocks, meta)


def load_trajectory(path) -> Trajectory:
    blocks, meta = load_blocks(path)
    return Trajectory(
        latents=blocks["latents"],
        observations=blocks.get("observations"),
        inputs=blocks.get("inputs"),
        dt=float(meta.get("dt", 1.0)),
    )


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """One row per time step, columns z1..zM, x1..xN, s1..sK."""
    cols, arrays = [], []
    cols += [f"z{i+1}" for i in range(traj.M)]
    arrays.append(traj.latents)
    if traj.observations is not None:
        cols += [f"x{i+1}" for i in range(traj.observations.shape[1])]
        arrays.append(traj.observations)
    if traj.inputs is not None:
        cols += [f"s{i+1}" for i in range(traj.inputs.shape[1])]
        arrays.append(traj.inputs)
    data = np.hstack(arrays)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for row in data:
            writer.writerow([repr(v) for v in row])
