"""Benchmark generators and loaders.

Covers the two-channel addition/multiplication trials, sequential-MNIST
ingestion from IDX files, and ground-truth dynamical systems for
reconstruction experiments: a conductance-based bursting neuron (three
state variables V, h, n) and the Lorenz system, both integrated with a
fixed-step 4th-order Runge-Kutta scheme.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Trajectory, load_blocks, make_rng, save_blocks

__all__ = [
    "BURSTING_NEURON_PARAMS",
    "IdxFormatError",
    "NeuronParams",
    "TrialSet",
    "gen_addition",
    "gen_multiplication",
    "load_sequential_mnist",
    "load_trialset",
    "save_trialset",
    "simulate_lorenz",
    "simulate_neuron",
    "trialset_to_csv",
]

TASK_KINDS = ("addition", "multiplication", "sequential_mnist")


@dataclass
class TrialSet:
    """A supervised task: inputs (R, T, K) with scalar or class targets (R,)."""

    inputs: np.ndarray
    targets: np.ndarray
    task_kind: str
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be (R, T, K), got {self.inputs.shape}")
        self.targets = np.asarray(self.targets)
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise ValueError("targets must have one entry per trial")
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}")

    @property
    def R(self) -> int:
        return self.inputs.shape[0]

    @property
    def T(self) -> int:
        return self.inputs.shape[1]


def _marker_times(rng, T: int):
    """Indicator positions: t1 within the first 9 steps, t2 in the first half.

    0-based; distinct.  The later marker stays strictly before T/2 so every
    trial demands a memory of at least T/2 steps.
    """
    n1 = 9
    n2 = math.ceil(T / 2) - 1
    t1 = int(rng.integers(0, n1))
    t2 = int(rng.integers(0, n2 - 1))
    if t2 >= t1:
        t2 += 1  # uniform over {0..n2-1} minus {t1}
    return t1, t2


def _gen_two_channel(R: int, T: int, seed: int, kind: str) -> TrialSet:
    if T < 20:
        raise ValueError(f"T must be >= 20, got {T}")
    rng = make_rng(seed)
    inputs = np.zeros((R, T, 2))
    inputs[:, :, 0] = rng.uniform(0.0, 1.0, size=(R, T))
    targets = np.empty(R)
    for r in range(R):
        t1, t2 = _marker_times(rng, T)
        inputs[r, t1, 1] = 1.0
        inputs[r, t2, 1] = 1.0
        v1, v2 = inputs[r, t1, 0], inputs[r, t2, 0]
        targets[r] = v1 + v2 if kind == "addition" else v1 * v2
    return TrialSet(inputs=inputs, targets=targets, task_kind=kind, seed=seed)


def gen_addition(R: int, T: int, seed: int = 0) -> TrialSet:
    """Addition trials: target is the sum of the two marked channel-1 values."""
    return _gen_two_channel(R, T, seed, "addition")


def gen_multiplication(R: int, T: int, seed: int = 0) -> TrialSet:
    """As addition but the target is the product of the marked values."""
    return _gen_two_channel(R, T, seed, "multiplication")


# ---------------------------------------------------------------------------
# sequential MNIST (IDX binary format)
# ---------------------------------------------------------------------------

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; message carries the byte offset."""


def _read_be32(data: bytes, offset: int, path) -> int:
    if offset + 4 > len(data):
        raise IdxFormatError(f"{path}: truncated at byte {len(data)}, "
                             f"expected 4 bytes at offset {offset}")
    return struct.unpack_from(">i", data, offset)[0]


def _read_idx(path, magic_expected: int) -> tuple[np.ndarray, list]:
    data = Path(path).read_bytes()
    magic = _read_be32(data, 0, path)
    if magic != magic_expected:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{magic_expected:08x}")
    n_dims = magic_expected & 0xFF  # low byte of the magic encodes the rank
    dims = [_read_be32(data, 4 + 4 * i, path) for i in range(n_dims)]
    offset = 4 + 4 * n_dims
    count = int(np.prod(dims))
    if len(data) - offset < count:
        raise IdxFormatError(f"{path}: truncated at byte {len(data)}, "
                             f"expected {count} data bytes from offset {offset}")
    arr = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)
    return arr.reshape(dims), dims


def load_sequential_mnist(images_path, labels_path=None,
                          subset: int | None = None) -> TrialSet:
    """Parse IDX image/label files into pixel-by-pixel sequences.

    Each image is flattened row-major (upper-left to bottom-right) into a
    length rows*cols, K=1 input scaled to [0, 1]; labels become class
    indices.  When ``labels_path`` is omitted it is derived from the images
    filename by the standard naming convention.
    """
    images_path = Path(images_path)
    if labels_path is None:
        name = images_path.name.replace("images-idx3", "labels-idx1")
        if name == images_path.name:
            raise ValueError("cannot derive labels_path; pass it explicitly")
        labels_path = images_path.with_name(name)
    images, dims = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels, _ = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if labels.shape[0] != dims[0]:
        raise IdxFormatError(
            f"{labels_path}: {labels.shape[0]} labels for {dims[0]} images")
    if subset is not None:
        images = images[:subset]
        labels = labels[:subset]
    n, rows, cols = images.shape[0], dims[1], dims[2]
    inputs = (images.reshape(n, rows * cols, 1) / 255.0).astype(np.float64)
    return TrialSet(inputs=inputs, targets=labels.astype(np.int64),
                    task_kind="sequential_mnist", seed=0)


# ---------------------------------------------------------------------------
# bursting neuron (3-D conductance model)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NeuronParams:
    """Conductance-model constants; defaults are the bursting setting.

    Units: capacitance uF, conductances mS, potentials mV, times ms.
    """

    c_m: float = 6.0
    g_l: float = 8.0
    e_l: float = -80.0
    g_na: float = 20.0
    e_na: float = 60.0
    v_h_na: float = -20.0
    k_na: float = 15.0
    g_k: float = 10.0
    e_k: float = -90.0
    v_h_k: float = -25.0
    k_k: float = 5.0
    tau_n: float = 1.0
    g_m: float = 25.0
    v_h_m: float = -15.0
    k_m: float = 5.0
    tau_h: float = 200.0
    g_nmda: float = 10.2

    def __post_init__(self):
        for name in ("g_l", "g_na", "g_k", "g_m", "g_nmda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.tau_n <= 0 or self.tau_h <= 0 or self.c_m <= 0:
            raise ValueError("time constants and capacitance must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


BURSTING_NEURON_PARAMS = NeuronParams()

# NMDA reversal potential; the standard 0 mV is used throughout
E_NMDA = 0.0


def _neuron_rhs(p: NeuronParams, v: float, h: float, n: float):
    m_inf = 1.0 / (1.0 + math.exp((p.v_h_na - v) / p.k_na))
    n_inf = 1.0 / (1.0 + math.exp((p.v_h_k - v) / p.k_k))
    h_inf = 1.0 / (1.0 + math.exp((p.v_h_m - v) / p.k_m))
    sigma = 1.0 / (1.0 + 0.33 * math.exp(-0.0625 * v))
    i_total = (p.g_l * (v - p.e_l)
               + p.g_na * m_inf * (v - p.e_na)
               + p.g_k * n * (v - p.e_k)
               + p.g_m * h * (v - p.e_k)
               + p.g_nmda * sigma * (v - E_NMDA))
    dv = -i_total / p.c_m
    dh = (h_inf - h) / p.tau_h
    dn = (n_inf - n) / p.tau_n
    return dv, dh, dn


def _rk4_step3(rhs, state, dt):
    v, h, n = state
    k1 = rhs(v, h, n)
    k2 = rhs(v + 0.5 * dt * k1[0], h + 0.5 * dt * k1[1], n + 0.5 * dt * k1[2])
    k3 = rhs(v + 0.5 * dt * k2[0], h + 0.5 * dt * k2[1], n + 0.5 * dt * k2[2])
    k4 = rhs(v + dt * k3[0], h + dt * k3[1], n + dt * k3[2])
    return (v + dt * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0,
            h + dt * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0,
            n + dt * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]) / 6.0)


def simulate_neuron(params: NeuronParams = BURSTING_NEURON_PARAMS,
                    t_ms: float = 750.0, dt_ms: float = 0.02,
                    v0: float = -60.0, h0: float = 0.0, n0: float = 0.0,
                    sample_ms: float = 0.5, obs_noise_std: float = 0.0,
                    seed: int = 0) -> Trajectory:
    """Integrate the neuron ODE with RK4 and subsample to ``sample_ms``.

    Returns a trajectory whose latents hold the true states (V, h, n);
    observations are the states plus optional Gaussian noise.
    """
    if dt_ms <= 0:
        raise ValueError("dt_ms must be positive")
    stride = max(1, round(sample_ms / dt_ms))
    n_steps = round(t_ms / dt_ms)
    n_out = n_steps // stride

    def rhs(v, h, n):
        return _neuron_rhs(params, v, h, n)

    state = (float(v0), float(h0), float(n0))
    out = np.empty((n_out, 3))
    j = 0
    for i in range(1, n_steps + 1):
        state = _rk4_step3(rhs, state, dt_ms)
        if not all(math.isfinite(s) for s in state):
            raise FloatingPointError(f"neuron integration diverged at step {i}")
        if i % stride == 0 and j < n_out:
            out[j] = state
            j += 1
    obs = out.copy()
    if obs_noise_std > 0:
        obs = obs + make_rng(seed).normal(0.0, obs_noise_std, size=obs.shape)
    return Trajectory(latents=out, observations=obs, dt=dt_ms * stride)


# ---------------------------------------------------------------------------
# Lorenz system
# ---------------------------------------------------------------------------

def simulate_lorenz(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0,
                    T: int = 10000, dt: float = 0.01, z0=(1.0, 1.0, 1.0),
                    noise_std: float = 0.0, seed: int = 0) -> Trajectory:
    """RK4 integration of the Lorenz equations; T samples at step dt.

    Optional Gaussian observation noise is added to the stored observations
    only; the latents stay noise-free.
    """
    if dt <= 0 or T < 1:
        raise ValueError("need dt > 0 and T >= 1")

    def rhs(x, y, z):
        return (sigma * (y - x), x * (rho - z) - y, x * y - beta * z)

    state = tuple(float(v) for v in z0)
    out = np.empty((T, 3))
    for i in range(T):
        state = _rk4_step3(rhs, state, dt)
        if not all(math.isfinite(s) for s in state):
            raise FloatingPointError(f"Lorenz integration diverged at step {i}")
        out[i] = state
    obs = out.copy()
    if noise_std > 0:
        obs = obs + make_rng(seed).normal(0.0, noise_std, size=obs.shape)
    return Trajectory(latents=out, observations=obs, dt=dt)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_trialset(trials: TrialSet, path) -> None:
    save_blocks(path, {"inputs": trials.inputs,
                       "targets": trials.targets.astype(np.float64)},
                {"task_kind": trials.task_kind, "seed": trials.seed,
                 "target_dtype": str(trials.targets.dtype)})


def load_trialset(path) -> TrialSet:
    blocks, meta = load_blocks(path)
    targets = blocks["targets"]
    if meta.get("target_dtype", "").startswith("int"):
        targets = targets.astype(np.int64)
    return TrialSet(inputs=blocks["inputs"], targets=targets,
                    task_kind=meta["task_kind"], seed=int(meta["seed"]))


def trialset_to_csv(trials: TrialSet, path) -> None:
    """One row per (trial, step) with the trial target repeated."""
    R, T, K = trials.inputs.shape
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "t"] + [f"s{i+1}" for i in range(K)] + ["target"])
        for r in range(R):
            for t in range(T):
                row = [r, t] + [repr(v) for v in trials.inputs[r, t]]
                row.append(repr(trials.targets[r]))
                writer.writerow(row)
