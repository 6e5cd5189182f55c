"""Evaluation battery for reconstruction quality and supervised performance.

The headline reconstruction measure is the KL divergence between binned
occupation densities of the observed state space (agreement in attractor
geometry, not in time courses), complemented by a Monte-Carlo latent-space
KL proxy, a power-spectrum MSE with a low/high frequency split, and an
n-step-ahead prediction error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import PlrnnParams, Trajectory, relu

__all__ = [
    "BinnedDensity",
    "build_density",
    "kl_binned",
    "kl_latent_proxy",
    "kl_state_space",
    "nstep_mse",
    "psd_mse",
    "periodogram",
    "spectra_to_csv",
]


def _series(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.observations if traj.observations is not None else traj.latents
    return np.asarray(traj, dtype=np.float64)


@dataclass
class BinnedDensity:
    """Histogram over a fixed grid with additive smoothing mass epsilon."""

    dims_used: list
    bins_per_dim: int
    ranges: list                 # per-dim (lo, hi)
    probs: np.ndarray            # flattened, strictly positive, sums to 1
    eps: float

    def __post_init__(self):
        total = float(np.sum(self.probs))
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probs must sum to 1, got {total}")
        if np.any(self.probs <= 0):
            raise ValueError("all probs must be positive after smoothing")


def build_density(series: np.ndarray, bins_per_dim: int, ranges,
                  dims=None, eps: float | None = None) -> BinnedDensity:
    """Histogram the selected dims over the given ranges; out-of-range points
    fall into the nearest edge bin so no mass is silently dropped."""
    x = np.asarray(series, dtype=np.float64)
    dims = list(range(x.shape[1])) if dims is None else list(dims)
    x = x[:, dims]
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    x = np.clip(x, lo, hi)
    counts, _ = np.histogramdd(x, bins=bins_per_dim,
                               range=[tuple(r) for r in ranges])
    n_bins = counts.size
    if eps is None:
        eps = 1.0 / (10.0 * n_bins)
    probs = (counts.ravel() / max(x.shape[0], 1) + eps) / (1.0 + n_bins * eps)
    probs = probs / np.sum(probs)
    return BinnedDensity(dims_used=dims, bins_per_dim=bins_per_dim,
                         ranges=[tuple(r) for r in ranges], probs=probs, eps=eps)


def kl_binned(p: BinnedDensity, q: BinnedDensity) -> float:
    if p.probs.shape != q.probs.shape or p.ranges != q.ranges:
        raise ValueError("densities must share the same bin grid")
    return float(np.sum(p.probs * np.log(p.probs / q.probs)))


def kl_state_space(true_traj, gen_traj, bins_per_dim: int = 30,
                   dims=None) -> float:
    """D_KL(p_true || p_gen) over binned observation space, in nats.

    Uses at most the first three observation dimensions by default; the bin
    grid spans the true data range widened by 5%.  A generated trajectory
    containing non-finite values yields the infinite-divergence sentinel.
    """
    xt = _series(true_traj)
    xg = _series(gen_traj)
    if xt.shape[0] == 0 or xg.shape[0] == 0:
        raise ValueError("both trajectories must be nonempty")
    if dims is None:
        dims = list(range(min(3, xt.shape[1])))
    if not np.all(np.isfinite(xg[:, dims])):
        return np.inf
    lo = xt[:, dims].min(axis=0)
    hi = xt[:, dims].max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    ranges = [(lo[i] - 0.05 * span[i], hi[i] + 0.05 * span[i])
              for i in range(len(dims))]
    p = build_density(xt, bins_per_dim, ranges, dims)
    q = build_density(xg, bins_per_dim, ranges, dims)
    return kl_binned(p, q)


# ---------------------------------------------------------------------------
# latent-space KL proxy (Monte Carlo over Gaussian mixtures)
# ---------------------------------------------------------------------------

def _mixture_logpdf(points: np.ndarray, means: np.ndarray, covs) -> np.ndarray:
    """log of (1/n_comp) sum_k N(points; mean_k, cov_k); covs may be (M,),
    (n, M) diagonals or (n, M, M) full matrices."""
    n, M = means.shape
    pts = np.asarray(points, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    log_terms = np.empty((pts.shape[0], n))
    if covs.ndim == 1:
        covs = np.broadcast_to(covs, (n, M))
    if covs.ndim == 2:
        for k_ in range(n):
            var = np.maximum(covs[k_], 1e-12)
            diff = pts - means[k_]
            log_terms[:, k_] = -0.5 * (np.sum(diff * diff / var, axis=1)
                                       + np.sum(np.log(2 * np.pi * var)))
    else:
        for k_ in range(n):
            cov = covs[k_] + 1e-10 * np.eye(M)
            chol = np.linalg.cholesky(cov)
            diff = np.linalg.solve(chol, (pts - means[k_]).T)
            log_terms[:, k_] = -0.5 * (np.sum(diff * diff, axis=0)
                                       + 2.0 * np.sum(np.log(np.diag(chol)))
                                       + M * np.log(2 * np.pi))
    mx = np.max(log_terms, axis=1)
    return mx + np.log(np.mean(np.exp(log_terms - mx[:, None]), axis=1))


def kl_latent_proxy(post_means, post_covs, gen_means, gen_cov,
                    n_mc: int = 1000, seed: int = 0) -> float:
    """Monte-Carlo D_KL(p_inf(z|x) || p_gen(z)) between Gaussian mixtures.

    ``post_means``/``post_covs`` describe the inferred per-time posterior
    components; ``gen_means`` are the one-step conditional means along a
    freely generated run with shared covariance ``gen_cov``.  Degenerate
    covariances are jittered.
    """
    post_means = np.asarray(post_means, dtype=np.float64)
    gen_means = np.asarray(gen_means, dtype=np.float64)
    T, M = post_means.shape
    covs = np.asarray(post_covs, dtype=np.float64)
    rng = np.random.Generator(np.random.Philox(seed))
    comp = rng.integers(0, T, size=n_mc)
    if covs.ndim == 3:
        samples = np.empty((n_mc, M))
        for i, k_ in enumerate(comp):
            cov = covs[k_] + 1e-10 * np.eye(M)
            samples[i] = rng.multivariate_normal(post_means[k_], cov,
                                                 method="cholesky")
    else:
        var = np.maximum(covs if covs.ndim == 2 else
                         np.broadcast_to(covs, (T, M)), 1e-12)
        samples = post_means[comp] + rng.normal(size=(n_mc, M)) * np.sqrt(var[comp])
    log_p = _mixture_logpdf(samples, post_means, covs)
    log_q = _mixture_logpdf(samples, gen_means, gen_cov)
    return float(np.mean(log_p - log_q))


# ---------------------------------------------------------------------------
# power spectra
# ---------------------------------------------------------------------------

def periodogram(series: np.ndarray, sample_rate_hz: float,
                smooth_bins: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed periodogram, lightly smoothed and normalized to sum 1.

    The input is standardized first, so the measure ignores affine scaling.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    sd = np.std(x)
    if sd == 0 or not np.isfinite(sd):
        raise ValueError("cannot standardize a constant (or non-finite) series")
    x = (x - np.mean(x)) / sd
    window = np.hanning(x.shape[0])
    power = np.abs(np.fft.rfft(x * window)) ** 2
    if smooth_bins > 1:
        kernel = np.ones(smooth_bins)
        power = np.convolve(power, kernel, mode="same") / np.convolve(
            np.ones_like(power), kernel, mode="same")
    total = np.sum(power)
    if total > 0:
        power = power / total
    freqs = np.fft.rfftfreq(x.shape[0], d=1.0 / sample_rate_hz)
    return freqs, power


def psd_mse(true_series, gen_series, sample_rate_hz: float,
            split_hz: float = 50.0) -> tuple[float, float, float]:
    """MSE between normalized power spectra: (total, low <= split, high > split)."""
    xt = np.asarray(true_series, dtype=np.float64).ravel()
    xg = np.asarray(gen_series, dtype=np.float64).ravel()
    if xt.shape[0] != xg.shape[0]:
        raise ValueError("series must have equal length")
    if xt.shape[0] < 256:
        raise ValueError("series too short for a spectral comparison (need >= 256)")
    freqs, pt = periodogram(xt, sample_rate_hz)
    _, pg = periodogram(xg, sample_rate_hz)
    diff2 = (pt - pg) ** 2
    low = freqs <= split_hz
    total_mse = float(np.mean(diff2))
    low_mse = float(np.mean(diff2[low])) if np.any(low) else 0.0
    high_mse = float(np.mean(diff2[~low])) if np.any(~low) else 0.0
    return total_mse, low_mse, high_mse


def spectra_to_csv(freqs, p_true, p_gen, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["freq_hz", "p_true", "p_gen"])
        for row in zip(freqs, p_true, p_gen):
            writer.writerow([repr(v) for v in row])


# ---------------------------------------------------------------------------
# n-step prediction error
# ---------------------------------------------------------------------------

def nstep_mse(params: PlrnnParams, test_traj, n: int, inputs=None) -> float:
    """Mean squared n-step-ahead observation error.

    Latent states along the test series are inferred with the E-step mode;
    from each time t the model then runs noiselessly for n steps and its
    predicted observation is compared against x_{t+n}.
    """
    from .train_em import estep  # deferred: metrics stays importable standalone

    if n < 1:
        raise ValueError("n must be >= 1")
    x = _series(test_traj)
    T = x.shape[0]
    if T <= n:
        raise ValueError(f"series of length {T} too short for horizon {n}")
    em = estep(params, x, inputs)
    z = em.z_mode[: T - n].copy()                 # start states, one per origin
    for _ in range(n):
        z = z * params.a_diag + relu(z) @ params.w_offdiag.T + params.h_bias
    g = z if params.obs_kind == "linear_gaussian" else relu(z)
    preds = g @ params.b_loading.T
    return float(np.mean((preds - x[n:]) ** 2))
