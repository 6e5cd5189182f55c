"""Rectified-Gaussian moments used by the EM expectation step.

For z ~ N(mu, var) and phi = max(0, .), the first and second moments of
phi(z), and the cross moments E[z_i phi(z_j)] and E[phi(z_i) phi(z_j)] for
jointly Gaussian pairs, have closed forms in terms of the univariate normal
pdf/cdf and the bivariate normal orthant probability.  All functions are
vectorized over numpy arrays.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr  # standard normal CDF

__all__ = [
    "bvn_upper",
    "relu_cross_phiphi",
    "relu_cross_zphi",
    "relu_mean",
    "relu_second",
]

_SQRT2PI = np.sqrt(2.0 * np.pi)

# variances below this are treated as degenerate (delta at the mean)
_VAR_FLOOR = 1e-12

# 48-point Gauss-Legendre rule on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(48)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def _phi(x):
    return np.exp(-0.5 * x * x) / _SQRT2PI


def bvn_upper(h, k, rho):
    """P(U > h, V > k) for standard bivariate normal with correlation rho.

    Uses the tetrachoric integral in angular form,

        P = Phi(-h) Phi(-k) + (1/2pi) int_0^{asin rho}
            exp(-(h^2 + k^2 - 2 h k sin t) / (2 cos^2 t)) dt,

    whose integrand stays smooth up to |rho| = 1, evaluated with a fixed
    Gauss-Legendre rule.  Vectorized over h, k, rho.
    """
    h, k, rho = np.broadcast_arrays(
        np.asarray(h, float), np.asarray(k, float), np.asarray(rho, float))
    rho = np.clip(rho, -1.0 + 1e-15, 1.0 - 1e-15)
    base = ndtr(-h) * ndtr(-k)
    alpha = np.arcsin(rho)
    theta = alpha[..., None] * _GL_X          # (..., n_nodes)
    sin_t = np.sin(theta)
    cos2 = 1.0 - sin_t ** 2
    hh = h[..., None]
    kk = k[..., None]
    expo = -(hh ** 2 + kk ** 2 - 2.0 * hh * kk * sin_t) / (2.0 * cos2)
    integral = np.sum(np.exp(expo) * _GL_W, axis=-1) * alpha / (2.0 * np.pi)
    return base + integral


def relu_mean(mu, var):
    """E[phi(z)] for z ~ N(mu, var)."""
    mu = np.asarray(mu, float)
    var = np.asarray(var, float)
    out = np.maximum(mu, 0.0)
    ok = var > _VAR_FLOOR
    if np.any(ok):
        sd = np.sqrt(np.where(ok, var, 1.0))
        a = mu / sd
        out = np.where(ok, mu * ndtr(a) + sd * _phi(a), out)
    return out


def relu_second(mu, var):
    """E[phi(z)^2] (= E[z phi(z)]) for z ~ N(mu, var)."""
    mu = np.asarray(mu, float)
    var = np.asarray(var, float)
    out = np.maximum(mu, 0.0) ** 2
    ok = var > _VAR_FLOOR
    if np.any(ok):
        sd = np.sqrt(np.where(ok, var, 1.0))
        a = mu / sd
        out = np.where(ok, (mu ** 2 + var) * ndtr(a) + mu * sd * _phi(a), out)
    return out


def relu_cross_zphi(mu_i, mu_j, var_j, cov_ij):
    """E[z_i phi(z_j)] for jointly Gaussian (z_i, z_j).

    Follows from conditioning z_i on z_j; only z_j's marginal and the
    covariance enter.
    """
    mu_i = np.asarray(mu_i, float)
    mu_j = np.asarray(mu_j, float)
    var_j = np.asarray(var_j, float)
    cov_ij = np.asarray(cov_ij, float)
    ok = var_j > _VAR_FLOOR
    safe_var = np.where(ok, var_j, 1.0)
    m1 = relu_mean(mu_j, var_j)          # E[phi(z_j)]
    m2 = relu_second(mu_j, var_j)        # E[z_j phi(z_j)]
    slope = np.where(ok, cov_ij / safe_var, 0.0)
    return (mu_i - slope * mu_j) * m1 + slope * m2


def relu_cross_phiphi(mu_i, mu_j, var_i, var_j, cov_ij):
    """E[phi(z_i) phi(z_j)] for jointly Gaussian (z_i, z_j).

    Expands the truncated second-order moment of the bivariate normal over
    the positive quadrant (Rosenbaum-style identities); reduces to the
    product of the univariate means when the pair is uncorrelated.
    """
    mu_i = np.asarray(mu_i, float)
    mu_j = np.asarray(mu_j, float)
    var_i = np.asarray(var_i, float)
    var_j = np.asarray(var_j, float)
    cov_ij = np.asarray(cov_ij, float)
    (mu_i, mu_j, var_i, var_j, cov_ij) = np.broadcast_arrays(
        mu_i, mu_j, var_i, var_j, cov_ij)

    ok_i = var_i > _VAR_FLOOR
    ok_j = var_j > _VAR_FLOOR
    # degenerate marginals reduce to univariate / constant cases
    deg_both = ~ok_i & ~ok_j
    deg_i = ~ok_i & ok_j
    deg_j = ok_i & ~ok_j

    sd_i = np.sqrt(np.where(ok_i, var_i, 1.0))
    sd_j = np.sqrt(np.where(ok_j, var_j, 1.0))
    denom = sd_i * sd_j
    rho = np.clip(np.where(ok_i & ok_j, cov_ij / denom, 0.0), -1.0, 1.0)
    rho = np.clip(rho, -1.0 + 1e-12, 1.0 - 1e-12)
    s = np.sqrt(1.0 - rho ** 2)
    h = -mu_i / sd_i
    k = -mu_j / sd_j

    big_l = bvn_upper(h, k, rho)
    zh = (k - rho * h) / s
    zk = (h - rho * k) / s
    # truncated first moments of the standardized pair
    m10 = _phi(h) * ndtr(-zh) + rho * _phi(k) * ndtr(-zk)
    m01 = _phi(k) * ndtr(-zk) + rho * _phi(h) * ndtr(-zh)
    # truncated product moment
    m11 = (rho * big_l + rho * h * _phi(h) * ndtr(-zh)
           + _phi(k) * (rho * k * ndtr(-zk) + s * _phi(zk)))
    out = (mu_i * mu_j * big_l + mu_i * sd_j * m01 + mu_j * sd_i * m10
           + sd_i * sd_j * m11)

    if np.any(deg_both):
        out = np.where(deg_both,
                       np.maximum(mu_i, 0.0) * np.maximum(mu_j, 0.0), out)
    if np.any(deg_i):
        # z_i is a constant: E = phi(mu_i) E[phi(z_j)]
        out = np.where(deg_i, np.maximum(mu_i, 0.0) * relu_mean(mu_j, var_j), out)
    if np.any(deg_j):
        out = np.where(deg_j, np.maximum(mu_j, 0.0) * relu_mean(mu_i, var_i), out)
    return out
