"""Isotropic Gaussian mixtures with exact density, score, Jacobian, and their
closed-form evolution under any of the linear forward SDEs.

Because every component is isotropic and the forward process is linear with
Gaussian transition kernels, the marginal at time t is again an isotropic
mixture: weights unchanged, means scaled by the kernel mean coefficient,
variances mean_coef^2 sigma_k^2 + std^2. That closed form makes the mixture
the ground-truth oracle for every residual and likelihood test.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import sde as sde_mod
from .utils import ConfigError


@dataclass(frozen=True)
class GmmSpec:
    weights: tuple  # (K,) positive, sums to 1
    means: tuple    # (K, D)
    variances: tuple  # (K,) isotropic per-component variance

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        if w.ndim != 1 or m.ndim != 2 or v.ndim != 1 or not (len(w) == len(m) == len(v)):
            raise ConfigError("weights (K,), means (K,D), variances (K,) required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be positive and sum to 1 within 1e-12")
        if np.any(v <= 0):
            raise ConfigError("variances must be positive")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "means", tuple(tuple(float(x) for x in row) for row in m))
        object.__setattr__(self, "variances", tuple(float(x) for x in v))

    @property
    def dim(self):
        return len(self.means[0])

    @property
    def n_components(self):
        return len(self.weights)

    def arrays(self):
        return (
            np.asarray(self.weights, dtype=np.float64),
            np.asarray(self.means, dtype=np.float64),
            np.asarray(self.variances, dtype=np.float64),
        )


def default_gmm():
    """Benchmark two-mode mixture: 0.2 N((-5,-5), I) + 0.8 N((5,5), I)."""
    return GmmSpec(weights=(0.2, 0.8), means=((-5.0, -5.0), (5.0, 5.0)), variances=(1.0, 1.0))


def _component_stats(gmm, x, means=None, variances=None):
    """Log component posteriors and per-component score directions.

    means/variances may override the spec's (for time-varying mixtures): either
    (K,D)/(K,) shared across the batch or (N,K,D)/(N,K) per sample.
    Returns (log_resp (N,K), u (N,K,D)) with u_k = (mu_k - x)/sigma_k^2.
    """
    w, mu, var = gmm.arrays()
    if means is not None:
        mu = np.asarray(means, dtype=np.float64)
    if variances is not None:
        var = np.asarray(variances, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)  # (N, D)
    dim = x.shape[-1]
    if mu.ndim == 2:
        mu = mu[None, :, :]  # (1, K, D)
    if var.ndim == 1:
        var = var[None, :]  # (1, K)
    diff = mu - x[:, None, :]  # (N, K, D)
    sq = (diff**2).sum(-1)  # (N, K)
    log_comp = np.log(w)[None, :] - 0.5 * dim * np.log(2.0 * math.pi * var) - 0.5 * sq / var
    log_norm = _logsumexp(log_comp, axis=-1)  # (N,)
    log_resp = log_comp - log_norm[:, None]
    u = diff / var[..., None]
    return log_resp, u, log_norm, squeeze


def _logsumexp(a, axis):
    amax = np.max(a, axis=axis, keepdims=True)
    return (amax + np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True))).squeeze(axis)


def gmm_log_density(gmm, x, means=None, variances=None):
    """log sum_k w_k N(x; mu_k, sigma_k^2 I), stable via log-sum-exp."""
    _, _, log_norm, squeeze = _component_stats(gmm, x, means, variances)
    return log_norm[0] if squeeze else log_norm


def gmm_score(gmm, x, means=None, variances=None):
    """Gradient of the mixture log-density: sum_k r_k(x) (mu_k - x)/sigma_k^2."""
    log_resp, u, _, squeeze = _component_stats(gmm, x, means, variances)
    score = (np.exp(log_resp)[..., None] * u).sum(axis=1)
    return score[0] if squeeze else score


def gmm_score_jacobian(gmm, x, means=None, variances=None):
    """Exact Jacobian of the mixture score (the Hessian of log density).

    J = sum_k r_k (u_k u_k^T - I/sigma_k^2) - s s^T, symmetric by construction.
    """
    log_resp, u, _, squeeze = _component_stats(gmm, x, means, variances)
    resp = np.exp(log_resp)  # (N, K)
    _, _, var = gmm.arrays()
    if variances is not None:
        var = np.asarray(variances, dtype=np.float64)
    if var.ndim == 1:
        var = var[None, :]
    dim = u.shape[-1]
    s = (resp[..., None] * u).sum(axis=1)  # (N, D)
    outer = np.einsum("nk,nki,nkj->nij", resp, u, u)
    iso = (resp / var).sum(axis=1)  # (N,)
    jac = outer - iso[:, None, None] * np.eye(dim)[None] - np.einsum("ni,nj->nij", s, s)
    return jac[0] if squeeze else jac


def gmm_score_divergence(gmm, x, means=None, variances=None):
    """Exact trace of the score Jacobian (Laplacian of log density)."""
    log_resp, u, _, squeeze = _component_stats(gmm, x, means, variances)
    resp = np.exp(log_resp)
    _, _, var = gmm.arrays()
    if variances is not None:
        var = np.asarray(variances, dtype=np.float64)
    if var.ndim == 1:
        var = var[None, :]
    dim = u.shape[-1]
    s = (resp[..., None] * u).sum(axis=1)
    div = (resp * ((u**2).sum(-1) - dim / var)).sum(axis=1) - (s**2).sum(-1)
    return div[0] if squeeze else div


def gmm_sample(gmm, n, rng):
    """Ancestral sampling: component by weight, then an isotropic Gaussian draw."""
    w, mu, var = gmm.arrays()
    comp = rng.choice(len(w), size=n, p=w)
    z = rng.standard_normal((n, mu.shape[1]))
    return mu[comp] + np.sqrt(var[comp])[:, None] * z


def perturb(gmm, sde, t):
    """Exact marginal of the forward SDE at time t started from this mixture."""
    stats = sde_mod.kernel_stats(sde, float(t))
    m = float(stats.mean_coef)
    s2 = float(stats.std) ** 2
    w, mu, var = gmm.arrays()
    return GmmSpec(
        weights=tuple(w),
        means=tuple(tuple(row) for row in m * mu),
        variances=tuple(m**2 * var + s2),
    )


class AnalyticScoreField:
    """Ground-truth score field s(x,t) of a mixture diffused by a linear SDE.

    Supports per-sample times so finite-difference stencils can be evaluated
    in one batched call. Also exposes the exact Jacobian, divergence, and the
    perturbed log-density (used as the terminal density for exact
    probability-flow likelihoods).
    """

    def __init__(self, gmm, sde):
        self.gmm = gmm
        self.sde = sde

    @property
    def dim(self):
        return self.gmm.dim

    def _time_params(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(x.shape[0], float(t))
        stats = sde_mod.kernel_stats(self.sde, t)
        _, mu, var = self.gmm.arrays()
        m = np.asarray(stats.mean_coef, dtype=np.float64)
        s2 = np.asarray(stats.std, dtype=np.float64) ** 2
        means = m[:, None, None] * mu[None, :, :]  # (N, K, D)
        variances = m[:, None] ** 2 * var[None, :] + s2[:, None]  # (N, K)
        return x, means, variances

    def eval(self, x, t):
        squeeze = np.asarray(x).ndim == 1
        xb, means, variances = self._time_params(x, t)
        out = gmm_score(self.gmm, xb, means=means, variances=variances)
        return out[0] if squeeze else out

    def jacobian(self, x, t):
        squeeze = np.asarray(x).ndim == 1
        xb, means, variances = self._time_params(x, t)
        out = gmm_score_jacobian(self.gmm, xb, means=means, variances=variances)
        return out[0] if squeeze else out

    def divergence(self, x, t):
        squeeze = np.asarray(x).ndim == 1
        xb, means, variances = self._time_params(x, t)
        out = gmm_score_divergence(self.gmm, xb, means=means, variances=variances)
        return out[0] if squeeze else out

    def log_density(self, x, t):
        squeeze = np.asarray(x).ndim == 1
        xb, means, variances = self._time_params(x, t)
        out = gmm_log_density(self.gmm, xb, means=means, variances=variances)
        return out[0] if squeeze else out
