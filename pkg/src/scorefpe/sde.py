"""Forward diffusion processes (VE, VP, RVE) and their closed-form transition kernels.

All three processes are linear SDEs dx = f(x,t) dt + g(t) dw on t in [0, t_max],
so the transition kernel from x(0) to x(t) is Gaussian with a scalar mean
coefficient and an isotropic standard deviation, both available in closed form.
An Euler-Maruyama simulator is included purely as a Monte Carlo oracle for
those closed forms.
"""

import math
from dataclasses import dataclass

import numpy as np

from .utils import ConfigError

VE = "ve"
VP = "vp"
RVE = "rve"
KINDS = (VE, VP, RVE)


class DomainError(ValueError):
    """Time argument outside [0, t_max]."""


class SingularKernelError(ValueError):
    """Transition kernel has zero standard deviation at the requested time."""


@dataclass(frozen=True)
class SdeSpec:
    kind: str = VE
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    eps_rve: float = 0.01
    t_max: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown SDE kind {self.kind!r}; expected one of {KINDS}")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if not (0 < self.beta_min < self.beta_max):
            raise ConfigError("need 0 < beta_min < beta_max")
        if self.eps_rve <= 0:
            raise ConfigError("need eps_rve > 0")
        if self.t_max <= 0:
            raise ConfigError("need t_max > 0")


@dataclass(frozen=True)
class KernelStats:
    """Transition-kernel parameters: x(t) | x(0) ~ N(mean_coef * x(0), std^2 I)."""

    mean_coef: np.ndarray
    std: np.ndarray


def _check_time(spec, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > spec.t_max):
        raise DomainError(f"t must lie in [0, {spec.t_max}]")
    return t


def beta(spec, t):
    """Linear VP noise schedule beta(t) = beta_min + t (beta_max - beta_min)."""
    t = np.asarray(t, dtype=np.float64)
    return spec.beta_min + t * (spec.beta_max - spec.beta_min)


def _bcast(a, x):
    """Right-pad dims of per-sample scalars so they broadcast against (..., D) points."""
    a = np.asarray(a, dtype=np.float64)
    while a.ndim < x.ndim:
        a = np.expand_dims(a, -1)
    return a


def drift(spec, x, t):
    """Drift f(x,t): zero for VE/RVE, -0.5 beta(t) x for VP."""
    t = _check_time(spec, t)
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == VP:
        return -0.5 * _bcast(beta(spec, t), x) * x
    return np.zeros_like(x)


def drift_divergence(spec, t, dim):
    """div_x f(x,t): zero for VE/RVE, -0.5 beta(t) dim for VP."""
    t = _check_time(spec, t)
    if spec.kind == VP:
        return -0.5 * beta(spec, t) * dim
    return np.zeros_like(np.asarray(t, dtype=np.float64))


def _ve_sigma(spec, t):
    return spec.sigma_min * (spec.sigma_max / spec.sigma_min) ** t


def _rve_sigma(spec, t):
    # sigma(t) = sigma_max (sigma_min/sigma_max)^(eps/t); continuous limit 0 at t=0
    t = np.asarray(t, dtype=np.float64)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    out = np.zeros_like(t)
    pos = t > 0
    log_ratio = math.log(spec.sigma_min / spec.sigma_max)  # negative
    out[pos] = spec.sigma_max * np.exp(spec.eps_rve / t[pos] * log_ratio)
    return out[0] if scalar else out


def diffusion(spec, t):
    """Diffusion coefficient g(t) >= 0."""
    t = _check_time(spec, t)
    if spec.kind == VE:
        return _ve_sigma(spec, t) * math.sqrt(2.0 * math.log(spec.sigma_max / spec.sigma_min))
    if spec.kind == VP:
        return np.sqrt(beta(spec, t))
    # RVE: g(t) = sigma(t) sqrt(2 eps log(sigma_max/sigma_min)) / t, with g(0) = 0
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    out = np.zeros_like(t)
    pos = t > 0
    scale = math.sqrt(2.0 * spec.eps_rve * math.log(spec.sigma_max / spec.sigma_min))
    out[pos] = _rve_sigma(spec, t[pos]) * scale / t[pos]
    return out[0] if scalar else out


def g2_integral(spec, t):
    """Closed-form integral of g(tau)^2 over [0, t]."""
    t = _check_time(spec, t)
    if spec.kind == VE:
        return _ve_sigma(spec, t) ** 2 - spec.sigma_min**2
    if spec.kind == VP:
        return spec.beta_min * t + 0.5 * (spec.beta_max - spec.beta_min) * t**2
    return _rve_sigma(spec, t) ** 2


def kernel_stats(spec, t):
    """Closed-form transition-kernel mean coefficient and standard deviation.

    VE:  mean_coef = 1, std^2 = sigma(t)^2 - sigma(0)^2 (exactly noiseless at t=0).
    RVE: mean_coef = 1, std = sigma(t) with std(0) = 0.
    VP:  mean_coef = exp(-t^2 (beta_max-beta_min)/4 - t beta_min / 2),
         std^2 = 1 - mean_coef^2.
    """
    t = _check_time(spec, t)
    if spec.kind == VE:
        var = _ve_sigma(spec, t) ** 2 - spec.sigma_min**2
        return KernelStats(np.ones_like(np.asarray(t, dtype=np.float64)), np.sqrt(np.maximum(var, 0.0)))
    if spec.kind == RVE:
        sig = _rve_sigma(spec, t)
        return KernelStats(np.ones_like(sig), sig)
    log_coef = -0.25 * t**2 * (spec.beta_max - spec.beta_min) - 0.5 * t * spec.beta_min
    mean_coef = np.exp(log_coef)
    return KernelStats(mean_coef, np.sqrt(np.maximum(1.0 - mean_coef**2, 0.0)))


def sample_transition(spec, x0, t, rng):
    """Draw x(t) | x(0) = x0 from the Gaussian transition kernel."""
    x0 = np.asarray(x0, dtype=np.float64)
    stats = kernel_stats(spec, t)
    z = rng.standard_normal(x0.shape)
    return _bcast(stats.mean_coef, x0) * x0 + _bcast(stats.std, x0) * z


def transition_score(spec, x0, xt, t):
    """Gradient of log q_{0t}(xt | x0) with respect to xt: -(xt - mean_coef x0)/std^2."""
    stats = kernel_stats(spec, t)
    if np.any(stats.std == 0.0):
        raise SingularKernelError("transition kernel is a point mass at the requested time")
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    return -(xt - _bcast(stats.mean_coef, x0) * x0) / _bcast(stats.std**2, x0)


def euler_maruyama_forward(spec, x0, n_steps, rng, t_end=None):
    """Simulate the forward SDE from t=0 to t_end (default t_max) with uniform steps.

    Monte Carlo oracle for kernel_stats; x0 may be a single point (D,) or a
    batch (N, D) of independent paths.
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    t_end = spec.t_max if t_end is None else float(t_end)
    _check_time(spec, t_end)
    x = np.array(x0, dtype=np.float64, copy=True)
    dt = t_end / n_steps
    sqrt_dt = math.sqrt(dt)
    for k in range(n_steps):
        t = k * dt
        g = diffusion(spec, t)
        x = x + drift(spec, x, t) * dt + g * sqrt_dt * rng.standard_normal(x.shape)
    return x
