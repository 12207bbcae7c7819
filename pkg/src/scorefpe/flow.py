"""Generation and density evaluation.

Reverse-time Euler-Maruyama sampling of dx = [f - g^2 s] dt + g dw from the
terminal prior down to t_min, and the deterministic probability-flow ODE
dx/dt = f - g^2/2 s integrated with fixed-step RK4. Integrating the flow's
divergence alongside the state gives the exact log-likelihood:

    log p(x) = log p_terminal(x(t_max)) + int_{t_min}^{t_max} div F(x(t), t) dt.

The terminal log-density defaults to the SDE's limiting prior; a field that
knows its exact marginal (the analytic mixture field) can supply it instead,
which isolates transport/divergence error in oracle tests.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import sde as sde_mod
from .residual import GAUSSIAN, RADEMACHER, draw_probes
from .utils import ConfigError, NumericsError, write_csv

EXACT = "exact"
HUTCHINSON = "hutchinson"

PRIOR = "prior"
FIELD_EXACT = "field_exact"


@dataclass(frozen=True)
class OdeConfig:
    n_steps: int = 500
    direction: str = "forward"  # forward: t_min -> t_max (likelihood); reverse: t_max -> t_min
    divergence_mode: str = EXACT
    hutchinson_probes: int = 64
    probe_dist: str = RADEMACHER
    t_min: float = 1e-3

    def __post_init__(self):
        if self.n_steps < 10:
            raise ConfigError("n_steps must be >= 10")
        if self.direction not in ("forward", "reverse"):
            raise ConfigError("direction must be 'forward' or 'reverse'")
        if self.divergence_mode not in (EXACT, HUTCHINSON):
            raise ConfigError("divergence_mode must be 'exact' or 'hutchinson'")
        if self.probe_dist not in (RADEMACHER, GAUSSIAN):
            raise ConfigError("probe_dist must be 'rademacher' or 'gaussian'")
        if not (0 < self.t_min < 1):
            raise ConfigError("t_min must lie in (0, 1)")


@dataclass
class LikelihoodResult:
    log_density: np.ndarray
    delta_log: np.ndarray
    terminal_log_prior: np.ndarray


def prior_log_density(sde, x):
    """Log density of the terminal prior: N(0, std(t_max)^2 I) for VE/RVE, N(0, I) for VP."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dim = x.shape[1]
    var = 1.0 if sde.kind == sde_mod.VP else float(sde_mod.kernel_stats(sde, sde.t_max).std) ** 2
    return -0.5 * (x**2).sum(-1) / var - 0.5 * dim * math.log(2.0 * math.pi * var)


def prior_sample(sde, n, dim, rng):
    std = 1.0 if sde.kind == sde_mod.VP else float(sde_mod.kernel_stats(sde, sde.t_max).std)
    return std * rng.standard_normal((n, dim))


def _flow_drift(field, sde, x, t):
    return sde_mod.drift(sde, x, t) - 0.5 * sde_mod.diffusion(sde, t) ** 2 * np.atleast_2d(field.eval(x, t))


def _flow_divergence(field, sde, x, t, cfg, probes=None):
    dim = x.shape[1]
    div_f = float(sde_mod.drift_divergence(sde, t, dim))
    g2 = float(sde_mod.diffusion(sde, t)) ** 2
    if cfg.divergence_mode == EXACT:
        div_s = field.divergence(x, t)
    else:
        acc = np.zeros(len(x))
        for j in range(cfg.hutchinson_probes):
            v = probes[j]
            if hasattr(field, "div_probe"):
                acc += field.div_probe(x, t, v)
            else:
                jac = np.asarray(field.jacobian(x, t))
                acc += np.einsum("ni,nij,nj->n", v, jac, v)
        div_s = acc / cfg.hutchinson_probes
    return div_f - 0.5 * g2 * div_s


def _rk4(field, sde, x, cfg, with_divergence, rng=None):
    """Fixed-step RK4 over [t_min, t_max] in cfg.direction; optionally accumulates
    the divergence integral with the same stages (Simpson weights per step)."""
    x = np.array(np.atleast_2d(np.asarray(x, dtype=np.float64)), copy=True)
    t0, t1 = (cfg.t_min, sde.t_max) if cfg.direction == "forward" else (sde.t_max, cfg.t_min)
    h = (t1 - t0) / cfg.n_steps
    delta = np.zeros(len(x))
    probes = None
    if with_divergence and cfg.divergence_mode == HUTCHINSON:
        if rng is None:
            raise ConfigError("hutchinson divergence needs a random stream")
        probes = draw_probes(rng, (cfg.hutchinson_probes, len(x), x.shape[1]), cfg.probe_dist)

    def f(xx, tt):
        return _flow_drift(field, sde, xx, tt)

    times = np.linspace(t0, t1, cfg.n_steps + 1)  # exact endpoints, in-domain stage times
    for step in range(cfg.n_steps):
        t, t_next = times[step], times[step + 1]
        t_mid = 0.5 * (t + t_next)
        k1 = f(x, t)
        k2 = f(x + 0.5 * h * k1, t_mid)
        k3 = f(x + 0.5 * h * k2, t_mid)
        k4 = f(x + h * k3, t_next)
        if with_divergence:
            d1 = _flow_divergence(field, sde, x, t, cfg, probes)
            d2 = _flow_divergence(field, sde, x + 0.5 * h * k1, t_mid, cfg, probes)
            d3 = _flow_divergence(field, sde, x + 0.5 * h * k2, t_mid, cfg, probes)
            d4 = _flow_divergence(field, sde, x + h * k3, t_next, cfg, probes)
            delta += h / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NumericsError(f"probability-flow state went non-finite at step {step} (t={t:.6g})")
    return x, delta


def prob_flow_ode(field, sde, x_start, cfg):
    """Integrate the probability-flow ODE; returns trajectory endpoints."""
    squeeze = np.asarray(x_start).ndim == 1
    x_end, _ = _rk4(field, sde, x_start, cfg, with_divergence=False)
    return x_end[0] if squeeze else x_end


def log_likelihood(field, sde, x, cfg, rng=None, terminal=PRIOR):
    """Exact log-likelihood of the flow model at data points x (in nats).

    terminal='prior' uses the SDE's limiting prior at t_max (the production
    path for learned fields); terminal='field_exact' asks the field for its own
    terminal log-density (analytic fields only), pinning integrator error
    without the prior-mismatch floor.
    """
    if cfg.direction != "forward":
        cfg = replace(cfg, direction="forward")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_end, delta = _rk4(field, sde, x, cfg, with_divergence=True, rng=rng)
    if terminal == FIELD_EXACT:
        if not hasattr(field, "log_density"):
            raise ConfigError("terminal='field_exact' requires a field with an exact log_density")
        term = np.asarray(field.log_density(x_end, sde.t_max))
    elif terminal == PRIOR:
        term = prior_log_density(sde, x_end)
    else:
        raise ConfigError("terminal must be 'prior' or 'field_exact'")
    return LikelihoodResult(term + delta, delta, term)


def nats_to_bpd(log_density, dim):
    """Negative log-likelihood in bits per dimension."""
    return -np.asarray(log_density, dtype=np.float64) / (dim * math.log(2.0))


def reverse_sde_sample(field, sde, n_steps, n_samples, rng, t_min=1e-3, dim=None):
    """Euler-Maruyama integration of the score-driven reverse SDE from the prior.

    Returns (samples (N, D), ok (N,)); samples that went non-finite are frozen
    at their last finite state and flagged False.
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    dim = dim or getattr(field, "dim", 2)
    x = prior_sample(sde, n_samples, dim, rng)
    ok = np.ones(n_samples, dtype=bool)
    h = (sde.t_max - t_min) / n_steps
    for step in range(n_steps):
        t = sde.t_max - step * h
        g = float(sde_mod.diffusion(sde, t))
        s = np.atleast_2d(field.eval(x, t))
        drift = sde_mod.drift(sde, x, t) - g**2 * s
        x_new = x - h * drift + g * math.sqrt(h) * rng.standard_normal(x.shape)
        good = np.all(np.isfinite(x_new), axis=1)
        ok &= good
        x = np.where(good[:, None], x_new, x)
    return x, ok


@dataclass(frozen=True)
class GridSpec:
    x1_min: float = -8.0
    x1_max: float = 8.0
    n1: int = 50
    x2_min: float = -8.0
    x2_max: float = 8.0
    n2: int = 50

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 2:
            raise ConfigError("grid needs at least 2 nodes per axis")
        if self.x1_min >= self.x1_max or self.x2_min >= self.x2_max:
            raise ConfigError("grid bounds must be increasing")

    def nodes(self):
        a1 = np.linspace(self.x1_min, self.x1_max, self.n1)
        a2 = np.linspace(self.x2_min, self.x2_max, self.n2)
        return a1, a2

    def points(self):
        a1, a2 = self.nodes()
        g1, g2 = np.meshgrid(a1, a2, indexing="ij")
        return np.stack([g1.ravel(), g2.ravel()], axis=-1)


def density_grid(field, sde, grid, cfg, rng=None, terminal=PRIOR):
    """Probability-flow log-density at every grid node; returns (points, log_density)."""
    points = grid.points()
    result = log_likelihood(field, sde, points, cfg, rng=rng, terminal=terminal)
    return points, result.log_density


def write_density_csv(path, points, log_density):
    write_csv(path, ["x1", "x2", "log_density"], [(p[0], p[1], ld) for p, ld in zip(points, log_density)])


def write_samples_csv(path, samples):
    write_csv(path, ["x1", "x2"], [(s[0], s[1]) for s in samples])


def grid_kl(log_p_true, log_p_model):
    """KL(truth | model) between grid masses normalized to sum 1."""
    lp = np.asarray(log_p_true, dtype=np.float64)
    lq = np.asarray(log_p_model, dtype=np.float64)
    p = np.exp(lp - lp.max())
    p /= p.sum()
    q = np.exp(lq - lq.max())
    q /= q.sum()
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
