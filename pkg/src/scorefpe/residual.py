"""Residual of the score Fokker-Planck identity and its averaged diagnostics.

For a linear SDE dx = f dt + g dw, the time-indexed score of the true marginals
satisfies d/dt s = grad_x M(x,t) with the scalar bracket

    M(x,t) = g^2/2 div(s) + g^2/2 |s|^2 - <f, s> - div(f).

The residual eps(x,t) = d/dt s - grad_x M measures how far a candidate score
field is from that identity. Two computation paths are provided:

  * exact:      finite differences in t and x with the field's exact divergence
                inside the bracket (oracle/diagnostic path);
  * estimated:  every term a plain forward evaluation -- a generalized
                two-sided stencil in t, a single-probe divergence surrogate
                v . (s(x + h v) - s(x - h v)) / 2h, and per-coordinate central
                differences for grad_x M (or a directional difference along the
                same probe when `projection` is on). Because it is built from
                forward passes only, this path is differentiable through a Tape
                and is what the regularized training objectives consume.

Also here: the time-averaged residuals r_fp and r_dsm_like, the Jacobian
asymmetry diagnostic for conservativity, and the verifier for the integrated
residual bound of a field perturbed within known sup-norm envelopes.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import sde as sde_mod
from .gmm import AnalyticScoreField, gmm_sample
from .sde import sample_transition, transition_score
from .utils import ConfigError, NumericsError, write_csv

RADEMACHER = "rademacher"
GAUSSIAN = "gaussian"
UNIT_UNIFORM = "unit_uniform"
PERTURBED_DATA = "perturbed_data"


class BoundsPreconditionError(ValueError):
    """A perturbation field violates its declared sup-norm envelopes."""


@dataclass(frozen=True)
class ResidualConfig:
    h_s: float = 1e-3       # backward step of the time stencil
    h_d: float = 5e-4       # forward step of the time stencil
    h_x: float = 1e-3       # spatial step (bracket gradient and divergence probe)
    hutchinson_m: int = 1   # probes per point for the divergence surrogate
    probe_dist: str = RADEMACHER
    projection: bool = False
    nu_source: str = PERTURBED_DATA
    n_points: int = 128

    def __post_init__(self):
        if min(self.h_s, self.h_d, self.h_x) <= 0:
            raise ConfigError("finite-difference steps must be positive")
        if self.hutchinson_m < 1:
            raise ConfigError("hutchinson_m must be >= 1")
        if self.probe_dist not in (RADEMACHER, GAUSSIAN):
            raise ConfigError("probe_dist must be 'rademacher' or 'gaussian'")
        if self.nu_source not in (UNIT_UNIFORM, PERTURBED_DATA):
            raise ConfigError("nu_source must be 'unit_uniform' or 'perturbed_data'")
        if self.n_points < 1:
            raise ConfigError("n_points must be >= 1")


@dataclass
class ResidualReport:
    t_grid: list
    r_fp: list
    r_dsm_like: list
    n_points: int
    mode: str

    def write_csv(self, path):
        rows = [
            (t, fp, dsm, self.n_points, self.mode)
            for t, fp, dsm in zip(self.t_grid, self.r_fp, self.r_dsm_like)
        ]
        write_csv(path, ["t", "r_fp", "r_dsm_like", "n_points", "mode"], rows)


# ---------------------------------------------------------------------------
# time stencil
# ---------------------------------------------------------------------------

def _time_stencil(t, h_s, h_d, t_max):
    """Coefficients of the generalized two-sided first-derivative stencil.

    d/dt a(t) ~ [h_s^2 a(t+h_d) + (h_d^2 - h_s^2) a(t) - h_d^2 a(t-h_s)]
                / (h_s h_d (h_s + h_d)),
    second-order accurate; falls back to one-sided first-order stencils where
    t - h_s or t + h_d would leave [0, t_max].
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = h_s * h_d * (h_s + h_d)
    c_p = np.full_like(t, h_s**2 / k)
    c_0 = np.full_like(t, (h_d**2 - h_s**2) / k)
    c_m = np.full_like(t, -(h_d**2) / k)
    t_lo = t - h_s
    t_hi = t + h_d
    left = t_lo < 0.0
    c_p[left], c_0[left], c_m[left] = 1.0 / h_d, -1.0 / h_d, 0.0
    t_lo[left] = t[left]
    right = t_hi > t_max
    c_p[right], c_0[right], c_m[right] = 0.0, 1.0 / h_s, -1.0 / h_s
    t_hi[right] = t[right]
    return t_lo, t_hi, c_m, c_0, c_p


def fd_time_derivative(fn, t, h_s, h_d, t_max=1.0):
    """Apply the two-sided stencil to a callable t -> array (diagnostic helper)."""
    t_lo, t_hi, c_m, c_0, c_p = _time_stencil(float(t), h_s, h_d, t_max)
    return c_m[0] * fn(float(t_lo[0])) + c_0[0] * fn(float(t)) + c_p[0] * fn(float(t_hi[0]))


# ---------------------------------------------------------------------------
# the bracket M(x, t)
# ---------------------------------------------------------------------------

def _bracket_np(spec, x, t, s, div_s):
    g2 = np.asarray(sde_mod.diffusion(spec, t), dtype=np.float64) ** 2
    out = 0.5 * g2 * div_s + 0.5 * g2 * (s * s).sum(-1)
    if spec.kind == sde_mod.VP:
        b = sde_mod.beta(spec, t)
        out = out + 0.5 * b * ((x * s).sum(-1) + x.shape[-1])
    return out


def fpe_bracket(field, sde, x, t, div_s):
    """Scalar bracket M(x,t) with the divergence supplied by the caller."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s = np.atleast_2d(field.eval(x, t))
    out = _bracket_np(sde, x, t, s, np.asarray(div_s, dtype=np.float64))
    return float(out[0]) if np.asarray(div_s).ndim == 0 and len(out) == 1 else out


def _g2_torch(spec, t):
    if spec.kind == sde_mod.VE:
        sig = spec.sigma_min * torch.exp(t * math.log(spec.sigma_max / spec.sigma_min))
        return sig**2 * (2.0 * math.log(spec.sigma_max / spec.sigma_min))
    if spec.kind == sde_mod.VP:
        return spec.beta_min + t * (spec.beta_max - spec.beta_min)
    t_safe = torch.clamp(t, min=1e-300)
    sig = spec.sigma_max * torch.exp(spec.eps_rve / t_safe * math.log(spec.sigma_min / spec.sigma_max))
    g = sig * math.sqrt(2.0 * spec.eps_rve * math.log(spec.sigma_max / spec.sigma_min)) / t_safe
    return torch.where(t > 0, g**2, torch.zeros_like(t))


def _bracket_torch(spec, x, t, s, div_s):
    g2 = _g2_torch(spec, t)
    out = 0.5 * g2 * div_s + 0.5 * g2 * (s * s).sum(-1)
    if spec.kind == sde_mod.VP:
        b = spec.beta_min + t * (spec.beta_max - spec.beta_min)
        out = out + 0.5 * b * ((x * s).sum(-1) + x.shape[-1])
    return out


# ---------------------------------------------------------------------------
# exact path
# ---------------------------------------------------------------------------

def exact_residual(field, sde, x, t, cfg):
    """Residual with exact divergence inside the bracket; FD in t and x only.

    Requires the field to expose `.divergence(x, t)` (analytic Jacobian trace
    for mixture fields, autodiff trace for networks).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, dim = x.shape
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n, float(t))
    t_lo, t_hi, c_m, c_0, c_p = _time_stencil(t, cfg.h_s, cfg.h_d, sde.t_max)
    dsdt = (
        c_m[:, None] * np.atleast_2d(field.eval(x, t_lo))
        + c_0[:, None] * np.atleast_2d(field.eval(x, t))
        + c_p[:, None] * np.atleast_2d(field.eval(x, t_hi))
    )
    grad_m = np.empty((n, dim))
    for i in range(dim):
        vals = []
        for sign in (1.0, -1.0):
            y = x.copy()
            y[:, i] += sign * cfg.h_x
            m = _bracket_np(sde, y, t, np.atleast_2d(field.eval(y, t)), field.divergence(y, t))
            vals.append(m)
        grad_m[:, i] = (vals[0] - vals[1]) / (2.0 * cfg.h_x)
    eps = dsdt - grad_m
    if not np.all(np.isfinite(eps)):
        bad = np.argwhere(~np.isfinite(eps))[0]
        raise NumericsError(f"non-finite residual at point index {bad[0]}, coordinate {bad[1]}")
    return eps


# ---------------------------------------------------------------------------
# estimated path (forward evaluations only; differentiable through a Tape)
# ---------------------------------------------------------------------------

def draw_probes(rng, shape, dist):
    if dist == RADEMACHER:
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    return rng.standard_normal(shape)


def _estimated_residual_torch(eval_fn, spec, x, t, v, cfg, t_max, proj_dirs=None):
    """Batched estimated residual on torch tensors.

    eval_fn: (M, D), (M,) -> (M, D) score evaluations (may be tape-bound).
    x: (N, D); t: (N,); v: (N, m, D) probes. Returns eps (N, D), or the
    projected scalars (N,) when cfg.projection is set. The projection
    direction defaults to probe 0 (shared with the divergence surrogate, the
    cheap single-probe training estimator); pass independent `proj_dirs` to
    get an unbiased projection of the residual instead.
    """
    n, dim = x.shape
    m = v.shape[1]
    t_np = t.detach().numpy()
    t_lo, t_hi, c_m, c_0, c_p = _time_stencil(t_np, cfg.h_s, cfg.h_d, t_max)
    as_t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))

    if cfg.projection:
        w = v[:, 0, :] if proj_dirs is None else proj_dirs
        shift_dirs = [w, -w]
    else:
        eye = torch.eye(dim, dtype=x.dtype)
        shift_dirs = []
        for i in range(dim):
            shift_dirs.extend([eye[i].expand(n, dim), -eye[i].expand(n, dim)])

    xs = [x, x, x]
    ts = [as_t(t_lo), t, as_t(t_hi)]
    ys = []
    for d in shift_dirs:
        y = x + cfg.h_x * d
        ys.append(y)
        xs.append(y)
        ts.append(t)
        for j in range(m):
            xs.extend([y + cfg.h_x * v[:, j, :], y - cfg.h_x * v[:, j, :]])
            ts.extend([t, t])

    out = eval_fn(torch.cat(xs, dim=0), torch.cat(ts, dim=0))
    blocks = out.split(n, dim=0)

    dsdt = as_t(c_m)[:, None] * blocks[0] + as_t(c_0)[:, None] * blocks[1] + as_t(c_p)[:, None] * blocks[2]
    m_vals = []
    idx = 3
    for k, y in enumerate(ys):
        s_y = blocks[idx]
        idx += 1
        div_terms = []
        for j in range(m):
            s_p, s_m = blocks[idx], blocks[idx + 1]
            idx += 2
            div_terms.append((v[:, j, :] * (s_p - s_m)).sum(-1) / (2.0 * cfg.h_x))
        div_sur = torch.stack(div_terms, dim=0).mean(dim=0)
        m_vals.append(_bracket_torch(spec, y, t, s_y, div_sur))

    if cfg.projection:
        dv_m = (m_vals[0] - m_vals[1]) / (2.0 * cfg.h_x)
        return (dsdt * w).sum(-1) - dv_m
    grad_m = torch.stack(
        [(m_vals[2 * i] - m_vals[2 * i + 1]) / (2.0 * cfg.h_x) for i in range(dim)], dim=1
    )
    return dsdt - grad_m


def estimated_residual(field, sde, x, t, cfg, rng, probes=None, projection_probes=None):
    """Estimated residual of any score field (numpy in/out, no gradients).

    Returns eps (N, D), or (projected (N,), direction (N, D)) in projection
    mode. `probes` overrides the random surrogate draw; `projection_probes`
    decouples the projection direction from the surrogate probe (the identity
    E[<eps, w> w] = eps needs independent directions).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, dim = x.shape
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n, float(t))
    if probes is None:
        probes = draw_probes(rng, (n, cfg.hutchinson_m, dim), cfg.probe_dist)
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim == 2:
        probes = probes[:, None, :]
    proj_dirs = None
    if projection_probes is not None:
        proj_dirs = torch.as_tensor(np.asarray(projection_probes, dtype=np.float64))

    def eval_fn(xb, tb):
        return torch.as_tensor(np.atleast_2d(field.eval(xb.numpy(), tb.numpy())))

    out = _estimated_residual_torch(
        eval_fn, sde, torch.as_tensor(x), torch.as_tensor(t), torch.as_tensor(probes), cfg, sde.t_max,
        proj_dirs=proj_dirs,
    )
    if cfg.projection:
        dirs = probes[:, 0, :] if projection_probes is None else np.asarray(projection_probes, dtype=np.float64)
        return out.numpy(), dirs
    return out.numpy()


def divergence_surrogate(field, x, t, v, h_x):
    """Single-probe divergence surrogate v . (s(x + h v) - s(x - h v)) / 2h."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    s_p = np.atleast_2d(field.eval(x + h_x * v, t))
    s_m = np.atleast_2d(field.eval(x - h_x * v, t))
    return (v * (s_p - s_m)).sum(-1) / (2.0 * h_x)


# ---------------------------------------------------------------------------
# averaged residuals
# ---------------------------------------------------------------------------

def draw_nu(cfg, sde, t, n, rng, gmm=None, dim=2):
    """Sample evaluation points for the averaged residual."""
    if cfg.nu_source == UNIT_UNIFORM:
        return rng.uniform(0.0, 1.0, size=(n, dim))
    if gmm is None:
        raise ConfigError("nu_source 'perturbed_data' requires a data mixture")
    x0 = gmm_sample(gmm, n, rng)
    return sample_transition(sde, x0, float(t), rng)


def r_fp(field, sde, t, cfg, rng, gmm=None, mode="exact"):
    """Per-dimension averaged residual norm (1/D) E_nu |eps(x, t)|_2."""
    dim = getattr(field, "dim", 2)
    x = draw_nu(cfg, sde, t, cfg.n_points, rng, gmm=gmm, dim=dim)
    if mode == "exact":
        eps = exact_residual(field, sde, x, t, cfg)
    elif mode == "estimated":
        eps = estimated_residual(field, sde, x, t, replace(cfg, projection=False), rng)
    else:
        raise ConfigError("mode must be 'exact' or 'estimated'")
    return float(np.linalg.norm(eps, axis=-1).mean() / dim)


def r_dsm_like(field, gmm, sde, t, n_points, rng):
    """Per-dimension averaged distance to the transition-kernel score."""
    x0 = gmm_sample(gmm, n_points, rng)
    x = sample_transition(sde, x0, float(t), rng)
    target = transition_score(sde, x0, x, float(t))
    diff = np.atleast_2d(field.eval(x, float(t))) - target
    return float(np.linalg.norm(diff, axis=-1).mean() / x0.shape[1])


def conservativity_gap(field, x, t, mode="fd", h=1e-4):
    """Frobenius norm of the antisymmetric part of the score Jacobian.

    Zero (up to FD tolerance in 'fd' mode) exactly when the field is locally
    a gradient.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, dim = x.shape
    if mode == "exact":
        jac = np.asarray(field.jacobian(x, t)).reshape(n, dim, dim)
    else:
        jac = np.empty((n, dim, dim))
        for j in range(dim):
            y_p = x.copy()
            y_p[:, j] += h
            y_m = x.copy()
            y_m[:, j] -= h
            jac[:, :, j] = (np.atleast_2d(field.eval(y_p, t)) - np.atleast_2d(field.eval(y_m, t))) / (2.0 * h)
    anti = jac - np.transpose(jac, (0, 2, 1))
    gaps = np.linalg.norm(anti, axis=(1, 2))
    return gaps if len(gaps) > 1 else float(gaps[0])


# ---------------------------------------------------------------------------
# perturbation fields and the integrated-residual bound
# ---------------------------------------------------------------------------

class SinePerturbation:
    """Time-independent field a * (sin x_1, ..., sin x_D).

    All three sup norms (value, Jacobian Frobenius, gradient of divergence)
    equal a * sqrt(D).
    """

    def __init__(self, amplitude):
        self.amplitude = float(amplitude)

    def declared_bounds(self, dim):
        b = self.amplitude * math.sqrt(dim)
        return b, b, b

    def eval(self, x, t):
        return self.amplitude * np.sin(np.atleast_2d(np.asarray(x, dtype=np.float64)))

    def jacobian(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n, dim = x.shape
        jac = np.zeros((n, dim, dim))
        idx = np.arange(dim)
        jac[:, idx, idx] = self.amplitude * np.cos(x)
        return jac

    def divergence(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.amplitude * np.cos(x).sum(-1)


class PerturbedField:
    """Sum of a base score field and a perturbation (both expose exact parts)."""

    def __init__(self, base, perturbation):
        self.base = base
        self.perturbation = perturbation

    @property
    def dim(self):
        return self.base.dim

    def eval(self, x, t):
        return self.base.eval(x, t) + self.perturbation.eval(x, t)

    def jacobian(self, x, t):
        return self.base.jacobian(x, t) + self.perturbation.jacobian(x, t)

    def divergence(self, x, t):
        return self.base.divergence(x, t) + self.perturbation.divergence(x, t)


def _verify_perturbation_bounds(perturbation, deltas, dim, half_width=10.0, n_grid=41, h=1e-5):
    """Check the declared sup-norm envelopes by finite differences on a grid."""
    delta0, delta1, delta2 = deltas
    axes = [np.linspace(-half_width, half_width, n_grid)] * dim
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    p = np.atleast_2d(perturbation.eval(grid, 0.0))
    val = np.linalg.norm(p, axis=-1).max()

    def fd_jac(points):
        jac = np.empty((len(points), dim, dim))
        for j in range(dim):
            y_p = points.copy()
            y_p[:, j] += h
            y_m = points.copy()
            y_m[:, j] -= h
            jac[:, :, j] = (
                np.atleast_2d(perturbation.eval(y_p, 0.0)) - np.atleast_2d(perturbation.eval(y_m, 0.0))
            ) / (2.0 * h)
        return jac

    jac_norm = np.linalg.norm(fd_jac(grid), axis=(1, 2)).max()
    grad_div = np.empty((len(grid), dim))
    for j in range(dim):
        y_p = grid.copy()
        y_p[:, j] += h
        y_m = grid.copy()
        y_m[:, j] -= h
        div_p = np.trace(fd_jac(y_p), axis1=1, axis2=2)
        div_m = np.trace(fd_jac(y_m), axis1=1, axis2=2)
        grad_div[:, j] = (div_p - div_m) / (2.0 * h)
    grad_div_norm = np.linalg.norm(grad_div, axis=-1).max()
    slack = 1e-6
    if val > delta0 + slack or jac_norm > delta1 + slack or grad_div_norm > delta2 + slack:
        raise BoundsPreconditionError(
            f"perturbation exceeds declared bounds: value {val:.3e} vs {delta0:.3e}, "
            f"jacobian {jac_norm:.3e} vs {delta1:.3e}, grad-div {grad_div_norm:.3e} vs {delta2:.3e}"
        )


@dataclass
class BoundCheckReport:
    rows: list  # (t, lhs, rhs, holds) at the worst-margin x per grid time

    @property
    def all_hold(self):
        return all(r[3] for r in self.rows)

    def write_csv(self, path):
        write_csv(path, ["t", "lhs", "rhs", "holds"], self.rows)


def prop3_bound_check(gmm, sde, delta0, delta1, delta2, perturbation, t_grid, x_points, cfg=None, n_nodes=50):
    """Verify that the integrated residual of a perturbed exact field stays under
    the sup-norm bound built from (delta0, delta1, delta2).

    lhs(x, t) = | integral_0^t eps(x, tau) dtau |_2 for the field s + p,
    rhs(x, t) = 2 d0 + (d2 + 2 d1 d0) C(t) + d1 I_1(x,t) + d0 I_2(x,t), where
    C(t) = 1/2 int g^2, I_1 = int (g^2 |s| + |f|), I_2 = int (g^2 |grad s|_F +
    |grad f|_F), all on the unperturbed exact field. Time integrals use a
    composite trapezoid on n_nodes nodes.
    """
    cfg = cfg or ResidualConfig()
    field = AnalyticScoreField(gmm, sde)
    pert_field = PerturbedField(field, perturbation)
    dim = field.dim
    _verify_perturbation_bounds(perturbation, (delta0, delta1, delta2), dim)
    x_points = np.atleast_2d(np.asarray(x_points, dtype=np.float64))
    rows = []
    for t_end in t_grid:
        nodes = np.linspace(0.0, float(t_end), n_nodes)
        eps_nodes = np.stack([exact_residual(pert_field, sde, x_points, tau, cfg) for tau in nodes])
        lhs = np.linalg.norm(np.trapezoid(eps_nodes, nodes, axis=0), axis=-1)

        g2 = np.asarray(sde_mod.diffusion(sde, nodes), dtype=np.float64) ** 2
        s_norm = np.stack([np.linalg.norm(field.eval(x_points, tau), axis=-1) for tau in nodes])
        js_norm = np.stack([np.linalg.norm(field.jacobian(x_points, tau), axis=(1, 2)) for tau in nodes])
        f_norm = np.stack([np.linalg.norm(sde_mod.drift(sde, x_points, tau), axis=-1) for tau in nodes])
        if sde.kind == sde_mod.VP:
            jf_norm = 0.5 * sde_mod.beta(sde, nodes)[:, None] * math.sqrt(dim) * np.ones((1, len(x_points)))
        else:
            jf_norm = np.zeros((n_nodes, len(x_points)))
        c_t = 0.5 * float(sde_mod.g2_integral(sde, float(t_end)))
        i1 = np.trapezoid(g2[:, None] * s_norm + f_norm, nodes, axis=0)
        i2 = np.trapezoid(g2[:, None] * js_norm + jf_norm, nodes, axis=0)
        rhs = 2.0 * delta0 + (delta2 + 2.0 * delta1 * delta0) * c_t + delta1 * i1 + delta0 * i2

        worst = int(np.argmax(lhs - rhs))
        rows.append((float(t_end), float(lhs[worst]), float(rhs[worst]), bool(np.all(lhs <= rhs))))
    return BoundCheckReport(rows)
