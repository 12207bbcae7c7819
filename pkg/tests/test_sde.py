import math

import numpy as np
import pytest

from scorefpe.sde import (
    DomainError,
    SdeSpec,
    SingularKernelError,
    diffusion,
    drift,
    euler_maruyama_forward,
    g2_integral,
    kernel_stats,
    sample_transition,
    transition_score,
)
from scorefpe.utils import ConfigError, substream


def test_spec_validation():
    with pytest.raises(ConfigError):
        SdeSpec(kind="ou")
    with pytest.raises(ConfigError):
        SdeSpec(sigma_min=2.0, sigma_max=1.0)
    with pytest.raises(ConfigError):
        SdeSpec(kind="rve", eps_rve=0.0)


def test_drift_ve_is_zero():
    ve = SdeSpec(kind="ve")
    np.testing.assert_array_equal(drift(ve, np.array([3.0, -7.0]), 0.5), np.zeros(2))


def test_drift_vp_origin_fixed_point():
    vp = SdeSpec(kind="vp")
    for t in (0.0, 0.3, 1.0):
        np.testing.assert_array_equal(drift(vp, np.zeros(2), t), np.zeros(2))


def test_drift_vp_value():
    # -0.5 (0.1 + 0.5 * 19.9) * (1, 0) = (-5.025, 0)
    vp = SdeSpec(kind="vp", beta_min=0.1, beta_max=20.0)
    np.testing.assert_allclose(drift(vp, np.array([1.0, 0.0]), 0.5), [-5.025, 0.0], rtol=0, atol=1e-15)


def test_drift_domain_error():
    ve = SdeSpec(kind="ve")
    with pytest.raises(DomainError):
        drift(ve, np.zeros(2), 1.5)
    with pytest.raises(DomainError):
        drift(ve, np.zeros(2), -0.1)


def test_diffusion_values():
    assert float(diffusion(SdeSpec(kind="rve"), 0.0)) == 0.0
    np.testing.assert_allclose(float(diffusion(SdeSpec(kind="vp"), 0.0)), math.sqrt(0.1), rtol=1e-15)
    np.testing.assert_allclose(
        float(diffusion(SdeSpec(kind="ve"), 1.0)),
        50.0 * math.sqrt(2.0 * math.log(5000.0)),
        rtol=1e-15,
    )


def test_kernel_stats_t0():
    for kind in ("ve", "vp", "rve"):
        stats = kernel_stats(SdeSpec(kind=kind), 0.0)
        assert float(stats.mean_coef) == 1.0
        assert float(stats.std) == 0.0


def test_kernel_stats_values():
    stats = kernel_stats(SdeSpec(kind="vp"), 1.0)
    np.testing.assert_allclose(float(stats.mean_coef), math.exp(-5.025), rtol=1e-14)
    stats = kernel_stats(SdeSpec(kind="ve"), 1.0)
    np.testing.assert_allclose(float(stats.std), math.sqrt(2500.0 - 1e-4), rtol=1e-14)


def test_vp_identity_on_grid():
    vp = SdeSpec(kind="vp")
    t = np.linspace(0.0, 1.0, 100)
    stats = kernel_stats(vp, t)
    np.testing.assert_allclose(stats.mean_coef**2 + stats.std**2, 1.0, rtol=0, atol=1e-12)


def test_std_nondecreasing():
    t = np.linspace(0.0, 1.0, 1000)
    for kind in ("ve", "vp", "rve"):
        std = kernel_stats(SdeSpec(kind=kind), t).std
        assert np.all(np.diff(std) >= -1e-14)


def test_diffusion_matches_variance_derivative():
    # for VE/RVE, d(std^2)/dt should equal g(t)^2 at interior times
    t = np.array([0.2, 0.5, 0.8])
    h = 1e-5
    for kind in ("ve", "rve"):
        spec = SdeSpec(kind=kind)
        var_hi = kernel_stats(spec, t + h).std ** 2
        var_lo = kernel_stats(spec, t - h).std ** 2
        fd = (var_hi - var_lo) / (2.0 * h)
        np.testing.assert_allclose(fd, diffusion(spec, t) ** 2, rtol=1e-3)


def test_g2_integral_matches_quadrature():
    t_grid = np.linspace(0.0, 1.0, 4001)
    for kind in ("ve", "vp", "rve"):
        spec = SdeSpec(kind=kind)
        g2 = np.asarray(diffusion(spec, t_grid)) ** 2
        quad = np.trapezoid(g2, t_grid)
        np.testing.assert_allclose(float(g2_integral(spec, 1.0)), quad, rtol=2e-3)


def test_sample_transition_t0_identity():
    rng = substream(0, "t0")
    x0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    out = sample_transition(SdeSpec(kind="ve"), x0, 0.0, rng)
    np.testing.assert_array_equal(out, x0)


def test_sample_transition_moments():
    rng = substream(0, "moments")
    n = 100_000
    ve = SdeSpec(kind="ve")
    out = sample_transition(ve, np.zeros((n, 2)), 1.0, rng)
    std = float(kernel_stats(ve, 1.0).std)
    se = std / math.sqrt(2 * n)
    assert abs(out[:, 0].std() - std) < 3 * se

    vp = SdeSpec(kind="vp")
    out = sample_transition(vp, np.full((n, 2), 5.0), 1.0, rng)
    mean = float(kernel_stats(vp, 1.0).mean_coef) * 5.0
    se = float(kernel_stats(vp, 1.0).std) / math.sqrt(n)
    assert np.all(np.abs(out.mean(axis=0) - mean) < 3 * se)


def test_transition_score_zero_at_kernel_mean():
    vp = SdeSpec(kind="vp")
    x0 = np.array([2.0, -1.0])
    m = float(kernel_stats(vp, 0.7).mean_coef)
    np.testing.assert_array_equal(transition_score(vp, x0, m * x0, 0.7), np.zeros(2))


def test_transition_score_value():
    ve = SdeSpec(kind="ve")
    out = transition_score(ve, np.zeros(2), np.array([50.0, 0.0]), 1.0)
    np.testing.assert_allclose(out, [-50.0 / (2500.0 - 1e-4), 0.0], rtol=1e-12)


def test_transition_score_matches_log_density_gradient():
    # central difference of log N(xt; m x0, std^2 I)
    rng = substream(0, "ts-fd")
    h = 1e-6
    for kind in ("ve", "vp", "rve"):
        spec = SdeSpec(kind=kind)
        x0 = rng.normal(0, 3, size=2)
        t = rng.uniform(0.3, 1.0)
        stats = kernel_stats(spec, t)
        xt = float(stats.mean_coef) * x0 + float(stats.std) * rng.standard_normal(2)

        def log_kernel(x):
            return -0.5 * np.sum((x - float(stats.mean_coef) * x0) ** 2) / float(stats.std) ** 2

        fd = np.array([
            (log_kernel(xt + h * np.eye(2)[i]) - log_kernel(xt - h * np.eye(2)[i])) / (2 * h)
            for i in range(2)
        ])
        score = transition_score(spec, x0, xt, t)
        np.testing.assert_allclose(score, fd, rtol=1e-6, atol=1e-9)


def test_transition_score_singular_at_t0():
    with pytest.raises(SingularKernelError):
        transition_score(SdeSpec(kind="ve"), np.zeros(2), np.ones(2), 0.0)


def test_euler_maruyama_zero_noise_returns_x0():
    # degenerate spec: sigma range chosen so g is tiny, drift-free; path stays ~x0
    spec = SdeSpec(kind="rve", eps_rve=50.0)  # sigma(t) collapses toward 0 for t <= 1
    rng = substream(0, "em0")
    x0 = np.array([1.0, 2.0])
    out = euler_maruyama_forward(spec, x0, 100, rng, t_end=0.05)
    np.testing.assert_allclose(out, x0, atol=1e-8)


@pytest.mark.parametrize("kind", ["ve", "vp", "rve"])
@pytest.mark.parametrize("t_end", [0.25, 0.5, 1.0])
def test_euler_maruyama_matches_kernel_stats(kind, t_end):
    spec = SdeSpec(kind=kind)
    rng = substream(1, "em", kind, t_end)
    n = 10_000
    x0 = np.full((n, 2), 5.0)
    out = euler_maruyama_forward(spec, x0, 1000, rng, t_end=t_end)
    stats = kernel_stats(spec, t_end)
    mean = float(stats.mean_coef) * 5.0
    std = float(stats.std)
    se_mean = std / math.sqrt(n)
    se_std = std / math.sqrt(2 * n)
    for j in range(2):
        assert abs(out[:, j].mean() - mean) < 4 * se_mean + 1e-12
        assert abs(out[:, j].std() - std) < 4 * se_std + 1e-12


def test_euler_maruyama_requires_steps():
    with pytest.raises(ConfigError):
        euler_maruyama_forward(SdeSpec(), np.zeros(2), 0, substream(0, "x"))
