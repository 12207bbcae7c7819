"""Flat key=value configuration files with dotted namespaces.

The format is a UTF-8 text file of `key = value` lines; `#` starts a comment;
list values are comma-separated. Every workflow object (SDE, mixture, network,
training, residual, ODE settings) serializes to and from this map so runs can
be replayed from a manifest.
"""

import numpy as np

from .flow import GridSpec, OdeConfig
from .gmm import GmmSpec, default_gmm
from .net import NetConfig
from .residual import ResidualConfig
from .train import TrainConfig
from .utils import ConfigError


def parse_config_text(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path):
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err


def dump_config(cfg):
    return "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg)) + "\n"


def _get(cfg, key, default, cast):
    raw = cfg.get(key)
    if raw is None:
        return default
    try:
        return cast(raw)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"bad value for {key}: {raw!r} ({err})") from err


def _bool(raw):
    low = str(raw).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _floats(raw):
    return tuple(float(tok) for tok in str(raw).split(",") if tok.strip())


def _ints(raw):
    return tuple(int(tok) for tok in str(raw).split(",") if tok.strip())


def sde_from_config(cfg):
    from .sde import SdeSpec

    return SdeSpec(
        kind=_get(cfg, "sde.kind", "ve", lambda s: s.strip().lower()),
        sigma_min=_get(cfg, "sde.sigma_min", 0.01, float),
        sigma_max=_get(cfg, "sde.sigma_max", 50.0, float),
        beta_min=_get(cfg, "sde.beta_min", 0.1, float),
        beta_max=_get(cfg, "sde.beta_max", 20.0, float),
        eps_rve=_get(cfg, "sde.eps_rve", 0.01, float),
    )


def sde_to_config(spec):
    return {
        "sde.kind": spec.kind,
        "sde.sigma_min": repr(spec.sigma_min),
        "sde.sigma_max": repr(spec.sigma_max),
        "sde.beta_min": repr(spec.beta_min),
        "sde.beta_max": repr(spec.beta_max),
        "sde.eps_rve": repr(spec.eps_rve),
    }


def gmm_from_config(cfg):
    if "gmm.weights" not in cfg and "gmm.means" not in cfg:
        return default_gmm()
    weights = _get(cfg, "gmm.weights", (0.2, 0.8), _floats)
    flat_means = _get(cfg, "gmm.means", (-5.0, -5.0, 5.0, 5.0), _floats)
    variances = _get(cfg, "gmm.variances", tuple(1.0 for _ in weights), _floats)
    k = len(weights)
    if len(flat_means) % k != 0:
        raise ConfigError("gmm.means length must be a multiple of the number of weights")
    dim = len(flat_means) // k
    means = tuple(tuple(flat_means[i * dim : (i + 1) * dim]) for i in range(k))
    return GmmSpec(weights=weights, means=means, variances=variances)


def gmm_to_config(gmm):
    flat = [x for row in gmm.means for x in row]
    return {
        "gmm.weights": ",".join(repr(w) for w in gmm.weights),
        "gmm.means": ",".join(repr(x) for x in flat),
        "gmm.variances": ",".join(repr(v) for v in gmm.variances),
    }


def net_from_config(cfg):
    return NetConfig(
        input_dim=_get(cfg, "net.input_dim", 2, int),
        hidden_widths=_get(cfg, "net.hidden_widths", (128, 128), _ints),
        time_embed_dim=_get(cfg, "net.time_embed_dim", 64, int),
        activation=_get(cfg, "net.activation", "silu", lambda s: s.strip().lower()),
        fourier_scale=_get(cfg, "net.fourier_scale", 30.0, float),
    )


def net_to_config(net_cfg):
    return {
        "net.input_dim": str(net_cfg.input_dim),
        "net.hidden_widths": ",".join(str(w) for w in net_cfg.hidden_widths),
        "net.time_embed_dim": str(net_cfg.time_embed_dim),
        "net.activation": net_cfg.activation,
        "net.fourier_scale": repr(net_cfg.fourier_scale),
    }


def residual_from_config(cfg):
    return ResidualConfig(
        h_s=_get(cfg, "residual.h_s", 1e-3, float),
        h_d=_get(cfg, "residual.h_d", 5e-4, float),
        h_x=_get(cfg, "residual.h_x", 1e-3, float),
        hutchinson_m=_get(cfg, "residual.hutchinson_m", 1, int),
        probe_dist=_get(cfg, "residual.probe", "rademacher", lambda s: s.strip().lower()),
        projection=_get(cfg, "residual.projection", False, _bool),
        nu_source=_get(cfg, "residual.nu", "perturbed_data", lambda s: s.strip().lower()),
        n_points=_get(cfg, "residual.n_points", 128, int),
    )


def residual_to_config(rc):
    return {
        "residual.h_s": repr(rc.h_s),
        "residual.h_d": repr(rc.h_d),
        "residual.h_x": repr(rc.h_x),
        "residual.hutchinson_m": str(rc.hutchinson_m),
        "residual.probe": rc.probe_dist,
        "residual.projection": str(rc.projection).lower(),
        "residual.nu": rc.nu_source,
        "residual.n_points": str(rc.n_points),
    }


def train_from_config(cfg, seed):
    return TrainConfig(
        objective=_get(cfg, "train.objective", "dsm", lambda s: s.strip().lower()),
        gamma=_get(cfg, "train.gamma", 0.0, float),
        weighting=_get(cfg, "train.weighting", "sigma2", lambda s: s.strip().lower()),
        lr=_get(cfg, "train.lr", 1e-3, float),
        batch=_get(cfg, "train.batch", 500, int),
        epochs=_get(cfg, "train.epochs", 2000, int),
        dataset_size=_get(cfg, "train.dataset_size", 10000, int),
        t_min=_get(cfg, "train.t_min", 1e-3, float),
        seed=seed,
        squared_residual=_get(cfg, "train.squared_residual", False, _bool),
        net=net_from_config(cfg),
        residual=residual_from_config(cfg),
    )


def train_to_config(tc):
    out = {
        "train.objective": tc.objective,
        "train.gamma": repr(tc.gamma),
        "train.weighting": tc.weighting,
        "train.lr": repr(tc.lr),
        "train.batch": str(tc.batch),
        "train.epochs": str(tc.epochs),
        "train.dataset_size": str(tc.dataset_size),
        "train.t_min": repr(tc.t_min),
        "train.squared_residual": str(tc.squared_residual).lower(),
    }
    out.update(net_to_config(tc.net))
    out.update(residual_to_config(tc.residual))
    return out


def ode_from_config(cfg):
    return OdeConfig(
        n_steps=_get(cfg, "ode.n_steps", 500, int),
        direction=_get(cfg, "ode.direction", "forward", lambda s: s.strip().lower()),
        divergence_mode=_get(cfg, "ode.divergence", "exact", lambda s: s.strip().lower()),
        hutchinson_probes=_get(cfg, "ode.hutchinson_probes", 64, int),
        t_min=_get(cfg, "ode.t_min", 1e-3, float),
    )


def grid_from_config(cfg):
    bounds = _get(cfg, "density.bounds", (-8.0, 8.0, -8.0, 8.0), _floats)
    if len(bounds) == 2:
        bounds = (bounds[0], bounds[1], bounds[0], bounds[1])
    if len(bounds) != 4:
        raise ConfigError("density.bounds must have 2 or 4 comma-separated values")
    n1 = _get(cfg, "density.n1", 50, int)
    n2 = _get(cfg, "density.n2", n1, int)
    return GridSpec(bounds[0], bounds[1], n1, bounds[2], bounds[3], n2)


def t_grid_from_config(cfg, key="sweep.t_grid", default=None):
    raw = cfg.get(key)
    if raw is None:
        if default is not None:
            return np.asarray(default, dtype=np.float64)
        raise ConfigError(f"missing {key}")
    if ":" in raw:
        parts = raw.split(":")
        if len(parts) != 3:
            raise ConfigError(f"{key} range must be start:stop:count")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise ConfigError(f"{key} count must be >= 1")
        return np.linspace(start, stop, count)
    grid = np.asarray(_floats(raw), dtype=np.float64)
    if grid.size == 0:
        raise ConfigError(f"{key} is empty")
    return grid
