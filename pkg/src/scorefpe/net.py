"""Trainable score model: a small MLP over (x, Fourier-embedded t) with a flat
parameter vector, reverse-mode gradients of scalar losses, exact input
Jacobians, and a plain bias-corrected Adam update.

The flat layout is layer-major with weights before biases, so checkpoints are
portable byte-for-byte. All math runs in float64 on CPU; forward passes are
pure functions of (params, x, t).
"""

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .utils import ConfigError, NumericsError

CHECKPOINT_VERSION = "scorenet-v1"

_ACTIVATIONS = {"silu": torch.nn.functional.silu, "tanh": torch.tanh}


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 2
    hidden_widths: tuple = (128, 128)
    time_embed_dim: int = 64
    activation: str = "silu"
    fourier_scale: float = 30.0

    def __post_init__(self):
        if len(self.hidden_widths) == 0:
            raise ConfigError("hidden_widths must be non-empty")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ConfigError("time_embed_dim must be even and >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.fourier_scale <= 0:
            raise ConfigError("fourier_scale must be positive")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    def layer_shapes(self):
        sizes = [self.input_dim + self.time_embed_dim, *self.hidden_widths, self.input_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    def n_params(self):
        return sum(nin * nout + nout for nin, nout in self.layer_shapes())


def _forward(config, freqs, params, x, t):
    """Pure forward pass on torch tensors; differentiable w.r.t. params and x.

    x: (N, D), t: (N,); returns (N, D).
    """
    proj = 2.0 * math.pi * t[:, None] * freqs[None, :]
    h = torch.cat([x, torch.sin(proj), torch.cos(proj)], dim=1)
    act = _ACTIVATIONS[config.activation]
    offset = 0
    shapes = config.layer_shapes()
    for i, (nin, nout) in enumerate(shapes):
        w = params[offset : offset + nin * nout].reshape(nout, nin)
        offset += nin * nout
        b = params[offset : offset + nout]
        offset += nout
        h = h @ w.T + b
        if i < len(shapes) - 1:
            h = act(h)
    return h


class ScoreNet:
    """Score model with an immutable config and a flat float64 parameter vector."""

    def __init__(self, config, seed, freqs, params):
        self.config = config
        self.seed = int(seed)
        self.freqs = torch.as_tensor(np.asarray(freqs, dtype=np.float64))
        self._params = torch.as_tensor(np.asarray(params, dtype=np.float64))
        if self._params.numel() != config.n_params():
            raise ConfigError("parameter vector length does not match the config")

    @property
    def dim(self):
        return self.config.input_dim

    @property
    def n_params(self):
        return self.config.n_params()

    def params_numpy(self):
        return self._params.detach().numpy().copy()

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ConfigError("parameter vector has the wrong length")
        self._params = torch.as_tensor(flat.copy())

    def _coerce(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(x.shape[0], float(t))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
            raise NumericsError("non-finite network input")
        return torch.as_tensor(x), torch.as_tensor(t)

    def eval(self, x, t):
        """Forward pass to numpy; accepts a point (D,) or a batch (N, D)."""
        squeeze = np.asarray(x).ndim == 1
        xt, tt = self._coerce(x, t)
        with torch.no_grad():
            out = _forward(self.config, self.freqs, self._params, xt, tt)
        out = out.numpy()
        return out[0] if squeeze else out


def net_init(config, seed):
    """Deterministic initialization: fan-in-scaled uniform weights and biases,
    fixed Fourier frequencies drawn N(0, fourier_scale^2)."""
    rng = np.random.default_rng(seed)
    freqs = rng.normal(0.0, config.fourier_scale, size=config.time_embed_dim // 2)
    chunks = []
    for nin, nout in config.layer_shapes():
        bound = 1.0 / math.sqrt(nin)
        chunks.append(rng.uniform(-bound, bound, size=nin * nout))
        chunks.append(rng.uniform(-bound, bound, size=nout))
    return ScoreNet(config, seed, freqs, np.concatenate(chunks))


class Tape:
    """Records forward evaluations against one gradient-enabled parameter leaf.

    Build losses by combining `tape.eval(...)` outputs into a scalar and pass
    it to `tape.set_value`; `loss_backward` then returns d(value)/d(params).
    """

    def __init__(self, net):
        self.net = net
        self.params = net._params.detach().clone().requires_grad_(True)
        self.value = None
        self.components = {}

    def eval(self, x, t):
        """Differentiable forward pass; x, t may be numpy arrays or torch tensors."""
        if not torch.is_tensor(x):
            x = torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        if not torch.is_tensor(t):
            t = np.asarray(t, dtype=np.float64)
            t = torch.as_tensor(np.full(x.shape[0], float(t)) if t.ndim == 0 else t)
        return _forward(self.net.config, self.net.freqs, self.params, x, t)

    def set_value(self, value):
        if not torch.is_tensor(value) or value.ndim != 0:
            raise ConfigError("tape value must be a scalar tensor")
        self.value = value
        return self


def loss_backward(tape):
    """Exact reverse-mode gradient of the tape's scalar value w.r.t. the flat params."""
    if tape.value is None:
        raise ConfigError("tape was not reduced to a scalar; call set_value first")
    if not torch.isfinite(tape.value):
        raise NumericsError(f"non-finite loss value {float(tape.value)!r}")
    (grad,) = torch.autograd.grad(tape.value, tape.params, allow_unused=False)
    return grad.detach().numpy().copy()


def _jacobian_rows(config, freqs, params, x, t):
    xt = torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=np.float64))).requires_grad_(True)
    tarr = np.asarray(t, dtype=np.float64)
    tt = torch.as_tensor(np.full(xt.shape[0], float(tarr)) if tarr.ndim == 0 else tarr)
    out = _forward(config, freqs, params, xt, tt)
    dim = out.shape[1]
    rows = []
    for i in range(dim):
        (g,) = torch.autograd.grad(out[:, i].sum(), xt, retain_graph=i < dim - 1)
        rows.append(g)
    return torch.stack(rows, dim=1)  # (N, D_out, D_in)


def input_jacobian(net, x, t):
    """Exact Jacobian of the network output w.r.t. x, via one reverse pass per output."""
    squeeze = np.asarray(x).ndim == 1
    jac = _jacobian_rows(net.config, net.freqs, net._params, x, t).numpy()
    return jac[0] if squeeze else jac


def net_divergence(net, x, t):
    """Exact divergence (trace of the input Jacobian), batched."""
    squeeze = np.asarray(x).ndim == 1
    jac = _jacobian_rows(net.config, net.freqs, net._params, x, t).numpy()
    div = np.trace(jac, axis1=1, axis2=2)
    return div[0] if squeeze else div


class NetScoreField:
    """Duck-typed score-field view of a ScoreNet (eval/jacobian/divergence/div_probe)."""

    def __init__(self, net):
        self.net = net

    @property
    def dim(self):
        return self.net.dim

    def eval(self, x, t):
        return self.net.eval(x, t)

    def jacobian(self, x, t):
        return input_jacobian(self.net, x, t)

    def divergence(self, x, t):
        return net_divergence(self.net, x, t)

    def div_probe(self, x, t, v):
        """Hutchinson probe value v . (J v) without materializing J (one vjp)."""
        xt = torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=np.float64))).requires_grad_(True)
        tarr = np.asarray(t, dtype=np.float64)
        tt = torch.as_tensor(np.full(xt.shape[0], float(tarr)) if tarr.ndim == 0 else tarr)
        vt = torch.as_tensor(np.atleast_2d(np.asarray(v, dtype=np.float64)))
        out = _forward(self.net.config, self.net.freqs, self.net._params, xt, tt)
        (g,) = torch.autograd.grad((out * vt).sum(), xt)
        return (g * vt).sum(dim=1).numpy()


def save_checkpoint(net, path):
    """Self-describing checkpoint: config JSON, seed, Fourier frequencies, flat params."""
    np.savez(
        path,
        version=np.array(CHECKPOINT_VERSION),
        config=np.array(json.dumps({
            "input_dim": net.config.input_dim,
            "hidden_widths": list(net.config.hidden_widths),
            "time_embed_dim": net.config.time_embed_dim,
            "activation": net.config.activation,
            "fourier_scale": net.config.fourier_scale,
        })),
        seed=np.array(net.seed),
        freqs=net.freqs.numpy(),
        params=net.params_numpy(),
    )


def load_checkpoint(path):
    with np.load(path) as data:
        version = str(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version!r}")
        raw = json.loads(str(data["config"]))
        config = NetConfig(
            input_dim=int(raw["input_dim"]),
            hidden_widths=tuple(raw["hidden_widths"]),
            time_embed_dim=int(raw["time_embed_dim"]),
            activation=raw["activation"],
            fourier_scale=float(raw["fourier_scale"]),
        )
        return ScoreNet(config, int(data["seed"]), data["freqs"], data["params"])


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray


def adam_init(n_params):
    return AdamState(0, np.zeros(n_params), np.zeros(n_params))


def adam_step(state, params, grad, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ConfigError("gradient and parameter shapes disagree")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NumericsError(f"non-finite gradient in {bad} of {grad.size} coordinates")
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad**2
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(step, m, v)
