"""Training objectives and loop: denoising score matching, score matching with
the Fokker-Planck residual regularizer, and residual-guided learning from the
t=0 score alone.

Every loss is assembled on a Tape from forward network evaluations only, so a
single reverse pass yields the parameter gradient. Randomness comes from named
substreams of the config seed; with a fixed thread count the loop is
bit-reproducible.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import sde as sde_mod
from .gmm import gmm_sample, gmm_score
from .net import NetConfig, Tape, adam_init, adam_step, loss_backward, net_init
from .residual import ResidualConfig, _estimated_residual_torch, draw_probes
from .utils import ConfigError, NumericsError, substream

DSM = "dsm"
FP_REG = "fp_reg"
FPE_GUIDED = "fpe_guided"
OBJECTIVES = (DSM, FP_REG, FPE_GUIDED)

SIGMA_SQUARED = "sigma2"
G_SQUARED = "g2"
WEIGHTINGS = (SIGMA_SQUARED, G_SQUARED)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = DSM
    gamma: float = 0.0
    weighting: str = SIGMA_SQUARED
    lr: float = 1e-3
    batch: int = 500
    epochs: int = 2000
    dataset_size: int = 10000
    t_min: float = 1e-3
    seed: int = 0
    squared_residual: bool = False  # ablation: penalize |eps|^2 instead of |eps|
    net: NetConfig = field(default_factory=NetConfig)
    residual: ResidualConfig = field(default_factory=ResidualConfig)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if not (0 < self.t_min <= 0.1):
            raise ConfigError("t_min must lie in (0, 0.1]")
        if self.lr <= 0 or self.batch < 1 or self.epochs < 0 or self.dataset_size < 1:
            raise ConfigError("lr > 0, batch >= 1, epochs >= 0, dataset_size >= 1 required")

    @property
    def steps_per_epoch(self):
        return math.ceil(self.dataset_size / self.batch)


@dataclass
class TrainReport:
    epochs: list        # rows (epoch, dsm_term, reg_term, total)
    final_params: np.ndarray
    wall_clock: float
    config: TrainConfig
    aborted_at: int | None = None  # epoch index if training stopped on a non-finite loss

    def loss_rows(self):
        return [(e, d, r, tot) for e, d, r, tot in self.epochs]


class TrainDiverged(NumericsError):
    """Loss became non-finite; carries the last finite parameter vector."""

    def __init__(self, message, last_good_params, report):
        super().__init__(message)
        self.last_good_params = last_good_params
        self.report = report


def _weight(sde, t, weighting):
    if weighting == SIGMA_SQUARED:
        return np.asarray(sde_mod.kernel_stats(sde, t).std, dtype=np.float64) ** 2
    return np.asarray(sde_mod.diffusion(sde, t), dtype=np.float64) ** 2


def dsm_loss(net, gmm, sde, weighting, batch, t_min, rng, tape=None, x0=None):
    """Denoising score matching on one minibatch.

    Samples t ~ U[t_min, t_max], x0 from the data mixture (or takes the rows
    given), x from the transition kernel, and returns the tape of
    0.5 mean[ lambda(t) |s(x,t) - grad log q_{0t}(x|x0)|^2 ].
    """
    tape = tape or Tape(net)
    if x0 is None:
        x0 = gmm_sample(gmm, batch, rng)
    t = rng.uniform(t_min, sde.t_max, size=len(x0))
    stats = sde_mod.kernel_stats(sde, t)
    z = rng.standard_normal(x0.shape)
    x = stats.mean_coef[:, None] * x0 + stats.std[:, None] * z
    target = -z / stats.std[:, None]
    lam = _weight(sde, t, weighting)
    s = tape.eval(x, t)
    sq = ((s - torch.as_tensor(target)) ** 2).sum(-1)
    value = 0.5 * (torch.as_tensor(lam) * sq).mean()
    tape.components["dsm"] = float(value.detach())
    return tape.set_value(value)


def fp_reg_loss(net, gmm, sde, residual_cfg, batch, t_min, rng, tape=None, squared=False):
    """Residual regularizer (1/D) E |eps(x,t)|_2 on the estimated path.

    In projection mode the penalty is (1/D) E |<eps, v>| instead. Points come
    from residual_cfg.nu_source with t ~ U[t_min, t_max]; all terms are forward
    evaluations, so the tape stays first-order differentiable.
    """
    tape = tape or Tape(net)
    dim = net.dim
    t = rng.uniform(t_min, sde.t_max, size=batch)
    if residual_cfg.nu_source == "unit_uniform":
        x = rng.uniform(0.0, 1.0, size=(batch, dim))
    else:
        x0 = gmm_sample(gmm, batch, rng)
        stats = sde_mod.kernel_stats(sde, t)
        x = stats.mean_coef[:, None] * x0 + stats.std[:, None] * rng.standard_normal(x0.shape)
    v = draw_probes(rng, (batch, residual_cfg.hutchinson_m, dim), residual_cfg.probe_dist)
    out = _estimated_residual_torch(
        tape.eval, sde, torch.as_tensor(x), torch.as_tensor(t), torch.as_tensor(v), residual_cfg, sde.t_max
    )
    if residual_cfg.projection:
        value = (out**2 if squared else out.abs()).mean() / dim
    else:
        sq = (out**2).sum(-1)
        value = (sq if squared else torch.sqrt(sq + 1e-300)).mean() / dim
    tape.components["fp_reg"] = float(value.detach())
    return tape.set_value(value)


def combined_loss(net, gmm, sde, weighting, residual_cfg, batch, reg_batch, t_min, gamma, rng_dsm, rng_reg, x0=None, squared=False):
    """DSM plus gamma times the residual regularizer on independent minibatches."""
    tape = Tape(net)
    dsm_loss(net, gmm, sde, weighting, batch, t_min, rng_dsm, tape=tape, x0=x0)
    value = tape.value
    if gamma > 0.0:
        fp_reg_loss(net, gmm, sde, residual_cfg, reg_batch, t_min, rng_reg, tape=tape, squared=squared)
        value = value + gamma * tape.value
    else:
        tape.components["fp_reg"] = 0.0
    return tape.set_value(value)


def fpe_guided_loss(net, gmm, sde, residual_cfg, batch, t_min, rng, tape=None, reg_batch=None):
    """Learn the whole time-indexed score from the t=0 score alone:
    E |eps(x,t)|_2 over perturbed data plus E |s(x0, 0) - score(x0)|_2 over data.
    """
    tape = tape or Tape(net)
    dim = net.dim
    reg_batch = reg_batch or batch
    t = rng.uniform(t_min, sde.t_max, size=reg_batch)
    x0r = gmm_sample(gmm, reg_batch, rng)
    stats = sde_mod.kernel_stats(sde, t)
    x = stats.mean_coef[:, None] * x0r + stats.std[:, None] * rng.standard_normal(x0r.shape)
    v = draw_probes(rng, (reg_batch, residual_cfg.hutchinson_m, dim), residual_cfg.probe_dist)
    cfg = replace(residual_cfg, projection=False)
    eps = _estimated_residual_torch(
        tape.eval, sde, torch.as_tensor(x), torch.as_tensor(t), torch.as_tensor(v), cfg, sde.t_max
    )
    residual_term = torch.sqrt((eps**2).sum(-1) + 1e-300).mean()

    x0 = gmm_sample(gmm, batch, rng)
    target0 = gmm_score(gmm, x0)
    s0 = tape.eval(x0, np.zeros(len(x0)))
    initial_term = torch.sqrt(((s0 - torch.as_tensor(target0)) ** 2).sum(-1) + 1e-300).mean()

    tape.components["fp_reg"] = float(residual_term.detach())
    tape.components["dsm"] = float(initial_term.detach())  # logged in the dsm column
    return tape.set_value(residual_term + initial_term)


def train(cfg, gmm, sde, callback=None):
    """Run Adam over the selected objective; deterministic given cfg.seed.

    Returns a TrainReport with per-epoch loss components and the final flat
    parameter vector. Raises TrainDiverged (carrying the last finite
    parameters) if a loss or gradient goes non-finite.
    """
    t_start = time.time()
    net_seed = int(substream(cfg.seed, "init").integers(0, 2**31 - 1))
    net = net_init(cfg.net, net_seed)
    params = net.params_numpy()
    state = adam_init(len(params))
    rng_data = substream(cfg.seed, "data")
    rng_shuffle = substream(cfg.seed, "shuffle")
    rng_dsm = substream(cfg.seed, "dsm")
    rng_reg = substream(cfg.seed, "reg")
    dataset = gmm_sample(gmm, cfg.dataset_size, rng_data)
    epochs_log = []
    reg_batch = cfg.residual.n_points

    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(cfg.dataset_size)
        dsm_sum = reg_sum = tot_sum = 0.0
        for step in range(cfg.steps_per_epoch):
            rows = order[step * cfg.batch : (step + 1) * cfg.batch]
            x0 = dataset[rows]
            if cfg.objective == FPE_GUIDED:
                tape = fpe_guided_loss(net, gmm, sde, cfg.residual, len(x0), cfg.t_min, rng_reg, reg_batch=reg_batch)
            else:
                gamma = cfg.gamma if cfg.objective == FP_REG else 0.0
                tape = combined_loss(
                    net, gmm, sde, cfg.weighting, cfg.residual, len(x0), reg_batch,
                    cfg.t_min, gamma, rng_dsm, rng_reg, x0=x0, squared=cfg.squared_residual,
                )
            try:
                grad = loss_backward(tape)
                params, state = adam_step(state, params, grad, cfg.lr)
            except NumericsError as err:
                report = TrainReport(epochs_log, params, time.time() - t_start, cfg, aborted_at=epoch)
                raise TrainDiverged(str(err), params, report) from err
            net.set_params(params)
            dsm_sum += tape.components.get("dsm", 0.0)
            reg_sum += tape.components.get("fp_reg", 0.0)
            tot_sum += float(tape.value.detach())
        k = cfg.steps_per_epoch
        epochs_log.append((epoch, dsm_sum / k, reg_sum / k, tot_sum / k))
        if callback is not None:
            callback(epoch, epochs_log[-1])
    return TrainReport(epochs_log, params, time.time() - t_start, cfg)


def trained_score_net(cfg, params):
    """Materialize the ScoreNet for a TrainConfig with trained flat parameters."""
    net_seed = int(substream(cfg.seed, "init").integers(0, 2**31 - 1))
    net = net_init(cfg.net, net_seed)
    net.set_params(params)
    return net


def trained_net(report):
    """Materialize the ScoreNet described by a TrainReport."""
    return trained_score_net(report.config, report.final_params)
