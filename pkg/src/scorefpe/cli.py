"""Experiment harness.

Subcommands (all take --config PATH plus --seed/--out/--threads):

  residual-sweep   averaged residuals over a time grid (analytic or checkpoint)
  train            fit a score model; writes checkpoint + per-epoch loss CSV
  sample           reverse-SDE samples from a checkpoint or the analytic field
  density          probability-flow log-density on a rectangular grid
  bound-check      integrated-residual bound for a sinusoidal perturbation

Each run writes a manifest (resolved config, seed, timestamps, artifact list)
before doing work and finalizes it afterwards; rerunning a manifest's resolved
config with the same seed and --threads 1 reproduces the CSVs byte for byte.
Exit codes: 0 success, 2 config/input error, 3 numerical failure.
"""

import argparse
import datetime
import json
import os
import sys

import numpy as np
import torch

from . import __version__
from .config import (
    dump_config,
    grid_from_config,
    gmm_from_config,
    gmm_to_config,
    load_config,
    ode_from_config,
    residual_from_config,
    sde_from_config,
    sde_to_config,
    t_grid_from_config,
    train_from_config,
    train_to_config,
)
from .flow import (
    FIELD_EXACT,
    PRIOR,
    density_grid,
    reverse_sde_sample,
    write_density_csv,
    write_samples_csv,
)
from .gmm import AnalyticScoreField
from .net import NetScoreField, load_checkpoint, save_checkpoint
from .residual import UNIT_UNIFORM, PERTURBED_DATA, SinePerturbation, prop3_bound_check, r_dsm_like, r_fp
from .train import TrainDiverged, train, trained_score_net
from .utils import ConfigError, NumericsError, atomic_write_text, substream, write_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICS = 3


def _out_dir(args):
    if args.out:
        return args.out
    root = os.environ.get("SCOREFPE_OUT", "runs")
    return os.path.join(root, args.command)


def _resolve_field(cfg, key, sde, gmm, out_dir=None):
    """field=analytic or a checkpoint path (relative paths also tried under out_dir)."""
    raw = cfg.get(key, "analytic").strip()
    if raw == "analytic":
        return AnalyticScoreField(gmm, sde), "analytic"
    candidates = [raw] + ([os.path.join(out_dir, raw)] if out_dir else [])
    for path in candidates:
        if os.path.exists(path):
            return NetScoreField(load_checkpoint(path)), path
    raise ConfigError(f"checkpoint not found: {raw}")


class Manifest:
    def __init__(self, command, out_dir, resolved_cfg, seed, threads):
        self.path = os.path.join(out_dir, "manifest.json")
        self.body = {
            "command": command,
            "version": __version__,
            "seed": seed,
            "threads": threads,
            "config": dict(sorted(resolved_cfg.items())),
            "started_utc": _now(),
            "finished_utc": None,
            "artifacts": [],
        }
        self.out_dir = out_dir
        atomic_write_text(os.path.join(out_dir, "resolved.cfg"), dump_config(resolved_cfg))
        self.write()

    def add(self, *paths):
        self.body["artifacts"].extend(os.path.basename(p) for p in paths)

    def finalize(self):
        self.body["finished_utc"] = _now()
        self.write()

    def write(self):
        atomic_write_text(self.path, json.dumps(self.body, indent=2) + "\n")


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def cmd_residual_sweep(cfg, args, out_dir):
    sde = sde_from_config(cfg)
    gmm = gmm_from_config(cfg)
    rcfg = residual_from_config(cfg)
    t_grid = t_grid_from_config(cfg, "sweep.t_grid")
    mode = cfg.get("sweep.mode", "exact").strip().lower()
    if mode not in ("exact", "estimated"):
        raise ConfigError("sweep.mode must be 'exact' or 'estimated'")
    field, field_name = _resolve_field(cfg, "sweep.field", sde, gmm, out_dir)
    resolved = _base_resolved(cfg, args)
    manifest = Manifest("residual-sweep", out_dir, resolved, args.seed, args.threads)
    rows = []
    from dataclasses import replace

    for i, t in enumerate(t_grid):
        t = float(t)
        rng_u = substream(args.seed, "sweep", "uniform", i)
        rng_p = substream(args.seed, "sweep", "perturbed", i)
        rng_d = substream(args.seed, "sweep", "dsm", i)
        fp_uniform = r_fp(field, sde, t, replace(rcfg, nu_source=UNIT_UNIFORM), rng_u, gmm=gmm, mode=mode)
        fp_perturbed = r_fp(field, sde, t, replace(rcfg, nu_source=PERTURBED_DATA), rng_p, gmm=gmm, mode=mode)
        dsm = r_dsm_like(field, gmm, sde, t, rcfg.n_points, rng_d) if t > 0 else float("nan")
        rows.append((t, fp_uniform, fp_perturbed, dsm, rcfg.n_points, mode))
    out_csv = os.path.join(out_dir, "residual_sweep.csv")
    write_csv(out_csv, ["t", "r_fp_uniform", "r_fp_perturbed", "r_dsm_like", "n_points", "mode"], rows)
    manifest.add(out_csv)
    manifest.finalize()
    print(f"residual-sweep: field={field_name} mode={mode} -> {out_csv}")
    return EXIT_OK


def cmd_train(cfg, args, out_dir):
    sde = sde_from_config(cfg)
    gmm = gmm_from_config(cfg)
    tcfg = train_from_config(cfg, args.seed)
    resolved = _base_resolved(cfg, args)
    resolved.update(train_to_config(tcfg))
    manifest = Manifest("train", out_dir, resolved, args.seed, args.threads)
    ckpt_path = os.path.join(out_dir, "checkpoint.npz")
    loss_path = os.path.join(out_dir, "loss.csv")
    try:
        report = train(tcfg, gmm, sde)
    except TrainDiverged as err:
        net = trained_score_net(tcfg, err.last_good_params)
        save_checkpoint(net, ckpt_path)
        write_csv(loss_path, ["epoch", "dsm_loss", "fp_reg_loss", "total"], err.report.loss_rows())
        manifest.add(ckpt_path, loss_path)
        manifest.finalize()
        print(f"train: diverged ({err}); last-good checkpoint kept at {ckpt_path}", file=sys.stderr)
        raise
    net = trained_score_net(tcfg, report.final_params)
    save_checkpoint(net, ckpt_path)
    write_csv(loss_path, ["epoch", "dsm_loss", "fp_reg_loss", "total"], report.loss_rows())
    manifest.add(ckpt_path, loss_path)
    manifest.finalize()
    print(f"train: {tcfg.objective} gamma={tcfg.gamma} epochs={tcfg.epochs} "
          f"wall={report.wall_clock:.1f}s -> {ckpt_path}")
    return EXIT_OK


def cmd_sample(cfg, args, out_dir):
    sde = sde_from_config(cfg)
    gmm = gmm_from_config(cfg)
    field, field_name = _resolve_field(cfg, "sample.field", sde, gmm, out_dir)
    n = int(cfg.get("sample.n", "10000"))
    n_steps = int(cfg.get("sample.n_steps", "1000"))
    t_min = float(cfg.get("sample.t_min", "1e-3"))
    if n < 1 or n_steps < 1:
        raise ConfigError("sample.n and sample.n_steps must be >= 1")
    resolved = _base_resolved(cfg, args)
    manifest = Manifest("sample", out_dir, resolved, args.seed, args.threads)
    samples, ok = reverse_sde_sample(field, sde, n_steps, n, substream(args.seed, "sample"), t_min=t_min)
    if not np.all(ok):
        raise NumericsError(f"{int((~ok).sum())} of {n} reverse-SDE paths diverged")
    out_csv = os.path.join(out_dir, "samples.csv")
    write_samples_csv(out_csv, samples)
    manifest.add(out_csv)
    manifest.finalize()
    print(f"sample: field={field_name} n={n} steps={n_steps} -> {out_csv}")
    return EXIT_OK


def cmd_density(cfg, args, out_dir):
    sde = sde_from_config(cfg)
    gmm = gmm_from_config(cfg)
    field, field_name = _resolve_field(cfg, "density.field", sde, gmm, out_dir)
    ocfg = ode_from_config(cfg)
    grid = grid_from_config(cfg)
    terminal = cfg.get("density.terminal", "").strip().lower()
    if not terminal:
        terminal = FIELD_EXACT if field_name == "analytic" else PRIOR
    resolved = _base_resolved(cfg, args)
    manifest = Manifest("density", out_dir, resolved, args.seed, args.threads)
    points, log_density = density_grid(field, sde, grid, ocfg, rng=substream(args.seed, "density"), terminal=terminal)
    out_csv = os.path.join(out_dir, "density.csv")
    write_density_csv(out_csv, points, log_density)
    manifest.add(out_csv)
    manifest.finalize()
    print(f"density: field={field_name} grid={grid.n1}x{grid.n2} terminal={terminal} -> {out_csv}")
    return EXIT_OK


def cmd_bound_check(cfg, args, out_dir):
    sde = sde_from_config(cfg)
    gmm = gmm_from_config(cfg)
    rcfg = residual_from_config(cfg)
    amplitude = float(cfg.get("bound.amplitude", "0.01"))
    pert = SinePerturbation(amplitude)
    d0, d1, d2 = pert.declared_bounds(gmm.dim)
    d0 = float(cfg.get("bound.delta0", repr(d0)))
    d1 = float(cfg.get("bound.delta1", repr(d1)))
    d2 = float(cfg.get("bound.delta2", repr(d2)))
    t_grid = t_grid_from_config(cfg, "bound.t_grid", default=np.linspace(0.1, 0.9, 9))
    n_x = int(cfg.get("bound.n_points", "20"))
    radius = float(cfg.get("bound.radius", "8.0"))
    rng = substream(args.seed, "bound")
    x_points = rng.uniform(-radius, radius, size=(n_x, gmm.dim))
    resolved = _base_resolved(cfg, args)
    manifest = Manifest("bound-check", out_dir, resolved, args.seed, args.threads)
    report = prop3_bound_check(gmm, sde, d0, d1, d2, pert, t_grid, x_points, cfg=rcfg)
    out_csv = os.path.join(out_dir, "bound_check.csv")
    report.write_csv(out_csv)
    manifest.add(out_csv)
    manifest.finalize()
    status = "holds" if report.all_hold else "VIOLATED"
    print(f"bound-check: amplitude={amplitude} -> {out_csv} ({status})")
    return EXIT_OK


def _base_resolved(cfg, args):
    resolved = dict(cfg)
    resolved["run.seed"] = str(args.seed)
    resolved["run.threads"] = str(args.threads)
    for key, value in sde_to_config(sde_from_config(cfg)).items():
        resolved.setdefault(key, value)
    for key, value in gmm_to_config(gmm_from_config(cfg)).items():
        resolved.setdefault(key, value)
    return resolved


COMMANDS = {
    "residual-sweep": cmd_residual_sweep,
    "train": cmd_train,
    "sample": cmd_sample,
    "density": cmd_density,
    "bound-check": cmd_bound_check,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="scorefpe", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="root seed (default: run.seed from config, else 0)")
        p.add_argument("--out", default=None, help="output directory (default $SCOREFPE_OUT/<command>)")
        p.add_argument("--threads", type=int, default=1)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("run.seed", "0"))
        out_dir = _out_dir(args)
        os.makedirs(out_dir, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out_dir)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
