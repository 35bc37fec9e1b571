"""Command line entry point: ``exitlim run <config>`` and ``exitlim describe <name>``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigError, ExitlimError
from .experiments import EXPERIMENTS, cfg_get, parse_config, run_experiment

DESCRIPTIONS = {
    "halfplane_clt": """\
halfplane_clt: Gaussian limit of the rescaled exit pair in the half-plane.

The half-plane with constant drift pushing away from the boundary is exactly
solvable: the exit probability is exponential in the distance, so the
conditioned process is again a constant-drift diffusion, now pointing at the
boundary, independently of the noise level. The experiment samples exits with
that exact conditioned drift, rescales (exit time - T, exit point - z) by
1/eps, and tests the empirical covariance and marginals against the predicted
Gaussian law (covariance built from the flow linearization).

Inputs: domain.*, drift.* (constant), sim.*, cond.n_target, char.*, clt.x0,
stats thresholds. Outputs: samples.csv, report.json with the predicted law,
covariance z-scores, marginal and Mahalanobis KS results.""",
    "cross_validate": """\
cross_validate: h-transform sampler vs brute-force rejection.

At a moderate noise level both samplers target the same conditioned exit law:
rejection keeps trajectories of the original drift that reach the exit face,
the h-transform sampler runs the corrected drift and accepts everything. The
experiment compares exit-location and exit-time marginals by two-sample
Kolmogorov-Smirnov tests, checks the rejection acceptance rate against the
exact exit probability at the start point, and (optionally) verifies the
conditioned time-t marginal against reweighting by h(X_t)/h(x0).

Inputs: domain.*, drift.*, sim.*, cond.n_target, cond.max_trials, clt.x0,
optional cond.t_check. Outputs: samples.csv (both samplers), report.json.""",
    "elliptic_oracle": """\
elliptic_oracle: finite-difference solver vs the closed-form 1-d solution.

Solves the exit-probability equation b h' + (eps^2/2) h'' = 0 on an interval
with h = 1 on the exit end and 0 on the other, and compares with the exact
two-point solution, on two grids to verify the refinement ratio.

Inputs: domain.* (1-d box), drift.* (constant), pde.eps, pde.nx, sim.seed.
Outputs: h_field.csv, report.json with max relative errors and the ratio.""",
    "expansion": """\
expansion: order-eps^2 expansion of the log exit probability.

Solves the exit-probability problem on a box for several eps, transforms to
v = -eps^2 log h, and compares (v_eps - v0)/eps^2 against the transport
correction v1 computed along characteristics; likewise for gradients. The
residuals r0(eps), r1(eps) must decrease as eps decreases on the requested
region. A constant-drift 1-d control (where v = 2 b x exactly and v1 = 0)
must sit at discretization-error level for every eps.

Inputs: domain.* (box), drift.*, char.*, pde.eps_list, pde.nx, pde.ny,
region.lo, region.hi. Outputs: report.json with the residual table.""",
    "full_clt": """\
full_clt: the whole pipeline on a nonconstant drift.

Builds the limiting conditioned drift and the predicted Gaussian law of the
rescaled exit pair from a characteristic fan, solves the exit-probability
equation on a grid, samples exits with the grid-based h-transform drift, and
compares rescaled samples against the law: covariance z-scores, Mahalanobis
KS, and the z-score trend across two eps values (smaller eps must match the
law at least as well on the dominant covariance entry).

Inputs: domain.*, drift.*, char.*, pde.eps_list (two values), pde.nx, pde.ny,
sim.*, cond.n_target, clt.x0, stats thresholds. Outputs: samples.csv per eps,
report.json.""",
}


def describe(name: str) -> str:
    if name not in DESCRIPTIONS:
        raise ConfigError(
            f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENTS)}"
        )
    return DESCRIPTIONS[name]


def run(config_path, out_dir=None, workers=None) -> int:
    """Execute an experiment config; returns 0 iff every pass flag is true."""
    cfg = parse_config(config_path)
    out = Path(out_dir) if out_dir is not None else Path(cfg_get(cfg, "out", "runs/out"))
    if workers is None:
        workers = int(cfg_get(cfg, "workers", 0, int)) or (os.cpu_count() or 1)
    report = run_experiment(cfg, out, workers=workers)
    status = report.get("pass", {}).get("all", False)
    print(f"experiment {cfg.get('experiment')}: {'PASS' if status else 'FAIL'} -> {out}")
    return 0 if status else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="exitlim",
        description="conditioned diffusion exit problems: samplers, asymptotics, scaling limits",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="path to a flat key=value config (or a manifest.json)")
    p_run.add_argument("--out", default=None, help="output directory (overrides config)")
    p_run.add_argument("--workers", type=int, default=None,
                       help="worker threads (default: available parallelism)")
    p_desc = sub.add_parser("describe", help="describe a named experiment")
    p_desc.add_argument("name")
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            return run(args.config, args.out, args.workers)
        print(describe(args.name))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ExitlimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
