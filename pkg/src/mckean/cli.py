"""Experiment runner: every operation as a subcommand with JSON config.

All numeric parameters live in the JSON config (validated against a schema
before any computation); command-line flags carry only paths.  CSV floats
are printed with 17 significant digits, so identical configs give
byte-identical outputs.

Exit codes: 0 success, 1 verification failure, 2 config error.
"""

import argparse
import json
import os
import sys

import numpy as np
from jsonschema import Draft7Validator

from . import csvio
from .estimates import (bounded_source, check_kernel_bound, feynman_kac_u,
                        frozen_domination_report, mu_derivative_scan,
                        parametrix_u, series_domination_report,
                        smoothing_floor)
from .measure import EmpiricalMeasure
from .model import REGISTRY_NAMES, builtin_problem
from .parametrix import constants, density_field
from .simulator import SimulationConfig, picard_iterate, simulate_mkv

SCAN_PHIS = {
    "identity": (lambda x: x[..., 0], 1.0),
    "sqrt": (lambda x: np.minimum(np.abs(x[..., 0]), 1e6) ** 0.5, 0.5),
    "constant": (lambda x: np.ones(x.shape[:-1]), 1.0),
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["problem", "seed"],
    "additionalProperties": False,
    "properties": {
        "problem": {"type": "string", "enum": list(REGISTRY_NAMES)},
        "seed": {"type": "integer", "minimum": 0},
        "dim": {"type": "integer", "minimum": 1, "default": 1},
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mean": {"type": "number"},
                "std": {"type": "number", "exclusiveMinimum": 0},
                "n_particles": {"type": "integer", "minimum": 1},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t": {"type": "number"},
                "horizon": {"type": "number"},
                "n_steps": {"type": "integer", "minimum": 1},
                "n_particles": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "m_max": {"type": "integer", "minimum": 1},
            },
        },
        "density": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x": {"type": "number"},
                "s": {"type": "number"},
                "order": {"type": "integer", "minimum": 0},
            },
        },
        "constants": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "C": {"type": "number", "exclusiveMinimum": 0},
                "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "k_max": {"type": "integer", "minimum": 1},
            },
        },
        "scan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "phi": {"type": "string", "enum": list(SCAN_PHIS)},
                "s_offsets": {"type": "array", "items": {"type": "number"},
                              "minItems": 5},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "replicates": {"type": "integer", "minimum": 1},
            },
        },
        "u_check": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x": {"type": "number"},
                "order": {"type": "integer", "minimum": 0},
                "n_paths": {"type": "integer", "minimum": 100},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "order": {"type": "integer", "minimum": 0},
                "s_list": {"type": "array", "items": {"type": "number"},
                           "minItems": 1},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    errors = sorted(Draft7Validator(CONFIG_SCHEMA).iter_errors(cfg),
                    key=lambda e: list(e.path))
    if errors:
        msgs = "; ".join(f"{'/'.join(str(p) for p in e.path) or '<root>'}: "
                         f"{e.message}" for e in errors)
        raise ConfigError(f"invalid config: {msgs}")
    return cfg


def _problem(cfg):
    return builtin_problem(cfg["problem"], dim=cfg.get("dim", 1))


def _initial_measure(cfg):
    init = cfg.get("initial", {})
    # simulation.n_particles mirrors the run config; initial takes precedence
    n = init.get("n_particles",
                 cfg.get("simulation", {}).get("n_particles", 2000))
    mean = init.get("mean", 0.0)
    std = init.get("std", 1.0)
    dim = cfg.get("dim", 1)
    rng = np.random.default_rng(cfg["seed"])
    return EmpiricalMeasure(mean + std * rng.standard_normal((n, dim)))


def _sim_config(cfg, n_particles):
    sim = cfg.get("simulation", {})
    return SimulationConfig(
        t=sim.get("t", 0.0), horizon=sim.get("horizon", 0.5),
        n_steps=sim.get("n_steps", 64), n_particles=n_particles,
        seed=cfg["seed"], dim=cfg.get("dim", 1))


def cmd_simulate(cfg, out):
    coeffs = _problem(cfg)
    mu0 = _initial_measure(cfg)
    sim = cfg.get("simulation", {})
    config = _sim_config(cfg, mu0.n_particles)
    ens, flow = simulate_mkv(coeffs, mu0, config, tol=sim.get("tol", 1e-8),
                             m_max=sim.get("m_max", 25))
    ens.to_csv(os.path.join(out, "paths.csv"))
    flow.to_csv(os.path.join(out, "flow.csv"))
    return 0


def cmd_picard(cfg, out):
    coeffs = _problem(cfg)
    mu0 = _initial_measure(cfg)
    sim = cfg.get("simulation", {})
    config = _sim_config(cfg, mu0.n_particles)
    report = picard_iterate(coeffs, mu0, config, tol=sim.get("tol", 1e-8),
                            m_max=sim.get("m_max", 25))
    report.to_csv(os.path.join(out, "picard.csv"))
    return 0


def cmd_density(cfg, out):
    coeffs = _problem(cfg)
    mu0 = _initial_measure(cfg)
    config = _sim_config(cfg, mu0.n_particles)
    sim = cfg.get("simulation", {})
    _, flow = simulate_mkv(coeffs, mu0, config, tol=sim.get("tol", 1e-8),
                           m_max=sim.get("m_max", 25))
    dcfg = cfg.get("density", {})
    x = dcfg.get("x", 0.0)
    s = dcfg.get("s", config.horizon)
    order = dcfg.get("order", 3)
    fld = density_field(coeffs, flow, config.t, [x], s, order)
    ys = fld.grid.ys
    rows = []
    for k in range(order + 1):
        vals = fld.per_order[k, 0, -1, :]
        for y, v in zip(ys, vals):
            rows.append([k, config.t, x, s, y, v])
    csvio.write_csv(os.path.join(out, "density.csv"),
                    ["k", "s_prime", "y_prime", "s", "y", "value"],
                    np.array(rows))
    return 0


def cmd_constants(cfg, out):
    ccfg = cfg.get("constants", {})
    cons = constants(ccfg.get("C", 1.0), ccfg.get("gamma", 1.0),
                     ccfg.get("k_max", 3))
    cons.to_csv(os.path.join(out, "constants.csv"))
    return 0


def cmd_derivative_scan(cfg, out):
    coeffs = _problem(cfg)
    mu0 = _initial_measure(cfg)
    # one ensemble copy per support point: keep the scan measure modest
    mu0 = EmpiricalMeasure(mu0.particles[:min(mu0.n_particles, 256)])
    config = _sim_config(cfg, mu0.n_particles)
    scfg = cfg.get("scan", {})
    phi, _ = SCAN_PHIS[scfg.get("phi", "identity")]
    offs = scfg.get("s_offsets")
    if offs is None:
        span = config.horizon - config.t
        offs = [span * k / config.n_steps for k in (1, 2, 4, 8, 16, 32, 64)
                if k <= config.n_steps]
    s_values = config.t + np.asarray(offs)
    fit = mu_derivative_scan(coeffs, mu0, phi,
                             SCAN_PHIS[scfg.get("phi", "identity")][1],
                             s_values, config,
                             epsilon=scfg.get("epsilon", 1e-4),
                             replicates=scfg.get("replicates", 8))
    fit.to_csv(os.path.join(out, "scan.csv"))
    return 0


def cmd_u_check(cfg, out):
    coeffs = _problem(cfg)
    mu0 = _initial_measure(cfg)
    config = _sim_config(cfg, mu0.n_particles)
    sim = cfg.get("simulation", {})
    ucfg = cfg.get("u_check", {})
    x = ucfg.get("x", 0.0)
    order = ucfg.get("order", 3)
    n_paths = ucfg.get("n_paths", 20000)
    _, flow = simulate_mkv(coeffs, mu0, config, tol=sim.get("tol", 1e-8),
                           m_max=sim.get("m_max", 25))
    fk, stderr = feynman_kac_u(coeffs, bounded_source, config.t, x, mu0,
                               config, n_paths=n_paths, flow=flow)
    up = parametrix_u(coeffs, bounded_source, config.t, x, flow, K=order)
    tol = 3.0 * stderr + 5e-3
    csvio.write_csv(os.path.join(out, "u.csv"),
                    ["horizon", "feynman_kac", "stderr", "parametrix",
                     "abs_diff", "tolerance"],
                    [[config.horizon - config.t, fk, stderr, up,
                      abs(fk - up), tol]])
    return 0


def run_verification(cfg):
    """All bound reports and exponent fits for one problem; returns the
    JSON-ready summary {claim: {pass, ratio, constants}}."""
    coeffs = _problem(cfg)
    mu0 = _initial_measure(cfg)
    config = _sim_config(cfg, mu0.n_particles)
    sim = cfg.get("simulation", {})
    vcfg = cfg.get("verify", {})
    order = vcfg.get("order", 3)
    s_list = vcfg.get("s_list", [0.1, 0.25, config.horizon - config.t])
    tol = sim.get("tol", 1e-8)
    m_max = sim.get("m_max", 25)
    _, flow = simulate_mkv(coeffs, mu0, config, tol=tol, m_max=m_max)
    summary = {}

    rep = frozen_domination_report(coeffs, flow, config.t,
                                   config.t + max(s_list))
    summary["frozen_gaussian_domination"] = {
        "pass": rep.passed, "ratio": rep.max_ratio, "constants": rep.constants}

    rep = series_domination_report(coeffs, flow, config.t, 0.0,
                                   [config.t + s for s in s_list], K=order)
    summary["series_gaussian_domination"] = {
        "pass": rep.passed, "ratio": rep.max_ratio, "constants": rep.constants}

    rep = check_kernel_bound(coeffs, flow, config.t + max(s_list),
                             [-0.5, 0.0, 0.5], k_max=order)
    summary["kernel_bound"] = {
        "pass": rep.passed, "ratio": rep.max_ratio, "constants": rep.constants}

    norms = {}
    ok = True
    for s in s_list:
        fld = density_field(coeffs, flow, config.t, [0.0], config.t + s, order)
        norms[str(s)] = fld.normalization(0)
        ok = ok and abs(norms[str(s)] - 1.0) <= 1e-3
    summary["series_normalization"] = {
        "pass": ok, "ratio": max(abs(v - 1.0) for v in norms.values()) / 1e-3,
        "constants": norms}

    span = config.horizon - config.t
    offs = [span * k / config.n_steps for k in (1, 2, 4, 8, 16, 32, 64)
            if k <= config.n_steps]
    alpha = coeffs.profile.alpha1
    # the scan ensemble carries one copy per support point; cap its size
    mu_scan = EmpiricalMeasure(mu0.particles[:min(mu0.n_particles, 256)])
    scan_cfg = _sim_config(cfg, mu_scan.n_particles)
    fit = mu_derivative_scan(coeffs, mu_scan, coeffs.phi1, alpha,
                             config.t + np.asarray(offs), scan_cfg,
                             replicates=8)
    floor = smoothing_floor(alpha)
    summary["smoothing_rate"] = {
        "pass": bool(fit.degenerate or fit.slope >= floor),
        "ratio": float(fit.slope / floor) if floor != 0 else 0.0,
        "constants": {"slope": fit.slope, "floor": floor,
                      "r_squared": fit.r_squared}}

    fk, stderr = feynman_kac_u(coeffs, bounded_source, config.t, 0.0, mu0,
                               config, flow=flow, n_paths=20000)
    up = parametrix_u(coeffs, bounded_source, config.t, 0.0, flow, K=order)
    budget = 3.0 * stderr + 5e-3
    summary["representation_crosscheck"] = {
        "pass": bool(abs(fk - up) <= budget),
        "ratio": float(abs(fk - up) / budget),
        "constants": {"feynman_kac": fk, "stderr": stderr, "parametrix": up}}
    return summary


def cmd_verify(cfg, out):
    summary = run_verification(cfg)
    csvio.write_json(os.path.join(out, "verify.json"), summary)
    return 0 if all(v["pass"] for v in summary.values()) else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "picard": cmd_picard,
    "density": cmd_density,
    "constants": cmd_constants,
    "derivative-scan": cmd_derivative_scan,
    "u-check": cmd_u_check,
    "verify": cmd_verify,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mckean",
        description="simulation, density and verification experiments")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="JSON configuration file")
    parser.add_argument("-o", "--out", default=".", help="output directory")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    return COMMANDS[args.command](cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
