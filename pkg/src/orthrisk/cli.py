"""Command-line entry point: config in, artifacts + manifest out.

Exit codes: 0 ok, 1 validation/configuration, 2 solver/simulation,
3 verification FAIL.  Every run directory gets a manifest (config echo,
version, seed, wall time) and a schema-validated summary.json; reruns
overwrite atomically.  No environment variables are consulted.
"""

import argparse
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __name__ as _pkg
from .config import COMMANDS, RunConfig, load_config
from .costs import estimate_ergodic_value
from .domain import check_ellipticity, check_reflection_angle
from .errors import (ConfigurationError, InterpolationError, OrthriskError,
                     SimulationError, SolverError, ValidationError)
from .ergodic import (check_near_monotone, ergodic_residual,
                      vanishing_discount_run)
from .hjb import extract_policy, solve_discounted, verify_bounds
from .io import (make_summary, save_value_field, write_csv, write_json,
                 write_policy_csv)
from .martingale import martingale_residual
from .recurrence import Ball, classify_recurrence, default_ball, hitting_time_mc
from .sde import ControlPolicy, dump_paths_csv, simulate_batch
from .suite import end_to_end_suite

try:
    from importlib.metadata import version as _pkg_version
    VERSION = _pkg_version("orthrisk")
except Exception:  # not installed
    VERSION = "unknown"


def _parser():
    p = argparse.ArgumentParser(
        prog="orthrisk",
        description="risk-sensitive control of reflected diffusions: "
                    "simulate, solve, verify")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default=None)
        sp.add_argument("--seed", type=int, default=None)
    return p


def _cmd_simulate(cfg: RunConfig):
    model = cfg.build_model()
    pol = ControlPolicy.constant(cfg.simulate_kw["policy_weights"])
    nm = cfg.numerics
    bundles = simulate_batch(model, pol, nm["T"], nm["dt"], nm["n_paths"],
                             cfg.seed)
    outputs = []
    if cfg.simulate_kw["dump_paths"]:
        path = os.path.join(cfg.out_dir, "paths.csv")
        dump_paths_csv(bundles, path)
        outputs.append("paths.csv")
    finals = np.array([b.X[-1] for b in bundles])
    results = {
        "n_paths": len(bundles),
        "horizon": nm["T"],
        "dt": nm["dt"],
        "contaminated_fraction": float(np.mean([b.hit_outer for b in bundles])),
        "mean_final_state": finals.mean(axis=0),
        "mean_final_local_time": float(np.mean([b.xi[-1] for b in bundles])),
    }
    return results, outputs, 0


def _cmd_solve_discounted(cfg: RunConfig):
    model = cfg.build_model()
    field = solve_discounted(model, dtheta_max=cfg.numerics["dtheta_max"],
                             max_stored=cfg.numerics["max_stored"])
    save_value_field(field, os.path.join(cfg.out_dir, "field.npz"))
    pol = extract_policy(field, model.theta)
    write_policy_csv(pol, model.domain, os.path.join(cfg.out_dir, "policy.csv"))
    rep = verify_bounds(field)
    results = {
        "log_u_at_x0": field.log_u_at_x0(),
        "u_at_x0": float(np.exp(field.log_u_at_x0())),
        "theta_slices": int(field.theta_grid.size),
        "bounds": asdict(rep),
    }
    return results, ["field.npz", "policy.csv"], 0


def _cmd_solve_ergodic(cfg: RunConfig):
    model = cfg.build_model()
    ks = cfg.schedules["k_schedule"] or None
    est = vanishing_discount_run(model, cfg.schedules["alpha_schedule"], ks,
                                 dtheta_max=cfg.numerics["dtheta_max"],
                                 max_stored=cfg.numerics["max_stored"])
    err = ergodic_residual(model, est.rho, est.u_hat, est.policy)
    nm = check_near_monotone(model, est.rho)
    np.savez(os.path.join(cfg.out_dir, "u_hat.npz"), u_hat=est.u_hat)
    write_policy_csv(est.policy, model.domain,
                     os.path.join(cfg.out_dir, "policy.csv"))
    results = {
        "rho": est.rho,
        "rho_k": {f"{k:g}": v for k, v in est.rho_k.items()},
        "alpha_trend_increment": est.alpha_trend_increment,
        "k_trend_increment": est.k_trend_increment,
        "g_variation_shrinks": est.variation_shrinks,
        "ladder": [asdict(e) for e in est.table],
        "residual": asdict(err),
        "near_monotone": asdict(nm),
        "warnings": est.warnings,
    }
    return results, ["u_hat.npz", "policy.csv"], 0


def _cmd_probe_recurrence(cfg: RunConfig):
    model = cfg.build_model()
    rk = cfg.recurrence_kw
    ball = (Ball(rk["ball_center"], rk["ball_radius"])
            if rk["ball_center"] is not None and rk["ball_radius"] > 0
            else default_ball(model.domain))
    R_schedule = cfg.schedules["R_schedule"]
    if not R_schedule:
        raise ConfigurationError(
            "config key 'R_schedule': required for probe-recurrence")
    x_query = rk["x_query"] if rk["x_query"] is not None else model.x0
    pol = ControlPolicy.constant(cfg.simulate_kw["policy_weights"])
    rep = classify_recurrence(model, pol, ball, R_schedule, x_query,
                              eps_rec=rk["eps_rec"])
    frac, ci, mean_t = hitting_time_mc(
        model, pol, ball, cfg.numerics["t_cap"], cfg.numerics["n_paths"],
        cfg.seed, dt=cfg.numerics["dt"], x_init=x_query)
    write_csv(os.path.join(cfg.out_dir, "phi_R.csv"), ["R", "phi_R_at_query"],
              [[R, v] for R, v in rep.phi_R])
    results = {
        "verdict": rep.verdict,
        "limit_estimate": rep.limit_estimate,
        "phi_R": [[R, v] for R, v in rep.phi_R],
        "ball": {"center": list(ball.center), "radius": ball.radius},
        "x_query": list(x_query),
        "eps_rec": rk["eps_rec"],
        "mc_hit_fraction": frac,
        "mc_ci": list(ci),
        "mc_mean_hit_time": mean_t,
    }
    return results, ["phi_R.csv"], 0


def _cmd_verify(cfg: RunConfig):
    model = cfg.build_model()
    ell = check_ellipticity(model.coeffs, model.domain, seed=cfg.seed)
    ref = check_reflection_angle(model.coeffs, model.domain)
    pol = ControlPolicy.constant(cfg.simulate_kw["policy_weights"])
    mart = martingale_residual(model, pol, dt=cfg.numerics["dt"],
                               n_paths=cfg.numerics["n_paths"],
                               base_seed=cfg.seed)
    passed = ell.passed and ref.passed and mart.passed
    results = {
        "ellipticity": asdict(ell),
        "reflection_angle": asdict(ref),
        "martingale": {"max_abs_z": mart.max_abs_z, "passed": mart.passed,
                       "stats": [asdict(s) for s in mart.stats]},
        "passed": passed,
    }
    return results, [], 0 if passed else 3


def _cmd_suite(cfg: RunConfig):
    verdict = end_to_end_suite(seed=cfg.seed)
    code = 0 if verdict["overall"]["passed"] else 3
    return verdict, [], code


_DISPATCH = {
    "simulate": _cmd_simulate,
    "solve-discounted": _cmd_solve_discounted,
    "solve-ergodic": _cmd_solve_ergodic,
    "probe-recurrence": _cmd_probe_recurrence,
    "verify": _cmd_verify,
    "suite": _cmd_suite,
}


def run(cfg: RunConfig) -> int:
    """Execute a validated config; writes summary + manifest, returns the
    exit code."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    t0 = time.time()
    results, outputs, code = _DISPATCH[cfg.command](cfg)
    summary = make_summary(cfg.command, cfg.seed, results)
    write_json(summary, os.path.join(cfg.out_dir, "summary.json"))
    manifest = {
        "command": cfg.command,
        "seed": cfg.seed,
        "package_version": VERSION,
        "config_echo": cfg.raw_text,
        "outputs": sorted(outputs + ["summary.json"]),
        "wall_time_s": time.time() - t0,
    }
    write_json(manifest, os.path.join(cfg.out_dir, "manifest.json"))
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, command_override=args.command,
                          seed_override=args.seed, out_override=args.out)
        code = run(cfg)
    except (ConfigurationError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        _write_error(args.out, e)
        return 1
    except (SolverError, SimulationError, InterpolationError) as e:
        print(f"error: {e}", file=sys.stderr)
        _write_error(args.out, e)
        return 2
    if code == 3:
        print("verification FAIL", file=sys.stderr)
    return code


def _write_error(out_dir, exc):
    if not out_dir:
        return
    try:
        write_json({"error_type": type(exc).__name__, "message": str(exc)},
                   os.path.join(out_dir, "error.json"))
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
