"""End-to-end consistency suite: every module run on the canonical models.

Aggregates the per-module reports into one machine-readable verdict with one
entry per check.  Tolerances are the documented desk-scale ones; any FAIL
flips the overall verdict (nonzero exit through the CLI).  The suite seeds
all randomness from one input seed, so byte-identical verdicts on rerun.
"""

import numpy as np

from . import domain as dm
from .costs import dpp_residual, estimate_discounted_value
from .ergodic import (check_near_monotone, ergodic_residual,
                      vanishing_discount_run)
from .hjb import (GridOperator, make_field_policy, representation_check,
                  solve_discounted, verify_bounds)
from .martingale import default_catalog, martingale_residual
from .recurrence import Ball, classify_recurrence
from .rng import split64
from .sde import ControlPolicy, simulate_batch


def _check(results, name, passed, **details):
    results[name] = {"passed": bool(passed), **details}


def end_to_end_suite(seed: int = 1, fast: bool = True) -> dict:
    """Canonical 1-D and 2-D models through all modules; returns the verdict
    mapping check name -> {passed, details...}."""
    res = {}
    h1 = 1 / 16
    m1 = dm.canonical_model_1d(h=h1, alpha=1.0, seed=seed)
    m2 = dm.canonical_model_2d(h=1 / 8, alpha=1.0, seed=seed)

    for tag, m in (("1d", m1), ("2d", m2)):
        ell = dm.check_ellipticity(m.coeffs, m.domain, sample_count=128,
                                   seed=seed)
        _check(res, f"ellipticity_{tag}", ell.passed,
               min_quadratic_form=ell.min_quadratic_form, delta=ell.delta)
        ref = dm.check_reflection_angle(m.coeffs, m.domain)
        _check(res, f"reflection_angle_{tag}", ref.passed,
               min_gamma_dot_n=ref.min_gamma_dot_n, eta=ref.eta)

    # simulator invariants: confinement and local-time complementarity
    pol_minus = ControlPolicy.constant([1.0, 0.0], name="drift-")
    pol_plus = ControlPolicy.constant([0.0, 1.0], name="drift+")
    bundles = simulate_batch(m1, pol_minus, T=2.0, dt=1e-2, n_paths=64,
                             base_seed=split64(seed, 11), x_init=[1.0])
    confined = all(b.X.min() >= 0.0 for b in bundles)
    h_refl = m1.domain.h / 2
    comp_ok = True
    for b in bundles:
        dxi = np.diff(b.xi)
        interior = b.X[1:, :].min(axis=1) > h_refl
        comp_ok &= float(np.abs(dxi[interior]).sum()) == 0.0
    _check(res, "orthant_confinement", confined)
    _check(res, "local_time_complementarity", comp_ok, h_refl=h_refl)

    rerun = simulate_batch(m1, pol_minus, T=2.0, dt=1e-2, n_paths=64,
                           base_seed=split64(seed, 11), x_init=[1.0])
    ident = all(np.array_equal(a.X, b.X) and np.array_equal(a.xi, b.xi)
                for a, b in zip(bundles, rerun))
    _check(res, "simulation_determinism", ident)

    # discounted solve, bounds, comparison principle
    f1 = solve_discounted(m1)
    b1 = verify_bounds(f1)
    _check(res, "discounted_bounds_1d", b1.passed,
           upper_slack=b1.upper_slack, lower_slack=b1.lower_slack,
           dtheta_slack_log=b1.dtheta_slack_log)
    f2 = solve_discounted(m2)
    b2 = verify_bounds(f2)
    _check(res, "discounted_bounds_2d", b2.passed, upper_slack=b2.upper_slack)

    half = dm.canonical_model_1d(h=h1, alpha=1.0, seed=seed, cost_scale=0.5)
    f_half = solve_discounted(half)
    cmp_ok = bool(np.all(f_half.log_u() <= f1.log_u() + 1e-9))
    _check(res, "discounted_comparison", cmp_ok)

    rep = representation_check(m1, f1, n_paths=4000,
                               base_seed=split64(seed, 12), dt=2e-3)
    bars = max(3.0 * rep.combined_bars(), 0.02)
    _check(res, "representation", rep.relative_gap <= bars,
           relative_gap=rep.relative_gap, bars=bars,
           contaminated_fraction=rep.contaminated_fraction)

    sliding = make_field_policy(f1, m1)
    dpp_opt = dpp_residual(m1, sliding, f1, box_hi=1.0, t_cap=1.0,
                           n_paths=4000, base_seed=split64(seed, 13),
                           dt=5e-4, x_init=[0.5])
    _check(res, "dpp_optimal", abs(dpp_opt.relative_residual) <= 0.02,
           relative_residual=dpp_opt.relative_residual)
    dpp_sub = dpp_residual(m1, pol_plus, f1, box_hi=1.0, t_cap=1.0,
                           n_paths=4000, base_seed=split64(seed, 14),
                           dt=5e-4, x_init=[0.5])
    _check(res, "dpp_suboptimal_one_sided",
           dpp_sub.relative_residual >= -2.0 * dpp_sub.se_relative,
           relative_residual=dpp_sub.relative_residual,
           se=dpp_sub.se_relative)

    # vanishing discount: trend diagnostics, transform bound, residual
    sched = [1.0, 0.5, 0.25, 0.125] if fast else [1.0, 0.5, 0.25, 0.125, 0.0625]
    rho_est = vanishing_discount_run(m1, alpha_schedule=sched,
                                     k_schedule=[4.0, 6.0])
    bound_ok = all(e.bound_lhs <= e.bound_rhs * (1 + 1e-6) for e in rho_est.table)
    _check(res, "ergodic_transform_bound", bound_ok)
    _check(res, "ergodic_g_variation_shrinks", rho_est.variation_shrinks,
           variations=[e.g_spatial_variation for e in rho_est.table
                       if e.k == max(rho_est.rho_k)])
    err = ergodic_residual(m1, rho_est.rho, rho_est.u_hat, rho_est.policy)
    dtheta = m1.alpha / GridOperator(m1).cfl_denominator(m1.theta)
    res_tol = 5.0 * (h1 + dtheta + sched[-1]) * max(err.scale, 1.0)
    _check(res, "ergodic_residual", err.interior_max <= res_tol,
           interior_max=err.interior_max, tolerance=res_tol,
           boundary_max=err.boundary_max, rho=rho_est.rho)
    nm = check_near_monotone(m1, rho_est.rho)
    _check(res, "near_monotone", nm.passed, shell_min=nm.shell_min_cost,
           rho=nm.rho, label=nm.label)

    # recurrence probe on drifted 1-D models
    dom16 = dm.OrthantDomain(1, 16.0, h1)
    acts1 = dm.ActionSpace(("a",))
    ball = Ball(center=(1.5,), radius=0.5)
    for tag, mu, want in (("recurrent", -1.0, "recurrent"),
                          ("transient", 0.5, "transient")):
        co = dm.make_coefficients(1, drift_kind="constant",
                                  drift_params=((mu,),), cost_kind="zero")
        mm = dm.ModelSpec(dom16, acts1, co, alpha=1.0, kappa=0.05)
        rep_r = classify_recurrence(mm, ControlPolicy.constant([1.0]), ball,
                                    [6.0, 10.0, 14.0], (3.0,))
        _check(res, f"recurrence_{tag}", rep_r.verdict == want,
               verdict=rep_r.verdict, phi=rep_r.phi_R)

    # martingale identity on the 1-D RBM
    rbm_co = dm.make_coefficients(1, drift_kind="constant",
                                  drift_params=((0.0,),), cost_kind="ramp")
    rbm = dm.ModelSpec(dm.OrthantDomain(1, 8.0, h1), acts1, rbm_co,
                       alpha=1.0, kappa=0.05)
    mart = martingale_residual(rbm, ControlPolicy.constant([1.0]),
                               fs=default_catalog(rbm), dt=1e-3,
                               n_paths=4000 if fast else 100_000,
                               base_seed=split64(seed, 15), x_init=[0.0])
    _check(res, "martingale_identity", mart.passed, max_abs_z=mart.max_abs_z,
           boundary_sign_min=mart.boundary_sign_min)

    res["overall"] = {"passed": all(v["passed"] for v in res.values())}
    return res
