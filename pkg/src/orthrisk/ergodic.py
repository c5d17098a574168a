"""Vanishing-discount construction of the ergodic risk-sensitive value.

For each truncation level k the running cost is cut off by a cubic ramp
outside the ball of radius k, the discounted equation is solved on a
shrinking discount ladder, and the growth indicator

    g = alpha*phi + alpha*theta*dphi/dtheta,   phi = ln(u)/theta,

is read off at theta = theta_max averaged over the central probe box (the
middle 50% per axis, clear of both the reflecting and the artificial outer
faces).  The limit pair (rho, u_hat) with u_hat normalized to 1 at x0 then
satisfies the stationary equation theta*rho*u = min_v[b.grad u + theta r u]
+ 1/2 tr(a D2 u) up to the reported residual.  Trend tables over the alpha
and k ladders replace subsequence extraction; non-shrinking spatial
variation of g raises a warning, not an error.
"""

from dataclasses import dataclass, field, replace
import numpy as np

from .domain import CoefficientField, ModelSpec, OrthantDomain
from .errors import ValidationError
from .hjb import GridOperator, Policy, ValueField, extract_policy, solve_discounted


def smoothstep_ramp(t: np.ndarray, k: float) -> np.ndarray:
    """C^1 cutoff: 1 on [0, k], cubic 3s^2-2s^3 descent on [k, k+1], 0 after."""
    s = np.clip(np.asarray(t, dtype=float) - k, 0.0, 1.0)
    return 1.0 - (3.0 * s * s - 2.0 * s ** 3)


def truncate_cost(coeffs: CoefficientField, k: float) -> CoefficientField:
    """New field with cost rbar_k(x, s) = rbar(x, s) * ramp(|x|, k)."""
    if k <= 0:
        raise ValidationError(f"truncation level k must be positive, got {k}")
    base_cost = coeffs.cost

    def cost_k(x, s):
        x = np.asarray(x, dtype=float)
        return base_cost(x, s) * smoothstep_ramp(np.linalg.norm(x, axis=-1), k)

    return replace(coeffs, cost=cost_k, name=f"{coeffs.name}|rk@{k:g}")


@dataclass
class PhiG:
    """phi = ln(u)/theta and g = alpha*phi + alpha*theta*dphi/dtheta on the
    stored theta grid, with the slack of the uniform bound
    ||alpha phi|| + ||alpha theta dphi/dtheta|| <= 3 sup(r_k)."""

    theta_grid: np.ndarray
    phi: np.ndarray
    g: np.ndarray
    bound_lhs: float
    bound_rhs: float

    @property
    def bound_ok(self) -> bool:
        return self.bound_lhs <= self.bound_rhs * (1 + 1e-6)


def compute_phi_g(f: ValueField) -> PhiG:
    """Differentiate phi in theta (centered inside, one-sided 2nd order at
    the grid ends, nonuniform spacing)."""
    tg = f.theta_grid
    if tg.size < 3:
        raise ValidationError("need at least 3 theta slices to form g")
    th = tg.reshape((-1,) + (1,) * (f.values.ndim - 1))
    phi = f.log_u() / th
    dphi = np.empty_like(phi)
    t = tg
    for j in range(tg.size):
        if 0 < j < tg.size - 1:
            h1, h2 = t[j] - t[j - 1], t[j + 1] - t[j]
            dphi[j] = (phi[j + 1] * h1 / (h2 * (h1 + h2))
                       - phi[j - 1] * h2 / (h1 * (h1 + h2))
                       + phi[j] * (h2 - h1) / (h1 * h2))
        elif j == 0:
            h1, h2 = t[1] - t[0], t[2] - t[1]
            dphi[0] = (-(2 * h1 + h2) / (h1 * (h1 + h2)) * phi[0]
                       + (h1 + h2) / (h1 * h2) * phi[1]
                       - h1 / (h2 * (h1 + h2)) * phi[2])
        else:
            h1, h2 = t[-2] - t[-3], t[-1] - t[-2]
            dphi[-1] = ((2 * h2 + h1) / (h2 * (h1 + h2)) * phi[-1]
                        - (h1 + h2) / (h1 * h2) * phi[-2]
                        + h2 / (h1 * (h1 + h2)) * phi[-3])
    g = f.alpha * phi + f.alpha * th * dphi
    lhs = float(np.abs(f.alpha * phi).max()
                + np.abs(f.alpha * th * dphi).max())
    return PhiG(tg, phi, g, lhs, 3.0 * f.r_sup)


def normalize_at(f: ValueField, x0_index=None) -> ValueField:
    """Per-theta-slice division by u(theta, x0): the slice value at x0 is
    exactly 1 and the log scale is absorbed.  Idempotent."""
    idx = f.x0_index if x0_index is None else tuple(x0_index)
    piv = f.values[(slice(None),) + idx]
    if np.any(piv <= 0.0):
        raise ValidationError("normalization point has non-positive value")
    vals = f.values / piv.reshape((-1,) + (1,) * (f.values.ndim - 1))
    return replace(f, values=vals, log_scale=np.zeros_like(f.log_scale),
                   x0_index=idx, _log_u=None)


def probe_box_mask(domain: OrthantDomain) -> np.ndarray:
    """Central 50% per axis, away from both boundary and truncation faces."""
    ax = domain.axis()
    lo, hi = domain.L * 0.25, domain.L * 0.75
    m1 = (ax >= lo - 1e-12) & (ax <= hi + 1e-12)
    mask = m1
    for _ in range(domain.d - 1):
        mask = mask[..., None] & m1
    return mask


@dataclass
class LadderEntry:
    k: float
    alpha: float
    rho_candidate: float      # probe-box mean of the equation read-off of g
    g_spatial_variation: float  # of the theta-difference g (diagnostic)
    bound_lhs: float
    bound_rhs: float
    interior_box_ratio: float  # max/min of normalized u over the probe box


def equation_g(op: GridOperator, u: np.ndarray, theta: float) -> np.ndarray:
    """g read off through the discrete equation: alpha u_theta / u equals
    (min_v[b.grad u + theta r u] + 1/2 tr(a D2 u)) / (theta u) slice-wise,
    which is exact for theta-stationary profiles (no march bias)."""
    ham, _ = op.hamiltonian_min(u, theta)
    return (ham + op.diffusion(u)) / (theta * u)


@dataclass
class RhoEstimate:
    rho: float
    rho_k: dict                     # k -> candidate at the smallest alpha
    table: list                     # LadderEntry per (k, alpha)
    u_hat: np.ndarray               # normalized final slice, u_hat(x0) = 1
    policy: Policy
    alpha_trend_increment: float    # |rho(a_min) - rho(2 a_min)| at largest k
    k_trend_increment: float        # |rho_k(last) - rho_k(prev)|
    variation_shrinks: bool
    warnings: list = field(default_factory=list)


def vanishing_discount_run(model: ModelSpec, alpha_schedule=None,
                           k_schedule=None, *, dtheta_max=None,
                           max_stored=1200) -> RhoEstimate:
    """Run the (k, alpha) ladder and read off (rho, u_hat, policy)."""
    if alpha_schedule is None:
        alpha_schedule = [1.0 * 0.5 ** i for i in range(5)]
    alpha_schedule = sorted(float(a) for a in alpha_schedule)[::-1]
    if k_schedule is None:
        k_schedule = [model.domain.L * 0.5, model.domain.L * 0.75]
    k_schedule = sorted(float(k) for k in k_schedule)
    if not alpha_schedule or not k_schedule:
        raise ValidationError("alpha and k schedules must be nonempty")
    if k_schedule[-1] > model.domain.L * np.sqrt(model.domain.d) + 1e-9:
        raise ValidationError(
            f"k={k_schedule[-1]:g} exceeds the truncation box diameter")

    probe = probe_box_mask(model.domain)
    table = []
    rho_k = {}
    warnings = []
    final_field = None
    final_model = None
    variations_last_k = []
    rho_by_alpha_last_k = []

    for k in k_schedule:
        coeffs_k = truncate_cost(model.coeffs, k)
        model_k = replace_model(model, coeffs_k)
        op = GridOperator(model_k)
        for a in alpha_schedule:
            model_ka = replace_model(model_k, coeffs_k, alpha=a)
            try:
                fld = solve_discounted(model_ka, dtheta_max=dtheta_max,
                                       max_stored=max_stored, k_trunc=k, _op=op)
            except Exception as e:
                raise type(e)(f"(k={k:g}, alpha={a:g}): {e}") from e
            pg = compute_phi_g(fld)
            gv = pg.g[-1][probe]
            geq = equation_g(op, fld.values[-1], model.theta)[probe]
            nrm = normalize_at(fld)
            ub = nrm.values[-1][probe]
            entry = LadderEntry(
                k=k, alpha=a, rho_candidate=float(geq.mean()),
                g_spatial_variation=float(gv.max() - gv.min()),
                bound_lhs=pg.bound_lhs, bound_rhs=pg.bound_rhs,
                interior_box_ratio=float(ub.max() / ub.min()))
            table.append(entry)
            if not pg.bound_ok:
                warnings.append(
                    f"(k={k:g}, alpha={a:g}): transform bound exceeded "
                    f"({pg.bound_lhs:.4g} > 3*{fld.r_sup:.4g})")
            if k == k_schedule[-1]:
                variations_last_k.append(entry.g_spatial_variation)
                rho_by_alpha_last_k.append(entry.rho_candidate)
                final_field, final_model = fld, model_ka
        rho_k[k] = table[-1].rho_candidate

    variation_shrinks = all(b < a or b <= 1e-12
                            for a, b in zip(variations_last_k,
                                            variations_last_k[1:]))
    if not variation_shrinks:
        warnings.append("spatial variation of g did not shrink along the "
                        "alpha ladder")
    rho = rho_k[k_schedule[-1]]
    alpha_trend = (abs(rho_by_alpha_last_k[-1] - rho_by_alpha_last_k[-2])
                   if len(rho_by_alpha_last_k) > 1 else np.inf)
    ks = list(rho_k.values())
    k_trend = abs(ks[-1] - ks[-2]) if len(ks) > 1 else np.inf

    nrm = normalize_at(final_field)
    u_hat = nrm.values[-1]
    # the selector of the stationary equation uses the untruncated cost
    policy = extract_policy_full_cost(model, u_hat)
    return RhoEstimate(rho=rho, rho_k=rho_k, table=table, u_hat=u_hat,
                       policy=policy, alpha_trend_increment=float(alpha_trend),
                       k_trend_increment=float(k_trend),
                       variation_shrinks=variation_shrinks, warnings=warnings)


def replace_model(model: ModelSpec, coeffs, alpha=None) -> ModelSpec:
    return ModelSpec(domain=model.domain, actions=model.actions, coeffs=coeffs,
                     theta=model.theta,
                     alpha=model.alpha if alpha is None else alpha,
                     kappa=model.kappa, seed=model.seed, x0=model.x0)


def extract_policy_full_cost(model: ModelSpec, u_hat: np.ndarray) -> Policy:
    op = GridOperator(model)
    _, arg = op.hamiltonian_min(u_hat, model.theta)
    return Policy(action_index=arg, theta=model.theta,
                  n_actions=model.actions.n)


@dataclass
class ErgodicResidualReport:
    interior_max: float       # max |theta rho u - min_v[...] - diff| on probe box
    boundary_max: float       # max |gamma . grad u| over reflecting nodes
    scale: float              # theta * rho * max |u| on the probe box
    policy_mismatch_fraction: float


def ergodic_residual(model: ModelSpec, rho: float, u_hat: np.ndarray,
                     policy: Policy = None) -> ErgodicResidualReport:
    """Node-wise residual of the stationary equation with the solver's own
    stencils (untruncated cost), plus the oblique boundary residual."""
    op = GridOperator(model)
    theta = model.theta
    ham, arg = op.hamiltonian_min(u_hat, theta)
    res = theta * rho * u_hat - ham - op.diffusion(u_hat)
    probe = probe_box_mask(model.domain)
    interior = float(np.abs(res[probe]).max())
    boundary = op.oblique_residual(u_hat)
    mismatch = 0.0
    if policy is not None:
        mismatch = float((arg != policy.action_index)[probe].mean())
    scale = float(theta * abs(rho) * np.abs(u_hat[probe]).max())
    return ErgodicResidualReport(interior, boundary, scale, mismatch)


@dataclass
class NearMonotoneReport:
    shell_min_cost: float
    rho: float
    passed: bool
    label: str    # 'unbounded-growth-like', 'state-only-cost', or 'generic'


def check_near_monotone(model: ModelSpec, rho: float) -> NearMonotoneReport:
    """Check min_v rbar > rho on the outer shell |x| >= 0.8 L, and label the
    two structural cases under which the condition holds automatically."""
    if not np.isfinite(rho):
        raise ValidationError("rho must be finite")
    dom = model.domain
    pts = dom.grid_points()
    norms = np.linalg.norm(pts, axis=1)
    shell = norms >= 0.8 * dom.L
    mins = None
    spread = 0.0
    for s in range(model.actions.n):
        r = np.asarray(model.coeffs.cost(pts, s))
        mins = r if mins is None else np.minimum(mins, r)
        if s > 0:
            spread = max(spread, float(np.abs(
                r - model.coeffs.cost(pts, 0)).max()))
    shell_min = float(mins[shell].min())
    inner = norms <= 0.5 * dom.L
    label = "generic"
    if spread <= 1e-12 and float(mins[inner].max()) < shell_min:
        label = "state-only-cost"
    elif float(mins[shell].min()) > float(mins[inner].max()):
        label = "unbounded-growth-like"
    return NearMonotoneReport(shell_min, rho, shell_min > rho, label)
