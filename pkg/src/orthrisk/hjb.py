"""Discounted risk-sensitive HJB solver on the truncated orthant grid.

The equation  alpha*theta*du/dtheta = min_v [b(x,v).grad u + theta r(x,v) u]
+ 1/2 tr(a(x) D2 u)  is marched explicitly in tau = ln(theta) from the
initial slice u(kappa, .) = exp(kappa*sup r/alpha) up to theta.  The log
substitution removes the 1/theta stiffness near the kappa end; the step is
capped by the monotonicity (CFL) bound alpha*theta/dtheta >= sum_i a_ii/h^2
+ d*sup|b|/h + theta*sup r, which gives the scheme a discrete comparison
principle.  Upwind first-order differences carry the drift, centered second
differences the diagonal of a, and the positive 7-point stencil the cross
terms (rejected unless a is diagonally dominant).  On faces {x_i = 0} the
oblique condition grad(u).gamma = 0 is imposed through the first-order
relation u(x) = u(x + h*gtilde), gtilde = gamma/gamma_i, the off-grid value
taken by multilinear interpolation; artificial outer faces {x_i = L} carry
homogeneous Neumann.  Slices are stored with a per-slice log normalizer so
large sup(r)/alpha never overflows.
"""

from dataclasses import dataclass, field as dfield
import numpy as np
import scipy.sparse as sp

from .domain import ModelSpec
from .errors import (ConfigurationError, InterpolationError, SolverError,
                     ValidationError)
from .sde import ControlPolicy


@dataclass
class ValueField:
    """Tabulated solution u on theta_grid x spatial grid.

    u(theta_j, x) = values[j, x] * exp(log_scale[j]); values stay O(1).
    k_trunc records the cost-truncation level (None = untruncated), r_sup the
    sup of the cost actually used in the solve.
    """

    theta_grid: np.ndarray
    values: np.ndarray
    log_scale: np.ndarray
    model: ModelSpec
    alpha: float
    kappa: float
    r_sup: float
    k_trunc: float = None
    x0_index: tuple = None
    _log_u: np.ndarray = dfield(default=None, repr=False)

    @property
    def shape(self):
        return self.values.shape[1:]

    def log_u(self) -> np.ndarray:
        if self._log_u is None:
            extra = self.log_scale.reshape((-1,) + (1,) * (self.values.ndim - 1))
            self._log_u = np.log(self.values) + extra
        return self._log_u

    def final_slice_log(self) -> np.ndarray:
        return np.log(self.values[-1]) + self.log_scale[-1]

    def log_u_at_x0(self, j=-1) -> float:
        idx = self.x0_index
        return float(np.log(self.values[j][idx]) + self.log_scale[j])

    def interp_log_u(self, theta, X) -> np.ndarray:
        """Bilinear interpolation of ln u in (theta, x); X of shape (m, d)."""
        tg = self.theta_grid
        theta = np.asarray(theta, dtype=float)
        if np.any(theta < tg[0] * (1 - 1e-9)):
            raise InterpolationError(
                f"theta {theta.min():.6g} below the field floor {tg[0]:.6g}; "
                "enlarge the theta grid (smaller kappa)")
        lu = self.log_u()
        jt = np.clip(np.searchsorted(tg, theta) - 1, 0, tg.size - 2)
        ft = np.clip((theta - tg[jt]) / (tg[jt + 1] - tg[jt]), 0.0, 1.0)
        h = self.model.domain.h
        n = self.model.domain.n_per_axis
        d = self.model.domain.d
        X = np.asarray(X, dtype=float)
        ix = np.clip(np.floor(X / h).astype(np.int64), 0, n - 2)
        fx = np.clip(X / h - ix, 0.0, 1.0)
        out = np.zeros(theta.shape)
        for corner in range(1 << d):
            wgt = np.ones(theta.shape)
            idx = []
            for i in range(d):
                hi = (corner >> i) & 1
                wgt = wgt * (fx[:, i] if hi else (1.0 - fx[:, i]))
                idx.append(ix[:, i] + hi)
            vals_lo = lu[(jt,) + tuple(idx)]
            vals_hi = lu[(jt + 1,) + tuple(idx)]
            out += wgt * ((1.0 - ft) * vals_lo + ft * vals_hi)
        return out


@dataclass
class Policy:
    """Per-node minimizing action (one-hot relaxed weights)."""

    action_index: np.ndarray
    theta: float
    n_actions: int

    def weight_table(self) -> np.ndarray:
        flat = self.action_index.ravel()
        table = np.zeros((flat.size, self.n_actions))
        table[np.arange(flat.size), flat] = 1.0
        return table

    def as_control(self, domain, name="extracted") -> ControlPolicy:
        return ControlPolicy.stationary_markov(self.weight_table(), domain,
                                               name=name)


class GridOperator:
    """Shared finite-difference machinery on the model grid."""

    def __init__(self, model: ModelSpec):
        self.model = model
        dom = model.domain
        self.d = dom.d
        self.h = dom.h
        self.n = dom.n_per_axis
        self.shape = dom.shape
        pts = dom.grid_points()
        self.points = pts
        n_act = model.actions.n
        self.B = [model.coeffs.drift(pts, s).reshape(self.shape + (self.d,))
                  for s in range(n_act)]
        self.R = [np.asarray(model.coeffs.cost(pts, s)).reshape(self.shape)
                  for s in range(n_act)]
        if np.any([np.any(r < -1e-12) for r in self.R]):
            raise ValidationError("running cost must be nonnegative")
        a = model.coeffs.a_matrix(pts)
        self.a_diag = np.stack([a[:, i, i].reshape(self.shape)
                                for i in range(self.d)])
        self.cross = {}
        for i in range(self.d):
            for j in range(i + 1, self.d):
                aij = a[:, i, j].reshape(self.shape)
                if np.any(aij != 0.0):
                    self.cross[(i, j)] = aij
        if self.cross:
            offsum = np.zeros(self.shape)
            for (i, j), aij in self.cross.items():
                offsum = offsum + np.abs(aij)
            dom_ok = self.a_diag.min(axis=0) - offsum
            if dom_ok.min() < -1e-12:
                raise ConfigurationError(
                    "cross-diffusion terms need a diagonally dominant a; "
                    f"worst margin {dom_ok.min():.3g}")
        coords = pts.reshape(self.shape + (self.d,))
        self.reflecting = (coords == 0.0).any(axis=-1)
        on_outer = (coords == dom.L).any(axis=-1)
        self.outer_only = on_outer & ~self.reflecting
        self.interior = ~self.reflecting & ~on_outer
        self.r_sup = max(float(r.max()) for r in self.R)
        self.b_sup = max(float(np.abs(b).max()) for b in self.B)
        self._build_outer_map()
        self._build_oblique()

    def _build_outer_map(self):
        idx = np.argwhere(self.outer_only)
        src = np.minimum(idx, self.n - 2)
        self._outer_dst = tuple(idx.T)
        self._outer_src = tuple(src.T)

    def _build_oblique(self):
        """Sparse interpolation u_boundary = P_refl @ u_flat for the
        first-order oblique stencil, target points clamped into the box."""
        dom = self.model.domain
        idx = np.argwhere(self.reflecting)
        if idx.size == 0:
            self._refl_flat = np.array([], dtype=np.int64)
            self._P = None
            return
        xb = idx * self.h
        g = np.asarray(self.model.coeffs.gamma(xb), dtype=float)
        on_face = xb == 0.0
        gi_faces = np.where(on_face, g, -np.inf)
        i_scale = np.argmax(gi_faces, axis=1)
        gi = g[np.arange(idx.shape[0]), i_scale]
        if np.any(gi <= 0.0):
            raise SolverError(
                "oblique stencil needs gamma_i > 0 on every incident face")
        gt = g / gi[:, None]
        target = np.clip(xb + self.h * gt, 0.0, dom.L)
        rows, cols, vals = [], [], []
        ix = np.clip(np.floor(target / self.h).astype(np.int64), 0, self.n - 2)
        fx = np.clip(target / self.h - ix, 0.0, 1.0)
        flat_row = np.ravel_multi_index(tuple(idx.T), self.shape)
        for corner in range(1 << self.d):
            wgt = np.ones(idx.shape[0])
            cidx = []
            for i in range(self.d):
                hi = (corner >> i) & 1
                wgt = wgt * (fx[:, i] if hi else (1.0 - fx[:, i]))
                cidx.append(ix[:, i] + hi)
            keep = wgt > 0.0
            rows.append(np.arange(idx.shape[0])[keep])
            cols.append(np.ravel_multi_index(tuple(np.stack(cidx)[:, keep]),
                                             self.shape))
            vals.append(wgt[keep])
        self._refl_flat = flat_row
        self._P = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(idx.shape[0], int(np.prod(self.shape))))
        # rows of P that touch reflecting nodes force the fixed-point loop
        refl_set = np.zeros(int(np.prod(self.shape)), dtype=bool)
        refl_set[flat_row] = True
        touch = np.zeros(idx.shape[0], dtype=bool)
        pc = self._P.tocoo()
        touch_rows = pc.row[refl_set[pc.col]]
        touch[touch_rows] = True
        self._needs_iteration = bool(touch.any())

    def enforce_bc(self, u: np.ndarray):
        """Outer Neumann copy, then the oblique fixed point (in place)."""
        if self._outer_dst[0].size:
            u[self._outer_dst] = u[self._outer_src]
        if self._P is None:
            return
        flat = u.reshape(-1)
        new = self._P @ flat
        flat[self._refl_flat] = new
        if self._needs_iteration:
            scale = max(float(np.abs(new).max()), 1.0)
            for _ in range(100):
                upd = self._P @ flat
                change = float(np.abs(upd - flat[self._refl_flat]).max())
                flat[self._refl_flat] = upd
                if change <= 1e-14 * scale:
                    break
            else:
                raise SolverError("oblique boundary fixed point did not settle")

    def upwind_gradient_terms(self, u: np.ndarray, s: int) -> np.ndarray:
        """sum_i b_i^+ D+_i u + b_i^- D-_i u for action s (one-sided at the
        array edges, where the missing difference is taken as zero)."""
        out = np.zeros_like(u)
        B = self.B[s]
        for i in range(self.d):
            up = np.roll(u, -1, axis=i)
            dn = np.roll(u, 1, axis=i)
            dp = (up - u) / self.h
            dm = (u - dn) / self.h
            sl_last = [slice(None)] * self.d
            sl_last[i] = -1
            dp[tuple(sl_last)] = 0.0
            sl_first = [slice(None)] * self.d
            sl_first[i] = 0
            dm[tuple(sl_first)] = 0.0
            bi = B[..., i]
            out += np.maximum(bi, 0.0) * dp + np.minimum(bi, 0.0) * dm
        return out

    def hamiltonian_min(self, u: np.ndarray, theta: float):
        """(min_s [b_s.grad u + theta r_s u], argmin actions)."""
        best = None
        arg = None
        for s in range(self.model.actions.n):
            hs = self.upwind_gradient_terms(u, s) + theta * self.R[s] * u
            if best is None:
                best, arg = hs, np.zeros(self.shape, dtype=np.int8)
            else:
                take = hs < best
                best = np.where(take, hs, best)
                arg = np.where(take, np.int8(s), arg)
        return best, arg

    def diffusion(self, u: np.ndarray) -> np.ndarray:
        """0.5 tr(a D2 u) with centered diagonal and positive cross stencils."""
        out = np.zeros_like(u)
        h2 = self.h * self.h
        for i in range(self.d):
            up = np.roll(u, -1, axis=i)
            dn = np.roll(u, 1, axis=i)
            out += 0.5 * self.a_diag[i] * (up + dn - 2.0 * u) / h2
        for (i, j), aij in self.cross.items():
            upi = np.roll(u, -1, axis=i)
            dni = np.roll(u, 1, axis=i)
            upj = np.roll(u, -1, axis=j)
            dnj = np.roll(u, 1, axis=j)
            upp = np.roll(upi, -1, axis=j)
            dnn = np.roll(dni, 1, axis=j)
            upm = np.roll(upi, 1, axis=j)
            dnp = np.roll(dni, -1, axis=j)
            pos = (2.0 * u + upp + dnn - upi - dni - upj - dnj) / (2.0 * h2)
            neg = -(2.0 * u + upm + dnp - upi - dni - upj - dnj) / (2.0 * h2)
            out += np.where(aij >= 0.0, aij * pos, aij * neg)
        return out

    def oblique_residual(self, u: np.ndarray) -> float:
        """Max |gamma . grad u| over reflecting nodes via the first-order
        directional difference along gamma."""
        if self._P is None:
            return 0.0
        flat = u.reshape(-1)
        idx = np.argwhere(self.reflecting)
        xb = idx * self.h
        g = np.asarray(self.model.coeffs.gamma(xb), dtype=float)
        on_face = xb == 0.0
        gi = g[np.arange(idx.shape[0]),
               np.argmax(np.where(on_face, g, -np.inf), axis=1)]
        interp = self._P @ flat
        return float(np.abs((interp - flat[self._refl_flat]) * gi / self.h).max())

    def cfl_denominator(self, theta_max: float, r_sup=None) -> float:
        rs = self.r_sup if r_sup is None else r_sup
        return float(self.a_diag.sum(axis=0).max() / self.h ** 2
                     + self.b_sup * self.d / self.h + theta_max * rs)


def required_dtheta(model: ModelSpec) -> float:
    """Largest monotone theta step at theta = theta_max (the binding point)."""
    op = GridOperator(model)
    return model.alpha / op.cfl_denominator(model.theta)


def solve_discounted(model: ModelSpec, *, dtheta_max=None, max_stored=1200,
                     k_trunc=None, _op=None) -> ValueField:
    """March the theta-parabolic approximation from kappa to theta.

    dtheta_max additionally caps the step at the theta = theta_max end (the
    log grid makes steps near kappa proportionally smaller).  Raises
    ConfigurationError when dtheta_max alone would violate monotonicity.
    """
    op = _op if _op is not None else GridOperator(model)
    alpha, kappa, theta_max = model.alpha, model.kappa, model.theta
    dtau_cfl = alpha / op.cfl_denominator(theta_max)
    if dtheta_max is not None and dtheta_max > dtau_cfl * (1 + 1e-12):
        raise ConfigurationError(
            f"monotonicity requires dtheta <= {dtau_cfl:.6g} at theta="
            f"{theta_max:g} (got dtheta_max={dtheta_max:g})")
    dtau_target = dtau_cfl if dtheta_max is None else min(dtau_cfl, dtheta_max)
    span = np.log(theta_max) - np.log(kappa)
    n_steps = max(2, int(np.ceil(span / dtau_target)))
    taus = np.linspace(np.log(kappa), np.log(theta_max), n_steps + 1)
    thetas = np.exp(taus)
    dtau = span / n_steps

    n_stored = min(n_steps + 1, max_stored)
    stored = np.unique(np.round(np.linspace(0, n_steps, n_stored)).astype(int))
    stored_pos = {int(j): p for p, j in enumerate(stored)}

    u = np.full(op.shape, 1.0)
    log_scale = kappa * op.r_sup / alpha
    values = np.empty((stored.size,) + op.shape)
    scales = np.empty(stored.size)
    if 0 in stored_pos:
        values[0] = u
        scales[0] = log_scale

    c = dtau / alpha
    for j in range(n_steps):
        th = thetas[j]
        ham, _ = op.hamiltonian_min(u, th)
        unew = u + c * (ham + op.diffusion(u))
        unew[~op.interior] = u[~op.interior]
        op.enforce_bc(unew)
        mn = float(unew.min())
        if not np.isfinite(mn) or mn <= 0.0:
            raise SolverError(
                f"non-positive slice at theta={thetas[j+1]:.6g} (min={mn:.3g})")
        mx = float(unew.max())
        if mx > 1e6 or mx < 1e-6:
            unew /= mx
            log_scale += np.log(mx)
        u = unew
        p = stored_pos.get(j + 1)
        if p is not None:
            values[p] = u
            scales[p] = log_scale

    return ValueField(theta_grid=thetas[stored], values=values,
                      log_scale=scales, model=model, alpha=alpha, kappa=kappa,
                      r_sup=op.r_sup, k_trunc=k_trunc,
                      x0_index=tuple(int(round(q / model.domain.h))
                                     for q in model.x0))


def extract_policy(field: ValueField, theta: float, _op=None) -> Policy:
    """One-hot minimizing selector at the stored slice nearest theta."""
    tg = field.theta_grid
    if theta < tg[0] * (1 - 1e-9) or theta > tg[-1] * (1 + 1e-9):
        raise ValidationError(f"theta={theta:g} outside the field range "
                              f"[{tg[0]:g}, {tg[-1]:g}]")
    j = int(np.argmin(np.abs(tg - theta)))
    op = _op if _op is not None else GridOperator(field.model)
    _, arg = op.hamiltonian_min(field.values[j], float(tg[j]))
    return Policy(action_index=arg, theta=float(tg[j]),
                  n_actions=field.model.actions.n)


def make_field_policy(field: ValueField, model: ModelSpec,
                      _op=None) -> ControlPolicy:
    """Time-dependent feedback selector: at time t the policy acts by the
    minimizing action table of the slice theta*exp(-alpha t)."""
    op = _op if _op is not None else GridOperator(model)
    tables = np.empty((field.theta_grid.size,) + op.shape, dtype=np.int8)
    for j, th in enumerate(field.theta_grid):
        _, arg = op.hamiltonian_min(field.values[j], float(th))
        tables[j] = arg
    flat_tables = tables.reshape(field.theta_grid.size, -1)
    tg = field.theta_grid
    n_act = model.actions.n
    alpha, theta0 = model.alpha, model.theta
    dom = model.domain

    def fn(t, X, xi):
        th = max(theta0 * np.exp(-alpha * t), tg[0])
        j = int(np.clip(np.searchsorted(tg, th), 1, tg.size - 1))
        if th - tg[j - 1] < tg[j] - th:
            j -= 1
        idx = dom.nearest_node_index(X)
        act = flat_tables[j][idx]
        w = np.zeros((X.shape[0], n_act))
        w[np.arange(X.shape[0]), act] = 1.0
        return w

    return ControlPolicy.feedback(fn, name="field-selector")


@dataclass
class BoundsReport:
    upper_ok: bool
    lower_ok: bool
    dtheta_ok: bool
    upper_slack: float      # min over nodes of (theta r_sup/alpha - ln u)
    lower_slack: float      # min over nodes of ln u
    dtheta_slack_log: float  # min of ln(bound) - ln|quotient|
    passed: bool


def verify_bounds(field: ValueField) -> BoundsReport:
    """A-priori bounds: 1 <= u <= e^{theta r_sup/alpha} and the theta
    difference quotient below 3 e^{(theta+3) r_sup/alpha} r_sup/alpha."""
    lu = field.log_u()
    alpha, r_sup = field.alpha, field.r_sup
    tg = field.theta_grid
    upper = tg.reshape((-1,) + (1,) * (lu.ndim - 1)) * r_sup / alpha
    upper_slack = float((upper + np.log(1 + 1e-6) - lu).min())
    lower_slack = float(lu.min())
    slack_log = np.inf
    if r_sup > 0:
        for j in range(tg.size - 1):
            dth = tg[j + 1] - tg[j]
            du = np.abs(field.values[j + 1] * np.exp(field.log_scale[j + 1]
                                                     - field.log_scale[j])
                        - field.values[j])
            with np.errstate(divide="ignore"):
                log_q = np.where(du > 0, np.log(np.maximum(du, 1e-300))
                                 + field.log_scale[j] - np.log(dth), -np.inf)
            log_bound = (np.log(3.0) + (tg[j + 1] + 3.0) * r_sup / alpha
                         + np.log(r_sup / alpha))
            slack_log = min(slack_log, float((log_bound - log_q).min()))
    else:
        slack_log = np.inf
        du_max = float(np.abs(np.diff(field.values, axis=0)).max())
        if du_max > 0:
            slack_log = -np.inf
    upper_ok = upper_slack >= 0.0
    lower_ok = lower_slack >= -1e-12
    dtheta_ok = slack_log >= 0.0
    return BoundsReport(upper_ok, lower_ok, dtheta_ok, upper_slack,
                        lower_slack, slack_log,
                        upper_ok and lower_ok and dtheta_ok)


@dataclass
class RepresentationReport:
    log_u_field: float
    log_u_mc: float
    relative_gap: float
    se_log: float
    dt_gap_log: float
    horizon: float
    n_paths: int
    contaminated_fraction: float

    def combined_bars(self) -> float:
        return float(np.hypot(self.se_log, self.dt_gap_log))


def representation_check(model: ModelSpec, field: ValueField, n_paths: int,
                         base_seed: int, dt: float = 1e-3) -> RepresentationReport:
    """Monte Carlo check of the stochastic representation at (theta, x0):
    u = E[e^{kappa r_sup/alpha} e^{int_0^{T_kappa} theta e^{-alpha s} r ds}]
    under the field's minimizing selector, T_kappa = ln(theta/kappa)/alpha."""
    from .costs import _DiscountedAccumulator, _batch_log_mean
    alpha, theta, kappa = model.alpha, model.theta, model.kappa
    T_k = np.log(theta / kappa) / alpha
    policy = make_field_policy(field, model)
    logs = []
    for fac in (1, 2):
        acc = _DiscountedAccumulator(model, theta, alpha, dt * fac)
        from .sde import run_paths
        run_paths(model, policy, T_k, dt * fac, n_paths, base_seed, [acc],
                  x_init=model.x0)
        offset = kappa * field.r_sup / alpha
        lm, se = _batch_log_mean(acc.A)
        logs.append((offset + lm, se, acc.contaminated_fraction()))
    log_mc, se_log, contam = logs[0]
    dt_gap = abs(logs[0][0] - logs[1][0])
    log_field = field.log_u_at_x0()
    gap = abs(np.expm1(log_mc - log_field))
    return RepresentationReport(log_field, log_mc, float(gap), float(se_log),
                                float(dt_gap), T_k, n_paths, contam)
