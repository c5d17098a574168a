"""Recurrence probe: exterior hitting-probability PDE and Monte Carlo audit.

Under a frozen stationary Markov policy the probability of ever hitting a
ball B solves the policy-frozen elliptic problem with phi = 1 on B, the
oblique condition on the orthant faces, and phi = 0 on the artificial outer
sphere |x| = R.  Growing R monotonically raises the solved field toward the
true hitting probability, which is the constructive replacement for the
unique-bounded-solution characterization (undecidable on a grid).  The
linear systems are M-matrices solved by forward point sweeps (lexicographic
Gauss-Seidel, damping 1.0, diagonal-scaled residual below 1e-10), warm
started from the previous radius.
"""

from dataclasses import dataclass, field
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .domain import ModelSpec, OrthantDomain
from .errors import ConfigurationError, SolverError, ValidationError
from .sde import ControlPolicy, StepObserver, run_paths

GS_TOL = 1e-10
GS_MAX_SWEEPS = 100_000


@dataclass
class Ball:
    center: tuple
    radius: float

    def contains(self, X: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.linalg.norm(np.asarray(X) - c, axis=-1) <= self.radius + 1e-12


def default_ball(domain: OrthantDomain) -> Ball:
    return Ball(center=(domain.L / 4.0,) * domain.d, radius=domain.L / 10.0)


@dataclass
class HittingField:
    """Solved hitting-probability field on its own [0, R]^d grid."""

    domain: OrthantDomain
    phi: np.ndarray
    R: float
    ball: Ball
    sweeps: int

    def value_at(self, x) -> float:
        x = np.asarray(x, dtype=float)
        h = self.domain.h
        n = self.domain.n_per_axis
        ix = np.clip(np.floor(x / h).astype(np.int64), 0, n - 2)
        fx = np.clip(x / h - ix, 0.0, 1.0)
        out = 0.0
        d = self.domain.d
        for corner in range(1 << d):
            w = 1.0
            idx = []
            for i in range(d):
                hi = (corner >> i) & 1
                w *= fx[i] if hi else (1.0 - fx[i])
                idx.append(ix[i] + hi)
            out += w * self.phi[tuple(idx)]
        return float(out)


def _frozen_drift(model: ModelSpec, policy: ControlPolicy,
                  pts: np.ndarray) -> np.ndarray:
    w = policy.weights_at(0.0, pts, np.zeros(pts.shape[0]))
    b = np.zeros_like(pts)
    for s in range(model.actions.n):
        ws = w[:, s]
        if np.any(ws != 0.0):
            b += ws[:, None] * model.coeffs.drift(pts, s)
    return b


def hitting_probability_pde(model: ModelSpec, policy: ControlPolicy, ball: Ball,
                            R: float, *, h: float = None, tol: float = GS_TOL,
                            max_sweeps: int = GS_MAX_SWEEPS,
                            warm_start: HittingField = None) -> HittingField:
    """Solve the exterior problem on [0, R]^d: L^policy phi = 0 outside B,
    phi = 1 on B, grad(phi).gamma = 0 on the orthant faces, phi = 0 on
    |x| >= R."""
    h = model.domain.h if h is None else h
    steps = int(round(R / h))
    if abs(steps * h - R) > 1e-9 or steps < 4:
        raise ValidationError(f"R={R:g} must be an integer multiple of h >= 4h")
    c = np.asarray(ball.center, dtype=float)
    if np.any(c - ball.radius <= 0) or np.linalg.norm(c) + ball.radius >= R:
        raise ValidationError("ball must sit strictly between the orthant "
                              "faces and the outer radius")
    dom = OrthantDomain(model.domain.d, R, h)
    d = dom.d
    pts = dom.grid_points()
    n_flat = pts.shape[0]
    in_ball = ball.contains(pts)
    outer = np.linalg.norm(pts, axis=1) >= R - 1e-12
    on_face = (pts == 0.0).any(axis=1)
    dirich = in_ball | outer
    vals_dir = np.where(in_ball, 1.0, 0.0)
    oblique = on_face & ~dirich
    unknown = ~dirich
    a = model.coeffs.a_matrix(pts)
    for i in range(d):
        for j in range(i + 1, d):
            if np.any(a[:, i, j] != 0.0):
                raise ConfigurationError(
                    "recurrence probe supports diagonal diffusion only")
    b = _frozen_drift(model, policy, pts)

    strides = np.array([dom.n_per_axis ** (d - 1 - i) for i in range(d)],
                       dtype=np.int64)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n_flat)
    pde_nodes = np.nonzero(unknown & ~oblique)[0]
    diag = np.zeros(n_flat)
    for i in range(d):
        aii = a[pde_nodes, i, i]
        bi = b[pde_nodes, i]
        up = pde_nodes + strides[i]
        dn = pde_nodes - strides[i]
        cup = aii / (2 * h * h) + np.maximum(bi, 0.0) / h
        cdn = aii / (2 * h * h) - np.minimum(bi, 0.0) / h
        rows += [pde_nodes, pde_nodes]
        cols += [up, dn]
        vals += [-cup, -cdn]
        diag[pde_nodes] += cup + cdn
    rows.append(pde_nodes)
    cols.append(pde_nodes)
    vals.append(diag[pde_nodes])

    ob_nodes = np.nonzero(oblique)[0]
    if ob_nodes.size:
        xb = pts[ob_nodes]
        g = np.asarray(model.coeffs.gamma(xb), dtype=float)
        face = xb == 0.0
        i_s = np.argmax(np.where(face, g, -np.inf), axis=1)
        gi = g[np.arange(ob_nodes.size), i_s]
        if np.any(gi <= 0.0):
            raise SolverError("gamma must push inward on every incident face")
        target = np.clip(xb + h * (g / gi[:, None]), 0.0, R)
        ix = np.clip(np.floor(target / h).astype(np.int64), 0, dom.n_per_axis - 2)
        fx = np.clip(target / h - ix, 0.0, 1.0)
        rows.append(ob_nodes)
        cols.append(ob_nodes)
        vals.append(np.ones(ob_nodes.size))
        for corner in range(1 << d):
            w = np.ones(ob_nodes.size)
            idx = np.zeros(ob_nodes.size, dtype=np.int64)
            for i in range(d):
                hi = (corner >> i) & 1
                w = w * (fx[:, i] if hi else (1.0 - fx[:, i]))
                idx += (ix[:, i] + hi) * strides[i]
            keep = w > 0
            rows.append(ob_nodes[keep])
            cols.append(idx[keep])
            vals.append(-w[keep])

    A = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_flat, n_flat))
    # fold Dirichlet values into the right-hand side, keep unknown columns
    unk = np.nonzero(unknown)[0]
    pos = -np.ones(n_flat, dtype=np.int64)
    pos[unk] = np.arange(unk.size)
    Acoo = A.tocoo()
    keep_rows = pos[Acoo.row] >= 0
    r2, c2, v2 = Acoo.row[keep_rows], Acoo.col[keep_rows], Acoo.data[keep_rows]
    to_rhs = ~unknown[c2]
    np.add.at(rhs, r2[to_rhs], -v2[to_rhs] * vals_dir[c2[to_rhs]])
    inner = unknown[c2]
    Ared = sp.csr_matrix((v2[inner], (pos[r2[inner]], pos[c2[inner]])),
                         shape=(unk.size, unk.size))
    rhs_red = rhs[unk]

    lower = sp.tril(Ared, 0).tocsr()
    upper = sp.triu(Ared, 1).tocsr()
    dinv = 1.0 / Ared.diagonal()
    phi = np.zeros(unk.size)
    if warm_start is not None:
        phi = np.clip(np.array([warm_start.value_at(p) for p in pts[unk]]), 0, 1)
    sweeps = 0
    while sweeps < max_sweeps:
        batch = min(16, max_sweeps - sweeps)
        for _ in range(batch):
            phi = spsolve_triangular(lower, rhs_red - upper @ phi, lower=True)
        sweeps += batch
        res = np.abs(rhs_red - Ared @ phi) * np.abs(dinv)
        if res.max() <= tol:
            break
    else:
        raise SolverError(
            f"point sweeps did not reach residual {tol:g} within "
            f"{max_sweeps} sweeps (R={R:g})")

    full = vals_dir.copy()
    full[unk] = phi
    return HittingField(domain=dom, phi=full.reshape(dom.shape), R=R,
                        ball=ball, sweeps=sweeps)


@dataclass
class RecurrenceReport:
    phi_R: list                 # [(R, phi_R(x_query))]
    limit_estimate: float
    verdict: str                # 'recurrent' | 'transient' | 'inconclusive'
    ball: Ball
    x_query: tuple
    eps_rec: float
    mc_hit_fraction: float = None
    mc_ci: tuple = None
    mc_mean_hit_time: float = None


def classify_recurrence(model: ModelSpec, policy: ControlPolicy, ball: Ball,
                        R_schedule, x_query, *, h: float = None,
                        eps_rec: float = 0.01) -> RecurrenceReport:
    """Verdict from the growth of phi_R(x) along increasing radii.

    recurrent: phi at the largest R is within eps_rec of 1 and the last
    R-increment is below eps_rec/4; transient: the value has stabilized at
    or below 1 - 10*eps_rec; otherwise inconclusive.
    """
    R_schedule = sorted(float(r) for r in R_schedule)
    if len(R_schedule) < 3:
        raise ValidationError("need at least 3 radii in R_schedule")
    x_query = tuple(float(v) for v in x_query)
    vals = []
    fields = []
    prev = None
    for R in R_schedule:
        fld = hitting_probability_pde(model, policy, ball, R, h=h,
                                      warm_start=prev)
        fields.append(fld)
        vals.append(fld.value_at(np.asarray(x_query)))
        prev = fld
    increments = [b - a for a, b in zip(vals, vals[1:])]
    last = vals[-1]
    stabilized = abs(increments[-1]) < eps_rec / 4.0
    if last >= 1.0 - eps_rec and stabilized:
        verdict = "recurrent"
    elif stabilized and last <= 1.0 - 10.0 * eps_rec:
        verdict = "transient"
    else:
        verdict = "inconclusive"
    return RecurrenceReport(
        phi_R=list(zip(R_schedule, vals)), limit_estimate=float(last),
        verdict=verdict, ball=ball, x_query=x_query, eps_rec=eps_rec)


class _HitObserver(StepObserver):
    def __init__(self, ball: Ball, dt: float):
        self.ball, self.dt = ball, dt
        self._times = []

    def begin_chunk(self, lo, hi, X0):
        m = X0.shape[0]
        self._t = np.full(m, np.nan)
        hit0 = self.ball.contains(X0)
        self._t[hit0] = 0.0

    def step(self, k, t_next, X_prev, X_new, weights, dxi, refl, clip, hit):
        fresh = np.isnan(self._t) & self.ball.contains(X_new)
        self._t[fresh] = t_next
        return not np.isnan(self._t).any()

    def end_chunk(self):
        self._times.append(self._t)


def hitting_time_mc(model: ModelSpec, policy: ControlPolicy, ball: Ball,
                    t_cap: float, n_paths: int, base_seed: int,
                    dt: float = 1e-3, x_init=None):
    """(hit fraction before t_cap, 95% binomial CI, mean hit time among hits)."""
    if t_cap <= 0:
        raise ValidationError("t_cap must be positive")
    obs = _HitObserver(ball, dt)
    run_paths(model, policy, t_cap, dt, n_paths, base_seed, [obs],
              x_init=x_init)
    times = np.concatenate(obs._times)
    hits = ~np.isnan(times)
    p = float(hits.mean())
    se = np.sqrt(max(p * (1 - p), 1.0 / n_paths) / n_paths)
    ci = (max(0.0, p - 1.96 * se), min(1.0, p + 1.96 * se))
    mean_t = float(times[hits].mean()) if hits.any() else float("nan")
    return p, ci, mean_t
