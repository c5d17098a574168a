"""Statistical verification: the constrained-martingale identity and the
end-to-end consistency suite.

For smooth compactly supported f with grad(f).gamma >= 0 on the faces, the
process M_f(t) = f(X_t) - int_0^t Lf(X_s, v_s) ds - int_0^t grad(f).gamma dxi_s
is a martingale (with the inward-push sign convention the local-time term
enters with a minus).  Discretely the local-time integral is accumulated
exactly along each step's reflection segment, as f(post-reflection) -
f(pre-reflection), which removes the O(sqrt(dt)) boundary bias a first-order
product rule would leave; on the zero-noise model every term vanishes
bitwise.  The test checks E[M_f(t) - M_f(s)] = 0 across checkpoint pairs
and, for the conditional version, that the regression slope of the
increment on X_s is flat; |z| > 4 flags a failure.
"""

from dataclasses import dataclass, field
import numpy as np

from .domain import ModelSpec
from .errors import ValidationError
from .sde import ControlPolicy, StepObserver, run_paths


# ---------------------------------------------------------------------------
# C^2 plateau window and the catalog of test functions


def _quintic(t):
    return 10 * t ** 3 - 15 * t ** 4 + 6 * t ** 5


def _quintic_d1(t):
    return 30 * t ** 2 * (1 - t) ** 2


def _quintic_d2(t):
    return 60 * t - 180 * t ** 2 + 120 * t ** 3


class PlateauWindow:
    """1 on [0, a], C^2 quintic descent to 0 on [a, b], 0 beyond.
    p'(0) = p''(0) = 0, so products of windows have zero normal derivative
    on the orthant faces."""

    def __init__(self, a: float, b: float):
        if not 0 < a < b:
            raise ValidationError("plateau needs 0 < a < b")
        self.a, self.b = a, b

    def eval(self, s: np.ndarray):
        s = np.asarray(s, dtype=float)
        t = np.clip((s - self.a) / (self.b - self.a), 0.0, 1.0)
        inside = (s > self.a) & (s < self.b)
        p = np.where(s <= self.a, 1.0, np.where(s >= self.b, 0.0,
                                                1.0 - _quintic(t)))
        scale = 1.0 / (self.b - self.a)
        dp = np.where(inside, -_quintic_d1(t) * scale, 0.0)
        ddp = np.where(inside, -_quintic_d2(t) * scale ** 2, 0.0)
        return p, dp, ddp


@dataclass
class TestFunction:
    """f(x) = lead(x_1) * prod_i window(x_i), with analytic derivatives."""

    name: str
    window: PlateauWindow
    lead: callable    # g(s) -> (g, g', g'') arrays

    def _parts(self, X):
        X = np.asarray(X, dtype=float)
        d = X.shape[-1]
        p = np.empty_like(X)
        dp = np.empty_like(X)
        ddp = np.empty_like(X)
        for i in range(d):
            p[..., i], dp[..., i], ddp[..., i] = self.window.eval(X[..., i])
        g, dg, ddg = self.lead(X[..., 0])
        return p, dp, ddp, g, dg, ddg

    def value(self, X):
        p, _, _, g, _, _ = self._parts(X)
        return g * p.prod(axis=-1)

    def grad(self, X):
        p, dp, _, g, dg, _ = self._parts(X)
        d = X.shape[-1]
        out = np.empty_like(np.asarray(X, dtype=float))
        for i in range(d):
            loo = np.prod(np.delete(p, i, axis=-1), axis=-1)
            out[..., i] = g * dp[..., i] * loo
            if i == 0:
                out[..., 0] += dg * p[..., 0] * loo
        return out

    def hess(self, X):
        X = np.asarray(X, dtype=float)
        p, dp, ddp, g, dg, ddg = self._parts(X)
        d = X.shape[-1]
        H = np.zeros(X.shape + (d,))
        for i in range(d):
            loo_i = np.prod(np.delete(p, i, axis=-1), axis=-1)
            for j in range(i, d):
                if i == j:
                    term = g * ddp[..., i] * loo_i
                    if i == 0:
                        term = (ddg * p[..., 0] * loo_i
                                + 2 * dg * dp[..., 0] * loo_i
                                + g * ddp[..., 0] * loo_i)
                    H[..., i, i] = term
                else:
                    ltwo = np.prod(np.delete(p, (i, j), axis=-1), axis=-1)
                    term = g * dp[..., i] * dp[..., j] * ltwo
                    if i == 0:
                        term += dg * p[..., 0] * dp[..., j] * ltwo
                    H[..., i, j] = term
                    H[..., j, i] = term
        return H


def _lead_one(s):
    z = np.zeros_like(np.asarray(s, dtype=float))
    return np.ones_like(z), z, z


def _lead_coord(s):
    s = np.asarray(s, dtype=float)
    return s, np.ones_like(s), np.zeros_like(s)


def _lead_coord_sq(s):
    s = np.asarray(s, dtype=float)
    return s * s, 2 * s, np.full_like(s, 2.0)


def _lead_cos(s):
    s = np.asarray(s, dtype=float)
    return np.cos(s), -np.sin(s), -np.cos(s)


def default_catalog(model: ModelSpec) -> list:
    """Standard test functions scaled to the model's box."""
    L = model.domain.L
    win = PlateauWindow(0.55 * L, 0.85 * L)
    return [
        TestFunction("one", win, _lead_one),
        TestFunction("coord", win, _lead_coord),
        TestFunction("coord_sq", win, _lead_coord_sq),
        TestFunction("cos", win, _lead_cos),
    ]


def check_boundary_sign(model: ModelSpec, f: TestFunction) -> float:
    """Min of grad(f).gamma over boundary grid nodes (must be >= 0)."""
    pts = model.domain.grid_points()
    bmask = (pts == 0.0).any(axis=1)
    bpts = pts[bmask]
    if bpts.size == 0:
        return 0.0
    gf = f.grad(bpts)
    gm = np.asarray(model.coeffs.gamma(bpts), dtype=float)
    return float((gf * gm).sum(axis=1).min())


def apply_generator(model: ModelSpec, f: TestFunction, x, w) -> float:
    """Lf(x, v) = b(x, v).grad f + 1/2 tr(a(x) hess f) at one point."""
    x = np.asarray(x, dtype=float)[None, :]
    w = model.actions.validate_weights(w)
    b = np.zeros_like(x)
    for s in range(model.actions.n):
        if w[s] != 0.0:
            b += w[s] * model.coeffs.drift(x, s)
    a = model.coeffs.a_matrix(x)
    val = (b * f.grad(x)).sum() + 0.5 * np.einsum("nij,nji->", a, f.hess(x))
    return float(val)


class _MartingaleObserver(StepObserver):
    """Accumulates M_f at checkpoints for a list of test functions."""

    def __init__(self, model: ModelSpec, fs, checkpoint_steps, dt):
        self.model, self.fs, self.dt = model, fs, dt
        self.checkpoints = list(checkpoint_steps)
        self._M = []     # per chunk: (n_f, n_ck, m)
        self._X = []     # per chunk: (n_ck, m, d)

    def begin_chunk(self, lo, hi, X0):
        m = X0.shape[0]
        self._SL = np.zeros((len(self.fs), m))
        self._SC = np.zeros((len(self.fs), m))
        self._Mc = np.full((len(self.fs), len(self.checkpoints), m), np.nan)
        self._Xc = np.full((len(self.checkpoints), m, X0.shape[1]), np.nan)
        if 0 in self.checkpoints:
            i0 = self.checkpoints.index(0)
            self._Xc[i0] = X0
            for q, f in enumerate(self.fs):
                self._Mc[q, i0] = f.value(X0)

    def step(self, k, t_next, X_prev, X_new, weights, dxi, refl, clip, hit):
        n_act = self.model.actions.n
        b = np.zeros_like(X_prev)
        for s in range(n_act):
            ws = weights[:, s]
            if np.any(ws != 0.0):
                b += ws[:, None] * self.model.coeffs.drift(X_prev, s)
        a = self.model.coeffs.a_matrix(X_prev)
        y_raw = X_new + clip - refl
        reflected = dxi > 0.0
        for q, f in enumerate(self.fs):
            lf = ((b * f.grad(X_prev)).sum(axis=1)
                  + 0.5 * np.einsum("nij,nji->n", a, f.hess(X_prev)))
            self._SL[q] += lf * self.dt
            if reflected.any() or clip.any():
                self._SC[q] += f.value(X_new) - f.value(y_raw)
        for i, ck in enumerate(self.checkpoints):
            if k + 1 == ck:
                self._Xc[i] = X_new
                for q, f in enumerate(self.fs):
                    self._Mc[q, i] = (f.value(X_new) - self._SL[q]
                                      - self._SC[q])
        return False

    def end_chunk(self):
        self._M.append(self._Mc)
        self._X.append(self._Xc)


@dataclass
class MartingalePairStat:
    f_name: str
    t_from: float
    t_to: float
    mean_increment: float
    se: float
    z_mean: float
    z_slope_max: float


@dataclass
class MartingaleReport:
    stats: list
    max_abs_z: float
    passed: bool
    boundary_sign_min: float


def martingale_residual(model: ModelSpec, policy: ControlPolicy, fs=None,
                        checkpoints=(0.0, 0.5, 1.0), dt: float = 1e-3,
                        n_paths: int = 10_000, base_seed: int = 0,
                        x_init=None, z_fail: float = 4.0) -> MartingaleReport:
    """Mean and conditional (regression-on-X_s) martingale increment tests
    over consecutive checkpoints; |z| > z_fail marks failure."""
    if fs is None:
        fs = default_catalog(model)
    sign_min = min(check_boundary_sign(model, f) for f in fs)
    if sign_min < -1e-12:
        raise ValidationError(
            f"catalog function violates grad(f).gamma >= 0 on the boundary "
            f"(min {sign_min:.3g})")
    checkpoints = sorted(float(t) for t in checkpoints)
    T = checkpoints[-1]
    steps = [int(round(t / dt)) for t in checkpoints]
    obs = _MartingaleObserver(model, fs, steps, dt)
    run_paths(model, policy, T, dt, n_paths, base_seed, [obs], x_init=x_init)
    M = np.concatenate(obs._M, axis=2)
    Xc = np.concatenate(obs._X, axis=1)
    stats = []
    for q, f in enumerate(fs):
        for i in range(len(checkpoints) - 1):
            D = M[q, i + 1] - M[q, i]
            mean = float(D.mean())
            se = float(D.std(ddof=1) / np.sqrt(D.size))
            z_mean = abs(mean) / se if se > 0 else 0.0
            z_slope = 0.0
            Xs = Xc[i]
            for c in range(Xs.shape[1]):
                x = Xs[:, c]
                vx = x.var()
                if vx > 1e-300:
                    beta = float(np.cov(x, D, ddof=1)[0, 1] / (x.var(ddof=1)))
                    resid = D - D.mean() - beta * (x - x.mean())
                    se_b = float(np.sqrt(resid.var(ddof=2)
                                         / (x.var(ddof=1) * (x.size - 1))))
                    if se_b > 0:
                        z_slope = max(z_slope, abs(beta) / se_b)
            stats.append(MartingalePairStat(
                f.name, checkpoints[i], checkpoints[i + 1], mean, se,
                float(z_mean), float(z_slope)))
    max_z = max(max(s.z_mean, s.z_slope_max) for s in stats)
    return MartingaleReport(stats, float(max_z), max_z <= z_fail,
                            float(sign_min))
