"""Model definition: orthant grid, finite relaxed-action space, coefficient fields.

The state space is the nonnegative orthant truncated to the box [0, L]^d with
a uniform grid of spacing h.  Controls are probability weights over a finite
action list, so relaxed drift and cost are plain weighted sums over actions.
Coefficient fields come from a small built-in catalog (constant or linear
drift, diagonal noise, normal or constant oblique reflection, bounded ramp
cost) selected by name, which keeps runs reproducible from a flat config.
"""

from dataclasses import dataclass, field
import numpy as np

from .errors import ValidationError
from . import rng

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class OrthantDomain:
    """Truncated orthant [0, L]^d with grid spacing h (L/h an integer >= 4)."""

    d: int
    L: float
    h: float

    def __post_init__(self):
        if self.d < 1:
            raise ValidationError(f"dimension must be >= 1, got {self.d}")
        if self.L <= 0:
            raise ValidationError(f"box side must be positive, got {self.L}")
        m = self.L / self.h
        if abs(m - round(m)) > 1e-9 or round(m) < 4:
            raise ValidationError(
                f"L/h must be an integer >= 4, got L={self.L}, h={self.h}")

    @property
    def n_per_axis(self) -> int:
        return int(round(self.L / self.h)) + 1

    @property
    def shape(self) -> tuple:
        return (self.n_per_axis,) * self.d

    @property
    def n_nodes(self) -> int:
        return self.n_per_axis ** self.d

    def axis(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.n_per_axis)

    def grid_points(self) -> np.ndarray:
        """All grid nodes as an (n_nodes, d) array in C order."""
        ax = self.axis()
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def reflecting_mask(self) -> np.ndarray:
        """Boolean (shape) mask of nodes with some coordinate equal to 0."""
        pts = self.grid_points().reshape(self.shape + (self.d,))
        return (pts == 0.0).any(axis=-1)

    def outer_mask(self) -> np.ndarray:
        """Boolean (shape) mask of nodes with some coordinate equal to L."""
        pts = self.grid_points().reshape(self.shape + (self.d,))
        return (pts == self.L).any(axis=-1)

    def nearest_node_index(self, x: np.ndarray) -> np.ndarray:
        """Flat node index of the grid node nearest to each row of x."""
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.rint(x / self.h).astype(np.int64), 0, self.n_per_axis - 1)
        flat = idx[..., 0]
        for i in range(1, self.d):
            flat = flat * self.n_per_axis + idx[..., i]
        return flat


@dataclass(frozen=True)
class ActionSpace:
    """Ordered finite action list; relaxed controls are probability weights."""

    labels: tuple

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValidationError("action space needs at least one action")

    @property
    def n(self) -> int:
        return len(self.labels)

    def validate_weights(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape[-1] != self.n:
            raise ValidationError(
                f"weight vector length {w.shape[-1]} != {self.n} actions")
        if np.any(w < -WEIGHT_TOL) or np.any(np.abs(w.sum(axis=-1) - 1.0) > WEIGHT_TOL):
            raise ValidationError("weights must be a probability vector to 1e-12")
        return w

    def dirac(self, i: int) -> np.ndarray:
        w = np.zeros(self.n)
        w[i] = 1.0
        return w


@dataclass
class CoefficientField:
    """Drift, diffusion, reflection and cost fields with their assumed margins.

    All callables are vectorized over a leading batch axis: drift(x, s) and
    cost(x, s) take x of shape (..., d) and an action index, sigma/gamma take
    x of shape (..., d).  delta is the assumed ellipticity constant of
    a = sigma sigma^T, eta the assumed lower bound on gamma . n at the
    boundary faces (n pointing into the domain: reflection must push inward).
    """

    drift: callable
    sigma: callable
    gamma: callable
    cost: callable
    delta: float
    eta: float
    diagonal_sigma: bool = False
    sigma_diag: callable = None
    name: str = "custom"

    def a_matrix(self, x: np.ndarray) -> np.ndarray:
        s = self.sigma(np.asarray(x, dtype=float))
        return np.einsum("...ij,...kj->...ik", s, s)

    def sup_bounds(self, domain: OrthantDomain, n_actions: int):
        """(sup |r|, sup max_i |b_i|) over grid nodes and actions."""
        pts = domain.grid_points()
        r_sup, b_sup = 0.0, 0.0
        for s in range(n_actions):
            r_sup = max(r_sup, float(np.max(self.cost(pts, s))))
            b_sup = max(b_sup, float(np.max(np.abs(self.drift(pts, s)))))
        return r_sup, b_sup


@dataclass
class ModelSpec:
    """Full problem instance: geometry, actions, coefficients, parameters."""

    domain: OrthantDomain
    actions: ActionSpace
    coeffs: CoefficientField
    theta: float = 1.0
    alpha: float = 1.0
    kappa: float = 0.05
    seed: int = 0
    x0: tuple = None

    def __post_init__(self):
        if not (0.0 < self.kappa < self.theta <= 1.0):
            raise ValidationError(
                f"need 0 < kappa < theta <= 1, got kappa={self.kappa}, theta={self.theta}")
        if self.alpha <= 0.0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if self.x0 is None:
            q = round(self.domain.L / 4.0 / self.domain.h) * self.domain.h
            q = min(max(q, self.domain.h), self.domain.L - self.domain.h)
            self.x0 = (q,) * self.domain.d
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.domain.d,):
            raise ValidationError(f"x0 must have {self.domain.d} coordinates")
        on_grid = np.allclose(np.rint(x0 / self.domain.h) * self.domain.h, x0, atol=1e-9)
        interior = np.all(x0 > 0) and np.all(x0 < self.domain.L)
        if not (on_grid and interior):
            raise ValidationError(f"x0 must be an interior grid node, got {tuple(x0)}")

    @property
    def x0_flat_index(self) -> int:
        return int(self.domain.nearest_node_index(np.asarray(self.x0)[None, :])[0])


def drift_relaxed(model: ModelSpec, x, w) -> np.ndarray:
    """Relaxed drift sum_s w_s * bbar(x, s); linear in w."""
    x = _check_point(model, x)
    w = model.actions.validate_weights(w)
    out = np.zeros(model.domain.d)
    for s in range(model.actions.n):
        if w[s] != 0.0:
            out += w[s] * model.coeffs.drift(x, s)
    return out


def cost_relaxed(model: ModelSpec, x, w) -> float:
    """Relaxed running cost sum_s w_s * rbar(x, s); nonnegative."""
    x = _check_point(model, x)
    w = model.actions.validate_weights(w)
    total = 0.0
    for s in range(model.actions.n):
        if w[s] != 0.0:
            total += w[s] * float(model.coeffs.cost(x, s))
    return total


def _check_point(model: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.domain.d,):
        raise ValidationError(f"point must have {model.domain.d} coordinates")
    if np.any(x < -1e-12):
        raise ValidationError(f"point {tuple(x)} is outside the closed orthant")
    return x


@dataclass
class EllipticityReport:
    min_quadratic_form: float
    delta: float
    passed: bool
    sample_count: int


def check_ellipticity(coeffs: CoefficientField, domain: OrthantDomain,
                      sample_count: int = 256, seed: int = 0) -> EllipticityReport:
    """Sampled check of x^T a(y) x >= delta |x|^2 over grid points y, unit x."""
    if sample_count < 1:
        raise ValidationError("sample_count must be >= 1")
    g = rng.stream(seed, rng.TAG_ELLIPTICITY)
    pts = domain.grid_points()
    rows = g.integers(0, pts.shape[0], size=sample_count)
    y = pts[rows]
    u = g.standard_normal((sample_count, domain.d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    a = coeffs.a_matrix(y)
    q = np.einsum("ni,nij,nj->n", u, a, u)
    qmin = float(q.min())
    return EllipticityReport(qmin, coeffs.delta, qmin >= coeffs.delta * (1 - 1e-9),
                             sample_count)


@dataclass
class ReflectionAngleReport:
    min_gamma_dot_n: float
    eta: float
    passed: bool
    n_boundary_nodes: int


def check_reflection_angle(coeffs: CoefficientField,
                           domain: OrthantDomain) -> ReflectionAngleReport:
    """Min over boundary nodes and incident faces of gamma(x) . n(x).

    On the face {x_i = 0} the inward normal is e_i, so the checked quantity
    is gamma_i(x); corner nodes are checked against every incident face.
    """
    pts = domain.grid_points()
    on_face = pts == 0.0
    bmask = on_face.any(axis=1)
    if not bmask.any():
        raise ValidationError("boundary node set is empty")
    bpts = pts[bmask]
    g = coeffs.gamma(bpts)
    vals = g[on_face[bmask]]
    vmin = float(vals.min())
    return ReflectionAngleReport(vmin, coeffs.eta, vmin >= coeffs.eta,
                                 int(bmask.sum()))


# ---------------------------------------------------------------------------
# Coefficient catalog


def constant_drift(vectors) -> callable:
    vecs = [np.asarray(v, dtype=float) for v in vectors]

    def drift(x, s):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(vecs[s], x.shape).copy()

    return drift


def linear_drift(coefs) -> callable:
    """Per-action scalar c_s; bbar(x, s) = c_s * x."""
    cs = [float(c) for c in coefs]

    def drift(x, s):
        return cs[s] * np.asarray(x, dtype=float)

    return drift


def diagonal_sigma(diag) -> tuple:
    """(sigma(x) -> full matrix, sigma_diag(x) -> diagonal) for constant diag."""
    dvec = np.asarray(diag, dtype=float)

    def sig(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (dvec.size,))
        for i in range(dvec.size):
            out[..., i, i] = dvec[i]
        return out

    def sig_diag(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(dvec, x.shape).copy()

    return sig, sig_diag


def normal_gamma(btol: float = 1e-9) -> callable:
    """Unit inward normal: e_i on the face {x_i = 0}, averaged at corners."""

    def gamma(x):
        x = np.asarray(x, dtype=float)
        w = (x <= btol).astype(float)
        none = w.sum(axis=-1, keepdims=True) == 0
        w = np.where(none, np.ones_like(w), w)
        return w / np.linalg.norm(w, axis=-1, keepdims=True)

    return gamma


def constant_gamma(vec) -> callable:
    v = np.asarray(vec, dtype=float)
    v = v / np.linalg.norm(v)

    def gamma(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(v, x.shape).copy()

    return gamma


def ramp_cost(c: float = 1.0, cap: float = 2.0) -> callable:
    """Action-independent bounded ramp r(x) = min(c |x|, cap)."""

    def cost(x, s):
        x = np.asarray(x, dtype=float)
        return np.minimum(c * np.linalg.norm(x, axis=-1), cap)

    return cost


def constant_cost_per_action(values) -> callable:
    vals = [float(v) for v in values]

    def cost(x, s):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], vals[s])

    return cost


def zero_cost() -> callable:
    def cost(x, s):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    return cost


_GAMMA_KINDS = ("normal", "constant")
_DRIFT_KINDS = ("constant", "linear")
_COST_KINDS = ("ramp", "constant_per_action", "zero")


def make_coefficients(d: int, *, drift_kind="constant", drift_params=((0.0,),),
                      sigma_diag_values=None, gamma_kind="normal",
                      gamma_vector=None, cost_kind="ramp", cost_params=None,
                      delta=None, eta=None) -> CoefficientField:
    """Assemble a CoefficientField from catalog names and numeric parameters."""
    if drift_kind == "constant":
        dr = constant_drift(drift_params)
    elif drift_kind == "linear":
        dr = linear_drift(drift_params)
    else:
        raise ValidationError(f"unknown drift kind {drift_kind!r}; use {_DRIFT_KINDS}")

    sd = sigma_diag_values if sigma_diag_values is not None else (1.0,) * d
    sig, sigd = diagonal_sigma(sd)
    if delta is None:
        delta = float(min(sd)) ** 2

    if gamma_kind == "normal":
        gam = normal_gamma()
        eta_default = 1.0 / np.sqrt(d)
    elif gamma_kind == "constant":
        if gamma_vector is None:
            raise ValidationError("constant gamma needs gamma_vector")
        gam = constant_gamma(gamma_vector)
        v = np.asarray(gamma_vector, dtype=float)
        eta_default = float((v / np.linalg.norm(v)).min())
    else:
        raise ValidationError(f"unknown gamma kind {gamma_kind!r}; use {_GAMMA_KINDS}")
    if eta is None:
        eta = eta_default

    if cost_kind == "ramp":
        p = cost_params or {}
        co = ramp_cost(p.get("c", 1.0), p.get("cap", 2.0))
    elif cost_kind == "constant_per_action":
        co = constant_cost_per_action(cost_params["values"])
    elif cost_kind == "zero":
        co = zero_cost()
    else:
        raise ValidationError(f"unknown cost kind {cost_kind!r}; use {_COST_KINDS}")

    return CoefficientField(drift=dr, sigma=sig, gamma=gam, cost=co,
                            delta=delta, eta=eta, diagonal_sigma=True,
                            sigma_diag=sigd,
                            name=f"{drift_kind}/{gamma_kind}/{cost_kind}")


def canonical_model_1d(h: float = 1 / 64, L: float = 8.0, alpha: float = 1.0,
                       kappa: float = 0.05, theta: float = 1.0,
                       seed: int = 0, cost_scale: float = 1.0) -> ModelSpec:
    """Two-action 1-D test model: drifts {-1, +1}, unit noise, normal
    reflection, cost min(|x|, 2) (optionally rescaled)."""
    dom = OrthantDomain(1, L, h)
    acts = ActionSpace(("-1", "+1"))
    coeffs = make_coefficients(
        1, drift_kind="constant", drift_params=((-1.0,), (1.0,)),
        sigma_diag_values=(1.0,), gamma_kind="normal",
        cost_kind="ramp", cost_params={"c": cost_scale, "cap": 2.0 * cost_scale})
    return ModelSpec(dom, acts, coeffs, theta=theta, alpha=alpha,
                     kappa=kappa, seed=seed)


def canonical_model_2d(h: float = 1 / 8, L: float = 6.0, alpha: float = 1.0,
                       kappa: float = 0.05, theta: float = 1.0,
                       seed: int = 0) -> ModelSpec:
    """Two-action 2-D test model: diagonal drifts, identity noise, normal
    reflection, cost min(|x|, 2)."""
    dom = OrthantDomain(2, L, h)
    acts = ActionSpace(("-u", "+u"))
    u = 1.0 / np.sqrt(2.0)
    coeffs = make_coefficients(
        2, drift_kind="constant", drift_params=((-u, -u), (u, u)),
        sigma_diag_values=(1.0, 1.0), gamma_kind="normal",
        cost_kind="ramp", cost_params={"c": 1.0, "cap": 2.0})
    return ModelSpec(dom, acts, coeffs, theta=theta, alpha=alpha,
                     kappa=kappa, seed=seed)
