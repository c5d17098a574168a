"""Constrained Euler-Maruyama simulation with oblique Skorokhod reflection.

Each step displaces the state by drift*dt + sigma*sqrt(dt)*Z and then pushes
it back into the orthant along the reflection field gamma, one violated face
at a time (gamma evaluated at the face foot point, i.e. the violated
coordinate clamped to zero).  The cumulative push is the discrete local time
xi.  The artificial outer faces {x_i = L} reflect by clamping and flag the
path as contaminated.

Paths are bit-reproducible: path i of a batch draws from its own Philox
stream keyed by split64(base_seed, i), in fixed blocks of steps, so results
do not depend on chunking.  Batch runs stream through observer objects so
estimators never need the full trajectory in memory; `simulate_path` and
`simulate_batch` use a recording observer and return full PathBundles.
"""

from dataclasses import dataclass, field
import numpy as np

from .domain import ModelSpec, OrthantDomain
from .errors import SimulationError, ValidationError
from .rng import make_generator, split64

MAX_REFLECTION_ITER = 64
_BLOCK_STEPS = 2048


@dataclass
class PathBundle:
    """One simulated trajectory with its driving noise and reflection record.

    refl[k] is the total reflection displacement gamma*dxi applied during
    step k, so the pre-reflection point of step k is X[k+1] - refl[k]
    (before the outer-face clamp, recorded separately in outer_clip).
    """

    dt: float
    T: float
    X: np.ndarray            # (n_steps+1, d)
    xi: np.ndarray           # (n_steps+1,)
    dW: np.ndarray           # (n_steps, d) Gaussian increments sqrt(dt)*Z
    seed: int
    control_trace: np.ndarray  # (n_steps, n_actions)
    refl: np.ndarray         # (n_steps, d)
    outer_clip: np.ndarray   # (n_steps, d) clamp applied at outer faces
    hit_outer: bool
    path_id: int = 0

    @property
    def n_steps(self) -> int:
        return self.X.shape[0] - 1

    def times(self) -> np.ndarray:
        return np.arange(self.X.shape[0]) * self.dt


class ControlPolicy:
    """Control rule emitting probability weights over the action list.

    kinds: 'constant' (fixed weight vector), 'stationary_markov' (weight
    table over grid nodes, nearest-node lookup), 'feedback' (callable
    (t, X, xi) -> weights, progressively measurable in the path history).
    """

    def __init__(self, kind, *, weights=None, table=None, domain=None, fn=None,
                 name=""):
        self.kind = kind
        self.name = name or kind
        if kind == "constant":
            self._w = np.asarray(weights, dtype=float)
            _check_prob(self._w[None, :])
        elif kind == "stationary_markov":
            self._table = np.asarray(table, dtype=float)
            self._domain = domain
            _check_prob(self._table)
        elif kind == "feedback":
            self._fn = fn
        else:
            raise ValidationError(f"unknown policy kind {kind!r}")

    @classmethod
    def constant(cls, weights, name="constant"):
        return cls("constant", weights=weights, name=name)

    @classmethod
    def stationary_markov(cls, table, domain: OrthantDomain, name="markov"):
        return cls("stationary_markov", table=table, domain=domain, name=name)

    @classmethod
    def feedback(cls, fn, name="feedback"):
        return cls("feedback", fn=fn, name=name)

    def weights_at(self, t: float, X: np.ndarray, xi: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.broadcast_to(self._w, (X.shape[0], self._w.size))
        if self.kind == "stationary_markov":
            idx = self._domain.nearest_node_index(X)
            return self._table[idx]
        w = np.asarray(self._fn(t, X, xi), dtype=float)
        _check_prob(w)
        return w


def _check_prob(w: np.ndarray):
    if np.any(w < -1e-12) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-12):
        raise ValidationError("policy emitted a non-probability weight vector")


def skorokhod_step(x, displacement, gamma_fn, L=None, max_iter=MAX_REFLECTION_ITER):
    """Resolve one displaced point back into the closed orthant.

    Returns (y, dxi): y = x + displacement + gamma(foot)*dxi with dxi >= 0
    minimal over the per-face projection loop.  If L is given, coordinates
    above L are clamped (artificial outer reflection, no local time).
    """
    x = np.asarray(x, dtype=float)
    Y = (x + np.asarray(displacement, dtype=float))[None, :].copy()
    dxi, refl, clip, hit = _project_batch(Y, gamma_fn, L, max_iter,
                                          context=(x, displacement))
    return Y[0], float(dxi[0])


def _project_batch(Y, gamma_fn, L, max_iter, context=None):
    """In-place orthant projection of rows of Y along gamma; returns
    (dxi, refl, outer_clip, hit_outer) arrays."""
    m, d = Y.shape
    dxi = np.zeros(m)
    refl = np.zeros((m, d))
    for _ in range(max_iter):
        viol = Y < 0.0
        mask = viol.any(axis=1)
        if not mask.any():
            break
        rows = np.nonzero(mask)[0]
        sub = Y[rows]
        i_star = np.argmin(sub, axis=1)
        foot = sub.copy()
        foot[np.arange(rows.size), i_star] = 0.0
        g = np.asarray(gamma_fn(foot), dtype=float)
        gi = g[np.arange(rows.size), i_star]
        if np.any(gi <= 0.0):
            bad = rows[np.argmin(gi)]
            raise SimulationError(
                f"reflection field does not push into the domain at row {bad}"
                + (f" (x={context[0]}, displacement={context[1]})" if context else ""))
        delta = -sub[np.arange(rows.size), i_star] / gi
        sub = sub + g * delta[:, None]
        sub[np.arange(rows.size), i_star] = 0.0
        Y[rows] = sub
        dxi[rows] += delta
        refl[rows] += g * delta[:, None]
    else:
        raise SimulationError(
            "Skorokhod projection loop did not terminate within "
            f"{max_iter} iterations"
            + (f" (x={context[0]}, displacement={context[1]})" if context else ""))
    clip = np.zeros((m, d))
    hit = np.zeros(m, dtype=bool)
    if L is not None:
        over = Y > L
        hit = over.any(axis=1)
        if hit.any():
            clip = np.where(over, Y - L, 0.0)
            np.minimum(Y, L, out=Y)
    return dxi, refl, clip, hit


class StepObserver:
    """Base class for streaming consumers of the batch engine."""

    def begin_chunk(self, lo: int, hi: int, X0: np.ndarray):
        pass

    def step(self, k: int, t_next: float, X_prev: np.ndarray, X_new: np.ndarray,
             weights: np.ndarray, dxi: np.ndarray, refl: np.ndarray,
             clip: np.ndarray, hit: np.ndarray) -> bool:
        """Called after each step; return True once this observer is done."""
        return False

    def end_chunk(self):
        pass


def run_paths(model: ModelSpec, policy: ControlPolicy, T: float, dt: float,
              n_paths: int, base_seed: int, observers, *, x_init=None,
              chunk_size: int = 2048, seed_of_path=None):
    """Drive n_paths through the observers; returns the step count used."""
    if dt <= 0 or T < dt:
        raise ValidationError(f"need dt > 0 and T >= dt, got dt={dt}, T={T}")
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    d = model.domain.d
    L = model.domain.L
    x_init = np.asarray(model.x0 if x_init is None else x_init, dtype=float)
    if np.any(x_init < 0) or np.any(x_init > L):
        raise ValidationError(f"initial point {tuple(x_init)} outside the box")
    n_steps = max(1, int(round(T / dt)))
    sqdt = np.sqrt(dt)
    coeffs = model.coeffs
    n_actions = model.actions.n
    if seed_of_path is None:
        seed_of_path = lambda i: split64(base_seed, i)

    for lo in range(0, n_paths, chunk_size):
        hi = min(lo + chunk_size, n_paths)
        m = hi - lo
        gens = [make_generator(seed_of_path(i)) for i in range(lo, hi)]
        X = np.tile(x_init, (m, 1))
        xi = np.zeros(m)
        for ob in observers:
            ob.begin_chunk(lo, hi, X)
        done = False
        k = 0
        while k < n_steps and not done:
            bs = min(_BLOCK_STEPS, n_steps - k)
            Z = np.empty((m, bs, d))
            for j, g in enumerate(gens):
                Z[j] = g.standard_normal((bs, d))
            for jb in range(bs):
                t = k * dt
                w = policy.weights_at(t, X, xi)
                b = np.zeros((m, d))
                for s in range(n_actions):
                    ws = w[:, s]
                    if np.any(ws != 0.0):
                        b += ws[:, None] * coeffs.drift(X, s)
                if coeffs.diagonal_sigma:
                    noise = coeffs.sigma_diag(X) * Z[:, jb] * sqdt
                else:
                    noise = np.einsum("mij,mj->mi", coeffs.sigma(X), Z[:, jb]) * sqdt
                Y = X + b * dt + noise
                if np.isnan(Y).any():
                    raise SimulationError(
                        f"NaN in coefficients or state at step {k}")
                dxi, refl, clip, hit = _project_batch(Y, coeffs.gamma, L,
                                                      MAX_REFLECTION_ITER)
                xi = xi + dxi
                flags = []
                for ob in observers:
                    flags.append(ob.step(k, (k + 1) * dt, X, Y, w, dxi, refl,
                                         clip, hit))
                X = Y
                k += 1
                if flags and all(flags):
                    done = True
                    break
        for ob in observers:
            ob.end_chunk()
    return n_steps


class RecordObserver(StepObserver):
    """Collects full PathBundles (use at small scale only).  The Gaussian
    increments are regenerated from each path's own stream in end_chunk,
    mirroring the engine's block pattern exactly."""

    def __init__(self, model: ModelSpec, n_steps: int, dt: float, seed_of_path):
        self.model = model
        self.n_steps = n_steps
        self.dt = dt
        self.seed_of_path = seed_of_path
        self.bundles = []

    def begin_chunk(self, lo, hi, X0):
        m, d = X0.shape
        n_act = self.model.actions.n
        self._lo = lo
        self._X = np.empty((m, self.n_steps + 1, d))
        self._X[:, 0] = X0
        self._xi = np.zeros((m, self.n_steps + 1))
        self._w = np.empty((m, self.n_steps, n_act))
        self._refl = np.zeros((m, self.n_steps, d))
        self._clip = np.zeros((m, self.n_steps, d))
        self._hit = np.zeros(m, dtype=bool)

    def step(self, k, t_next, X_prev, X_new, weights, dxi, refl, clip, hit):
        self._X[:, k + 1] = X_new
        self._xi[:, k + 1] = self._xi[:, k] + dxi
        self._w[:, k] = weights
        self._refl[:, k] = refl
        self._clip[:, k] = clip
        self._hit |= hit
        return False

    def end_chunk(self):
        d = self._X.shape[2]
        sqdt = np.sqrt(self.dt)
        for j in range(self._X.shape[0]):
            i = self._lo + j
            seed = self.seed_of_path(i)
            g = make_generator(seed)
            Z = np.empty((self.n_steps, d))
            k = 0
            while k < self.n_steps:
                bs = min(_BLOCK_STEPS, self.n_steps - k)
                Z[k:k + bs] = g.standard_normal((bs, d))
                k += bs
            self.bundles.append(PathBundle(
                dt=self.dt, T=self.n_steps * self.dt, X=self._X[j],
                xi=self._xi[j], dW=Z * sqdt, seed=seed,
                control_trace=self._w[j], refl=self._refl[j],
                outer_clip=self._clip[j], hit_outer=bool(self._hit[j]),
                path_id=i))


def simulate_path(model: ModelSpec, policy: ControlPolicy, T: float, dt: float,
                  seed: int, x_init=None) -> PathBundle:
    """Single path keyed directly by `seed`; bit-identical on repeat calls."""
    n_steps = max(1, int(round(T / dt)))
    rec = RecordObserver(model, n_steps, dt, lambda i: seed)
    run_paths(model, policy, T, dt, 1, 0, [rec], x_init=x_init,
              seed_of_path=lambda i: seed)
    return rec.bundles[0]


def simulate_batch(model: ModelSpec, policy: ControlPolicy, T: float, dt: float,
                   n_paths: int, base_seed: int, x_init=None) -> list:
    """Independent paths, path i keyed by split64(base_seed, i)."""
    n_steps = max(1, int(round(T / dt)))
    rec = RecordObserver(model, n_steps, dt, lambda i: split64(base_seed, i))
    run_paths(model, policy, T, dt, n_paths, base_seed, [rec], x_init=x_init)
    return rec.bundles


def dump_paths_csv(bundles, path):
    """CSV rows (path_id, step, t, x_1..x_d, xi, action weights)."""
    from .io import format_float
    d = bundles[0].X.shape[1]
    n_act = bundles[0].control_trace.shape[1]
    cols = (["path_id", "step", "t"] + [f"x_{i+1}" for i in range(d)]
            + ["xi"] + [f"w_{i+1}" for i in range(n_act)])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for b in bundles:
            for k in range(b.n_steps + 1):
                w = b.control_trace[min(k, b.n_steps - 1)]
                row = [str(b.path_id), str(k), format_float(k * b.dt)]
                row += [format_float(v) for v in b.X[k]]
                row.append(format_float(b.xi[k]))
                row += [format_float(v) for v in w]
                fh.write(",".join(row) + "\n")
