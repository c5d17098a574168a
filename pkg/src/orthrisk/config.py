"""Flat INI-style run configuration with strict validation.

Sections and keys are allowlisted; unknown keys are rejected with the key
name, and every numeric range is checked before any compute starts, so a
bad config never burns solver time.  All randomness downstream flows from
the single [run] seed.
"""

import configparser
from dataclasses import dataclass, field
import numpy as np

from .domain import (ActionSpace, ModelSpec, OrthantDomain, make_coefficients)
from .errors import ConfigurationError

COMMANDS = ("simulate", "solve-discounted", "solve-ergodic",
            "probe-recurrence", "verify", "suite")

_ALLOWED = {
    "run": {"command", "seed", "out_dir"},
    "model": {"d", "L", "h", "drift", "drift_params", "sigma_diag", "gamma",
              "gamma_vector", "cost", "cost_c", "cost_cap", "cost_values",
              "theta", "alpha", "kappa", "x0"},
    "numerics": {"dt", "dtheta_max", "max_stored", "n_paths", "T", "t_cap",
                 "rep_n_paths", "mart_n_paths"},
    "schedules": {"alpha_schedule", "k_schedule", "T_list", "R_schedule"},
    "simulate": {"policy_weights", "dump_paths"},
    "recurrence": {"ball_center", "ball_radius", "x_query", "eps_rec"},
}

_DEFAULTS = {
    "seed": 1,
    "out_dir": "runs/out",
    "d": 1, "L": 8.0, "h": 1.0 / 16,
    "drift": "constant", "drift_params": "-1; 1",
    "sigma_diag": "1", "gamma": "normal", "cost": "ramp",
    "cost_c": 1.0, "cost_cap": 2.0,
    "theta": 1.0, "alpha": 1.0, "kappa": 0.05,
    "dt": 1e-3, "max_stored": 1200, "n_paths": 1000, "T": 10.0, "t_cap": 50.0,
    "alpha_schedule": "1, 0.5, 0.25, 0.125, 0.0625",
    "k_schedule": "",
    "T_list": "50, 100, 200",
    "R_schedule": "",
    "policy_weights": "",
    "ball_radius": 0.0, "eps_rec": 0.01,
    "dump_paths": True,
}


def _floats(text):
    return [float(tok) for tok in text.replace(";", ",").split(",")
            if tok.strip() != ""]


def _vectors(text):
    return [tuple(float(t) for t in grp.split())
            for grp in text.split(";") if grp.strip() != ""]


@dataclass
class RunConfig:
    command: str
    seed: int
    out_dir: str
    model_kw: dict
    numerics: dict
    schedules: dict
    simulate_kw: dict
    recurrence_kw: dict
    raw_text: str

    def build_model(self) -> ModelSpec:
        kw = self.model_kw
        dom = OrthantDomain(kw["d"], kw["L"], kw["h"])
        n_act = len(kw["drift_params"])
        labels = tuple(f"a{i}" for i in range(n_act))
        cost_params = None
        if kw["cost"] == "ramp":
            cost_params = {"c": kw["cost_c"], "cap": kw["cost_cap"]}
        elif kw["cost"] == "constant_per_action":
            cost_params = {"values": kw["cost_values"]}
        drift_params = (kw["drift_params"] if kw["drift"] == "constant"
                        else [v[0] for v in kw["drift_params"]])
        coeffs = make_coefficients(
            kw["d"], drift_kind=kw["drift"], drift_params=drift_params,
            sigma_diag_values=kw["sigma_diag"], gamma_kind=kw["gamma"],
            gamma_vector=kw.get("gamma_vector"), cost_kind=kw["cost"],
            cost_params=cost_params)
        return ModelSpec(dom, ActionSpace(labels), coeffs, theta=kw["theta"],
                         alpha=kw["alpha"], kappa=kw["kappa"], seed=self.seed,
                         x0=kw.get("x0"))


def _require(cond, key, message):
    if not cond:
        raise ConfigurationError(f"config key '{key}': {message}")


def load_config(path, command_override=None, seed_override=None,
                out_override=None) -> RunConfig:
    """Parse and validate; errors name the offending key and constraint."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            raw = fh.read()
        parser.read_string(raw, source=str(path))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except configparser.Error as e:
        raise ConfigurationError(f"config parse error: {e}")

    for section in parser.sections():
        if section not in _ALLOWED:
            raise ConfigurationError(f"unknown config section '[{section}]'")
        for key in parser[section]:
            if key not in _ALLOWED[section]:
                raise ConfigurationError(
                    f"unknown key '{key}' in section '[{section}]'")

    def get(section, key, cast=str, default=None):
        if parser.has_option(section, key):
            text = parser.get(section, key)
            try:
                return cast(text)
            except ConfigurationError:
                raise
            except Exception:
                raise ConfigurationError(
                    f"config key '{key}': cannot parse {text!r}")
        if default is not None:
            return default
        return _DEFAULTS.get(key)

    command = command_override or get("run", "command")
    _require(command in COMMANDS, "command",
             f"must be one of {COMMANDS}, got {command!r}")
    if (command_override and parser.has_option("run", "command")
            and parser.get("run", "command") != command_override):
        raise ConfigurationError(
            f"config key 'command': file says "
            f"{parser.get('run', 'command')!r} but the CLI invoked "
            f"{command_override!r}")
    seed = seed_override if seed_override is not None else get("run", "seed", int)
    _require(0 <= seed < 2 ** 64, "seed", "must fit in 64 bits")
    out_dir = out_override or get("run", "out_dir")

    d = get("model", "d", int)
    _require(d >= 1, "d", "dimension must be >= 1")
    L = get("model", "L", float)
    _require(L > 0, "L", "box side must be positive")
    h = get("model", "h", float)
    _require(h > 0 and abs(L / h - round(L / h)) < 1e-9 and round(L / h) >= 4,
             "h", "L/h must be an integer >= 4")
    theta = get("model", "theta", float)
    alpha = get("model", "alpha", float)
    kappa = get("model", "kappa", float)
    _require(alpha > 0, "alpha", "must be positive")
    _require(0 < kappa < theta <= 1, "kappa",
             f"needs 0 < kappa < theta <= 1 (kappa={kappa:g}, theta={theta:g})")
    drift = get("model", "drift")
    _require(drift in ("constant", "linear"), "drift",
             "must be 'constant' or 'linear'")
    drift_params = _vectors(get("model", "drift_params"))
    _require(len(drift_params) >= 1, "drift_params", "need >= 1 action")
    _require(all(len(v) == d for v in drift_params), "drift_params",
             f"each action drift needs {d} components")
    sigma_diag = _floats(get("model", "sigma_diag"))
    if len(sigma_diag) == 1:
        sigma_diag = sigma_diag * d
    _require(len(sigma_diag) == d, "sigma_diag", f"needs {d} entries")
    _require(all(s > 0 for s in sigma_diag), "sigma_diag",
             "entries must be positive (uniform ellipticity)")
    gamma = get("model", "gamma")
    _require(gamma in ("normal", "constant"), "gamma",
             "must be 'normal' or 'constant'")
    gamma_vector = None
    if gamma == "constant":
        gamma_vector = _floats(get("model", "gamma_vector", str, ""))
        _require(len(gamma_vector) == d, "gamma_vector", f"needs {d} entries")
        _require(all(g > 0 for g in gamma_vector), "gamma_vector",
                 "all components must be positive (inward push)")
    cost = get("model", "cost")
    _require(cost in ("ramp", "constant_per_action", "zero"), "cost",
             "must be ramp | constant_per_action | zero")
    cost_values = None
    if cost == "constant_per_action":
        cost_values = _floats(get("model", "cost_values", str, ""))
        _require(len(cost_values) == len(drift_params), "cost_values",
                 "one value per action")
        _require(all(v >= 0 for v in cost_values), "cost_values",
                 "cost must be nonnegative")
    cost_c = get("model", "cost_c", float)
    cost_cap = get("model", "cost_cap", float)
    _require(cost_c >= 0 and cost_cap >= 0, "cost_c", "cost must be nonnegative")
    x0 = None
    if parser.has_option("model", "x0"):
        x0 = tuple(_floats(parser.get("model", "x0")))
        _require(len(x0) == d, "x0", f"needs {d} coordinates")

    dt = get("numerics", "dt", float)
    _require(dt > 0, "dt", "must be positive")
    T = get("numerics", "T", float)
    _require(T >= dt, "T", "must be at least dt")
    t_cap = get("numerics", "t_cap", float)
    n_paths = get("numerics", "n_paths", int)
    _require(n_paths >= 1, "n_paths", "must be >= 1")
    max_stored = get("numerics", "max_stored", int)
    _require(max_stored >= 3, "max_stored", "need at least 3 stored slices")
    dtheta_max = None
    if parser.has_option("numerics", "dtheta_max"):
        dtheta_max = parser.getfloat("numerics", "dtheta_max")
        _require(dtheta_max > 0, "dtheta_max", "must be positive")

    alpha_schedule = _floats(get("schedules", "alpha_schedule"))
    _require(all(a > 0 for a in alpha_schedule), "alpha_schedule",
             "entries must be positive")
    k_schedule = _floats(get("schedules", "k_schedule", str, " "))
    T_list = _floats(get("schedules", "T_list"))
    R_schedule = _floats(get("schedules", "R_schedule", str, " "))

    weights = _floats(get("simulate", "policy_weights", str, " "))
    if not weights:
        weights = [1.0] + [0.0] * (len(drift_params) - 1)
    _require(len(weights) == len(drift_params), "policy_weights",
             "one weight per action")
    _require(all(w >= 0 for w in weights) and abs(sum(weights) - 1) < 1e-9,
             "policy_weights", "must be a probability vector")
    dump_paths = get("simulate", "dump_paths",
                     lambda s: s.lower() in ("1", "true", "yes"))

    ball_center = None
    if parser.has_option("recurrence", "ball_center"):
        ball_center = tuple(_floats(parser.get("recurrence", "ball_center")))
        _require(len(ball_center) == d, "ball_center", f"needs {d} coordinates")
    ball_radius = get("recurrence", "ball_radius", float)
    x_query = None
    if parser.has_option("recurrence", "x_query"):
        x_query = tuple(_floats(parser.get("recurrence", "x_query")))
        _require(len(x_query) == d, "x_query", f"needs {d} coordinates")
    eps_rec = get("recurrence", "eps_rec", float)
    _require(0 < eps_rec < 0.5, "eps_rec", "must be in (0, 0.5)")

    return RunConfig(
        command=command, seed=int(seed), out_dir=out_dir,
        model_kw={"d": d, "L": L, "h": h, "drift": drift,
                  "drift_params": drift_params, "sigma_diag": sigma_diag,
                  "gamma": gamma, "gamma_vector": gamma_vector, "cost": cost,
                  "cost_c": cost_c, "cost_cap": cost_cap,
                  "cost_values": cost_values, "theta": theta, "alpha": alpha,
                  "kappa": kappa, "x0": x0},
        numerics={"dt": dt, "T": T, "t_cap": t_cap, "n_paths": n_paths,
                  "max_stored": max_stored, "dtheta_max": dtheta_max},
        schedules={"alpha_schedule": alpha_schedule, "k_schedule": k_schedule,
                   "T_list": T_list, "R_schedule": R_schedule},
        simulate_kw={"policy_weights": weights, "dump_paths": dump_paths},
        recurrence_kw={"ball_center": ball_center, "ball_radius": ball_radius,
                       "x_query": x_query, "eps_rec": eps_rec},
        raw_text=raw)
