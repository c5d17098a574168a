"""Deterministic serialization: 17-significant-digit floats, sorted keys,
atomic writes, and bit-exact round trips for solver fields.

Identical inputs must produce byte-identical output files, so JSON is
emitted by a small recursive writer rather than json.dump (which leaves
float formatting to repr), and reruns replace files atomically.
"""

import json
import os
import tempfile
from importlib import resources

import numpy as np

from .errors import ValidationError

SCHEMA_VERSION = 1


def format_float(x) -> str:
    """Shortest text that round-trips a double exactly (17 significant digits).
    Non-finite values serialize as null (strict JSON has no Infinity/NaN)."""
    if not np.isfinite(x):
        return "null"
    return f"{float(x):.17g}"


def _emit(obj, out):
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, k in enumerate(sorted(obj)):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _emit(obj[k], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        out.append("[")
        for i, v in enumerate(seq):
            if i:
                out.append(",")
            _emit(v, out)
        out.append("]")
    else:
        raise ValidationError(f"cannot serialize {type(obj).__name__}")


def json_bytes(obj) -> bytes:
    out = []
    _emit(obj, out)
    return ("".join(out) + "\n").encode()


def atomic_write_bytes(path, data: bytes):
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(obj, path):
    atomic_write_bytes(path, json_bytes(obj))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, header, rows):
    """Rows of mixed ints/floats/strings; floats at full precision."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(format_float(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def save_value_field(field, path):
    """Binary dump with enough header metadata to check a reload target."""
    dom = field.model.domain
    np.savez(path,
             theta_grid=field.theta_grid, values=field.values,
             log_scale=field.log_scale,
             meta=np.array([dom.d, dom.L, dom.h, field.alpha, field.kappa,
                            field.r_sup,
                            np.nan if field.k_trunc is None else field.k_trunc]),
             x0_index=np.asarray(field.x0_index, dtype=np.int64))


def load_value_field(path, model):
    """Reattach a dumped field to its model; header mismatch is an error."""
    from .hjb import ValueField
    with np.load(path) as z:
        meta = z["meta"]
        d, L, h, alpha, kappa, r_sup, ktr = meta
        dom = model.domain
        if (int(d) != dom.d or abs(L - dom.L) > 1e-12 or abs(h - dom.h) > 1e-12
                or abs(alpha - model.alpha) > 1e-12
                or abs(kappa - model.kappa) > 1e-12):
            raise ValidationError(
                f"field file {path} does not match the model "
                f"(d,L,h,alpha,kappa)")
        return ValueField(theta_grid=z["theta_grid"], values=z["values"],
                          log_scale=z["log_scale"], model=model,
                          alpha=float(alpha), kappa=float(kappa),
                          r_sup=float(r_sup),
                          k_trunc=None if np.isnan(ktr) else float(ktr),
                          x0_index=tuple(int(i) for i in z["x0_index"]))


def write_policy_csv(policy, domain, path):
    """One row per spatial node: index, coordinates, chosen action."""
    pts = domain.grid_points()
    act = policy.action_index.ravel()
    header = ["node_index"] + [f"x_{i+1}" for i in range(domain.d)] + ["action_index"]
    rows = [[i] + [float(c) for c in pts[i]] + [int(act[i])]
            for i in range(pts.shape[0])]
    write_csv(path, header, rows)


def summary_schema():
    with resources.files("orthrisk").joinpath("schema/summary.schema.json").open() as fh:
        return json.load(fh)


def validate_summary(doc):
    import jsonschema
    jsonschema.validate(doc, summary_schema())


def make_summary(command: str, seed: int, results: dict) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "command": command,
           "seed": int(seed), "results": results}
    validate_summary(doc)
    return doc
