"""Serialization: CSV tables, the binary ensemble cache and run configs."""

import csv
import struct
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, PreconditionError
from .model import (
    BUILTIN_MODELS,
    ChainModel,
    ClosureSpec,
    InitialLaw,
    PairwiseDrift,
    TimeGrid,
    builtin_model,
)

MAGIC = b"DCSE"
CACHE_VERSION = 1
SCHEMA_VERSION = 1


def fmt(v):
    """17 significant digits for floats, plain text otherwise."""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def write_dict_rows(path, rows):
    if not rows:
        raise PreconditionError("no rows to write")
    header = list(rows[0])
    return write_csv(path, header, ([r[k] for k in header] for r in rows))


def read_csv(path):
    with Path(path).open() as f:
        return list(csv.DictReader(f))


# -- ensembles ---------------------------------------------------------------


def ensemble_rows(ens):
    times = ens.grid.times
    v = ens.values
    for p in range(v.shape[0]):
        for li, lv in enumerate(ens.levels):
            for s in range(v.shape[2]):
                for c in range(v.shape[3]):
                    yield (ens.first_path + p, lv, s, times[s], c + 1, v[p, li, s, c])


def write_ensemble_csv(path, ens):
    return write_csv(path, ["path", "level", "step", "t", "component", "value"], ensemble_rows(ens))


def write_ensemble_cache(path, ens):
    """Binary cache: 16-byte header ``magic, version u8, dim u8, levels u16,
    n_paths u32, n_steps u32`` then ``t0, dt`` (f64), ``seed`` (u64), the
    stored level numbers (u16 each) and little-endian f64 values."""
    n_paths, n_levels, n_steps1, dim = ens.values.shape
    head = struct.pack("<4sBBHII", MAGIC, CACHE_VERSION, dim, n_levels, n_paths, n_steps1 - 1)
    meta = struct.pack("<ddQ", ens.grid.t0, ens.grid.dt, int(ens.seed) & ((1 << 64) - 1))
    lv = struct.pack(f"<{n_levels}H", *ens.levels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(head + meta + lv)
        f.write(np.ascontiguousarray(ens.values, dtype="<f8").tobytes())
    return path


def read_ensemble_cache(path):
    from .simulate import ChainEnsemble

    data = Path(path).read_bytes()
    magic, ver, dim, n_levels, n_paths, n_steps = struct.unpack_from("<4sBBHII", data, 0)
    if magic != MAGIC:
        raise PreconditionError(f"{path} is not an ensemble cache")
    if ver != CACHE_VERSION:
        raise PreconditionError(f"unsupported cache version {ver}")
    t0, dt, seed = struct.unpack_from("<ddQ", data, 16)
    off = 16 + 24
    levels = struct.unpack_from(f"<{n_levels}H", data, off)
    off += 2 * n_levels
    vals = np.frombuffer(data, dtype="<f8", offset=off).reshape(n_paths, n_levels, n_steps + 1, dim)
    return ChainEnsemble(TimeGrid(t0, dt, n_steps), max(levels), vals.copy(), seed, ClosureSpec(), tuple(levels))


def write_density_csv(path, curve):
    return write_csv(path, ["y", "value"], zip(curve.y, curve.values))


def write_gaussian_flow_csv(path, flow):
    d = flow.depth
    iu = np.triu_indices(d)
    header = ["t"] + [f"mean_{i + 1}" for i in range(d)] + [f"cov_{i + 1}_{j + 1}" for i, j in zip(*iu)]
    rows = (
        [t, *flow.mean[s], *flow.cov[s][iu]] for s, t in enumerate(flow.grid.times)
    )
    return write_csv(path, header, rows)


def read_observation_csv(path):
    """Observation CSV with columns ``t, x_k`` on a uniform grid."""
    from .filtering import EXTERNAL, ObservationPath

    rows = read_csv(path)
    if not rows or set(rows[0]) != {"t", "x_k"}:
        raise ConfigError(f"{path}: observation CSV needs exactly the columns t, x_k")
    t = np.array([float(r["t"]) for r in rows])
    x = np.array([float(r["x_k"]) for r in rows])
    dt = np.diff(t)
    if t.size < 2 or np.any(np.abs(dt - dt[0]) > 1e-9 * max(1.0, abs(dt[0]))):
        raise ConfigError(f"{path}: observation times must be uniformly spaced")
    return ObservationPath(TimeGrid(t[0], dt[0], t.size - 1), x, EXTERNAL)


def write_observation_csv(path, obs):
    return write_csv(path, ["t", "x_k"], zip(obs.grid.times, obs.values))


# -- configuration -----------------------------------------------------------

_MODEL_KEYS = {"name", "drift", "u", "sigma", "dim", "init", "closure"}
_DRIFT_KEYS = {"kind", "a0", "a1_self", "a1_neighbor", "scale"}
_INIT_KEYS = {"kind", "mean", "var"}
_CLOSURE_KEYS = {"kind", "depth"}
_GRID_KEYS = {"t0", "dt", "n_steps", "T"}
_NUMERIC_KEYS = {
    "grid", "n_paths", "depth", "particles", "iterations", "mesh", "replications", "k",
    "k_grid", "u_true", "times", "x", "n_samples", "t", "pf_stride", "ess_threshold",
    "resample", "levels", "loop",
}
_MESH_KEYS = {"y_min", "y_max", "n_nodes"}
_TOP_KEYS = {"schema_version", "command", "seed", "model", "numeric", "output_dir"}
COMMANDS = ("simulate", "picard", "filter", "estimate", "analyze", "accept")


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(f'{where}.{k}' for k in extra)}")


def _num(d, key, where, kind=float, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"missing key {where}.{key}")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number, got {v!r}")
    if kind is int:
        if int(v) != v:
            raise ConfigError(f"{where}.{key}: expected an integer, got {v!r}")
        return int(v)
    return float(v)


def parse_model(d):
    """Build a ChainModel from the ``model`` section.

    ``name`` selects a built-in as the base; any other key overrides it.
    """
    _check_keys(d, _MODEL_KEYS, "model")
    if "name" in d:
        if d["name"] not in BUILTIN_MODELS:
            raise ConfigError(f"model.name: unknown model {d['name']!r}")
        base = builtin_model(d["name"])
    elif "drift" in d:
        base = ChainModel(PairwiseDrift())
    else:
        raise ConfigError("missing key model.name or model.drift")
    drift = base.drift
    if "drift" in d:
        dd = d["drift"]
        _check_keys(dd, _DRIFT_KEYS, "model.drift")
        kind = dd.get("kind", drift.kind)
        if kind not in ("zero", "linear", "tanh"):
            raise ConfigError(f"model.drift.kind: expected zero, linear or tanh, got {kind!r}")
        drift = PairwiseDrift(
            kind,
            a0=_num(dd, "a0", "model.drift", default=drift.a0),
            a1_self=_num(dd, "a1_self", "model.drift", default=drift.a1_self),
            a1_neighbor=_num(dd, "a1_neighbor", "model.drift", default=drift.a1_neighbor),
            scale=_num(dd, "scale", "model.drift", default=drift.scale),
        )
    init = base.init
    if "init" in d:
        di = d["init"]
        _check_keys(di, _INIT_KEYS, "model.init")
        kind = di.get("kind", init.kind)
        if kind not in ("dirac", "gaussian"):
            raise ConfigError(f"model.init.kind: expected dirac or gaussian, got {kind!r}")
        init = InitialLaw(
            kind, _num(di, "mean", "model.init", default=init.mean), _num(di, "var", "model.init", default=init.var)
        )
    closure = base.closure
    if "closure" in d:
        dc = d["closure"]
        _check_keys(dc, _CLOSURE_KEYS, "model.closure")
        kind = dc.get("kind", closure.kind)
        if kind not in ("mean-field", "loop"):
            raise ConfigError(f"model.closure.kind: expected mean-field or loop, got {kind!r}")
        closure = ClosureSpec(kind, _num(dc, "depth", "model.closure", int, closure.depth))
    try:
        return ChainModel(
            drift,
            u=_num(d, "u", "model", default=base.u),
            sigma=_num(d, "sigma", "model", default=base.sigma),
            dim=_num(d, "dim", "model", int, base.dim),
            init=init,
            closure=closure,
            name=d.get("name", "custom"),
        )
    except PreconditionError as e:
        raise ConfigError(f"model: {e}") from e


def parse_grid(d, where="numeric.grid"):
    _check_keys(d, _GRID_KEYS, where)
    dt = _num(d, "dt", where, required=True)
    t0 = _num(d, "t0", where, default=0.0)
    if "n_steps" in d:
        return TimeGrid(t0, dt, _num(d, "n_steps", where, int))
    if "T" in d:
        try:
            return TimeGrid.over(_num(d, "T", where), dt, t0)
        except PreconditionError as e:
            raise ConfigError(f"{where}: {e}") from e
    raise ConfigError(f"missing key {where}.n_steps (or {where}.T)")


def validate_config(cfg, command=None):
    """Check a parsed config mapping; returns it with defaults filled in."""
    _check_keys(cfg, _TOP_KEYS, "config")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    cmd = command or cfg.get("command")
    if cmd not in COMMANDS:
        raise ConfigError(f"command: expected one of {', '.join(COMMANDS)}, got {cmd!r}")
    if "seed" not in cfg:
        raise ConfigError("missing key seed (a seed is mandatory)")
    seed = cfg["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed: expected an unsigned 64-bit integer, got {seed!r}")
    numeric = cfg.get("numeric", {})
    _check_keys(numeric, _NUMERIC_KEYS, "numeric")
    if "mesh" in numeric:
        _check_keys(numeric["mesh"], _MESH_KEYS, "numeric.mesh")
    if cmd != "accept":
        if "model" not in cfg:
            raise ConfigError("missing key model")
        parse_model(cfg["model"])
        if "grid" not in numeric:
            raise ConfigError("missing key numeric.grid")
        parse_grid(numeric["grid"])
    out = dict(cfg)
    out["command"] = cmd
    out["numeric"] = numeric
    return out


def read_config(path):
    """Parse a YAML config into a mapping without validating it."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def load_config(path, command=None):
    return validate_config(read_config(path), command)
