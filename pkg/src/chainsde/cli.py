"""Command-line runner: ``chainsde <command> --config run.yaml --out dir``."""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ChainSDEError, ConfigError
from .io import (
    read_config,
    validate_config,
    parse_grid,
    parse_model,
    read_observation_csv,
    write_csv,
    write_dict_rows,
    write_ensemble_cache,
    write_ensemble_csv,
    write_observation_csv,
)

log = logging.getLogger("chainsde")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
METHODS = ("particle", "spde", "kalman")


def _setup_logging():
    name = os.environ.get("CHAINSDE_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"CHAINSDE_LOG: expected one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _opt(numeric, key, default, kind=None):
    v = numeric.get(key, default)
    if kind is not None and v is not None:
        try:
            v = kind(v) if not isinstance(v, list) else [kind(x) for x in v]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"numeric.{key}: {e}") from e
    return v


class Run:
    """Shared state of one invocation: parsed config, output dir, artifacts."""

    def __init__(self, cfg, out, threads):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = threads
        self.seed = cfg["seed"]
        self.numeric = cfg.get("numeric", {})
        self.artifacts = []
        if cfg["command"] != "accept":
            self.model = parse_model(cfg["model"])
            self.grid = parse_grid(self.numeric["grid"])

    def path(self, name):
        p = self.out / name
        self.artifacts.append(name)
        return p

    def num(self, key, default, kind=None):
        return _opt(self.numeric, key, default, kind)

    def law(self):
        from .simulate import default_law

        return default_law(self.model, self.grid, self.seed)


def cmd_simulate(run, args):
    from .simulate import simulate_chain, simulate_loop

    depth = run.num("depth", 2, int)
    n_paths = run.num("n_paths", 100, int)
    levels = run.num("levels", None, int)
    law = run.law()
    if run.num("loop", False, bool) or run.model.closure.kind == "loop":
        ens = simulate_loop(run.model, depth, run.grid, law, run.seed, n_paths=n_paths, levels=levels, workers=run.threads)
    else:
        ens = simulate_chain(run.model, depth, law, run.grid, n_paths, run.seed, levels=levels, workers=run.threads)
    write_ensemble_csv(run.path("ensemble.csv"), ens)
    write_ensemble_cache(run.path("ensemble.dcse"), ens)


def cmd_picard(run, args):
    from .simulate import picard_iterate

    res = picard_iterate(run.model, run.grid, run.num("particles", 1000, int), run.num("iterations", 5, int), run.seed)
    write_dict_rows(run.path("picard_distances.csv"), [{"j": j, "distance": d} for j, d in enumerate(res.distances)])
    p = res.flows[-1].particles[..., 0]
    write_csv(run.path("picard_law.csv"), ["t", "mean", "var"], zip(run.grid.times, p.mean(axis=0), p.var(axis=0)))


def _report_rows(rep):
    cols = {"t": rep.grid.times, "mean": rep.mean, "var": rep.var}
    for name, attr in (("mass", rep.mass), ("ess", rep.ess), ("stderr", rep.stderr)):
        if attr is not None:
            cols[name] = attr
    for name, v in rep.functionals.items():
        cols[f"E_{name}"] = v
    header = list(cols)
    return header, zip(*(np.asarray(cols[h]) for h in header))


def cmd_filter(run, args):
    from .filtering import kalman_bucy, particle_filter, simulate_observations, spde_solve
    from .measure import Mesh

    depth = run.num("depth", 1, int)
    law = run.law()
    if args.obs == "simulate":
        obs = simulate_observations(run.model, run.grid, law, 1, run.seed, depth=depth + 1)[0]
        write_observation_csv(run.path("observations.csv"), obs)
    else:
        obs = read_observation_csv(args.obs)
        if abs(obs.grid.dt - run.grid.dt) > 1e-12 * run.grid.dt:
            raise ConfigError(f"numeric.grid.dt={run.grid.dt} does not match the observation spacing {obs.grid.dt}")
    methods = METHODS if args.method == "all" else (args.method,)
    mesh_cfg = run.num("mesh", {})
    for method in methods:
        if method == "particle":
            rep = particle_filter(
                run.model,
                obs,
                run.num("particles", 1000, int),
                depth,
                resample=run.num("resample", "systematic", str),
                ess_threshold=run.num("ess_threshold", 0.5, float),
                seed=run.seed,
                law=law,
            )
        elif method == "spde":
            mesh = Mesh.span(
                float(mesh_cfg.get("y_min", -7.0)), float(mesh_cfg.get("y_max", 7.0)), int(mesh_cfg.get("n_nodes", 512))
            )
            rep = spde_solve(run.model, obs, mesh, law)
        else:
            rep = kalman_bucy(run.model, obs, depth, law)
        header, rows = _report_rows(rep)
        write_csv(run.path(f"filter_{method}.csv"), header, rows)
        summary = rep.summary()
        run.path(f"filter_{method}.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_estimate(run, args):
    from .estimate import clt_summary, replicate_mle

    k = args.k if args.k is not None else run.num("k", 10, int)
    reps = args.reps if args.reps is not None else run.num("replications", 10, int)
    if k < 2 or reps < 1:
        raise ConfigError("estimate needs k >= 2 and reps >= 1")
    u_true = run.num("u_true", run.model.u, float)
    u_hat, s2 = replicate_mle(run.model, u_true, k, run.grid, reps, run.seed)
    z = np.sqrt(np.mean(s2)) * (u_hat - u_true)
    write_csv(
        run.path("estimate.csv"),
        ["replication", "u_hat", "sigma_k2", "standardized"],
        zip(range(reps), u_hat, s2, z),
    )
    if reps >= 2:
        s = clt_summary(u_hat, s2, u_true)
        write_dict_rows(run.path("estimate_summary.csv"), [{"k": k, "u_true": u_true, **{a: b for a, b in s.items() if np.isscalar(b)}}])


def cmd_analyze(run, args):
    from .analysis import density_scaling_report, joint_histogram_max_mass, mrf_partial_correlation
    from .simulate import simulate_chain

    if args.report == "scaling":
        times = run.num("times", [0.1, 0.25, 0.5, 1.0], float)
        rep = density_scaling_report(
            run.model, run.num("x", 0.0, float), times, run.num("n_samples", 10_000, int), run.seed, dt=run.grid.dt
        )
        write_csv(run.path("scaling.csv"), ["t", "beta", "scaled_sup"], rep.rows)
        return
    depth = run.num("depth", 5 if args.report == "mrf" else 2, int)
    ens = simulate_chain(run.model, depth, run.law(), run.grid, run.num("n_paths", 10_000, int), run.seed, workers=run.threads)
    t = run.num("t", run.grid.T, float)
    if args.report == "mrf":
        rep = mrf_partial_correlation(ens, t, (1, 2, 3), run.model)
        write_dict_rows(run.path("mrf.csv"), [rep.__dict__])
    else:
        levels = tuple(run.num("levels", [1, 2], int))
        write_dict_rows(
            run.path("joint.csv"),
            [{"t": t, "level_a": levels[0], "level_b": levels[1], "max_cell_mass": joint_histogram_max_mass(ens, t, levels)}],
        )


def cmd_accept(run, args):
    from .acceptance import run_all

    results = run_all(run.out)
    run.artifacts.extend(["acceptance.csv", "acceptance.json"])
    if not all(r.passed for r in results):
        return 1
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "picard": cmd_picard,
    "filter": cmd_filter,
    "estimate": cmd_estimate,
    "analyze": cmd_analyze,
    "accept": cmd_accept,
}


def build_parser():
    p = argparse.ArgumentParser(prog="chainsde", description="Directed chain mean-field SDE toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="u64 seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    sub.add_parser("simulate", parents=[common], help="simulate a truncated chain")
    sub.add_parser("picard", parents=[common], help="Picard iteration on the law")
    f = sub.add_parser("filter", parents=[common], help="filter a hidden neighbour")
    f.add_argument("--obs", default="simulate", help="observation CSV (t, x_k) or 'simulate'")
    f.add_argument("--method", choices=METHODS + ("all",), default="all")
    e = sub.add_parser("estimate", parents=[common], help="replicated MLE of u")
    e.add_argument("--k", type=int)
    e.add_argument("--reps", type=int)
    a = sub.add_parser("analyze", parents=[common], help="density scaling / MRF / joint reports")
    a.add_argument("--report", choices=("scaling", "mrf", "joint"), required=True)
    sub.add_parser("accept", parents=[common], help="run the acceptance suite")
    return p


def _config(args):
    if args.config is None:
        if args.command != "accept":
            raise ConfigError("--config is required")
        cfg = {"schema_version": 1, "command": "accept", "seed": 0}
    else:
        cfg = read_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return validate_config(cfg, args.command)


def main(argv=None):
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        _setup_logging()
        cfg = _config(args)
        out = args.out or cfg.get("output_dir")
        if not out:
            raise ConfigError("missing key output_dir (or pass --out)")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        run = Run(cfg, out, args.threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        status = COMMANDS[args.command](run, args) or 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ChainSDEError as e:
        print(f"{args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        status = 1
    manifest = {
        "toolkit": "chainsde",
        "version": __version__,
        "command": args.command,
        "config": cfg,
        "exit_status": status,
        "wall_time_s": time.perf_counter() - t0,
        "artifacts": run.artifacts,
    }
    (run.out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
