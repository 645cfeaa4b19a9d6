"""Euler-Maruyama simulation of truncated chains and loops, Picard iteration
on laws, the flow-property check and the pathwise sensitivity flow."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import DegenerateLaw, PreconditionError, UnstableStep
from .laws import EMPIRICAL, LawFlow
from .measure import gaussian_chain_oracle, path_metric_Dt
from .model import (
    FROZEN_LAW,
    LINEAR,
    LOOP,
    ZERO,
    ClosureSpec,
    TimeGrid,
    eval_mixture_drift,
    mixture_jacobian,
)

log = logging.getLogger(__name__)

BLOWUP = 1e8
# noise elements generated per chunk of paths
CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True, eq=False)
class ChainEnsemble:
    """Monte-Carlo paths ``values[path, level, step, component]``.

    ``levels`` lists the (1-based) chain levels actually stored; by default
    every level ``1..depth``.
    """

    grid: TimeGrid
    depth: int
    values: np.ndarray
    seed: int
    closure_used: ClosureSpec
    levels: tuple = ()
    first_path: int = 0

    def __post_init__(self):
        if not self.levels:
            object.__setattr__(self, "levels", tuple(range(1, self.depth + 1)))

    @property
    def n_paths(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[-1]

    def level_paths(self, level):
        """Paths of one level, shape ``[path, step, N]``."""
        try:
            i = self.levels.index(level)
        except ValueError:
            raise PreconditionError(f"level {level} was not stored (stored: {self.levels})") from None
        return self.values[:, i]

    def at(self, level, t):
        """Values of ``level`` at time ``t``, shape ``[path, N]``."""
        return self.level_paths(level)[:, self.grid.index(t)]

    def marginal_flow(self, level=1):
        return LawFlow.empirical(self.grid, self.level_paths(level))


@dataclass(frozen=True, eq=False)
class SensitivityEnsemble:
    grid: TimeGrid
    n_paths: int
    jacobians: np.ndarray  # [path, step, N, N]
    paths: np.ndarray  # level-1 paths [path, step, N]

    def at(self, t):
        return self.jacobians[:, self.grid.index(t)]


@dataclass(frozen=True, eq=False)
class PicardResult:
    flows: list
    distances: np.ndarray
    metric: str = field(default="synchronous-coupling upper bound of D_T")


# -- noise -------------------------------------------------------------------


def draw_noise(seed, tag, paths, levels, n_steps, dim, with_init=True):
    """Standard normals from the per-(path, level) streams.

    Returns ``(init[P, L, N], noise[P, L, n_steps, N])``; ``init`` is None
    when ``with_init`` is false.
    """
    paths = list(paths)
    levels = list(levels)
    init = np.empty((len(paths), len(levels), dim)) if with_init else None
    noise = np.empty((len(paths), len(levels), n_steps, dim))
    for a, p in enumerate(paths):
        for b, lv in enumerate(levels):
            g = rng.stream(seed, p, lv, tag)
            if with_init:
                init[a, b] = g.standard_normal(dim)
            noise[a, b] = g.standard_normal((n_steps, dim))
    return init, noise


def _check_stability(model, grid):
    if grid.dt * model.lipschitz >= 0.5:
        raise PreconditionError(
            f"dt * Lipschitz = {grid.dt * model.lipschitz:.3g} violates the stability guard (< 0.5)"
        )


# -- core integrator ---------------------------------------------------------


def _integrate(model, grid, law, x0, noise, *, topology="chain", frozen=None, keep=None, on_step=None):
    """Euler-Maruyama for one block of paths.

    ``x0[P, L, N]`` start values, ``noise[P, L, n_steps, N]`` standard
    normals. Level ``l`` uses level ``l+1`` as neighbour; the top level uses
    ``frozen[P, step, N]`` if given and the mean-field closure otherwise.
    ``topology="loop"`` wires the top level to level 1 instead.
    Returns the stored trajectories ``[P, len(keep), n_steps + 1, N]``.
    """
    offset = law.covers(grid)
    n_paths, n_levels, dim = x0.shape
    keep = list(range(n_levels)) if keep is None else list(keep)
    out = np.empty((n_paths, len(keep), grid.n_steps + 1, dim))
    x = np.array(x0, dtype=float)
    out[:, :, 0] = x[:, keep]
    sdt = model.sigma * np.sqrt(grid.dt)
    drift = np.empty_like(x)
    for m in range(grid.n_steps):
        t = grid.time(m)
        snap = law.snapshot(offset + m)
        if on_step is not None:
            on_step(m, t, x, snap)
        if topology == "loop":
            drift[:] = eval_mixture_drift(model, t, x, np.roll(x, -1, axis=1), snap)
        else:
            if n_levels > 1:
                drift[:, :-1] = eval_mixture_drift(model, t, x[:, :-1], x[:, 1:], snap)
            top = None if frozen is None else frozen[:, m]
            drift[:, -1] = eval_mixture_drift(model, t, x[:, -1], top, snap)
        x += drift * grid.dt + sdt * noise[:, :, m]
        if np.max(np.abs(x)) > BLOWUP:
            raise UnstableStep(f"|X| exceeded {BLOWUP:g} at t={grid.time(m + 1):.6g}; reduce dt")
        out[:, :, m + 1] = x[:, keep]
    return out


def _chunks(n_paths, per_path, chunk_size=None):
    size = chunk_size or max(1, CHUNK_ELEMENTS // max(1, per_path))
    return [(a, min(n_paths, a + size)) for a in range(0, n_paths, size)]


def _run_chunks(fn, chunks, workers):
    if workers and workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, chunks))
    return [fn(c) for c in chunks]


def default_law(model, grid, seed=0, n_particles=2000, n_iters=5):
    """A law flow consistent with ``model`` on ``grid``.

    Zero and linear drifts get the exact Gaussian marginal of the mean-field
    particle (only its mean enters a linear drift); other drifts get the
    last Picard iterate on an empirical cloud.
    """
    if model.drift.kind == ZERO:
        var = model.init.variance + model.sigma**2 * (grid.times - grid.t0)
        mean = np.full(grid.n_steps + 1, model.init.mean)
        cov = var[:, None, None] * np.eye(model.dim)
        return LawFlow.gaussian(grid, np.repeat(mean[:, None], model.dim, axis=1), cov)
    if model.drift.kind == LINEAR and model.dim == 1:
        return gaussian_chain_oracle(model.with_(closure=ClosureSpec()), 1, grid).level_flow(1)
    return picard_iterate(model, grid, n_particles, n_iters, seed).flows[-1]


def simulate_chain(
    model,
    depth,
    law,
    grid,
    n_paths,
    seed,
    *,
    closure=None,
    levels=None,
    first_path=0,
    x0_level1=None,
    chunk_size=None,
    workers=1,
):
    """Simulate ``n_paths`` independent depth-``depth`` truncated chains.

    Level ``i`` is driven by level ``i+1``; the top level uses the model's
    closure (mean-field, or neighbour paths drawn from a frozen empirical
    law). Path ``p`` level ``l`` draws its initial value and noise from the
    stream ``(seed, first_path + p, l)``, so any split of the paths into
    calls or chunks reproduces the same numbers.
    """
    if depth < 1:
        raise PreconditionError("depth must be at least 1")
    if n_paths < 1:
        raise PreconditionError("n_paths must be positive")
    closure = closure or model.closure
    if closure.kind == LOOP:
        raise PreconditionError("use simulate_loop for the loop closure")
    _check_stability(model, grid)
    if law is None:
        law = default_law(model, grid, seed)
    law.covers(grid)
    frozen_src = None
    if closure.kind == FROZEN_LAW:
        frozen_src = closure.law
        if frozen_src.kind != EMPIRICAL:
            raise PreconditionError("frozen-law closure needs an empirical flow of paths")
        f_off = frozen_src.covers(grid)
    keep = list(range(depth)) if levels is None else [lv - 1 for lv in levels]
    if any(not 0 <= k < depth for k in keep):
        raise PreconditionError(f"levels must lie in 1..{depth}")
    dim = model.dim

    def run(chunk):
        a, b = chunk
        paths = range(first_path + a, first_path + b)
        z0, noise = draw_noise(seed, rng.CHAIN, paths, range(1, depth + 1), grid.n_steps, dim)
        x0 = model.init.transform(z0)
        if x0_level1 is not None:
            x0[:, 0] = x0_level1
        frozen = None
        if frozen_src is not None:
            idx = np.asarray(paths) % frozen_src.n_particles
            frozen = frozen_src.particles[idx, f_off : f_off + grid.n_steps + 1]
        return _integrate(model, grid, law, x0, noise, frozen=frozen, keep=keep)

    chunks = _chunks(n_paths, depth * grid.n_steps * dim, chunk_size)
    values = np.concatenate(_run_chunks(run, chunks, workers), axis=0)
    return ChainEnsemble(
        grid, depth, values, seed, closure, tuple(k + 1 for k in keep), first_path
    )


def simulate_loop(model, n, grid, law, seed, *, n_paths=1, levels=None, chunk_size=None, workers=1):
    """Simulate ``n_paths`` loops of ``n`` particles; particle ``i`` is driven
    by particle ``i+1 mod n``. Loops are stored as paths with depth ``n``."""
    if n < 2:
        raise PreconditionError(f"a loop needs at least 2 particles, got {n}")
    _check_stability(model, grid)
    if law is None:
        law = default_law(model, grid, seed)
    law.covers(grid)
    keep = list(range(n)) if levels is None else [lv - 1 for lv in levels]
    dim = model.dim

    def run(chunk):
        a, b = chunk
        z0, noise = draw_noise(seed, rng.CHAIN, range(a, b), range(1, n + 1), grid.n_steps, dim)
        return _integrate(model, grid, law, model.init.transform(z0), noise, topology="loop", keep=keep)

    chunks = _chunks(n_paths, n * grid.n_steps * dim, chunk_size)
    values = np.concatenate(_run_chunks(run, chunks, workers), axis=0)
    return ChainEnsemble(grid, n, values, seed, ClosureSpec(LOOP, n), tuple(k + 1 for k in keep))


# -- Picard iteration on laws ------------------------------------------------


def _single_cycle(n, g):
    """Neighbour map forming one cycle through all ``n`` particles."""
    order = g.permutation(n)
    nb = np.empty(n, dtype=np.int64)
    nb[order] = np.roll(order, -1)
    return nb


def picard_iterate(model, grid, n_particles, n_iters, seed):
    """Iterate ``m -> Law(X^m)`` starting from the initial law held constant.

    Laws are clouds of ``n_particles`` paths. In every iteration particle
    ``p`` keeps its initial value and Brownian increments and is driven by
    path ``nb[p]`` of the previous cloud, where ``nb`` is a fixed single
    cycle; the mean-field term integrates against the previous cloud.
    Returns the flows ``m^0, ..., m^n_iters`` and the distances
    ``D_T(m^{j+1}, m^j)`` under this synchronous coupling.
    """
    if n_iters < 2:
        raise PreconditionError("picard_iterate needs n_iters >= 2")
    if n_particles < 2:
        raise PreconditionError("picard_iterate needs at least 2 particles")
    _check_stability(model, grid)
    z0, noise = draw_noise(seed, rng.PICARD_NOISE, range(n_particles), [1], grid.n_steps, model.dim)
    x0 = model.init.transform(z0)
    nb = _single_cycle(n_particles, rng.stream(seed, rng.PICARD_PERM))
    cloud = np.repeat(x0[:, 0][:, None, :], grid.n_steps + 1, axis=1)
    flows = [LawFlow.empirical(grid, cloud)]
    distances = []
    for j in range(n_iters):
        law = flows[-1]
        paths = _integrate(model, grid, law, x0, noise, frozen=law.particles[nb])[:, 0]
        final = paths[:, -1]
        if np.unique(final, axis=0).shape[0] < 2:
            raise DegenerateLaw(f"Picard iterate {j + 1} collapsed to a single particle")
        flows.append(LawFlow.empirical(grid, paths))
        distances.append(path_metric_Dt(paths, law.particles, grid.T, grid))
        log.debug("picard iteration %d: D_T = %.6g", j + 1, distances[-1])
    return PicardResult(flows, np.asarray(distances))


# -- flow property -----------------------------------------------------------


def _moments(v):
    v = np.asarray(v, float).ravel()
    mean = v.mean()
    c = v - mean
    var = np.mean(c * c)
    m4 = np.mean(c**4)
    return mean, var, m4


def flow_check(model, law, t, s, r, x, n_paths, seed, depth=2):
    """Compare ``X_r`` reached directly from ``(t, x)`` with ``X_r`` reached by
    stopping at ``s`` and restarting the chain from its state there.

    Both routes share initial values and noise on ``[t, s]``; the restart
    draws fresh noise on ``[s, r]``. Returns first two moments of level 1
    at ``r`` and their standardized differences.
    """
    if not t < s < r:
        raise PreconditionError(f"flow_check needs t < s < r, got {t}, {s}, {r}")
    _check_stability(model, law.grid)
    full = law.grid.sub(t, r)
    head = law.grid.sub(s, r)
    split = full.index(s)
    dim = model.dim
    z0, noise = draw_noise(seed, rng.CHAIN, range(n_paths), range(1, depth + 1), full.n_steps, dim)
    x0 = model.init.transform(z0)
    x0[:, 0] = x
    direct = _integrate(model, full, law, x0, noise)
    _, fresh = draw_noise(seed, rng.RESTART, range(n_paths), range(1, depth + 1), head.n_steps, dim, False)
    restart = _integrate(model, head, law, direct[:, :, split], fresh)
    md, vd, m4d = _moments(direct[:, 0, -1])
    mr, vr, m4r = _moments(restart[:, 0, -1])
    n = n_paths
    se_mean = np.sqrt(vd / n + vr / n)
    se_var = np.sqrt(max(m4d - vd * vd, 0.0) / n + max(m4r - vr * vr, 0.0) / n)
    return {
        "t": t,
        "s": s,
        "r": r,
        "n_paths": n,
        "mean_direct": md,
        "var_direct": vd,
        "mean_restart": mr,
        "var_restart": vr,
        "stderr_mean": se_mean,
        "stderr_var": se_var,
        "z_mean": (md - mr) / se_mean if se_mean > 0 else 0.0,
        "z_var": (vd - vr) / se_var if se_var > 0 else 0.0,
    }


# -- pathwise sensitivity ----------------------------------------------------


def pathwise_sensitivity(model, law, x, grid, n_paths, seed, depth=2):
    """Jacobian ``d X_t / d x`` of level 1 started at ``x``.

    Discrete tangent of the Euler scheme:
    ``J_{m+1} = J_m + d_x b(t_m, X_m, X~_m, mu_m) J_m dt`` with ``J_0 = I``.
    """
    if model.drift.kind == "custom" and model.drift.jac_x is None:
        from .errors import MissingDerivative

        raise MissingDerivative("custom drift needs jac_x for pathwise sensitivity")
    _check_stability(model, grid)
    law.covers(grid)
    dim = model.dim
    z0, noise = draw_noise(seed, rng.CHAIN, range(n_paths), range(1, depth + 1), grid.n_steps, dim)
    x0 = model.init.transform(z0)
    x0[:, 0] = x
    jac = np.empty((n_paths, grid.n_steps + 1, dim, dim))
    jac[:, 0] = np.eye(dim)
    componentwise = model.drift.componentwise

    def on_step(m, t, state, snap):
        nb = state[:, 1] if depth > 1 else None
        d = mixture_jacobian(model, t, state[:, 0], nb, snap)
        j = jac[:, m]
        step = d[:, :, None] * j if componentwise else d @ j
        jac[:, m + 1] = j + step * grid.dt

    paths = _integrate(model, grid, law, x0, noise, keep=[0], on_step=on_step)[:, 0]
    if not np.all(np.isfinite(jac)):
        raise UnstableStep("sensitivity flow diverged")
    return SensitivityEnsemble(grid, n_paths, jac, paths)


def level1_from(model, law, x, grid, n_paths, seed, depth=2):
    """Level-1 paths started at ``x`` with the same streams as
    :func:`pathwise_sensitivity` (finite-difference companion)."""
    dim = model.dim
    z0, noise = draw_noise(seed, rng.CHAIN, range(n_paths), range(1, depth + 1), grid.n_steps, dim)
    x0 = model.init.transform(z0)
    x0[:, 0] = x
    return _integrate(model, grid, law, x0, noise, keep=[0])[:, 0]


def sup_second_moment(ensemble, level=1):
    """Sample ``E[sup_{s<=T} |X_s|^2]`` for one level."""
    p = ensemble.level_paths(level)
    return float(np.mean(np.max(np.sum(p * p, axis=-1), axis=1)))
