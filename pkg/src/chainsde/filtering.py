"""Filtering the hidden neighbour ``X_{k+1}`` from an observed particle ``X_k``.

Three independent routes to the same conditional law:

* :func:`particle_filter` - Girsanov-weighted particles (Kallianpur-Striebel),
* :func:`spde_solve` - finite differences for the conditional-density SPDE,
* :func:`kalman_bucy` - exact conditionally Gaussian filter (linear drift only).

All three assume unit volatility and a known law flow ``mu``.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import rng
from .errors import (
    BoundaryLeak,
    CFLViolation,
    PreconditionError,
    SigmaError,
    UnsupportedDrift,
    WeightCollapse,
)
from .laws import LawFlow
from .measure import DensityCurve, Mesh, chain_drift_matrix
from .model import DIRAC, LINEAR, ZERO, TimeGrid, eval_mixture_drift, mean_field_term, require_scalar
from .simulate import _check_stability, simulate_chain

log = logging.getLogger(__name__)

SIMULATED_P = "simulated-p"
SIMULATED_PTILDE = "simulated-ptilde"
EXTERNAL = "external"


@dataclass(frozen=True, eq=False)
class ObservationPath:
    grid: TimeGrid
    values: np.ndarray
    provenance: str = EXTERNAL
    hidden: Optional[np.ndarray] = None  # true X_{k+1} when simulated
    upstream: Optional[np.ndarray] = None  # X_1..X_{k-1} as [k-1, step]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != self.grid.n_steps + 1:
            raise PreconditionError("observation length does not match its grid")
        if not np.all(np.isfinite(v)):
            raise PreconditionError("observation contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def increments(self):
        return np.diff(self.values)

    def coarsen(self, factor):
        g = self.grid.coarsen(factor)
        sl = slice(None, None, factor)
        return ObservationPath(
            g,
            self.values[sl],
            self.provenance,
            None if self.hidden is None else self.hidden[sl],
            None if self.upstream is None else self.upstream[:, sl],
        )


def bump(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - y[inside] ** 2))
    return out


TEST_FUNCTIONS = {"y": lambda y: y, "y2": lambda y: y * y, "bump": bump}


@dataclass(eq=False)
class FilterReport:
    method: str
    grid: TimeGrid
    mean: np.ndarray
    var: np.ndarray
    functionals: dict
    mass: Optional[np.ndarray] = None
    ess: Optional[np.ndarray] = None
    stderr: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def final_mean(self):
        return float(self.mean[-1])

    @property
    def final_var(self):
        return float(self.var[-1])

    def summary(self):
        out = {"method": self.method, "final_mean": self.final_mean, "final_var": self.final_var}
        out["mass_drift"] = None if self.mass is None else float(self.mass[-1] - 1.0)
        return out


def _require_unit_sigma(model):
    if model.sigma != 1.0:
        raise SigmaError(f"filtering assumes sigma = 1, got {model.sigma}")
    require_scalar(model)


def _law_for(model, law, grid):
    if law is None:
        from .simulate import default_law

        law = default_law(model, grid)
    return law, law.covers(grid)


# -- observations --------------------------------------------------------------


def simulate_observations(model, grid, law, n, seed, depth=2, k=1):
    """``n`` observation paths of level ``k`` from a depth-``depth`` chain.

    Each carries the hidden level ``k+1`` (when ``depth > k``) and the
    upstream levels ``1..k-1``.
    """
    if depth <= k:
        raise PreconditionError("depth must exceed the observed level")
    ens = simulate_chain(model, depth, law, grid, n, seed)
    v = ens.values[..., 0]  # [path, level, step]
    out = []
    for p in range(n):
        up = v[p, : k - 1] if k > 1 else None
        out.append(ObservationPath(grid, v[p, k - 1], SIMULATED_P, v[p, k], up))
    return out


def reference_observations(model, grid, n, seed):
    """Observation paths that are Brownian motions (the reference measure)."""
    out = []
    for p in range(n):
        g = rng.stream(seed, p, rng.OBSERVATION)
        x0 = model.init.transform(g.standard_normal(1))[0]
        w = np.concatenate([[0.0], np.cumsum(g.standard_normal(grid.n_steps) * np.sqrt(grid.dt))])
        out.append(ObservationPath(grid, x0 + w, SIMULATED_PTILDE))
    return out


# -- particle filter -----------------------------------------------------------


def _systematic(weights, u0):
    n = weights.size
    c = np.cumsum(weights)
    c[-1] = 1.0
    return np.searchsorted(c, (u0 + np.arange(n)) / n)


class _SlotNoise:
    """Per-(slot, level) streams read in time blocks."""

    def __init__(self, seed, n, depth, block):
        self.gens = [[rng.stream(seed, i, lv, rng.FILTER) for lv in range(1, depth + 1)] for i in range(n)]
        self.block = block
        self.buf = None
        self.start = 0

    def __call__(self, m):
        if self.buf is None or m >= self.start + self.block:
            self.start = m
            self.buf = np.stack(
                [np.stack([g.standard_normal(self.block) for g in row]) for row in self.gens]
            )
        return self.buf[:, :, m - self.start]


def particle_filter(
    model,
    obs,
    n_particles,
    depth=1,
    resample="systematic",
    ess_threshold=0.5,
    seed=0,
    law=None,
    upstream=None,
):
    """Weighted-particle approximation of ``pi_t`` and ``rho_t(1)``.

    Particles carry the hidden chain ``(X_{k+1}, ..., X_{k+depth})`` with a
    mean-field closure at the top. Log-weights grow by
    ``b_i dX_k - b_i^2 dt / 2`` with ``b_i`` the observed particle's drift
    evaluated at particle ``i``. ``upstream`` (``[k-1, step]`` observed
    paths ``X_1..X_{k-1}``) adds their likelihood terms, which do not depend
    on the particle.
    """
    _require_unit_sigma(model)
    if depth < 1:
        raise PreconditionError("depth must be at least 1")
    if resample not in ("systematic", "none"):
        raise PreconditionError(f"unknown resampling scheme {resample!r}")
    grid = obs.grid
    _check_stability(model, grid)
    law, off = _law_for(model, law, grid)
    n = int(n_particles)
    dt = grid.dt
    g0 = rng.stream(seed, 0, rng.FILTER_RESAMPLE)
    y = model.init.transform(rng.stream(seed, rng.FILTER, 0).standard_normal((n, depth)))
    noise = _SlotNoise(seed, n, depth, min(grid.n_steps, max(1, 4_000_000 // (n * depth))))
    logw = np.full(n, -np.log(n))
    log_mass = 0.0
    S = grid.n_steps + 1
    names = list(TEST_FUNCTIONS)
    mean, var, mass, ess_t, se = (np.empty(S) for _ in range(5))
    fun = {k: np.empty(S) for k in names}
    n_resample = 0

    def record(m, w):
        mu = w @ y[:, 0]
        mean[m] = mu
        var[m] = max(w @ (y[:, 0] - mu) ** 2, 0.0)
        for k in names:
            fun[k][m] = w @ TEST_FUNCTIONS[k](y[:, 0])

    w = np.exp(logw)
    record(0, w)
    mass[0] = 1.0
    ess_t[0] = n
    se[0] = np.sqrt(var[0] / n)
    dx = obs.increments
    x = obs.values
    for m in range(grid.n_steps):
        t = grid.time(m)
        snap = law.snapshot(off + m)
        b = eval_mixture_drift(model, t, np.full((n, 1), x[m]), y[:, :1], snap)[:, 0]
        inc = b * dx[m] - 0.5 * b * b * dt
        if upstream is not None:
            for i in range(upstream.shape[0]):
                xi = upstream[i, m]
                nbv = upstream[i + 1, m] if i + 1 < upstream.shape[0] else x[m]
                bi = eval_mixture_drift(model, t, np.array([xi]), np.array([nbv]), snap)[0]
                inc = inc + (bi * (upstream[i, m + 1] - xi) - 0.5 * bi * bi * dt)
        lw = logw + inc
        lz = logsumexp(lw)
        log_mass += lz
        logw = lw - lz
        # propagate the hidden chain (left-point drifts)
        drift = np.empty_like(y)
        if depth > 1:
            drift[:, :-1] = eval_mixture_drift(model, t, y[:, :-1, None], y[:, 1:, None], snap)[..., 0]
        drift[:, -1] = eval_mixture_drift(model, t, y[:, -1:], None, snap)[:, 0]
        y = y + drift * dt + np.sqrt(dt) * noise(m)
        w = np.exp(logw)
        ess = 1.0 / np.sum(w * w)
        record(m + 1, w)
        mass[m + 1] = np.exp(log_mass)
        ess_t[m + 1] = ess
        se[m + 1] = np.sqrt(var[m + 1] / ess)
        if n > 2 and ess < 2.0:
            raise WeightCollapse(f"effective sample size {ess:.3g} < 2 at t={grid.time(m + 1):.4g}")
        if resample == "systematic" and ess < ess_threshold * n:
            idx = _systematic(w, g0.random())
            y = y[idx]
            logw = np.full(n, -np.log(n))
            n_resample += 1
    return FilterReport(
        "particle", grid, mean, var, fun, mass=mass, ess=ess_t, stderr=se,
        extra={"n_particles": n, "depth": depth, "resamples": n_resample},
    )


# -- conditional-density SPDE --------------------------------------------------


def _initial_density(model, mesh):
    y = mesh.nodes
    if model.init.kind == DIRAC or model.init.variance == 0.0:
        var = (2.0 * mesh.dy) ** 2
    else:
        var = model.init.variance
    p = np.exp(-0.5 * (y - model.init.mean) ** 2 / var)
    return p / np.trapezoid(p, dx=mesh.dy)


BOUNDARY_TOL = 1e-8


def spde_solve(model, obs, mesh, law=None, save_every=None, boundary_tol=BOUNDARY_TOL):
    """Finite-difference solver for the conditional density of the neighbour.

    Each step splits into a multiplicative gain
    ``p <- p * exp(a (dX_k - pi(b) dt) - a^2 dt / 2)``, ``a = b(y) - pi(b)``,
    followed by renormalisation, and an explicit Fokker-Planck step with
    drift ``bc(t, y) = integral bt(t, y, z) mu_t(dz)`` (depth-1 closure).
    """
    _require_unit_sigma(model)
    if model.drift.kind not in (ZERO, LINEAR, "tanh"):
        raise UnsupportedDrift("spde_solve supports zero, linear and tanh drifts")
    grid = obs.grid
    dy = mesh.dy
    if grid.dt > 0.4 * dy * dy:
        raise CFLViolation(f"dt={grid.dt:g} exceeds 0.4 * dy^2 = {0.4 * dy * dy:g}")
    law, off = _law_for(model, law, grid)
    y = mesh.nodes
    col = y[:, None]
    p = _initial_density(model, mesh)
    S = grid.n_steps + 1
    names = list(TEST_FUNCTIONS)
    mean, var = np.empty(S), np.empty(S)
    fun = {k: np.empty(S) for k in names}
    phis = {k: TEST_FUNCTIONS[k](y) for k in names}
    curves = []
    negatives = 0

    def record(m):
        mu = np.trapezoid(p * y, dx=dy)
        mean[m] = mu
        var[m] = max(np.trapezoid(p * (y - mu) ** 2, dx=dy), 0.0)
        for k in names:
            fun[k][m] = np.trapezoid(p * phis[k], dx=dy)
        if save_every and m % save_every == 0:
            curves.append((grid.time(m), DensityCurve(mesh, p.copy(), 0)))

    record(0)
    dt = grid.dt
    dx = obs.increments
    x = obs.values
    for m in range(grid.n_steps):
        t = grid.time(m)
        snap = law.snapshot(off + m)
        # gain
        b = eval_mixture_drift(model, t, np.full_like(col, x[m]), col, snap)[:, 0]
        pib = np.trapezoid(p * b, dx=dy)
        a = b - pib
        p = p * np.exp(a * (dx[m] - pib * dt) - 0.5 * a * a * dt)
        p /= np.trapezoid(p, dx=dy)
        # Fokker-Planck
        bc = mean_field_term(model, t, col, snap)[:, 0]
        flux = p * bc
        new = p.copy()
        new[1:-1] += dt * (
            -(flux[2:] - flux[:-2]) / (2 * dy) + 0.5 * (p[2:] - 2 * p[1:-1] + p[:-2]) / (dy * dy)
        )
        new[0] = new[-1] = 0.0
        neg = new < 0
        if neg.any():
            negatives += int(neg.sum())
            new[neg] = 0.0
        p = new / np.trapezoid(new, dx=dy)
        edge = max(p[:3].max(), p[-3:].max())
        if edge > boundary_tol:
            raise BoundaryLeak(f"density {edge:.3g} at the mesh boundary at t={grid.time(m + 1):.4g}")
        record(m + 1)
    if negatives:
        log.info("spde_solve clamped %d negative density values", negatives)
    if save_every and grid.n_steps % save_every:
        curves.append((grid.T, DensityCurve(mesh, p.copy(), 0)))
    return FilterReport(
        "spde", grid, mean, var, fun,
        extra={"curves": curves, "final_density": DensityCurve(mesh, p, 0), "negatives": negatives},
    )


# -- Kalman-Bucy ---------------------------------------------------------------


def kalman_bucy(model, obs, depth=1, law=None):
    """Exact filter for the linear truncated chain.

    Signal ``Y = (X_{k+1}, ..., X_{k+depth})`` with the chain drift matrix,
    observation ``dX_k = (H Y + a0 + a1_self X_k + (1-u) a1_neighbor m_t) dt + dB``
    with ``H = (u a1_neighbor, 0, ..., 0)``. The Riccati equation is
    integrated by RK4, the mean by left-point Euler in the innovation.
    """
    _require_unit_sigma(model)
    d = model.drift
    if d.kind not in (LINEAR, ZERO):
        raise UnsupportedDrift(f"kalman_bucy needs a linear drift, got {d.kind}")
    a0, a1s, a1n = (d.a0, d.a1_self, d.a1_neighbor) if d.kind == LINEAR else (0.0, 0.0, 0.0)
    grid = obs.grid
    law, off = _law_for(model, law, grid)
    A = chain_drift_matrix(model, depth) if d.kind == LINEAR else np.zeros((depth, depth))
    H = np.zeros(depth)
    H[0] = model.u * a1n
    w = np.full(depth, (1.0 - model.u) * a1n)
    w[-1] = a1n
    Q = np.eye(depth)
    hh = np.outer(H, H)

    def riccati(P):
        return A @ P + P @ A.T + Q - P @ hh @ P

    S = grid.n_steps + 1
    means = np.empty((S, depth))
    covs = np.empty((S, depth, depth))
    innov = np.empty(grid.n_steps)
    means[0] = model.init.mean
    covs[0] = model.init.variance * np.eye(depth)
    m_law = law.mean_path()[:, 0]
    dt = grid.dt
    x = obs.values
    dx = obs.increments
    for m in range(grid.n_steps):
        mt = m_law[off + m]
        mu, P = means[m], covs[m]
        h0 = a0 + a1s * x[m] + (1.0 - model.u) * a1n * mt
        nu = dx[m] - (H @ mu + h0) * dt
        innov[m] = nu
        means[m + 1] = mu + (A @ mu + a0 + w * mt) * dt + P @ H * nu
        k1 = riccati(P)
        k2 = riccati(P + 0.5 * dt * k1)
        k3 = riccati(P + 0.5 * dt * k2)
        k4 = riccati(P + dt * k3)
        P1 = P + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        covs[m + 1] = 0.5 * (P1 + P1.T)
    mean = means[:, 0]
    var = covs[:, 0, 0]
    fun = {"y": mean.copy(), "y2": var + mean**2, "bump": _gauss_bump(mean, var)}
    return FilterReport(
        "kalman", grid, mean, var, fun,
        extra={"means": means, "covs": covs, "innovations": innov},
    )


_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(64)
_GH_W = _GH_W / _GH_W.sum()


def _gauss_bump(mean, var):
    pts = mean[:, None] + np.sqrt(np.maximum(var, 0.0))[:, None] * _GH_X
    return bump(pts) @ _GH_W


def standardized_innovations(report):
    nu = report.extra["innovations"]
    return nu / np.sqrt(report.grid.dt)


def lag1_autocorrelation(z):
    z = np.asarray(z, float) - np.mean(z)
    return float(np.sum(z[1:] * z[:-1]) / np.sum(z * z))


# -- cross validation ----------------------------------------------------------


@dataclass
class CrossValidation:
    rows: list  # per-step dicts
    summary: dict
    reports: list  # per replication (pf, pf_kalman, spde, kalman)


def cross_validate(
    model,
    seed,
    *,
    grid=None,
    n_obs=20,
    n_particles=10_000,
    pf_stride=10,
    mesh=None,
    law=None,
    depth=1,
):
    """Run the particle, SPDE and Kalman filters on shared observations.

    Observations of ``X_k`` come from the depth-``depth + 1`` truncated
    chain on the fine ``grid``; the SPDE and its Kalman reference use the
    fine grid, the particle filter and its Kalman reference use every
    ``pf_stride``-th observation.
    """
    d = model.drift
    if d.kind not in (LINEAR, ZERO):
        raise UnsupportedDrift("cross_validate needs a linear model")
    grid = grid or TimeGrid.over(1.0, 1e-4)
    mesh = mesh or Mesh.span(-7.0, 7.0, 512)
    if law is None:
        from .simulate import default_law

        law = default_law(model, grid)
    coarse_law = LawFlow.gaussian(
        grid.coarsen(pf_stride), law.mean[::pf_stride], law.cov[::pf_stride]
    ) if law.kind == "gaussian" else None
    observations = simulate_observations(model, grid, law, n_obs, seed, depth=depth + 1)
    reps = []
    for r, obs in enumerate(observations):
        kb = kalman_bucy(model, obs, depth, law)
        sp = spde_solve(model, obs, mesh, law)
        co = obs.coarsen(pf_stride)
        kbc = kalman_bucy(model, co, depth, coarse_law)
        pf = particle_filter(model, co, n_particles, depth, seed=rng.child_seed(seed, r), law=coarse_law)
        reps.append((pf, kbc, sp, kb))
    coarse = observations[0].coarsen(pf_stride).grid
    pf_m = np.array([r[0].mean for r in reps])
    pf_v = np.array([r[0].var for r in reps])
    kbc_m = np.array([r[1].mean for r in reps])
    kbc_v = np.array([r[1].var for r in reps])
    pf_se = np.array([r[0].stderr for r in reps])
    sp_m = np.array([r[2].mean[::pf_stride] for r in reps])
    sp_v = np.array([r[2].var[::pf_stride] for r in reps])
    kb_m = np.array([r[3].mean[::pf_stride] for r in reps])
    kb_v = np.array([r[3].var[::pf_stride] for r in reps])

    def rms(a, axis=0):
        return np.sqrt(np.mean(np.square(a), axis=axis))

    rows = []
    for m, t in enumerate(coarse.times):
        rows.append(
            {
                "t": t,
                "rms_mean_pf_kalman": rms(pf_m[:, m] - kbc_m[:, m]),
                "rms_mean_spde_kalman": rms(sp_m[:, m] - kb_m[:, m]),
                "rms_mean_pf_spde": rms(pf_m[:, m] - sp_m[:, m]),
                "rms_var_pf_kalman": rms(pf_v[:, m] - kbc_v[:, m]),
                "rms_var_spde_kalman": rms(sp_v[:, m] - kb_v[:, m]),
                "pf_stderr": rms(pf_se[:, m]),
            }
        )
    full_sp = np.array([r[2].mean for r in reps])
    full_kb = np.array([r[3].mean for r in reps])
    summary = {
        "n_obs": n_obs,
        "rms_mean_pf_kalman": float(rms((pf_m - kbc_m).ravel())),
        "pf_stderr": float(rms(pf_se.ravel())),
        "rms_mean_spde_kalman": float(rms((full_sp - full_kb).ravel())),
        "rms_var_spde_kalman": float(rms((np.array([r[2].var for r in reps]) - np.array([r[3].var for r in reps])).ravel())),
        "rms_var_pf_kalman": float(rms((pf_v - kbc_v).ravel())),
    }
    return CrossValidation(rows, summary, reps)
