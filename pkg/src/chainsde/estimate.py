"""Maximum-likelihood estimation of the dependence weight ``u``.

Uses the ``k``-observation form: only the adjacent pairs ``(X_i, X_{i+1})``,
``i = 1..k-1``, enter, with left-point sums on the simulation grid::

    bbar_i(s) = bt(s, X_i, X_{i+1}) - integral bt(s, X_i, y) mu_s(dy)
    u_hat = sum_i sum_m bbar_{i,m} (dX_{i,m} - M_{i,m} dt) / sum_i sum_m bbar_{i,m}^2 dt

where ``M`` is the mean-field term. The denominator is the realized
information ``sigma_k^2``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from . import rng
from .errors import DegenerateSample, GridMismatch, NonIdentifiable, PreconditionError, SigmaError
from .measure import gaussian_chain_oracle
from .model import LINEAR, TimeGrid, mean_field_term, require_scalar
from .simulate import default_law, simulate_chain


@dataclass(frozen=True, eq=False)
class MleInput:
    paths: np.ndarray  # [k, step]
    grid: TimeGrid
    model: object
    law: object

    def __post_init__(self):
        p = np.asarray(self.paths, dtype=float)
        if p.ndim == 3:
            p = p[..., 0]
        if p.ndim != 2 or p.shape[0] < 2:
            raise PreconditionError("MLE needs k >= 2 observed adjacent paths")
        if p.shape[1] != self.grid.n_steps + 1:
            raise GridMismatch("paths do not match the grid")
        if self.model.sigma != 1.0:
            raise SigmaError("the u-MLE assumes unit volatility")
        require_scalar(self.model)
        object.__setattr__(self, "paths", p)

    @property
    def k(self):
        return self.paths.shape[0]

    @classmethod
    def from_ensemble(cls, ensemble, model, law, path=0, k=None):
        k = k or len(ensemble.levels)
        v = np.stack([ensemble.level_paths(lv)[path, :, 0] for lv in ensemble.levels[:k]])
        return cls(v, ensemble.grid, model, law)


@dataclass(frozen=True)
class MleResult:
    u_hat: float
    sigma_k2: float
    numerator: float
    k: int
    T: float
    dt: float
    standardized: Optional[float] = None
    self_normalized: Optional[float] = None


def _law_offset(law, grid):
    return law.covers(grid)


def bbar_path(path_i, path_next, model, law, grid):
    """``bbar(s) = bt(s, X_i, X_{i+1}) - integral bt(s, X_i, y) mu_s(dy)`` on the grid."""
    xi = np.asarray(path_i, float).ravel()
    xn = np.asarray(path_next, float).ravel()
    if xi.shape != xn.shape or xi.size != grid.n_steps + 1:
        raise GridMismatch("paths are not aligned with the grid")
    off = _law_offset(law, grid)
    out = np.empty(xi.size)
    for m, t in enumerate(grid.times):
        snap = law.snapshot(off + m)
        x = xi[m : m + 1, None]
        out[m] = model.drift(t, x, xn[m : m + 1, None])[0, 0] - mean_field_term(model, t, x, snap)[0, 0]
    return out


def _bbar_and_meanfield(paths, model, law, grid):
    """Vectorised ``bbar[i, m]`` and mean-field term ``M[i, m]`` for ``i < k``."""
    off = _law_offset(law, grid)
    xs = paths[:-1, :, None]  # [k-1, S, 1]
    xn = paths[1:, :, None]
    d = model.drift
    if d.kind == LINEAR:
        mean = law.mean_path()[off : off + grid.n_steps + 1, 0]
        mf = d.a0 + d.a1_self * xs[..., 0] + d.a1_neighbor * mean[None, :]
        bb = d.a1_neighbor * (xn[..., 0] - mean[None, :])
        return bb, mf
    mf = np.empty(xs.shape[:2])
    for m, t in enumerate(grid.times):
        mf[:, m] = mean_field_term(model, t, xs[:, m], law.snapshot(off + m))[:, 0]
    bt = np.stack([d(t, xs[:, m], xn[:, m])[:, 0] for m, t in enumerate(grid.times)], axis=1)
    return bt - mf, mf


def _sums(inp):
    bb, mf = _bbar_and_meanfield(inp.paths, inp.model, inp.law, inp.grid)
    dt = inp.grid.dt
    dx = np.diff(inp.paths[:-1], axis=1)
    num = float(np.sum(bb[:, :-1] * (dx - mf[:, :-1] * dt)))
    den = float(np.sum(bb[:, :-1] ** 2) * dt)
    return num, den, bb, mf


def mle_u(inp, u_true=None, sigma_bar2=None):
    """Closed-form maximiser of the discretised conditional log-likelihood.

    ``standardized`` is ``sqrt(sigma_bar2) * (u_hat - u_true)`` when both
    are supplied; ``self_normalized`` uses the realized ``sigma_k``.
    """
    num, den, _, _ = _sums(inp)
    if not den > 0:
        raise NonIdentifiable("sigma_k^2 = 0: the drift does not depend on the neighbour")
    u_hat = num / den
    std = selfn = None
    if u_true is not None:
        selfn = float(np.sqrt(den) * (u_hat - u_true))
        if sigma_bar2 is not None:
            std = float(np.sqrt(sigma_bar2) * (u_hat - u_true))
    g = inp.grid
    return MleResult(u_hat, den, num, inp.k, g.T, g.dt, std, selfn)


def log_likelihood(inp, u):
    """Discretised ``sum_i int b_u dX_i - 1/2 int b_u^2 ds`` over ``i < k``, with
    ``b_u = M + u * bbar``."""
    _, _, bb, mf = _sums(inp)
    b = (mf + u * bb)[:, :-1]
    dx = np.diff(inp.paths[:-1], axis=1)
    return float(np.sum(b * dx) - 0.5 * np.sum(b * b) * inp.grid.dt)


def expected_information(model, k, grid):
    """``sigma_bar_k^2 = E[sigma_k^2]`` for a linear model from the Gaussian oracle
    (left-point sum on the grid, matching the estimator)."""
    d = model.drift
    if d.kind != LINEAR:
        raise PreconditionError("expected_information needs a linear model")
    o = gaussian_chain_oracle(model, k, grid)
    lm = o.law_mean[:, None]
    # E[bbar_i^2] = a1n^2 * (Var X_{i+1} + (E X_{i+1} - m)^2), i = 1..k-1
    var = np.einsum("sii->si", o.cov)[:, 1:]
    e2 = d.a1_neighbor**2 * (var + (o.mean[:, 1:] - lm) ** 2)
    return float(np.sum(e2[:-1]) * grid.dt)


# -- replicated experiments --------------------------------------------------


def replicate_mle(model, u_true, k, grid, replications, seed, law=None, chunk=None):
    """``u_hat`` and ``sigma_k^2`` from independent depth-``k`` chains.

    Replication ``r`` is path ``r`` of one ensemble, so each replication
    owns its streams and results do not depend on chunking.
    """
    m = model.with_(u=u_true)
    law = law if law is not None else default_law(m, grid, seed)
    chunk = chunk or max(1, 4_000_000 // (k * grid.n_steps))
    u_hat = np.empty(replications)
    s2 = np.empty(replications)
    for a in range(0, replications, chunk):
        b = min(replications, a + chunk)
        ens = simulate_chain(m, k, law, grid, b - a, seed, first_path=a)
        for j in range(b - a):
            res = mle_u(MleInput(ens.values[j, :, :, 0], grid, m, law))
            u_hat[a + j] = res.u_hat
            s2[a + j] = res.sigma_k2
    return u_hat, s2


def clt_summary(u_hat, sigma_k2, u_true):
    """Standardized sample ``sqrt(mean sigma_k^2) (u_hat - u)`` and its diagnostics."""
    u_hat = np.asarray(u_hat, float)
    sigma_k2 = np.asarray(sigma_k2, float)
    sigma_bar2 = float(np.mean(sigma_k2))
    z = np.sqrt(sigma_bar2) * (u_hat - u_true)
    if np.ptp(z) == 0.0:
        raise DegenerateSample("standardized sample has zero variance")
    zs = np.sqrt(sigma_k2) * (u_hat - u_true)
    ks = stats.kstest(z, "norm")
    return {
        "replications": int(u_hat.size),
        "sigma_bar2": sigma_bar2,
        "standardized": z,
        "self_normalized": zs,
        "mean": float(np.mean(z)),
        "variance": float(np.var(z, ddof=1)),
        "ks_distance": float(ks.statistic),
        "ks_pvalue": float(ks.pvalue),
        "self_normalized_mean": float(np.mean(zs)),
        "self_normalized_variance": float(np.var(zs, ddof=1)),
        "self_normalized_ks": float(stats.kstest(zs, "norm").statistic),
    }


def clt_diagnostic(model, u_true, k, T, replications, seed, dt=1e-3, law=None):
    """Replicated check of ``sigma_bar_k (u_hat - u) -> N(0, 1)``."""
    if replications < 200:
        raise PreconditionError("clt_diagnostic needs at least 200 replications")
    grid = TimeGrid.over(T, dt)
    u_hat, s2 = replicate_mle(model, u_true, k, grid, replications, seed, law)
    out = clt_summary(u_hat, s2, u_true)
    out.update({"k": k, "T": T, "u_hat": u_hat, "sigma_k2": s2})
    return out


def convergence_table(model, u_true, k_grid, replications, seed, T=1.0, dt=1e-3, law=None):
    """RMS error of ``u_hat`` against ``k`` and the fitted log-log slope."""
    k_grid = list(k_grid)
    if not k_grid:
        raise PreconditionError("k_grid is empty")
    if any(b <= a for a, b in zip(k_grid, k_grid[1:])) or k_grid[0] < 2:
        raise PreconditionError("k_grid must be increasing with k >= 2")
    grid = TimeGrid.over(T, dt)
    rows = []
    for j, k in enumerate(k_grid):
        u_hat, s2 = replicate_mle(model, u_true, k, grid, replications, rng.child_seed(seed, k), law)
        err = u_hat - u_true
        rows.append(
            {
                "k": k,
                "replications": replications,
                "rms_error": float(np.sqrt(np.mean(err * err))),
                "mean_error": float(np.mean(err)),
                "mean_sigma_k2": float(np.mean(s2)),
            }
        )
    if len(rows) > 1:
        slope = float(np.polyfit(np.log([r["k"] for r in rows]), np.log([r["rms_error"] for r in rows]), 1)[0])
    else:
        slope = float("nan")
    return rows, slope
