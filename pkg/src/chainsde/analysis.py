"""Numerical checks of density smoothness scaling and of the Markov random
field structure along the chain."""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import PreconditionError, SingularConditioning, TooFewSamples, UnsupportedDrift
from .measure import Mesh, gaussian_chain_oracle, kde_curves, partial_correlation_from_cov
from .model import DIRAC, InitialLaw, LINEAR, TANH, ZERO, TimeGrid, require_scalar
from .simulate import default_law, simulate_chain


@dataclass(eq=False)
class ScalingReport:
    """``rows`` holds ``(t, beta, sup_z |d^beta p(t, x, z)| * t^((1 + beta) / 2))``."""

    model: str
    x: float
    n_samples: int
    times: list
    rows: list
    tail_fits: dict = field(default_factory=dict)

    def value(self, t, beta):
        for tt, b, v in self.rows:
            if b == beta and abs(tt - t) < 1e-12:
                return v
        raise KeyError((t, beta))

    def spread(self, beta):
        """max / min of the scaled suprema over time for one order."""
        v = [r[2] for r in self.rows if r[1] == beta]
        return max(v) / min(v)


def gaussian_tail_fit(curve, center, scale, t, band=(2.0, 3.0)):
    """Least-squares fit of ``log p(z)`` against ``-(z - x)^2 / t`` on the band
    ``band[0] * scale <= |z - x| <= band[1] * scale``; returns slope and R^2."""
    z = curve.y
    r = np.abs(z - center)
    sel = (r >= band[0] * scale) & (r <= band[1] * scale) & (curve.values > 0)
    if sel.sum() < 5:
        raise TooFewSamples("too few mesh nodes in the tail band")
    xs = -((z[sel] - center) ** 2) / t
    ys = np.log(curve.values[sel])
    fit = stats.linregress(xs, ys)
    return {"slope": float(fit.slope), "r2": float(fit.rvalue**2), "n_nodes": int(sel.sum())}


def density_scaling_report(
    model,
    x,
    times,
    n_samples,
    seed,
    *,
    dt=1e-3,
    depth=2,
    orders=(0, 1, 2),
    mesh_nodes=601,
    bandwidth="normal-reference",
    law=None,
    tail_fit_times=(),
):
    """Scaled suprema ``sup_z |d^beta p(t, x, z)| t^((1+beta)/2)`` from KDE.

    One ensemble started at the Dirac mass ``x`` is simulated up to the
    largest time and sampled at every requested time.
    """
    require_scalar(model)
    if model.drift.kind not in (ZERO, TANH):
        raise UnsupportedDrift("density scaling needs a bounded drift (zero or tanh)")
    times = sorted(float(t) for t in times)
    m = model.with_(init=InitialLaw(DIRAC, float(x)))
    grid = TimeGrid.over(times[-1], dt)
    law = law if law is not None else default_law(m, grid, seed)
    ens = simulate_chain(m, depth, law, grid, n_samples, seed, levels=(1,))
    rows = []
    tails = {}
    for t in times:
        s = ens.at(1, t)[:, 0]
        sd = np.std(s, ddof=1)
        mesh = Mesh.span(x - 6.0 * np.sqrt(t), x + 6.0 * np.sqrt(t), mesh_nodes)
        curves = kde_curves(s, mesh, bandwidth, orders)
        for b in orders:
            rows.append((t, b, float(np.max(np.abs(curves[b].values)) * t ** ((1 + b) / 2))))
        if any(abs(t - tf) < 1e-12 for tf in tail_fit_times) and 0 in curves:
            tails[t] = gaussian_tail_fit(curves[0], x, sd, t)
    return ScalingReport(model.name, float(x), int(n_samples), times, rows, tails)


@dataclass(frozen=True)
class MrfReport:
    t: float
    i: int
    j: int
    given: int
    n: int
    partial_correlation: float
    ci_low: float
    ci_high: float
    confidence: float
    oracle: float = float("nan")

    @property
    def oracle_in_ci(self):
        return self.ci_low <= self.oracle <= self.ci_high


def sample_partial_correlation(xi, xj, xk):
    """Correlation of the residuals of ``xi`` and ``xj`` regressed on ``xk``."""
    xk = np.asarray(xk, float)
    if np.var(xk) < 1e-12:
        raise SingularConditioning("conditioning variable has (near) zero variance")
    design = np.column_stack([np.ones_like(xk), xk])
    ri = xi - design @ np.linalg.lstsq(design, xi, rcond=None)[0]
    rj = xj - design @ np.linalg.lstsq(design, xj, rcond=None)[0]
    return float(np.sum(ri * rj) / np.sqrt(np.sum(ri * ri) * np.sum(rj * rj)))


def mrf_partial_correlation(ensemble, t, triplet=(1, 2, 3), model=None, confidence=0.99):
    """Partial correlation of levels ``(i, j)`` given ``mid`` at time ``t`` with a
    Fisher-z interval; for linear models also the exact value from the
    Gaussian oracle covariance."""
    i, mid, j = triplet
    if ensemble.depth < 3:
        raise PreconditionError("the MRF check needs a chain of depth >= 3")
    xi = ensemble.at(i, t)[:, 0]
    xm = ensemble.at(mid, t)[:, 0]
    xj = ensemble.at(j, t)[:, 0]
    n = xi.size
    r = sample_partial_correlation(xi, xj, xm)
    zc = stats.norm.ppf(0.5 + confidence / 2)
    half = zc / np.sqrt(n - 1 - 3)
    z = np.arctanh(np.clip(r, -0.999999999, 0.999999999))
    oracle = float("nan")
    if model is not None and model.drift.kind in (LINEAR, ZERO):
        o = gaussian_chain_oracle(model, ensemble.depth, ensemble.grid)
        cov = o.at(t)[1]
        oracle = partial_correlation_from_cov(cov, i - 1, j - 1, [mid - 1])
    return MrfReport(float(t), i, j, mid, n, r, float(np.tanh(z - half)), float(np.tanh(z + half)), confidence, oracle)


def joint_histogram_max_mass(ensemble, t, levels=(1, 2), bins=64, width=4.0):
    """Largest cell mass of the 2-D histogram of two levels on the
    ``width``-sigma box around their means."""
    a = ensemble.at(levels[0], t)[:, 0]
    b = ensemble.at(levels[1], t)[:, 0]
    ra = (a.mean() - width * a.std(), a.mean() + width * a.std())
    rb = (b.mean() - width * b.std(), b.mean() + width * b.std())
    h, _, _ = np.histogram2d(a, b, bins=bins, range=[ra, rb])
    return float(h.max() / a.size)
