"""Distances between laws, kernel density estimates and the Gaussian chain oracle."""

from dataclasses import dataclass
from math import factorial, pi, sqrt
from typing import Optional

import numpy as np

from .errors import (
    BandwidthError,
    DimensionError,
    GridMismatch,
    PairingError,
    PreconditionError,
    TooFewSamples,
    UnsupportedDrift,
)
from .laws import LawFlow
from .model import LINEAR, MEAN_FIELD, ZERO, TimeGrid


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    samples: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] < 1:
            raise PreconditionError("an empirical measure needs at least one sample")
        object.__setattr__(self, "samples", s)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (s.shape[0],) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise PreconditionError("weights must be nonnegative, one per sample, summing to 1")
            object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return self.samples.shape[1]

    @property
    def size(self):
        return self.samples.shape[0]


def _as_measure(a):
    return a if isinstance(a, EmpiricalMeasure) else EmpiricalMeasure(np.asarray(a, dtype=float))


def _quantile_pieces(m):
    x = m.samples[:, 0]
    order = np.argsort(x, kind="stable")
    w = np.full(x.size, 1.0 / x.size) if m.weights is None else m.weights
    return x[order], np.cumsum(w[order])


def w2_1d(a, b):
    """Exact 2-Wasserstein distance between scalar empirical measures.

    Uses the quantile (monotone) coupling; for equal-size unweighted
    inputs this is the root mean square difference of sorted samples.
    """
    a, b = _as_measure(a), _as_measure(b)
    if a.dim != 1 or b.dim != 1:
        raise DimensionError("w2_1d only handles scalar measures")
    if a.weights is None and b.weights is None and a.size == b.size:
        d = np.sort(a.samples[:, 0]) - np.sort(b.samples[:, 0])
        return float(np.sqrt(np.mean(d * d)))
    xa, ca = _quantile_pieces(a)
    xb, cb = _quantile_pieces(b)
    cuts = np.unique(np.concatenate([[0.0], ca, cb]))
    cuts = cuts[cuts <= 1.0]
    cuts[-1] = 1.0
    mids = 0.5 * (cuts[1:] + cuts[:-1])
    qa = xa[np.minimum(np.searchsorted(ca, mids), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mids), xb.size - 1)]
    return float(np.sqrt(np.sum(np.diff(cuts) * (qa - qb) ** 2)))


def _paths_and_grid(x, grid):
    if hasattr(x, "grid") and hasattr(x, "values"):
        return x.level_paths(1), x.grid
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr, grid


def path_metric_Dt(a, b, t, grid=None, level=1):
    """Synchronous-coupling upper bound on the truncated path-space metric.

    ``sqrt(mean_p min(sup_{s<=t} |a_p(s) - b_p(s)|^2, 1))`` with paths
    paired by index. ``a``/``b`` are path arrays ``[path, step(, N)]`` on
    ``grid`` or ``ChainEnsemble`` objects (``level`` selects the slice).
    """
    if hasattr(a, "level_paths"):
        pa, ga = a.level_paths(level), a.grid
    else:
        pa, ga = _paths_and_grid(a, grid)
    if hasattr(b, "level_paths"):
        pb, gb = b.level_paths(level), b.grid
    else:
        pb, gb = _paths_and_grid(b, grid)
    if ga is None or gb is None:
        raise GridMismatch("path_metric_Dt needs the time grid")
    if ga != gb or pa.shape[1:] != pb.shape[1:]:
        raise GridMismatch("path ensembles live on different grids")
    if pa.shape[0] != pb.shape[0]:
        raise PairingError(f"cannot pair {pa.shape[0]} paths with {pb.shape[0]}")
    k = ga.index(t)
    diff = pa[:, : k + 1, :] - pb[:, : k + 1, :]
    sup2 = np.max(np.sum(diff * diff, axis=-1), axis=1)
    return float(np.sqrt(np.mean(np.minimum(sup2, 1.0))))


# -- kernel density estimation -----------------------------------------------

MIN_SAMPLES = {0: 100, 1: 100, 2: 1000}


@dataclass(frozen=True)
class Mesh:
    y_min: float
    dy: float
    n_nodes: int

    @classmethod
    def span(cls, y_min, y_max, n_nodes):
        return cls(float(y_min), (y_max - y_min) / (n_nodes - 1), int(n_nodes))

    @property
    def nodes(self):
        return self.y_min + self.dy * np.arange(self.n_nodes)

    @property
    def y_max(self):
        return self.y_min + self.dy * (self.n_nodes - 1)


@dataclass(frozen=True, eq=False)
class DensityCurve:
    mesh: Mesh
    values: np.ndarray
    order: int = 0

    @property
    def y(self):
        return self.mesh.nodes

    def integral(self):
        return float(np.trapezoid(self.values, dx=self.mesh.dy))

    def moment(self, k):
        return float(np.trapezoid(self.values * self.y**k, dx=self.mesh.dy) / self.integral())

    def at(self, y):
        return float(np.interp(y, self.y, self.values))


def _r_gauss_deriv(s):
    # integral of (phi^{(s)})^2 for the standard normal density
    return factorial(2 * s) / (2 ** (2 * s + 1) * factorial(s) * sqrt(pi))


def silverman_bandwidth(x):
    x = np.asarray(x, dtype=float).ravel()
    return 1.06 * np.std(x, ddof=1) * x.size ** (-0.2)


def normal_reference_bandwidth(x, order=0):
    """AMISE-optimal bandwidth for the ``order``-th density derivative under a
    normal reference; order 0 reproduces Silverman's ``1.06 * s * n^(-1/5)``
    up to the rounding of 1.06."""
    x = np.asarray(x, dtype=float).ravel()
    if order == 0:
        return silverman_bandwidth(x)
    r = order
    c = (2 * r + 1) * _r_gauss_deriv(r) / _r_gauss_deriv(r + 2)
    return np.std(x, ddof=1) * (c / x.size) ** (1.0 / (2 * r + 5))


def _bandwidth(x, bandwidth, order):
    if bandwidth == "silverman":
        h = silverman_bandwidth(x)
    elif bandwidth == "normal-reference":
        h = normal_reference_bandwidth(x, order)
    else:
        h = float(bandwidth)
    if not h > 0 or not np.isfinite(h):
        raise BandwidthError(f"bandwidth must be positive, got {h}")
    return h


def kde_curves(samples, mesh, bandwidth="silverman", orders=(0,), chunk=2_000_000):
    """Gaussian-kernel estimates of the density and its derivatives.

    The order-k curve is ``n^-1 h^-(k+1) sum_i K^(k)((y - X_i) / h)``.
    A string bandwidth is resolved per order.
    """
    x = np.asarray(samples.samples if isinstance(samples, EmpiricalMeasure) else samples, float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise DimensionError("kde only handles scalar samples")
        x = x[:, 0]
    for k in orders:
        if k not in MIN_SAMPLES:
            raise PreconditionError(f"derivative order must be 0, 1 or 2, got {k}")
        if x.size < MIN_SAMPLES[k]:
            raise TooFewSamples(f"order {k} needs at least {MIN_SAMPLES[k]} samples, got {x.size}")
    y = mesh.nodes
    hs = {k: _bandwidth(x, bandwidth, k) for k in orders}
    out = {}
    for h in sorted(set(hs.values())):
        ks = [k for k in orders if hs[k] == h]
        acc = {k: np.zeros(y.size) for k in ks}
        step = max(1, chunk // y.size)
        for i in range(0, x.size, step):
            z = (y[:, None] - x[None, i : i + step]) / h
            phi = np.exp(-0.5 * z * z)
            for k in ks:
                if k == 0:
                    acc[k] += phi.sum(axis=1)
                elif k == 1:
                    acc[k] -= (z * phi).sum(axis=1)
                else:
                    acc[k] += ((z * z - 1.0) * phi).sum(axis=1)
        for k in ks:
            vals = acc[k] / (x.size * h ** (k + 1) * sqrt(2 * pi))
            out[k] = DensityCurve(mesh, vals, k)
    return out


def kde(samples, mesh, bandwidth="silverman", order=0):
    return kde_curves(samples, mesh, bandwidth, (order,))[order]


# -- Gaussian chain oracle ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianLawFlow:
    """Exact law of the depth-``d`` truncated linear chain.

    ``mean[step, level]``, ``cov[step, level, level]``; ``law_mean[step]``
    is the mean of the common marginal law driving the mean-field term.
    """

    grid: TimeGrid
    mean: np.ndarray
    cov: np.ndarray
    law_mean: np.ndarray

    @property
    def depth(self):
        return self.mean.shape[1]

    def level_flow(self, level=1):
        i = level - 1
        return LawFlow.gaussian(self.grid, self.mean[:, i], self.cov[:, i, i])

    def at(self, t):
        k = self.grid.index(t)
        return self.mean[k], self.cov[k]


def chain_drift_matrix(model, depth):
    """Drift matrix of the linear truncated chain: ``a1_self`` on the diagonal,
    ``u * a1_neighbor`` on the superdiagonal, closed at the top."""
    d = model.drift
    a = np.diag(np.full(depth, d.a1_self))
    a += np.diag(np.full(depth - 1, model.u * d.a1_neighbor), 1)
    return a


def _linear_coeffs(model):
    d = model.drift
    if d.kind == ZERO:
        return 0.0, 0.0, 0.0
    if d.kind != LINEAR:
        raise UnsupportedDrift(f"the Gaussian oracle needs a linear drift, got {d.kind}")
    return d.a0, d.a1_self, d.a1_neighbor


def law_mean_path(model, grid):
    """Mean of the common law: ``m' = a0 + (a1_self + a1_neighbor) m`` by RK4."""
    a0, a1s, a1n = _linear_coeffs(model)
    k = a1s + a1n
    m = np.empty(grid.n_steps + 1)
    m[0] = model.init.mean
    h = grid.dt
    for i in range(grid.n_steps):
        f = lambda v: a0 + k * v  # noqa: E731
        k1 = f(m[i])
        k2 = f(m[i] + 0.5 * h * k1)
        k3 = f(m[i] + 0.5 * h * k2)
        k4 = f(m[i] + h * k3)
        m[i + 1] = m[i] + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return m


def gaussian_chain_oracle(model, depth, grid):
    """Mean and covariance of ``(X_1, ..., X_d)`` for a linear chain with
    mean-field closure, by RK4 on the mean and Lyapunov ODEs."""
    a0, a1s, a1n = _linear_coeffs(model)
    if model.closure.kind != MEAN_FIELD:
        raise PreconditionError("the Gaussian oracle assumes the mean-field closure")
    if model.dim != 1:
        raise DimensionError("the Gaussian oracle is scalar per level")
    if depth < 1:
        raise PreconditionError("depth must be at least 1")
    A = chain_drift_matrix(model, depth) if model.drift.kind == LINEAR else np.zeros((depth, depth))
    # affine coefficient: c = a0 + w * m(t)
    w = np.full(depth, (1.0 - model.u) * a1n)
    w[-1] = a1n
    q = model.sigma**2 * np.eye(depth)
    kappa = a1s + a1n
    h = grid.dt
    n = grid.n_steps + 1
    mean = np.empty((n, depth))
    cov = np.empty((n, depth, depth))
    lm = np.empty(n)
    mean[0] = model.init.mean
    cov[0] = model.init.variance * np.eye(depth)
    lm[0] = model.init.mean

    def f(m, mu, s):
        return a0 + kappa * m, A @ mu + a0 + w * m, A @ s + s @ A.T + q

    for i in range(n - 1):
        m, mu, s = lm[i], mean[i], cov[i]
        k1 = f(m, mu, s)
        k2 = f(m + 0.5 * h * k1[0], mu + 0.5 * h * k1[1], s + 0.5 * h * k1[2])
        k3 = f(m + 0.5 * h * k2[0], mu + 0.5 * h * k2[1], s + 0.5 * h * k2[2])
        k4 = f(m + h * k3[0], mu + h * k3[1], s + h * k3[2])
        lm[i + 1] = m + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        mean[i + 1] = mu + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        s1 = s + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        cov[i + 1] = 0.5 * (s1 + s1.T)
    return GaussianLawFlow(grid, mean, cov, lm)


def partial_correlation_from_cov(cov, i, j, given):
    """Partial correlation of variables ``i`` and ``j`` given the set ``given``."""
    idx = [i, j] + list(given)
    sub = np.asarray(cov)[np.ix_(idx, idx)]
    prec = np.linalg.inv(sub)
    return float(-prec[0, 1] / np.sqrt(prec[0, 0] * prec[1, 1]))
