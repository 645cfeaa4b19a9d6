"""Directed chain model family.

A chain particle ``X_i`` moves with drift

    b(t, x, F) = u * bt(t, x, x_next) + (1 - u) * integral bt(t, x, y) mu_t(dy)

where ``bt`` is a pairwise drift, ``x_next`` the value of the neighbour
``X_{i+1}`` and ``mu_t`` the common marginal law. Diffusion is ``sigma * I``.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    DimensionError,
    MissingDerivative,
    NonFiniteDrift,
    PreconditionError,
    UnknownModel,
    UnsupportedDrift,
)

ZERO = "zero"
LINEAR = "linear"
TANH = "tanh"
CUSTOM = "custom"

MEAN_FIELD = "mean-field"
FROZEN_LAW = "frozen-law"
LOOP = "loop"

DIRAC = "dirac"
GAUSSIAN = "gaussian"

# quadrature/compression sizes for the mean-field integral
N_HERMITE = 64
N_LAW_NODES = 64

_HERMITE_NODES, _HERMITE_WEIGHTS = np.polynomial.hermite_e.hermegauss(N_HERMITE)
_HERMITE_WEIGHTS = _HERMITE_WEIGHTS / _HERMITE_WEIGHTS.sum()


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0, t0 + dt, ..., t0 + n_steps * dt``."""

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise PreconditionError(f"dt must be positive, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise PreconditionError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def over(cls, T, dt, t0=0.0):
        n = int(round((T - t0) / dt))
        if n < 1 or abs(t0 + n * dt - T) > 1e-9 * max(1.0, abs(T)):
            raise PreconditionError(f"T={T} is not a whole number of steps dt={dt} from t0={t0}")
        return cls(t0, dt, n)

    @property
    def T(self):
        return self.t0 + self.n_steps * self.dt

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def time(self, step):
        return self.t0 + step * self.dt

    def index(self, t):
        """Step index of time ``t``; raises GridMismatch if ``t`` is off-grid."""
        from .errors import GridMismatch

        k = int(round((t - self.t0) / self.dt))
        if abs(self.t0 + k * self.dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= k <= self.n_steps:
            raise GridMismatch(f"time {t} is not a point of {self}")
        return k

    def sub(self, t_start, t_end):
        """Subgrid covering ``[t_start, t_end]`` with the same spacing."""
        i, j = self.index(t_start), self.index(t_end)
        if j <= i:
            raise PreconditionError(f"empty subgrid [{t_start}, {t_end}]")
        return TimeGrid(self.time(i), self.dt, j - i)

    def coarsen(self, factor):
        if self.n_steps % factor:
            raise PreconditionError(f"n_steps={self.n_steps} not divisible by {factor}")
        return TimeGrid(self.t0, self.dt * factor, self.n_steps // factor)


@dataclass(frozen=True)
class PairwiseDrift:
    """Pairwise drift ``bt(t, x, y)`` acting componentwise on ``R^N``.

    ``func`` and ``jac_x`` are only used by ``kind == "custom"``; ``func``
    maps arrays ``(t, x[..., N], y[..., N])`` to ``[..., N]`` and ``jac_x``
    to ``[..., N, N]``.
    """

    kind: str = ZERO
    a0: float = 0.0
    a1_self: float = 0.0
    a1_neighbor: float = 0.0
    scale: float = 1.0
    func: Optional[Callable] = field(default=None, compare=False)
    jac_x: Optional[Callable] = field(default=None, compare=False)
    lipschitz_constant: Optional[float] = None

    def __post_init__(self):
        if self.kind not in (ZERO, LINEAR, TANH, CUSTOM):
            raise PreconditionError(f"unknown drift kind {self.kind!r}")
        if self.kind == CUSTOM and (self.func is None or self.lipschitz_constant is None):
            raise PreconditionError("custom drift needs func and a declared lipschitz_constant")

    @property
    def lipschitz(self):
        if self.kind == ZERO:
            return 0.0
        if self.kind == LINEAR:
            return max(abs(self.a1_self), abs(self.a1_neighbor))
        if self.kind == TANH:
            return abs(self.scale)
        return float(self.lipschitz_constant)

    def __call__(self, t, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == ZERO:
            return np.zeros(np.broadcast_shapes(x.shape, y.shape))
        if self.kind == LINEAR:
            return self.a0 + self.a1_self * x + self.a1_neighbor * y
        if self.kind == TANH:
            return self.scale * np.tanh(y - x)
        return np.asarray(self.func(t, x, y), dtype=float)

    def dx_diag(self, t, x, y):
        """Diagonal of the x-Jacobian for the componentwise built-in kinds."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast_shapes(x.shape, y.shape)
        if self.kind == ZERO:
            return np.zeros(shape)
        if self.kind == LINEAR:
            return np.full(shape, float(self.a1_self))
        if self.kind == TANH:
            th = np.tanh(y - x)
            return -self.scale * (1.0 - th * th)
        raise UnsupportedDrift("custom drifts have no diagonal Jacobian")

    def jacobian_x(self, t, x, y):
        """Full x-Jacobian, shape ``[..., N, N]``."""
        if self.kind == CUSTOM:
            if self.jac_x is None:
                raise MissingDerivative("custom drift was declared without jac_x")
            return np.asarray(self.jac_x(t, np.asarray(x, float), np.asarray(y, float)), dtype=float)
        d = self.dx_diag(t, x, y)
        return d[..., :, None] * np.eye(d.shape[-1])

    @property
    def componentwise(self):
        return self.kind != CUSTOM


@dataclass(frozen=True)
class InitialLaw:
    kind: str = DIRAC
    mean: float = 0.0
    var: float = 0.0

    def __post_init__(self):
        if self.kind not in (DIRAC, GAUSSIAN):
            raise PreconditionError(f"unknown initial law {self.kind!r}")
        if self.var < 0:
            raise PreconditionError("initial variance must be nonnegative")

    @property
    def variance(self):
        return 0.0 if self.kind == DIRAC else float(self.var)

    def transform(self, z):
        """Map standard normal draws to draws from this law."""
        if self.kind == DIRAC:
            return np.full_like(z, self.mean, dtype=float)
        return self.mean + np.sqrt(self.var) * z


@dataclass(frozen=True)
class ClosureSpec:
    """How the top of a truncated chain is closed.

    ``mean-field`` drops the neighbour term at the top level (u acts as 0
    there); ``frozen-law`` drives the top level by paths drawn from a
    supplied empirical ``LawFlow``; ``loop`` wires the last particle back to
    the first.
    """

    kind: str = MEAN_FIELD
    depth: int = 1
    law: Optional[object] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in (MEAN_FIELD, FROZEN_LAW, LOOP):
            raise PreconditionError(f"unknown closure {self.kind!r}")
        if self.kind == FROZEN_LAW and self.law is None:
            raise PreconditionError("frozen-law closure needs a LawFlow")


@dataclass(frozen=True)
class ChainModel:
    drift: PairwiseDrift
    u: float = 0.5
    sigma: float = 1.0
    dim: int = 1
    init: InitialLaw = InitialLaw()
    closure: ClosureSpec = ClosureSpec()
    name: str = "custom"

    def __post_init__(self):
        if not 0.0 <= self.u <= 1.0:
            raise PreconditionError(f"u must lie in [0, 1], got {self.u}")
        if not self.sigma > 0:
            raise PreconditionError(f"sigma must be positive, got {self.sigma}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise PreconditionError(f"dim must be a positive integer, got {self.dim}")

    @property
    def lipschitz(self):
        return self.drift.lipschitz

    def with_(self, **changes):
        return replace(self, **changes)


# -- law snapshots -----------------------------------------------------------


@dataclass(frozen=True)
class GaussianSnapshot:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def first_moment(self):
        return np.asarray(self.mean, dtype=float)


@dataclass(frozen=True)
class EmpiricalSnapshot:
    samples: np.ndarray  # (M, N)
    weights: Optional[np.ndarray] = None

    @property
    def first_moment(self):
        if self.weights is None:
            return self.samples.mean(axis=0)
        return self.weights @ self.samples

    def nodes(self, max_nodes=N_LAW_NODES):
        """Equal-weight quadrature nodes summarising the cloud.

        Scalar clouds larger than ``max_nodes`` are compressed to midpoint
        quantiles; vector clouds are subsampled with a fixed stride.
        """
        cache = self.__dict__.setdefault("_node_cache", {})
        if max_nodes not in cache:
            cache[max_nodes] = self._nodes(max_nodes)
        return cache[max_nodes]

    def _nodes(self, max_nodes):
        s = self.samples
        m = s.shape[0]
        if m <= max_nodes:
            w = np.full(m, 1.0 / m) if self.weights is None else self.weights
            return s, w
        q = (np.arange(max_nodes) + 0.5) / max_nodes
        if s.shape[1] == 1:
            order = np.argsort(s[:, 0], kind="stable")
            if self.weights is None:
                idx = order[(q * m).astype(int)]
            else:
                cw = np.cumsum(self.weights[order])
                idx = order[np.minimum(np.searchsorted(cw, q * cw[-1]), m - 1)]
            return s[idx], np.full(max_nodes, 1.0 / max_nodes)
        idx = (q * m).astype(int)
        w = np.full(max_nodes, 1.0 / max_nodes)
        if self.weights is not None:
            w = self.weights[idx] / self.weights[idx].sum()
        return s[idx], w


def _law_nodes(drift, law, dim):
    """Quadrature nodes ``(K, N)`` and weights ``(K,)`` for integrating bt against ``law``."""
    if isinstance(law, GaussianSnapshot):
        mean = np.broadcast_to(np.asarray(law.mean, float), (dim,))
        cov = np.asarray(law.cov, float).reshape(dim, dim)
        if dim == 1 or drift.componentwise:
            sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
            return mean + _HERMITE_NODES[:, None] * sd, _HERMITE_WEIGHTS
        raise UnsupportedDrift("custom vector drifts cannot be integrated against a Gaussian law")
    return law.nodes()


# large scalar batches integrate on a table and interpolate (cubic Hermite)
TABULATE_MIN = 1024
TABLE_NODES = 257


def _tabulated(d, t, x, nodes, w):
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        hi = lo + 1e-12
    grid = np.linspace(lo, hi, TABLE_NODES)
    g = d(t, grid[:, None, None], nodes[None])[..., 0] @ w
    dg = d.dx_diag(t, grid[:, None, None], nodes[None])[..., 0] @ w
    h = grid[1] - grid[0]
    xf = x.ravel()
    i = np.clip(((xf - lo) / h).astype(np.int64), 0, TABLE_NODES - 2)
    s = (xf - grid[i]) / h
    s2, s3 = s * s, s * s * s
    out = (
        (2 * s3 - 3 * s2 + 1) * g[i]
        + (s3 - 2 * s2 + s) * h * dg[i]
        + (-2 * s3 + 3 * s2) * g[i + 1]
        + (s3 - s2) * h * dg[i + 1]
    )
    return out.reshape(x.shape)


def mean_field_term(model, t, x, law):
    """``integral bt(t, x, y) law(dy)`` for ``x`` of shape ``[..., N]``."""
    d = model.drift
    x = np.asarray(x, dtype=float)
    if d.kind == ZERO:
        return np.zeros_like(x)
    if d.kind == LINEAR:
        return d.a0 + d.a1_self * x + d.a1_neighbor * law.first_moment
    nodes, w = _law_nodes(d, law, model.dim)
    if model.dim == 1 and d.componentwise and x.size >= TABULATE_MIN:
        return _tabulated(d, t, x, nodes, w)
    vals = d(t, x[..., None, :], nodes)  # [..., K, N]
    return np.einsum("...kn,k->...n", vals, w)


def mean_field_jacobian(model, t, x, law):
    """``integral d_x bt(t, x, y) law(dy)``; diagonal ``[..., N]`` for built-ins."""
    d = model.drift
    x = np.asarray(x, dtype=float)
    if d.kind in (ZERO, LINEAR):
        return d.dx_diag(t, x, x)
    nodes, w = _law_nodes(d, law, model.dim)
    if d.componentwise:
        return np.einsum("...kn,k->...n", d.dx_diag(t, x[..., None, :], nodes), w)
    return np.einsum("...kij,k->...ij", d.jacobian_x(t, x[..., None, :], nodes), w)


def _check_finite(v):
    if not np.all(np.isfinite(v)):
        raise NonFiniteDrift("drift evaluation produced NaN or inf")
    return v


def eval_mixture_drift(model, t, x, x_neighbor, law):
    """Mixture drift ``u * bt(t, x, x_nb) + (1 - u) * integral bt(t, x, y) law(dy)``.

    ``x_neighbor=None`` evaluates the mean-field closure (the neighbour term
    is replaced by the law integral).
    """
    mf = mean_field_term(model, t, x, law)
    if x_neighbor is None or model.u == 0.0:
        return _check_finite(mf)
    if model.u == 1.0:
        return _check_finite(model.drift(t, x, x_neighbor))
    return _check_finite(model.u * model.drift(t, x, x_neighbor) + (1.0 - model.u) * mf)


def mixture_jacobian(model, t, x, x_neighbor, law):
    """x-derivative of :func:`eval_mixture_drift`.

    Returns the diagonal ``[..., N]`` for componentwise drifts and the full
    ``[..., N, N]`` Jacobian for custom drifts.
    """
    mf = mean_field_jacobian(model, t, x, law)
    if x_neighbor is None or model.u == 0.0:
        return mf
    d = model.drift
    pair = d.dx_diag(t, x, x_neighbor) if d.componentwise else d.jacobian_x(t, x, x_neighbor)
    return model.u * pair + (1.0 - model.u) * mf


# -- registry ----------------------------------------------------------------


def builtin_model(name):
    """Return one of the built-in models: ``ou-chain``, ``tanh-chain``, ``zero``.

    ``ou-chain`` is the canonical linear test model: ``bt = 0.5 * (y - x)``,
    ``u = 0.5``, ``sigma = 1`` and ``N(0, 1)`` initial law.
    """
    if name == "ou-chain":
        return ChainModel(
            PairwiseDrift(LINEAR, a0=0.0, a1_self=-0.5, a1_neighbor=0.5),
            u=0.5,
            init=InitialLaw(GAUSSIAN, 0.0, 1.0),
            name=name,
        )
    if name == "tanh-chain":
        return ChainModel(PairwiseDrift(TANH, scale=1.0), u=0.5, init=InitialLaw(DIRAC, 0.0), name=name)
    if name == "zero":
        return ChainModel(PairwiseDrift(ZERO), u=0.5, init=InitialLaw(DIRAC, 0.0), name=name)
    raise UnknownModel(f"unknown model {name!r}; choose from ou-chain, tanh-chain, zero")


BUILTIN_MODELS = ("ou-chain", "tanh-chain", "zero")


def require_scalar(model):
    if model.dim != 1:
        raise DimensionError(f"operation requires a scalar model, got dim={model.dim}")
