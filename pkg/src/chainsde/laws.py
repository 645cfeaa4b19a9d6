"""Time-indexed marginal laws ``mu_t`` on a :class:`TimeGrid`."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GridMismatch, PreconditionError
from .model import EmpiricalSnapshot, GaussianSnapshot, TimeGrid

GAUSSIAN = "gaussian"
EMPIRICAL = "empirical"


@dataclass(frozen=True, eq=False)
class LawFlow:
    """Either a Gaussian flow (``mean[step, N]``, ``cov[step, N, N]``) or an
    empirical flow of particle paths ``particles[particle, step, N]``.

    Empirical particles are stored path-wise so a flow produced by a
    simulation can be re-used as a source of neighbour paths.
    """

    kind: str
    grid: TimeGrid
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    particles: Optional[np.ndarray] = None

    def __post_init__(self):
        s = self.grid.n_steps + 1
        if self.kind == GAUSSIAN:
            if self.mean is None or self.cov is None:
                raise PreconditionError("Gaussian flow needs mean and cov")
            if self.mean.shape[0] != s or self.cov.shape[0] != s:
                raise GridMismatch("Gaussian flow length does not match its grid")
        elif self.kind == EMPIRICAL:
            if self.particles is None or self.particles.ndim != 3:
                raise PreconditionError("empirical flow needs particles[particle, step, N]")
            if self.particles.shape[1] != s:
                raise GridMismatch("empirical flow length does not match its grid")
        else:
            raise PreconditionError(f"unknown law flow kind {self.kind!r}")

    @classmethod
    def gaussian(cls, grid, mean, cov):
        mean = np.asarray(mean, float)
        if mean.ndim == 1:
            mean = mean[:, None]
        cov = np.asarray(cov, float)
        if cov.ndim == 1:
            cov = cov[:, None, None]
        return cls(GAUSSIAN, grid, mean=mean, cov=cov)

    @classmethod
    def empirical(cls, grid, particles):
        p = np.asarray(particles, float)
        if p.ndim == 2:
            p = p[:, :, None]
        return cls(EMPIRICAL, grid, particles=p)

    @property
    def dim(self):
        return (self.mean if self.kind == GAUSSIAN else self.particles).shape[-1]

    @property
    def n_particles(self):
        return None if self.kind == GAUSSIAN else self.particles.shape[0]

    def step_of(self, t):
        return self.grid.index(t)

    def snapshot(self, step):
        if self.kind == GAUSSIAN:
            return GaussianSnapshot(self.mean[step], self.cov[step])
        cache = self.__dict__.setdefault("_snapshots", {})
        if step not in cache:
            cache[step] = EmpiricalSnapshot(self.particles[:, step, :])
        return cache[step]

    def at(self, t):
        return self.snapshot(self.step_of(t))

    def mean_path(self):
        if self.kind == GAUSSIAN:
            return self.mean
        return self.particles.mean(axis=0)

    def covers(self, grid):
        """Return the law-step offset of ``grid`` inside this flow, or raise."""
        if abs(grid.dt - self.grid.dt) > 1e-12 * grid.dt:
            raise GridMismatch(f"law grid dt={self.grid.dt} differs from simulation dt={grid.dt}")
        start = self.grid.index(grid.t0)
        if start + grid.n_steps > self.grid.n_steps:
            raise GridMismatch("law does not cover the simulation grid")
        return start
