import math

import numpy as np
import pytest

from chainsde.errors import CFLViolation, SigmaError
from chainsde.filtering import (
    cross_validate,
    kalman_bucy,
    lag1_autocorrelation,
    particle_filter,
    reference_observations,
    simulate_observations,
    spde_solve,
    standardized_innovations,
)
from chainsde.measure import Mesh, gaussian_chain_oracle
from chainsde.model import TimeGrid, builtin_model
from chainsde.simulate import default_law

OU = builtin_model("ou-chain")


@pytest.fixture(scope="module")
def coarse():
    g = TimeGrid.over(1.0, 1e-3)
    return g, default_law(OU, g)


@pytest.fixture(scope="module")
def fine():
    g = TimeGrid.over(1.0, 1e-4)
    return g, default_law(OU, g)


def test_u_zero_filter_returns_prior(coarse):
    g, _ = coarse
    m = OU.with_(u=0.0)
    law = default_law(m, g)
    obs = simulate_observations(m, g, law, 1, 3)[0]
    prior = gaussian_chain_oracle(m, 1, g)
    pf = particle_filter(m, obs, 2000, 1, seed=4, law=law)
    assert abs(pf.final_mean - prior.mean[-1, 0]) <= 3 * pf.stderr[-1]
    assert abs(pf.final_var - prior.cov[-1, 0, 0]) <= 0.1
    kb = kalman_bucy(m, obs, 1, law)
    assert np.allclose(kb.mean, prior.mean[:, 0], atol=1e-12)
    assert np.max(np.abs(kb.var - prior.cov[:, 0, 0])) < 1e-9


def test_particle_filter_matches_kalman(coarse):
    g, law = coarse
    errs, ses = [], []
    for r, obs in enumerate(simulate_observations(OU, g, law, 10, 5)):
        pf = particle_filter(OU, obs, 1000, 1, seed=100 + r, law=law)
        kb = kalman_bucy(OU, obs, 1, law)
        errs.append(pf.mean - kb.mean)
        ses.append(pf.stderr)
    assert math.sqrt(np.mean(np.square(errs))) <= 3 * math.sqrt(np.mean(np.square(ses)))


def test_mass_is_a_martingale_under_reference(coarse):
    g, law = coarse
    obs = reference_observations(OU, g, 150, 6)
    mass = np.array([particle_filter(OU, o, 300, 1, seed=r, law=law).mass for r, o in enumerate(obs)])
    for t in (0.25, 0.5, 1.0):
        col = mass[:, g.index(t)]
        assert abs(col.mean() - 1.0) <= 3 * col.std(ddof=1) / math.sqrt(col.size), t


def test_upstream_observations_leave_filter_unchanged(coarse):
    g, law = coarse
    obs = simulate_observations(OU, g, law, 1, 8, depth=3, k=2)[0]
    plain = particle_filter(OU, obs, 2000, 1, seed=9, law=law)
    aug = particle_filter(OU, obs, 2000, 1, seed=9, law=law, upstream=obs.upstream)
    assert np.allclose(plain.mean, aug.mean, atol=1e-10)
    assert np.allclose(plain.var, aug.var, atol=1e-10)
    assert not np.allclose(plain.mass, aug.mass)


def test_spde_zero_drift_is_heat_kernel():
    m = builtin_model("zero")
    g = TimeGrid.over(1.0, 1e-4)
    obs = reference_observations(m, g, 1, 2)[0]
    mesh = Mesh.span(-7, 7, 512)
    rep = spde_solve(m, obs, mesh)
    p = rep.extra["final_density"]
    heat = np.exp(-0.5 * mesh.nodes**2) / math.sqrt(2 * math.pi)
    assert np.max(np.abs(p.values - heat)) <= 1e-3
    assert p.integral() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p.values >= 0)


def test_spde_u_zero_is_ou_prior(fine):
    g, _ = fine
    m = OU.with_(u=0.0)
    law = default_law(m, g)
    obs = simulate_observations(m, g, law, 1, 4)[0]
    rep = spde_solve(m, obs, Mesh.span(-7, 7, 512), law)
    prior = gaussian_chain_oracle(m, 1, g)
    assert abs(rep.final_mean - prior.mean[-1, 0]) <= 1e-3
    assert abs(rep.final_var - prior.cov[-1, 0, 0]) <= 1e-3


def test_spde_matches_kalman_and_stays_normalised(fine):
    g, law = fine
    obs = simulate_observations(OU, g, law, 1, 12)[0]
    rep = spde_solve(OU, obs, Mesh.span(-7, 7, 512), law, save_every=1000)
    kb = kalman_bucy(OU, obs, 1, law)
    assert np.max(np.abs(rep.mean - kb.mean)) <= 2e-2
    assert np.max(np.abs(rep.var - kb.var)) <= 2e-2
    for _, c in rep.extra["curves"]:
        assert np.all(c.values >= 0)
        assert c.integral() == pytest.approx(1.0, abs=1e-12)


def test_spde_cfl():
    g = TimeGrid.over(0.1, 1e-2)
    obs = reference_observations(OU, g, 1, 0)[0]
    with pytest.raises(CFLViolation):
        spde_solve(OU, obs, Mesh.span(-7, 7, 512))


def test_filters_need_unit_sigma(coarse):
    g, law = coarse
    obs = reference_observations(OU, g, 1, 0)[0]
    with pytest.raises(SigmaError):
        kalman_bucy(OU.with_(sigma=2.0), obs, 1, law)


def test_kalman_stationary_variance():
    m = OU.with_(u=1.0)
    g = TimeGrid.over(20.0, 1e-3)
    law = default_law(m, g)
    obs = simulate_observations(m, g, law, 1, 1)[0]
    kb = kalman_bucy(m, obs, 1, law)
    assert abs(kb.final_var - 2 * (math.sqrt(2) - 1)) <= 1e-3
    z = standardized_innovations(kb)
    assert abs(lag1_autocorrelation(z)) <= 3 / math.sqrt(z.size)


def test_kalman_variance_nonincreasing_in_u():
    g = TimeGrid.over(2.0, 1e-3)
    finals = []
    for u in np.linspace(0, 1, 6):
        m = OU.with_(u=float(u))
        law = default_law(m, g)
        obs = reference_observations(m, g, 1, 0)[0]
        finals.append(kalman_bucy(m, obs, 1, law).final_var)
    assert np.all(np.diff(finals) <= 1e-12)


def test_cross_validate_small():
    cv = cross_validate(OU, 3, n_obs=3, n_particles=3000, grid=TimeGrid.over(0.5, 1e-4))
    s = cv.summary
    assert s["rms_mean_pf_kalman"] <= 3 * s["pf_stderr"]
    assert s["rms_mean_spde_kalman"] <= 2e-2


def test_cross_validate_u_zero_all_prior():
    m = OU.with_(u=0.0)
    cv = cross_validate(m, 4, n_obs=2, n_particles=3000, grid=TimeGrid.over(0.5, 1e-4))
    s = cv.summary
    assert s["rms_mean_spde_kalman"] <= 2 * 1e-3
    assert s["rms_mean_pf_kalman"] <= 2 * (s["pf_stderr"] + 1e-3)
