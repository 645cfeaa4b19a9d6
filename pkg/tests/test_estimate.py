import math

import numpy as np
import pytest

from chainsde.errors import DegenerateSample, NonIdentifiable, PreconditionError
from chainsde.estimate import (
    MleInput,
    bbar_path,
    clt_summary,
    convergence_table,
    expected_information,
    log_likelihood,
    mle_u,
    replicate_mle,
)
from chainsde.laws import LawFlow
from chainsde.measure import gaussian_chain_oracle
from chainsde.model import ChainModel, PairwiseDrift, TimeGrid, builtin_model
from chainsde.simulate import default_law, simulate_chain

Y_MINUS_X = PairwiseDrift("linear", a1_self=-1.0, a1_neighbor=1.0)
OU = builtin_model("ou-chain")
G = TimeGrid.over(1.0, 1e-3)


def hand_mle_by_loops(x1, x2, dt, a1s, a1n, m):
    """Independent recomputation of the closed form with explicit loops."""
    num = den = 0.0
    for s in range(len(x1) - 1):
        bbar = a1n * (x2[s] - m)
        mean_field = a1s * x1[s] + a1n * m
        num += bbar * ((x1[s + 1] - x1[s]) - mean_field * dt)
        den += bbar * bbar * dt
    return num / den, num, den


def test_hand_instance():
    g = TimeGrid(0.0, 1.0, 2)
    law = LawFlow.gaussian(g, np.zeros(3), np.ones(3))
    x1, x2 = [0.0, 1.0, 1.0], [2.0, 2.0, 2.0]
    res = mle_u(MleInput(np.array([x1, x2]), g, ChainModel(Y_MINUS_X), law))
    u, num, den = hand_mle_by_loops(x1, x2, 1.0, -1.0, 1.0, 0.0)
    assert (u, num, den) == (0.5, 4.0, 8.0)
    assert res.u_hat == 0.5
    assert (res.numerator, res.sigma_k2) == (4.0, 8.0)


def test_bbar_examples():
    g = TimeGrid(0.0, 0.5, 4)
    law = LawFlow.gaussian(g, np.zeros(5), np.ones(5))
    x = np.linspace(-1, 1, 5)
    assert np.all(bbar_path(x, np.full(5, 2.0), ChainModel(Y_MINUS_X), law, g) == 2.0)
    flat = ChainModel(PairwiseDrift("linear", a1_self=-1.0, a1_neighbor=0.0))
    assert np.all(bbar_path(x, x[::-1], flat, law, g) == 0.0)


def test_bbar_second_moment_matches_oracle():
    law = default_law(OU, G)
    ens = simulate_chain(OU, 3, law, G, 10_000, 4, levels=(1, 2))
    vals = np.array([bbar_path(p1, p2, OU, law, G)[-1] for p1, p2 in zip(ens.level_paths(1)[:2000, :, 0], ens.level_paths(2)[:2000, :, 0])])
    sq = vals**2
    target = 0.25 * gaussian_chain_oracle(OU, 3, G).cov[-1, 1, 1]
    assert abs(sq.mean() - target) <= 3 * sq.std(ddof=1) / math.sqrt(sq.size)


def test_non_identifiable():
    m = ChainModel(PairwiseDrift("linear", a1_self=-0.5, a1_neighbor=0.0))
    g = TimeGrid.over(0.1, 1e-2)
    law = default_law(m, g)
    ens = simulate_chain(m, 3, law, g, 1, 0)
    with pytest.raises(NonIdentifiable):
        mle_u(MleInput.from_ensemble(ens, m, law))


def test_k200_within_three_clt_scales():
    law = default_law(OU, G)
    ens = simulate_chain(OU, 200, law, G, 1, 17)
    res = mle_u(MleInput.from_ensemble(ens, OU, law))
    assert abs(res.u_hat - 0.5) <= 3 / math.sqrt(expected_information(OU, 200, G))


def test_likelihood_is_maximal_at_estimate():
    law = default_law(OU, G)
    for seed in range(5):
        inp = MleInput.from_ensemble(simulate_chain(OU, 20, law, G, 1, seed), OU, law)
        u = mle_u(inp).u_hat
        ll = log_likelihood(inp, u)
        assert ll > log_likelihood(inp, u + 0.01)
        assert ll > log_likelihood(inp, u - 0.01)


def test_equivariance_under_drift_scaling():
    g = TimeGrid.over(1.0, 1e-2)
    base = OU
    scaled = OU.with_(drift=PairwiseDrift("linear", a1_self=-1.0, a1_neighbor=1.0))
    u1, s1 = replicate_mle(base, 0.5, 30, g, 60, 3)
    u2, s2 = replicate_mle(scaled, 0.5, 30, g, 60, 3)
    # information scales like c^2 up to the change of the law itself
    assert 2.5 < s2.mean() / s1.mean() < 6.0
    for u in (u1, u2):
        assert abs(u.mean() - 0.5) <= 3 * u.std(ddof=1) / math.sqrt(u.size)


def test_clt_summary_degenerate():
    with pytest.raises(DegenerateSample):
        clt_summary(np.full(300, 0.4), np.full(300, 10.0), 0.5)


def test_clt_summary_on_exact_normal_sample():
    r = np.random.default_rng(0)
    s2 = np.full(2000, 25.0)
    u_hat = 0.5 + r.standard_normal(2000) / 5.0
    out = clt_summary(u_hat, s2, 0.5)
    assert abs(out["mean"]) <= 3 / math.sqrt(2000)
    assert out["ks_distance"] <= 1.36 / math.sqrt(2000) * 1.5


def test_convergence_table_errors():
    with pytest.raises(PreconditionError):
        convergence_table(OU, 0.5, [], 10, 0)


@pytest.mark.parametrize("u_true", [0.0, 1.0])
def test_endpoints_recovered(u_true):
    rows, _ = convergence_table(OU, u_true, [400], 200, 5, T=2.0)
    assert rows[0]["rms_error"] <= 0.1
