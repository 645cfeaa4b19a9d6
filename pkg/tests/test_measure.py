import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainsde.errors import BandwidthError, GridMismatch, PairingError, TooFewSamples
from chainsde.measure import (
    EmpiricalMeasure,
    Mesh,
    gaussian_chain_oracle,
    kde,
    kde_curves,
    partial_correlation_from_cov,
    path_metric_Dt,
    w2_1d,
)
from chainsde.model import ChainModel, InitialLaw, PairwiseDrift, TimeGrid, builtin_model
from chainsde.simulate import default_law, simulate_chain


def w2_bruteforce(a, b):
    """Minimum over all permutations (equal-size uniform measures)."""
    best = min(sum((x - b[p]) ** 2 for x, p in zip(a, perm)) for perm in itertools.permutations(range(len(b))))
    return math.sqrt(best / len(a))


def test_w2_examples():
    assert w2_1d([0.3, -1.0, 2.0], [2.0, 0.3, -1.0]) == 0.0
    assert w2_1d([0.0], [1.0]) == 1.0
    assert w2_1d([0.0, 1.0], [0.0, 2.0]) == pytest.approx(math.sqrt(0.5), abs=1e-15)


def test_w2_weighted_matches_replicated_samples():
    a = EmpiricalMeasure(np.array([0.0, 1.0]), np.array([0.25, 0.75]))
    b = [0.5, 0.5, 2.0, 2.0]
    assert w2_1d(a, b) == pytest.approx(w2_1d([0.0, 1.0, 1.0, 1.0], b), abs=1e-14)


small = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=6)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(*[st.lists(st.floats(-10, 10), min_size=n, max_size=n)] * 3)))
def test_w2_axioms_and_bruteforce(triple):
    a, b, c = (np.array(v) for v in triple)
    dab = w2_1d(a, b)
    assert dab >= 0
    assert dab == pytest.approx(w2_1d(b, a), abs=1e-12)
    assert w2_1d(a, a) == 0.0
    assert dab <= w2_1d(a, c) + w2_1d(c, b) + 1e-9
    assert dab == pytest.approx(w2_bruteforce(list(a), list(b)), rel=1e-9, abs=1e-9)


def test_path_metric_examples():
    g = TimeGrid.over(1.0, 0.1)
    p = np.random.default_rng(0).normal(size=(20, 11))
    assert path_metric_Dt(p, p, 1.0, g) == 0.0
    assert path_metric_Dt(p, p + 2.0, 1.0, g) == 1.0
    with pytest.raises(PairingError):
        path_metric_Dt(p, p[:5], 1.0, g)
    with pytest.raises(GridMismatch):
        path_metric_Dt(p, p, 0.55, g)


def test_path_metric_monotone_and_bounded():
    g = TimeGrid.over(1.0, 0.01)
    r = np.random.default_rng(1)
    a = np.cumsum(r.normal(scale=0.1, size=(500, 101)), axis=1)
    b = np.cumsum(r.normal(scale=0.1, size=(500, 101)), axis=1)
    vals = [path_metric_Dt(a, b, t, g) for t in g.times]
    assert np.all(np.diff(vals) >= 0)
    assert max(vals) <= 1.0


def test_path_metric_between_independent_brownian_ensembles_is_stable():
    m = builtin_model("zero")
    g = TimeGrid.over(1.0, 1e-2)
    law = None
    runs = []
    for s in (1, 2):
        e1 = simulate_chain(m, 1, law, g, 10_000, 10 * s)
        e2 = simulate_chain(m, 1, law, g, 10_000, 10 * s + 1)
        runs.append(path_metric_Dt(e1, e2, 1.0))
    assert abs(runs[0] - runs[1]) <= 0.02


@pytest.fixture(scope="module")
def normal_samples():
    return np.random.default_rng(5).standard_normal(100_000)


def test_kde_standard_normal(normal_samples):
    mesh = Mesh.span(-4, 4, 161)
    c = kde_curves(normal_samples, mesh, "normal-reference", (0, 1))
    assert c[0].at(0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=0.01)
    assert c[0].integral() == pytest.approx(1.0, abs=1e-3)


def test_kde_standard_normal_derivative_at_origin(normal_samples):
    # the estimator's standard deviation here is about 0.009, so this is close to a 1-sigma check
    mesh = Mesh.span(-4, 4, 161)
    c = kde_curves(normal_samples, mesh, "normal-reference", (1,))
    assert c[1].at(0.0) == pytest.approx(0.0, abs=0.01)


def test_kde_error_decreases_with_n(normal_samples):
    mesh = Mesh.span(-3, 3, 121)
    exact = np.exp(-0.5 * mesh.nodes**2) / math.sqrt(2 * math.pi)
    err = [np.max(np.abs(kde(normal_samples[:n], mesh).values - exact)) for n in (10_000, 100_000)]
    assert err[1] < err[0]


def test_kde_preconditions():
    mesh = Mesh.span(-1, 1, 11)
    with pytest.raises(TooFewSamples):
        kde(np.zeros(50), mesh)
    with pytest.raises(TooFewSamples):
        kde(np.random.default_rng(0).normal(size=500), mesh, order=2)
    with pytest.raises(BandwidthError):
        kde(np.ones(200), mesh)


def test_oracle_zero_drift_variance_is_one_plus_t():
    m = ChainModel(PairwiseDrift(), u=0.5, init=InitialLaw("gaussian", 0.0, 1.0))
    g = TimeGrid.over(1.0, 1e-3)
    o = gaussian_chain_oracle(m, 3, g)
    assert np.max(np.abs(o.cov[:, 0, 0] - (1 + g.times))) < 1e-10


def test_oracle_scalar_ou_is_stationary():
    m = ChainModel(PairwiseDrift("linear", a1_self=-0.5, a1_neighbor=0.5), u=0.0, init=InitialLaw("gaussian", 0.0, 1.0))
    o = gaussian_chain_oracle(m, 1, TimeGrid.over(1.0, 1e-3))
    assert np.max(np.abs(o.cov[:, 0, 0] - 1.0)) < 1e-10


def test_oracle_variance_converges_with_depth():
    m = builtin_model("ou-chain")
    g = TimeGrid.over(1.0, 1e-3)
    v = [gaussian_chain_oracle(m, d, g).cov[-1, 0, 0] for d in (2, 4, 6, 8)]
    gaps = np.abs(np.diff(v))
    assert np.all(np.diff(gaps) < 0)


def test_oracle_cov12_against_fine_euler():
    m = builtin_model("ou-chain")
    g = TimeGrid.over(1.0, 1e-3)
    oracle = gaussian_chain_oracle(m, 3, g).cov[-1, 0, 1]
    fine = TimeGrid.over(1.0, 1e-4)
    law = default_law(m, fine)
    a, b = [], []
    # slices of paths keep memory bounded; per-path streams make this exact
    for first in range(0, 10_000, 1000):
        ens = simulate_chain(m, 3, law, fine, 1000, 77, levels=(1, 2), first_path=first)
        a.append(ens.at(1, 1.0)[:, 0])
        b.append(ens.at(2, 1.0)[:, 0])
    a, b = np.concatenate(a), np.concatenate(b)
    prod = (a - a.mean()) * (b - b.mean())
    assert abs(prod.mean() - oracle) <= 3 * prod.std(ddof=1) / math.sqrt(prod.size)


def test_partial_correlation_from_cov_independent():
    assert partial_correlation_from_cov(np.eye(3), 0, 2, [1]) == 0.0
