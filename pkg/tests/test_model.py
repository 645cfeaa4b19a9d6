import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainsde.errors import GridMismatch, PreconditionError, UnknownModel
from chainsde.laws import LawFlow
from chainsde.model import (
    ChainModel,
    EmpiricalSnapshot,
    GaussianSnapshot,
    PairwiseDrift,
    TimeGrid,
    builtin_model,
    eval_mixture_drift,
    mean_field_term,
)

Y_MINUS_X = PairwiseDrift("linear", a1_self=-1.0, a1_neighbor=1.0)


def gauss(mean, var=1.0):
    return GaussianSnapshot(np.array([mean]), np.array([[var]]))


def test_zero_drift_is_zero():
    m = builtin_model("zero")
    out = eval_mixture_drift(m, 0.3, np.array([[1.5], [-2.0]]), np.array([[4.0], [0.1]]), gauss(7.0))
    assert np.all(out == 0.0)


def test_u_one_is_pairwise_term():
    m = ChainModel(Y_MINUS_X, u=1.0)
    assert eval_mixture_drift(m, 0.0, np.array([[0.0]]), np.array([[2.0]]), gauss(123.0))[0, 0] == 2.0


def test_half_mixture_with_gaussian_law():
    m = ChainModel(Y_MINUS_X, u=0.5)
    assert eval_mixture_drift(m, 0.0, np.array([[0.0]]), np.array([[2.0]]), gauss(4.0))[0, 0] == pytest.approx(3.0)


def test_builtin_models():
    assert builtin_model("zero").drift.kind == "zero"
    ou = builtin_model("ou-chain")
    assert (ou.drift.a1_neighbor, ou.drift.a1_self, ou.u) == (0.5, -0.5, 0.5)
    with pytest.raises(UnknownModel):
        builtin_model("nope")


def test_grid_index_and_sub():
    g = TimeGrid.over(1.0, 0.1)
    assert g.n_steps == 10
    assert g.index(0.5) == 5
    with pytest.raises(GridMismatch):
        g.index(0.55)
    s = g.sub(0.5, 1.0)
    assert (s.t0, s.n_steps) == (pytest.approx(0.5), 5)
    with pytest.raises(PreconditionError):
        TimeGrid.over(1.0, 0.3)


def test_empirical_mean_field_matches_direct_sum():
    m = builtin_model("tanh-chain")
    cloud = np.random.default_rng(0).normal(size=(40, 1))
    x = np.linspace(-2, 2, 7)[:, None]
    direct = np.tanh(cloud[:, 0][None, :] - x).mean(axis=1)
    assert np.allclose(mean_field_term(m, 0.0, x, EmpiricalSnapshot(cloud))[:, 0], direct, atol=1e-14)


def test_large_batch_tabulation_matches_quadrature():
    m = builtin_model("tanh-chain")
    snap = EmpiricalSnapshot(np.random.default_rng(1).normal(size=(5000, 1)))
    x = np.random.default_rng(2).normal(size=(3000, 1)) * 2
    nodes, w = snap.nodes()
    exact = np.einsum("pkn,k->pn", m.drift(0.0, x[:, None, :], nodes[None]), w)
    assert np.max(np.abs(mean_field_term(m, 0.0, x, snap) - exact)) < 1e-6


def test_gaussian_mean_field_for_tanh_is_odd_around_mean():
    m = builtin_model("tanh-chain")
    v = mean_field_term(m, 0.0, np.array([[-1.0], [0.0], [1.0]]), gauss(0.0, 2.0))[:, 0]
    assert v[1] == pytest.approx(0.0, abs=1e-14)
    assert v[0] == pytest.approx(-v[2], abs=1e-14)


def test_law_flow_snapshot_and_covers():
    g = TimeGrid.over(1.0, 0.1)
    flow = LawFlow.gaussian(g, np.zeros(11), np.ones(11))
    assert flow.covers(g.sub(0.3, 0.8)) == 3
    with pytest.raises(GridMismatch):
        flow.covers(TimeGrid.over(1.0, 0.05))


coords = st.floats(-5, 5, allow_nan=False)
models = st.sampled_from(["ou-chain", "tanh-chain", "zero"])


@settings(max_examples=60, deadline=None)
@given(models, coords, coords, coords)
def test_mixture_is_affine_in_u(name, x, xn, mean):
    base = builtin_model(name)
    law = gauss(mean, 1.3)
    vals = [
        eval_mixture_drift(base.with_(u=u), 0.2, np.array([[x]]), np.array([[xn]]), law)[0, 0] for u in (0.0, 0.5, 1.0)
    ]
    assert vals[1] == pytest.approx(0.5 * (vals[0] + vals[2]), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(models, coords, coords, coords, coords, st.floats(0, 1))
def test_lipschitz_witness(name, x1, x2, y1, y2, u):
    m = builtin_model(name).with_(u=u)
    law = gauss(0.4, 0.8)
    b1 = eval_mixture_drift(m, 0.0, np.array([[x1]]), np.array([[y1]]), law)[0, 0]
    b2 = eval_mixture_drift(m, 0.0, np.array([[x2]]), np.array([[y2]]), law)[0, 0]
    assert abs(b1 - b2) <= m.drift.lipschitz * (abs(x1 - x2) + abs(y1 - y2)) + 1e-12
