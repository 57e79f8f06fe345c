import pytest

from conftest import analysed
from strucid.errors import IterationCap
from strucid.liegeo import RankOracle
from strucid.model import model_from_dict, to_affine
from strucid.symexpr import ONE, ZERO, add, mul, parse
from strucid.uio import (
    compute_munu,
    deg_w,
    observability,
    reconstructability_matrix,
    select_htilde,
)

MODELS = ["unicycle_s1", "unicycle_s2", "hiv", "seiar", "toggle"]


def _product_is_identity(munu, oracle):
    mu, nu = munu.mu, munu.nu
    k = len(mu)
    for i in range(k):
        for j in range(k):
            e = add(*(mul(mu[i][a], nu[a][j]) for a in range(k)))
            target = ONE if i == j else ZERO
            if not oracle.zero(e - target):
                return False
    return True


@pytest.mark.parametrize("name, dim", [("unicycle_s1", 2), ("unicycle_s2", 1), ("hiv", 7), ("seiar", 7),
                                       ("toggle", 4)])
def test_observability_dimension(name, dim):
    _, _, res = analysed(name)
    assert res.observability.dim == dim


@pytest.mark.parametrize("name", MODELS)
def test_mu_nu_is_identity(name):
    _, _, res = analysed(name)
    assert _product_is_identity(res.observability.munu, RankOracle())


def test_mu_nu_on_a_two_input_system(oracle):
    m = to_affine(model_from_dict({
        "name": "two", "states": ["a", "b", "c"], "unknown_inputs": ["p", "q"],
        "dynamics": {"a": "b + p", "b": "a*q + c", "c": "p - a*c + q*c"}, "outputs": ["a", "b"],
    }))
    htilde = [parse("a"), parse("b")]
    munu = compute_munu(m, htilde, oracle)
    assert _product_is_identity(munu, oracle)


@pytest.mark.parametrize("name", MODELS)
def test_reconstructability_degree_never_decreases(name):
    _, _, res = analysed(name)
    degs = [r["deg"] for r in res.observability.trace.steps("deg_w")]
    assert degs == sorted(degs)
    assert degs[-1] == res.E.model.m_w


def test_unicycle_s2_observes_only_the_angle_difference(oracle):
    _, _, res = analysed("unicycle_s2")
    obs = res.observability
    assert not any(obs.observable.values())
    assert obs.O.span(oracle).rank == 1
    assert not obs.O.span(oracle).test((ZERO, ONE, parse("-1")))


def test_hiv_unobservable_components():
    _, _, res = analysed("hiv")
    assert sorted(res.observability.unobservable()) == ["N", "T_I", "T_U", "delta"]


def test_degree_of_reconstructability(oracle):
    m = to_affine(model_from_dict({
        "name": "d", "states": ["a", "b"], "unknown_inputs": ["w"],
        "dynamics": {"a": "w", "b": "a"}, "outputs": ["b"],
    }))
    assert deg_w(m, [parse("b")], oracle) == 0
    assert deg_w(m, [parse("b"), parse("a")], oracle) == 1
    assert reconstructability_matrix(m, [parse("a")]) == [[ONE]]
    assert select_htilde(m, [parse("b"), parse("a")], oracle) == [parse("a")]


def test_chain_with_hidden_input_is_observable(oracle):
    m = to_affine(model_from_dict({
        "name": "chain", "states": ["a", "b", "c"], "unknown_inputs": ["w"],
        "dynamics": {"a": "b", "b": "c", "c": "w"}, "outputs": ["a"],
    }))
    res = observability(m, oracle)
    assert res.dim == 3 and all(res.observable.values())


def test_round_cap(oracle):
    m = to_affine(model_from_dict({
        "name": "chain", "states": ["a", "b", "c"], "unknown_inputs": ["w"],
        "dynamics": {"a": "b", "b": "c", "c": "w"}, "outputs": ["a"],
    }))
    with pytest.raises(IterationCap):
        observability(m, oracle, max_rounds=0)


def test_trace_is_reproducible():
    model, _, _ = analysed("toggle")
    a = observability(model, RankOracle()).trace.to_jsonl()
    b = observability(model, RankOracle()).trace.to_jsonl()
    assert a == b and a.count("\n") > 3
