import pytest

from conftest import analysed
from strucid.ident import identifiability, proportional
from strucid.indist import check_commutativity, pair_from_identifiability
from strucid.liegeo import GenericSpan, RankOracle, in_orthogonal
from strucid.model import model_from_dict, to_affine
from strucid.symexpr import ZERO, parse


def _verdicts(name):
    _, _, res = analysed(name)
    out = dict(res.constants)
    out.update({k: v["identifiable"] for k, v in res.tv_params.items()})
    return out


@pytest.mark.parametrize("name, expected", [
    ("hiv", {"lambda": True, "rho": True, "c": True, "delta": False, "N": False, "eta": False}),
    ("seiar", {"mu1": True, "mu2": True, "p": True, "gamma": False, "beta": False}),
    ("toggle", {k: False for k in ("k01", "k1", "n1", "k02", "k2", "n2", "W1", "W2")}),
    ("unicycle_s1", {"omega": True}),
    ("unicycle_s2", {"v": False}),
])
def test_identifiability_verdicts(name, expected):
    assert _verdicts(name) == expected


def test_toggle_input_derivatives_are_not_reconstructable():
    _, _, res = analysed("toggle")
    assert res.inputs == {"W1_dot": False, "W2_dot": False}


@pytest.mark.parametrize("name", ["unicycle_s1", "unicycle_s2", "hiv", "seiar", "toggle"])
def test_reference_symmetries_span_the_orthogonal_distribution(name, oracle):
    model, _, res = analysed(name)
    em = res.E.model
    refs = [tuple(v) + (ZERO,) * (em.n - len(v)) for v in model.reference_symmetries]
    assert len(res.state_symmetries) == em.n - res.observability.dim >= len(refs)
    for xi in refs:
        assert in_orthogonal(res.observability.O, xi, oracle)
    span = GenericSpan(oracle, em.n)
    for xi in res.state_symmetries:
        assert span.add(xi)
    for xi in refs:
        assert not span.test(xi)
    if len(refs) == 1:
        assert proportional(refs[0], res.state_symmetries[0], oracle)


@pytest.mark.parametrize("name, k", [("hiv", 0), ("seiar", 0), ("seiar", 1), ("unicycle_s2", 0)])
def test_reference_symmetries_commute_with_the_dynamics(name, k, oracle):
    model, _, res = analysed(name)
    pair = pair_from_identifiability(res, 0, model.reference_symmetries[k])
    assert check_commutativity(pair.model, pair.xi, pair.uchi, oracle)


def test_input_symmetries_of_the_epidemic_model(oracle):
    model, _, res = analysed("seiar")
    first = pair_from_identifiability(res, 0, model.reference_symmetries[0])
    assert oracle.zero(first.uchi[0] - parse("-beta/S"))
    _, _, u = analysed("unicycle_s2")
    pair = pair_from_identifiability(u, 0)
    assert proportional(pair.xi, (parse("rho"), ZERO, ZERO), oracle)


def test_observable_state_models_agree_with_the_shortcut(oracle):
    m = to_affine(model_from_dict({
        "name": "u", "states": ["rho", "phi", "theta"], "known_inputs": ["v"], "unknown_inputs": ["omega"],
        "dynamics": {"rho": "v*cos(theta-phi)", "phi": "v*sin(theta-phi)/rho", "theta": "omega"},
        "outputs": ["phi-theta", "rho", "phi"],
    }))
    res = identifiability(m, oracle)
    assert res.observable_state
    assert res.observability.dim == 3
    assert res.state_symmetries == []
    m_deg = len(res.observability.htilde)
    assert res.inputs == {w: j < m_deg for j, w in enumerate(res.E.model.w)}


def test_identifiable_parameter_with_hidden_state(oracle):
    m = to_affine(model_from_dict({
        "name": "decay", "states": ["x", "z"], "constant_params": ["k", "s"],
        "dynamics": {"x": "-k*x + s*z", "z": "0"}, "outputs": ["x"],
    }))
    res = identifiability(m, oracle)
    assert res.constants == {"k": True, "s": False}
    assert len(res.state_symmetries) == 1


def test_report_is_serialisable():
    import json

    _, _, res = analysed("hiv")
    rep = res.report()
    json.dumps(rep)
    assert rep["observability"]["dim"] == 7
