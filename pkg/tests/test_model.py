import json

import numpy as np
import pytest

from strucid.errors import ModelValidationError, NonAffineOutput, ParseError, UnknownModel
from strucid.model import BUILTIN_NAMES, builtin, builtin_general, loads, model_from_dict, scenario_signals, to_affine
from strucid.symexpr import ONE, ZERO, parse

PENDULUM = {
    "name": "pendulum",
    "states": ["q", "p"],
    "unknown_inputs": ["w"],
    "constant_params": ["k"],
    "dynamics": {"q": "p", "p": "-k*sin(q) + sin(w)"},
    "outputs": ["q"],
    "scenarios": {"s": {"initial": {"q": 0.1, "p": 0}, "params": {"k": 2},
                        "tv_profiles": {"w": "0.1*t"}, "t_span": [0, 5]}},
}


def test_non_affine_input_is_appended_with_its_derivative():
    m = to_affine(model_from_dict(PENDULUM))
    assert m.x == ("q", "p", "w", "k")
    assert m.w == ("w_dot",)
    assert m.sources["w_dot"] == ("w", 1)
    assert m.kinds["w"] == "unknown_input" and m.kinds["k"] == "constant"
    assert m.g[0] == (ZERO, ZERO, ONE, ZERO)
    assert m.g0[1] is parse("-k*sin(q) + sin(w)")
    assert m.g0[3] is ZERO


def test_affine_inputs_stay_inputs():
    m, _ = builtin("hiv")
    assert m.w == ("eta",)
    assert m.x[:3] == ("T_U", "T_I", "V")
    assert m.g[0][0] is parse("-T_U*V")


def test_scenario_signals_follow_the_extension():
    m = to_affine(model_from_dict(PENDULUM))
    x0, u, w = scenario_signals(m, m.scenarios["s"])
    assert x0 == [0.1, 0.0, 0.0, 2.0]
    assert w[0] is parse("1/10")


def test_outputs_may_not_depend_on_inputs():
    doc = dict(PENDULUM, outputs=["q + w"])
    with pytest.raises(NonAffineOutput):
        to_affine(model_from_dict(doc))


@pytest.mark.parametrize("change", [
    {"states": ["q", "q"]},
    {"dynamics": {"q": "p"}},
    {"outputs": ["q + r"]},
    {"states": ["t", "p"], "dynamics": {"t": "p", "p": "0"}},
    {"outputs": []},
    {"colour": "red"},
])
def test_invalid_documents(change):
    doc = dict(PENDULUM, **change)
    with pytest.raises(ModelValidationError):
        model_from_dict(doc)


def test_scenario_must_cover_states():
    doc = json.loads(json.dumps(PENDULUM))
    del doc["scenarios"]["s"]["initial"]["p"]
    with pytest.raises(ModelValidationError):
        model_from_dict(doc)


def test_malformed_json_reports_offset():
    with pytest.raises(ParseError) as info:
        loads('{"name": "x", "states": [')
    assert info.value.offset == 25


def test_bad_expression_in_file_reports_field():
    doc = dict(PENDULUM, dynamics={"q": "p +", "p": "0"})
    with pytest.raises(ParseError) as info:
        model_from_dict(doc)
    assert info.value.details["field"] == "dynamics.q"


def test_json_round_trip_and_digest():
    gm = model_from_dict(PENDULUM)
    again = loads(json.dumps(gm.to_json()))
    assert again.digest() == gm.digest()
    other = model_from_dict(dict(PENDULUM, outputs=["p"]))
    assert other.digest() != gm.digest()


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_load_and_simulate_signals(name):
    model, scenarios = builtin(name)
    assert scenarios
    for sc in scenarios.values():
        x0, u, w = scenario_signals(model, sc)
        assert len(x0) == model.n and np.all(np.isfinite(x0))
        assert len(w) == model.m_w
    for xi in model.reference_symmetries:
        assert len(xi) == model.n


def test_unknown_builtin():
    with pytest.raises(UnknownModel):
        builtin_general("lorenz")


def test_with_output_keeps_the_general_form():
    model, _ = builtin("hiv")
    more = model.with_output(parse("T_U"))
    assert more.p == 3 and more.general.outputs[-1] is parse("T_U")
