import math
import os

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from conftest import analysed
from strucid.errors import DomainError, ModelValidationError, MultipleSymmetries, NoSensitivity
from strucid.indist import (
    FlowSpec,
    Simulator,
    TauFlow,
    admissible_interval,
    canonicity_flow,
    canonicity_pair,
    certify_indistinguishability,
    choose_dt,
    closed_form,
    closed_form_exprs,
    hiv_measurement_inversion,
    pair_from_identifiability,
    residual_is_zero,
    sample_profiles,
    simulate,
    single_symmetry_recovery,
    symmetry_flow,
    toggle_residuals,
    write_csv,
)
from strucid.indist import _half_grid, _signals
from strucid.symexpr import TIME, evaluate, parse


def _pair(name, k=0):
    model, scenarios, res = analysed(name)
    refs = model.reference_symmetries
    return pair_from_identifiability(res, 0, refs[k] if refs else None), scenarios


def _points(pair, scenario, dt, stride):
    sim = Simulator(pair.model)
    x0, u, w = _signals(pair.model, scenario)
    steps = int(round((scenario.t_span[1] - scenario.t_span[0]) / dt))
    T, X, U, W = _half_grid(sim, x0, u, w, scenario.t_span[0], dt, steps)
    sl = slice(0, None, stride)
    return X[:, sl], W[:, sl], U[:, sl], T[sl]


def test_rk4_matches_an_adaptive_reference():
    pair, scenarios = _pair("hiv")
    model, sc = pair.model, scenarios["default"]
    out = simulate(model, sc, 201 / 6400)
    x0, _, wprof = _signals(model, sc)
    sim = Simulator(model)

    def rhs(t, x):
        w = sample_profiles(wprof, np.array([t]))
        return sim.rhs(np.concatenate([x, w[:, 0], [t]])[:, None])[:, 0]

    ref = solve_ivp(rhs, sc.t_span, x0, method="DOP853", rtol=1e-11, atol=1e-9, t_eval=out["t"][::800])
    got = out["x"][:, ::800]
    assert np.max(np.abs(got - ref.y) / np.max(np.abs(ref.y), axis=1, keepdims=True)) < 1e-7


def test_chosen_step_divides_the_interval():
    pair, scenarios = _pair("unicycle_s2")
    dt = choose_dt(pair.model, scenarios["default"])
    n = 10.0 / dt
    assert abs(n - round(n)) < 1e-9


def test_zero_flow_is_the_identity():
    pair, scenarios = _pair("hiv")
    X, W, U, T = _points(pair, scenarios["default"], 201 / 400, 7)
    Xr, Wr = TauFlow(pair).run(X, W, U, T, [0.0])[0.0]
    assert np.array_equal(Xr, X) and np.array_equal(Wr, W)


@settings(max_examples=8, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_flow_group_property(a, b):
    pair, scenarios = _pair("hiv")
    X, W, U, T = _points(pair, scenarios["default"], 201 / 400, 13)
    flow = TauFlow(pair)
    Xa, Wa = flow.run(X, W, U, T, [a])[a]
    Xab, Wab = flow.run(Xa, Wa, U, T, [b])[b]
    Xs, Ws = flow.run(X, W, U, T, [a + b])[a + b]
    scale = np.max(np.abs(np.concatenate([X, W])), axis=1, keepdims=True)
    assert np.max(np.abs(np.concatenate([Xab, Wab]) - np.concatenate([Xs, Ws])) / scale) < 1e-6


@pytest.mark.parametrize("tau", [-3.0, -1.0, 1.0, 2.0])
def test_hiv_flow_matches_the_closed_form(tau):
    pair, scenarios = _pair("hiv")
    X, W, U, T = _points(pair, scenarios["default"], 201 / 400, 37)
    Xr, Wr = TauFlow(pair).run(X, W, U, T, [tau])[tau]
    names = list(pair.model.x) + list(pair.model.w)
    for c in range(X.shape[1]):
        base = dict(zip(names, np.concatenate([X[:, c], W[:, c]])))
        expect = closed_form("hiv", tau, base)
        got = dict(zip(names, np.concatenate([Xr[:, c], Wr[:, c]])))
        for k, v in expect.items():
            assert abs(got[k] - v) <= 1e-7 * max(1.0, abs(v)), k


@pytest.mark.parametrize("k, family, tau", [(0, "seiar_sym1", -1e-4), (1, "seiar_sym2", 0.7),
                                            (1, "seiar_sym2", -0.05)])
def test_epidemic_flows_match_their_closed_forms(k, family, tau):
    pair, scenarios = _pair("seiar", k)
    X, W, U, T = _points(pair, scenarios["const"], 0.5, 29)
    Xr, Wr = TauFlow(pair).run(X, W, U, T, [tau])[tau]
    names = list(pair.model.x) + list(pair.model.w)
    for c in range(X.shape[1]):
        base = dict(zip(names, np.concatenate([X[:, c], W[:, c]])))
        got = dict(zip(names, np.concatenate([Xr[:, c], Wr[:, c]])))
        for key, v in closed_form(family, tau, base).items():
            assert abs(got[key] - v) <= 1e-7 * max(1.0, abs(v)), key


def test_closed_form_numbers():
    assert closed_form("seiar_sym2", 10, {"gamma": 0.25})["gamma"] == pytest.approx(5506.6, abs=1)
    assert closed_form("seiar_sym2", -0.05, {"gamma": 0.25})["gamma"] == pytest.approx(0.2378, abs=1e-3)
    with pytest.raises(DomainError):
        closed_form("seiar_sym1", -2.0, {"S": 1.0, "R": 0.0, "beta": 1.0})
    with pytest.raises(ModelValidationError):
        closed_form_exprs("lorenz")


@pytest.mark.parametrize("k", range(1, 7))
def test_toggle_identities_hold(k):
    assert all(residual_is_zero(e) for e in toggle_residuals(k))


def test_zero_test_rejects_a_wrong_family():
    rate = parse("k01 + k1/(1 + (x2/W1)^n1)")
    moved = parse("k01 + n1*k1*tau + k1/(1 + (x2/(W1*(1 + tau)))^n1)")
    assert not residual_is_zero(moved - rate)


def test_unicycle_certification_and_perturbed_control():
    pair, scenarios = _pair("unicycle_s2")
    sc = scenarios["default"]
    bundle = symmetry_flow(pair, sc, FlowSpec(taus=(-1.0, 0.0, 0.5, 2.0)))
    cert = certify_indistinguishability(bundle)
    assert cert["pass"] and cert["worst"]["deviation"] < 1e-6
    assert bundle.results[0.0].deviation == 0.0
    rho = bundle.results[2.0].x[0]
    assert np.allclose(rho, bundle.x[0] * math.exp(2.0), rtol=1e-9)
    bad = symmetry_flow(pair, sc, FlowSpec(taus=(0.5,), dt=bundle.dt, perturb=0.01))
    assert not certify_indistinguishability(bad)["pass"]


def test_unicycle_admissible_interval_is_unbounded():
    pair, scenarios = _pair("unicycle_s2")
    out = admissible_interval(pair, scenarios["default"], dt=0.05, tau_max=5.0)
    assert (out["lower"], out["upper"]) == (-5.0, 5.0)
    assert out["lower_reason"] == out["upper_reason"] == "limit"
    assert not out["empty"]


def test_canonicity_shift():
    w = np.arange(6.0).reshape(3, 2)
    out = canonicity_flow(w, 2, 0.5, 1)
    assert np.array_equal(out[2], w[2] + 0.5) and np.array_equal(out[:2], w[:2])
    with pytest.raises(ModelValidationError):
        canonicity_flow(w, 3, 0.5, 1)
    model, _, _ = analysed("toggle")
    pair = canonicity_pair(model, 0, 1)
    assert pair.kind == "canonicity" and str(pair.uchi[0]) == "1"


def test_csv_bundle(tmp_path):
    pair, scenarios = _pair("unicycle_s2")
    bundle = symmetry_flow(pair, scenarios["default"], FlowSpec(taus=(0.0, 1.0), dt=0.05))
    paths = write_csv(bundle, tmp_path)
    assert sorted(os.path.basename(p) for p in paths) == ["phi.csv", "rho.csv", "theta.csv", "v.csv", "y1.csv"]
    head = (tmp_path / "rho.csv").read_text().splitlines()
    assert head[0] == "t,baseline,tau=0,tau=1" and len(head) == 202
    with pytest.raises(ModelValidationError):
        write_csv(bundle, tmp_path, ["nope"])


def test_unicycle_scale_recovery():
    pair, scenarios = _pair("unicycle_s2")
    bundle = symmetry_flow(pair, scenarios["default"], FlowSpec(taus=(0.7,), dt=0.01))
    seen = bundle.results[0.7]
    k = 500
    rec = single_symmetry_recovery(pair, 1, bundle.t, seen.x, seen.w, "rho", bundle.t[k], bundle.x[0, k])
    assert math.exp(rec.tau) == pytest.approx(math.exp(-0.7), abs=1e-6)
    with pytest.raises(NoSensitivity):
        single_symmetry_recovery(pair, 1, bundle.t, seen.x, seen.w, "phi", bundle.t[k], 0.3)
    with pytest.raises(MultipleSymmetries):
        single_symmetry_recovery(pair, 2, bundle.t, seen.x, seen.w, "rho", bundle.t[k], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(0.1, 2.0), st.floats(1.0, 100.0))
def test_hiv_algebraic_inversion_round_trip(tau, delta, ti):
    rho = 0.108
    assume((rho - delta) * math.exp(rho * tau) + delta > 0.05)
    moved = closed_form("hiv", tau, {"T_U": 300.0, "T_I": ti, "V": 1e4, "lambda": 36.0, "rho": rho,
                                     "delta": delta, "N": 1000.0, "c": 3.0, "eta": 1e-5})
    got_tau, got_delta = hiv_measurement_inversion(rho, moved["delta"], moved["T_I"], ti)
    assert got_tau == pytest.approx(tau, abs=1e-8)
    assert got_delta == pytest.approx(delta, rel=1e-8)


def test_profiles_are_sampled_in_time():
    vals = sample_profiles([parse("sin(t)"), parse("2")], np.array([0.0, math.pi / 2]))
    assert vals.shape == (2, 2)
    assert np.allclose(vals, [[0.0, 1.0], [2.0, 2.0]])
    assert evaluate(parse("t"), {TIME: 3.0}, exact=False) == 3.0
