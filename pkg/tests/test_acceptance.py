"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL`` line with the numbers
behind the verdict; the lines are repeated in the pytest terminal summary.
Run directly with ``python3 tests/test_acceptance.py`` to get only the lines.
"""

import json
import math
import random
import sys
import time

import numpy as np

from conftest import ACCEPTANCE, analysed
from strucid.cli import main as cli
from strucid.ident import identifiability, proportional
from strucid.indist import (
    FlowSpec,
    TauFlow,
    admissible_interval,
    certify_indistinguishability,
    choose_dt,
    closed_form,
    pair_from_identifiability,
    residual_is_zero,
    symmetry_flow,
    toggle_residuals,
)
from strucid.indist import _half_grid, _signals, Simulator
from strucid.liegeo import GenericSpan, RankOracle, codistribution_closure, in_orthogonal, lie_operator
from strucid.model import model_from_dict, to_affine
from strucid.symexpr import ONE, ZERO, add, diff, evaluate, mul, parse


def report(n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def _analyze_json(name, capsys=None):
    import contextlib
    import io

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli(["analyze", "--builtin", name, "--json"])
    assert code == 0
    return json.loads(buf.getvalue())


def _pair(name, k):
    model, scenarios, res = analysed(name)
    return pair_from_identifiability(res, 0, model.reference_symmetries[k]), scenarios


def test_criterion_1_observability_dimensions():
    expected = {"unicycle_s1": 2, "unicycle_s2": 1, "hiv": 7, "seiar": 7, "toggle": 4}
    got, slowest = {}, 0.0
    oracle = RankOracle()
    for name in expected:
        start = time.perf_counter()
        rep = _analyze_json(name)
        slowest = max(slowest, time.perf_counter() - start)
        got[name] = rep["observability"]["dim"]
    _, _, res = analysed("unicycle_s2")
    span = res.observability.O.span(oracle)
    s2_span = span.rank == 1 and not span.test((ZERO, ONE, parse("-1")))
    ok = got == expected and s2_span and slowest < 60
    assert report(1, ok, f"dims {got}, unicycle_s2 span [0,1,-1]: {s2_span}, slowest {slowest:.1f}s")


def test_criterion_2_identifiability_verdicts():
    expected = {
        "hiv": {"lambda": True, "rho": True, "c": True, "delta": False, "N": False, "eta": False},
        "seiar": {"mu1": True, "mu2": True, "p": True, "gamma": False, "beta": False},
        "toggle": {k: False for k in ("k01", "k1", "n1", "k02", "k2", "n2", "W1", "W2", "W1_dot", "W2_dot")},
        "unicycle_s1": {"omega": True},
        "unicycle_s2": {"v": False},
    }
    wrong = []
    for name, want in expected.items():
        ident = _analyze_json(name)["identifiability"]
        verdict = dict(ident["constants"])
        verdict.update({k: v["identifiable"] for k, v in ident["tv_params"].items()})
        verdict.update(ident["inputs"])
        wrong += [f"{name}.{k}" for k, v in want.items() if verdict.get(k) != v]
    assert report(2, not wrong, "all verdicts match" if not wrong else f"mismatch {wrong}")


def test_criterion_3_symmetry_directions():
    oracle = RankOracle()
    out = {}
    for name in ("hiv", "seiar", "toggle", "unicycle_s1", "unicycle_s2"):
        model, _, res = analysed(name)
        n = res.E.model.n
        span = GenericSpan(oracle, n)
        for xi in res.state_symmetries:
            span.add(xi)
        refs = [tuple(v) + (ZERO,) * (n - len(v)) for v in model.reference_symmetries]
        inside = all(not span.test(xi) and in_orthogonal(res.observability.O, xi, oracle) for xi in refs)
        if len(res.state_symmetries) == 1:
            inside = inside and proportional(refs[0], res.state_symmetries[0], oracle)
        out[name] = f"{len(refs)}/{len(res.state_symmetries)} {'ok' if inside else 'off'}"
    ok = all(v.endswith("ok") for v in out.values())
    assert report(3, ok, f"reference generators in the computed null space: {out}")


def test_criterion_4_closed_form_numbers():
    pair, scenarios = _pair("hiv", 0)
    sc = scenarios["default"]
    base = {"T_U": 600.0, "T_I": 0.0, "V": 1e5, "lambda": 36.0, "rho": 0.108, "delta": 0.5, "N": 1000.0,
            "c": 3.0, "eta": 1e-5}
    cf = closed_form("hiv", -3.0, base)
    sim = Simulator(pair.model)
    x0, u, w = _signals(pair.model, sc)
    _, X, U, W = _half_grid(sim, x0, u, w, 0.0, 201 / 400, 2)
    T = np.array([0.0, 201 / 800, 201 / 400, 3 * 201 / 800, 201 / 400 * 2])[: X.shape[1]]
    flowed = TauFlow(pair).run(X, W, U, T, [-3.0])[-3.0][0]
    names = list(pair.model.x)
    n_num, d_num = flowed[names.index("N"), 0], flowed[names.index("delta"), 0]
    interval = admissible_interval(pair, sc)
    tau_star = interval["upper"]
    gamma = closed_form("seiar_sym2", 10, {"gamma": 0.25})["gamma"]
    gamma_neg = closed_form("seiar_sym2", -0.05, {"gamma": 0.25})["gamma"]
    checks = {
        "tau*": (tau_star, 2.2533, 1e-3),
        "N'(-3)": (n_num, 723.2, 0.5),
        "delta'(-3)": (d_num, 0.2494, 1e-3),
        "gamma'(10)": (gamma, 5506.6, 1.0),
        "gamma'(-0.05)": (gamma_neg, 0.2378, 1e-3),
    }
    ok = all(abs(v - ref) <= tol for v, ref, tol in checks.values())
    ok = ok and abs(cf["N"] - n_num) < 1e-6 and abs(cf["delta"] - d_num) < 1e-9
    detail = ", ".join(f"{k}={v:.6g}" for k, (v, _, _) in checks.items())
    assert report(4, ok, detail)


def test_criterion_5_output_invariance():
    start = time.perf_counter()
    cases = [("hiv", 0, "default", (-3.0, -1.0, 1.0, 2.0)),
             ("seiar", 1, "const", (-0.05, 1.0, 10.0)),
             ("seiar", 1, "cos", (-0.1, 1.0, 10.0))]
    worst, passed, controls = {}, [], []
    for name, k, scen, taus in cases:
        pair, scenarios = _pair(name, k)
        sc = scenarios[scen]
        bundle = symmetry_flow(pair, sc, FlowSpec(taus=taus))
        cert = certify_indistinguishability(bundle)
        admissible = sorted(cert["admissible_taus"]) == sorted(taus)
        passed.append(cert["pass"] and admissible)
        worst[f"{name}/{scen}"] = cert["worst"]["deviation"]
        bad = symmetry_flow(pair, sc, FlowSpec(taus=(taus[-2],), dt=bundle.dt, perturb=0.01))
        controls.append(not certify_indistinguishability(bad)["pass"])
    elapsed = time.perf_counter() - start
    ok = all(passed) and all(controls) and elapsed <= 300
    detail = ", ".join(f"{k} worst {v:.2e}" for k, v in worst.items())
    assert report(5, ok, f"{detail}; perturbed controls fail: {all(controls)}; {elapsed:.0f}s")


def test_criterion_6_toggle_identities():
    got = {k: all(residual_is_zero(e, trials=8) for e in toggle_residuals(k)) for k in range(1, 7)}
    assert report(6, all(got.values()), f"sets holding: {[k for k, v in got.items() if v]}")


def _random_expr(rng, depth):
    if depth == 0 or rng.random() < 0.25:
        return rng.choice(["x", "y", "z", str(rng.randint(1, 5))])
    a, b = _random_expr(rng, depth - 1), _random_expr(rng, depth - 1)
    return rng.choice([f"({a} + {b})", f"({a} - {b})", f"({a}*{b})", f"({a})/(1 + ({b})^2)", f"({a})^2",
                       f"sin({a})", f"cos({a})", f"log(2 + ({a})^2)", f"exp(sin({a}))"])


def _munu_identity(munu, oracle):
    k = len(munu.mu)
    for i in range(k):
        for j in range(k):
            e = add(*(mul(munu.mu[i][a], munu.nu[a][j]) for a in range(k)))
            if not oracle.zero(e - (ONE if i == j else ZERO)):
                return False
    return True


def test_criterion_7_property_suites():
    oracle = RankOracle()
    results = {}
    results["mu*nu=I"] = all(_munu_identity(analysed(n)[2].observability.munu, oracle)
                             for n in ("unicycle_s1", "unicycle_s2", "hiv", "seiar", "toggle"))

    rng = random.Random(20240607)
    fd_ok = 0
    for _ in range(100):
        e = parse(_random_expr(rng, 4))
        pt = {v: rng.uniform(0.5, 2.0) for v in "xyz"}
        good = True
        for v in "xyz":
            d = evaluate(diff(e, v), pt, exact=False)
            h = 1e-6
            fd = (evaluate(e, {**pt, v: pt[v] + h}, exact=False)
                  - evaluate(e, {**pt, v: pt[v] - h}, exact=False)) / (2 * h)
            good &= abs(d - fd) <= 1e-5 * max(1.0, abs(d), abs(evaluate(e, pt, exact=False)))
        fd_ok += good
    results["derivative vs finite difference (100)"] = fd_ok == 100

    coords = ("a", "b", "c", "d")
    f = (parse("b"), parse("c*a"), parse("d"), ZERO)
    res = codistribution_closure(coords, [parse("a")], [lie_operator(f, coords)], oracle)
    h = res.history
    results["closure monotone and bounded"] = (all(x <= y for x, y in zip(h, h[1:])) and h[-1] <= 4
                                               and res.steps <= 4 - h[0] + 1)

    pair, scenarios = _pair("hiv", 0)
    sim = Simulator(pair.model)
    x0, u, w = _signals(pair.model, scenarios["default"])
    T, X, U, W = _half_grid(sim, x0, u, w, 0.0, 0.5, 100)
    flow = TauFlow(pair)
    X0, W0 = flow.run(X, W, U, T, [0.0])[0.0]
    results["tau=0 identity"] = np.array_equal(X0, X) and np.array_equal(W0, W)
    Xa, Wa = flow.run(X, W, U, T, [0.7])[0.7]
    Xb, Wb = flow.run(Xa, Wa, U, T, [-1.2])[-1.2]
    Xc, Wc = flow.run(X, W, U, T, [-0.5])[-0.5]
    scale = np.max(np.abs(np.concatenate([X, W])), axis=1, keepdims=True)
    gap = np.max(np.abs(np.concatenate([Xb, Wb]) - np.concatenate([Xc, Wc])) / scale)
    results["group property 1e-6"] = gap < 1e-6

    m = to_affine(model_from_dict({
        "name": "u", "states": ["rho", "phi", "theta"], "known_inputs": ["v"], "unknown_inputs": ["omega"],
        "dynamics": {"rho": "v*cos(theta-phi)", "phi": "v*sin(theta-phi)/rho", "theta": "omega"},
        "outputs": ["phi-theta", "rho", "phi"],
    }))
    ident = identifiability(m, oracle)
    mdeg = len(ident.observability.htilde)
    results["observable-state consistency"] = ident.observable_state and ident.inputs == {
        w_: j < mdeg for j, w_ in enumerate(ident.E.model.w)}
    ok = all(results.values())
    assert report(7, ok, ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in results.items()))


def test_criterion_8_first_epidemic_symmetry_has_no_admissible_tau():
    pair, scenarios = _pair("seiar", 0)
    found = {}
    for scen in ("const", "cos"):
        out = admissible_interval(pair, scenarios[scen])
        found[scen] = out
    empty = all(v["empty"] for v in found.values())
    detail = "; ".join(f"{k}: [{v['lower']:.4g}, {v['upper']:.4g}] ({v['lower_reason']}/{v['upper_reason']})"
                       for k, v in found.items())
    assert report(8, empty, f"admissible interval {detail}")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted((k, v) for k, v in globals().items() if k.startswith("test_criterion")):
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
