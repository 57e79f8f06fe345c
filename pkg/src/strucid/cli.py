"""Command line front end: analyze, indist, whatif, models, trace."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .errors import ModelValidationError, MultipleSymmetries, StrucidError
from .ident import identifiability
from .indist import (
    DEFAULT_TOL,
    FlowSpec,
    admissible_interval,
    certify_indistinguishability,
    choose_dt,
    hiv_measurement_inversion,
    pair_from_identifiability,
    single_symmetry_recovery,
    symmetry_flow,
    write_csv,
)
from .liegeo import RankOracle
from .model import BUILTIN_NAMES, builtin, builtin_general, load, to_affine
from .symexpr import DEFAULT_SEED, parse, render
from .uio import MAX_ROUNDS, Trace

TOOL = "strucid"


# -- plumbing ------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable, allow_nan=False)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (set, frozenset)):
        return sorted(v)
    return str(v)


def _finite(obj):
    """JSON has no inf or nan; replace them with strings."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return str(float(obj))
    return obj


def _oracle(args) -> RankOracle:
    return RankOracle(trials=args.trials, mode=args.mode, seed=args.seed)


def _load_model(args):
    """(affine model, scenarios, general model) from --builtin or a file path."""
    if args.builtin and args.model:
        raise ModelValidationError("give either --builtin or a model file, not both")
    if args.builtin:
        model, scenarios = builtin(args.builtin)
        return model, scenarios, builtin_general(args.builtin)
    if not args.model:
        raise ModelValidationError("a model file or --builtin name is required")
    try:
        gm = load(args.model)
    except OSError as exc:
        raise ModelValidationError(f"cannot read {args.model}: {exc.strerror}", path=args.model) from None
    model = to_affine(gm)
    return model, dict(model.scenarios), gm


def _scenario(scenarios: dict, name: str | None):
    if not scenarios:
        raise ModelValidationError("the model has no data set")
    if name is None:
        return next(iter(scenarios.values()))
    if name not in scenarios:
        raise ModelValidationError(f"unknown data set {name!r}", known=list(scenarios))
    return scenarios[name]


def _write(args, name: str, text: str) -> str | None:
    if not args.out:
        return None
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _emit(args, report: dict, lines: list):
    if args.json:
        sys.stdout.write(_dump(_finite(report)) + "\n")
    else:
        sys.stdout.write("\n".join(lines) + "\n")


def _header(args, gm) -> dict:
    return {"tool": TOOL, "version": __version__, "seed": args.seed, "trials": args.trials,
            "arithmetic": args.mode, "model": {"name": gm.name, "digest": gm.digest()}}


def _analysis(model, args, trace=None):
    return identifiability(model, _oracle(args), trace=trace, max_rounds=args.max_rounds)


def _verdict_lines(rep: dict) -> list:
    obs, ident = rep["observability"], rep["identifiability"]
    lines = [f"observability codistribution: dim {obs['dim']} of {obs['n']}"]
    lines.append("  unobservable: " + (", ".join(k for k, v in obs["per_state"].items() if not v) or "none"))
    ok = [k for k, v in ident["constants"].items() if v]
    bad = [k for k, v in ident["constants"].items() if not v]
    lines.append("constant parameters identifiable: " + (", ".join(ok) or "none"))
    lines.append("constant parameters unidentifiable: " + (", ".join(bad) or "none"))
    for name, v in ident["tv_params"].items():
        lines.append(f"signal {name}: {'identifiable' if v['identifiable'] else 'unidentifiable'}")
    for k, xi in enumerate(rep["symmetries"]["state"], 1):
        lines.append(f"symmetry {k}: [{', '.join(xi)}]")
    return lines


# -- commands --------------------------------------------------------------------


def cmd_analyze(args) -> int:
    model, _, gm = _load_model(args)
    trace = Trace()
    result = _analysis(model, args, trace)
    rep = result.report()
    report = _header(args, gm)
    report.update(rep)
    report["trace"] = _write(args, "trace.jsonl", trace.to_jsonl())
    _write(args, "report.json", _dump(_finite(report)) + "\n")
    _emit(args, report, [f"model {gm.name} ({gm.digest()[:12]})"] + _verdict_lines(rep))
    return 0


def _symmetry(model, result, sym: int | None, oracle):
    refs = model.reference_symmetries
    if refs:
        k = sym or 1
        if not 1 <= k <= len(refs):
            raise ModelValidationError(f"symmetry index {k} out of range 1..{len(refs)}")
        return pair_from_identifiability(result, 0, refs[k - 1]), k, "reference"
    k = sym or 1
    if not 1 <= k <= len(result.state_symmetries):
        raise ModelValidationError(f"symmetry index {k} out of range 1..{len(result.state_symmetries)}")
    return pair_from_identifiability(result, k - 1), k, "computed"


def _taus(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ModelValidationError(f"bad tau list {text!r}") from None


def cmd_indist(args) -> int:
    model, scenarios, gm = _load_model(args)
    scenario = _scenario(scenarios, args.scenario)
    oracle = _oracle(args)
    result = _analysis(model, args)
    if not result.state_symmetries:
        raise ModelValidationError("the state is observable; there is no symmetry to flow along")
    pair, k, origin = _symmetry(model, result, args.sym, oracle)
    tol = args.tol if args.tol is not None else DEFAULT_TOL
    dt = args.dt or choose_dt(pair.model, scenario, tol)
    report = _header(args, gm)
    report.update({
        "scenario": scenario.name,
        "symmetry": {"index": k, "origin": origin, "xi": [render(c) for c in pair.xi],
                     "chi": [render(c) for c in pair.uchi], "x": list(pair.model.x), "w": list(pair.model.w)},
        "dt": dt,
    })
    interval = admissible_interval(pair, scenario, dt=dt, tol=tol)
    report["admissible"] = interval
    lines = [f"model {gm.name}, data set {scenario.name}, symmetry {k} ({origin}), dt {dt:g}",
             f"admissible tau: [{interval['lower']:.6g}, {interval['upper']:.6g}]"
             f" ({interval['lower_reason']} / {interval['upper_reason']})"]
    if interval["empty"]:
        lines.append("admissible set is empty")
    code = 0
    if args.taus:
        spec = FlowSpec(taus=_taus(args.taus), dt=dt, tol=tol, perturb=args.perturb)
        bundle = symmetry_flow(pair, scenario, spec, oracle)
        cert = certify_indistinguishability(bundle, tol)
        report["trajectories"] = bundle.summary()
        report["certification"] = cert
        if args.out:
            report["csv"] = sorted(os.path.basename(p) for p in write_csv(bundle, args.out))
        worst = cert["worst"]
        lines.append(f"certification: {'pass' if cert['pass'] else 'FAIL'} at tol {tol:g}")
        if worst.get("deviation") is not None and math.isfinite(worst["deviation"]):
            lines.append(f"  worst deviation {worst['deviation']:.3e} at tau={worst['tau']:g}"
                         f" on {worst.get('output_name')}")
        for r in cert["rejected"]:
            why = "blowup" if r["blowup"] else "sign change in " + ", ".join(r["violations"])
            lines.append(f"  rejected tau={r['tau']:g}: {why}")
        code = 0 if cert["pass"] else 1
    _write(args, "certification.json", _dump(_finite(report)) + "\n")
    _emit(args, report, lines)
    return code


def _flip(before: dict, after: dict) -> dict:
    return {k: {"before": before.get(k), "after": v} for k, v in after.items() if before.get(k) != v}


def _diff(before: dict, after: dict) -> dict:
    b, a = before["identifiability"], after["identifiability"]
    states = {k: v for k, v in after["observability"]["per_state"].items() if k not in a["constants"]}
    return {
        "observability_dim": {"before": before["observability"]["dim"], "after": after["observability"]["dim"]},
        "states": _flip(before["observability"]["per_state"], states),
        "constants": _flip(b["constants"], a["constants"]),
        "signals": _flip({k: v["identifiable"] for k, v in b["tv_params"].items()},
                         {k: v["identifiable"] for k, v in a["tv_params"].items()}),
        "symmetries": {"before": len(before["symmetries"]["state"]), "after": len(after["symmetries"]["state"])},
    }


def _measurement(text: str) -> tuple[str, float]:
    name, sep, at = text.partition("@")
    try:
        if not sep:
            raise ValueError
        return name.strip(), float(at)
    except ValueError:
        raise ModelValidationError(f"expected STATE@TIME, got {text!r}") from None


def _whatif_output(args, model, gm) -> tuple[dict, list]:
    expr = parse(args.add_output)
    before = _analysis(model, args).report()
    after = _analysis(model.with_output(expr), args).report()
    diff = _diff(before, after)
    all_ident = all(after["identifiability"]["constants"].values()) and all(
        v["identifiable"] for v in after["identifiability"]["tv_params"].values())
    report = {"added_output": render(expr), "before": before, "after": after, "changes": diff,
              "all_identifiable": all_ident, "all_observable": all(after["observability"]["per_state"].values())}
    lines = [f"added output {render(expr)}",
             f"observability dim {diff['observability_dim']['before']} -> {diff['observability_dim']['after']}"]
    for group in ("states", "constants", "signals"):
        for k, v in diff[group].items():
            lines.append(f"  {k}: {v['before']} -> {v['after']}")
    lines.append("everything identifiable" if all_ident else "some quantities remain unidentifiable")
    return report, lines


def _whatif_measure(args, model, scenarios, gm) -> tuple[dict, list]:
    name, t_star = _measurement(args.measure)
    scenario = _scenario(scenarios, args.scenario)
    oracle = _oracle(args)
    result = _analysis(model, args)
    gens = len(result.state_symmetries)
    if gens != 1:
        raise MultipleSymmetries("one extra measurement fixes a single symmetry only", symmetries=gens)
    pair, k, origin = _symmetry(model, result, 1, oracle)
    pair.model.state_index(name)
    tol = args.tol if args.tol is not None else DEFAULT_TOL
    dt = args.dt or choose_dt(pair.model, scenario, tol)
    disguise = args.disguise
    bundle = symmetry_flow(pair, scenario, FlowSpec(taus=(disguise,), dt=dt, tol=tol), oracle)
    seen = bundle.results[disguise]
    if seen.x is None:
        raise ModelValidationError("the disguise tau is not admissible for this data set", tau=disguise)
    t = bundle.t
    j = int(np.argmin(np.abs(t - t_star)))
    i = pair.model.state_index(name)
    value = float(bundle.x[i, j])
    rec = single_symmetry_recovery(pair, gens, t, seen.x, seen.w, name, float(t[j]), value)
    truth = {s: float(bundle.x[r, j]) for r, s in enumerate(pair.model.x)}
    truth.update({s: float(bundle.w[r, j]) for r, s in enumerate(pair.model.w)})
    errors = {s: abs(rec.state[s] - truth[s]) for s in rec.state}
    report = {"scenario": scenario.name, "symmetry": {"index": k, "origin": origin},
              "disguise_tau": disguise, "dt": dt, "t_star_requested": t_star}
    report.update(rec.to_json())
    report["truth"] = truth
    report["abs_error"] = errors
    lines = [f"measured {name}({t[j]:g}) = {value:.10g} in the true world",
             f"recovered tau {rec.tau:.10g} (disguise was {disguise:g})"]
    lines += [f"  {s} = {rec.state[s]:.10g} (truth {truth[s]:.10g})" for s in rec.state]
    if gm.name == "hiv" and name == "T_I":
        x = pair.model.x
        tau, delta = hiv_measurement_inversion(truth["rho"], float(seen.x[x.index("delta"), j]),
                                               float(seen.x[x.index("T_I"), j]), value)
        report["algebraic_check"] = {"tau": tau, "delta": delta,
                                     "agrees": abs(tau + rec.tau) < 1e-6 and abs(delta - rec.state["delta"]) < 1e-6}
        lines.append(f"algebraic inversion: tau {tau:.10g}, delta {delta:.10g}")
    return report, lines


def cmd_whatif(args) -> int:
    if bool(args.add_output) == bool(args.measure):
        raise ModelValidationError("give exactly one of --add-output or --measure")
    model, scenarios, gm = _load_model(args)
    report = _header(args, gm)
    if args.add_output:
        body, lines = _whatif_output(args, model, gm)
    else:
        body, lines = _whatif_measure(args, model, scenarios, gm)
    report.update(body)
    _write(args, "whatif.json", _dump(_finite(report)) + "\n")
    _emit(args, report, lines)
    return 0


def cmd_models(args) -> int:
    rows = []
    for name in BUILTIN_NAMES:
        gm = builtin_general(name)
        rows.append({"name": name, "states": list(gm.states), "unknown_inputs": list(gm.unknown_inputs),
                     "tv_params": list(gm.tv_params), "known_inputs": list(gm.known_inputs),
                     "constant_params": list(gm.constant_params), "scenarios": sorted(gm.scenarios),
                     "digest": gm.digest()})
    lines = [f"{r['name']:12s} states={','.join(r['states'])} data={','.join(r['scenarios'])}" for r in rows]
    _emit(args, {"tool": TOOL, "version": __version__, "models": rows}, lines)
    return 0


def cmd_trace(args) -> int:
    try:
        with open(args.file, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ModelValidationError(f"cannot read {args.file}: {exc.strerror}", path=args.file) from None
    records = []
    for no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ModelValidationError(f"line {no} is not JSON: {exc.msg}", line=no) from None
    if args.step:
        records = [r for r in records if r.get("step") == args.step]
    lines = []
    for r in records:
        rest = {k: v for k, v in r.items() if k not in ("seq", "step")}
        body = " ".join(f"{k}={json.dumps(v, sort_keys=True)}" for k, v in sorted(rest.items()))
        lines.append(f"{r.get('seq', '?'):>4} {r.get('step', '?'):<16} {body}")
    _emit(args, {"records": records}, lines)
    return 0


# -- parser --------------------------------------------------------------------


def _common(top: bool) -> argparse.ArgumentParser:
    """Global flags; accepted before or after the command name."""
    p = argparse.ArgumentParser(add_help=False)

    def default(v):
        return v if top else argparse.SUPPRESS

    p.add_argument("--seed", type=int, default=default(DEFAULT_SEED), help="seed of the random evaluation points")
    p.add_argument("--trials", type=int, default=default(5), help="evaluation points per rank decision")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--float", dest="mode", action="store_const", const="float", default=default("auto"),
                      help="floating-point ranks")
    mode.add_argument("--exact", dest="mode", action="store_const", const="exact", default=default("auto"),
                      help="exact rational ranks")
    p.add_argument("--tol", type=float, default=default(None),
                   help=f"output deviation tolerance (default {DEFAULT_TOL:g})")
    p.add_argument("--dt", type=float, default=default(None), help="integration step (default: automatic)")
    p.add_argument("--out", default=default(None), metavar="DIR", help="directory for reports, traces and CSV files")
    p.add_argument("--json", action="store_true", default=default(False), help="print the full JSON report")
    p.add_argument("--max-rounds", type=int, default=default(MAX_ROUNDS), help="cap on unknown-input extensions")
    return p


def _model_args(p):
    p.add_argument("model", nargs="?", help="model JSON file")
    p.add_argument("--builtin", choices=BUILTIN_NAMES, help="use a built-in model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL, description=__doc__, parents=[_common(True)])
    common = _common(False)
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="observability and identifiability report")
    _model_args(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("indist", parents=[common], help="indistinguishable trajectories along a symmetry")
    _model_args(p)
    p.add_argument("--scenario", "--profile", dest="scenario", help="data set name")
    p.add_argument("--sym", type=int, default=None, help="symmetry index, 1-based")
    p.add_argument("--taus", default=None, help="comma separated group parameters")
    p.add_argument("--perturb", type=float, default=0.0, help="offset added to the transformed inputs")
    p.set_defaults(func=cmd_indist)

    p = sub.add_parser("whatif", parents=[common], help="effect of one more output or measurement")
    _model_args(p)
    p.add_argument("--add-output", default=None, metavar="EXPR", help="extra output expression")
    p.add_argument("--measure", default=None, metavar="STATE@T", help="one extra measurement")
    p.add_argument("--scenario", "--profile", dest="scenario", help="data set name")
    p.add_argument("--disguise", type=float, default=1.0, help="tau of the observed world (default 1)")
    p.set_defaults(func=cmd_whatif)

    p = sub.add_parser("models", parents=[common], help="list built-in models")
    p.set_defaults(func=cmd_models)

    p = sub.add_parser("trace", parents=[common], help="pretty-print a trace file")
    p.add_argument("file")
    p.add_argument("--step", default=None, help="show only this step")
    p.set_defaults(func=cmd_trace)
    return parser


def _error(payload: dict, code: int) -> int:
    sys.stderr.write(json.dumps(_finite(payload), sort_keys=True, default=_jsonable) + "\n")
    return code


def _glue(argv: list) -> list:
    """Let ``--taus -3,-1`` through; argparse would read the value as a flag."""
    out = []
    it = iter(argv)
    for a in it:
        if a == "--taus":
            nxt = next(it, None)
            out.append(a if nxt is None else f"--taus={nxt}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_glue(list(sys.argv[1:] if argv is None else argv)))
    try:
        return args.func(args)
    except StrucidError as exc:
        code = exc.exit_code if exc.exit_code in (2, 3) else 3
        return _error(exc.to_dict(), code)
    except RecursionError:
        return _error({"error": "ExpressionTooLarge", "message": "expression nesting too deep"}, 3)


if __name__ == "__main__":
    sys.exit(main())
