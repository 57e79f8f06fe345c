"""Model schema: general and input-affine systems, validation, JSON I/O, builtins."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ModelValidationError, NonAffineOutput, ParseError, UnknownModel
from .symexpr import (
    ONE,
    PI,
    TIME,
    ZERO,
    Expr,
    diff,
    evaluate,
    is_identically_zero,
    parse,
    render,
    substitute,
)

VectorField = tuple  # length-n tuple of Expr
CovectorField = tuple
ScalarField = Expr

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_RESERVED = {TIME, PI, "sin", "cos", "log", "exp"}
MODEL_KEYS = {"name", "states", "known_inputs", "unknown_inputs", "constant_params", "tv_params",
              "dynamics", "outputs", "scenarios"}
SCENARIO_KEYS = {"initial", "params", "tv_profiles", "t_span"}


@dataclass(frozen=True)
class Scenario:
    """A named data set: initial state, parameter values and input profiles."""

    name: str
    initial: dict
    params: dict
    tv_profiles: dict  # name -> Expr in t
    t_span: tuple

    def to_json(self) -> dict:
        return {
            "initial": dict(self.initial),
            "params": dict(self.params),
            "tv_profiles": {k: render(v) for k, v in self.tv_profiles.items()},
            "t_span": list(self.t_span),
        }


@dataclass
class GeneralModel:
    """Dynamics that may depend non-affinely on inputs and parameters."""

    name: str
    states: list
    dynamics: dict  # state -> Expr
    outputs: list
    known_inputs: list = field(default_factory=list)
    unknown_inputs: list = field(default_factory=list)
    constant_params: list = field(default_factory=list)
    tv_params: list = field(default_factory=list)
    scenarios: dict = field(default_factory=dict)

    @property
    def unknown(self) -> list:
        """Unknown time-varying signals: declared unknown inputs, then time-varying parameters."""
        return list(self.unknown_inputs) + list(self.tv_params)

    def all_names(self) -> list:
        return (list(self.states) + list(self.known_inputs) + list(self.unknown_inputs)
                + list(self.constant_params) + list(self.tv_params))

    def validate(self) -> "GeneralModel":
        names = self.all_names()
        seen = set()
        for n in names:
            if not isinstance(n, str) or not _NAME.match(n):
                raise ModelValidationError(f"invalid name {n!r}", field="names")
            if n in _RESERVED:
                raise ModelValidationError(f"name {n!r} is reserved", field="names")
            if n in seen:
                raise ModelValidationError(f"duplicate name {n!r}", field="names")
            seen.add(n)
        if not self.states:
            raise ModelValidationError("a model needs at least one state", field="states")
        if set(self.dynamics) != set(self.states):
            missing = sorted(set(self.states) - set(self.dynamics))
            extra = sorted(set(self.dynamics) - set(self.states))
            raise ModelValidationError("dynamics must have one row per state", missing=missing, extra=extra)
        if not self.outputs:
            raise ModelValidationError("a model needs at least one output", field="outputs")
        allowed = seen | {TIME}
        for where, e in [(f"dynamics.{k}", v) for k, v in self.dynamics.items()] + \
                        [(f"outputs[{i}]", e) for i, e in enumerate(self.outputs)]:
            bad = sorted(e.free - allowed)
            if bad:
                raise ModelValidationError(f"undeclared symbols {bad} in {where}", field=where, symbols=bad)
        for sc in self.scenarios.values():
            _validate_scenario(self, sc)
        return self

    def with_output(self, expr: Expr) -> "GeneralModel":
        return GeneralModel(self.name, list(self.states), dict(self.dynamics), list(self.outputs) + [expr],
                            list(self.known_inputs), list(self.unknown_inputs), list(self.constant_params),
                            list(self.tv_params), dict(self.scenarios)).validate()

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "states": list(self.states),
            "known_inputs": list(self.known_inputs),
            "unknown_inputs": list(self.unknown_inputs),
            "constant_params": list(self.constant_params),
            "tv_params": list(self.tv_params),
            "dynamics": {k: render(self.dynamics[k]) for k in self.states},
            "outputs": [render(e) for e in self.outputs],
            "scenarios": {k: v.to_json() for k, v in sorted(self.scenarios.items())},
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _validate_scenario(gm: GeneralModel, sc: Scenario) -> None:
    where = f"scenarios.{sc.name}"
    missing = [s for s in gm.states if s not in sc.initial]
    if missing:
        raise ModelValidationError(f"{where}: no initial value for {missing}", field=where)
    extra = sorted(set(sc.initial) - set(gm.states))
    if extra:
        raise ModelValidationError(f"{where}: initial values for unknown states {extra}", field=where)
    missing = [q for q in gm.constant_params if q not in sc.params]
    if missing:
        raise ModelValidationError(f"{where}: no value for parameters {missing}", field=where)
    extra = sorted(set(sc.params) - set(gm.constant_params))
    if extra:
        raise ModelValidationError(f"{where}: values for undeclared parameters {extra}", field=where)
    signals = list(gm.known_inputs) + gm.unknown
    missing = [s for s in signals if s not in sc.tv_profiles]
    if missing:
        raise ModelValidationError(f"{where}: no profile for {missing}", field=where)
    extra = sorted(set(sc.tv_profiles) - set(signals))
    if extra:
        raise ModelValidationError(f"{where}: profiles for undeclared signals {extra}", field=where)
    for k, e in sc.tv_profiles.items():
        if e.free - {TIME}:
            raise ModelValidationError(f"{where}: profile of {k} may only depend on t", field=where)
    a, b = sc.t_span
    if not a < b:
        raise ModelValidationError(f"{where}: t_span must be increasing", field=where)


# -- affine systems ----------------------------------------------------------


@dataclass
class OdeModel:
    """Input-affine system x' = g0 + sum f^k u_k + sum g^j w_j, y = h(x)."""

    name: str
    x: tuple
    u: tuple
    w: tuple
    g0: tuple
    f: tuple
    g: tuple
    h: tuple
    kinds: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)
    scenarios: dict = field(default_factory=dict)
    reference_symmetries: tuple = ()
    general: GeneralModel | None = None

    def __post_init__(self):
        self.x = tuple(self.x)
        self.u = tuple(self.u)
        self.w = tuple(self.w)
        self.g0 = tuple(self.g0)
        self.f = tuple(tuple(c) for c in self.f)
        self.g = tuple(tuple(c) for c in self.g)
        self.h = tuple(self.h)
        for n in self.x:
            self.kinds.setdefault(n, "state")
        for n in self.u + self.w:
            self.sources.setdefault(n, (n, 0))
        self.validate()

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def m_u(self) -> int:
        return len(self.u)

    @property
    def m_w(self) -> int:
        return len(self.w)

    @property
    def p(self) -> int:
        return len(self.h)

    @property
    def time_varying(self) -> bool:
        return any(TIME in e.free for e in self.fields_flat())

    def fields_flat(self):
        yield from self.g0
        for c in self.f:
            yield from c
        for c in self.g:
            yield from c
        yield from self.h

    def validate(self) -> "OdeModel":
        n = len(self.x)
        if len(set(self.x + self.u + self.w)) != n + len(self.u) + len(self.w):
            raise ModelValidationError("state and input names must be unique")
        if len(self.g0) != n:
            raise ModelValidationError("drift length differs from the state dimension")
        if len(self.f) != len(self.u) or len(self.g) != len(self.w):
            raise ModelValidationError("one field per input is required")
        for c in self.f + self.g:
            if len(c) != n:
                raise ModelValidationError("input field length differs from the state dimension")
        allowed = set(self.x) | {TIME}
        for e in self.fields_flat():
            bad = e.free - allowed
            if bad:
                raise ModelValidationError(f"field expression depends on {sorted(bad)}", symbols=sorted(bad))
        return self

    def dynamics(self) -> list:
        """Right-hand side with inputs as symbols."""
        from .symexpr import add, mul, var

        rows = []
        for i in range(self.n):
            terms = [self.g0[i]]
            terms += [mul(self.f[k][i], var(s)) for k, s in enumerate(self.u)]
            terms += [mul(self.g[j][i], var(s)) for j, s in enumerate(self.w)]
            rows.append(add(*terms))
        return rows

    def replace(self, **changes) -> "OdeModel":
        data = dict(name=self.name, x=self.x, u=self.u, w=self.w, g0=self.g0, f=self.f, g=self.g, h=self.h,
                    kinds=dict(self.kinds), sources=dict(self.sources), scenarios=self.scenarios,
                    reference_symmetries=self.reference_symmetries, general=self.general)
        data.update(changes)
        return OdeModel(**data)

    def with_output(self, expr: Expr) -> "OdeModel":
        model = self.replace(h=self.h + (expr,))
        if model.general is not None:
            model.general = model.general.with_output(expr)
        return model

    def state_index(self, name: str) -> int:
        try:
            return self.x.index(name)
        except ValueError:
            raise ModelValidationError(f"unknown state {name!r}", field="state") from None

    def describe(self) -> dict:
        return {
            "name": self.name,
            "x": list(self.x),
            "u": list(self.u),
            "w": list(self.w),
            "g0": [render(e) for e in self.g0],
            "f": [[render(e) for e in c] for c in self.f],
            "g": [[render(e) for e in c] for c in self.g],
            "h": [render(e) for e in self.h],
        }


def _derivative_name(name: str, taken: set) -> str:
    base = f"{name}_dot"
    out = base
    k = 2
    while out in taken:
        out = f"{base}{k}"
        k += 1
    taken.add(out)
    return out


def _affine_inputs(rows: Sequence[Expr], candidates: list) -> list:
    """Largest prefix-stable subset of ``candidates`` the rows are jointly affine in."""
    current = list(candidates)
    changed = True
    while changed:
        changed = False
        for s in current:
            firsts = [diff(r, s) for r in rows]
            if any(not is_identically_zero(diff(d, s2)) for d in firsts for s2 in current):
                current.remove(s)
                changed = True
                break
    return current


def to_affine(gm: GeneralModel) -> OdeModel:
    """Bring a general model into input-affine form.

    Inputs entering affinely stay inputs.  The others are appended to the
    state with their time derivative as the new input; constant parameters
    are appended last, in declaration order, with zero dynamics.
    """
    gm.validate()
    rows = [gm.dynamics[s] for s in gm.states]
    u_all = list(gm.known_inputs)
    w_all = gm.unknown
    for i, e in enumerate(gm.outputs):
        bad = sorted(e.free & set(u_all + w_all))
        if bad:
            raise NonAffineOutput(f"output {i} depends on the inputs {bad}", output=i, symbols=bad)
    affine = set(_affine_inputs(rows, u_all + w_all))
    u_keep = [s for s in u_all if s in affine]
    w_keep = [s for s in w_all if s in affine]
    u_app = [s for s in u_all if s not in affine]
    w_app = [s for s in w_all if s not in affine]

    x = list(gm.states) + u_app + w_app + list(gm.constant_params)
    taken = set(gm.all_names())
    kinds = {s: "state" for s in gm.states}
    kinds.update({s: "known_input" for s in u_app})
    kinds.update({s: "unknown_input" for s in w_app})
    kinds.update({s: "constant" for s in gm.constant_params})
    u_new = [_derivative_name(s, taken) for s in u_app]
    w_new = [_derivative_name(s, taken) for s in w_app]
    u = u_keep + u_new
    w = w_keep + w_new
    sources = {s: (s, 0) for s in u_keep + w_keep}
    sources.update({d: (s, 1) for s, d in zip(u_app + w_app, u_new + w_new)})

    zero_inputs = {s: ZERO for s in u_keep + w_keep}
    n0 = len(gm.states)
    n = len(x)
    g0 = [substitute(r, zero_inputs) for r in rows] + [ZERO] * (n - n0)

    def column(sym):
        return [diff(r, sym) for r in rows] + [ZERO] * (n - n0)

    f = [column(s) for s in u_keep]
    g = [column(s) for s in w_keep]
    for s in u_app:
        col = [ZERO] * n
        col[x.index(s)] = ONE
        f.append(col)
    for s in w_app:
        col = [ZERO] * n
        col[x.index(s)] = ONE
        g.append(col)
    return OdeModel(gm.name, x, u, w, g0, f, g, list(gm.outputs), kinds=kinds, sources=sources,
                    scenarios=dict(gm.scenarios), general=gm)


def scenario_signals(model: OdeModel, scenario: Scenario):
    """Initial state and input profiles of ``model`` under ``scenario``.

    Returns ``(x0, u_profiles, w_profiles)``; profiles are expressions in t.
    Appended signals start at their profile value and are driven by its
    time derivative.
    """
    t0 = scenario.t_span[0]
    x0 = []
    for s in model.x:
        kind = model.kinds.get(s, "state")
        if kind == "constant":
            x0.append(float(scenario.params[s]))
        elif s in scenario.initial:
            x0.append(float(scenario.initial[s]))
        elif s in scenario.tv_profiles:
            x0.append(float(evaluate(scenario.tv_profiles[s], {TIME: t0}, exact=False)))
        else:
            raise ModelValidationError(f"scenario {scenario.name!r} gives no value for {s!r}")

    def profile(name):
        src, order = model.sources.get(name, (name, 0))
        e = scenario.tv_profiles[src]
        for _ in range(order):
            e = diff(e, TIME)
        return e

    return x0, [profile(s) for s in model.u], [profile(s) for s in model.w]


# -- JSON ------------------------------------------------------------------


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def _expr(text, where: str) -> Expr:
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = repr(text)
    if not isinstance(text, str):
        raise ModelValidationError(f"{where} must be an expression string", field=where)
    try:
        return parse(text)
    except ParseError as exc:
        err = ParseError(f"{where}: {str(exc).rsplit(' at offset', 1)[0]}", exc.offset, text)
        err.details["field"] = where
        raise err from None


def _number(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ModelValidationError(f"{where} must be a number", field=where)
    if isinstance(v, str):
        e = _expr(v, where)
        if e.free:
            raise ModelValidationError(f"{where} must be constant", field=where)
        return float(evaluate(e, {}, exact=False))
    return float(v)


def _names(doc, key) -> list:
    v = doc.get(key, [])
    if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
        raise ModelValidationError(f"{key} must be a list of names", field=key)
    return list(v)


def model_from_dict(doc: Mapping) -> GeneralModel:
    if not isinstance(doc, dict):
        raise ModelValidationError("model document must be a JSON object")
    unknown = sorted(set(doc) - MODEL_KEYS)
    if unknown:
        raise ModelValidationError(f"unknown keys {unknown}", keys=unknown)
    for key in ("name", "states", "dynamics", "outputs"):
        if key not in doc:
            raise ModelValidationError(f"missing key {key!r}", field=key)
    if not isinstance(doc["name"], str):
        raise ModelValidationError("name must be a string", field="name")
    dyn = doc["dynamics"]
    if not isinstance(dyn, dict):
        raise ModelValidationError("dynamics must be an object", field="dynamics")
    outs = doc["outputs"]
    if not isinstance(outs, list):
        raise ModelValidationError("outputs must be a list", field="outputs")
    scenarios = {}
    raw_sc = doc.get("scenarios", {})
    if not isinstance(raw_sc, dict):
        raise ModelValidationError("scenarios must be an object", field="scenarios")
    for sname, sc in raw_sc.items():
        where = f"scenarios.{sname}"
        if not isinstance(sc, dict):
            raise ModelValidationError(f"{where} must be an object", field=where)
        bad = sorted(set(sc) - SCENARIO_KEYS)
        if bad:
            raise ModelValidationError(f"{where}: unknown keys {bad}", keys=bad)
        for sub in ("initial", "params", "tv_profiles"):
            if not isinstance(sc.get(sub, {}), dict):
                raise ModelValidationError(f"{where}.{sub} must be an object", field=f"{where}.{sub}")
        span = sc.get("t_span")
        if not isinstance(span, list) or len(span) != 2:
            raise ModelValidationError(f"{where}.t_span must be [a, b]", field=f"{where}.t_span")
        scenarios[sname] = Scenario(
            sname,
            {k: _number(v, f"{where}.initial.{k}") for k, v in sc.get("initial", {}).items()},
            {k: _number(v, f"{where}.params.{k}") for k, v in sc.get("params", {}).items()},
            {k: _expr(v, f"{where}.tv_profiles.{k}") for k, v in sc.get("tv_profiles", {}).items()},
            (_number(span[0], f"{where}.t_span"), _number(span[1], f"{where}.t_span")),
        )
    gm = GeneralModel(
        name=doc["name"],
        states=_names(doc, "states"),
        dynamics={k: _expr(v, f"dynamics.{k}") for k, v in dyn.items()},
        outputs=[_expr(v, f"outputs[{i}]") for i, v in enumerate(outs)],
        known_inputs=_names(doc, "known_inputs"),
        unknown_inputs=_names(doc, "unknown_inputs"),
        constant_params=_names(doc, "constant_params"),
        tv_params=_names(doc, "tv_params"),
        scenarios=scenarios,
    )
    return gm.validate()


def loads(text: str) -> GeneralModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", _byte_offset(text, exc.pos), text) from None
    return model_from_dict(doc)


def load(path) -> GeneralModel:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


# -- builtins --------------------------------------------------------------

_BUILTINS: dict = {}


def _register(name, doc, symmetries=()):
    _BUILTINS[name] = (doc, tuple(tuple(v) for v in symmetries))


_register("unicycle_s1", {
    "name": "unicycle_s1",
    "states": ["rho", "phi", "theta"],
    "known_inputs": ["v"],
    "unknown_inputs": ["omega"],
    "dynamics": {"rho": "v*cos(theta-phi)", "phi": "v*sin(theta-phi)/rho", "theta": "omega"},
    "outputs": ["phi-theta"],
    "scenarios": {"default": {
        "initial": {"rho": 2, "phi": 0.3, "theta": 1},
        "tv_profiles": {"v": "1+0.5*sin(t)", "omega": "0.3*cos(0.5*t)"},
        "t_span": [0, 10],
    }},
}, symmetries=[["0", "1", "1"]])

_register("unicycle_s2", {
    "name": "unicycle_s2",
    "states": ["rho", "phi", "theta"],
    "known_inputs": ["omega"],
    "unknown_inputs": ["v"],
    "dynamics": {"rho": "v*cos(theta-phi)", "phi": "v*sin(theta-phi)/rho", "theta": "omega"},
    "outputs": ["phi-theta"],
    "scenarios": {"default": {
        "initial": {"rho": 2, "phi": 0.3, "theta": 1},
        "tv_profiles": {"v": "1+0.5*sin(t)", "omega": "0.3*cos(0.5*t)"},
        "t_span": [0, 10],
    }},
}, symmetries=[["rho", "0", "0"]])

_HIV_PARAMS = {"lambda": 36, "rho": 0.108, "delta": 0.5, "N": 1000, "c": 3}
_HIV_ETA = "0.00009*(1-0.9*cos(pi*t/1000))"
_register("hiv", {
    "name": "hiv",
    "states": ["T_U", "T_I", "V"],
    "tv_params": ["eta"],
    "constant_params": ["lambda", "rho", "delta", "N", "c"],
    "dynamics": {
        "T_U": "lambda - rho*T_U - eta*T_U*V",
        "T_I": "eta*T_U*V - delta*T_I",
        "V": "N*delta*T_I - c*V",
    },
    "outputs": ["V", "T_U+T_I"],
    "scenarios": {
        "default": {
            "initial": {"T_U": 600, "T_I": 0, "V": 100000},
            "params": _HIV_PARAMS,
            "tv_profiles": {"eta": _HIV_ETA},
            "t_span": [0, 201],
        },
        "infected_start": {
            "initial": {"T_U": 600, "T_I": 50, "V": 100000},
            "params": _HIV_PARAMS,
            "tv_profiles": {"eta": _HIV_ETA},
            "t_span": [0, 201],
        },
    },
}, symmetries=[["T_I*delta", "-T_I*delta", "0", "0", "0", "delta*(delta-rho)", "N*rho", "0"]])

_SEIAR_INITIAL = {"S": "1-1e-10", "E": 0, "I": 1e-10, "A": 0, "R": 0}
_SEIAR_PARAMS = {"mu1": "1/3", "mu2": "1/10", "gamma": "1/4", "p": 0.14}
_register("seiar", {
    "name": "seiar",
    "states": ["S", "E", "I", "A", "R"],
    "tv_params": ["beta"],
    "constant_params": ["mu1", "mu2", "gamma", "p"],
    "dynamics": {
        "S": "-beta*S*(I+A)",
        "E": "beta*S*(I+A) - gamma*E",
        "I": "gamma*p*E - mu1*I",
        "A": "gamma*(1-p)*E - mu2*A",
        "R": "mu1*I + mu2*A",
    },
    "outputs": ["I", "A", "S+E+R"],
    "scenarios": {
        "const": {"initial": _SEIAR_INITIAL, "params": _SEIAR_PARAMS,
                  "tv_profiles": {"beta": "1"}, "t_span": [0, 200]},
        "cos": {"initial": _SEIAR_INITIAL, "params": _SEIAR_PARAMS,
                "tv_profiles": {"beta": "cos(pi*t/400)"}, "t_span": [0, 200]},
    },
}, symmetries=[
    ["1", "0", "0", "0", "-1", "0", "0", "0", "0"],
    ["E", "-E", "0", "0", "0", "0", "0", "gamma", "0"],
])


def _toggle_symmetries():
    out = []
    for a, b, xo in (("1", "2", "x2"), ("2", "1", "x1")):
        r = f"({xo}/W{a})^n{a}"
        head = ["0", "0"]
        wpos = 0 if a == "1" else 1

        def vec(w_entry, slot, value):
            v = head + ["0", "0"] + ["0"] * 6
            v[2 + wpos] = w_entry
            v[slot] = value
            return v

        base = 4 if a == "1" else 7
        out.append(vec(f"-W{a}*({r}+1)^2/(n{a}*k{a}*{r})", base, "1"))
        out.append(vec(f"-W{a}*({r}+1)/(n{a}*k{a}*{r})", base + 1, "1"))
        out.append(vec(f"W{a}*log({xo}/W{a})", base + 2, f"n{a}"))
    return out


_register("toggle", {
    "name": "toggle",
    "states": ["x1", "x2"],
    "tv_params": ["W1", "W2"],
    "constant_params": ["k01", "k1", "n1", "k02", "k2", "n2"],
    "dynamics": {
        "x1": "k01 + k1/(1+(x2/W1)^n1) - x1",
        "x2": "k02 + k2/(1+(x1/W2)^n2) - x2",
    },
    "outputs": ["x1", "x2"],
    "scenarios": {"default": {
        "initial": {"x1": 1, "x2": 1.5},
        "params": {"k01": 0.5, "k1": 3, "n1": 2, "k02": 0.4, "k2": 2.5, "n2": 2.5},
        "tv_profiles": {"W1": "2+0.5*sin(t/5)", "W2": "1.5+0.3*cos(t/4)"},
        "t_span": [0, 20],
    }},
}, symmetries=_toggle_symmetries())

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin_general(name: str) -> GeneralModel:
    if name not in _BUILTINS:
        raise UnknownModel(f"unknown builtin model {name!r}", known=list(BUILTIN_NAMES))
    return model_from_dict(_BUILTINS[name][0])


def builtin(name: str) -> tuple[OdeModel, dict]:
    """Input-affine builtin model together with its named data sets."""
    gm = builtin_general(name)
    model = to_affine(gm)
    model.reference_symmetries = tuple(tuple(parse(c) for c in v) for v in _BUILTINS[name][1])
    return model, dict(model.scenarios)


def resolve(spec: str) -> OdeModel:
    """A builtin name or a path to a JSON model file."""
    if spec in _BUILTINS:
        return builtin(spec)[0]
    return to_affine(load(spec))
