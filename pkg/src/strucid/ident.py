"""Identifiability of constant and time-varying parameters.

Built on the observability result: every state symmetry xi of the final
extension induces a (possibly null) symmetry of the unknown input vector,
and a non-canonic extension contributes one unit symmetry per missing
degree of reconstructability.  An unknown input is reconstructable iff its
component vanishes in every symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import AlgorithmError
from .liegeo import RankOracle, generic_rank, in_orthogonal, lie_operator, lie_scalar, null_space, codistribution_closure
from .model import GeneralModel, OdeModel, to_affine
from .symexpr import MINUS_ONE, ONE, ZERO, Expr, add, mul, render, var
from .uio import ExtendedSystem, MuNu, ObservabilityResult, Trace, append_input, ghat_fields, observability


@dataclass
class UiSymmetry:
    """A symmetry chi of the unknown input vector (w' = w + eps chi)."""

    kind: str  # "canonicity" or "unobservability"
    components: tuple
    source: tuple | None = None
    coefficients: list | None = None  # xi^alpha_i, alpha = 0..m, i = 1..m

    def is_null(self, oracle: RankOracle) -> bool:
        return all(c is ZERO or oracle.zero(c) for c in self.components)

    def to_json(self) -> dict:
        out = {"kind": self.kind, "components": [render(c) for c in self.components]}
        if self.source is not None:
            out["xi"] = [render(c) for c in self.source]
        return out


@dataclass
class IdentifiabilityResult:
    observability: ObservabilityResult
    E: ExtendedSystem
    state_symmetries: list
    canonicity: list
    unobservability: list
    inputs: dict  # input of E -> reconstructable
    constants: dict  # constant parameter -> identifiable
    tv_params: dict  # original signal -> {"identifiable", "derivative_order"}
    observable_state: bool = False
    extended_for_condition: list = field(default_factory=list)

    def report(self) -> dict:
        obs = self.observability
        return {
            "observability": {
                "dim": obs.dim,
                "n": self.E.model.n,
                "per_state": dict(obs.observable),
                "extension": {"x": list(self.E.model.x), "w": list(self.E.model.w), "m": self.E.m},
            },
            "identifiability": {
                "constants": dict(self.constants),
                "tv_params": {k: dict(v) for k, v in self.tv_params.items()},
                "inputs": dict(self.inputs),
                "observable_state_shortcut": self.observable_state,
            },
            "symmetries": {
                "state": [[render(c) for c in xi] for xi in self.state_symmetries],
                "ui": {
                    "canonicity": [[render(c) for c in s.components] for s in self.canonicity],
                    "unobservability": [[render(c) for c in s.components] for s in self.unobservability],
                },
            },
        }


def condition_violations(model: OdeModel, htilde: Sequence[Expr], oracle: RankOracle) -> list:
    """Indices k > m with L_{g^k} htilde_i not identically zero for some i."""
    m = len(htilde)
    bad = []
    for k in range(m, model.m_w):
        for h in htilde:
            d = lie_scalar(model.g[k], h, model.x)
            if d is not ZERO and not oracle.zero(d):
                bad.append(k)
                break
    return bad


def ensure_condition_gk(result: ObservabilityResult, oracle: RankOracle) -> tuple[ObservabilityResult, list]:
    """Append to the state every input past m that still enters L_{g^k} htilde_i.

    The observability codistribution is re-closed on the enlarged extension.
    """
    model = result.E.model
    htilde = result.htilde
    appended = []
    for _ in range(model.m_w - len(htilde)):
        bad = condition_violations(model, htilde, oracle)
        if not bad:
            break
        for k in sorted(bad, reverse=True):
            appended.append(model.w[k])
            model = append_input(model, model.w[k])
    if not appended:
        return result, []
    m = len(htilde)
    munu, ghat = ghat_fields(model, htilde, oracle)
    ops = [lie_operator(f, model.x) for f in model.f]
    ops.append(lie_operator(ghat[0], model.x, dt=model.time_varying))
    ops += [lie_operator(g, model.x) for g in ghat[1:m + 1]]
    res = codistribution_closure(model.x, result.O.potentials, ops, oracle)
    from .uio import _result, _State

    state = _State(model, res.generators, m, list(htilde), munu, ghat)
    result.trace.emit("condition_extension", appended=appended, rank=res.span.rank)
    out = _result(state, res.generators, res.span, ExtendedSystem(model, m), oracle, result.trace, result.rounds)
    out.s, out.r = result.s, result.r
    return out, appended


def canonicity_symmetries(E: ExtendedSystem | OdeModel, m: int) -> list:
    model = E.model if isinstance(E, ExtendedSystem) else E
    out = []
    for i in range(m, model.m_w):
        comps = tuple(ONE if k == i else ZERO for k in range(model.m_w))
        out.append(UiSymmetry("canonicity", comps))
    return out


def unobservability_symmetry(model: OdeModel, xi: Sequence[Expr], htilde: Sequence[Expr], munu: MuNu,
                             oracle: RankOracle | None = None) -> UiSymmetry:
    """uchi_k = -sum_i nu^i_k (xi^0_i + sum_j xi^j_i w_j) for k <= m, zero past m.

    xi^0_i = L_xi(L_{g0} h_i + dh_i/dt) and xi^j_i = L_xi(L_{g^j} h_i).
    """
    if oracle is not None:
        for h in htilde:
            d = lie_scalar(xi, h, model.x)
            if d is not ZERO and not oracle.zero(d):
                raise AlgorithmError("xi does not annihilate the selected observable functions")
    m = len(htilde)
    tv = model.time_varying
    xi = tuple(xi)
    coeffs = []
    for alpha in range(m + 1):
        row = []
        for h in htilde:
            if alpha == 0:
                inner = lie_scalar(model.g0, h, model.x, dt=tv)
            else:
                inner = lie_scalar(model.g[alpha - 1], h, model.x)
            row.append(lie_scalar(xi, inner, model.x))
        coeffs.append(row)
    comps = []
    for k in range(model.m_w):
        if k >= m:
            comps.append(ZERO)
            continue
        terms = []
        for i in range(m):
            nu_ik = munu.nu[i + 1][k + 1]
            if nu_ik is ZERO:
                continue
            inner = add(coeffs[0][i], *(mul(coeffs[j][i], var(model.w[j - 1])) for j in range(1, m + 1)))
            if inner is not ZERO:
                terms.append(mul(MINUS_ONE, nu_ik, inner))
        comps.append(add(*terms))
    return UiSymmetry("unobservability", tuple(comps), xi, coeffs)


def identifiability(model: OdeModel | GeneralModel, oracle: RankOracle | None = None,
                    trace: Trace | None = None, max_rounds: int = 25) -> IdentifiabilityResult:
    """Symmetries of the state and of the unknown inputs, with per-parameter verdicts."""
    oracle = oracle or RankOracle()
    if isinstance(model, GeneralModel):
        model = to_affine(model)
    obs = observability(model, oracle, max_rounds=max_rounds, trace=trace)
    obs, appended = ensure_condition_gk(obs, oracle)
    E = obs.E
    em = E.model
    m = len(obs.htilde)
    E.m = m
    xis = null_space(obs.O, oracle)
    for xi in xis:
        if not in_orthogonal(obs.O, xi, oracle):
            raise AlgorithmError("a null-space generator is not orthogonal to the codistribution")
    csyms = canonicity_symmetries(E, m)
    usyms = [unobservability_symmetry(em, xi, obs.htilde, obs.munu) for xi in xis]
    inputs = {}
    for j, name in enumerate(em.w):
        inputs[name] = all(s.components[j] is ZERO or oracle.zero(s.components[j]) for s in csyms + usyms)
    constants = {s: obs.observable[s] for s in em.x if em.kinds.get(s) == "constant"}
    tv_params = _signal_verdicts(model, em, obs, inputs)
    observable_state = obs.dim == em.n
    if observable_state:
        for j, name in enumerate(em.w):
            if inputs[name] != (j < m):
                raise AlgorithmError("verdicts disagree with the observable-state criterion", input=name)
    obs.trace.emit("identifiability", symmetries=len(xis), canonicity=len(csyms), inputs=inputs,
                   constants=constants)
    return IdentifiabilityResult(obs, E, xis, csyms, usyms, inputs, constants, tv_params, observable_state, appended)


def _signal_verdicts(model: OdeModel, em: OdeModel, obs: ObservabilityResult, inputs: dict) -> dict:
    """Verdict per original unknown signal.

    A signal that ended up in the state is identifiable iff its gradient lies
    in O; one still acting as an input takes the reconstructability verdict.
    """
    names = list(model.general.unknown) if model.general is not None else []
    for s in model.w:
        src = model.sources.get(s, (s, 0))[0]
        if src not in names:
            names.append(src)
    out = {}
    for name in names:
        if name in em.x:
            deriv = [(inp, em.sources[inp][1]) for inp in em.w if em.sources.get(inp, (None,))[0] == name]
            out[name] = {
                "identifiable": bool(obs.observable[name]),
                "derivative_order": 0,
                "in_state": True,
                "input": deriv[0][0] if deriv else None,
                "input_derivative_order": deriv[0][1] if deriv else None,
                "input_reconstructable": inputs.get(deriv[0][0]) if deriv else None,
            }
        else:
            inp = next((i for i in em.w if em.sources.get(i, (i, 0))[0] == name), name)
            out[name] = {
                "identifiable": bool(inputs.get(inp, False)),
                "derivative_order": em.sources.get(inp, (name, 0))[1],
                "in_state": False,
                "input": inp,
            }
    return out


def proportional(a: Sequence[Expr], b: Sequence[Expr], oracle: RankOracle) -> bool:
    return generic_rank([tuple(a), tuple(b)], oracle)[0] <= 1
