"""State observability of input-affine systems driven by unknown inputs.

The pipeline grows a codistribution of observable functions, extends the
state with unknown inputs when that raises their degree of
reconstructability, and ends with a closure under the reweighted fields.

Working symbols never enter the model state:

* ``v#b#i`` is the i-th time derivative of the reweighted input v_b;
* ``name#i`` is the i-th time derivative of the unknown input ``name``
  (order 0 is ``name`` itself).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .errors import IterationCap, MissingPotentials, NonConvergence, RankDeficient, SingularMu
from .liegeo import (
    SIZE_CAP,
    Codistribution,
    GenericSpan,
    RankOracle,
    autobracket,
    codistribution_closure,
    gradient,
    is_zero_vector,
    lie_bracket,
    lie_operator,
    lie_scalar,
)
from .model import OdeModel, _derivative_name
from .symexpr import MINUS_ONE, ONE, TIME, ZERO, Expr, add, diff, mul, power, render, size, substitute, var

MAX_ROUNDS = 25


# -- trace -----------------------------------------------------------------


def _plain(value):
    if isinstance(value, Expr):
        return render(value)
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


class Trace:
    """Ordered record of algorithm decisions, serialisable as JSON lines."""

    def __init__(self):
        self.records: list = []

    def emit(self, step: str, **data):
        rec = {"seq": len(self.records), "step": step}
        rec.update({k: _plain(v) for k, v in data.items()})
        self.records.append(rec)
        return rec

    def steps(self, name: str) -> list:
        return [r for r in self.records if r["step"] == name]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


# -- data ------------------------------------------------------------------


@dataclass
class MuNu:
    """mu[i][j] and its inverse nu, indices 0..m."""

    mu: list
    nu: list
    htilde: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.mu) - 1


@dataclass
class ExtendedSystem:
    """A finite unknown-input extension together with the current degree m."""

    model: OdeModel
    m: int = 0

    @property
    def appended(self) -> list:
        """(state name, original signal, derivative order) of every appended input."""
        out = []
        for s in self.model.x:
            if self.model.kinds.get(s) in ("unknown_input", "known_input"):
                src, order = self._origin(s)
                out.append((s, src, order))
        return out

    def _origin(self, name):
        for inp, (src, order) in self.model.sources.items():
            if inp == name:
                return src, order
        return name, 0


@dataclass
class ObservabilityResult:
    O: Codistribution
    E: ExtendedSystem
    m: int
    htilde: list
    munu: MuNu
    ghat: list
    observable: dict
    trace: Trace
    s: int | None = None
    r: int | None = None
    dim: int = 0
    rounds: int = 0
    span: GenericSpan | None = field(default=None, repr=False)

    def is_observable(self, name: str) -> bool:
        return self.observable[name]

    def unobservable(self) -> list:
        return [k for k, v in self.observable.items() if not v]


# -- reconstructability ----------------------------------------------------


def _potentials(omega) -> list:
    if isinstance(omega, Codistribution):
        if omega.potentials is None:
            raise MissingPotentials("the codistribution carries no scalar potentials")
        return list(omega.potentials)
    return list(omega)


def reconstructability_matrix(model: OdeModel, lams: Sequence[Expr]) -> list:
    """Rows L_{g^j} lam_i, j = 1..m_w."""
    return [[lie_scalar(g, lam, model.x) for g in model.g] for lam in lams]


def deg_w(model: OdeModel, omega, oracle: RankOracle) -> int:
    lams = _potentials(omega)
    if not model.w or not lams:
        return 0
    span = GenericSpan(oracle, model.m_w)
    for row in reconstructability_matrix(model, lams):
        span.add(row)
        if span.rank == model.m_w:
            break
    return span.rank


def select_htilde(model: OdeModel, omega, oracle: RankOracle) -> list:
    """First potentials, in creation order, with independent reconstructability rows."""
    lams = _potentials(omega)
    if not model.w:
        return []
    span = GenericSpan(oracle, model.m_w)
    picked = []
    for lam in lams:
        if span.add([lie_scalar(g, lam, model.x) for g in model.g]):
            picked.append(lam)
            if len(picked) == model.m_w:
                break
    return picked


def reorder_ui(model: OdeModel, htilde: Sequence[Expr], oracle: RankOracle) -> tuple[OdeModel, list]:
    """Put m independent reconstructability columns first; returns the model and the permutation."""
    m = len(htilde)
    if m == 0:
        return model, list(range(model.m_w))
    rm = reconstructability_matrix(model, htilde)
    span = GenericSpan(oracle, m)
    first = []
    for j in range(model.m_w):
        if span.add([rm[i][j] for i in range(m)]):
            first.append(j)
            if len(first) == m:
                break
    if len(first) < m:
        raise RankDeficient("reconstructability matrix has lower rank than the selection", rank=len(first), m=m)
    perm = first + [j for j in range(model.m_w) if j not in first]
    if perm == list(range(model.m_w)):
        return model, perm
    return model.replace(w=tuple(model.w[j] for j in perm), g=tuple(model.g[j] for j in perm)), perm


# -- extensions --------------------------------------------------------------


def append_input(model: OdeModel, name: str) -> OdeModel:
    """Move the unknown input ``name`` into the state; its derivative becomes the input."""
    j = model.w.index(name)
    taken = set(model.x) | set(model.u) | set(model.w)
    new = _derivative_name(name, taken)
    n = model.n
    wv = var(name)
    g0 = tuple(add(a, mul(b, wv)) for a, b in zip(model.g0, model.g[j])) + (ZERO,)
    f = tuple(tuple(c) + (ZERO,) for c in model.f)
    g = []
    for k, c in enumerate(model.g):
        if k == j:
            g.append((ZERO,) * n + (ONE,))
        else:
            g.append(tuple(c) + (ZERO,))
    kinds = dict(model.kinds)
    kinds[name] = "unknown_input"
    sources = dict(model.sources)
    src, order = sources.get(name, (name, 0))
    sources[new] = (src, order + 1)
    w = tuple(new if s == name else s for s in model.w)
    return model.replace(x=model.x + (name,), w=w, g0=g0, f=f, g=tuple(g), kinds=kinds, sources=sources)


def augment(model: OdeModel, m: int, carried=None):
    """Append the unknown inputs past the first m to the state.

    ``carried`` may be a list of potentials (returned unchanged, since they
    do not depend on the new coordinates) or a list of vector fields (padded
    with zeros).
    """
    if m >= model.m_w:
        raise ValueError("augmentation needs m < m_w")
    out = model
    for name in model.w[m:]:
        out = append_input(out, name)
    if carried is None:
        return out
    d = out.n - model.n
    if carried and isinstance(carried[0], tuple):
        carried = [tuple(v) + (ZERO,) * d for v in carried]
    return out, carried


# -- mu, nu and reweighted fields --------------------------------------------


def _symbolic_inverse(b: list, oracle: RankOracle) -> list:
    """Gauss-Jordan inverse, pivots chosen nonzero at sampled points."""
    m = len(b)
    if m == 0:
        return []
    span = GenericSpan(oracle, m)
    for row in b:
        span.add(row)
    if span.rank < m:
        raise SingularMu("the reconstructability block is singular", rank=span.rank, m=m)
    a = [list(row) + [ONE if i == j else ZERO for j in range(m)] for i, row in enumerate(b)]
    for col in range(m):
        piv = None
        for r in range(col, m):
            if a[r][col] is not ZERO and not oracle.zero(a[r][col]):
                if piv is None or size(a[r][col]) < size(a[piv][col]):
                    piv = r
        if piv is None:
            raise SingularMu("no pivot in the reconstructability block", column=col)
        a[col], a[piv] = a[piv], a[col]
        inv = power(a[col][col], MINUS_ONE)
        a[col] = [ZERO if e is ZERO else mul(e, inv) for e in a[col]]
        a[col][col] = ONE
        for r in range(m):
            if r == col or a[r][col] is ZERO:
                continue
            c = a[r][col]
            a[r] = [add(x, mul(MINUS_ONE, c, y)) if y is not ZERO else x for x, y in zip(a[r], a[col])]
            a[r] = [ZERO if e is not ZERO and oracle.zero(e) else e for e in a[r]]
    return [row[m:] for row in a]


def compute_munu(model: OdeModel, htilde: Sequence[Expr], oracle: RankOracle) -> MuNu:
    """mu^0_0 = 1, mu^i_0 = 0, mu^0_j = dh_j/dt + L_{g0} h_j, mu^i_j = L_{g^i} h_j."""
    m = len(htilde)
    tv = model.time_varying
    top = [ONE] + [lie_scalar(model.g0, h, model.x, dt=tv) for h in htilde]
    block = [[lie_scalar(model.g[i], h, model.x) for h in htilde] for i in range(m)]
    mu = [top] + [[ZERO] + row for row in block]
    binv = _symbolic_inverse(block, oracle)
    # [[1, a], [0, B]]^-1 = [[1, -a B^-1], [0, B^-1]]
    a = top[1:]
    first = [ONE] + [add(*(mul(MINUS_ONE, a[k], binv[k][j]) for k in range(m))) for j in range(m)]
    nu = [first] + [[ZERO] + list(row) for row in binv]
    return MuNu(mu, nu, list(htilde))


def compute_ghat(model: OdeModel, munu: MuNu) -> list:
    """Reweighted fields ghat^0..ghat^{m_w}."""
    m = munu.m
    fields = [model.g0] + list(model.g[:m])
    n = model.n
    out = []
    for alpha in range(m + 1):
        comps = []
        for i in range(n):
            comps.append(add(*(mul(munu.nu[alpha][b], fields[b][i]) for b in range(m + 1)
                               if munu.nu[alpha][b] is not ZERO and fields[b][i] is not ZERO)))
        out.append(tuple(comps))
    # ghat^k = g^k - sum_a ghat^a L_{g^k} htilde_a for the inputs past m
    for k in range(m, model.m_w):
        gk = model.g[k]
        coeffs = [lie_scalar(gk, h, model.x) for h in munu.htilde]
        comps = []
        for i in range(n):
            terms = [gk[i]]
            for a in range(1, m + 1):
                if coeffs[a - 1] is not ZERO and out[a][i] is not ZERO:
                    terms.append(mul(MINUS_ONE, out[a][i], coeffs[a - 1]))
            comps.append(add(*terms))
        out.append(tuple(comps))
    return out


def ghat_fields(model: OdeModel, htilde: Sequence[Expr], oracle: RankOracle) -> tuple[MuNu, list]:
    munu = compute_munu(model, htilde, oracle)
    return munu, compute_ghat(model, munu)


# -- jets ------------------------------------------------------------------


def v_jet(beta: int, i: int):
    return var(f"v#{beta}#{i}")


def w_jet(name: str, i: int):
    return var(name) if i == 0 else var(f"{name}#{i}")


def _parse_jet(sym: str):
    base, _, order = sym.rpartition("#")
    return base, int(order)


def v_jets(e: Expr) -> list:
    out = []
    for s in e.free:
        if s.startswith("v#"):
            _, beta, order = s.split("#")
            out.append((int(beta), int(order)))
    return sorted(out)


def w_jets(e: Expr, names: Sequence[str]) -> list:
    names = set(names)
    out = []
    for s in e.free:
        if s in names:
            out.append((s, 0))
        elif "#" in s and not s.startswith("v#"):
            base, order = _parse_jet(s)
            if base in names:
                out.append((base, order))
    return sorted(out)


def vdot_operator(model: OdeModel, ghat: Sequence, m: int):
    """Total derivative along sum_b ghat^b v_b (v_0 = 1), shifting v-jets by one."""
    tv = model.time_varying
    coords = model.x

    def op(lam: Expr) -> Expr:
        terms = [lie_scalar(ghat[0], lam, coords, dt=tv)]
        for b in range(1, m + 1):
            lb = lie_scalar(ghat[b], lam, coords)
            if lb is not ZERO:
                terms.append(mul(v_jet(b, 0), lb))
        for b, i in v_jets(lam):
            terms.append(mul(v_jet(b, i + 1), diff(lam, f"v#{b}#{i}")))
        return add(*terms)

    return op


def wdot_operator(model: OdeModel):
    """Total derivative along g0 + sum_k g^k w_k, shifting w-jets by one."""
    tv = model.time_varying
    coords = model.x

    def op(lam: Expr) -> Expr:
        terms = [lie_scalar(model.g0, lam, coords, dt=tv)]
        for k, name in enumerate(model.w):
            lk = lie_scalar(model.g[k], lam, coords)
            if lk is not ZERO:
                terms.append(mul(var(name), lk))
        for name, i in w_jets(lam, model.w):
            terms.append(mul(w_jet(name, i + 1), diff(lam, w_jet(name, i).name)))
        return add(*terms)

    return op


def psi_chain(model: OdeModel, k: int, i: int, munu: MuNu, ghat: Sequence, oracle: RankOracle | None = None) -> tuple:
    """psi_k^i in v-jet coordinates.

    psi_0 = f^i and psi_{k+1} = sum_g [g^g, psi_k] w_g + sum d psi_k / d w^(j) w^(j+1)
    (plus d psi_k/dt for time-varying systems), with w_0 = 1.  The w-jets are
    then rewritten through w_a = sum_b nu^b_a v_b and its time derivatives.
    """
    m = munu.m
    coords = model.x
    tv = model.time_varying
    names = model.w[:m]
    psi = tuple(model.f[i])
    for _ in range(k):
        parts = [lie_bracket(model.g0, psi, coords)]
        for g_idx in range(m):
            br = lie_bracket(model.g[g_idx], psi, coords)
            parts.append(tuple(mul(var(names[g_idx]), e) for e in br))
        jets = set()
        for e in psi:
            jets.update(w_jets(e, names))
        for name, j in jets:
            sym = w_jet(name, j).name
            parts.append(tuple(mul(w_jet(name, j + 1), diff(e, sym)) for e in psi))
        if tv:
            parts.append(tuple(diff(e, TIME) for e in psi))
        psi = tuple(add(*(p[c] for p in parts)) for c in range(len(coords)))
    return w_to_v(model, psi, munu, ghat)


def w_to_v(model: OdeModel, exprs: Sequence[Expr], munu: MuNu, ghat: Sequence) -> tuple:
    m = munu.m
    names = model.w[:m]
    jets = set()
    for e in exprs:
        jets.update(w_jets(e, names))
    if not jets:
        return tuple(exprs)
    dv = vdot_operator(model, ghat, m)
    mapping = {}
    for a, name in enumerate(names, start=1):
        orders = [j for nm, j in jets if nm == name]
        if not orders:
            continue
        base = add(munu.nu[0][a], *(mul(munu.nu[b][a], v_jet(b, 0)) for b in range(1, m + 1)))
        cur = base
        for j in range(max(orders) + 1):
            mapping[w_jet(name, j).name] = cur
            cur = dv(cur)
    return tuple(substitute(e, mapping) for e in exprs)


def unaugment(model: OdeModel, potentials: Sequence[Expr], htilde: Sequence[Expr],
              trace: Trace | None = None) -> tuple[OdeModel, list]:
    """Rewrite v-jets through the unknown inputs and append the inputs that appear to the state.

    v_b = sum_g mu^g_b w_g + sum_{k>m} L_{g^k} htilde_b w_k is the total time
    derivative of htilde_b, and v_b^(i) its i-th derivative.
    """
    jets = set()
    for lam in potentials:
        jets.update(v_jets(lam))
    if not jets:
        return model, list(potentials)
    dw = wdot_operator(model)
    mapping = {}
    for b in sorted({b for b, _ in jets}):
        top = max(i for bb, i in jets if bb == b)
        cur = dw(htilde[b - 1])
        for i in range(top + 1):
            mapping[f"v#{b}#{i}"] = cur
            cur = dw(cur)
    pots = [substitute(lam, mapping) for lam in potentials]
    appended = []
    while True:
        present = set()
        for lam in pots:
            present.update(name for name, _ in w_jets(lam, model.w))
        if not present:
            break
        for name in [s for s in model.w if s in present]:
            before = set(model.w)
            model = append_input(model, name)
            new = (set(model.w) - before).pop()
            appended.append(name)
            ren = {}
            for lam in pots:
                for nm, i in w_jets(lam, [name]):
                    if i >= 1:
                        ren[w_jet(name, i).name] = w_jet(new, i - 1)
            if ren:
                pots = [substitute(lam, ren) for lam in pots]
    if trace is not None:
        trace.emit("unaugment", appended=appended, states=list(model.x))
    return model, pots


# -- closures used by the pipeline -------------------------------------------


def _ops(model: OdeModel, fields: Sequence, drift_first: bool = False) -> list:
    tv = model.time_varying
    return [lie_operator(fl, model.x, dt=(tv and drift_first and k == 0)) for k, fl in enumerate(fields)]


def _closure(model, potentials, fields, oracle, drift_first=False, conditional=None, size_cap=SIZE_CAP):
    ops = _ops(model, fields, drift_first)
    return codistribution_closure(model.x, potentials, ops, oracle, conditional=conditional, size_cap=size_cap)


def _orthogonal_to(span: GenericSpan, potentials: Sequence[Expr], fields: Sequence, model: OdeModel,
                   oracle: RankOracle) -> bool:
    for g in fields:
        for lam in potentials:
            d = lie_scalar(g, lam, model.x)
            if d is not ZERO and not oracle.zero(d):
                return False
    return True


def _autobracket_chains(model: OdeModel, fields: Sequence, nu: list, start: Sequence, depth: int,
                        oracle: RankOracle) -> list:
    """All [f]^(a_1..a_j) for j <= depth, deduplicated, first element of each level kept in order."""
    tv = model.time_varying
    taus = list(fields)
    levels = [list(start)]
    seen = {tuple(e.uid for e in v) for v in start}
    for _ in range(depth):
        nxt = []
        for v in levels[-1]:
            for gamma in range(len(taus)):
                c = autobracket(v, gamma, taus, nu, model.x, tv)
                if is_zero_vector(c):
                    continue
                key = tuple(e.uid for e in c)
                if key in seen:
                    continue
                seen.add(key)
                nxt.append(c)
        if not nxt:
            break
        levels.append(nxt)
    return [v for lvl in levels for v in lvl]


def canonic_s(model: OdeModel, htilde: Sequence[Expr], oracle: RankOracle) -> int:
    res = _closure(model, htilde, [model.g0] + list(model.g), oracle, drift_first=True)
    return res.steps


def canonic_r(model: OdeModel, munu: MuNu, oracle: RankOracle) -> int:
    if not model.f:
        return 0
    from .liegeo import distribution_closure

    taus = [model.g0] + list(model.g[:munu.m])
    tv = model.time_varying
    ops = [(lambda v, gm=gm: autobracket(v, gm, taus, munu.nu, model.x, tv)) for gm in range(len(taus))]
    res = distribution_closure(model.x, model.f, ops, oracle)
    return res.steps - 1


def otilde(model: OdeModel, htilde: Sequence[Expr], munu: MuNu, oracle: RankOracle, s: int, r: int) -> list:
    """Potentials L_{[f^i]^(a_1..a_j)} htilde_q for chains of depth up to s + r."""
    if not model.f:
        return []
    taus = [model.g0] + list(model.g[:munu.m])
    chains = _autobracket_chains(model, taus, munu.nu, [tuple(f) for f in model.f], s + r, oracle)
    out = []
    for h in htilde:
        for c in chains:
            lam = lie_scalar(c, h, model.x)
            if lam is not ZERO:
                out.append(lam)
    return out


# -- bounds on the extension ---------------------------------------------


def bound_sx(model: OdeModel, m: int, htilde: Sequence[Expr], oracle: RankOracle,
                  size_cap: int = SIZE_CAP) -> int:
    """Steps until the original-state projection of the augmented closure stabilises."""
    n0 = model.n
    xcoords = model.x
    pots = list(htilde)
    prev = _projected_rank(pots, xcoords, oracle)
    sys_ = model
    k = 0
    while True:
        k += 1
        if k > n0 - m + 1:
            raise NonConvergence("projected closure did not stabilise within its bound", bound=n0 - m + 1)
        sys_ = augment(sys_, m)
        tv = sys_.time_varying
        span = GenericSpan(oracle, sys_.n)
        kept = [p for p in pots if span.add(gradient(p, sys_.x))]
        new = []
        fields = [sys_.g0] + list(sys_.g[:m])
        for lam in kept:
            for j, fl in enumerate(fields):
                c = lie_scalar(fl, lam, sys_.x, dt=(tv and j == 0))
                if c is ZERO:
                    continue
                if size_cap and size(c) > size_cap:
                    from .errors import ExpressionTooLarge

                    raise ExpressionTooLarge("projected closure generator exceeds the cap", cap=size_cap)
                if span.add(gradient(c, sys_.x)):
                    new.append(c)
        pots = kept + new
        cur = _projected_rank(pots, xcoords, oracle)
        if cur == prev:
            return k
        prev = cur


def _projected_rank(pots, xcoords, oracle) -> int:
    span = GenericSpan(oracle, len(xcoords))
    for p in pots:
        span.add(gradient(p, xcoords))
    return span.rank


def bound_r(model: OdeModel, m: int, htilde: Sequence[Expr], oracle: RankOracle) -> int:
    """Steps until the autobracket closure of the known-input fields stabilises, minus one."""
    sys_ = model
    delta = [tuple(f) for f in model.f]
    span0 = GenericSpan(oracle, sys_.n)
    delta = [v for v in delta if span0.add(v)]
    k = 0
    while True:
        k += 1
        # each round adds m_w - m coordinates, so the ambient bound grows with k
        if k > model.n + (model.m_w - m) * k - len(delta) + 1:
            raise NonConvergence("distribution closure did not stabilise within its bound", bound=bound)
        sys_, delta = augment(sys_, m, delta)
        munu = compute_munu(sys_, htilde, oracle)
        taus = [sys_.g0] + list(sys_.g[:m])
        tv = sys_.time_varying
        span = GenericSpan(oracle, sys_.n)
        kept = [v for v in delta if span.add(v)]
        before = span.rank
        new = []
        for v in kept:
            for gamma in range(m + 1):
                c = autobracket(v, gamma, taus, munu.nu, sys_.x, tv)
                if span.add(c):
                    new.append(c)
        delta = kept + new
        if span.rank == before:
            return k - 1


# -- one extension round ---------------------------------------------------


@dataclass
class RoundResult:
    finish: bool
    omega_star: list | None = None
    model: OdeModel | None = None
    k: int | None = None
    i: int | None = None
    q: int | None = None
    khat: int | None = None
    span: GenericSpan | None = None


@dataclass
class _State:
    model: OdeModel
    potentials: list
    m: int = 0
    htilde: list = field(default_factory=list)
    munu: MuNu | None = None
    ghat: list = field(default_factory=list)


def _prepare(state: _State, oracle: RankOracle, trace: Trace):
    state.m = deg_w(state.model, state.potentials, oracle)
    state.htilde = select_htilde(state.model, state.potentials, oracle)[:state.m]
    state.model, perm = reorder_ui(state.model, state.htilde, oracle)
    state.munu, state.ghat = ghat_fields(state.model, state.htilde, oracle)
    trace.emit("select", m=state.m, htilde=state.htilde, permutation=perm, w=list(state.model.w))
    trace.emit("munu", mu=state.munu.mu, nu=state.munu.nu)


def extension_round(state: _State, oracle: RankOracle, trace: Trace, size_cap: int = SIZE_CAP) -> RoundResult:
    model = state.model
    m = state.m
    rest = state.ghat[m + 1:]
    if model.m_u == 0 or m == 0:
        res = _closure(model, state.potentials, state.ghat[:m + 1], oracle, drift_first=True, size_cap=size_cap)
        finish = _orthogonal_to(res.span, res.generators, rest, model, oracle)
        trace.emit("round", branch="plain", rank=res.span.rank, steps=res.steps, finish=finish)
        return RoundResult(finish, res.generators, span=res.span)
    sx = bound_sx(model, m, state.htilde, oracle, size_cap)
    r = bound_r(model, m, state.htilde, oracle)
    khat = sx + r
    trace.emit("round_bounds", s_x=sx, r=r, khat=khat)
    pots = list(state.potentials)
    res = None
    for k in range(1, khat + 1):
        for i in range(model.m_u):
            for q in range(m):
                chains = _fixed_depth_chains(state.model, state.munu, i, k - 1)
                for c in chains:
                    lam = lie_scalar(c, state.htilde[q], state.model.x)
                    if lam is not ZERO:
                        pots.append(lam)
                res = _closure_with_drift(state, pots, oracle, size_cap)
                rest = state.ghat[state.m + 1:]
                if _orthogonal_to(res.span, res.generators, rest, state.model, oracle):
                    new_m = deg_w(state.model, res.generators, oracle)
                    if new_m != state.m:
                        state.potentials = res.generators
                        _prepare(state, oracle, trace)
                    continue
                trace.emit("round", branch="general", finish=False, k=k, i=i + 1, q=q + 1,
                           rank=res.span.rank)
                state.potentials = pots
                return RoundResult(False, res.generators, state.model, k, i, q, khat, res.span)
    trace.emit("round", branch="general", finish=True, rank=res.span.rank if res else None)
    return RoundResult(True, res.generators if res else pots, state.model, khat=khat, span=res.span if res else None)


def _closure_with_drift(state: _State, pots, oracle, size_cap):
    """Closure under f^1..f^{m_u}, ghat^0..ghat^m with the time derivative on ghat^0."""
    model = state.model
    tv = model.time_varying
    ops = [lie_operator(f, model.x) for f in model.f]
    ops.append(lie_operator(state.ghat[0], model.x, dt=tv))
    ops += [lie_operator(g, model.x) for g in state.ghat[1:state.m + 1]]
    return codistribution_closure(model.x, pots, ops, oracle, size_cap=size_cap)


def _fixed_depth_chains(model: OdeModel, munu: MuNu, i: int, depth: int) -> list:
    taus = [model.g0] + list(model.g[:munu.m])
    tv = model.time_varying
    level = [tuple(model.f[i])]
    for _ in range(depth):
        nxt = []
        seen = set()
        for v in level:
            for gamma in range(len(taus)):
                c = autobracket(v, gamma, taus, munu.nu, model.x, tv)
                key = tuple(e.uid for e in c)
                if is_zero_vector(c) or key in seen:
                    continue
                seen.add(key)
                nxt.append(c)
        level = nxt
    return level


# -- main loop ---------------------------------------------------------------


def observability(model: OdeModel, oracle: RankOracle | None = None, max_rounds: int = MAX_ROUNDS,
                  trace: Trace | None = None, size_cap: int = SIZE_CAP) -> ObservabilityResult:
    """Observability codistribution of ``model`` and the extension it lives on."""
    oracle = oracle or RankOracle()
    trace = trace if trace is not None else Trace()
    state = _State(model, list(model.h))
    trace.emit("init", n=model.n, m_u=model.m_u, m_w=model.m_w, outputs=list(model.h))
    rounds = 0
    while True:
        m = deg_w(state.model, state.potentials, oracle)
        trace.emit("deg_w", round=rounds, deg=m, m_w=state.model.m_w, rank=_rank(state, oracle))
        if m == state.model.m_w:
            break
        rounds += 1
        if rounds > max_rounds:
            raise IterationCap("main loop exceeded its round limit", rounds=max_rounds)
        _prepare(state, oracle, trace)
        step = extension_round(state, oracle, trace, size_cap)
        if step.finish:
            E = ExtendedSystem(state.model, state.m)
            return _result(state, step.omega_star, step.span, E, oracle, trace, rounds)
        if state.model.m_u > 0:
            state.model = step.model
            state.munu, state.ghat = ghat_fields(state.model, state.htilde, oracle)
            chi = psi_chain(state.model, step.k - 1, step.i, state.munu, state.ghat, oracle)
            theta = lie_scalar(chi, state.htilde[step.q], state.model.x)
            trace.emit("theta_seed", k=step.k, i=step.i + 1, q=step.q + 1, chi=chi, function=theta)
            if theta is not ZERO:
                state.potentials = list(state.potentials) + [theta]
            fields = list(state.model.f)
        else:
            fields = []
        m = state.m
        dv = vdot_operator(state.model, state.ghat, m)
        zetas = [lie_operator(g, state.model.x) for g in state.ghat[m + 1:]]
        ops = [lie_operator(f, state.model.x) for f in fields]
        before = len(state.potentials)
        res = codistribution_closure(state.model.x, state.potentials, ops, oracle, conditional=([dv], zetas),
                                     size_cap=size_cap)
        added = [p for p in res.generators if p not in state.potentials[:before]]
        trace.emit("nested_closure", rank=res.span.rank, steps=res.steps, added=added)
        state.model, state.potentials = unaugment(state.model, res.generators, state.htilde, trace)
    # canonic
    E = ExtendedSystem(state.model, state.model.m_w)
    state.m = state.model.m_w
    state.htilde = select_htilde(state.model, state.potentials, oracle)
    state.munu, state.ghat = ghat_fields(state.model, state.htilde, oracle)
    trace.emit("canonic", htilde=state.htilde, mu=state.munu.mu, nu=state.munu.nu)
    s = canonic_s(state.model, state.htilde, oracle)
    r = canonic_r(state.model, state.munu, oracle)
    extra = otilde(state.model, state.htilde, state.munu, oracle, s, r)
    trace.emit("otilde", s=s, r=r, generators=len(extra))
    model_ = state.model
    ops = [lie_operator(f, model_.x) for f in model_.f]
    ops.append(lie_operator(state.ghat[0], model_.x, dt=model_.time_varying))
    ops += [lie_operator(g, model_.x) for g in state.ghat[1:]]
    res = codistribution_closure(model_.x, list(state.potentials) + extra, ops, oracle, size_cap=size_cap)
    trace.emit("final_closure", rank=res.span.rank, steps=res.steps)
    out = _result(state, res.generators, res.span, E, oracle, trace, rounds)
    out.s, out.r = s, r
    return out


def _rank(state: _State, oracle) -> int:
    span = GenericSpan(oracle, state.model.n)
    for p in state.potentials:
        span.add(gradient(p, state.model.x))
    return span.rank


def _result(state: _State, potentials, span, E, oracle, trace, rounds) -> ObservabilityResult:
    model = state.model
    if span is None:
        span = GenericSpan(oracle, model.n)
        for p in potentials:
            span.add(gradient(p, model.x))
    observable = {}
    for idx, name in enumerate(model.x):
        e = tuple(ONE if j == idx else ZERO for j in range(model.n))
        observable[name] = not span.test(e)
    O = Codistribution(tuple(model.x), list(potentials))
    trace.emit("result", dim=span.rank, observable=observable)
    return ObservabilityResult(O, E, state.m, list(state.htilde), state.munu, list(state.ghat), observable,
                               trace, dim=span.rank, rounds=rounds, span=span)
