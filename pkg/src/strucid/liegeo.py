"""Lie derivatives, brackets, generic rank, invariant closures and null spaces.

Codistributions are carried as lists of scalar potentials (every generator is
a gradient), distributions as lists of vector fields.  Ranks are generic
ranks: the maximum numeric rank over a few reproducible random points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import (
    EvaluationError,
    ExpressionTooLarge,
    InconclusiveSingular,
    PivotDegeneracy,
    SingularSigma,
)
from .symexpr import (
    DEFAULT_SEED,
    MINUS_ONE,
    ONE,
    TIME,
    ZERO,
    Const,
    Expr,
    PointSampler,
    add,
    diff,
    is_identically_zero,
    is_rational,
    lcm_products,
    mul,
    power,
    size,
    together,
)
from .symexpr.evaluate import _eval_exact, _eval_float

SIZE_CAP = 20000
_EPS = np.finfo(float).eps


# -- calculus ----------------------------------------------------------------


def lie_scalar(f: Sequence[Expr], lam: Expr, coords: Sequence[str], dt: bool = False) -> Expr:
    """L_f lam = grad(lam) . f, plus d(lam)/dt when ``dt`` is set."""
    terms = [mul(diff(lam, c), fc) for c, fc in zip(coords, f) if fc is not ZERO and c in lam.free]
    if dt:
        terms.append(diff(lam, TIME))
    return add(*terms)


def lie_bracket(f: Sequence[Expr], tau: Sequence[Expr], coords: Sequence[str]) -> tuple:
    """[f, tau] = (d tau/dx) f - (d f/dx) tau."""
    out = []
    for i in range(len(coords)):
        terms = []
        for j, c in enumerate(coords):
            if f[j] is not ZERO and c in tau[i].free:
                terms.append(mul(diff(tau[i], c), f[j]))
            if tau[j] is not ZERO and c in f[i].free:
                terms.append(mul(MINUS_ONE, diff(f[i], c), tau[j]))
        out.append(add(*terms))
    return tuple(out)


def lie_covector(f: Sequence[Expr], omega: Sequence[Expr], coords: Sequence[str]) -> tuple:
    """Lie derivative of a covector field: (d omega/dx) f + omega (d f/dx)."""
    out = []
    for i, ci in enumerate(coords):
        terms = []
        for j, cj in enumerate(coords):
            if f[j] is not ZERO and cj in omega[i].free:
                terms.append(mul(diff(omega[i], cj), f[j]))
            if omega[j] is not ZERO and ci in f[j].free:
                terms.append(mul(omega[j], diff(f[j], ci)))
        out.append(add(*terms))
    return tuple(out)


def time_derivative(f: Sequence[Expr]) -> tuple:
    return tuple(diff(e, TIME) for e in f)


def gradient(lam: Expr, coords: Sequence[str]) -> tuple:
    return tuple(diff(lam, c) for c in coords)


def combine(coeffs: Sequence[Expr], fields: Sequence[Sequence[Expr]]) -> tuple:
    """sum_b coeffs[b] * fields[b], componentwise."""
    n = len(fields[0])
    return tuple(add(*(mul(c, fl[i]) for c, fl in zip(coeffs, fields) if c is not ZERO and fl[i] is not ZERO))
                 for i in range(n))


def autobracket(f: Sequence[Expr], gamma: int, taus: Sequence[Sequence[Expr]], sigma, coords: Sequence[str],
                time_varying: bool = False, oracle: "RankOracle | None" = None) -> tuple:
    """sum_b sigma[gamma][b] [tau^b, f], plus df/dt for gamma = 0 on time-varying systems.

    When an oracle is given, ``sigma`` is first checked to be nonsingular.
    """
    if oracle is not None:
        rank, _ = generic_rank([tuple(row) for row in sigma], oracle)
        if rank < len(sigma):
            raise SingularSigma("the weighting tensor is singular", rank=rank, size=len(sigma))
    parts = []
    for b, tau in enumerate(taus):
        c = sigma[gamma][b]
        if c is ZERO or all(e is ZERO for e in tau):
            continue
        br = lie_bracket(tau, f, coords)
        parts.append(tuple(mul(c, e) for e in br))
    if gamma == 0 and time_varying:
        parts.append(time_derivative(f))
    if not parts:
        return tuple(ZERO for _ in coords)
    return tuple(add(*(p[i] for p in parts)) for i in range(len(coords)))


def is_zero_vector(v: Sequence[Expr]) -> bool:
    return all(e is ZERO for e in v)


def check_size(exprs, cap: int = SIZE_CAP, what: str = "expression"):
    for e in exprs:
        if cap and size(e) > cap:
            raise ExpressionTooLarge(f"{what} exceeds the node-count cap", cap=cap, size=size(e))


# -- generic rank --------------------------------------------------------------


class _Values(dict):
    """Point bindings drawn on demand, so any symbol can be evaluated."""

    def __init__(self, sampler: PointSampler, index: int, exact: bool):
        super().__init__()
        self.sampler = sampler
        self.index = index
        self.exact = exact

    def __missing__(self, name):
        v = self.sampler.value(self.index, name, self.exact)
        self[name] = v
        return v


class Point:
    """One evaluation point with memoised node values."""

    def __init__(self, sampler: PointSampler, index: int, exact: bool):
        self.index = index
        self.exact = exact
        self.values = _Values(sampler, index, exact)
        self.memo: dict = {}
        self.mag: dict = {}

    def eval(self, e: Expr):
        if self.exact:
            return _eval_exact(e, self.values, self.memo)
        return _eval_float(e, self.values, True, self.memo, self.mag)

    def vector(self, vec: Sequence[Expr]):
        """Numeric row; float rows have negligible entries zeroed."""
        if self.exact:
            return [self.eval(e) for e in vec]
        vals = []
        mags = []
        for e in vec:
            v, s = self.eval(e)
            if abs(v) <= 1e-9 * max(s, 1.0) * 1e-3:
                v = 0.0
            vals.append(v)
            mags.append(s)
        return np.array(vals), max(mags) if mags else 0.0

    def bindings(self) -> dict:
        return {k: (str(v) if isinstance(v, Fraction) else v) for k, v in sorted(self.values.items())}


@dataclass
class RankOracle:
    """Reproducible generic-rank decisions.

    ``mode`` is ``"auto"`` (exact rationals when every entry is rational,
    floats otherwise), ``"exact"`` or ``"float"``.
    """

    trials: int = 5
    mode: str = "auto"
    seed: int = DEFAULT_SEED
    tol: float = 1e-9
    max_resample: int = 3
    sampler: PointSampler = field(init=False)
    _counter: int = field(init=False, default=0)

    def __post_init__(self):
        if self.mode not in ("auto", "exact", "float"):
            raise ValueError(f"unknown arithmetic mode {self.mode!r}")
        self.sampler = PointSampler(self.seed)

    def point(self, exact: bool) -> Point:
        k = self._counter
        self._counter += 1
        return Point(self.sampler, k, exact)

    def span(self, dim: int) -> "GenericSpan":
        return GenericSpan(self, dim)

    def zero(self, e: Expr) -> bool:
        return is_identically_zero(e, trials=8, sampler=self.sampler)


class _Slot:
    __slots__ = ("point", "basis", "pivots", "resamples")

    def __init__(self, point: Point):
        self.point = point
        self.basis: list = []
        self.pivots: list = []
        self.resamples = 0


class GenericSpan:
    """Incrementally maintained span of symbolic vectors, ranked generically."""

    def __init__(self, oracle: RankOracle, dim: int):
        self.oracle = oracle
        self.dim = dim
        self.vectors: list = []
        self.exact = oracle.mode != "float"
        self.slots: list | None = None

    # per-point linear algebra
    def _reduce_exact(self, slot: _Slot, row):
        row = list(row)
        for p, b in zip(slot.pivots, slot.basis):
            c = row[p]
            if c:
                for j in range(self.dim):
                    if b[j]:
                        row[j] -= c * b[j]
        return row

    def _probe(self, slot: _Slot, vec):
        """Residual of ``vec`` against the slot basis, or None when dependent."""
        if self.exact:
            row = self._reduce_exact(slot, slot.point.vector(vec))
            for j, v in enumerate(row):
                if v:
                    return (j, [x / v for x in row])
            return None
        row, scale = slot.point.vector(vec)
        nrm = float(np.linalg.norm(row))
        if nrm == 0.0:
            return None
        r = row / nrm
        for _ in range(2):
            for q in slot.basis:
                r = r - q * float(q @ r)
        res = float(np.linalg.norm(r))
        noise = 1e3 * _EPS * max(scale, 1.0) / nrm * math.sqrt(self.dim)
        if res <= max(self.oracle.tol, noise):
            return None
        return (None, r / res)

    @staticmethod
    def _commit(slot: _Slot, probe):
        pivot, row = probe
        slot.basis.append(row)
        slot.pivots.append(pivot)

    def _fresh_slot(self) -> _Slot:
        for _ in range(self.oracle.max_resample + 1):
            slot = _Slot(self.oracle.point(self.exact))
            try:
                for v in self.vectors:
                    pr = self._probe(slot, v)
                    if pr is not None:
                        self._commit(slot, pr)
                return slot
            except (EvaluationError, ZeroDivisionError, OverflowError):
                continue
        return None

    def _ensure_slots(self):
        if self.slots is None:
            self.slots = []
            for _ in range(self.oracle.trials):
                s = self._fresh_slot()
                if s is not None:
                    self.slots.append(s)
            if not self.slots:
                raise InconclusiveSingular("every sample point was singular", trials=self.oracle.trials)

    def _switch_to_float(self):
        self.exact = False
        self.slots = None

    @property
    def rank(self) -> int:
        if not self.vectors:
            return 0
        self._ensure_slots()
        return max(len(s.basis) for s in self.slots)

    def _evaluate_all(self, vec):
        """Probe every slot, replacing singular points."""
        results = []
        i = 0
        while i < len(self.slots):
            slot = self.slots[i]
            try:
                results.append((slot, self._probe(slot, vec)))
                i += 1
            except (EvaluationError, ZeroDivisionError, OverflowError):
                repl = self._fresh_slot()
                if repl is None:
                    self.slots.pop(i)
                    if not self.slots:
                        raise InconclusiveSingular("every sample point was singular") from None
                else:
                    self.slots[i] = repl
        return results

    def _prepare(self, vec):
        vec = tuple(vec)
        if len(vec) != self.dim:
            raise ValueError("vector length differs from the span dimension")
        if self.exact and self.oracle.mode == "auto" and not all(is_rational(e) for e in vec):
            self._switch_to_float()
        self._ensure_slots()
        return vec

    def test(self, vec) -> bool:
        """Would ``vec`` raise the generic rank?"""
        if is_zero_vector(vec):
            return False
        vec = self._prepare(vec)
        before = max(len(s.basis) for s in self.slots)
        res = self._evaluate_all(vec)
        return max(len(s.basis) + (p is not None) for s, p in res) > before

    def add(self, vec) -> bool:
        """Add ``vec`` if it raises the generic rank; report whether it did."""
        if is_zero_vector(vec):
            return False
        vec = self._prepare(vec)
        before = max(len(s.basis) for s in self.slots)
        res = self._evaluate_all(vec)
        if max(len(s.basis) + (p is not None) for s, p in res) <= before:
            return False
        self.vectors.append(vec)
        for s, p in res:
            if p is not None:
                self._commit(s, p)
        return True

    def witness(self) -> Point | None:
        if not self.vectors:
            return None
        self._ensure_slots()
        return max(self.slots, key=lambda s: len(s.basis)).point

    def copy(self) -> "GenericSpan":
        other = GenericSpan(self.oracle, self.dim)
        other.exact = self.exact
        other.vectors = list(self.vectors)
        if self.slots is not None:
            other.slots = []
            for s in self.slots:
                t = _Slot(s.point)
                t.basis = list(s.basis)
                t.pivots = list(s.pivots)
                other.slots.append(t)
        return other


def generic_rank(vectors, oracle: RankOracle) -> tuple[int, dict | None]:
    """Generic rank of a list of (co)vectors and the bindings of a witness point."""
    vectors = [tuple(v) for v in vectors]
    if not vectors:
        return 0, None
    span = GenericSpan(oracle, len(vectors[0]))
    for v in vectors:
        span.add(v)
    w = span.witness()
    return span.rank, (w.bindings() if w is not None else None)


# -- (co)distributions ------------------------------------------------------


@dataclass
class Codistribution:
    """Span of gradients of scalar potentials over ``coords``."""

    coords: tuple
    potentials: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.coords)

    def covectors(self) -> list:
        return [gradient(p, self.coords) for p in self.potentials]

    def rank(self, oracle: RankOracle) -> int:
        return generic_rank(self.covectors(), oracle)[0] if self.potentials else 0

    def span(self, oracle: RankOracle) -> GenericSpan:
        sp = GenericSpan(oracle, self.n)
        for c in self.covectors():
            sp.add(c)
        return sp

    def padded(self, coords: Sequence[str]) -> "Codistribution":
        return Codistribution(tuple(coords), list(self.potentials))


@dataclass
class Distribution:
    coords: tuple
    vectors: list = field(default_factory=list)

    def rank(self, oracle: RankOracle) -> int:
        return generic_rank(self.vectors, oracle)[0] if self.vectors else 0

    def padded(self, coords: Sequence[str]) -> "Distribution":
        extra = len(coords) - len(self.coords)
        return Distribution(tuple(coords), [tuple(v) + (ZERO,) * extra for v in self.vectors])


def contains(omega: Codistribution | Sequence, covector: Sequence[Expr], oracle: RankOracle,
             coords: Sequence[str] | None = None) -> bool:
    """Is ``covector`` in the span (generic rank unchanged when it is added)?"""
    if isinstance(omega, Codistribution):
        rows = omega.covectors()
        dim = omega.n
    else:
        rows = [tuple(r) for r in omega]
        dim = len(coords) if coords is not None else len(covector)
    sp = GenericSpan(oracle, dim)
    for r in rows:
        sp.add(r)
    return not sp.test(tuple(covector))


def in_orthogonal(omega: Codistribution | Sequence, g: Sequence[Expr], oracle: RankOracle) -> bool:
    """Does every generator annihilate ``g``?"""
    rows = omega.covectors() if isinstance(omega, Codistribution) else omega
    for r in rows:
        dot = add(*(mul(a, b) for a, b in zip(r, g) if a is not ZERO and b is not ZERO))
        if not oracle.zero(dot):
            return False
    return True


# -- closures --------------------------------------------------------------


@dataclass
class ClosureResult:
    generators: list
    steps: int
    span: GenericSpan
    history: list = field(default_factory=list)  # rank after each step


def _grad_is_zero(lam: Expr, coords) -> bool:
    return all(e is ZERO for e in gradient(lam, coords))


def codistribution_closure(coords: Sequence[str], potentials: Sequence[Expr], operators: Sequence[Callable],
                           oracle: RankOracle, conditional: tuple | None = None,
                           span: GenericSpan | None = None, size_cap: int = SIZE_CAP) -> ClosureResult:
    """Smallest codistribution containing span{grad lam} and invariant under ``operators``.

    Each operator maps a potential to a potential (a Lie derivative, possibly
    with time or jet terms).  ``conditional = (xi_ops, zeta_ops)`` adds
    xi(lam) only when the gradient of every zeta(lam) vanishes identically.
    Returns the independent generators and the first step ``j`` with
    Omega_j == Omega_{j-1}.
    """
    coords = tuple(coords)
    if span is None:
        span = GenericSpan(oracle, len(coords))
    kept = []
    frontier = []
    for lam in potentials:
        if span.add(gradient(lam, coords)):
            kept.append(lam)
            frontier.append(lam)
        elif conditional is not None:
            frontier.append(lam)
    history = [span.rank]
    step = 0
    seen = {lam.uid for lam in frontier}
    while True:
        step += 1
        added = False
        nxt = []
        for lam in frontier:
            cands = [op(lam) for op in operators]
            if conditional is not None:
                xi_ops, zeta_ops = conditional
                if all(_zero_gradient(z(lam), coords, oracle) for z in zeta_ops):
                    cands.extend(op(lam) for op in xi_ops)
            for c in cands:
                if c.uid in seen or type(c) is Const:
                    continue
                seen.add(c.uid)
                if size_cap and size(c) > size_cap:
                    raise ExpressionTooLarge("closure generator exceeds the node-count cap",
                                             cap=size_cap, size=size(c), step=step)
                grad = gradient(c, coords)
                if is_zero_vector(grad):
                    continue
                if span.add(grad):
                    kept.append(c)
                    nxt.append(c)
                    added = True
                elif conditional is not None:
                    nxt.append(c)
        history.append(span.rank)
        if not added:
            return ClosureResult(kept, step, span, history)
        frontier = nxt


def _zero_gradient(lam: Expr, coords, oracle: RankOracle) -> bool:
    return all(e is ZERO or oracle.zero(e) for e in gradient(lam, coords))


def distribution_closure(coords: Sequence[str], vectors: Sequence[Sequence[Expr]], operators: Sequence[Callable],
                         oracle: RankOracle, size_cap: int = SIZE_CAP) -> ClosureResult:
    """Smallest distribution containing ``vectors`` and invariant under ``operators``.

    Each operator maps a vector field to a vector field (a Lie bracket or an
    autobracket).  Returns the first step ``j`` with Delta_j == Delta_{j-1}.
    """
    coords = tuple(coords)
    span = GenericSpan(oracle, len(coords))
    kept = []
    for v in vectors:
        v = tuple(v)
        if span.add(v):
            kept.append(v)
    frontier = list(kept)
    history = [span.rank]
    step = 0
    while True:
        step += 1
        added = False
        nxt = []
        for v in frontier:
            for op in operators:
                c = tuple(op(v))
                if is_zero_vector(c):
                    continue
                if size_cap:
                    check_size(c, size_cap, "distribution generator")
                if span.add(c):
                    kept.append(c)
                    nxt.append(c)
                    added = True
        history.append(span.rank)
        if not added:
            return ClosureResult(kept, step, span, history)
        frontier = nxt


def lie_operator(field_: Sequence[Expr], coords: Sequence[str], dt: bool = False) -> Callable:
    field_ = tuple(field_)

    def op(lam):
        return lie_scalar(field_, lam, coords, dt)

    return op


def bracket_operator(field_: Sequence[Expr], coords: Sequence[str]) -> Callable:
    field_ = tuple(field_)

    def op(v):
        return lie_bracket(field_, v, coords)

    return op


# -- null space --------------------------------------------------------------


def independent_rows(rows: Sequence[Sequence[Expr]], oracle: RankOracle) -> tuple[list, GenericSpan]:
    rows = [tuple(r) for r in rows]
    if not rows:
        return [], None
    span = GenericSpan(oracle, len(rows[0]))
    keep = [r for r in rows if span.add(r)]
    return keep, span


def _simple_basis(rows, n, oracle):
    """A basis of span(rows) built from the simplest available covectors.

    Unit covectors of coordinates already in the span come first, then the
    given rows by increasing expression size.
    """
    full = GenericSpan(oracle, n)
    for r in rows:
        full.add(r)
    span = GenericSpan(oracle, n)
    basis = []
    for i in range(n):
        e = tuple(ONE if j == i else ZERO for j in range(n))
        if not full.test(e) and span.add(e):
            basis.append(e)
    for r in sorted(rows, key=lambda r: sum(size(e) for e in r)):
        if span.rank == full.rank:
            break
        if span.add(r):
            basis.append(r)
    return basis, span


def clear_denominators(vec: Sequence[Expr]) -> tuple:
    """Multiply through by a common denominator; direction is unchanged."""
    parts = [together(e) for e in vec]
    den = lcm_products([d for _, d in parts if d is not ONE])
    if den is ONE:
        out = tuple(vec)
    else:
        out = tuple(ZERO if n is ZERO else mul(n, den, power(d, MINUS_ONE)) for n, d in parts)
    coeffs = [e.coeff if type(e).__name__ == "Mul" else (e.value if type(e) is Const else None) for e in out]
    nz = [c for c, e in zip(coeffs, out) if e is not ZERO]
    if nz and all(c is not None and c < 0 for c in nz):
        out = tuple(mul(MINUS_ONE, e) for e in out)
    return out


def null_space(omega: Codistribution | Sequence, oracle: RankOracle, coords: Sequence[str] | None = None,
               simplify_zero: bool = True) -> list:
    """Generators of the annihilator of ``omega``.

    Symbolic Gauss-Jordan elimination on the independent generators: pivot
    columns are taken left to right, each pivot row chosen among the rows
    nonzero at the witness point (smallest expression first).  Every free
    column yields one generator with a unit entry there; denominators are
    then cleared.
    """
    if isinstance(omega, Codistribution):
        rows = omega.covectors()
        n = omega.n
    else:
        rows = [tuple(r) for r in omega]
        n = len(coords) if coords is not None else (len(rows[0]) if rows else 0)
    if not rows:
        return [tuple(ONE if j == i else ZERO for j in range(n)) for i in range(n)]
    rows, span = _simple_basis(rows, n, oracle)
    rank = len(rows)
    witness = span.witness()
    work = [list(r) for r in rows]
    pivot_of = {}  # column -> row index
    used = set()
    for col in range(n):
        best = None
        for ri, r in enumerate(work):
            if ri in used or r[col] is ZERO:
                continue
            try:
                val = witness.eval(r[col])
                val = val[0] if isinstance(val, tuple) else val
            except (EvaluationError, ZeroDivisionError, OverflowError):
                continue
            if val == 0 or (isinstance(val, float) and abs(val) < 1e-12):
                continue
            key = (size(r[col]), ri)
            if best is None or key < best[0]:
                best = (key, ri)
        if best is None:
            continue
        pr = best[1]
        used.add(pr)
        pivot_of[col] = pr
        prow = work[pr]
        inv = power(prow[col], MINUS_ONE)
        prow = [ZERO if e is ZERO else mul(e, inv) for e in prow]
        prow[col] = ONE
        work[pr] = prow
        for ri, r in enumerate(work):
            if ri == pr or r[col] is ZERO:
                continue
            c = r[col]
            new = []
            for j in range(n):
                e = add(r[j], mul(MINUS_ONE, c, prow[j])) if prow[j] is not ZERO else r[j]
                if simplify_zero and e is not ZERO and j != col and oracle.zero(e):
                    e = ZERO
                new.append(e)
            new[col] = ZERO
            work[ri] = new
        if len(pivot_of) == rank:
            break
    if len(pivot_of) != rank:
        raise PivotDegeneracy("no valid pivot at the witness point", rank=rank, pivots=len(pivot_of))
    free = [c for c in range(n) if c not in pivot_of]
    out = []
    for fcol in free:
        vec = [ZERO] * n
        vec[fcol] = ONE
        for col, ri in pivot_of.items():
            e = work[ri][fcol]
            vec[col] = ZERO if e is ZERO else mul(MINUS_ONE, e)
        out.append(clear_denominators(vec))
    return out


def proportional(a: Sequence[Expr], b: Sequence[Expr], oracle: RankOracle) -> bool:
    """Do two vector fields point in the same direction generically?"""
    rank, _ = generic_rank([tuple(a), tuple(b)], oracle)
    return rank == 1
