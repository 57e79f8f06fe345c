"""Finite symmetry transformations and output-invariance checks.

A state symmetry xi together with its input symmetry uchi generates a
one-parameter family of initial states, parameter values and unknown input
profiles that all produce the same outputs.  This module integrates that
family numerically, evaluates the known closed forms of the builtin models,
checks that the outputs really are invariant, and recovers the true state
from one extra measurement when there is a single symmetry.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import DOP853, solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

try:
    import numba
except ImportError:  # pragma: no cover - optional accelerator
    numba = None

from .errors import DomainError, FlowBlowup, ModelValidationError, MultipleSymmetries, NoSensitivity
from .liegeo import RankOracle, lie_bracket
from .model import OdeModel, Scenario, scenario_signals
from .symexpr import (
    PI,
    TIME,
    ZERO,
    Expr,
    PointSampler,
    add,
    compile_source,
    diff,
    evaluate,
    generate_source,
    mul,
    parse,
    substitute,
)

DEFAULT_TOL = 1e-5
BLOWUP_LIMIT = 1e12
TAU_RTOL = 1e-11


# -- compiled kernels ------------------------------------------------------


class Kernel:
    """Vectorised evaluation of a list of expressions over named arguments.

    ``kernel(args)`` takes a stacked array whose leading axis follows
    ``names`` and returns an array of shape ``(len(exprs),) + args.shape[1:]``.
    """

    def __init__(self, exprs: Sequence[Expr], names: Sequence[str]):
        self.exprs = list(exprs)
        self.names = list(names)
        layout = {n: f"a[{i}]" for i, n in enumerate(self.names)}
        missing = set().union(*(e.free for e in self.exprs)) - set(layout) - {PI} if self.exprs else set()
        if missing:
            raise ModelValidationError(f"no value for symbols {sorted(missing)}", symbols=sorted(missing))
        src = generate_source(self.exprs, layout, "_kernel", "a", "_out", f"_out = [None] * {len(self.exprs)}")
        self._fn = compile_source(src, "_kernel")

    def __call__(self, args: np.ndarray) -> np.ndarray:
        shape = args.shape[1:]
        out = np.empty((len(self.exprs),) + shape)
        if not self.exprs:
            return out
        with np.errstate(all="ignore"):
            vals = self._fn(args)
        for i, v in enumerate(vals):
            out[i] = v
        return out


def sample_profiles(exprs: Sequence[Expr], times: np.ndarray) -> np.ndarray:
    """Profiles in t sampled on ``times``; shape ``(len(exprs), len(times))``."""
    return Kernel(exprs, [TIME])(np.asarray(times, float)[None, :])


# -- fixed-step integration --------------------------------------------------


class Simulator:
    """Classic fourth-order Runge-Kutta for an input-affine model.

    Inputs are supplied sampled every half step, so the stage values at the
    midpoints come from data rather than interpolation.  The stepping loop
    is compiled with numba when it is installed.
    """

    def __init__(self, model: OdeModel, jit: bool | None = None):
        self.model = model
        self.names = list(model.x) + list(model.u) + list(model.w) + [TIME]
        rows = model.dynamics()
        self.rhs = Kernel(rows, self.names)
        self.out = Kernel(model.h, list(model.x) + [TIME])
        self.jit = numba is not None if jit is None else (jit and numba is not None)
        self._run = _jit_rk4(rows, self.names) if self.jit else None
        states = [i for i, s in enumerate(model.x) if model.kinds.get(s, "state") == "state"]
        self._states = states
        self.jac = Kernel([diff(rows[i], model.x[j]) for i in states for j in states], self.names)

    def _f(self, x, u, w, t):
        tt = np.broadcast_to(np.asarray(t, float), (1,) + x.shape[1:])
        return self.rhs(np.concatenate([x, u, w, tt]))

    def integrate(self, x0: np.ndarray, t0: float, h: float, steps: int, U: np.ndarray,
                  W: np.ndarray, every: int = 1) -> np.ndarray:
        """States at t0 + k h for k = 0, every, 2 every, ..., steps.

        ``x0`` has shape ``(n, K)``; ``U`` and ``W`` have shape
        ``(m, 2*steps+1, K)`` (values every h/2).  Returns
        ``(steps/every + 1, n, K)``.
        """
        x = np.array(x0, float)
        out = np.empty((steps // every + 1,) + x.shape)
        out[0] = x
        U = np.ascontiguousarray(U, dtype=float)
        W = np.ascontiguousarray(W, dtype=float)
        with np.errstate(all="ignore"):
            if self._run is not None:
                return self._run(x, float(t0), float(h), int(steps), U, W, int(every), out)
            return self._rk4(x, out, t0, h, steps, U, W, every)

    def _rk4(self, x, out, t0, h, steps, U, W, every):
        for k in range(steps):
            t = t0 + k * h
            j = 2 * k
            k1 = self._f(x, U[:, j], W[:, j], t)
            k2 = self._f(x + 0.5 * h * k1, U[:, j + 1], W[:, j + 1], t + 0.5 * h)
            k3 = self._f(x + 0.5 * h * k2, U[:, j + 1], W[:, j + 1], t + 0.5 * h)
            k4 = self._f(x + h * k3, U[:, j + 2], W[:, j + 2], t + h)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if (k + 1) % every == 0:
                out[(k + 1) // every] = x
        return out

    def outputs(self, xs: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Outputs for states of shape ``(T, n, ...)``; returns ``(p, T, ...)``."""
        xs = np.moveaxis(xs, 0, 1)
        tt = np.broadcast_to(np.asarray(times, float).reshape((1, -1) + (1,) * (xs.ndim - 2)),
                             (1,) + xs.shape[1:])
        return self.out(np.concatenate([xs, tt]))

    def stiffness(self, X: np.ndarray, U: np.ndarray, W: np.ndarray, T: np.ndarray) -> float:
        """Largest |eigenvalue| of the state Jacobian over the given points.

        Constant parameters and appended inputs have no dynamics of their
        own and are left out.
        """
        ns = len(self._states)
        if not ns:
            return 0.0
        J = self.jac(np.concatenate([X, U, W, np.asarray(T, float)[None, :]]))
        J = np.moveaxis(J.reshape(ns, ns, -1), -1, 0)
        J = J[np.all(np.isfinite(J), axis=(1, 2))]
        if not J.size:
            return math.inf
        return float(np.max(np.abs(np.linalg.eigvals(J))))


def _jit_rk4(rows: Sequence[Expr], names: Sequence[str]):
    layout = {n: f"a[{i}]" for i, n in enumerate(names)}
    src = generate_source(list(rows), layout, "_scalar_rhs", "a, out", "out")
    f = numba.njit(compile_source(src, "_scalar_rhs"))
    n = len(rows)

    @numba.njit
    def stage(x, U, W, j, c, t, a, k):
        mu = U.shape[0]
        for i in range(n):
            a[i] = x[i]
        for i in range(mu):
            a[n + i] = U[i, j, c]
        for i in range(W.shape[0]):
            a[n + mu + i] = W[i, j, c]
        a[a.shape[0] - 1] = t
        f(a, k)

    @numba.njit
    def run(x0, t0, h, steps, U, W, every, out):
        K = x0.shape[1]
        a = np.empty(n + U.shape[0] + W.shape[0] + 1)
        k1 = np.empty(n)
        k2 = np.empty(n)
        k3 = np.empty(n)
        k4 = np.empty(n)
        xs = np.empty(n)
        x = np.empty(n)
        for c in range(K):
            for i in range(n):
                x[i] = x0[i, c]
            for k in range(steps):
                t = t0 + k * h
                j = 2 * k
                stage(x, U, W, j, c, t, a, k1)
                for i in range(n):
                    xs[i] = x[i] + 0.5 * h * k1[i]
                stage(xs, U, W, j + 1, c, t + 0.5 * h, a, k2)
                for i in range(n):
                    xs[i] = x[i] + 0.5 * h * k2[i]
                stage(xs, U, W, j + 1, c, t + 0.5 * h, a, k3)
                for i in range(n):
                    xs[i] = x[i] + h * k3[i]
                stage(xs, U, W, j + 2, c, t + h, a, k4)
                for i in range(n):
                    x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if (k + 1) % every == 0:
                    for i in range(n):
                        out[(k + 1) // every, i, c] = x[i]
        return out

    return run


def _signals(model: OdeModel, scenario: Scenario):
    x0, uprof, wprof = scenario_signals(model, scenario)
    return np.array(x0, float), uprof, wprof


def simulate(model: OdeModel, scenario: Scenario, dt: float, t_span=None, sim: Simulator | None = None) -> dict:
    """Trajectory on the grid of step ``dt`` using RK4 with step ``dt``."""
    sim = sim or Simulator(model)
    t0, t1 = t_span or scenario.t_span
    steps = _steps(t0, t1, dt)
    x0, uprof, wprof = _signals(model, scenario)
    half = t0 + 0.5 * dt * np.arange(2 * steps + 1)
    U = sample_profiles(uprof, half)[..., None]
    W = sample_profiles(wprof, half)[..., None]
    xs = sim.integrate(x0[:, None], t0, dt, steps, U, W)[..., 0]
    times = t0 + dt * np.arange(steps + 1)
    return {"t": times, "x": xs.T, "y": sim.outputs(xs[..., None], times)[..., 0]}


def _steps(t0: float, t1: float, dt: float) -> int:
    steps = int(round((t1 - t0) / dt))
    if steps < 1 or abs(t0 + steps * dt - t1) > 1e-9 * max(1.0, abs(t1)):
        raise ModelValidationError("the time step must divide the time interval", dt=dt, t_span=[t0, t1])
    return steps


def _rel_dev(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row max |a-b| scaled by the row's max |b|."""
    scale = np.max(np.abs(b), axis=1)
    scale[scale == 0] = 1.0
    return np.max(np.abs(a - b), axis=1) / scale


def choose_dt(model: OdeModel, scenario: Scenario, tol: float = DEFAULT_TOL, t_span=None,
              max_halvings: int = 10, sim: Simulator | None = None) -> float:
    """Largest dt = span/(200 2^k) whose step-halving difference is below tol/10.

    The difference between the dt and dt/2 solutions bounds the error at dt
    (it is about 15/16 of it for a fourth-order method).
    """
    t0, t1 = t_span or scenario.t_span
    dt = (t1 - t0) / 200.0
    sim = sim or Simulator(model)
    coarse = simulate(model, scenario, dt, (t0, t1), sim)
    for _ in range(max_halvings):
        fine = simulate(model, scenario, dt / 2, (t0, t1), sim)
        err = np.max(_rel_dev(coarse["y"], fine["y"][:, ::2]))
        if err <= tol / 10.0:
            return dt
        dt /= 2
        coarse = fine
    return dt


# -- symmetry pairs -----------------------------------------------------------


@dataclass
class SymmetryPair:
    """A state symmetry xi of the extended model with its input symmetry."""

    model: OdeModel
    xi: tuple
    uchi: tuple
    kind: str = "unobservability"

    @property
    def names(self) -> list:
        return list(self.model.x) + list(self.model.u) + list(self.model.w) + [TIME]


def check_commutativity(model: OdeModel, xi: Sequence[Expr], uchi: Sequence[Expr],
                        oracle: RankOracle | None = None) -> bool:
    """Whether [xi, g0 + sum f u + sum g w] + sum_j g^j uchi_j vanishes identically.

    Inputs stay free symbols.  Components of ``uchi`` past ``m`` are zero for
    an unobservability symmetry, so summing over every input is equivalent.
    """
    oracle = oracle or RankOracle()
    F = tuple(model.dynamics())
    br = lie_bracket(tuple(xi), F, model.x)
    for i in range(model.n):
        c = add(br[i], *(mul(model.g[j][i], uchi[j]) for j in range(model.m_w)))
        if c is not ZERO and not oracle.zero(c):
            return False
    return True


def canonicity_flow(w: np.ndarray, i: int, tau: float, m: int) -> np.ndarray:
    """Shift the input m+i (1-based i) by tau; every other component is unchanged."""
    out = np.array(w, float, copy=True)
    if not 1 <= i <= out.shape[0] - m:
        raise ModelValidationError("canonicity index out of range", index=i, available=out.shape[0] - m)
    out[m + i - 1] = out[m + i - 1] + tau
    return out


class TauFlow:
    """The tau-flow dx/dtau = xi(x), dw/dtau = uchi(x, w) at many points at once."""

    def __init__(self, pair: SymmetryPair, rtol: float = TAU_RTOL):
        self.pair = pair
        self.n = pair.model.n
        self.mw = pair.model.m_w
        self.xi_k = Kernel(pair.xi, pair.names)
        self.chi_k = Kernel(pair.uchi, pair.names)
        self.rtol = rtol

    def _rhs_factory(self, U, T, M):
        n, mw = self.n, self.mw

        def rhs(_tau, zflat):
            z = zflat.reshape(n + mw, M)
            args = np.concatenate([z[:n], U, z[n:], T[None, :]])
            return np.concatenate([self.xi_k(args), self.chi_k(args)]).ravel()

        return rhs

    def run(self, X: np.ndarray, W: np.ndarray, U: np.ndarray, T: np.ndarray, taus: Sequence[float],
            chunk: int = 100_000) -> dict:
        """Flow the points (columns of X, W) to each tau.

        Returns ``{tau: (X', W')}``; a tau at or beyond a blowup maps to a
        ``FlowBlowup``.  Large point sets are processed in chunks.
        """
        M = X.shape[1]
        if M > chunk:
            parts = [self.run(X[:, a:a + chunk], W[:, a:a + chunk], U[:, a:a + chunk], T[a:a + chunk], taus,
                              chunk) for a in range(0, M, chunk)]
            out = {}
            for t in parts[0]:
                items = [p[t] for p in parts]
                bad = next((i for i in items if isinstance(i, FlowBlowup)), None)
                out[t] = bad if bad is not None else (np.concatenate([i[0] for i in items], axis=1),
                                                      np.concatenate([i[1] for i in items], axis=1))
            return out
        z0 = np.concatenate([X, W]).astype(float)
        if not np.all(np.isfinite(z0)):
            raise ModelValidationError("cannot flow non-finite points")
        scale = np.max(np.abs(z0), axis=1)
        scale[scale == 0] = 1.0
        atol = np.repeat(self.rtol * scale, M)
        rhs = self._rhs_factory(U, T, M)
        out = {}
        for sign in (1.0, -1.0):
            targets = sorted({float(t) for t in taus if t * sign > 0}, key=abs)
            if targets:
                out.update(self._leg(rhs, z0, scale, atol, M, targets[-1], targets, None))
        if any(t == 0 for t in taus):
            out[0.0] = (np.array(X, float), np.array(W, float))
        return out

    def _leg(self, rhs, z0, scale, atol, M, tau_end, targets, stop):
        d = self.n + self.mw

        def blowup(_tau, zflat):
            z = zflat.reshape(d, M)
            if not np.all(np.isfinite(z)):
                return -1.0
            return BLOWUP_LIMIT - float(np.max(np.abs(z) / scale[:, None]))

        blowup.terminal = True
        events = [blowup]
        if stop is not None:
            def stopper(_tau, zflat):
                return stop(zflat.reshape(d, M))

            stopper.terminal = True
            events.append(stopper)
        with np.errstate(all="ignore"):
            sol = solve_ivp(rhs, (0.0, tau_end), z0.ravel(), method="DOP853", t_eval=targets,
                            rtol=self.rtol, atol=atol, events=events)
        out = {}
        ts = np.asarray(sol.t, float)
        reached = float(ts[-1]) if ts.size else 0.0
        ended = float(sol.t_events[0][0]) if sol.t_events and len(sol.t_events[0]) else None
        if sol.status == 1 and len(sol.t_events) > 1 and len(sol.t_events[1]):
            ended = float(sol.t_events[1][0])
        got = {float(t): sol.y[:, k] for k, t in enumerate(sol.t)}
        for t in targets:
            if t in got and np.all(np.isfinite(got[t])):
                z = got[t].reshape(d, M)
                out[t] = (z[:self.n], z[self.n:])
            else:
                where = ended if ended is not None else reached
                out[t] = FlowBlowup("the symmetry flow leaves its domain", tau=t, reached=float(where),
                                    reason=sol.message if sol.status < 0 else "blowup")
        if sol.status == 1 and len(sol.t_events) > 1 and len(sol.t_events[1]):
            self.last_reason = "sign"
        elif sol.status == 1 or sol.status < 0:
            self.last_reason = "blowup"
        else:
            self.last_reason = "limit"
        self.last_end = ended if ended is not None else (tau_end if sol.status == 0 else float(reached))
        return out

    def boundary(self, X, W, U, T, sign: float, tau_max: float, stop=None) -> tuple[float, str]:
        """How far the flow can go in one direction, and why it stopped.

        The reason is "blowup" (escape or solver breakdown), "sign" (``stop``
        went negative) or "limit" (tau_max reached).
        """
        M = X.shape[1]
        d = self.n + self.mw
        z0 = np.concatenate([X, W]).astype(float)
        scale = np.max(np.abs(z0), axis=1)
        scale[scale == 0] = 1.0
        atol = np.repeat(self.rtol * scale, M)
        rhs = self._rhs_factory(U, T, M)

        def growth(zflat):
            z = zflat.reshape(d, M)
            if not np.all(np.isfinite(z)):
                return -1.0
            return BLOWUP_LIMIT - float(np.max(np.abs(z) / scale[:, None]))

        checks = [("blowup", growth)]
        if stop is not None:
            checks.append(("sign", lambda zflat: stop(zflat.reshape(d, M))))
        with np.errstate(all="ignore"):
            solver = DOP853(rhs, 0.0, z0.ravel(), sign * tau_max, rtol=self.rtol, atol=atol)
            while solver.status == "running":
                before = solver.t
                solver.step()
                if solver.status == "failed":
                    return float(solver.t), "blowup"
                hits = []
                for reason, g in checks:
                    if g(solver.y) >= 0:
                        continue
                    dense = solver.dense_output()
                    try:
                        at = brentq(lambda t: g(dense(t)), before, solver.t, xtol=1e-12)
                    except ValueError:
                        at = solver.t
                    hits.append((abs(at), at, reason))
                if hits:
                    _, at, reason = min(hits)
                    return float(at), reason
        return float(sign * tau_max), "limit"


# -- bundles ------------------------------------------------------------------


@dataclass
class FlowSpec:
    """Group-parameter values and integration settings for a symmetry flow."""

    taus: tuple = (0.0,)
    dt: float | None = None
    t_span: tuple | None = None
    tol: float = DEFAULT_TOL
    rtol: float = TAU_RTOL
    perturb: float = 0.0

    def tau_grid(self) -> list:
        return sorted({0.0} | {float(t) for t in self.taus})


@dataclass
class TauResult:
    tau: float
    x: np.ndarray | None  # transformed state on the t grid (n, T)
    w: np.ndarray | None  # transformed unknown inputs (m_w, T)
    x_sim: np.ndarray | None  # state re-integrated from x'(t0) with w'
    y: np.ndarray | None  # outputs of the re-integrated system (p, T)
    deviation: float = math.inf
    worst: dict = field(default_factory=dict)
    admissible: bool = False
    violations: list = field(default_factory=list)
    blowup: dict | None = None


@dataclass
class TrajectoryBundle:
    model: OdeModel
    t: np.ndarray
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    dt: float
    results: dict  # tau -> TauResult
    integration_error: float = 0.0

    @property
    def taus(self) -> list:
        return sorted(self.results)

    def summary(self) -> dict:
        return {
            "dt": self.dt,
            "integration_error": self.integration_error,
            "taus": [
                {
                    "tau": r.tau,
                    "admissible": r.admissible,
                    "deviation": None if not math.isfinite(r.deviation) else r.deviation,
                    "violations": r.violations,
                    "blowup": r.blowup,
                }
                for r in (self.results[t] for t in self.taus)
            ],
        }


def _constrained_rows(Z: np.ndarray) -> np.ndarray:
    """Rows that never go negative on the baseline are kept non-negative."""
    return np.all(Z >= 0, axis=1)


def _half_grid(sim: Simulator, x0, uprof, wprof, t0: float, dt: float, steps: int):
    """Baseline states and inputs every dt/2, integrated with step dt/2."""
    quarter = t0 + 0.25 * dt * np.arange(4 * steps + 1)
    Uq = sample_profiles(uprof, quarter)
    Wq = sample_profiles(wprof, quarter)
    X = sim.integrate(x0[:, None], t0, dt / 2, 2 * steps, Uq[..., None], Wq[..., None])[..., 0].T
    return quarter[::2], X, Uq[:, ::2], Wq[:, ::2]


def _substeps(sim: Simulator, X, U, W, T, dt: float, stride: int = 8, limit: float = 1.0) -> int:
    """Power of two s with dt/s times the stiffness at most ``limit``."""
    rho = sim.stiffness(X[:, ::stride], U[:, ::stride], W[:, ::stride], T[::stride])
    if not math.isfinite(rho):
        return 1 << 30
    s = 1
    while dt / s * rho > limit:
        s *= 2
    return s


def symmetry_flow(pair: SymmetryPair, scenario: Scenario, spec: FlowSpec,
                  oracle: RankOracle | None = None, require_commuting: bool = False,
                  max_substeps: int = 4096) -> TrajectoryBundle:
    """Indistinguishable trajectories along a symmetry for every tau in ``spec``.

    The baseline is integrated with step dt/2 so the tau-flow can be applied
    at every half step.  Each transformed system is re-integrated from
    x'(t0, tau) driven by w'(t, tau).  When its dynamics are much stiffer
    than the baseline (a rate constant growing with tau, say) the step is
    split into s substeps and w' is interpolated between half steps with a
    cubic spline, whose error is of the same order as the integrator's.
    """
    model = pair.model
    if require_commuting and not check_commutativity(model, pair.xi, pair.uchi, oracle):
        raise DomainError("the symmetry does not commute with the dynamics")
    t0, t1 = spec.t_span or scenario.t_span
    sim = Simulator(model)
    dt = spec.dt or choose_dt(model, scenario, spec.tol, (t0, t1), sim=sim)
    steps = _steps(t0, t1, dt)
    x0, uprof, wprof = _signals(model, scenario)
    half, Xh, Uh, Wh = _half_grid(sim, x0, uprof, wprof, t0, dt, steps)
    times = half[::2]

    flow = TauFlow(pair, spec.rtol)
    taus = spec.tau_grid()
    flowed = flow.run(Xh, Wh, Uh, half, taus)
    Zb = np.concatenate([Xh, Wh])
    positive = _constrained_rows(Zb)
    base_scale = np.max(np.abs(Zb), axis=1)
    base_scale[base_scale == 0] = 1.0
    names = list(model.x) + list(model.w)

    results = {}
    groups: dict = {}
    for tau in taus:
        item = flowed[tau]
        if isinstance(item, FlowBlowup):
            results[tau] = TauResult(tau, None, None, None, None, blowup=item.to_dict())
            continue
        X, W = item
        Z = np.concatenate([X, W])
        bad = [names[r] for r in np.nonzero(positive)[0] if np.min(Z[r]) < -1e-12 * base_scale[r]]
        results[tau] = TauResult(tau, X[:, ::2], W[:, ::2], None, None, admissible=not bad, violations=bad)
        s = 1 if tau == 0 else _substeps(sim, X, Uh, W, half, dt)
        if s > max_substeps:
            results[tau].worst = {"too_stiff": True, "substeps": s}
            continue
        groups.setdefault(s, []).append(tau)

    base_y = sim.outputs(Xh.T[::2][..., None], times)[..., 0]
    err = 0.0
    for s in sorted(groups):
        group = sorted(set(groups[s]) | {0.0})
        if s == 1:
            data, Ug = flowed, Uh
        else:
            fine = t0 + 0.5 * (dt / s) * np.arange(2 * steps * s + 1)
            Ug = sample_profiles(uprof, fine)
            data = {t: (flowed[t][0], CubicSpline(half, flowed[t][1], axis=1)(fine)) for t in group}
        ys = _reintegrate(sim, data, group, Ug, t0, dt / s, steps * s, s, times, spec.perturb)
        ref = ys[0.0][0]
        if s == 1:
            err = float(np.max(_rel_dev(ref, base_y)))
        scale = np.max(np.abs(ref), axis=1)
        scale[scale == 0] = 1.0
        for tau in groups[s]:
            r = results[tau]
            item = ys.get(tau)
            if item is None:
                r.worst = {"diverged": True, "substeps": s}
                continue
            r.y, r.x_sim = item
            if not np.all(np.isfinite(r.y)):
                r.worst = {"diverged": True, "substeps": s}
                continue
            dev = np.abs(r.y - ref) / scale[:, None]
            j, ti = np.unravel_index(int(np.argmax(dev)), dev.shape)
            r.deviation = float(dev[j, ti])
            r.worst = {"output": int(j), "t": float(times[ti]), "substeps": s}
    return TrajectoryBundle(model, times, Xh[:, ::2], Wh[:, ::2], base_y, dt, results, err)


def _reintegrate(sim: Simulator, data: dict, group: list, U, t0: float, h: float, steps: int, every: int,
                 times, perturb: float) -> dict:
    """Outputs on ``times`` of the transformed systems for each tau in ``group``."""
    ok = [t for t in group if t in data and not isinstance(data[t], FlowBlowup)]
    X0 = np.stack([data[t][0][:, 0] for t in ok], axis=-1)
    W = np.stack([data[t][1] + (perturb if t != 0 else 0.0) for t in ok], axis=-1)
    Uk = np.broadcast_to(U[..., None], U.shape + (len(ok),))
    xs = sim.integrate(X0, t0, h, steps, Uk, W, every=every)
    ys = sim.outputs(xs, times)
    out = {}
    for k, t in enumerate(ok):
        out[t] = (ys[..., k], xs[..., k].T)
    return out


def certify_indistinguishability(bundle: TrajectoryBundle, tol: float = DEFAULT_TOL) -> dict:
    """Pass iff every admissible tau keeps the relative output deviation within ``tol``."""
    worst = {"deviation": 0.0}
    admissible = []
    rejected = []
    for tau in bundle.taus:
        r = bundle.results[tau]
        if r.blowup is not None or not r.admissible:
            rejected.append({"tau": tau, "violations": r.violations, "blowup": r.blowup})
            continue
        admissible.append(tau)
        if r.deviation > worst["deviation"] or (tau != 0 and "tau" not in worst):
            worst = {"deviation": r.deviation, "tau": tau, **r.worst}
    ok = all(bundle.results[t].deviation <= tol for t in admissible)
    if worst.get("output") is not None:
        worst["output_name"] = str(bundle.model.h[worst["output"]])
    return {
        "pass": bool(ok),
        "tol": tol,
        "worst": worst,
        "admissible_taus": [t for t in admissible if t != 0],
        "rejected": rejected,
        "integration_error": bundle.integration_error,
    }


def admissible_interval(pair: SymmetryPair, scenario: Scenario, dt: float | None = None,
                        tau_max: float = 20.0, tol: float = DEFAULT_TOL, t_span=None) -> dict:
    """Largest interval around 0 on which the flow exists and keeps signs.

    Every state, parameter or input that is non-negative along the whole
    baseline must stay non-negative.  Each end is where the flow first blows
    up or a constrained quantity crosses zero.
    """
    model = pair.model
    t0, t1 = t_span or scenario.t_span
    sim = Simulator(model)
    dt = dt or choose_dt(model, scenario, tol, (t0, t1), sim=sim)
    steps = _steps(t0, t1, dt)
    x0, uprof, wprof = _signals(model, scenario)
    T, X, U, W = _half_grid(sim, x0, uprof, wprof, t0, dt, steps)
    Z = np.concatenate([X, W])
    rows = np.nonzero(_constrained_rows(Z))[0]
    scale = np.max(np.abs(Z), axis=1)
    scale[scale == 0] = 1.0
    slack = 1e-12

    def stop(z):
        if not rows.size:
            return 1.0
        return float(np.min(z[rows] / scale[rows, None])) + slack

    flow = TauFlow(pair)
    hi, why_hi = flow.boundary(X, W, U, T, 1.0, tau_max, stop)
    lo, why_lo = flow.boundary(X, W, U, T, -1.0, tau_max, stop)
    names = list(model.x) + list(model.w)
    return {
        "lower": lo,
        "upper": hi,
        "lower_reason": why_lo,
        "upper_reason": why_hi,
        "empty": bool(abs(lo) < 1e-9 and abs(hi) < 1e-9),
        "constrained": [names[r] for r in rows],
        "tau_max": tau_max,
    }


def write_csv(bundle: TrajectoryBundle, directory: str, quantities: Sequence[str] | None = None) -> list:
    """One CSV per quantity: t, the baseline, then one column per tau."""
    os.makedirs(directory, exist_ok=True)
    model = bundle.model
    series = {}
    for i, s in enumerate(model.x):
        series[s] = (bundle.x[i], lambda r, i=i: r.x[i] if r.x is not None else None)
    for j, s in enumerate(model.w):
        series[s] = (bundle.w[j], lambda r, j=j: r.w[j] if r.w is not None else None)
    for k in range(model.p):
        series[f"y{k + 1}"] = (bundle.y[k], lambda r, k=k: r.y[k] if r.y is not None else None)
    names = list(quantities) if quantities else list(series)
    written = []
    taus = bundle.taus
    for name in names:
        if name not in series:
            raise ModelValidationError(f"unknown quantity {name!r}", known=list(series))
        base, pick = series[name]
        cols = [pick(bundle.results[t]) for t in taus]
        path = os.path.join(directory, f"{name}.csv")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "baseline"] + [f"tau={t:g}" for t in taus])
            for k, t in enumerate(bundle.t):
                row = [repr(float(t)), repr(float(base[k]))]
                row += ["" if c is None else repr(float(c[k])) for c in cols]
                wr.writerow(row)
        written.append(path)
    return written


# -- closed forms ---------------------------------------------------------------

TAU = "tau"


def _toggle_forms(a: str, b: str) -> dict:
    """The three toggle-switch families acting on promoter ``a`` (other state x_b)."""
    x, W, n, k, k0 = f"x{b}", f"W{a}", f"n{a}", f"k{a}", f"k0{a}"
    r = f"(({x}/{W})^{n})"
    return {
        1: {
            "values": {
                W: f"{x}*((1-{n}*(1+{r})*tau)/({r}+{n}*{r}*tau+{n}*tau))^(1/{n})",
                k0: f"{k0}+{n}*{k}*tau",
            },
            "domain": [f"1-{n}*(1+{r})*tau", f"{r}+{n}*{r}*tau+{n}*tau"],
        },
        2: {
            "values": {
                W: f"{x}*(1/((1+{r})*exp({n}*tau)-1))^(1/{n})",
                k: f"{k}*exp({n}*tau)",
            },
            "domain": [f"(1+{r})*exp({n}*tau)-1"],
        },
        3: {
            "values": {
                W: f"{x}*exp(exp(-tau)*log({W}/{x}))",
                n: f"{n}*exp(tau)",
            },
            "domain": [],
        },
    }


def _closed_form_table() -> dict:
    table = {
        "hiv": {
            "values": {
                "T_U": "T_U + T_I - T_I/rho*(delta*exp(-rho*tau) + rho - delta)",
                "T_I": "T_I/rho*(delta*exp(-rho*tau) + rho - delta)",
                "V": "V",
                "lambda": "lambda",
                "rho": "rho",
                "delta": "delta*rho/((rho - delta)*exp(rho*tau) + delta)",
                "N": "N*exp(rho*tau)",
                "c": "c",
                "eta": "(eta*T_U*V*rho*exp(rho*tau) + (T_I*delta^2 - T_I*delta*rho - eta*T_U*V*delta)"
                       "*(exp(rho*tau) - 1))/(V*(T_I*delta + T_U*rho)*exp(rho*tau) - V*T_I*delta)",
            },
            "domain": ["(rho - delta)*exp(rho*tau) + delta"],
        },
        "seiar_sym1": {
            "values": {"S": "S + tau", "E": "E", "I": "I", "A": "A", "R": "R - tau", "mu1": "mu1",
                       "mu2": "mu2", "gamma": "gamma", "p": "p", "beta": "beta*S/(S + tau)"},
            "domain": ["S + tau"],
        },
        "seiar_sym2": {
            "values": {"S": "S + E*(1 - exp(-tau))", "E": "E*exp(-tau)", "I": "I", "A": "A", "R": "R",
                       "mu1": "mu1", "mu2": "mu2", "gamma": "gamma*exp(tau)", "p": "p",
                       "beta": "(gamma*E/(A + I)*(1 - exp(tau)) - S*beta)/(E - (E + S)*exp(tau))"},
            "domain": [],
        },
    }
    for offset, (a, b) in ((0, ("1", "2")), (3, ("2", "1"))):
        for k, form in _toggle_forms(a, b).items():
            table[f"toggle_set{k + offset}"] = form
    return table


CLOSED_FORMS = _closed_form_table()
CLOSED_FORM_NAMES = tuple(CLOSED_FORMS)


def closed_form_exprs(name: str) -> tuple[dict, list]:
    """Transformed quantities as expressions in the baseline values and ``tau``."""
    if name not in CLOSED_FORMS:
        raise ModelValidationError(f"no closed form named {name!r}", known=list(CLOSED_FORM_NAMES))
    form = CLOSED_FORMS[name]
    return {k: parse(v) for k, v in form["values"].items()}, [parse(d) for d in form["domain"]]


def closed_form(name: str, tau: float, values: dict, t: float | None = None) -> dict:
    """Evaluate a closed-form family at ``tau`` from baseline ``values``.

    ``values`` holds the baseline quantities at time ``t`` (states and
    inputs) and the constant parameters.  Raises ``DomainError`` when tau
    lies outside the domain of the family.  Quantities whose inputs are not
    all in ``values`` are left out.
    """
    exprs, domain = closed_form_exprs(name)
    point = {k: float(v) for k, v in values.items()}
    point[TAU] = float(tau)
    if t is not None:
        point[TIME] = float(t)
    for d in domain:
        if evaluate(d, point, exact=False) <= 0:
            raise DomainError("tau is outside the domain of the transformation", tau=tau, family=name)
    return {k: evaluate(e, point, exact=False) for k, e in exprs.items() if e.free <= point.keys()}


def toggle_residuals(k: int) -> list:
    """Residuals of the two production-rate identities under toggle family ``k``.

    Each residual is transformed-rate minus original-rate and vanishes
    identically when the family is a true symmetry.
    """
    exprs, _ = closed_form_exprs(f"toggle_set{k}")
    out = []
    for a, b in (("1", "2"), ("2", "1")):
        rate = parse(f"k0{a} + k{a}/(1 + (x{b}/W{a})^n{a})")
        moved = substitute(rate, {s: e for s, e in exprs.items()})
        out.append(add(moved, mul(-1, rate)))
    return out


def residual_is_zero(e: Expr, trials: int = 8, seed: int | None = None, tau_window: float = 0.1) -> bool:
    """Zero test at ``trials`` random points inside the domain of the families.

    Positive symbols are drawn from the sampler; tau is drawn from
    (-tau_window, tau_window) where the toggle families are defined.
    """
    sampler = PointSampler(seed) if seed is not None else PointSampler()
    names = sorted(e.free)
    good = 0
    for k in range(50 * trials):
        if good == trials:
            return True
        vals = sampler.bindings(2000 + k, names, exact=False)
        if TAU in vals:
            vals[TAU] = tau_window * (2.0 * (vals[TAU] - 1.0 / 3.0) / (3.0 - 1.0 / 3.0) - 1.0)
        try:
            v = evaluate(e, vals, exact=False)
        except DomainError:
            continue
        scale = max([1.0, *(abs(float(x)) for x in vals.values())])
        if not math.isfinite(v):
            continue
        if abs(v) > 1e-9 * scale:
            return False
        good += 1
    return good == trials


# -- minimal external information --------------------------------------------


@dataclass
class Recovery:
    tau: float
    measured: str
    t_star: float
    value: float
    state: dict  # recovered values at t_star
    trajectory: np.ndarray | None = None
    inputs: np.ndarray | None = None

    def to_json(self) -> dict:
        return {"tau": self.tau, "measured": self.measured, "t_star": self.t_star, "value": self.value,
                "recovered": self.state}


def single_symmetry_recovery(pair: SymmetryPair, generators: int, times: np.ndarray, X: np.ndarray,
                             W: np.ndarray | None, measured: str, t_star: float, value: float,
                             bracket: tuple = (-10.0, 10.0), grid: int = 41, xtol: float = 1e-10,
                             U: np.ndarray | None = None) -> Recovery:
    """Recover the true trajectory from one extra measurement.

    ``X`` and ``W`` are the state and input trajectories consistent with the
    outputs (any member of the indistinguishable family) on ``times``.  The
    flow parameter that maps the measured component at ``t_star`` to
    ``value`` is found by bracketing on a grid and refined by Brent's method;
    the same parameter then maps the whole trajectory.
    """
    model = pair.model
    if generators != 1:
        raise MultipleSymmetries("one extra measurement fixes a single symmetry only", symmetries=generators)
    i = model.state_index(measured)
    if pair.xi[i] is ZERO:
        raise NoSensitivity(f"{measured} does not move along the symmetry", state=measured)
    k = int(np.argmin(np.abs(np.asarray(times) - t_star)))
    if abs(times[k] - t_star) > 1e-9 * max(1.0, abs(t_star)):
        raise ModelValidationError("the measurement time is not on the time grid", t_star=t_star)
    flow = TauFlow(pair)
    mw = model.m_w
    W = np.zeros((mw, X.shape[1])) if W is None else W
    U = np.zeros((model.m_u, X.shape[1])) if U is None else U
    xs, ws, us, ts = X[:, k:k + 1], W[:, k:k + 1], U[:, k:k + 1], np.array([times[k]], float)

    def at(sig):
        res = flow.run(xs, ws, us, ts, [sig])[float(sig)]
        if isinstance(res, FlowBlowup):
            return math.nan
        return float(res[0][i, 0]) - value

    sigmas = np.linspace(bracket[0], bracket[1], grid)
    vals = np.array([at(s) for s in sigmas])
    finite = np.isfinite(vals)
    if finite.sum() >= 2 and np.ptp(vals[finite]) <= 1e-12 * max(1.0, abs(value)):
        raise NoSensitivity(f"{measured} does not move along the symmetry", state=measured)
    root = None
    if finite[np.argmin(np.abs(sigmas))] and abs(at(0.0)) == 0.0:
        root = 0.0
    for a, b, fa, fb in zip(sigmas[:-1], sigmas[1:], vals[:-1], vals[1:]):
        if root is not None:
            break
        if np.isfinite(fa) and np.isfinite(fb) and fa * fb <= 0:
            root = brentq(at, a, b, xtol=xtol, rtol=4 * np.finfo(float).eps)
    if root is None:
        raise DomainError("no flow parameter reproduces the measurement", bracket=list(bracket))
    moved = flow.run(X, W, U, np.asarray(times, float), [root])[float(root)]
    if isinstance(moved, FlowBlowup):
        raise moved
    Xr, Wr = moved
    state = {s: float(Xr[j, k]) for j, s in enumerate(model.x)}
    state.update({s: float(Wr[j, k]) for j, s in enumerate(model.w)})
    return Recovery(float(root), measured, float(times[k]), float(value), state, Xr, Wr)


def hiv_measurement_inversion(rho: float, delta_obs: float, ti_obs: float, ti_true: float) -> tuple[float, float]:
    """Algebraic inversion of the HIV family from one value of T_I.

    The observed world is the truth moved by tau; returns ``(tau, delta)``.
    """
    k = ti_obs / ti_true
    a = 1.0 - rho * (k - 1.0) / (delta_obs * k)
    if a <= 0:
        raise DomainError("the measurement is inconsistent with the family")
    return math.log(a) / rho, delta_obs * a * k


# -- convenience ----------------------------------------------------------------


def pair_from_identifiability(result, index: int, xi: Sequence[Expr] | None = None) -> SymmetryPair:
    """Symmetry pair for generator ``index`` (0-based) or for an explicit xi."""
    from .ident import unobservability_symmetry

    em = result.E.model
    if xi is None:
        xi = result.state_symmetries[index]
    xi = tuple(xi) + (ZERO,) * (em.n - len(xi))
    obs = result.observability
    chi = unobservability_symmetry(em, xi, obs.htilde, obs.munu)
    return SymmetryPair(em, xi, chi.components)


def canonicity_pair(model: OdeModel, m: int, i: int) -> SymmetryPair:
    """The unit shift of input m+i (1-based i) with the state left unchanged."""
    chi = tuple(parse("1") if j == m + i - 1 else ZERO for j in range(model.m_w))
    return SymmetryPair(model, (ZERO,) * model.n, chi, kind="canonicity")


__all__ = [
    "CLOSED_FORM_NAMES",
    "DEFAULT_TOL",
    "FlowSpec",
    "Kernel",
    "Recovery",
    "Simulator",
    "SymmetryPair",
    "TauFlow",
    "TauResult",
    "TrajectoryBundle",
    "admissible_interval",
    "canonicity_flow",
    "canonicity_pair",
    "certify_indistinguishability",
    "check_commutativity",
    "choose_dt",
    "closed_form",
    "closed_form_exprs",
    "hiv_measurement_inversion",
    "pair_from_identifiability",
    "residual_is_zero",
    "sample_profiles",
    "simulate",
    "single_symmetry_recovery",
    "symmetry_flow",
    "toggle_residuals",
    "write_csv",
]
