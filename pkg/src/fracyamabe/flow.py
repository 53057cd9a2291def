"""Time evolution of the fractional fast-diffusion / Yamabe-type flow.

Variables: the *density* ``u`` and the *conformal factor* ``w = u^m``
(``m = 1/N``).  The un-rescaled flow

    d_t u = -P(u^m)        (equivalently d_t w^N = -P w)

is advanced by backward Euler, each step being one resolvent solve.  The
volume-preserving flow

    d_t w^N = -P w + q(t) w^N,   q = <w, P w> / int w^(N+1),

is advanced by splitting (resolvent, then the scalar reaction) followed by an
exact renormalization of the volume ``int w^(N+1)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .resolvent import ResolventProblem, solve_resolvent, solve_scalar
from .spectral_core import Field, FlowParams, apply_multiplier, conformal_symbol, integrate

TRACE_COLUMNS = ("t", "mass", "volume", "sup", "inf", "harnack_quotient", "dirichlet_energy")

EXTINCTION_RATIO = 1e-8
MAX_HALVINGS = 12


@dataclass(frozen=True)
class FlowState:
    t: float
    density: Field
    params: FlowParams

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("time must be nonnegative")
        if np.min(self.density.values) < 0:
            raise ValueError("density must be nonnegative")

    @classmethod
    def from_conformal_factor(cls, w: Field, params: FlowParams, t: float = 0.0) -> "FlowState":
        return cls(t, Field(w.grid, np.asarray(w.values) ** params.N_gamma), params)

    @property
    def conformal_factor(self) -> Field:
        return Field(self.density.grid, self.density.values**self.params.m_gamma)


@dataclass(frozen=True)
class TraceRecord:
    t: float
    mass: float
    volume: float
    sup: float
    inf: float
    harnack_quotient: float
    dirichlet_energy: float

    def row(self):
        return [getattr(self, c) for c in TRACE_COLUMNS]


def measure(state: FlowState) -> TraceRecord:
    p = state.params
    grid = state.density.grid
    u = state.density.values
    w = u**p.m_gamma
    wmin = float(np.min(w))
    Pw = apply_multiplier(w, conformal_symbol(grid, p.gamma, p.q_c))
    return TraceRecord(
        t=state.t,
        mass=integrate(u, grid),
        volume=integrate(u * w, grid),
        sup=float(np.max(u)),
        inf=float(np.min(u)),
        harnack_quotient=float(np.max(w)) / wmin if wmin > 0 else math.inf,
        dirichlet_energy=integrate(w * Pw, grid),
    )


@dataclass
class FlowTrace:
    records: list[TraceRecord] = field(default_factory=list)
    snapshots: list[tuple[float, Field]] = field(default_factory=list)
    extinct: bool = False
    extinction_time: float | None = None
    # rescaled runs: reaction coefficient q and renormalization factor per step
    q_values: list[float] = field(default_factory=list)
    renorm_factors: list[float] = field(default_factory=list)

    def append(self, rec: TraceRecord):
        if self.records and not rec.t > self.records[-1].t:
            raise ValueError("trace times must be strictly increasing")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def times(self) -> np.ndarray:
        return self.column("t")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([repr(float(v)) for v in r.row()])


def step_unrescaled(state: FlowState, h: float) -> FlowState:
    """One implicit step: solve ``h P w + w^N = u``, new density ``w^N``."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    sol = solve_resolvent(ResolventProblem(state.density, state.params, h))
    return FlowState(state.t + h, sol.density, state.params)


def _march(state0, h, t_end, advance, stop_on_extinction, snapshot_stride, adapt,
           measure_fn=None):
    """Shared time loop with extinction detection and step halving.

    ``advance(state, h) -> state``.  When ``adapt`` is set, a step that loses
    more than 20% of the mass is retried with half the step, at most
    ``MAX_HALVINGS`` times below the nominal ``h``.
    """
    if measure_fn is None:
        measure_fn = measure
    trace = FlowTrace()
    rec0 = measure_fn(state0)
    trace.append(rec0)
    if snapshot_stride:
        trace.snapshots.append((state0.t, state0.density))
    sup0 = rec0.sup
    if sup0 == 0:
        trace.extinct = True
        trace.extinction_time = state0.t
        return trace, state0
    threshold = EXTINCTION_RATIO * sup0
    h_min = h / 2**MAX_HALVINGS
    state, cur_h, k = state0, h, 0
    prev = rec0
    while state.t < t_end * (1 - 1e-12):
        dt = min(cur_h, t_end - state.t)
        new = advance(state, dt)
        rec = measure_fn(new)
        if adapt and rec.mass < 0.8 * prev.mass and dt > h_min * (1 + 1e-9):
            cur_h = dt / 2
            continue
        state, prev = new, rec
        k += 1
        trace.append(rec)
        if snapshot_stride and k % snapshot_stride == 0:
            trace.snapshots.append((state.t, state.density))
        if rec.sup < threshold:
            trace.extinct = True
            trace.extinction_time = state.t
            if stop_on_extinction:
                break
    if snapshot_stride and trace.snapshots[-1][0] != state.t:
        trace.snapshots.append((state.t, state.density))
    return trace, state


@dataclass(frozen=True)
class _ScalarState:
    t: float
    U: float
    N: float
    q: float

    @property
    def density(self):
        return self.U**self.N


def _measure_scalar(s: _ScalarState) -> TraceRecord:
    u = s.density
    return TraceRecord(s.t, u, u * s.U, u, u, 1.0 if s.U > 0 else math.inf, s.q * s.U * s.U)


def run_unrescaled(state0: FlowState, h: float, t_end: float, snapshot_stride: int = 0,
                   adapt: bool | None = None) -> FlowTrace:
    """Implicit-step run of the un-rescaled flow up to ``t_end`` or extinction.

    Extinction is declared when ``sup(density) < 1e-8 sup(initial)``.  Step
    halving near extinction is on by default when ``q_c > 0``.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if adapt is None:
        adapt = state0.params.q_c > 0
    trace, _ = _march(state0, h, t_end, step_unrescaled, True, snapshot_stride, adapt)
    return trace


def extinction_time_constant(c0: float, params: FlowParams) -> float:
    """Closed-form extinction time for constant density ``c0``: ``N U0^(N-1) / (q_c (N-1))``, ``U0 = c0^m``."""
    if params.q_c <= 0:
        return math.inf
    N = params.N_gamma
    U0 = c0**params.m_gamma
    return N * U0 ** (N - 1.0) / (params.q_c * (N - 1.0))


def extinction_remark_check(state0: FlowState, h: float, horizon: float | None = None) -> dict:
    """Detect the extinction time and compare it with constant-data envelopes.

    Two envelopes are reported for the data's ``inf`` and ``sup``: the closed
    form, and the extinction times of the same discrete scheme run from those
    constants (:func:`ode_mode`).  The discrete scheme is order preserving, so
    ``bracketed`` tests against the discrete envelope.
    """
    p = state0.params
    if p.q_c <= 0:
        raise ValueError("extinction check requires q_c > 0")
    u0 = state0.density.values
    lo_c, hi_c = float(np.min(u0)), float(np.max(u0))
    closed = [extinction_time_constant(c, p) if c > 0 else 0.0 for c in (lo_c, hi_c)]
    if horizon is None:
        horizon = 2.0 * closed[1] + 10 * h
    discrete = []
    for c in (lo_c, hi_c):
        if c == 0:
            discrete.append(0.0)
            continue
        traj = ode_mode(p.N_gamma, 1, c**p.m_gamma, h, horizon, q=p.q_c)
        discrete.append(traj.extinction_time if traj.extinction_time is not None else math.inf)
    if hi_c == 0:
        t_rel = 0.0
    else:
        trace = run_unrescaled(state0, h, state0.t + horizon)
        t_rel = trace.extinction_time - state0.t if trace.extinct else math.inf
    finite = math.isfinite(t_rel)
    # extinction is only resolved to the finest step used near it
    slack = h / 2**MAX_HALVINGS + 1e-12
    return {
        "extinction_time": t_rel,
        "finite": finite,
        "horizon": horizon,
        "envelope": closed,
        "discrete_envelope": discrete,
        "bracketed": bool(finite and discrete[0] - slack <= t_rel <= discrete[1] + slack),
    }


# ---------------------------------------------------------------------------
# rescaling by time change


@dataclass(frozen=True)
class RescaleMap:
    tau: np.ndarray
    t: np.ndarray
    F: np.ndarray


TIME_MAP_CONVENTIONS = ("consistent", "reversed")


def rescale_via_time_change(trace: FlowTrace, params: FlowParams, convention: str = "consistent"):
    """Rescale an un-rescaled run: ``v = e^F u`` with ``e^F = mass(0) / mass(tau)``.

    The new time is ``t(tau) = int_0^tau e^{s F (1 - 1/N)} dtau`` (composite
    trapezoid on the snapshot times) with ``s = +1`` for ``"consistent"`` and
    ``s = -1`` for ``"reversed"``.  Only the consistent choice makes ``v``
    solve ``d_t v = -P(v^m) + F'(t) v``; the other sign yields a finite time
    range even when the un-rescaled run extinguishes.

    Returns ``(fields, RescaleMap)``; ``int v`` is constant by construction.
    """
    if convention not in TIME_MAP_CONVENTIONS:
        raise ValueError(f"convention must be one of {TIME_MAP_CONVENTIONS}")
    if not trace.snapshots:
        raise ValueError("trace has no snapshots; run with snapshot_stride >= 1")
    tau = np.array([s[0] for s in trace.snapshots])
    dens = [s[1] for s in trace.snapshots]
    mass = np.array([integrate(d.values, d.grid) for d in dens])
    if not np.all(np.isfinite(mass)) or np.any(mass <= 0):
        raise ValueError("mass reaches zero inside the range: rescaling undefined past extinction")
    F = math.log(mass[0]) - np.log(mass)
    sgn = 1.0 if convention == "consistent" else -1.0
    rate = np.exp(sgn * F * (1.0 - params.m_gamma))
    t = np.concatenate(([0.0], np.cumsum(0.5 * (rate[1:] + rate[:-1]) * np.diff(tau))))
    fields = [Field(d.grid, math.exp(Fk) * d.values) for Fk, d in zip(F, dens)]
    return fields, RescaleMap(tau=tau, t=t, F=F)


# ---------------------------------------------------------------------------
# volume-preserving flow, direct form


def rayleigh_q(w: np.ndarray, params: FlowParams, grid) -> float:
    """``q = <w, P w> / int w^(N+1)``: the mean curvature coefficient of the evolving metric."""
    Pw = apply_multiplier(w, conformal_symbol(grid, params.gamma, params.q_c))
    vol = integrate(w ** (params.N_gamma + 1.0), grid)
    if not vol > 0:
        raise ValueError("vanishing volume")
    return integrate(w * Pw, grid) / vol


def _rescaled_step(state: FlowState, h: float, target_volume: float | None = None):
    p = state.params
    grid = state.density.grid
    N = p.N_gamma
    if target_volume is None:
        target_volume = integrate(state.density.values ** (1.0 + p.m_gamma), grid)
    if not target_volume > 0:
        raise ValueError("vanishing volume")
    w = solve_resolvent(ResolventProblem(state.density, p, h)).w.values
    q = rayleigh_q(w, p, grid)
    w = w * math.exp(h * q / N)
    vol = integrate(w ** (N + 1.0), grid)
    if not vol > 0:
        raise ValueError("vanishing volume")
    scale = (target_volume / vol) ** (1.0 / (N + 1.0))
    w = w * scale
    return FlowState(state.t + h, Field(grid, w**N), p), q, scale


def step_rescaled_direct(state: FlowState, h: float, target_volume: float | None = None) -> FlowState:
    """Diffusion resolvent, reaction ``exp(h q)`` on the density, exact volume renormalization.

    The volume is restored to ``target_volume`` (default: the pre-step volume).
    """
    return _rescaled_step(state, h, target_volume)[0]


def run_rescaled(state0: FlowState, h: float, t_end: float, snapshot_stride: int = 0) -> FlowTrace:
    """Volume-preserving run; the volume is pinned to its initial value."""
    grid = state0.density.grid
    vol0 = integrate(state0.density.values ** (1.0 + state0.params.m_gamma), grid)
    trace = FlowTrace()

    def advance(state, dt):
        new, q, scale = _rescaled_step(state, dt, vol0)
        trace.q_values.append(q)
        trace.renorm_factors.append(scale)
        return new

    run, _ = _march(state0, h, t_end, advance, False, snapshot_stride, adapt=False)
    run.q_values = trace.q_values
    run.renorm_factors = trace.renorm_factors
    return run


# ---------------------------------------------------------------------------
# space-independent ODE modes


@dataclass(frozen=True)
class ODETrajectory:
    t: np.ndarray
    U: np.ndarray
    extinction_time: float | None
    branch: str | None = None


def nontrivial_branch(N: float, t) -> np.ndarray:
    """``U(t) = ((N-1)/N)^(1/(N-1)) t^(1/(N-1))``, a growing solution of ``d_t U^N = U``."""
    k = ((N - 1.0) / N) ** (1.0 / (N - 1.0))
    return k * np.asarray(t, dtype=float) ** (1.0 / (N - 1.0))


def nontrivial_branch_residual(N: float, t) -> np.ndarray:
    """``d_t(U^N) - U`` for :func:`nontrivial_branch`, with the derivative taken analytically."""
    t = np.asarray(t, dtype=float)
    k = ((N - 1.0) / N) ** (1.0 / (N - 1.0))
    # U^N = k^N t^(N/(N-1))
    dUN = k**N * (N / (N - 1.0)) * t ** (1.0 / (N - 1.0))
    return dUN - nontrivial_branch(N, t)


def ode_mode(N: float, q_sign: int, U0: float, h: float, t_end: float, q: float = 1.0) -> ODETrajectory:
    """Backward Euler for the space-independent flow ``d_t U^N = -q_sign * q * U``.

    ``q_sign = +1`` decays and extinguishes at ``N U0^(N-1) / (q (N-1))``; it
    uses the same time loop and scalar solver as the PDE stepper on constant
    data.  ``q_sign = -1`` integrates ``d_t U^N = +q U``; from ``U0 = 0`` both
    ``U = 0`` and the growing branch are solutions, and the scheme picks the
    largest root of ``U^N - h q U = U_prev^N`` (the minimizer of the step
    functional), i.e. the growing branch.
    """
    if U0 < 0:
        raise ValueError("U0 must be nonnegative")
    if q_sign not in (1, -1):
        raise ValueError("q_sign must be +1 or -1")
    if N <= 1:
        raise ValueError("N must exceed 1")
    qq = q * q_sign
    if q_sign == 1:
        def advance(st, dt):
            return _ScalarState(st.t + dt, solve_scalar(st.density, dt, qq, N), N, qq)

        trace, _ = _march(_ScalarState(0.0, float(U0), N, qq), h, t_end, advance, True, 0,
                          adapt=True, measure_fn=_measure_scalar)
        U = trace.column("mass") ** (1.0 / N)
        return ODETrajectory(trace.times, U, trace.extinction_time, None)

    n_steps = max(1, int(round(t_end / h)))
    ts = np.linspace(0.0, n_steps * h, n_steps + 1)
    Us = np.empty(n_steps + 1)
    Us[0] = U0
    for i in range(n_steps):
        Us[i + 1] = solve_scalar(Us[i] ** N, h, qq, N)
    branch = None
    if U0 == 0:
        T = ts[-1]
        nt = float(nontrivial_branch(N, T)) * q ** (1.0 / (N - 1.0))
        branch = "nontrivial" if abs(Us[-1] - nt) < abs(Us[-1]) else "trivial"
    return ODETrajectory(ts, Us, None, branch)
