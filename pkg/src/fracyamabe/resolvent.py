"""Implicit-step (resolvent) solver for the fast-diffusion flow.

One backward-Euler step of ``d_t u = -P(u^m)`` with density ``u = w^N`` reads

    h P w + w^N = g,

with ``g`` the previous density and ``w`` the new conformal factor.  The
solution is the unique minimizer of the strictly convex functional

    J(w) = h/2 <w, P w> + 1/(N+1) \\int w_+^(N+1) - \\int w g,

which is minimized by damped Newton with a spectral preconditioner.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .spectral_core import Field, FlowParams, apply_multiplier, conformal_symbol, integrate

_NEG_TOL = 1e-12


class ResolventError(RuntimeError):
    """The resolvent iteration did not converge; ``residual`` holds the last relative residual."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class ResolventProblem:
    g: Field
    params: FlowParams
    h: float | None = None

    def __post_init__(self):
        if np.min(self.g.values) < 0:
            raise ValueError("right-hand side g must be nonnegative")
        if self.h is not None and not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")

    @property
    def step(self) -> float:
        return self.params.h if self.h is None else self.h


@dataclass(frozen=True)
class ResolventSolution:
    w: Field
    residual_norm: float
    iterations: int
    objective: float
    N_gamma: float = 1.0

    @property
    def density(self) -> Field:
        """The new density ``w^N``."""
        return Field(self.w.grid, self.w.values**self.N_gamma)


def _pos_power(w, p):
    return np.maximum(w, 0.0) ** p


def objective_J(w: Field, prob: ResolventProblem) -> float:
    p = prob.params
    N = p.N_gamma
    grid = w.grid
    Pw = apply_multiplier(w.values, conformal_symbol(grid, p.gamma, p.q_c))
    quad = 0.5 * prob.step * integrate(w.values * Pw, grid)
    power = integrate(_pos_power(w.values, N + 1.0), grid) / (N + 1.0)
    return quad + power - integrate(w.values * prob.g.values, grid)


def gradient_J(w: Field, prob: ResolventProblem) -> Field:
    """L2 gradient ``h P w + w_+^N - g``; the directional derivative is ``integral(grad * v)``."""
    p = prob.params
    Pw = apply_multiplier(w.values, conformal_symbol(w.grid, p.gamma, p.q_c))
    return Field(w.grid, prob.step * Pw + _pos_power(w.values, p.N_gamma) - prob.g.values)


def _l2(values, grid):
    return math.sqrt(integrate(values * values, grid))


def _pcg(apply_A, b, apply_M, rtol, maxiter):
    """Preconditioned conjugate gradients for an SPD operator on flat arrays."""
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0
    z = apply_M(r)
    d = z.copy()
    rz = float(np.vdot(r, z))
    for it in range(1, maxiter + 1):
        Ad = apply_A(d)
        dAd = float(np.vdot(d, Ad))
        if dAd <= 0:
            break
        alpha = rz / dAd
        x += alpha * d
        r -= alpha * Ad
        if np.linalg.norm(r) <= rtol * bnorm:
            return x, it
        z = apply_M(r)
        rz_new = float(np.vdot(r, z))
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, maxiter


def solve_scalar(g: float, h: float, q: float, N: float) -> float:
    """Root of ``h q w + w^N = g`` with ``w >= 0``.

    For ``q >= 0`` the root is unique.  For ``q < 0`` the largest nonnegative
    root is returned; it is the minimizer of the scalar functional
    ``-h|q| w^2/2 + w^(N+1)/(N+1) - g w`` on the half line.
    """
    if g < 0:
        raise ValueError("g must be nonnegative")
    f = lambda w: h * q * w + w**N - g  # noqa: E731
    if q >= 0:
        if g == 0:
            return 0.0
        if q == 0:
            return g ** (1.0 / N)
        # the root lies below both g^(1/N) and g/(hq)
        hi = min(g ** (1.0 / N), g / (h * q))
        if f(hi) == 0:
            return hi
        while f(hi) < 0:  # rounding in the power can leave hi just short of the root
            hi *= 1.0 + 1e-12
        return brentq(f, 0.0, hi, xtol=max(1e-18 * hi, 5e-324), rtol=4 * np.finfo(float).eps,
                      maxiter=500)
    lo = (h * abs(q)) ** (1.0 / (N - 1.0))
    if g == 0:
        return lo
    hi = lo + g ** (1.0 / N)
    while f(hi) <= 0:
        hi *= 2.0
    return brentq(f, lo, hi, xtol=1e-18 * hi, rtol=4 * np.finfo(float).eps, maxiter=500)


def solve_resolvent(prob: ResolventProblem, w_init: Field | None = None, log=None) -> ResolventSolution:
    """Solve ``h P w + w^N = g`` for ``w >= 0``.

    ``log`` may be a writable text stream; one JSON line per iteration with
    keys ``iteration, objective, residual, step_length`` is written to it.
    Raises :class:`ResolventError` when ``max_iter`` is exhausted.
    """
    p = prob.params
    grid = prob.g.grid
    N = p.N_gamma
    h = prob.step
    g = prob.g.values

    def result(w, res, its):
        wf = Field(grid, w)
        return ResolventSolution(wf, res, its, objective_J(wf, prob), N)

    if not np.any(g > 0):
        return result(np.zeros(grid.shape), 0.0, 0)

    gnorm = _l2(g, grid)
    symbol = conformal_symbol(grid, p.gamma, p.q_c)

    def residual(w):
        return h * apply_multiplier(w, symbol) + _pos_power(w, N) - g

    g0 = g.flat[0]
    if w_init is None and np.all(g == g0):
        # P acts on constants as q_c: reduces to the scalar equation.
        w = np.full(grid.shape, solve_scalar(float(g0), h, p.q_c, N))
        res = _l2(residual(w), grid) / gnorm
        if log is not None:
            _emit(log, 0, objective_J(Field(grid, w), prob), res, 0.0)
        return result(w, res, 0)

    w = (g ** p.m_gamma).copy() if w_init is None else np.array(w_init.values, dtype=float)

    def J(w):
        Pw = apply_multiplier(w, symbol)
        return grid.cell_volume * float(
            np.sum(0.5 * h * w * Pw + _pos_power(w, N + 1.0) / (N + 1.0) - w * g)
        )

    F = residual(w)
    res = _l2(F, grid) / gnorm
    Jw = J(w)
    if log is not None:
        _emit(log, 0, Jw, res, 0.0)
    it = 0
    while res > p.tol_resolvent:
        if it == p.max_iter:
            raise ResolventError(
                f"resolvent did not converge in {p.max_iter} iterations (residual {res:.3e})",
                residual=res, iterations=it,
            )
        it += 1
        wp = np.maximum(w, 0.0)
        diag = N * wp ** (N - 1.0)
        shift = N * float(np.max(wp)) ** (N - 1.0)
        pre = 1.0 / (h * symbol + shift) if shift > 0 or p.q_c > 0 else None
        if pre is None:
            pre = 1.0 / np.where(symbol > 0, h * symbol, 1.0)
        apply_A = lambda d: h * apply_multiplier(d, symbol) + diag * d  # noqa: E731
        apply_M = lambda r: apply_multiplier(r, pre)  # noqa: E731
        d, _ = _pcg(apply_A, -F, apply_M, rtol=min(1e-3, 0.1 * res) if res > 1e-6 else 1e-13,
                    maxiter=500)
        slope = grid.cell_volume * float(np.vdot(F, d))
        step = 1.0
        accepted = False
        if slope < 0:
            for _ in range(40):
                w_new = w + step * d
                J_new = J(w_new)
                F_new = residual(w_new)
                res_new = _l2(F_new, grid) / gnorm
                if J_new <= Jw + 1e-4 * step * slope or (res < 1e-6 and res_new < res):
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            # preconditioned gradient descent with backtracking
            d = -apply_M(F)
            slope = grid.cell_volume * float(np.vdot(F, d))
            step = 1.0
            for _ in range(60):
                w_new = w + step * d
                J_new = J(w_new)
                if J_new <= Jw + 1e-4 * step * slope:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                raise ResolventError("line search failed", residual=res, iterations=it)
            F_new = residual(w_new)
            res_new = _l2(F_new, grid) / gnorm
        w, F, res, Jw = w_new, F_new, res_new, J_new
        if log is not None:
            _emit(log, it, Jw, res, step)
    if np.min(w) < -_NEG_TOL:
        raise ResolventError(f"solution went negative (min {np.min(w):.3e})", residual=res,
                             iterations=it)
    w = np.maximum(w, 0.0)
    return result(w, res, it)


def _emit(stream, iteration, objective, residual, step_length):
    stream.write(json.dumps({"iteration": iteration, "objective": objective,
                             "residual": residual, "step_length": step_length}) + "\n")


def check_t_contraction(g1: Field, g2: Field, params: FlowParams, h: float | None = None):
    """Return ``(lhs, rhs)`` of the one-sided L1 estimate between two resolvent solves.

    ``lhs = h q_c int (w1 - w2)_+ + int (w1^N - w2^N)_+`` and
    ``rhs = int (g1 - g2)_+``; the contract is ``lhs <= rhs``.
    """
    s1 = solve_resolvent(ResolventProblem(g1, params, h))
    s2 = solve_resolvent(ResolventProblem(g2, params, h))
    step = params.h if h is None else h
    N = params.N_gamma
    w1, w2 = s1.w.values, s2.w.values
    grid = g1.grid
    lhs = step * params.q_c * integrate(np.maximum(w1 - w2, 0.0), grid)
    lhs += integrate(np.maximum(w1**N - w2**N, 0.0), grid)
    rhs = integrate(np.maximum(g1.values - g2.values, 0.0), grid)
    return lhs, rhs
