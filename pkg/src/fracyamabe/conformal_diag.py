"""Inequality and conformal-geometry diagnostics.

Grid-based checks (Stroock-Varopoulos, Harnack quotients) act on torus fields;
the conformal maps (stereographic projection, Kelvin transform) act on point
clouds in ``R^n`` since the torus carries no Kelvin action.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .spectral_core import Field, apply_multiplier, fractional_symbol, integrate


@dataclass(frozen=True, eq=False)
class PointCloudField:
    points: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if pts.shape[0] != vals.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {vals.shape[0]} values")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def stroock_varopoulos_check(v: Field, gamma: float, q: float) -> tuple[float, float]:
    """Both sides of ``int v^(q-1) (-Delta)^g v >= 4(q-1)/q^2 int |(-Delta)^(g/2) v^(q/2)|^2``.

    Only the fractional part is used; adding ``q_c`` contributes
    ``q_c int v^q`` on the left and ``4(q-1)/q^2 q_c int v^q`` on the right,
    which preserves the inequality since ``4(q-1)/q^2 <= 1``.

    The operator orders are paired so both sides scale alike under dilation
    (order ``2g`` on the left, ``g`` inside the square); the ``q = 2`` equality
    case pins this pairing down.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0,1), got {gamma}")
    if not q > 1:
        raise ValueError(f"q must exceed 1, got {q}")
    vals = v.values
    if np.min(vals) <= 0:
        raise ValueError("v must be strictly positive")
    grid = v.grid
    lhs = integrate(vals ** (q - 1.0) * apply_multiplier(vals, fractional_symbol(grid, gamma)), grid)
    half = apply_multiplier(vals ** (q / 2.0), fractional_symbol(grid, gamma / 2.0))
    rhs = 4.0 * (q - 1.0) / q**2 * integrate(half * half, grid)
    return lhs, rhs


def stereographic_inverse(x) -> np.ndarray:
    """``x -> (2x / (1+|x|^2), (|x|^2-1) / (|x|^2+1))``; the origin goes to the south pole.

    Accepts a point or an array of points (last axis = coordinates).
    """
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1, keepdims=True)
    inv = 1.0 / (1.0 + r2)
    return np.concatenate([2.0 * x * inv, (r2 - 1.0) * inv], axis=-1)


def stereographic_projection(p) -> np.ndarray:
    """Projection from the north pole ``(0, ..., 0, 1)``: ``p -> p' / (1 - p_last)``."""
    p = np.asarray(p, dtype=float)
    denom = 1.0 - p[..., -1:]
    if np.any(denom == 0):
        raise ValueError("north pole has no image")
    return p[..., :-1] / denom


NORTH_POLE_NOTE = "lim_{|x|->inf} stereographic_inverse(x) = (0, ..., 0, 1)"


def kelvin_transform(f: PointCloudField, n: int, gamma: float) -> PointCloudField:
    """Kelvin transform ``|x|^-(n-2g) f(x/|x|^2)`` sampled at the reflected points.

    A sample ``(x, f(x))`` becomes ``(x/|x|^2, |x|^(n-2g) f(x))``.
    """
    r2 = np.sum(f.points**2, axis=1)
    if np.any(r2 == 0):
        raise ValueError("Kelvin transform undefined at the origin")
    s = n - 2.0 * gamma
    return PointCloudField(f.points / r2[:, None], r2 ** (s / 2.0) * f.values)


def bubble(x, n: int, gamma: float, scale: float = 1.0, centre=None) -> np.ndarray:
    """``(scale / (scale^2 + |x - centre|^2))^((n-2g)/2)``; ``scale = 1, centre = 0`` is Kelvin-invariant."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if centre is not None:
        x = x - np.asarray(centre, dtype=float)
    r2 = np.sum(x * x, axis=1)
    return (scale / (scale**2 + r2)) ** ((n - 2.0 * gamma) / 2.0)


def harnack_quotient(w: Field) -> float:
    vals = w.values
    lo = float(np.min(vals))
    if lo <= 0:
        raise ValueError("Harnack quotient needs a strictly positive field")
    return float(np.max(vals)) / lo


def grad_quotient(w: Field) -> float:
    """``sup |grad w| / w`` with spectrally differentiated gradient."""
    vals = w.values
    if np.min(vals) <= 0:
        raise ValueError("gradient quotient needs a strictly positive field")
    W = np.fft.fftn(vals)
    g2 = np.zeros_like(vals)
    for xi in w.grid.wavevectors():
        d = np.fft.ifftn(1j * xi * W).real
        g2 += d * d
    return float(np.max(np.sqrt(g2) / vals))


def check_record(check: str, parameters: dict, lhs: float, rhs: float, passed: bool) -> dict:
    return {"check": check, "parameters": parameters, "lhs": lhs, "rhs": rhs, "pass": bool(passed)}


def write_jsonl(records, stream) -> None:
    for rec in records:
        stream.write(json.dumps(rec, sort_keys=True) + "\n")
