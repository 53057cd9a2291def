"""Periodic grids, sampled fields and the spectral conformal fractional Laplacian.

The compact manifold is modelled by the flat torus ``T^n = [0, L)^n`` sampled on
a uniform lattice.  Frequencies are physical, ``xi = 2*pi*k / L`` with ``k`` in
the symmetric integer range returned by :func:`numpy.fft.fftfreq`; this is the
only frequency convention used in the package.

The operator modelled here is ``P = (-Delta)^gamma + q_c``: the fractional part
is the Fourier multiplier ``|xi|^(2 gamma)`` and ``q_c >= 0`` is the constant
curvature term, so that ``P(1) = q_c``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class GridError(ValueError):
    """Raised for invalid grids or fields that do not match their grid."""


@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice on ``[0, side_length)^dim``."""

    dim: int
    points_per_axis: int
    side_length: float = 2.0 * math.pi

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise GridError(f"dim must be 1, 2 or 3, got {self.dim}")
        n = self.points_per_axis
        if not isinstance(n, (int, np.integer)) or n < 2 or (n & (n - 1)) != 0:
            raise GridError(f"points_per_axis must be a power of two >= 2, got {n}")
        if not self.side_length > 0:
            raise GridError(f"side_length must be positive, got {self.side_length}")

    @property
    def spacing(self) -> float:
        return self.side_length / self.points_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def volume(self) -> float:
        return self.side_length**self.dim

    def integer_frequencies(self) -> np.ndarray:
        """Symmetric integer wavenumbers along one axis."""
        n = self.points_per_axis
        return np.fft.fftfreq(n, d=1.0 / n)

    def coordinates(self) -> tuple[np.ndarray, ...]:
        x = np.arange(self.points_per_axis) * self.spacing
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    # cached_property needs a __dict__, which frozen dataclasses still have.
    @cached_property
    def wavevector_norm(self) -> np.ndarray:
        """``|xi|`` on the full spectral grid."""
        xi = 2.0 * math.pi * self.integer_frequencies() / self.side_length
        axes = np.meshgrid(*([xi] * self.dim), indexing="ij")
        return np.sqrt(sum(a * a for a in axes))

    def wavevectors(self) -> tuple[np.ndarray, ...]:
        xi = 2.0 * math.pi * self.integer_frequencies() / self.side_length
        return tuple(np.meshgrid(*([xi] * self.dim), indexing="ij"))


@dataclass(frozen=True, eq=False)
class Field:
    """Real samples of a function on a :class:`Grid`.

    ``values`` is stored with shape ``grid.shape``; flat input of length
    ``grid.size`` is reshaped.  The array is made read-only so fields can be
    shared freely.
    """

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size != self.grid.size:
            raise GridError(f"field has {v.size} values, grid has {self.grid.size} points")
        v = np.array(v.reshape(self.grid.shape), copy=True)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, func) -> "Field":
        return cls(grid, func(*grid.coordinates()))

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "Field":
        return cls(grid, np.full(grid.shape, float(c)))

    def with_values(self, values) -> "Field":
        return Field(self.grid, values)

    @property
    def quadrature_weight(self) -> float:
        return self.grid.cell_volume

    def __len__(self):
        return self.grid.size


@dataclass(frozen=True)
class SpectralField:
    """Unnormalized DFT coefficients (numpy's forward convention)."""

    grid: Grid
    coefficients: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class FlowParams:
    """Exponents and numerical controls shared by the solvers.

    ``N_gamma = (n + 2 gamma) / (n - 2 gamma)`` and ``m_gamma = 1 / N_gamma``.
    """

    gamma: float
    n: int
    q_c: float = 0.0
    h: float = 1e-2
    tol_resolvent: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0,1), got {self.gamma}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        if not self.n > 2.0 * self.gamma:
            raise ValueError(f"need n > 2*gamma, got n={self.n}, gamma={self.gamma}")
        if self.q_c < 0:
            raise ValueError(f"q_c must be >= 0, got {self.q_c}")
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if not self.tol_resolvent > 0:
            raise ValueError("tol_resolvent must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    @property
    def N_gamma(self) -> float:
        return (self.n + 2.0 * self.gamma) / (self.n - 2.0 * self.gamma)

    @property
    def m_gamma(self) -> float:
        return (self.n - 2.0 * self.gamma) / (self.n + 2.0 * self.gamma)

    def replace(self, **changes) -> "FlowParams":
        from dataclasses import replace

        return replace(self, **changes)


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0,1), got {gamma}")


def dft_forward(f: Field) -> SpectralField:
    """Forward DFT; the constant ``c`` maps to ``c * grid.size`` in the zero mode."""
    if f.values.shape != f.grid.shape:
        raise GridError("field shape does not match grid")
    return SpectralField(f.grid, np.fft.fftn(f.values))


def dft_inverse(F: SpectralField) -> Field:
    if F.coefficients.shape != F.grid.shape:
        raise GridError("spectrum shape does not match grid")
    return Field(F.grid, np.fft.ifftn(F.coefficients).real)


def apply_multiplier(values: np.ndarray, symbol: np.ndarray) -> np.ndarray:
    """Multiply the spectrum of a real array by a real even symbol."""
    return np.fft.ifftn(np.fft.fftn(values) * symbol).real


def fractional_symbol(grid: Grid, gamma: float) -> np.ndarray:
    return grid.wavevector_norm ** (2.0 * gamma)


def fractional_laplacian(f: Field, gamma: float) -> Field:
    """``(-Delta)^gamma f`` as the multiplier ``|xi|^(2 gamma)``; the zero mode is annihilated."""
    _check_gamma(gamma)
    return Field(f.grid, apply_multiplier(f.values, fractional_symbol(f.grid, gamma)))


def conformal_symbol(grid: Grid, gamma: float, q_c: float) -> np.ndarray:
    return fractional_symbol(grid, gamma) + q_c


def conformal_operator(f: Field, params: FlowParams) -> Field:
    """``P f = (-Delta)^gamma f + q_c f``."""
    frac = apply_multiplier(f.values, fractional_symbol(f.grid, params.gamma))
    return Field(f.grid, frac + params.q_c * f.values)


# Reductions go through math.fsum over C-ordered values so results do not
# depend on numpy's pairwise blocking or on threading.


def _sum(values: np.ndarray) -> float:
    return math.fsum(np.ravel(values, order="C").tolist())


def integral(f: Field) -> float:
    return f.grid.cell_volume * _sum(f.values)


def integrate(values: np.ndarray, grid: Grid) -> float:
    """Quadrature of a raw array laid out on ``grid``."""
    return grid.cell_volume * _sum(values)


def lp_norm(f: Field, p: float = 2.0) -> float:
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if math.isinf(p):
        return float(np.max(np.abs(f.values)))
    return integrate(np.abs(f.values) ** p, f.grid) ** (1.0 / p)


def sup(f: Field) -> float:
    return float(np.max(f.values))


def inf(f: Field) -> float:
    return float(np.min(f.values))


def inner(f: Field, g: Field) -> float:
    return integrate(f.values * g.values, f.grid)


# ---------------------------------------------------------------------------
# serialization

_HEADER = struct.Struct("<qqd")


def write_field_binary(f: Field, path) -> None:
    """Header ``(dim, points_per_axis, side_length)`` as little-endian int64/int64/float64, then float64 values."""
    g = f.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(g.dim, g.points_per_axis, g.side_length))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes(order="C"))


def read_field_binary(path) -> Field:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise GridError("truncated field file")
    dim, n, side = _HEADER.unpack_from(data)
    grid = Grid(int(dim), int(n), float(side))
    values = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if values.size != grid.size:
        raise GridError(f"field file holds {values.size} values, header implies {grid.size}")
    return Field(grid, values.astype(float))


def write_field_csv(f: Field, path) -> None:
    names = ["i", "j", "k"][: f.grid.dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "value"])
        for idx in np.ndindex(*f.grid.shape):
            w.writerow([*idx, repr(float(f.values[idx]))])


def read_field_csv(path, grid: Grid) -> Field:
    values = np.empty(grid.shape)
    seen = 0
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            idx = tuple(int(c) for c in row[:-1])
            if len(idx) != grid.dim:
                raise GridError("CSV index columns do not match grid dimension")
            values[idx] = float(row[-1])
            seen += 1
    if seen != grid.size:
        raise GridError(f"CSV holds {seen} rows, grid has {grid.size} points")
    return Field(grid, values)
