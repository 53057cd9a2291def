"""Weighted extension realization of the fractional operator.

A field ``f`` on the torus is extended to the half-cylinder ``T^n x (0, Y]`` by
solving

    div(y^a grad U) = 0,   U(., 0) = f,   y^a U_y = 0 at y = Y,

with ``a = 1 - 2 gamma``.  The conormal flux ``-lim y^a U_y`` times
``d_star(gamma)`` reproduces ``(-Delta)^gamma f``.

Discretization: piecewise-linear in ``y`` on a graded mesh with the weight
integrated exactly over every interval (so ``y^a`` is never evaluated at 0),
lumped weighted mass for the tangential part.  Tangential derivatives are
either spectral (symbol ``|xi|^2``) or the second-order finite-volume stencil
(symbol ``sum (2 sin(xi dx / 2) / dx)^2``); the latter gives an M-matrix and
hence a discrete maximum principle.  Since the base is periodic, the discrete
system decouples in Fourier modes into tridiagonal systems in ``y``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gamma as gamma_fn

from .spectral_core import Field, Grid

X_SCHEMES = ("spectral", "fv")


class ExtensionError(RuntimeError):
    pass


class MeshError(ValueError):
    pass


def d_star(gamma: float) -> float:
    """``d*_gamma = -2^(2 gamma - 1) Gamma(gamma) / (gamma Gamma(-gamma))``, positive on (0, 1)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0,1), got {gamma}")
    return float(-(2.0 ** (2.0 * gamma - 1.0)) * gamma_fn(gamma) / (gamma * gamma_fn(-gamma)))


def _weight_integral(lo, hi, a):
    return (np.asarray(hi) ** (a + 1.0) - np.asarray(lo) ** (a + 1.0)) / (a + 1.0)


@dataclass(frozen=True, eq=False)
class ExtensionMesh:
    """Tensor mesh ``base x y_nodes`` with weight ``y^a``, ``a = 1 - 2 gamma``."""

    base: Grid
    gamma: float
    y_nodes: np.ndarray = field(repr=False)
    grading: float = 2.0
    x_scheme: str = "spectral"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise MeshError(f"gamma must lie in (0,1), got {self.gamma}")
        y = np.asarray(self.y_nodes, dtype=float)
        if y.ndim != 1 or y.size < 3:
            raise MeshError("need at least three y nodes")
        if y[0] != 0.0:
            raise MeshError("y_nodes must start at 0")
        if np.any(np.diff(y) <= 0):
            raise MeshError("y_nodes must be strictly increasing")
        if self.grading < 1:
            raise MeshError(f"grading exponent must be >= 1, got {self.grading}")
        if self.x_scheme not in X_SCHEMES:
            raise MeshError(f"x_scheme must be one of {X_SCHEMES}")
        y = y.copy()
        y.flags.writeable = False
        object.__setattr__(self, "y_nodes", y)

    @classmethod
    def graded(cls, base: Grid, gamma: float, n_y: int = 256, y_max: float | None = None,
               grading: float = 2.0, x_scheme: str = "spectral") -> "ExtensionMesh":
        """``y_j = y_max (j / n_y)^grading``; ``y_max`` defaults to ``8 / xi_min``."""
        xi_min = 2.0 * math.pi / base.side_length
        if y_max is None:
            y_max = 8.0 / xi_min
        if y_max < 4.0 / xi_min:
            raise MeshError(f"y_max={y_max} is below 4/xi_min={4.0 / xi_min}; truncation too close")
        j = np.arange(n_y + 1)
        return cls(base, gamma, y_max * (j / n_y) ** grading, grading, x_scheme)

    def refined(self) -> "ExtensionMesh":
        """Same grading law with twice as many intervals."""
        n_y = 2 * (self.y_nodes.size - 1)
        return ExtensionMesh.graded(self.base, self.gamma, n_y, self.y_max, self.grading, self.x_scheme)

    @property
    def a(self) -> float:
        return 1.0 - 2.0 * self.gamma

    @property
    def y_max(self) -> float:
        return float(self.y_nodes[-1])

    @property
    def n_y(self) -> int:
        return self.y_nodes.size - 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.y_nodes.size, *self.base.shape)

    def tangential_symbol(self) -> np.ndarray:
        """Eigenvalues of the discrete ``-Delta_x`` on the base grid."""
        if self.x_scheme == "spectral":
            return self.base.wavevector_norm**2
        dx = self.base.spacing
        return sum((2.0 * np.sin(0.5 * xi * dx) / dx) ** 2 for xi in self.base.wavevectors())

    def stiffness(self) -> np.ndarray:
        """Interval coefficients ``int_{y_j}^{y_j+1} y^a dy / (y_j+1 - y_j)^2``."""
        y = self.y_nodes
        return _weight_integral(y[:-1], y[1:], self.a) / np.diff(y) ** 2

    def lumped_mass(self) -> np.ndarray:
        """``int y^a`` over the dual cell of every node."""
        y = self.y_nodes
        mid = np.concatenate(([0.0], 0.5 * (y[:-1] + y[1:]), [y[-1]]))
        return _weight_integral(mid[:-1], mid[1:], self.a)


@dataclass(frozen=True, eq=False)
class ExtensionField:
    mesh: ExtensionMesh
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.mesh.shape:
            raise ExtensionError(f"values shape {v.shape} does not match mesh {self.mesh.shape}")

    @property
    def trace(self) -> Field:
        return Field(self.mesh.base, self.values[0])


def _thomas(lower, diag, upper, rhs):
    """Batched tridiagonal solve along axis 0; ``lower[0]`` and ``upper[-1]`` are ignored."""
    n = diag.shape[0]
    c = np.empty_like(diag)
    d = np.empty_like(rhs)
    c[0] = upper[0] / diag[0]
    d[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - lower[i] * c[i - 1]
        c[i] = upper[i] / denom if i < n - 1 else 0.0
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom
    x = np.empty_like(rhs)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def _apply_modal(mesh: ExtensionMesh, phi: np.ndarray) -> np.ndarray:
    """Weighted operator rows ``j = 1..J`` applied to modal coefficients ``phi[0..J]``."""
    c = mesh.stiffness()
    m = mesh.lumped_mass()
    mu = mesh.tangential_symbol()
    sh = (slice(None),) + (None,) * mesh.base.dim
    out = (m[1:][sh] * mu) * phi[1:]
    out = out + c[sh] * (phi[1:] - phi[:-1])
    out[:-1] += c[1:][sh] * (phi[1:-1] - phi[2:])
    return out


def solve_extension(f: Field, mesh: ExtensionMesh, tol: float = 1e-10) -> ExtensionField:
    """Weighted-harmonic extension of ``f`` with trace ``f`` at ``y = 0``.

    The modal tridiagonal systems are solved directly; the residual of the
    assembled operator is checked against ``tol`` (relative to the trace) and
    an :class:`ExtensionError` is raised if it is exceeded.
    """
    if f.grid != mesh.base:
        raise ExtensionError("field grid does not match mesh base")
    c = mesh.stiffness()
    m = mesh.lumped_mass()
    mu = mesh.tangential_symbol()
    J = mesh.n_y
    sh = (slice(None),) + (None,) * mesh.base.dim
    fhat = np.fft.fftn(f.values)

    diag = m[1:][sh] * mu + np.zeros((J,) + mesh.base.shape)
    diag = diag + c[sh]
    diag[:-1] += c[1:][sh]
    off = -np.broadcast_to(c[sh], diag.shape)
    lower = off  # row j couples to j-1 through c[j-1]
    upper = np.empty_like(diag)
    upper[:-1] = -np.broadcast_to(c[1:][sh], diag[:-1].shape)
    upper[-1] = 0.0
    rhs = np.zeros((J,) + mesh.base.shape, dtype=complex)
    rhs[0] = c[0] * fhat

    phi = np.empty((J + 1,) + mesh.base.shape, dtype=complex)
    phi[0] = fhat
    phi[1:] = _thomas(lower, diag, upper, rhs)

    scale = max(np.linalg.norm(fhat), np.finfo(float).tiny)
    res = np.linalg.norm(_apply_modal(mesh, phi)) / (scale * max(c[0], 1.0))
    if not res <= tol:
        raise ExtensionError(f"extension solve residual {res:.3e} exceeds tolerance {tol:.1e}")

    axes = tuple(range(1, mesh.base.dim + 1))
    values = np.fft.ifftn(phi, axes=axes).real
    values[0] = f.values
    return ExtensionField(mesh, values)


def conormal_flux(U: ExtensionField) -> Field:
    """Discrete ``-lim y^a dU/dy`` at ``y = 0``.

    Uses the first two levels, ``c_0 (U_0 - U_1)``, plus the lumped tangential
    term of the boundary dual cell, i.e. the variationally consistent flux.
    """
    mesh = U.mesh
    c0 = mesh.stiffness()[0]
    m0 = mesh.lumped_mass()[0]
    if not (np.isfinite(c0) and c0 > 0 and np.isfinite(m0)):
        raise ExtensionError("first y-interval too small: boundary weight underflow")
    jump = U.values[0] - U.values[1]
    tang = np.fft.ifftn(np.fft.fftn(U.values[0]) * mesh.tangential_symbol()).real
    flux = c0 * jump + m0 * tang
    # U_1 carries an absolute rounding error ~ eps |U|, amplified by c0 in the jump.
    spread = float(np.max(np.abs(U.values[0] - U.values[0].mean())))
    if spread > 0:
        lost = np.finfo(float).eps * c0 * float(np.max(np.abs(U.values[1]))) / float(np.max(np.abs(flux)))
        if lost > 1e-4:
            raise ExtensionError(
                f"first y-spacing {mesh.y_nodes[1]:.2e} too small: flux lost to cancellation "
                f"(relative rounding {lost:.1e})"
            )
    return Field(mesh.base, flux)


def dtn_flux(U: ExtensionField, gamma: float | None = None, q_c: float = 0.0) -> Field:
    """``d*_gamma * (-lim y^a U_y) + q_c * trace``; approximates ``P`` applied to the trace."""
    if gamma is None:
        gamma = U.mesh.gamma
    if not math.isclose(gamma, U.mesh.gamma):
        raise ExtensionError("gamma does not match the mesh weight")
    flux = conormal_flux(U).values
    return Field(U.mesh.base, d_star(gamma) * flux + q_c * U.values[0])


def extension_operator(f: Field, mesh: ExtensionMesh, q_c: float = 0.0,
                       richardson: bool = False) -> Field:
    """``dtn_flux(solve_extension(f))``; optionally Richardson-extrapolated over one y-refinement."""
    coarse = dtn_flux(solve_extension(f, mesh), q_c=q_c).values
    if not richardson:
        return Field(mesh.base, coarse)
    fine = dtn_flux(solve_extension(f, mesh.refined()), q_c=q_c).values
    return Field(mesh.base, (4.0 * fine - coarse) / 3.0)


def weighted_energy(U: ExtensionField) -> float:
    """Discrete ``int int y^a |grad U|^2`` over the half-cylinder."""
    mesh = U.mesh
    base = mesh.base
    axes = tuple(range(1, base.dim + 1))
    phi = np.fft.fftn(U.values, axes=axes)
    c = mesh.stiffness()
    m = mesh.lumped_mass()
    mu = mesh.tangential_symbol()
    sh = (slice(None),) + (None,) * base.dim
    e = np.sum(c[sh] * np.abs(phi[1:] - phi[:-1]) ** 2) + np.sum(m[sh] * mu * np.abs(phi) ** 2)
    return float(e) * base.cell_volume / base.size


def write_extension_csv(U: ExtensionField, path) -> None:
    names = ["i", "j", "k"][: U.mesh.base.dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "y_index", "value"])
        for idx in np.ndindex(*U.mesh.base.shape):
            for jy in range(U.values.shape[0]):
                w.writerow([*idx, jy, repr(float(U.values[(jy, *idx)]))])


def single_mode_error(gamma: float, mode: int, mesh: ExtensionMesh, richardson: bool = False) -> dict:
    """Relative error of the extension operator on ``cos(mode x)`` against ``|xi|^(2 gamma)``."""
    base = mesh.base
    x = base.coordinates()[0]
    xi = 2.0 * math.pi * mode / base.side_length
    f = Field(base, np.cos(xi * x))
    approx = extension_operator(f, mesh, richardson=richardson).values
    exact = abs(xi) ** (2.0 * gamma) * f.values
    err = float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))
    return {"gamma": gamma, "mode": mode, "mesh_size": mesh.n_y, "relative_error": err}


def convergence_report(gammas, modes, base: Grid, sizes, stream=None, **mesh_kw) -> list[dict]:
    """Single-mode errors over a sweep of y-resolutions; optionally streamed as JSON lines."""
    records = []
    for gam in gammas:
        for n_y in sizes:
            mesh = ExtensionMesh.graded(base, gam, n_y=n_y, **mesh_kw)
            for k in modes:
                rec = single_mode_error(gam, k, mesh)
                records.append(rec)
                if stream is not None:
                    stream.write(json.dumps(rec) + "\n")
    return records


# ---------------------------------------------------------------------------
# Harnack experiment on a half box (non-periodic)


def _box_operator(nx: int, ny: int, dim: int, dx: float, a: float):
    """Weighted 5/7-point operator on the node lattice of a half box.

    Nodes: ``nx + 1`` per tangential axis, ``ny + 1`` in ``y`` (``y_j = j dx``).
    The bottom row carries the natural no-flux condition; the rest of the
    boundary is Dirichlet.  Returns the full sparse matrix on all nodes.
    """
    y = np.arange(ny + 1) * dx
    c = _weight_integral(y[:-1], y[1:], a) / dx**2
    mid = np.concatenate(([0.0], 0.5 * (y[:-1] + y[1:]), [y[-1]]))
    m = _weight_integral(mid[:-1], mid[1:], a) / dx**2
    shape = (ny + 1,) + (nx + 1,) * dim
    idx = np.arange(np.prod(shape)).reshape(shape)
    rows, cols, vals = [], [], []

    def couple(i0, i1, coef):
        rows.extend([i0, i1, i0, i1])
        cols.extend([i0, i1, i1, i0])
        vals.extend([coef, coef, -coef, -coef])

    # y-faces
    for j in range(ny):
        coef = np.full(idx[j].shape, c[j])
        couple(idx[j].ravel(), idx[j + 1].ravel(), coef.ravel())
    # tangential faces
    for ax in range(1, dim + 1):
        lo = [slice(None)] * (dim + 1)
        hi = [slice(None)] * (dim + 1)
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        coef = np.broadcast_to(m[(slice(None),) + (None,) * dim], idx[tuple(lo)].shape)
        couple(idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel(), coef.ravel())
    r = np.concatenate([np.atleast_1d(v) for v in rows])
    cc = np.concatenate([np.atleast_1d(v) for v in cols])
    vv = np.concatenate([np.atleast_1d(v) for v in vals])
    A = sp.csr_matrix((vv, (r, cc)), shape=(idx.size, idx.size))
    dirichlet = np.zeros(shape, dtype=bool)
    dirichlet[-1] = True
    for ax in range(1, dim + 1):
        sl = [slice(None)] * (dim + 1)
        sl[ax] = 0
        dirichlet[tuple(sl)] = True
        sl[ax] = -1
        dirichlet[tuple(sl)] = True
    return A, dirichlet, shape


def _solve_box(A, dirichlet, shape, boundary_values):
    d = dirichlet.ravel()
    free = ~d
    u = np.zeros(d.size)
    u[d] = boundary_values.ravel()[d]
    rhs = -A[free][:, d] @ u[d]
    u[free] = spla.spsolve(A[free][:, free].tocsc(), rhs)
    return u.reshape(shape)


def _random_profile(rng, dim, n_modes=4, amplitude=1.0):
    """Positive smooth function of normalized coordinates in ``[-1, 1]^(dim+1)``."""
    k = rng.integers(1, n_modes + 1, size=(n_modes, dim + 1))
    ph = rng.uniform(0, 2 * math.pi, size=(n_modes, dim + 1))
    amp = amplitude * rng.standard_normal(n_modes) / n_modes

    def profile(coords):
        s = 0.0
        for i in range(n_modes):
            term = amp[i]
            for ax, X in enumerate(coords):
                term = term * np.cos(0.5 * math.pi * k[i, ax] * X + ph[i, ax])
            s = s + term
        return np.exp(s)

    return profile


def _halfball_ratio(u, dx, radius, dim, centre):
    ny1 = u.shape[0]
    y = np.arange(ny1) * dx
    grids = [y] + [(np.arange(u.shape[1]) - centre) * dx] * dim
    coords = np.meshgrid(*grids, indexing="ij")
    r2 = sum(cc * cc for cc in coords)
    sel = u[r2 < radius**2 * (1 + 1e-12)]
    return float(sel.max() / sel.min())


def check_harnack_fks(mesh: ExtensionMesh, trials: int = 50, seed: int = 0, radius: float = 1.0,
                      cells_per_radius: int = 8, boundary: str = "random") -> dict:
    """Sup/inf of positive weighted-harmonic solutions on interior half-balls at two scales.

    For scale ``s`` in ``(radius, radius/2)`` a half box ``[-4s, 4s]^n x [0, 4s]``
    at fixed spacing ``radius / cells_per_radius`` receives positive Dirichlet
    data ``g(X / s)`` on its lateral and top faces (no flux at ``y = 0``), and
    the quotient ``sup/inf`` is taken over the half-ball of radius ``s``
    about the origin.  The same normalized profile ``g`` is used at both
    scales, so a scale-independent Harnack constant shows up as equal maxima.

    ``boundary`` is ``"random"``, ``"constant"`` or ``"vanishing_corner"``
    (random data multiplied by a factor vanishing at one top corner).
    """
    dim = mesh.base.dim
    if dim > 2:
        raise ValueError("Harnack experiment supports base dimension 1 or 2")
    a = mesh.a
    dx = radius / cells_per_radius
    rng = np.random.default_rng(seed)
    scales = (radius, radius / 2.0)
    ops = {}
    for s in scales:
        n_half = int(round(4 * s / dx))
        ops[s] = (_box_operator(2 * n_half, n_half, dim, dx, a), n_half)
    ratios = {s: [] for s in scales}
    for _ in range(trials):
        if boundary == "constant":
            profile = lambda coords: np.ones_like(coords[0])  # noqa: E731
        else:
            profile = _random_profile(rng, dim)
        for s in scales:
            (A, dirichlet, shape), n_half = ops[s]
            y = np.arange(shape[0]) * dx / (4 * s)
            xs = (np.arange(shape[1]) - n_half) * dx / (4 * s)
            coords = np.meshgrid(*([y] + [xs] * dim), indexing="ij")
            data = profile([coords[0] * 2 - 1, *coords[1:]])
            if boundary == "vanishing_corner":
                dist = np.sqrt((coords[0] - 1.0) ** 2 + sum((c - 1.0) ** 2 for c in coords[1:]))
                data = data * np.minimum(dist, 1.0)
            u = _solve_box(A, dirichlet, shape, data)
            ratios[s].append(_halfball_ratio(u, dx, s, dim, n_half))
    max_r = {s: max(v) for s, v in ratios.items()}
    big, small = scales
    return {
        "gamma": mesh.gamma,
        "trials": trials,
        "boundary": boundary,
        "scales": list(scales),
        "max_ratio": [max_r[big], max_r[small]],
        "scale_factor": max(max_r[big], max_r[small]) / min(max_r[big], max_r[small]),
        "ratios": {str(s): v for s, v in ratios.items()},
    }
