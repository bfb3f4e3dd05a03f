"""Uniform-grid forward solvers on the unit square.

All three models share one spatial operator: a cell-centered two-point flux
discretization of ``-div(a grad u)`` with harmonic face averages, Dirichlet
values on ``x = 0`` and ``x = 1`` and no-flow on ``y = 0`` and ``y = 1``.

Unknowns live at cell centers. A :class:`StateField` additionally carries the
boundary points, so its node set is the rectilinear grid
``xs = [0, x_0, ..., x_{nx-1}, 1]`` (same for y). Dirichlet nodes hold the
prescribed values exactly; no-flow boundary nodes copy the adjacent cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded
from scipy.special import gamma as gamma_fn

from .errors import SolverError, ValidationError

SourceLike = Union["SourceSpec", np.ndarray, float, Callable[[float], np.ndarray], None]


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int

    def __post_init__(self):
        if int(self.nx) < 2 or int(self.ny) < 2:
            raise ValidationError(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")

    @property
    def dx(self) -> float:
        return 1.0 / self.nx

    @property
    def dy(self) -> float:
        return 1.0 / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates as two ``(nx, ny)`` arrays (``indexing='ij'``)."""
        xc = (np.arange(self.nx) + 0.5) * self.dx
        yc = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(xc, yc, indexing="ij")

    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """1D node coordinates including the boundary points."""
        xs = np.concatenate([[0.0], (np.arange(self.nx) + 0.5) * self.dx, [1.0]])
        ys = np.concatenate([[0.0], (np.arange(self.ny) + 0.5) * self.dy, [1.0]])
        return xs, ys


@dataclass(frozen=True)
class SourceSpec:
    """Source term ``f``.

    ``kind="gaussian_bump"`` gives ``s/(pi*iota) * exp(-|theta - x|^2 / (2 iota^2))``;
    ``kind="constant"`` gives ``value`` everywhere and ignores the bump fields.
    """

    kind: str = "constant"
    value: float = 0.0
    strength: float = math.exp(2.0)
    width: float = 0.05
    location: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if self.kind not in ("gaussian_bump", "constant"):
            raise ValidationError(f"unknown source kind {self.kind!r}")
        if self.kind == "gaussian_bump":
            if not self.width > 0:
                raise ValidationError("source width must be positive")
            if not self.strength > 0:
                raise ValidationError("source strength must be positive")

    def field(self, grid: Grid2D) -> np.ndarray:
        if self.kind == "constant":
            return np.full(grid.shape, float(self.value))
        return gaussian_source(self.location, self.strength, self.width, grid)


@dataclass(frozen=True)
class FractureSpec:
    """A single fracture parallel to the y-axis, centered at ``(x0, y0)``."""

    x0: float
    y0: float
    length: float
    a_frac: float = 1.0e4

    def segment(self) -> tuple[float, float]:
        """The y-extent of the segment clipped to ``[0, 1]``."""
        lo = max(self.y0 - 0.5 * self.length, 0.0)
        hi = min(self.y0 + 0.5 * self.length, 1.0)
        return lo, hi

    def endpoints(self) -> np.ndarray:
        """End-point vector ``(x0, y_lo, x0, y_hi)`` of the unclipped segment."""
        half = 0.5 * self.length
        return np.array([self.x0, self.y0 - half, self.x0, self.y0 + half])


@dataclass
class StateField:
    """Nodal values of ``u`` on the boundary-augmented grid.

    ``values`` has shape ``(n_times, nx + 2, ny + 2)``; ``times`` has length
    ``n_times``. A steady solve has a single time entry equal to 0.
    """

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    times: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def at(self, time: float | None = None) -> np.ndarray:
        """Nodal field at ``time``, linearly interpolated between stored steps."""
        if time is None:
            return self.values[-1]
        t = self.times
        if time < t[0] - 1e-12 or time > t[-1] + 1e-12:
            raise ValidationError(f"time {time} outside trajectory [{t[0]}, {t[-1]}]")
        near = int(np.argmin(np.abs(t - time)))
        if abs(t[near] - time) <= 1e-9:
            return self.values[near]
        k = min(max(int(np.searchsorted(t, time)), 1), len(t) - 1)
        w = (time - t[k - 1]) / (t[k] - t[k - 1])
        return (1 - w) * self.values[k - 1] + w * self.values[k]


# ---------------------------------------------------------------------------
# fields


def gaussian_source(theta, s: float, iota: float, grid: Grid2D) -> np.ndarray:
    """Gaussian bump ``s/(pi iota) exp(-|theta - x|^2 / (2 iota^2))`` at cell centers."""
    if not iota > 0:
        raise ValidationError("iota must be positive")
    X, Y = grid.cell_centers()
    r2 = (X - theta[0]) ** 2 + (Y - theta[1]) ** 2
    return s / (math.pi * iota) * np.exp(-r2 / (2.0 * iota**2))


def arctan_map(q) -> np.ndarray:
    """Map unconstrained values into ``(0, 1)`` by ``1/2 + arctan(q)/pi``."""
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValidationError("arctan_map needs finite input")
    return 0.5 + np.arctan(q) / math.pi


def arctan_unmap(theta) -> np.ndarray:
    """Inverse of :func:`arctan_map`; defined on the open interval only."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0.0) or np.any(theta >= 1.0):
        raise ValidationError("arctan_unmap is defined on (0, 1) only")
    return np.tan(math.pi * (theta - 0.5))


def embed_fracture(spec: FractureSpec, background: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Assign ``spec.a_frac`` to the cells carrying the fracture.

    The fracture occupies the cell column containing ``x0`` and every cell in
    it whose center lies on the clipped segment.
    """
    out = np.array(background, dtype=float, copy=True).reshape(grid.shape)
    if spec.length <= 0:
        return out
    lo, hi = spec.segment()
    if hi < lo:
        return out
    i = min(max(int(math.floor(spec.x0 * grid.nx)), 0), grid.nx - 1)
    yc = (np.arange(grid.ny) + 0.5) * grid.dy
    rows = (yc >= lo - 1e-12) & (yc <= hi + 1e-12)
    out[i, rows] = spec.a_frac
    return out


# ---------------------------------------------------------------------------
# spatial operator


def _check_perm(perm, grid: Grid2D) -> np.ndarray:
    a = np.asarray(perm, dtype=float)
    if a.ndim == 0:
        a = np.full(grid.shape, float(a))
    a = a.reshape(grid.shape)
    if not np.all(np.isfinite(a)):
        raise ValidationError("permeability contains non-finite values")
    if np.all(a == 0.0):
        raise SolverError("all-zero permeability gives a singular system")
    if np.any(a <= 0.0):
        raise ValidationError("permeability must be strictly positive")
    return a


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def _couplings(a: np.ndarray, grid: Grid2D):
    ix2, iy2 = 1.0 / grid.dx**2, 1.0 / grid.dy**2
    tx = _harmonic(a[:-1, :], a[1:, :]) * ix2
    ty = _harmonic(a[:, :-1], a[:, 1:]) * iy2
    t_left = 2.0 * a[0, :] * ix2
    t_right = 2.0 * a[-1, :] * ix2
    diag = np.zeros(grid.shape)
    diag[:-1, :] += tx
    diag[1:, :] += tx
    diag[:, :-1] += ty
    diag[:, 1:] += ty
    diag[0, :] += t_left
    diag[-1, :] += t_right
    return diag, tx, ty, t_left, t_right


def _load(t_left, t_right, grid: Grid2D, bc) -> np.ndarray:
    load = np.zeros(grid.shape)
    load[0, :] += t_left * bc[0]
    load[-1, :] += t_right * bc[1]
    return load.ravel()


def assemble_operator(perm, grid: Grid2D, bc: tuple[float, float] = (1.0, 0.0)):
    """Sparse SPD matrix of ``-div(a grad u)`` per unit cell area and the
    boundary load vector carrying the Dirichlet values."""
    a = _check_perm(perm, grid)
    nx, ny = grid.shape
    idx = np.arange(nx * ny).reshape(nx, ny)
    diag, tx, ty, t_left, t_right = _couplings(a, grid)
    rows = np.concatenate([idx.ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel(),
                           idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    cols = np.concatenate([idx.ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel(),
                           idx[:, 1:].ravel(), idx[:, :-1].ravel()])
    vals = np.concatenate([diag.ravel(), -tx.ravel(), -tx.ravel(), -ty.ravel(), -ty.ravel()])
    A = sp.csc_matrix((vals, (rows, cols)), shape=(nx * ny, nx * ny))
    return A, _load(t_left, t_right, grid, bc)


class BandedOperator:
    """Cholesky factor of ``shift * I + A`` in upper banded storage.

    The 5-point operator has bandwidth ``ny`` under the x-major ordering, so
    the banded factorization beats a general sparse LU at these grid sizes.
    """

    def __init__(self, perm, grid: Grid2D, shift: float = 0.0, bc=(1.0, 0.0)):
        a = _check_perm(perm, grid)
        diag, tx, ty, t_left, t_right = _couplings(a, grid)
        nb, n = grid.ny, grid.size
        ab = np.zeros((nb + 1, n))
        ab[nb] = diag.ravel() + shift
        upper = np.zeros(grid.shape)
        upper[:, 1:] = -ty
        ab[nb - 1] = upper.ravel()
        ab[0, nb:] = -tx.ravel()
        try:
            self._factor = cholesky_banded(ab, check_finite=False)
        except LinAlgError as exc:
            raise SolverError(f"operator is not positive definite: {exc}") from exc
        self.load = _load(t_left, t_right, grid, bc)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve_banded((self._factor, False), rhs, check_finite=False)


def face_fluxes_x(cells: np.ndarray, perm, grid: Grid2D, bc=(1.0, 0.0)) -> np.ndarray:
    """Total x-directed flux through each of the ``nx + 1`` vertical grid lines."""
    a = _check_perm(perm, grid)
    u = np.asarray(cells).reshape(grid.shape)
    dx, dy = grid.dx, grid.dy
    inner = _harmonic(a[:-1, :], a[1:, :]) * (u[:-1, :] - u[1:, :]) / dx * dy
    left = 2.0 * a[0, :] * (bc[0] - u[0, :]) / dx * dy
    right = 2.0 * a[-1, :] * (u[-1, :] - bc[1]) / dx * dy
    return np.concatenate([[left.sum()], inner.sum(axis=1), [right.sum()]])


def _factorize(M):
    try:
        return spla.splu(M.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc


def _source_at(source: SourceLike, grid: Grid2D, t: float) -> np.ndarray:
    if source is None:
        return np.zeros(grid.size)
    if isinstance(source, SourceSpec):
        return source.field(grid).ravel()
    if callable(source):
        return np.asarray(source(t), dtype=float).reshape(grid.size)
    f = np.asarray(source, dtype=float)
    if f.ndim == 0:
        return np.full(grid.size, float(f))
    return f.reshape(grid.size)


def _time_dependent(source) -> bool:
    return callable(source) and not isinstance(source, SourceSpec)


def to_nodal(cells: np.ndarray, grid: Grid2D, bc=(1.0, 0.0)) -> np.ndarray:
    """Augment cell values with boundary nodes; works on a leading batch axis."""
    c = np.asarray(cells, dtype=float)
    lead = c.shape[:-1] if c.shape[-1] == grid.size else c.shape[:-2]
    c = c.reshape(lead + grid.shape)
    out = np.empty(lead + (grid.nx + 2, grid.ny + 2))
    out[..., 1:-1, 1:-1] = c
    out[..., 1:-1, 0] = c[..., :, 0]
    out[..., 1:-1, -1] = c[..., :, -1]
    out[..., 0, :] = bc[0]
    out[..., -1, :] = bc[1]
    return out


def nodal_operator(grid: Grid2D, bc=(1.0, 0.0)):
    """Sparse ``T`` and offset ``b`` with ``to_nodal(u).ravel() == T @ u + b``."""
    nx, ny = grid.shape
    ii, jj = np.meshgrid(np.arange(1, nx + 1), np.arange(ny + 2), indexing="ij")
    rows = (ii * (ny + 2) + jj).ravel()
    cols = ((ii - 1) * ny + np.clip(jj - 1, 0, ny - 1)).ravel()
    T = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=((nx + 2) * (ny + 2), grid.size))
    b = to_nodal(np.zeros(grid.size), grid, bc).ravel()
    return T, b


def _state(cells_seq, times, grid, bc) -> StateField:
    xs, ys = grid.node_coords()
    return StateField(xs, ys, to_nodal(np.asarray(cells_seq), grid, bc), np.asarray(times, dtype=float))


def _check_finite(u):
    if not np.all(np.isfinite(u)):
        raise SolverError("solver produced non-finite values")


def _n_steps(dt: float, T: float) -> int:
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if T < dt - 1e-12:
        raise ValidationError("horizon T must be at least dt")
    return int(math.ceil(T / dt - 1e-9))


# ---------------------------------------------------------------------------
# solvers


def solve_steady_flow(perm, source: SourceLike, grid: Grid2D, bc=(1.0, 0.0)) -> StateField:
    """Steady ``-div(a grad u) = f`` with the mixed boundary conditions."""
    A, load = assemble_operator(perm, grid, bc)
    rhs = _source_at(source, grid, 0.0) + load
    if not np.all(np.isfinite(rhs)):
        raise ValidationError("source contains non-finite values")
    u = _factorize(A).solve(rhs)
    _check_finite(u)
    return _state(u[None, :], [0.0], grid, bc)


def solve_unsteady_flow(perm, source: SourceLike, grid: Grid2D, dt: float, T: float,
                        u0=None, bc=(1.0, 0.0), keep_history: bool = True) -> StateField:
    """Implicit-Euler march of ``u_t - div(a grad u) = f`` from ``u0`` (default 0)."""
    n = _n_steps(dt, T)
    op = BandedOperator(perm, grid, shift=1.0 / dt, bc=bc)
    load = op.load
    u = np.zeros(grid.size) if u0 is None else np.asarray(u0, dtype=float).reshape(grid.size).copy()
    history = [u.copy()] if keep_history else None
    varying = _time_dependent(source)
    f = None if varying else _source_at(source, grid, 0.0)
    for k in range(1, n + 1):
        fk = _source_at(source, grid, k * dt) if varying else f
        u = op.solve(u / dt + fk + load)
        if keep_history:
            history.append(u)
    _check_finite(u)
    if keep_history:
        return _state(history, np.arange(n + 1) * dt, grid, bc)
    return _state(u[None, :], [n * dt], grid, bc)


def l1_weights(n: int, alpha: float) -> np.ndarray:
    """L1 convolution weights ``b_k = (k+1)^(1-alpha) - k^(1-alpha)``, k < n."""
    k = np.arange(n, dtype=float)
    return (k + 1.0) ** (1.0 - alpha) - k ** (1.0 - alpha)


def solve_fractional_diffusion(perm, alpha: float, source: SourceLike, grid: Grid2D,
                               dt: float, T: float, u0=None, bc=(1.0, 0.0),
                               keep_history: bool = True) -> StateField:
    """Caputo time-fractional diffusion of order ``alpha`` with the L1 scheme.

    The Caputo derivative at ``t_n`` is approximated by
    ``dt^-alpha / Gamma(2 - alpha) * sum_k b_k (u^{n-k} - u^{n-k-1})``;
    the spatial operator is treated implicitly.
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"fractional order must lie in (0, 1), got {alpha}")
    n = _n_steps(dt, T)
    c = dt ** (-alpha) / gamma_fn(2.0 - alpha)
    b = l1_weights(n + 1, alpha)
    op = BandedOperator(perm, grid, shift=c, bc=bc)
    load = op.load

    u = np.zeros(grid.size) if u0 is None else np.asarray(u0, dtype=float).reshape(grid.size).copy()
    increments = np.zeros((n, grid.size))
    history = [u.copy()] if keep_history else None
    varying = _time_dependent(source)
    f = None if varying else _source_at(source, grid, 0.0)
    for m in range(1, n + 1):
        fm = _source_at(source, grid, m * dt) if varying else f
        # sum_{k=1}^{m-1} b_k (u^{m-k} - u^{m-k-1})
        memory = b[m - 1:0:-1] @ increments[: m - 1] if m > 1 else 0.0
        u_new = op.solve(c * (u - memory) + fm + load)
        increments[m - 1] = u_new - u
        u = u_new
        if keep_history:
            history.append(u)
    _check_finite(u)
    if keep_history:
        return _state(history, np.arange(n + 1) * dt, grid, bc)
    return _state(u[None, :], [n * dt], grid, bc)


# ---------------------------------------------------------------------------
# observation


def sensor_lattice(x_range, y_range, nx: int, ny: int) -> np.ndarray:
    """``nx * ny`` sensor coordinates, ordered with x outer and y inner."""
    xs = np.linspace(x_range[0], x_range[1], nx)
    ys = np.linspace(y_range[0], y_range[1], ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def interpolation_matrix(xs: np.ndarray, ys: np.ndarray, locations) -> sp.csr_matrix:
    """Sparse bilinear interpolation weights from the nodal grid to sensors."""
    loc = np.atleast_2d(np.asarray(locations, dtype=float))
    if loc.shape[1] != 2:
        raise ValidationError("sensor locations must be (n, 2)")
    if np.any(loc < -1e-12) or np.any(loc > 1 + 1e-12):
        raise ValidationError("sensor location outside the unit square")
    px, py = np.clip(loc[:, 0], 0.0, 1.0), np.clip(loc[:, 1], 0.0, 1.0)
    i = np.clip(np.searchsorted(xs, px, side="right") - 1, 0, len(xs) - 2)
    j = np.clip(np.searchsorted(ys, py, side="right") - 1, 0, len(ys) - 2)
    tx = (px - xs[i]) / (xs[i + 1] - xs[i])
    ty = (py - ys[j]) / (ys[j + 1] - ys[j])
    ncol = len(ys)
    n = len(loc)
    rows = np.repeat(np.arange(n), 4)
    cols = np.column_stack([i * ncol + j, (i + 1) * ncol + j, i * ncol + j + 1,
                            (i + 1) * ncol + j + 1]).ravel()
    vals = np.column_stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, len(xs) * len(ys)))


def observe(state: StateField, locations, time: float | None = None) -> np.ndarray:
    """Bilinear interpolation of the nodal field at each sensor."""
    M = interpolation_matrix(state.xs, state.ys, locations)
    return M @ state.at(time).ravel()
