"""Orthonormal 2D cosine basis for field parameterization.

A field ``A`` on an ``nx x ny`` grid is flattened with x as the slow index
(``m * ny + n``). Basis column ``(i, j)`` is the outer product of the 1D
orthonormal DCT-II vectors, so ``Phi`` is ``kron(C_x, C_y)`` restricted to
the retained columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

ORDERINGS = ("zigzag", "paper_linear")


def dct_matrix(n: int) -> np.ndarray:
    """1D orthonormal DCT-II matrix with basis vectors as columns.

    ``C[m, i] = sqrt(2/n) * alpha(i) * cos(pi (2m + 1) i / (2n))`` with
    ``alpha(0) = 1/sqrt(2)`` and ``alpha(i) = 1`` otherwise.
    """
    m = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    C = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * m + 1) * i / (2.0 * n))
    C[:, 0] /= np.sqrt(2.0)
    return C


def frequency_order(nx: int, ny: int, ordering: str = "zigzag") -> np.ndarray:
    """Linear indices ``i * ny + j`` of all frequency pairs in retention order."""
    if ordering not in ORDERINGS:
        raise ValidationError(f"unknown DCT ordering {ordering!r}; expected one of {ORDERINGS}")
    lin = np.arange(nx * ny)
    if ordering == "paper_linear":
        return lin
    i, j = np.divmod(lin, ny)
    return lin[np.lexsort((i, i + j))]


@dataclass(frozen=True)
class DctBasis:
    """Retained cosine columns.

    Attributes
    ----------
    nx, ny : int
        Grid extents.
    retained : ndarray of int
        Linear frequency indices ``i * ny + j`` of the columns, in order.
    columns : ndarray, shape (nx * ny, len(retained))
        The matrix ``Phi``.
    """

    nx: int
    ny: int
    retained: np.ndarray
    columns: np.ndarray = field(repr=False)

    @property
    def n_m(self) -> int:
        return self.nx * self.ny

    @property
    def n_c(self) -> int:
        return len(self.retained)

    def frequencies(self) -> np.ndarray:
        """``(n_c, 2)`` array of retained ``(i, j)`` pairs."""
        return np.column_stack(np.divmod(self.retained, self.ny))

    def subset(self, positions) -> "DctBasis":
        """Basis restricted to the given positions of the current columns."""
        pos = np.asarray(positions, dtype=int)
        return DctBasis(self.nx, self.ny, self.retained[pos], self.columns[:, pos])


def build_basis(nx: int, ny: int, n_c: int, ordering: str = "zigzag") -> DctBasis:
    """First ``n_c`` basis columns under ``ordering``."""
    if nx < 1 or ny < 1:
        raise ValidationError("grid extents must be positive")
    if not 1 <= n_c <= nx * ny:
        raise ValidationError(f"n_c must lie in [1, {nx * ny}], got {n_c}")
    order = frequency_order(nx, ny, ordering)[:n_c]
    Cx, Cy = dct_matrix(nx), dct_matrix(ny)
    i, j = np.divmod(order, ny)
    # column r: vec(Cx[:, i] outer Cy[:, j]) in x-major order
    cols = (Cx[:, i][:, None, :] * Cy[:, j][None, :, :]).reshape(nx * ny, n_c)
    return DctBasis(nx, ny, order, cols)


def synthesize(theta, basis: DctBasis) -> np.ndarray:
    """Field ``Phi @ theta``; a 2D ``theta`` is treated as one member per column."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[0] != basis.n_c:
        raise ValidationError(f"expected {basis.n_c} coefficients, got {theta.shape[0]}")
    return basis.columns @ theta


def analyze(field_values, nx: int, ny: int) -> np.ndarray:
    """Full coefficient vector, indexed by ``i * ny + j``."""
    A = np.asarray(field_values, dtype=float)
    if A.size != nx * ny:
        raise ValidationError(f"field has {A.size} values, grid needs {nx * ny}")
    A = A.reshape(nx, ny)
    return (dct_matrix(nx).T @ A @ dct_matrix(ny)).ravel()


def reduce_dimension(theta_mean, alpha: float) -> np.ndarray:
    """Positions retaining at least a fraction ``alpha`` of ``sum |theta_mean|``.

    Components are ranked by magnitude (ties by position); the shortest
    prefix reaching the mass fraction is kept. Positions are returned in
    ascending order so the coefficient layout is preserved.
    """
    v = np.abs(np.asarray(theta_mean, dtype=float))
    if not 0.0 < alpha <= 1.0:
        raise ValidationError("alpha must lie in (0, 1]")
    total = v.sum()
    if total == 0.0 or not np.isfinite(total):
        return np.arange(len(v))
    order = np.argsort(-v, kind="stable")
    frac = np.cumsum(v[order]) / total
    if alpha >= 1.0:
        keep = int(np.count_nonzero(v))
    else:
        keep = int(np.searchsorted(frac, alpha * (1.0 - 1e-12))) + 1
    keep = min(max(keep, 1), len(v))
    return np.sort(order[:keep])
