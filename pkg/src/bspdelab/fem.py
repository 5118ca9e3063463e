"""P1 finite elements on a uniform grid of (0, 1) with homogeneous Dirichlet data.

Unknowns live at the interior nodes x_i = i*h, i = 1..n_cells-1.  Mass and
stiffness matrices are symmetric tridiagonal with constant bands
(M: h/6 off / 4h/6 diag, A: -1/h off / 2/h diag), so they are kept as two
scalars plus the dimension and applied matrix-free.  The generalized
eigenproblem A v = lambda M v is solved once per mesh and cached; its modes
are M-orthonormal and back the discrete fractional norms and the semigroup.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import cho_solve_banded, cholesky_banded, eigh

SUPPORTED_NORM_ORDERS = (-2, -1, 0, 1, 2)


class NumericFailure(RuntimeError):
    """Raised when a numerical invariant breaks (non-finite values, divergence)."""


@dataclass(frozen=True)
class Mesh1D:
    """Uniform mesh of (0, 1): n_cells cells of width h, interior nodes only."""

    n_cells: int
    h: float
    nodes: np.ndarray  # shape (n_cells - 1,), strictly inside (0, 1)


@dataclass(frozen=True)
class SpectralDecomp:
    """Eigenpairs of A v = lambda M v, eigenvalues ascending, modes M-orthonormal.

    modes[:, k] is the k-th eigenvector; eigenvalues has length n_cells - 1.
    """

    eigenvalues: np.ndarray
    modes: np.ndarray


def build_mesh(n_cells: int) -> Mesh1D:
    """Build the uniform mesh with n_cells >= 2 cells."""
    if not isinstance(n_cells, (int, np.integer)) or n_cells < 2:
        raise ValueError(f"n_cells must be an integer >= 2, got {n_cells!r}")
    h = 1.0 / n_cells
    nodes = h * np.arange(1, n_cells)
    return Mesh1D(n_cells=int(n_cells), h=h, nodes=nodes)


class FemSystem:
    """Assembled mass/stiffness operators plus cached factorizations.

    The matrices are never formed densely outside of tests; matvecs use the
    constant bands and solves use banded Cholesky factorizations cached per
    shift (the tau in M + tau*A).
    """

    def __init__(self, mesh: Mesh1D):
        self.mesh = mesh
        self.n = mesh.n_cells - 1
        h = mesh.h
        self.mass_diag = 4.0 * h / 6.0
        self.mass_off = h / 6.0
        self.stiff_diag = 2.0 / h
        self.stiff_off = -1.0 / h
        self._chol_cache: dict[float, np.ndarray] = {}
        self._spectral: SpectralDecomp | None = None

    # ---- banded helpers ------------------------------------------------

    def _tridiag_apply(self, u: np.ndarray, diag: float, off: float) -> np.ndarray:
        u = np.asarray(u)
        if u.shape[-1] != self.n:
            raise ValueError(f"field has {u.shape[-1]} entries, mesh has {self.n} interior nodes")
        out = diag * u
        out[..., :-1] += off * u[..., 1:]
        out[..., 1:] += off * u[..., :-1]
        return out

    def mass_apply(self, u: np.ndarray) -> np.ndarray:
        """M u for u of shape (..., n)."""
        return self._tridiag_apply(u, self.mass_diag, self.mass_off)

    def stiff_apply(self, u: np.ndarray) -> np.ndarray:
        """A u for u of shape (..., n)."""
        return self._tridiag_apply(u, self.stiff_diag, self.stiff_off)

    def _factor(self, tau: float) -> np.ndarray:
        # Cholesky of M + tau*A in scipy upper-banded storage; tau = 0 gives M.
        key = float(tau)
        fac = self._chol_cache.get(key)
        if fac is None:
            ab = np.zeros((2, self.n))
            ab[0, 1:] = self.mass_off + key * self.stiff_off
            ab[1, :] = self.mass_diag + key * self.stiff_diag
            fac = cholesky_banded(ab, lower=False)
            self._chol_cache[key] = fac
        return fac

    def solve_shifted(self, tau: float, rhs: np.ndarray) -> np.ndarray:
        """Solve (M + tau*A) x = rhs for rhs of shape (..., n); tau >= 0."""
        if tau < 0:
            raise ValueError(f"shift tau must be >= 0, got {tau}")
        fac = self._factor(tau)
        rhs = np.asarray(rhs, dtype=float)
        flat = rhs.reshape(-1, self.n)
        out = cho_solve_banded((fac, False), flat.T).T
        return out.reshape(rhs.shape)

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        """Solve M x = rhs."""
        return self.solve_shifted(0.0, rhs)

    # ---- dense copies, for tests and the eigensolver -------------------

    def mass_dense(self) -> np.ndarray:
        return (np.diag(np.full(self.n, self.mass_diag))
                + np.diag(np.full(self.n - 1, self.mass_off), 1)
                + np.diag(np.full(self.n - 1, self.mass_off), -1))

    def stiff_dense(self) -> np.ndarray:
        return (np.diag(np.full(self.n, self.stiff_diag))
                + np.diag(np.full(self.n - 1, self.stiff_off), 1)
                + np.diag(np.full(self.n - 1, self.stiff_off), -1))


def assemble(mesh: Mesh1D) -> FemSystem:
    """Assemble mass and stiffness operators for a mesh."""
    return FemSystem(mesh)


def l2_project(fem: FemSystem, g, quadrature_order: int = 4) -> np.ndarray:
    """L2 projection of a function onto the FE space.

    Parameters
    ----------
    fem : FemSystem
    g : callable
        Vectorized map x -> g(x) on arrays of points in (0, 1).  Quadrature
        nodes are strictly interior, so integrable endpoint singularities
        (e.g. x**-0.49) are handled without special casing.
    quadrature_order : int
        Gauss-Legendre points per cell, >= 1.

    Returns
    -------
    ndarray of shape (n,), coefficients of the projection.
    """
    if quadrature_order < 1:
        raise ValueError(f"quadrature_order must be >= 1, got {quadrature_order}")
    b = projection_rhs(fem, g, quadrature_order)
    return fem.solve_mass(b)


def projection_rhs(fem: FemSystem, g, quadrature_order: int = 4) -> np.ndarray:
    """Load vector b_i = int g * phi_i dx by per-cell Gauss quadrature."""
    mesh = fem.mesh
    h = mesh.h
    xi, wi = leggauss(quadrature_order)  # on (-1, 1)
    s = (xi + 1.0) / 2.0                 # local coordinate in (0, 1)
    w = wi * h / 2.0
    lefts = h * np.arange(mesh.n_cells)
    x = lefts[:, None] + h * s[None, :]          # (n_cells, q), all interior
    gx = np.asarray(g(x), dtype=float)
    if gx.shape != x.shape:
        gx = np.broadcast_to(gx, x.shape)
    contrib_left = (gx * (1.0 - s)[None, :]) @ w   # weight of node at cell's left edge
    contrib_right = (gx * s[None, :]) @ w
    b = np.zeros(fem.n)
    b += contrib_right[:-1]          # cell k feeds interior node k (0-based) from its right basis
    b += contrib_left[1:]            # and interior node k-1 from the next cell's left basis
    return b


def apply_discrete_laplacian(fem: FemSystem, u: np.ndarray) -> np.ndarray:
    """Discrete Laplacian: w with M w = -A u."""
    return fem.solve_mass(-fem.stiff_apply(u))


def spectral(fem: FemSystem) -> SpectralDecomp:
    """Generalized eigenpairs of (A, M), cached on the system.

    Solved densely via the Cholesky pencil reduction (n <= a few hundred
    here).  Construction validates M-orthonormality to 1e-12 and the
    eigenresidual ||A v - lambda M v|| <= 1e-10 * max(1, lambda).
    """
    if fem._spectral is None:
        lam, modes = eigh(fem.stiff_dense(), fem.mass_dense())
        decomp = SpectralDecomp(eigenvalues=lam, modes=modes)
        _validate_spectral(fem, decomp)
        fem._spectral = decomp
    return fem._spectral


def _validate_spectral(fem: FemSystem, decomp: SpectralDecomp) -> None:
    lam, modes = decomp.eigenvalues, decomp.modes
    if np.any(lam <= 0):
        raise NumericFailure("nonpositive eigenvalue in (A, M) pencil")
    gram = modes.T @ fem.mass_dense() @ modes
    ortho_err = np.max(np.abs(gram - np.eye(fem.n)))
    if ortho_err > 1e-12:
        raise NumericFailure(f"modes not M-orthonormal: max Gram deviation {ortho_err:.3e}")
    resid = fem.stiff_dense() @ modes - fem.mass_dense() @ modes * lam[None, :]
    resid_norm = np.linalg.norm(resid, axis=0)
    bound = 1e-10 * np.maximum(1.0, lam)
    if np.any(resid_norm > bound):
        k = int(np.argmax(resid_norm / bound))
        raise NumericFailure(
            f"eigenresidual {resid_norm[k]:.3e} exceeds {bound[k]:.3e} at mode {k}")


def modal_coefficients(fem: FemSystem, u: np.ndarray) -> np.ndarray:
    """Coefficients c_k = v_k^T M u of u in the M-orthonormal eigenbasis."""
    decomp = spectral(fem)
    return fem.mass_apply(np.asarray(u)) @ decomp.modes


def fractional_norm(fem: FemSystem, u: np.ndarray, gamma: int) -> float:
    """Discrete fractional Sobolev norm of a single coefficient vector.

    gamma in {-2, -1, 0, 1, 2}; gamma = 0 is the L2 (M-) norm, gamma = 1 the
    energy (A-) norm, negative orders damp by the eigenvalues.
    """
    return float(np.sqrt(fractional_norm_sq(fem, u, gamma)))


def fractional_norm_sq(fem: FemSystem, u: np.ndarray, gamma: int) -> np.ndarray:
    """Squared fractional norms, batched over leading axes of u (..., n)."""
    if gamma not in SUPPORTED_NORM_ORDERS:
        raise ValueError(f"unsupported norm order gamma={gamma}; valid: {SUPPORTED_NORM_ORDERS}")
    u = np.asarray(u)
    if gamma == 0:
        return np.sum(u * fem.mass_apply(u), axis=-1)
    if gamma == 1:
        return np.sum(u * fem.stiff_apply(u), axis=-1)
    lam = spectral(fem).eigenvalues
    c = modal_coefficients(fem, u)
    return np.sum(lam ** gamma * c * c, axis=-1)


def closed_form_eigenvalues(n_cells: int) -> np.ndarray:
    """Known eigenvalues of the uniform P1 pencil: (6/h^2)(1-cos k pi h)/(2+cos k pi h)."""
    h = 1.0 / n_cells
    k = np.arange(1, n_cells)
    return 6.0 / h ** 2 * (1.0 - np.cos(k * np.pi * h)) / (2.0 + np.cos(k * np.pi * h))


def prolong(coarse: np.ndarray, n_cells_coarse: int, n_cells_fine: int) -> np.ndarray:
    """Embed a coarse-mesh field into a finer nested mesh (exact for P1).

    Evaluates the piecewise-linear interpolant (with zero boundary values) at
    the fine interior nodes.  Requires n_cells_fine to be a multiple of
    n_cells_coarse.  Batched over leading axes.
    """
    if n_cells_fine % n_cells_coarse != 0:
        raise ValueError(f"meshes not nested: {n_cells_coarse} does not divide {n_cells_fine}")
    coarse = np.asarray(coarse)
    if coarse.shape[-1] != n_cells_coarse - 1:
        raise ValueError("coarse field length does not match n_cells_coarse")
    ratio = n_cells_fine // n_cells_coarse
    i = np.arange(1, n_cells_fine)                  # fine interior node = i / n_cells_fine
    k = i // ratio                                  # coarse cell index containing it
    w = (i - k * ratio) / ratio                     # local coordinate in that cell
    flat = coarse.reshape(-1, n_cells_coarse - 1)
    padded = np.zeros((flat.shape[0], n_cells_coarse + 1), dtype=coarse.dtype)
    padded[:, 1:-1] = flat
    out = (1.0 - w) * padded[:, k] + w * padded[:, k + 1]
    return out.reshape(coarse.shape[:-1] + (n_cells_fine - 1,))
