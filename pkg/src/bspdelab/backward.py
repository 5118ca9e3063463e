"""Regression-based backward induction for the semilinear backward equation.

The spatial discretization is the interior P1 space from :mod:`bspdelab.fem`;
time runs backward with an implicit Euler step in the diffusion part and a
Picard loop for the driver.  Conditional expectations with respect to the
Brownian value at the current step are estimated by global polynomial
least squares across the path batch.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import fem as fem_mod
from .brownian import BrownianBatch, TimeGrid
from .fem import FemSystem, NumericFailure
from .semigroup import SemigroupEvaluator, _field_provider

_COND_LIMIT = 1e14


@dataclasses.dataclass(frozen=True)
class RegressionBasis:
    """Polynomial-in-W regression design: features 1, w, ..., w^degree.

    The regressor is standardized before taking powers; ridge regularization
    is applied to the (scaled) normal matrix.  A degenerate regressor (all
    paths equal, e.g. W at t=0) collapses to an intercept-only fit.
    """

    degree: int = 4
    ridge: float = 1e-10

    def __post_init__(self):
        if not isinstance(self.degree, (int, np.integer)) or self.degree < 0:
            raise ValueError(f"degree must be a nonnegative integer, got {self.degree}")
        if self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")


@dataclasses.dataclass(frozen=True)
class PicardConfig:
    max_iters: int = 50
    tol: float = 1e-10

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")


@dataclasses.dataclass
class BspdeProblem:
    """Backward problem data.

    driver(t, p, z, w) -> (n_paths, n) with Lipschitz constant m_lip in (p, z);
    terminal(x, w) -> (n_paths, len(x)) point values of p_T per path, projected
    onto the FE space by the solver; w is the Brownian value per path.
    """

    driver: Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    m_lip: float
    terminal: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grid: TimeGrid

    def __post_init__(self):
        if not np.isfinite(self.m_lip) or self.m_lip < 0:
            raise ValueError(f"m_lip must be finite and >= 0, got {self.m_lip}")


@dataclasses.dataclass
class BackwardSolution:
    """Per-path trajectories: p at steps 0..J, z at steps 0..J-1."""

    p: np.ndarray
    z: np.ndarray
    picard_counts: np.ndarray
    condition_numbers: np.ndarray


class _Design:
    """Factored normal equations for one regression step, reused per target."""

    def __init__(self, basis: RegressionBasis, regressor: np.ndarray,
                 extra: Optional[np.ndarray] = None):
        w = np.asarray(regressor, dtype=float)
        if w.ndim != 1:
            raise ValueError("regressor must be one-dimensional (one value per path)")
        n_paths = w.shape[0]
        cols = [np.ones(n_paths)]
        u = _standardize(w)
        for k in range(1, basis.degree + 1):
            cols.append(u ** k)
        if extra is not None:
            ex = np.atleast_2d(np.asarray(extra, dtype=float))
            if ex.shape[0] != n_paths:
                ex = ex.T
            for col in ex.T:
                cols.append(_standardize(col))
        self.phi = np.column_stack(cols)
        d = self.phi.shape[1]
        if n_paths <= d:
            raise ValueError(f"need more than {d} paths for a {d}-column design, got {n_paths}")
        gram = self.phi.T @ self.phi / n_paths + basis.ridge * np.eye(d)
        eigs = np.linalg.eigvalsh(gram)
        if eigs[0] <= 0 or eigs[-1] / eigs[0] > _COND_LIMIT:
            raise NumericFailure(
                f"regression normal matrix is numerically singular, condition {eigs[-1] / max(eigs[0], 1e-300):.3e}")
        self.cond = eigs[-1] / eigs[0]
        self._chol = scipy.linalg.cho_factor(gram, lower=False)
        self._n_paths = n_paths

    def fit(self, values: np.ndarray) -> np.ndarray:
        vals = np.asarray(values, dtype=float)
        squeeze = vals.ndim == 1
        if squeeze:
            vals = vals[:, None]
        coef = scipy.linalg.cho_solve(self._chol, self.phi.T @ vals / self._n_paths)
        out = self.phi @ coef
        return out[:, 0] if squeeze else out


def _standardize(col: np.ndarray) -> np.ndarray:
    center = col - col.mean()
    scale = center.std()
    if scale == 0.0 or not np.isfinite(scale):
        return np.zeros_like(col)
    return center / scale


def cond_expect(basis: RegressionBasis, regressor: np.ndarray, values: np.ndarray,
                extra: Optional[np.ndarray] = None) -> np.ndarray:
    """Least-squares estimate of E[values | regressor], evaluated per path.

    Componentwise over the trailing axis of ``values``; the optional ``extra``
    channel appends standardized linear features for data that depend on more
    of the path than W(t_j) alone.
    """
    return _Design(basis, regressor, extra).fit(values)


def project_terminal(fem: FemSystem, terminal, w_terminal: np.ndarray,
                     quadrature_order: int = 4) -> np.ndarray:
    """L2-project per-path terminal data onto the FE space.

    ``terminal(x, w)`` returns point values of shape (n_paths, len(x)).
    """
    w_terminal = np.asarray(w_terminal, dtype=float)
    n_paths = w_terminal.shape[0]
    mesh = fem.mesh
    nodes, weights = np.polynomial.legendre.leggauss(quadrature_order)
    # map the reference points into every cell
    left = np.linspace(0.0, 1.0 - mesh.h, mesh.n_cells)
    points = left[:, None] + (nodes[None, :] + 1.0) * (mesh.h / 2.0)
    wq = weights * (mesh.h / 2.0)
    shape_right = (points - left[:, None]) / mesh.h   # hat rising on the cell
    shape_left = 1.0 - shape_right
    flat = points.ravel()
    rhs = np.zeros((n_paths, mesh.nodes.size))
    chunk = max(1, int(4e6 // max(flat.size, 1)))
    for start in range(0, n_paths, chunk):
        stop = min(start + chunk, n_paths)
        vals = np.asarray(terminal(flat, w_terminal[start:stop]), dtype=float)
        if vals.shape != (stop - start, flat.size):
            raise ValueError(
                f"terminal returned shape {vals.shape}, expected {(stop - start, flat.size)}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("terminal data contain non-finite values")
        cellwise = vals.reshape(stop - start, mesh.n_cells, quadrature_order)
        to_right = np.einsum("pcq,cq,q->pc", cellwise, shape_right, wq)
        to_left = np.einsum("pcq,cq,q->pc", cellwise, shape_left, wq)
        rhs[start:stop] += to_right[:, :-1]
        rhs[start:stop] += to_left[:, 1:]
    return fem.solve_mass(rhs)


def _picard_cfg(picard) -> PicardConfig:
    if picard is None:
        return PicardConfig()
    if isinstance(picard, PicardConfig):
        return picard
    return PicardConfig(**dict(picard))


def solve_backward(problem: BspdeProblem, fem: FemSystem, batch: BrownianBatch,
                   basis: Optional[RegressionBasis] = None, picard=None, *,
                   control_variate: bool = True, store: bool = True,
                   observer=None, store_dtype=np.float64,
                   quadrature_order: int = 4) -> Optional[BackwardSolution]:
    """Backward induction j = J-1..0 from the projected terminal condition.

    Per step: q_j and z_j come from polynomial regression on W(t_j) (z_j with
    the conditional mean of p_{j+1} subtracted before multiplying by the
    increment, which removes the O(1/tau) variance of the plain estimator),
    then (M + tau A) p_j = M [q_j + tau f(t_j, p_j, z_j)] is iterated to
    convergence.  ``observer(j, t, p_j, z_j, w_j)`` is called once per step,
    terminal first with z=None; with store=False only the observer sees the
    trajectories and None is returned.
    """
    basis = basis if basis is not None else RegressionBasis()
    cfg = _picard_cfg(picard)
    grid = problem.grid
    if batch.grid.n_steps != grid.n_steps or not math.isclose(batch.grid.tau, grid.tau):
        raise ValueError("Brownian batch and problem use different time grids")
    tau = grid.tau
    if tau * problem.m_lip >= 0.5:
        raise ValueError(
            f"Picard contraction needs tau * m_lip < 1/2, got {tau * problem.m_lip:.3g}")
    n_steps = grid.n_steps
    n = fem.mesh.nodes.size
    n_paths = batch.n_paths
    wvals = batch.values()

    p_next = project_terminal(fem, problem.terminal, wvals[:, -1], quadrature_order)
    p_store = z_store = None
    if store:
        p_store = np.empty((n_paths, n_steps + 1, n), dtype=store_dtype)
        z_store = np.empty((n_paths, n_steps, n), dtype=store_dtype)
        p_store[:, n_steps] = p_next
    if observer is not None:
        observer(n_steps, grid.horizon, p_next, None, wvals[:, -1])

    counts = np.zeros(n_steps, dtype=int)
    conds = np.zeros(n_steps)
    for j in range(n_steps - 1, -1, -1):
        t = grid.times[j]
        w = wvals[:, j]
        dw = batch.increments[:, j]
        design = _Design(basis, w)
        conds[j] = design.cond
        q = design.fit(p_next)
        if control_variate:
            target = (p_next - q) * dw[:, None] / tau
        else:
            target = p_next * dw[:, None] / tau
        z = design.fit(target)

        p_cur = q
        for k in range(cfg.max_iters):
            rhs = q + tau * problem.driver(t, p_cur, z, w)
            p_new = fem.solve_shifted(tau, fem.mass_apply(rhs))
            delta_sq = fem_mod.fractional_norm_sq(fem, p_new - p_cur, 0)
            p_cur = p_new
            if float(np.max(delta_sq)) <= cfg.tol ** 2:
                break
        counts[j] = k + 1
        p_next = p_cur
        if store:
            p_store[:, j] = p_cur
            z_store[:, j] = z
        if observer is not None:
            observer(j, t, p_cur, z, w)

    if not store:
        return None
    return BackwardSolution(p=p_store, z=z_store, picard_counts=counts,
                            condition_numbers=conds)


@dataclasses.dataclass
class SeparableSolution:
    """Exact pair p(t,x) = pc(t,W(t)) s(x), z(t,x) = zc(t) s(x)."""

    a: Callable[[float], float]
    a_prime: Callable[[float], float]
    beta: float
    horizon: float

    def p_coeff(self, t: float, w: np.ndarray) -> np.ndarray:
        return self.a(t) * (1.0 + self.beta * np.asarray(w, dtype=float))

    def z_coeff(self, t: float) -> float:
        return self.a(t) * self.beta

    @staticmethod
    def profile(x: np.ndarray) -> np.ndarray:
        return np.sin(np.pi * np.asarray(x, dtype=float))

    profile_l2_sq: float = 0.5
    profile_h1_sq: float = np.pi ** 2 / 2.0

    def p_nodal(self, fem: FemSystem, t: float, w: np.ndarray) -> np.ndarray:
        return self.p_coeff(t, w)[:, None] * self.profile(fem.mesh.nodes)[None, :]


def manufactured_problem(a: Callable[[float], float], beta: float, fem: FemSystem,
                         grid: TimeGrid, a_prime: Optional[Callable[[float], float]] = None):
    """Linear-driver family with closed-form solution.

    p(t) = a(t)(1 + beta W(t)) sin(pi x) and z(t) = a(t) beta sin(pi x) solve
    the backward equation with driver f = (pi^2 - a'/a) p and terminal
    p_T = a(T)(1 + beta W(T)) sin(pi x); differentiating a(t)(1 + beta W(t))
    gives the dt and dW parts directly.
    """
    ts = grid.times
    avals = np.array([a(float(t)) for t in ts] + [a(grid.horizon)])
    if not np.all(np.isfinite(avals)) or avals.min() <= 1e-12:
        raise ValueError("a(t) must be positive and bounded away from zero on [0, T]")
    if a_prime is None:
        delta = 1e-6
        def a_prime(t, _a=a, _d=delta):
            return (_a(t + _d) - _a(t - _d)) / (2.0 * _d)

    def kappa(t: float) -> float:
        return np.pi ** 2 - a_prime(t) / a(t)

    m_lip = float(max(abs(kappa(float(t))) for t in ts))

    def driver(t, p, z, w):
        return kappa(t) * p

    a_T = a(grid.horizon)

    def terminal(x, w):
        prof = np.sin(np.pi * np.asarray(x, dtype=float))
        coeff = a_T * (1.0 + beta * np.asarray(w, dtype=float))
        return coeff[:, None] * prof[None, :]

    problem = BspdeProblem(driver=driver, m_lip=m_lip, terminal=terminal, grid=grid)
    exact = SeparableSolution(a=a, a_prime=a_prime, beta=beta, horizon=grid.horizon)
    return problem, exact


def _stiffness_cross(fem: FemSystem, profile) -> np.ndarray:
    """Exact integrals of hat-gradient against profile-gradient per node."""
    mesh = fem.mesh
    all_nodes = np.linspace(0.0, 1.0, mesh.n_cells + 1)
    s = np.asarray(profile(all_nodes), dtype=float)
    return (2.0 * s[1:-1] - s[:-2] - s[2:]) / mesh.h


class ErrorAccumulator:
    """Streaming Monte Carlo estimates of the three error norms.

    Feed it as the observer of :func:`solve_backward`; the continuous-norm
    cross terms use exact integrals of the separable profile so the part of
    the error outside the FE space is included.
    """

    def __init__(self, fem: FemSystem, grid: TimeGrid, exact: SeparableSolution,
                 n_paths: int):
        self.fem = fem
        self.grid = grid
        self.exact = exact
        self.n_paths = n_paths
        self.m_cross = fem_mod.projection_rhs(fem, exact.profile, quadrature_order=10)
        self.r_cross = _stiffness_cross(fem, exact.profile)
        J = grid.n_steps
        self._l2_mean = np.zeros(J + 1)
        self._l2_sqmean = np.zeros(J + 1)
        self._h1_path = np.zeros(n_paths)
        self._z_path = np.zeros(n_paths)

    def __call__(self, j, t, p, z, w):
        f = self.fem
        c = self.exact.p_coeff(t, w)
        e_l2 = np.maximum(
            fem_mod.fractional_norm_sq(f, p, 0) - 2.0 * c * (p @ self.m_cross)
            + c ** 2 * self.exact.profile_l2_sq, 0.0)
        self._l2_mean[j] = e_l2.mean()
        self._l2_sqmean[j] = (e_l2 ** 2).mean()
        if j < self.grid.n_steps:
            tau = self.grid.tau
            e_h1 = np.maximum(
                fem_mod.fractional_norm_sq(f, p, 1) - 2.0 * c * (p @ self.r_cross)
                + c ** 2 * self.exact.profile_h1_sq, 0.0)
            self._h1_path += tau * e_h1
            zc = self.exact.z_coeff(t)
            e_z = np.maximum(
                fem_mod.fractional_norm_sq(f, z, 0) - 2.0 * zc * (z @ self.m_cross)
                + zc ** 2 * self.exact.profile_l2_sq, 0.0)
            self._z_path += tau * e_z

    @staticmethod
    def _sqrt_with_se(mean: float, se_of_mean: float):
        root = math.sqrt(max(mean, 0.0))
        se = se_of_mean / (2.0 * root) if root > 0 else float("nan")
        return root, se

    def result(self) -> dict:
        P = self.n_paths
        j_star = int(np.argmax(self._l2_mean))
        m = self._l2_mean[j_star]
        var = max(self._l2_sqmean[j_star] - m ** 2, 0.0)
        sup_l2, sup_se = self._sqrt_with_se(m, math.sqrt(var / P))
        h1, h1_se = self._sqrt_with_se(
            float(self._h1_path.mean()), float(self._h1_path.std(ddof=1) / math.sqrt(P)))
        zn, z_se = self._sqrt_with_se(
            float(self._z_path.mean()), float(self._z_path.std(ddof=1) / math.sqrt(P)))
        return {
            "p_sup_l2": sup_l2, "p_sup_l2_se": sup_se, "p_sup_l2_argmax": j_star,
            "p_h1": h1, "p_h1_se": h1_se,
            "z_l2": zn, "z_l2_se": z_se,
        }


def error_norms(sol: BackwardSolution, exact: SeparableSolution, fem: FemSystem,
                grid: TimeGrid, batch: BrownianBatch) -> dict:
    """Continuous-norm errors of a stored solution against the exact pair.

    Returns sup-in-time L2 error of p, the space-time gradient-norm error of
    p, and the space-time L2 error of z, each with a standard error.
    """
    acc = ErrorAccumulator(fem, grid, exact, batch.n_paths)
    wvals = batch.values()
    J = grid.n_steps
    acc(J, grid.horizon, np.asarray(sol.p[:, J], dtype=float), None, wvals[:, J])
    for j in range(J):
        acc(j, grid.times[j], np.asarray(sol.p[:, j], dtype=float),
            np.asarray(sol.z[:, j], dtype=float), wvals[:, j])
    return acc.result()


def manufactured_errors(fem: FemSystem, grid: TimeGrid, batch: BrownianBatch,
                        a, beta: float, a_prime=None,
                        basis: Optional[RegressionBasis] = None, picard=None,
                        control_variate: bool = True) -> dict:
    """Solve the manufactured problem and accumulate errors without storing paths."""
    problem, exact = manufactured_problem(a, beta, fem, grid, a_prime=a_prime)
    acc = ErrorAccumulator(fem, grid, exact, batch.n_paths)
    solve_backward(problem, fem, batch, basis=basis, picard=picard,
                   control_variate=control_variate, store=False, observer=acc)
    return acc.result()


def manufactured_convergence(n_cells_list, grid: TimeGrid, batch: BrownianBatch,
                             a, beta: float, a_prime=None,
                             basis: Optional[RegressionBasis] = None) -> list:
    """Error rows over a mesh family on a common time grid and noise batch.

    Each row carries h, the three errors with standard errors, and observed
    orders against the previous row (None on the first).
    """
    rows = []
    prev = None
    for n_cells in n_cells_list:
        f = fem_mod.assemble(fem_mod.build_mesh(n_cells))
        res = manufactured_errors(f, grid, batch, a, beta, a_prime=a_prime, basis=basis)
        row = {"n_cells": n_cells, "h": 1.0 / n_cells}
        row.update(res)
        for key in ("p_sup_l2", "p_h1", "z_l2"):
            if prev is None:
                row[f"{key}_order"] = None
            else:
                ratio = prev[key] / row[key] if row[key] > 0 else float("nan")
                row[f"{key}_order"] = math.log(ratio) / math.log(prev["h"] / row["h"])
        rows.append(row)
        prev = row
    return rows


def _check_field_adapted(field, batch: BrownianBatch, probe: int, rng_seed: int = 0):
    """Permutation test: the field value at a step must not read later increments."""
    if not callable(field):
        return
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(batch.n_paths)
    tampered = batch.increments.copy()
    tampered[:, probe:] = tampered[perm][:, probe:]
    twin = BrownianBatch(grid=batch.grid, seed=batch.seed, increments=tampered)
    ref = np.asarray(field(batch, probe), dtype=float)
    got = np.asarray(field(twin, probe), dtype=float)
    if not np.array_equal(ref, got):
        raise ValueError("test field reads Brownian increments from its future")


def transposition_residual(sol: BackwardSolution, problem: BspdeProblem,
                           fem: FemSystem, grid: TimeGrid, batch: BrownianBatch,
                           *, g=None, sigma=None, v=None, j: int = 0,
                           return_sides: bool = False, check_adapted: bool = True):
    """Gap in the defining dual identity of the semi-discrete solution.

    Pairs the stored (p, z) and the driver against mild solutions built from
    the test fields: the forward convolution of sigma, the forward integral of
    g, and the semigroup flow of the time-j datum v.  All pairings are Monte
    Carlo averages of mass-matrix inner products; time integrals use the left
    endpoint.  Returns |lhs - rhs|, or (gap, lhs, rhs) with return_sides.
    """
    n = fem.mesh.nodes.size
    J = grid.n_steps
    if not 0 <= j < J:
        raise ValueError(f"level index must be in [0, {J}), got {j}")
    ev = SemigroupEvaluator(fem)
    decay = np.exp(-ev.eigenvalues * grid.tau)
    zero = np.zeros((1, n))
    g_at = _field_provider(g, batch, n) if g is not None else (lambda i: zero)
    s_at = _field_provider(sigma, batch, n) if sigma is not None else (lambda i: zero)
    if v is None:
        v_vals = np.zeros((1, n))
    elif callable(v):
        v_vals = np.atleast_2d(np.asarray(v(batch, j), dtype=float))
    else:
        v_vals = np.atleast_2d(np.asarray(v, dtype=float))
    if check_adapted:
        probe = max(j, J // 2)
        for field in (g, sigma):
            if field is not None:
                _check_field_adapted(field, batch, probe)
        if callable(v):
            _check_field_adapted(v, batch, j)

    wvals = batch.values()
    tau = grid.tau

    def pair(x, y):
        # E <x, y> in L2(O): rowwise mass inner product, broadcasting rows
        prod = np.sum(np.asarray(x) * fem.mass_apply(np.asarray(y)), axis=-1)
        return float(np.mean(prod))

    s0 = np.zeros((batch.n_paths, n))
    s1 = np.zeros((1, n))
    v_flow = None
    lhs = 0.0
    rhs = 0.0
    for i in range(J):
        g_i = g_at(i)
        s_i = s_at(i)
        if i == j:
            v_flow = np.broadcast_to(v_vals, (v_vals.shape[0], n)).copy()
            lhs += pair(np.asarray(sol.p[:, j], dtype=float), v_vals)
        if i >= j:
            p_i = np.asarray(sol.p[:, i], dtype=float)
            z_i = np.asarray(sol.z[:, i], dtype=float)
            lhs += tau * pair(p_i, g_i) + tau * pair(z_i, s_i)
            test_i = s0 + s1 + v_flow
            f_i = np.asarray(problem.driver(grid.times[i], p_i, z_i, wvals[:, i]),
                             dtype=float)
            if np.any(f_i):
                rhs += tau * pair(f_i, test_i)
        # one implicit-exponential step for all three mild pieces
        s0 = ev.from_modal(decay * ev.to_modal(s0 + s_i * batch.increments[:, i][:, None]))
        s1 = ev.from_modal(decay * ev.to_modal(s1 + tau * g_i))
        if v_flow is not None:
            v_flow = ev.from_modal(decay * ev.to_modal(v_flow))
    terminal = np.asarray(sol.p[:, J], dtype=float)
    rhs += pair(s0 + s1 + v_flow, terminal)
    gap = abs(lhs - rhs)
    if return_sides:
        return gap, lhs, rhs
    return gap
