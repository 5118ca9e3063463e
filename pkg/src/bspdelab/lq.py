"""Tracking-type stochastic LQ control with per-step neural policies.

The control at step j is a network of the spatial coordinate and the Brownian
increments seen so far, evaluated at every interior node.  Training uses the
exact pathwise gradient of the discrete loss: the per-step implicit solve is
self-adjoint, so reverse accumulation reuses the factored operator.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import fem as fem_mod
from . import mlp
from .backward import (
    BspdeProblem,
    RegressionBasis,
    project_terminal as _project_field,
    solve_backward,
)
from .brownian import BrownianBatch, TimeGrid, sample_brownian
from .fem import FemSystem, NumericFailure
from .forward import LinearSpdeCoeffs, solve_state
from .semigroup import _field_provider

# offset separating evaluation streams from per-iteration training streams
_EVAL_STREAM_OFFSET = 999_999_937


@dataclasses.dataclass
class LqProblem:
    """Tracking loss (1/2)||Y - y_d||^2 + (nu/2)||U||^2 on one mesh and grid.

    y_d(t, x, w) returns per-path point values (n_paths, len(x)); it is
    L2-projected onto the FE space step by step.  Set
    target_depends_on_noise=False for deterministic targets to evaluate the
    projection once per step instead of once per (step, batch).
    """

    nu: float
    coeffs: LinearSpdeCoeffs
    y_d: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    grid: TimeGrid
    fem: FemSystem
    target_depends_on_noise: bool = True
    quadrature_order: int = 4

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        self._target_cache = {}

    def target_nodal(self, j: int, w: np.ndarray) -> np.ndarray:
        """Projected target at step j: (n_paths, n) or (1, n) when deterministic."""
        t = float(self.grid.times[j])
        if not self.target_depends_on_noise:
            if j not in self._target_cache:
                vals = _project_field(self.fem, lambda x, _w: self.y_d(t, x, _w),
                                      np.zeros(1), self.quadrature_order)
                self._target_cache[j] = vals
            return self._target_cache[j]
        return _project_field(self.fem, lambda x, _w: self.y_d(t, x, _w),
                              np.asarray(w, dtype=float), self.quadrature_order)


@dataclasses.dataclass
class PolicyStack:
    """One net per step; Net_j maps (x, dW_0..dW_{j-1}) to a scalar control value."""

    nets: List[mlp.MlpNet]

    def __post_init__(self):
        for j, net in enumerate(self.nets):
            if net.widths[0] != 1 + j or net.widths[-1] != 1:
                raise ValueError(
                    f"net {j} must map {1 + j} inputs to 1 output, has widths {net.widths}")

    @property
    def n_steps(self) -> int:
        return len(self.nets)


def build_policy_stack(n_steps: int, hidden: Sequence[int] = (32, 32), seed: int = 0,
                       dtype=np.float64) -> PolicyStack:
    nets = [mlp.init([1 + j, *hidden, 1], seed=(seed, j), dtype=dtype)
            for j in range(n_steps)]
    return PolicyStack(nets=nets)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hidden: tuple = (32, 32)
    lr_final: Optional[float] = None

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.lr_final is not None and not 0.0 < self.lr_final <= self.lr:
            raise ValueError("lr_final must lie in (0, lr]")


def _policy_features(nodes: np.ndarray, increments: np.ndarray, j: int,
                     dtype=np.float64) -> np.ndarray:
    """Rows (path-major, node-minor): [x_i, dW_0, ..., dW_{j-1}]."""
    n_paths = increments.shape[0]
    n = nodes.size
    feats = np.empty((n_paths * n, 1 + j), dtype=dtype)
    feats[:, 0] = np.tile(nodes, n_paths)
    if j:
        feats[:, 1:] = np.repeat(increments[:, :j], n, axis=0)
    return feats


def eval_policy(stack: PolicyStack, fem: FemSystem, batch: BrownianBatch) -> np.ndarray:
    """Control field (n_paths, J, n); step j reads only increments before j."""
    J = batch.grid.n_steps
    if stack.n_steps != J:
        raise ValueError(f"stack has {stack.n_steps} nets but the grid has {J} steps")
    nodes = fem.mesh.nodes
    n = nodes.size
    out = np.empty((batch.n_paths, J, n))
    for j, net in enumerate(stack.nets):
        feats = _policy_features(nodes, batch.increments, j, dtype=net.dtype)
        out[:, j, :] = np.asarray(mlp.forward(net, feats), dtype=float).reshape(
            batch.n_paths, n)
        net._cache = None    # wide eval batches: keeping 50 caches is gigabytes
    return out


def _control_array(problem: LqProblem, control, batch: BrownianBatch) -> np.ndarray:
    if isinstance(control, PolicyStack):
        return eval_policy(control, problem.fem, batch)
    arr = np.asarray(control, dtype=float)
    J, n = problem.grid.n_steps, problem.fem.mesh.nodes.size
    if arr.ndim == 2 and arr.shape == (J, n):
        return np.broadcast_to(arr, (batch.n_paths, J, n))
    if arr.ndim == 3 and arr.shape[1:] == (J, n):
        return arr
    raise ValueError(f"control shape {arr.shape} incompatible with (J={J}, n={n})")


def _tracking_terms(problem: LqProblem, u: np.ndarray, batch: BrownianBatch):
    """State trajectory plus per-step squared-norm means entering the loss."""
    f, grid = problem.fem, problem.grid
    st = solve_state(f, grid, problem.coeffs, u, batch)
    wvals = batch.values()
    track = np.empty(grid.n_steps)
    penalty = np.empty(grid.n_steps)
    for j in range(grid.n_steps):
        yd = problem.target_nodal(j, wvals[:, j])
        diff = st.values[:, j, :] - yd
        track[j] = float(np.mean(fem_mod.fractional_norm_sq(f, diff, 0)))
        penalty[j] = float(np.mean(fem_mod.fractional_norm_sq(f, u[:, j, :], 0)))
    return st, track, penalty


def loss(problem: LqProblem, control, batch: BrownianBatch) -> float:
    """Monte Carlo loss of a control (PolicyStack or array) on a batch."""
    u = _control_array(problem, control, batch)
    _, track, penalty = _tracking_terms(problem, u, batch)
    tau = problem.grid.tau
    return float(0.5 * tau * track.sum() + 0.5 * problem.nu * tau * penalty.sum())


def train_batch_seed(seed: int, iteration: int) -> int:
    """Stream key for one training iteration; distinct from evaluation streams."""
    return seed * 1_000_003 + iteration


def loss_and_grads(problem: LqProblem, stack: PolicyStack, batch: BrownianBatch):
    """Exact pathwise gradient of the batch loss in every net parameter.

    The reverse sweep through Y_{j+1} = B^{-1} M (a_j Y_j + b_j U_j) reuses the
    factored B = M + tau A; each policy net then receives its summed upstream.
    Returns (loss value, per-net gradient list).
    """
    f, grid = problem.fem, problem.grid
    if stack.n_steps != grid.n_steps:
        raise ValueError(f"stack has {stack.n_steps} nets, grid has {grid.n_steps} steps")
    tau = grid.tau
    J = grid.n_steps
    nodes = f.mesh.nodes
    n = nodes.size
    alpha = problem.coeffs.sample(grid)
    P = batch.n_paths
    wvals = batch.values()
    a = 1.0 + tau * alpha[0] + alpha[2] * batch.increments   # (P, J)
    b = tau * alpha[1] + alpha[3] * batch.increments
    feats = []
    controls = []
    ys = np.empty((J, P, n))   # Y at steps 0..J-1; Y_J never enters the loss
    targets = []
    y = np.zeros((P, n))
    total = 0.0
    for j in range(J):
        ys[j] = y
        ft = _policy_features(nodes, batch.increments, j, dtype=stack.nets[j].dtype)
        u = np.asarray(mlp.forward(stack.nets[j], ft), dtype=float).reshape(P, n)
        feats.append(ft)
        controls.append(u)
        yd = problem.target_nodal(j, wvals[:, j])
        targets.append(yd)
        diff = y - yd
        total += 0.5 * tau * float(np.mean(fem_mod.fractional_norm_sq(f, diff, 0)))
        total += 0.5 * problem.nu * tau * float(
            np.mean(fem_mod.fractional_norm_sq(f, u, 0)))
        rhs = y * a[:, j][:, None] + u * b[:, j][:, None]
        if not np.all(np.isfinite(rhs)):
            raise NumericFailure(f"state recursion left float range at step {j}")
        y = f.solve_shifted(tau, f.mass_apply(rhs))
    if not np.isfinite(total):
        raise NumericFailure("non-finite loss")

    grads: List[Optional[mlp.MlpGrads]] = [None] * J
    ghat = np.zeros((P, n))   # dL/dY_{j+1}; the 1/P of the batch mean rides along
    for j in range(J - 1, -1, -1):
        mj = f.mass_apply(f.solve_shifted(tau, ghat))
        du = (problem.nu * tau / P) * f.mass_apply(controls[j]) \
            + b[:, j][:, None] * mj
        upstream = du.reshape(P * n, 1).astype(stack.nets[j].dtype)
        grads[j] = mlp.backward(stack.nets[j], feats[j], upstream)
        direct = (tau / P) * f.mass_apply(ys[j] - targets[j])
        ghat = direct + a[:, j][:, None] * mj
    return float(total), grads


def train(problem: LqProblem, stack: PolicyStack, config: TrainConfig,
          batch_source: Optional[Callable[[int], BrownianBatch]] = None):
    """Adam on the exact pathwise loss gradient; returns (stack, loss trace).

    Each iteration draws a fresh batch from the stream keyed by
    train_batch_seed(config.seed, iteration) unless batch_source overrides it.
    With lr_final set the step size follows a cosine decay from lr down to
    lr_final; the late small steps shrink the stationary noise ball, which is
    what the optimality-residual diagnostics respond to.
    """
    if stack.n_steps != problem.grid.n_steps:
        raise ValueError(
            f"stack has {stack.n_steps} nets, grid has {problem.grid.n_steps} steps")
    if batch_source is None:
        grid = problem.grid
        def batch_source(it):
            return sample_brownian(grid, config.batch_size,
                                   seed=train_batch_seed(config.seed, it))
    states = [mlp.init_adam(net, lr=config.lr, beta1=config.beta1,
                            beta2=config.beta2, eps=config.eps)
              for net in stack.nets]
    schedule = None
    if config.lr_final is not None and config.iterations > 1:
        phase = np.pi * np.arange(config.iterations) / (config.iterations - 1)
        schedule = config.lr_final + 0.5 * (config.lr - config.lr_final) * (
            1.0 + np.cos(phase))
    trace = np.empty(config.iterations)
    for it in range(config.iterations):
        if schedule is not None:
            for state in states:
                state.lr = float(schedule[it])
        batch = batch_source(it)
        try:
            total, grads = loss_and_grads(problem, stack, batch)
        except NumericFailure as exc:
            raise NumericFailure(f"training diverged at iteration {it}: {exc}") from exc
        trace[it] = total
        for net, state, g in zip(stack.nets, states, grads):
            mlp.adam_step(state, net, g)
    return stack, trace


def _step_index(grid: TimeGrid, t: float) -> int:
    j = int(round(t / grid.tau))
    return min(max(j, 0), grid.n_steps - 1)


def optimality_residual(problem: LqProblem, control, batch: BrownianBatch,
                        basis: Optional[RegressionBasis] = None, *,
                        return_parts: bool = False):
    """Residual of the first-order condition U = -(1/nu)(alpha1 P + alpha3 Z).

    (P, Z) solves the adjoint backward equation with zero terminal and driver
    alpha0 p + (Y - y_d) + alpha2 z along the state of the given control; the
    returned value is relative to ||U|| in the space-time norm when that is
    positive.
    """
    f, grid = problem.fem, problem.grid
    tau = grid.tau
    u = _control_array(problem, control, batch)
    st = solve_state(f, grid, problem.coeffs, u, batch)
    wvals = batch.values()
    targets = [problem.target_nodal(j, wvals[:, j]) for j in range(grid.n_steps)]
    alpha = problem.coeffs.sample(grid)

    def driver(t, p, z, w):
        j = _step_index(grid, t)
        return alpha[0, j] * p + (st.values[:, j, :] - targets[j]) + alpha[2, j] * z

    m_lip = float(np.max(np.abs(alpha[0])) + np.max(np.abs(alpha[2])))
    adjoint = BspdeProblem(
        driver=driver, m_lip=m_lip,
        terminal=lambda x, w: np.zeros((len(np.atleast_1d(w)), len(x))), grid=grid)
    sol = solve_backward(adjoint, f, batch, basis=basis)
    res_sq = 0.0
    norm_sq = 0.0
    for j in range(grid.n_steps):
        mismatch = u[:, j, :] + (alpha[1, j] * sol.p[:, j, :]
                                 + alpha[3, j] * sol.z[:, j, :]) / problem.nu
        res_sq += tau * float(np.mean(fem_mod.fractional_norm_sq(f, mismatch, 0)))
        norm_sq += tau * float(np.mean(fem_mod.fractional_norm_sq(f, u[:, j, :], 0)))
    residual = np.sqrt(res_sq)
    control_norm = np.sqrt(norm_sq)
    rel = residual / control_norm if control_norm > 0 else residual
    if return_parts:
        return rel, residual, control_norm
    return rel


def duality_check(fem: FemSystem, grid: TimeGrid, coeffs: LinearSpdeCoeffs,
                  g, v, batch: BrownianBatch,
                  basis: Optional[RegressionBasis] = None, *,
                  floor: float = 1e-30, return_sides: bool = False):
    """Relative gap between the forward and backward pairings.

    lhs sums tau E<alpha1 p + alpha3 z, v> with (p, z) the zero-terminal
    backward solution driven by alpha0 p + g + alpha2 z; rhs sums
    tau E<g, y> with y the state driven by control v.
    """
    n = fem.mesh.nodes.size
    g_at = _field_provider(g, batch, n)
    v_at = _field_provider(v, batch, n)
    alpha = coeffs.sample(grid)

    def driver(t, p, z, w):
        j = _step_index(grid, t)
        return alpha[0, j] * p + g_at(j) + alpha[2, j] * z

    m_lip = float(np.max(np.abs(alpha[0])) + np.max(np.abs(alpha[2])))
    problem = BspdeProblem(
        driver=driver, m_lip=m_lip,
        terminal=lambda x, w: np.zeros((len(np.atleast_1d(w)), len(x))), grid=grid)
    sol = solve_backward(problem, fem, batch, basis=basis)
    controls = np.empty((batch.n_paths, grid.n_steps, n))
    for j in range(grid.n_steps):
        controls[:, j, :] = v_at(j)
    st = solve_state(fem, grid, coeffs, controls, batch)
    lhs = 0.0
    rhs = 0.0
    tau = grid.tau
    for j in range(grid.n_steps):
        paired = alpha[1, j] * sol.p[:, j, :] + alpha[3, j] * sol.z[:, j, :]
        lhs += tau * float(np.mean(np.sum(paired * fem.mass_apply(v_at(j)), axis=-1)))
        rhs += tau * float(np.mean(np.sum(g_at(j) * fem.mass_apply(st.values[:, j, :]),
                                          axis=-1)))
    gap = abs(lhs - rhs) / max(abs(lhs), abs(rhs), floor)
    if return_sides:
        return gap, lhs, rhs
    return gap


@dataclasses.dataclass
class ConvergenceReport:
    mesh_cells: List[int]
    reference_cells: int
    errors_u: List[float]
    errors_y: List[float]
    orders_u: List[Optional[float]]
    orders_y: List[Optional[float]]
    eval_paths: int
    train_seed: int
    eval_seed: int
    timings: dict
    monotone_u: bool
    monotone_y: bool
    final_losses: List[float]


def _orders(errors: Sequence[float]) -> List[Optional[float]]:
    out: List[Optional[float]] = [None]
    for prev, cur in zip(errors[:-1], errors[1:]):
        out.append(float(np.log2(prev / cur)) if prev > 0 and cur > 0 else None)
    return out


def convergence_study(problem_factory: Callable[[FemSystem], LqProblem],
                      mesh_cells: Sequence[int], reference_cells: int,
                      config: TrainConfig, eval_paths: int,
                      eval_seed: Optional[int] = None,
                      chunk_size: int = 2048) -> ConvergenceReport:
    """Train per mesh, then compare against the reference policy on one batch.

    All meshes share the training noise streams and the network init seed, and
    the evaluation pass reuses one fresh batch across meshes (common random
    numbers); coarse controls and states are prolonged to the reference mesh
    for the space-time norms.
    """
    cells = list(mesh_cells)
    if any(reference_cells <= c for c in cells):
        raise ValueError("reference mesh must be strictly finer than every study mesh")
    if any(reference_cells % c for c in cells):
        raise ValueError("study meshes must nest into the reference mesh")
    if eval_seed is None:
        eval_seed = config.seed + _EVAL_STREAM_OFFSET
    timings = {}
    stacks = {}
    fems = {}
    losses = {}
    for c in cells + [reference_cells]:
        f = fem_mod.assemble(fem_mod.build_mesh(c))
        fems[c] = f
        problem = problem_factory(f)
        stack = build_policy_stack(problem.grid.n_steps, hidden=config.hidden,
                                   seed=config.seed)
        t0 = time.perf_counter()
        _, trace = train(problem, stack, config)
        timings[f"train_{c}"] = time.perf_counter() - t0
        stacks[c] = stack
        losses[c] = float(trace[-1])

    ref_problem = problem_factory(fems[reference_cells])
    grid = ref_problem.grid
    J = grid.n_steps
    tau = grid.tau
    t0 = time.perf_counter()
    err_u_sq = {c: 0.0 for c in cells}
    err_y_sq = {c: 0.0 for c in cells}
    eval_batch = sample_brownian(grid, eval_paths, seed=eval_seed)
    done = 0
    while done < eval_paths:
        take = min(chunk_size, eval_paths - done)
        incr = eval_batch.increments[done:done + take]
        sub = BrownianBatch(grid=grid, seed=eval_seed, increments=incr)
        ref_u = eval_policy(stacks[reference_cells], fems[reference_cells], sub)
        ref_y = solve_state(fems[reference_cells], grid, ref_problem.coeffs,
                            ref_u, sub).values
        for c in cells:
            u_c = eval_policy(stacks[c], fems[c], sub)
            y_c = solve_state(fems[c], grid, ref_problem.coeffs, u_c, sub).values
            for j in range(J):
                du = fem_mod.prolong(u_c[:, j, :], c, reference_cells) - ref_u[:, j, :]
                dy = fem_mod.prolong(y_c[:, j, :], c, reference_cells) - ref_y[:, j, :]
                err_u_sq[c] += tau * float(np.sum(fem_mod.fractional_norm_sq(
                    fems[reference_cells], du, 0)))
                err_y_sq[c] += tau * float(np.sum(fem_mod.fractional_norm_sq(
                    fems[reference_cells], dy, 0)))
        done += take
    timings["evaluation"] = time.perf_counter() - t0
    errors_u = [float(np.sqrt(err_u_sq[c] / eval_paths)) for c in cells]
    errors_y = [float(np.sqrt(err_y_sq[c] / eval_paths)) for c in cells]
    return ConvergenceReport(
        mesh_cells=cells, reference_cells=reference_cells,
        errors_u=errors_u, errors_y=errors_y,
        orders_u=_orders(errors_u), orders_y=_orders(errors_y),
        eval_paths=eval_paths, train_seed=config.seed, eval_seed=eval_seed,
        timings=timings,
        monotone_u=all(a > b for a, b in zip(errors_u[:-1], errors_u[1:])),
        monotone_y=all(a > b for a, b in zip(errors_y[:-1], errors_y[1:])),
        final_losses=[losses[c] for c in cells + [reference_cells]])
