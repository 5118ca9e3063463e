"""Acceptance gate: one check per shipping criterion, run at full scale.

Each test prints a single verdict line (tag, PASS/FAIL, measured numbers)
so a plain ``pytest -s tests/test_acceptance.py`` reads as a report.  The
heavy criteria (A2, A3) train the full policy stacks and take ten to
twenty minutes each on one core; everything else is seconds to a couple
of minutes.  Tolerances live here on purpose: this file is the contract,
the module tests are the debugging aid.
"""

import time

import numpy as np
import pytest

from bspdelab import fem as fem_mod
from bspdelab.backward import (BspdeProblem, manufactured_convergence,
                               solve_backward, transposition_residual)
from bspdelab.brownian import build_time_grid, coarsen_batch, sample_brownian
from bspdelab.experiments import run_experiment
from bspdelab.forward import LinearSpdeCoeffs
from bspdelab.lq import (LqProblem, TrainConfig, build_policy_stack,
                         duality_check, loss, loss_and_grads,
                         optimality_residual, train)
from bspdelab.semigroup import (SemigroupEvaluator, adjoint_pairing_gap,
                                energy_balance)

from oracles import energy_sides_single_mode, lq_descent_oracle
from test_mlp import _fd_check


def _verdict(tag, ok, detail):
    line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line, flush=True)
    return line


def _fem(n_cells):
    return fem_mod.assemble(fem_mod.build_mesh(n_cells))


# --------------------------------------------------------------- A1


def test_a1_manufactured_solution_rates():
    # a(t) = 1 + t/2, beta = 1, J = 256, degree-4 regression, 2e4 paths.
    # Band [0.8, 1.3] on the observed orders of all three error columns.
    grid = build_time_grid(1.0, 256)
    batch = sample_brownian(grid, 20_000, seed=20240811)
    rows = manufactured_convergence([8, 16, 32], grid, batch,
                                    a=lambda t: 1.0 + 0.5 * t, beta=1.0,
                                    a_prime=lambda t: 0.5)
    orders = {key: [row[f"{key}_order"] for row in rows[1:]]
              for key in ("p_sup_l2", "p_h1", "z_l2")}
    ok = all(0.8 <= o <= 1.3 for col in orders.values() for o in col)
    detail = ", ".join(
        f"{key} orders " + "/".join(f"{o:.2f}" for o in col)
        for key, col in orders.items()) + ", band [0.8, 1.3]"
    line = _verdict("A1", ok, detail)
    assert ok, line


# --------------------------------------------------------------- A2 / A3


def _table_criterion(tag, target, seed):
    cfg = {"kind": "lq-convergence", "seed": seed,
           "params": {"mesh_cells": [4, 8, 16], "reference_cells": 32,
                      "n_steps": 50, "horizon": 0.2, "nu": 1e-2,
                      "alpha": [1.0, 1.0, 1.0, 0.1], "target": target,
                      "iterations": 2000, "batch_size": 128, "lr": 5e-3,
                      "lr_final": 5e-4, "hidden": [48, 48],
                      "eval_paths": 100_000,
                      "chunk_size": 4096}}
    t0 = time.time()
    record = run_experiment(cfg)
    wall = time.time() - t0
    rows = record["results"]["rows"]
    errors = [row["control_error"] for row in rows]
    orders = [row["control_order"] for row in rows[1:]]
    decreasing = all(a > b for a, b in zip(errors, errors[1:]))
    in_band = all(0.65 <= o <= 1.35 for o in orders)
    ok = decreasing and in_band and wall < 3600.0
    detail = ("control errors " + "/".join(f"{e:.3e}" for e in errors)
              + ", orders " + "/".join(f"{o:.2f}" for o in orders)
              + f", band [0.65, 1.35], {wall:.0f}s")
    line = _verdict(tag, ok, detail)
    assert ok, line


def test_a2_control_rates_deterministic_target():
    _table_criterion("A2", "singular-deterministic", seed=1)


def test_a3_control_rates_stochastic_target():
    _table_criterion("A3", "singular-stochastic", seed=2)


# --------------------------------------------------------------- A4


def test_a4_energy_identity_eigenmode():
    f = _fem(8)
    ev = SemigroupEvaluator(f)
    mode = ev.decomp.modes[:, 0]
    lam = float(ev.eigenvalues[0])
    fails = []
    gaps = {}
    for seed in (41, 42, 43):
        for n_steps in (64, 256):
            grid = build_time_grid(1.0, n_steps)
            batch = sample_brownian(grid, 20_000, seed=seed)
            bal = energy_balance(ev, grid, mode, batch, gamma=0)
            rel = abs(bal.lhs - bal.rhs) / bal.rhs
            noise = 3.0 * (bal.lhs_se + bal.rhs_se) / bal.rhs
            lhs_e, rhs_e = energy_sides_single_mode(lam, 1.0, grid.tau, n_steps)
            budget = 1.25 * abs(lhs_e - rhs_e) / rhs_e
            gaps[seed, n_steps] = rel
            if rel > max(noise, budget):
                fails.append((seed, n_steps, rel, max(noise, budget)))
    shrinks = all(gaps[s, 64] > gaps[s, 256] for s in (41, 42, 43))
    ok = not fails and shrinks
    coarse = max(gaps[s, 64] for s in (41, 42, 43))
    fine = max(gaps[s, 256] for s in (41, 42, 43))
    detail = (f"max rel gap {coarse:.2e} (J=64) -> {fine:.2e} (J=256), "
              f"bound violations {fails if fails else 'none'}, "
              f"shrinks on all seeds: {shrinks}")
    line = _verdict("A4", ok, detail)
    assert ok, line


# --------------------------------------------------------------- A5


def test_a5_mild_map_adjointness():
    f = _fem(8)
    ev = SemigroupEvaluator(f)
    grid = build_time_grid(1.0, 32)
    batch = sample_brownian(grid, 1, seed=0)
    n = f.mesh.nodes.size
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(50):
        v = rng.standard_normal((grid.n_steps, n))
        w = rng.standard_normal((grid.n_steps, n))
        worst = max(worst, float(adjoint_pairing_gap(ev, grid, v, w, batch).max()))
    ok = worst <= 1e-10
    line = _verdict("A5", ok, f"max pairing gap {worst:.2e} over 50 random "
                              "piecewise-constant pairs, bound 1e-10")
    assert ok, line


# --------------------------------------------------------------- A6


def test_a6_eigenvalues_match_closed_form():
    worst = 0.0
    for n_cells in (4, 8, 16, 32):
        got = fem_mod.spectral(_fem(n_cells)).eigenvalues
        want = fem_mod.closed_form_eigenvalues(n_cells)
        worst = max(worst, float(np.max(np.abs(got - want) / np.abs(want))))
    ok = worst <= 1e-10
    line = _verdict("A6", ok, f"max relative eigenvalue error {worst:.2e} over "
                              "meshes 4/8/16/32, bound 1e-10")
    assert ok, line


# --------------------------------------------------------------- A7


def test_a7_network_gradients():
    shapes = [[3, 8, 8, 1], [2, 5, 1], [4, 6, 6, 6, 2], [1, 3, 1], [5, 10, 1]]
    worst_net = max(_fd_check(shapes[k % len(shapes)], seed=900 + k)
                    for k in range(20))

    # end-to-end: loss gradient of a tiny control problem, h = 1/2, J = 3
    f = _fem(2)
    grid = build_time_grid(0.3, 3)
    problem = LqProblem(
        nu=0.05, coeffs=LinearSpdeCoeffs(1.0, 1.0, 1.0, 0.1),
        y_d=lambda t, x, w: np.ones((len(np.atleast_1d(w)), len(x))),
        grid=grid, fem=f, target_depends_on_noise=False)
    stack = build_policy_stack(3, hidden=(2,), seed=6)
    batch = sample_brownian(grid, 4, seed=13)
    _, grads = loss_and_grads(problem, stack, batch)
    rng = np.random.default_rng(0)
    worst_e2e = 0.0
    for j, net in enumerate(stack.nets):
        for arr, garr in zip(net.parameters(), grads[j].parameters()):
            flat, gflat = arr.reshape(-1), garr.reshape(-1)
            for k in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                eps = 1e-6 * max(1.0, abs(flat[k]))
                old = flat[k]
                flat[k] = old + eps
                hi = loss(problem, stack, batch)
                flat[k] = old - eps
                lo = loss(problem, stack, batch)
                flat[k] = old
                fd = (hi - lo) / (2 * eps)
                scale = max(abs(fd), abs(gflat[k]), 1e-8)
                worst_e2e = max(worst_e2e, abs(fd - gflat[k]) / scale)
    ok = worst_net <= 1e-5 and worst_e2e <= 1e-4
    line = _verdict("A7", ok, f"net FD mismatch {worst_net:.2e} over 20 nets "
                              f"(bound 1e-5), end-to-end {worst_e2e:.2e} "
                              "(bound 1e-4)")
    assert ok, line


# --------------------------------------------------------------- A8


def _singular_target(stochastic):
    if stochastic:
        def y_d(t, x, w):
            return (1.0 + np.atleast_1d(w)[:, None] ** 2) * (x ** -0.49)[None, :]
    else:
        def y_d(t, x, w):
            return np.broadcast_to(x ** -0.49,
                                   (len(np.atleast_1d(w)), len(x))).copy()
    return y_d


def _tracking_problem(n_cells, n_steps, noisy_dynamics=True,
                      stochastic_target=False):
    a2, a3 = (1.0, 0.1) if noisy_dynamics else (0.0, 0.0)
    return LqProblem(nu=1e-2, coeffs=LinearSpdeCoeffs(1.0, 1.0, a2, a3),
                     y_d=_singular_target(stochastic_target),
                     grid=build_time_grid(0.2, n_steps), fem=_fem(n_cells),
                     target_depends_on_noise=stochastic_target)


def test_a8_first_order_optimality():
    # deterministic reduction: descent iterate must nearly satisfy the
    # adjoint-based optimality condition
    det = _tracking_problem(8, 200, noisy_dynamics=False)
    u_star = lq_descent_oracle(det, iters=600)
    res_det = optimality_residual(det, u_star,
                                  sample_brownian(det.grid, 8, seed=3))

    # trained policies on the noisy problem, full training budget
    sto = _tracking_problem(8, 50)
    stack = build_policy_stack(50, hidden=(48, 48), seed=7)
    stack, _ = train(sto, stack, TrainConfig(iterations=2000, batch_size=128,
                                             lr=5e-3, lr_final=5e-4, seed=7,
                                             hidden=(48, 48)))
    res_tr = optimality_residual(sto, stack,
                                 sample_brownian(sto.grid, 20_000,
                                                 seed=7_654_321))
    ok = res_det <= 0.02 and res_tr <= 0.10
    line = _verdict("A8", ok, f"optimality residual {res_det:.4f} deterministic "
                              f"(bound 0.02), {res_tr:.4f} trained "
                              "(bound 0.10)")
    assert ok, line


# --------------------------------------------------------------- A9


def test_a9_duality_gap():
    f = _fem(8)
    profile = np.sin(np.pi * f.mesh.nodes)
    bump = f.mesh.nodes * (1.0 - f.mesh.nodes)

    # deterministic fields, noise-free coefficients
    grid = build_time_grid(0.3, 200)
    g = np.outer(np.cos(grid.times[:-1]), profile)
    v = np.outer(1.0 + grid.times[:-1], bump)
    gap_det = duality_check(f, grid, LinearSpdeCoeffs(1.0, 1.0, 0.0, 0.0),
                            g, v, sample_brownian(grid, 8, seed=11))

    # stochastic fields, full coefficients, coupled time refinement
    coeffs = LinearSpdeCoeffs(1.0, 1.0, 1.0, 0.1)
    master = sample_brownian(build_time_grid(0.2, 200), 20_000, seed=12,
                             antithetic=True)

    def g_field(b, i):
        return (1.0 + 0.5 * np.cos(b.value_at(i)))[:, None] * profile[None, :]

    def v_field(b, i):
        return (1.0 + 0.2 * b.value_at(i))[:, None] * profile[None, :]

    gaps = []
    for factor in (4, 2, 1):
        sub = coarsen_batch(master, factor) if factor > 1 else master
        gaps.append(duality_check(f, sub.grid, coeffs, g_field, v_field, sub))
    ok = gap_det <= 0.01 and gaps[0] > gaps[1] > gaps[2]
    detail = (f"deterministic gap {gap_det:.2e} at J=200 (bound 0.01), "
              "stochastic gaps " + "/".join(f"{x:.2e}" for x in gaps)
              + " over J=50/100/200")
    line = _verdict("A9", ok, detail)
    assert ok, line


# --------------------------------------------------------------- A10


def test_a10_transposition_identity():
    f = _fem(8)
    profile = fem_mod.l2_project(f, lambda x: np.sin(np.pi * x))

    def terminal(x, w):
        return (1.0 + 0.5 * np.atleast_1d(w))[:, None] * np.sin(np.pi * x)[None, :]

    def g_field(b, i):
        return (1.0 + 0.5 * b.value_at(i))[:, None] * profile[None, :]

    def s_field(b, i):
        return np.cos(b.value_at(i))[:, None] * profile[None, :]

    master = sample_brownian(build_time_grid(1.0, 256), 100_000, seed=21)
    rels = []
    for factor in (4, 2, 1):
        sub = coarsen_batch(master, factor) if factor > 1 else master
        problem = BspdeProblem(driver=lambda t, p, z, w: np.zeros_like(p),
                               m_lip=0.0, terminal=terminal, grid=sub.grid)
        sol = solve_backward(problem, f, sub)
        gap, lhs, rhs = transposition_residual(sol, problem, f, sub.grid, sub,
                                               g=g_field, sigma=s_field,
                                               v=profile, return_sides=True)
        rels.append(gap / max(abs(lhs), abs(rhs)))
        del sol
    ok = rels[2] <= 0.05 and rels[0] > rels[1] > rels[2]
    detail = ("relative residual " + "/".join(f"{x:.2e}" for x in rels)
              + " over J=64/128/256 at 1e5 paths, bound 0.05 at J=256")
    line = _verdict("A10", ok, detail)
    assert ok, line
