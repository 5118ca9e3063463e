"""Named experiments behind the CLI: validation, execution, persistence.

Configs are plain JSON objects checked against per-kind schemas (unknown keys
are errors).  run_experiment returns the science; records add the config
snapshot, seeds, version, and timings so a run can be replayed bit-for-bit.
"""

from __future__ import annotations

import json
import os
import time
from typing import List

import jsonschema
import numpy as np

from . import __version__
from . import fem as fem_mod
from .backward import RegressionBasis, manufactured_convergence
from .brownian import build_time_grid, coarsen_batch, sample_brownian
from .forward import LinearSpdeCoeffs
from .lq import (
    LqProblem,
    TrainConfig,
    build_policy_stack,
    convergence_study,
    duality_check,
    eval_policy,
    optimality_residual,
    train,
)

KINDS = ("fem-selftest", "manufactured-convergence", "lq-train",
         "lq-convergence", "duality-check")

_EVAL_SEED_OFFSET = 999_999_937


class ConfigError(ValueError):
    """Configuration rejected before any computation; .path names the field."""

    def __init__(self, message, path=""):
        super().__init__(message)
        self.path = path


_POSITIVE_INT = {"type": "integer", "minimum": 1}
_MESH = {"type": "integer", "minimum": 2}
_NUMBER = {"type": "number"}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_ALPHA = {"type": "array", "items": _NUMBER, "minItems": 4, "maxItems": 4}

_TRAIN_FIELDS = {
    "iterations": _POSITIVE_INT,
    "batch_size": _POSITIVE_INT,
    "lr": _POSITIVE,
    "lr_final": _POSITIVE,
    "hidden": {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
}

_LQ_FIELDS = {
    "n_steps": _POSITIVE_INT,
    "horizon": _POSITIVE,
    "nu": _POSITIVE,
    "alpha": _ALPHA,
    "target": {"enum": ["singular-deterministic", "singular-stochastic", "constant"]},
    "target_value": _NUMBER,
    **_TRAIN_FIELDS,
}

_PARAM_SCHEMAS = {
    "fem-selftest": {
        "type": "object", "additionalProperties": False,
        "required": ["n_cells_list"],
        "properties": {
            "n_cells_list": {"type": "array", "items": _MESH, "minItems": 1},
        },
    },
    "manufactured-convergence": {
        "type": "object", "additionalProperties": False,
        "required": ["n_cells_list", "n_steps"],
        "properties": {
            "n_cells_list": {"type": "array", "items": _MESH, "minItems": 1},
            "n_steps": _POSITIVE_INT,
            "horizon": _POSITIVE,
            "a_base": _NUMBER,
            "a_slope": _NUMBER,
            "beta": _NUMBER,
            "n_paths": _POSITIVE_INT,
            "degree": {"type": "integer", "minimum": 0},
            "ridge": {"type": "number", "minimum": 0},
            "antithetic": {"type": "boolean"},
        },
    },
    "lq-train": {
        "type": "object", "additionalProperties": False,
        "required": ["n_cells", "n_steps"],
        "properties": {
            "n_cells": _MESH,
            "eval_paths": _POSITIVE_INT,
            "residual_paths": {"type": "integer", "minimum": 0},
            **_LQ_FIELDS,
        },
    },
    "lq-convergence": {
        "type": "object", "additionalProperties": False,
        "required": ["mesh_cells", "reference_cells", "n_steps"],
        "properties": {
            "mesh_cells": {"type": "array", "items": _MESH, "minItems": 1},
            "reference_cells": _MESH,
            "eval_paths": _POSITIVE_INT,
            "chunk_size": _POSITIVE_INT,
            **_LQ_FIELDS,
        },
    },
    "duality-check": {
        "type": "object", "additionalProperties": False,
        "required": ["n_cells", "n_steps_list"],
        "properties": {
            "n_cells": _MESH,
            "n_steps_list": {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
            "horizon": _POSITIVE,
            "alpha": _ALPHA,
            "n_paths": _POSITIVE_INT,
            "stochastic": {"type": "boolean"},
            "degree": {"type": "integer", "minimum": 0},
            "antithetic": {"type": "boolean"},
        },
    },
}

_TOP_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["kind", "params"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "seed": {"type": "integer"},
        "out_dir": {"type": "string"},
        "threads": {"type": ["integer", "null"], "minimum": 1},
        "reproducible": {"type": "boolean"},
        "params": {"type": "object"},
    },
}

_DEFAULTS = {
    "fem-selftest": {},
    "manufactured-convergence": {
        "horizon": 1.0, "a_base": 1.0, "a_slope": 0.5, "beta": 1.0,
        "n_paths": 20000, "degree": 4, "ridge": 1e-10, "antithetic": False,
    },
    "lq-train": {
        "horizon": 0.2, "nu": 1e-2, "alpha": [1.0, 1.0, 1.0, 0.1],
        "target": "singular-deterministic", "target_value": 1.0,
        "iterations": 2000, "batch_size": 128, "lr": 5e-3, "lr_final": 5e-4,
        "hidden": [48, 48], "eval_paths": 4096, "residual_paths": 0,
    },
    "lq-convergence": {
        "horizon": 0.2, "nu": 1e-2, "alpha": [1.0, 1.0, 1.0, 0.1],
        "target": "singular-deterministic", "target_value": 1.0,
        "iterations": 2000, "batch_size": 128, "lr": 5e-3, "lr_final": 5e-4,
        "hidden": [48, 48], "eval_paths": 100000, "chunk_size": 2048,
    },
    "duality-check": {
        "horizon": 0.2, "alpha": [1.0, 1.0, 1.0, 0.1], "n_paths": 20000,
        "stochastic": True, "degree": 4, "antithetic": True,
    },
}


def validate_config(config: dict) -> dict:
    """Schema-check, then return a copy with all defaults resolved."""
    try:
        jsonschema.validate(config, _TOP_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(exc.message, path="/".join(str(p) for p in exc.absolute_path))
    kind = config["kind"]
    try:
        jsonschema.validate(config["params"], _PARAM_SCHEMAS[kind])
    except jsonschema.ValidationError as exc:
        path = "params/" + "/".join(str(p) for p in exc.absolute_path)
        raise ConfigError(exc.message, path=path)
    resolved = dict(config)
    resolved.setdefault("seed", 0)
    resolved.setdefault("out_dir", f"runs/{kind}")
    resolved.setdefault("threads", None)
    resolved.setdefault("reproducible", False)
    params = dict(_DEFAULTS[kind])
    params.update(config["params"])
    resolved["params"] = params
    _check_cross_fields(kind, params)
    return resolved


def _check_cross_fields(kind: str, params: dict) -> None:
    if kind in ("lq-train", "lq-convergence"):
        final = params.get("lr_final")
        if final is not None and final > params["lr"]:
            raise ConfigError(
                f"lr_final={final} exceeds lr={params['lr']}",
                path="params/lr_final")
    if kind == "lq-convergence":
        ref = params["reference_cells"]
        for c in params["mesh_cells"]:
            if ref <= c:
                raise ConfigError(
                    f"reference_cells={ref} must exceed every study mesh, got {c}",
                    path="params/reference_cells")
            if ref % c:
                raise ConfigError(
                    f"study mesh {c} does not nest into reference {ref}",
                    path="params/mesh_cells")
    if kind == "duality-check":
        steps = params["n_steps_list"]
        top = max(steps)
        for J in steps:
            if top % J:
                raise ConfigError(
                    f"n_steps_list entries must divide the largest ({top}), got {J}",
                    path="params/n_steps_list")


# ------------------------------------------------------------- executors


def _run_fem_selftest(params: dict, seed: int):
    residuals = []
    ortho = []
    for n_cells in params["n_cells_list"]:
        f = fem_mod.assemble(fem_mod.build_mesh(n_cells))
        sp = fem_mod.spectral(f)
        exact = fem_mod.closed_form_eigenvalues(n_cells)
        residuals.append(float(np.max(np.abs(sp.eigenvalues - exact) / exact)))
        gram = sp.modes.T @ f.mass_dense() @ sp.modes
        ortho.append(float(np.max(np.abs(gram - np.eye(len(exact))))))
    return {
        "n_cells_list": list(params["n_cells_list"]),
        "eig_residuals": residuals,
        "max_eig_residual": max(residuals),
        "orthonormality_residuals": ortho,
    }, {}


def _run_manufactured(params: dict, seed: int):
    grid = build_time_grid(params["horizon"], params["n_steps"])
    batch = sample_brownian(grid, params["n_paths"], seed=seed,
                            antithetic=params["antithetic"])
    a_base, a_slope = params["a_base"], params["a_slope"]
    basis = RegressionBasis(degree=params["degree"], ridge=params["ridge"])
    rows = manufactured_convergence(
        params["n_cells_list"], grid, batch,
        a=lambda t: a_base + a_slope * t, beta=params["beta"],
        a_prime=lambda t: np.full_like(np.asarray(t, dtype=float), a_slope),
        basis=basis)
    return {"rows": rows}, {"paths": seed}


def _target_handler(params: dict):
    kind = params["target"]
    if kind == "constant":
        value = params["target_value"]

        def y_d(t, x, w):
            return np.full((len(np.atleast_1d(w)), len(x)), float(value))
        return y_d, False
    if kind == "singular-deterministic":
        def y_d(t, x, w):
            return np.broadcast_to(x ** -0.49,
                                   (len(np.atleast_1d(w)), len(x))).copy()
        return y_d, False

    def y_d(t, x, w):
        return (1.0 + np.atleast_1d(w)[:, None] ** 2) * (x ** -0.49)[None, :]
    return y_d, True


def _lq_problem(params: dict, fem) -> LqProblem:
    y_d, stochastic = _target_handler(params)
    a0, a1, a2, a3 = params["alpha"]
    return LqProblem(
        nu=params["nu"], coeffs=LinearSpdeCoeffs(a0, a1, a2, a3), y_d=y_d,
        grid=build_time_grid(params["horizon"], params["n_steps"]), fem=fem,
        target_depends_on_noise=stochastic)


def _train_config(params: dict, seed: int) -> TrainConfig:
    return TrainConfig(iterations=params["iterations"],
                       batch_size=params["batch_size"], lr=params["lr"],
                       lr_final=params.get("lr_final"), seed=seed,
                       hidden=tuple(params["hidden"]))


def _run_lq_train(params: dict, seed: int):
    f = fem_mod.assemble(fem_mod.build_mesh(params["n_cells"]))
    problem = _lq_problem(params, f)
    config = _train_config(params, seed)
    stack = build_policy_stack(problem.grid.n_steps, hidden=config.hidden, seed=seed)
    stack, trace = train(problem, stack, config)
    eval_seed = seed + _EVAL_SEED_OFFSET
    batch = sample_brownian(problem.grid, params["eval_paths"], seed=eval_seed)
    u = eval_policy(stack, f, batch)
    tau = problem.grid.tau
    control_norm = float(np.sqrt(sum(
        tau * np.mean(fem_mod.fractional_norm_sq(f, u[:, j, :], 0))
        for j in range(problem.grid.n_steps))))
    head = min(500, len(trace) // 2) or 1
    results = {
        "final_loss": float(trace[-1]),
        "loss_head_mean": float(trace[:head].mean()),
        "loss_tail_mean": float(trace[-head:].mean()),
        "control_norm": control_norm,
    }
    if params["residual_paths"]:
        res_batch = sample_brownian(problem.grid, params["residual_paths"],
                                    seed=eval_seed + 1)
        results["optimality_residual"] = float(
            optimality_residual(problem, stack, res_batch))
    return results, {"train_stream": seed, "eval": eval_seed}


def _run_lq_convergence(params: dict, seed: int):
    config = _train_config(params, seed)
    report = convergence_study(
        lambda f: _lq_problem(params, f),
        params["mesh_cells"], params["reference_cells"], config,
        eval_paths=params["eval_paths"], chunk_size=params["chunk_size"])
    rows = [
        {"n_cells": c, "h": 1.0 / c, "control_error": eu, "state_error": ey,
         "control_order": ou, "state_order": oy}
        for c, eu, ey, ou, oy in zip(report.mesh_cells, report.errors_u,
                                     report.errors_y, report.orders_u,
                                     report.orders_y)]
    results = {
        "rows": rows,
        "reference_cells": report.reference_cells,
        "monotone_control": report.monotone_u,
        "monotone_state": report.monotone_y,
        "final_losses": report.final_losses,
        "eval_paths": report.eval_paths,
    }
    seeds = {"train_stream": report.train_seed, "eval": report.eval_seed}
    return results, seeds, report.timings


def _run_duality(params: dict, seed: int):
    f = fem_mod.assemble(fem_mod.build_mesh(params["n_cells"]))
    a0, a1, a2, a3 = params["alpha"]
    coeffs = LinearSpdeCoeffs(a0, a1, a2, a3)
    steps = sorted(params["n_steps_list"])
    top = max(steps)
    master = sample_brownian(build_time_grid(params["horizon"], top),
                             params["n_paths"], seed=seed,
                             antithetic=params["antithetic"])
    basis = RegressionBasis(degree=params["degree"])
    profile = np.sin(np.pi * f.mesh.nodes)
    bump = f.mesh.nodes * (1.0 - f.mesh.nodes)
    gaps = []
    for J in steps:
        batch = coarsen_batch(master, top // J) if J < top else master
        grid = batch.grid
        if params["stochastic"]:
            def g(b, j):
                return (1.0 + 0.5 * np.cos(b.value_at(j)))[:, None] * profile[None, :]

            def v(b, j):
                return (1.0 + 0.2 * b.value_at(j))[:, None] * profile[None, :]
        else:
            g = np.outer(np.cos(grid.times[:-1]), profile)
            v = np.outer(1.0 + grid.times[:-1], bump)
        gaps.append(float(duality_check(f, grid, coeffs, g, v, batch, basis=basis)))
    return {
        "n_steps_list": steps,
        "gaps": gaps,
        "monotone": all(x > y for x, y in zip(gaps[:-1], gaps[1:])),
    }, {"paths": seed}


def run_experiment(config: dict) -> dict:
    """Execute a validated config; returns the full RunRecord as a dict."""
    resolved = validate_config(config)
    kind = resolved["kind"]
    seed = resolved["seed"]
    t0 = time.perf_counter()
    extra_timings = {}
    if kind == "fem-selftest":
        results, seeds = _run_fem_selftest(resolved["params"], seed)
    elif kind == "manufactured-convergence":
        results, seeds = _run_manufactured(resolved["params"], seed)
    elif kind == "lq-train":
        results, seeds = _run_lq_train(resolved["params"], seed)
    elif kind == "lq-convergence":
        results, seeds, extra_timings = _run_lq_convergence(resolved["params"], seed)
    else:
        results, seeds = _run_duality(resolved["params"], seed)
    timings = {"total": time.perf_counter() - t0}
    timings.update(extra_timings)
    return {
        "kind": kind,
        "version": __version__,
        "config": resolved,
        "seeds": {"base": seed, **seeds},
        "timings": timings,
        "results": results,
    }


# ----------------------------------------------------------- persistence


def _fmt(x) -> str:
    if x is None:
        return "--"
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return repr(x)
    return str(x)


_TABLE_COLUMNS = {
    "manufactured-convergence": [("p_sup_l2", "p_sup_l2"), ("p_h1", "p_h1"),
                                 ("z_l2", "z_l2")],
    "lq-convergence": [("control_error", "control_error"),
                       ("state_error", "state_error")],
}

_ORDER_KEYS = {
    "manufactured-convergence": ["p_sup_l2_order", "p_h1_order", "z_l2_order"],
    "lq-convergence": ["control_order", "state_order"],
}


def _table_lines(kind: str, rows: List[dict]):
    """(csv_lines, markdown_lines) for one study table.

    CSV: one row per mesh with the error columns, then order rows (first
    field "order") for each successive pair.  Markdown interleaves error and
    order columns the way the reference tables do, "--" on the first row.
    """
    cols = _TABLE_COLUMNS[kind]
    okeys = _ORDER_KEYS[kind]
    csv_lines = ["h," + ",".join(name for name, _ in cols)]
    for row in rows:
        csv_lines.append(",".join([_fmt(row["h"])] + [_fmt(row[k]) for _, k in cols]))
    for row in rows[1:]:
        csv_lines.append(",".join(["order"] + [_fmt(row[k]) for k in okeys]))
    header = ["h"]
    for name, _ in cols:
        header += [name, "order"]
    md = ["| " + " | ".join(header) + " |",
          "|" + "---|" * len(header)]
    for row in rows:
        cells = [_fmt(row["h"])]
        for (_, key), okey in zip(cols, okeys):
            cells += [_fmt(row[key]), _fmt(row.get(okey))]
        md.append("| " + " | ".join(cells) + " |")
    return csv_lines, md


def _flat_table(results: dict, keys: List[str]):
    csv_lines = [",".join(keys),
                 ",".join(_fmt(results.get(k)) for k in keys)]
    md = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys),
          "| " + " | ".join(_fmt(results.get(k)) for k in keys) + " |"]
    return csv_lines, md


def write_outputs(record: dict, out_dir: str) -> List[str]:
    """Write record.json plus the kind's CSV and markdown table into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    kind = record["kind"]
    written = []

    def _put(name: str, text: str):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        written.append(path)

    _put("record.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    results = record["results"]
    if kind in _TABLE_COLUMNS:
        csv_lines, md = _table_lines(kind, results["rows"])
    elif kind == "fem-selftest":
        csv_lines = ["n_cells,eig_residual,orthonormality_residual"]
        md = ["| n_cells | eig_residual | orthonormality_residual |", "|---|---|---|"]
        for c, r, o in zip(results["n_cells_list"], results["eig_residuals"],
                           results["orthonormality_residuals"]):
            csv_lines.append(f"{c},{_fmt(r)},{_fmt(o)}")
            md.append(f"| {c} | {_fmt(r)} | {_fmt(o)} |")
    elif kind == "lq-train":
        keys = ["final_loss", "loss_head_mean", "loss_tail_mean", "control_norm"]
        if "optimality_residual" in results:
            keys.append("optimality_residual")
        csv_lines, md = _flat_table(results, keys)
    else:
        csv_lines = ["n_steps,gap"]
        md = ["| n_steps | gap |", "|---|---|"]
        for J, gap in zip(results["n_steps_list"], results["gaps"]):
            csv_lines.append(f"{J},{_fmt(gap)}")
            md.append(f"| {J} | {_fmt(gap)} |")
    _put(f"{kind}.csv", "\n".join(csv_lines) + "\n")
    _put(f"{kind}.md", "\n".join(md) + "\n")
    return written


def report_table(records: List[dict]) -> str:
    """Markdown comparison table pooling study rows from same-kind records."""
    if not records:
        raise ValueError("no records to report")
    kinds = {r["kind"] for r in records}
    if len(kinds) > 1:
        raise ValueError(f"records mix experiment kinds: {sorted(kinds)}")
    kind = kinds.pop()
    if kind not in _TABLE_COLUMNS:
        raise ValueError(f"kind {kind} has no mesh-indexed errors to tabulate")
    rows = []
    for rec in records:
        rows.extend(rec["results"]["rows"])
    rows = sorted(rows, key=lambda r: -r["h"])
    merged = []
    okeys = _ORDER_KEYS[kind]
    for i, row in enumerate(rows):
        row = dict(row)
        for (_, key), okey in zip(_TABLE_COLUMNS[kind], okeys):
            if i == 0:
                row[okey] = None
            else:
                prev = rows[i - 1]
                ratio = prev[key] / row[key] if row[key] > 0 else float("nan")
                row[okey] = float(np.log2(ratio)) if prev["h"] == 2 * row["h"] \
                    else float(np.log(ratio) / np.log(prev["h"] / row["h"]))
        merged.append(row)
    _, md = _table_lines(kind, merged)
    return "\n".join(md) + "\n"


def _first_divergence(a, b, path=""):
    """Depth-first search for the first non-identical leaf between two records."""
    if isinstance(a, dict) and isinstance(b, dict):
        for key in sorted(set(a) | set(b)):
            if key not in a or key not in b:
                return f"{path}/{key} (missing on one side)"
            hit = _first_divergence(a[key], b[key], f"{path}/{key}")
            if hit:
                return hit
        return None
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        if len(a) != len(b):
            return f"{path} (length {len(a)} vs {len(b)})"
        for i, (x, y) in enumerate(zip(a, b)):
            hit = _first_divergence(x, y, f"{path}[{i}]")
            if hit:
                return hit
        return None
    if isinstance(a, float) and isinstance(b, float):
        same = (a == b) or (a != a and b != b)    # NaN counts as equal to NaN
        return None if same else f"{path} ({a!r} != {b!r})"
    return None if a == b else f"{path} ({a!r} != {b!r})"


def replay_record(record: dict):
    """Re-run a record's config; returns (fresh record, first divergent field)."""
    for key in ("config", "results"):
        if key not in record:
            raise ValueError(f"record is missing its {key!r} section")
    fresh = run_experiment(record["config"])
    return fresh, _first_divergence(record["results"], fresh["results"], "results")
