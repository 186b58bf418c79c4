"""Artifact files for solved games: JSON tables, deterministic bytes.

Every artifact embeds the content hash of the game spec it was computed from
and the run configuration that produced it; consumers refuse artifacts whose
hash does not match the spec they are given. Tables are stored as flat arrays
with an explicit index order so any language can reload them. Serialization
is canonical (sorted keys, repr floats, no timestamps), so identical runs
produce byte-identical files.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .game import GameSpec
from .grid import BeliefGrid, PolicyGrid, ValueTable
from .infinite_horizon import SolveReport

VALUE_INDEX_ORDER = "per agent: row-major (grid_point, own_type)"
POLICY_INDEX_ORDER = "per agent: row-major (grid_point, own_type, action)"


class ArtifactMismatchError(RuntimeError):
    """Artifact was produced from a different spec or grid."""


def write_json(path, obj) -> None:
    blob = json.dumps(obj, sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(blob)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _grid_header(grid: BeliefGrid) -> dict:
    return {
        "h": grid.h,
        "type_counts": list(grid.type_counts),
        "shape": list(grid.shape),
        "n_points": grid.n_points,
    }


def _check_header(doc: dict, kind: str, spec: Optional[GameSpec]) -> None:
    if doc.get("kind") != kind:
        raise ArtifactMismatchError(
            f"expected artifact kind {kind!r}, found {doc.get('kind')!r}"
        )
    if spec is not None and doc.get("spec_hash") != spec.content_hash():
        raise ArtifactMismatchError(
            "artifact spec hash does not match the provided game spec"
        )


def _rebuild_grid(doc: dict) -> BeliefGrid:
    g = doc["grid"]
    grid = BeliefGrid(tuple(g["type_counts"]), g["h"])
    if list(grid.shape) != list(g["shape"]):
        raise ArtifactMismatchError("stored grid shape does not match its parameters")
    return grid


def value_table_doc(spec: GameSpec, config: dict, V: ValueTable) -> dict:
    return {
        "kind": "value_table",
        "spec_hash": spec.content_hash(),
        "config": config,
        "grid": _grid_header(V.grid),
        "index_order": VALUE_INDEX_ORDER,
        "values": [v.reshape(-1).tolist() for v in V.values],
    }


def load_value_table(path, spec: Optional[GameSpec] = None) -> ValueTable:
    doc = read_json(path)
    _check_header(doc, "value_table", spec)
    grid = _rebuild_grid(doc)
    values = []
    for i, k in enumerate(grid.type_counts):
        arr = np.asarray(doc["values"][i], dtype=float).reshape(grid.n_points, k)
        if not np.all(np.isfinite(arr)):
            p, x = np.unravel_index(int(np.argmax(~np.isfinite(arr))), arr.shape)
            raise ArtifactMismatchError(
                f"value table has a non-finite entry at agent {i}, point {p}, type {x}"
            )
        values.append(arr)
    return ValueTable(grid, values)


def policy_doc(spec: GameSpec, config: dict, theta: PolicyGrid) -> dict:
    return {
        "kind": "policy",
        "spec_hash": spec.content_hash(),
        "config": config,
        "grid": _grid_header(theta.grid),
        "index_order": POLICY_INDEX_ORDER,
        "gammas": [g.reshape(-1).tolist() for g in theta.gammas],
        "diagnostics": {
            "residuals": theta.residuals.reshape(-1).tolist(),
            "converged": theta.converged.astype(int).reshape(-1).tolist(),
            "support_ids": theta.support_ids.reshape(-1).tolist(),
            "iterations": theta.iterations.reshape(-1).tolist(),
        },
        "meta": {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v)
                 for k, v in theta.meta.items()},
    }


def load_policy(path, spec: GameSpec) -> PolicyGrid:
    doc = read_json(path)
    _check_header(doc, "policy", spec)
    grid = _rebuild_grid(doc)
    gammas = []
    for i in range(spec.n_agents):
        nx, na = spec.type_counts[i], spec.action_counts[i]
        gammas.append(
            np.asarray(doc["gammas"][i], dtype=float).reshape(grid.n_points, nx, na)
        )
    d = doc["diagnostics"]
    return PolicyGrid(
        grid=grid,
        gammas=gammas,
        residuals=np.asarray(d["residuals"], dtype=float),
        converged=np.asarray(d["converged"], dtype=int).astype(bool),
        support_ids=np.asarray(d["support_ids"], dtype=np.int64),
        iterations=np.asarray(d["iterations"], dtype=np.int64),
        meta=dict(doc.get("meta", {})),
    )


def save_solution(outdir, spec: GameSpec, config: dict, report: SolveReport) -> dict:
    """Write value table, policy, and solve report; returns the file map."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "value_table": out / "value_table.json",
        "policy": out / "policy.json",
        "solve_report": out / "solve_report.json",
    }
    write_json(files["value_table"], value_table_doc(spec, config, report.value))
    write_json(files["policy"], policy_doc(spec, config, report.policy))
    write_json(
        files["solve_report"],
        {
            "kind": "solve_report",
            "spec_hash": spec.content_hash(),
            "config": config,
            **report.summary_dict(),
        },
    )
    return {k: str(v) for k, v in files.items()}


def load_solution(outdir, spec: GameSpec) -> tuple[ValueTable, PolicyGrid, dict]:
    out = Path(outdir)
    V = load_value_table(out / "value_table.json", spec)
    theta = load_policy(out / "policy.json", spec)
    report = read_json(out / "solve_report.json")
    _check_header(report, "solve_report", spec)
    if V.grid.shape != theta.grid.shape or V.grid.h != theta.grid.h:
        raise ArtifactMismatchError("value table and policy grids disagree")
    return V, theta, report


def finite_solution_doc(spec: GameSpec, config: dict, values, policies) -> dict:
    return {
        "kind": "finite_solution",
        "spec_hash": spec.content_hash(),
        "config": config,
        "horizon": len(policies),
        "grid": _grid_header(values[0].grid),
        "index_order": {
            "values": "per stage (1..T+1): " + VALUE_INDEX_ORDER,
            "gammas": "per stage (1..T): " + POLICY_INDEX_ORDER,
        },
        "values": [
            [v.reshape(-1).tolist() for v in vt.values] for vt in values
        ],
        "gammas": [
            [g.reshape(-1).tolist() for g in pol.gammas] for pol in policies
        ],
    }
