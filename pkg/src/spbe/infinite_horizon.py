"""Stationary equilibrium solving by repeated backward sweeps.

The stationary value/prescription pair is characterized by a joint per-belief
fixed point: at every belief, the prescriptions are stage-optimal against the
values, and the values equal the achieved stage payoff. This module iterates
single backward steps (terminal reward = current value table) over the belief
grid until the value change stalls, then certifies the result with an
independent residual. Convergence of the iteration is monitored, never
assumed: the stage equilibria are re-solved each sweep, so the update is not
a contraction in general. Warm starts pin the equilibrium branch across
sweeps and branch switches are counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .game import GameSpec
from .grid import BeliefGrid, PolicyGrid, ValueTable
from .belief import ProductBelief
from .stage import SolverConfig, _StageBatch, _achieved_values, solve_stage_grid

# Consecutive sweeps with growing value change before flagging oscillation.
OSCILLATION_WINDOW = 50


@dataclass
class SolveReport:
    """Outcome of an infinite-horizon solve: tables plus diagnostics."""

    value: ValueTable
    policy: PolicyGrid
    converged: bool
    sweeps: int
    sup_changes: list[float] = field(default_factory=list)  # normalized by (1-delta)
    residual: float = float("nan")
    branch_switches: list[int] = field(default_factory=list)
    nonconverged_points: int = 0
    oscillation: bool = False
    tol_V: float = 1e-5
    tol_res: float = 1e-3

    def summary_dict(self) -> dict:
        return {
            "converged": bool(self.converged),
            "sweeps": int(self.sweeps),
            "sup_changes": [float(c) for c in self.sup_changes],
            "residual": float(self.residual),
            "branch_switches": [int(b) for b in self.branch_switches],
            "nonconverged_points": int(self.nonconverged_points),
            "oscillation": bool(self.oscillation),
            "tol_V": float(self.tol_V),
            "tol_res": float(self.tol_res),
        }


def interpolate_value(V: ValueTable, pi: ProductBelief, i: int, x_i: int) -> float:
    """Multilinear off-grid evaluation of a value table."""
    return V.evaluate(pi, i, x_i)


def residual(spec: GameSpec, V: ValueTable, theta: PolicyGrid) -> float:
    """Fixed-point defect of (V, theta) over the grid, in payoff units.

    Sum of (a) the worst mismatch between stored values and the payoff
    achieved by playing theta against interpolated V, and (b) the worst
    best-response gap of theta against V. Near zero only at a genuine joint
    fixed point.
    """
    batch = _StageBatch(spec, V.grid.marginals, V, SolverConfig(), mirror=None)
    cont = batch.continuation(theta.gammas)
    q = batch.q_values(theta.gammas, cont)
    mismatch = 0.0
    for i in range(spec.n_agents):
        achieved = np.einsum("pxa,pxa->px", theta.gammas[i], q[i])
        mismatch = max(mismatch, float(np.max(np.abs(V.values[i] - achieved))))
    gap = float(np.max(batch.residual_from_q(q, theta.gammas)))
    return mismatch + gap


def _policy_evaluation(spec, grid, V: ValueTable, policy: PolicyGrid,
                       cfg: SolverConfig, tol_abs: float, max_passes: int) -> ValueTable:
    """Iterate V <- payoff-under-policy(V) with the prescriptions frozen.

    Cheap contraction passes between equilibrium re-solves; they move V
    toward the value of the current policy without touching the equilibrium
    branch. The joint fixed point is unchanged.
    """
    vals = [v.copy() for v in V.values]
    for _ in range(max_passes):
        cur = ValueTable(grid, vals)
        new_vals = _achieved_values(spec, grid.marginals, cur, cfg, policy.gammas)
        ch = max(float(np.max(np.abs(a - b))) for a, b in zip(new_vals, vals))
        vals = new_vals
        if ch <= tol_abs:
            break
    return ValueTable(grid, vals)


def solve_fixed_point(
    spec: GameSpec,
    grid: BeliefGrid,
    tol_V: float = 1e-5,
    tol_res: float = 1e-3,
    max_sweeps: int = 2000,
    cfg: Optional[SolverConfig] = None,
    eval_passes: int = 0,
) -> SolveReport:
    """Iterate backward sweeps from V = 0 until the value table is stationary.

    ``tol_V`` applies to the sup-norm change of (1-delta)-normalized values
    across one full equilibrium sweep; ``tol_res`` is an absolute cap on the
    final fixed-point residual. ``eval_passes`` optionally inserts
    policy-evaluation passes between sweeps (same fixed point and stopping
    criteria); the default is plain value iteration, which tracks the
    equilibrium branch much more stably from a cold start. A zero discount
    converges in a single sweep by construction. Returns a full report
    whether or not the iteration converged.
    """
    if not (0.0 <= spec.delta < 1.0):
        raise ValueError("solve_fixed_point requires delta in [0, 1)")
    cfg = cfg or SolverConfig()
    V = ValueTable.zeros(grid)
    policy: Optional[PolicyGrid] = None
    sup_changes: list[float] = []
    branch_switches: list[int] = []
    norm = 1.0 - spec.delta
    converged = False
    grow_streak = 0
    oscillation = False
    sweeps = 0
    for sweep in range(1, max_sweeps + 1):
        sweeps = sweep
        res = solve_stage_grid(spec, grid, V, cfg, warm=policy)
        V_new = ValueTable(grid, [v.copy() for v in res.values])
        change = norm * V_new.sup_distance(V)
        sup_changes.append(change)
        if policy is not None:
            prev, cur = policy.support_ids, res.policy.support_ids
            switched = int(np.sum((prev != cur) & (prev >= 0) & (cur >= 0)))
            branch_switches.append(switched)
        V, policy = V_new, res.policy
        if len(sup_changes) >= 2 and sup_changes[-1] > sup_changes[-2]:
            grow_streak += 1
            if grow_streak >= OSCILLATION_WINDOW:
                oscillation = True
        else:
            grow_streak = 0
        if spec.delta == 0.0:
            converged = True
            break
        if change <= tol_V:
            converged = True
            break
        if eval_passes > 0:
            V = _policy_evaluation(
                spec, grid, V, policy, cfg,
                tol_abs=0.1 * tol_V / norm, max_passes=eval_passes,
            )

    res_val = residual(spec, V, policy)
    report = SolveReport(
        value=V,
        policy=policy,
        converged=converged and res_val <= tol_res,
        sweeps=sweeps,
        sup_changes=sup_changes,
        residual=res_val,
        branch_switches=branch_switches,
        nonconverged_points=policy.n_nonconverged(),
        oscillation=oscillation,
        tol_V=tol_V,
        tol_res=tol_res,
    )
    return report
