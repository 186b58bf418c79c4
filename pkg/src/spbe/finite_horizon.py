"""Finite-horizon backward recursion over a belief grid.

Builds per-stage value tables and prescription maps from a terminal reward
defined on the same grid: the terminal table seeds stage T, and each earlier
stage solves the per-belief equilibrium against the interpolated next-stage
values. Stage t warm-starts from stage t+1's solution, which keeps the
equilibrium branch continuous across stages.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .belief import Prescription, ProductBelief, forward_beliefs
from .game import GameSpec
from .grid import BeliefGrid, PolicyGrid, ValueTable
from .stage import SolverConfig, solve_stage_grid


class HistoryTooLong(ValueError):
    pass


@dataclass
class FiniteHorizonSolution:
    """Stage-indexed tables: values[t-1] is V_t (t = 1..T+1), policies[t-1] is
    the stage-t prescription map (t = 1..T)."""

    values: list[ValueTable]
    policies: list[PolicyGrid]

    @property
    def horizon(self) -> int:
        return len(self.policies)


def backward_solve(
    spec: GameSpec,
    T: int,
    G: Optional[ValueTable],
    grid: BeliefGrid,
    cfg: Optional[SolverConfig] = None,
    warm: Optional[PolicyGrid] = None,
) -> FiniteHorizonSolution:
    """Solve the T-stage game with terminal reward table G (None for zero).

    ``warm`` optionally seeds the stage-T solve (e.g. with a converged
    stationary policy); later stages always warm-start from their successor.
    Stage non-convergence beyond the configured cap raises GridNonConvergence.
    """
    if T < 1:
        raise ValueError(f"horizon must be >= 1, got {T}")
    cfg = cfg or SolverConfig()
    if G is None:
        G = ValueTable.zeros(grid)
    if G.grid is not grid and G.grid.shape != grid.shape:
        raise ValueError("terminal reward table must live on the solving grid")
    values: list[ValueTable] = [G]
    policies: list[PolicyGrid] = []
    nxt = warm
    for _ in range(T):
        res = solve_stage_grid(spec, grid, values[0], cfg, warm=nxt)
        values.insert(0, ValueTable(grid, [v.copy() for v in res.values]))
        policies.insert(0, res.policy)
        nxt = res.policy
    return FiniteHorizonSolution(values=values, policies=policies)


class FinitePolicy:
    """History-form strategy evaluator for a finite-horizon solution.

    Replays the public action history through the belief recursion (using the
    stage prescriptions for the Bayes step) and returns the stage-t
    prescription at the reconstructed belief. Total on off-path histories:
    the zero-probability branch of the belief update keeps every history
    reachable.
    """

    def __init__(self, spec: GameSpec, theta_seq: Sequence[PolicyGrid],
                 mu_initial: ProductBelief):
        self.spec = spec
        self.theta_seq = list(theta_seq)
        self.mu_initial = mu_initial

    @property
    def horizon(self) -> int:
        return len(self.theta_seq)

    def beliefs_along(self, history) -> list[ProductBelief]:
        if len(history) >= self.horizon + 1:
            raise HistoryTooLong(
                f"history of length {len(history)} exceeds horizon {self.horizon}"
            )
        return forward_beliefs(self.spec, self.theta_seq, history, self.mu_initial)

    def prescription(self, t: int, belief: ProductBelief) -> Prescription:
        if t >= self.horizon:
            raise HistoryTooLong(f"stage {t + 1} exceeds horizon {self.horizon}")
        return self.theta_seq[t].prescription_at_belief(belief)

    def action_dist(self, history, agent: int, x: int) -> np.ndarray:
        """beta*: distribution over own actions given public history and type."""
        t = len(history)
        if t >= self.horizon:
            raise HistoryTooLong(
                f"history of length {t} exceeds horizon {self.horizon}"
            )
        belief = self.beliefs_along(history)[-1]
        return self.prescription(t, belief)[agent][x]


def finite_policy(
    spec: GameSpec,
    theta_seq: Sequence[PolicyGrid],
    mu_initial: ProductBelief,
) -> FinitePolicy:
    """Strategy evaluator generated by a backward-solve policy sequence."""
    return FinitePolicy(spec, theta_seq, mu_initial)
