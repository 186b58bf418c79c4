"""Empirical certification of computed equilibria.

Checks three things about a solved (value table, policy) pair: that no
deviation strategy from a library beats the equilibrium value (truncated
reward-to-go with an explicit geometric tail bound), that the value table is
self-consistent under finite-horizon re-solving with itself as terminal
reward, and that exact tree enumeration agrees with the tabulated values on
small instances. Deviations quantify over a library of probes (one-step pure,
uniform-random stationary, myopic-greedy, user-supplied), not over all
strategies, which is the testable rendering of sequential rationality.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .belief import Prescription, ProductBelief, update_joint
from .finite_horizon import backward_solve
from .game import GameSpec
from .grid import BeliefGrid, PolicyGrid, ValueTable
from .stage import SolverConfig, _StageBatch

DEFAULT_NODE_CAP = 2_000_000


class EnumerationTooLarge(ValueError):
    """Exact enumeration would exceed the node cap; use deviation_gap_mc."""


@dataclass(frozen=True)
class RewardToGo:
    value: float
    mode: str  # "exact-enumeration" | "monte-carlo"


class GridPolicy:
    """Stationary strategy evaluator backed by a solved policy grid.

    Prescriptions are looked up at the nearest grid point, matching the
    simulator; interpolating between points could mix equilibrium branches.
    """

    def __init__(self, spec: GameSpec, theta: PolicyGrid):
        self.spec = spec
        self.theta = theta

    def prescription(self, belief: ProductBelief) -> Prescription:
        return self.theta.prescription_at_belief(belief)

    def action_dist(self, t: int, belief: ProductBelief, agent: int, x: int) -> np.ndarray:
        return self.prescription(belief)[agent][x]


def reward_to_go_exact(
    spec: GameSpec,
    agent_strategy: Callable[[int, ProductBelief, int, int], np.ndarray],
    others: GridPolicy,
    belief: ProductBelief,
    x_i: int,
    i: int,
    T: int,
    terminal_V: Optional[ValueTable] = None,
    node_cap: int = DEFAULT_NODE_CAP,
) -> float:
    """Exact truncated reward-to-go of agent ``i`` by full tree enumeration.

    Agent ``i`` plays ``agent_strategy`` (a callable ``(t, belief, agent, x)
    -> action distribution`` with ``t`` counted from 0); everyone else plays
    the equilibrium policy. The public belief is updated along every branch
    with the equilibrium prescriptions regardless of the deviation, and the
    terminal value ``terminal_V`` (zero if None) is discounted by delta**T.
    """
    size = (spec.n_joint_types * spec.n_joint_actions) ** T
    if size > node_cap:
        raise EnumerationTooLarge(
            f"enumeration tree of ~{size:.3g} nodes exceeds cap {node_cap}; "
            "use deviation_gap_mc instead"
        )

    def strat(t, pi, j, x):
        if j == i:
            return agent_strategy(t, pi, j, x)
        return others.action_dist(t, pi, j, x)

    def node(t: int, x: tuple, pi: ProductBelief) -> float:
        if t >= T:
            if terminal_V is None:
                return 0.0
            return terminal_V.evaluate(pi, i, x[i])
        gamma_eq = others.prescription(pi)
        dists = [strat(t, pi, j, x[j]) for j in range(spec.n_agents)]
        total = 0.0
        xf = spec.flat_type(x)
        for a in itertools.product(*(range(n) for n in spec.action_counts)):
            pa = 1.0
            for j, aj in enumerate(a):
                pa *= float(dists[j][aj])
            if pa == 0.0:
                continue
            af = spec.flat_action(a)
            val = spec.rewards[i][xf, af]
            if spec.delta > 0.0:
                nxt_pi = update_joint(pi, gamma_eq, a, spec)
                exp_next = 0.0
                for xn in itertools.product(*(range(n) for n in spec.type_counts)):
                    px = 1.0
                    for j, xj in enumerate(xn):
                        px *= float(spec.q[j][x[j], af, xj])
                        if px == 0.0:
                            break
                    if px == 0.0:
                        continue
                    exp_next += px * node(t + 1, xn, nxt_pi)
                val += spec.delta * exp_next
            total += pa * val
        return total

    others_idx = [j for j in range(spec.n_agents) if j != i]
    W = 0.0
    for x_other in itertools.product(*(range(spec.type_counts[j]) for j in others_idx)):
        px = 1.0
        for j, xj in zip(others_idx, x_other):
            px *= float(belief[j][xj])
        if px == 0.0:
            continue
        xt = list(x_other)
        xt.insert(i, x_i)
        W += px * node(0, tuple(xt), belief)
    return W


# ---------------------------------------------------------------------------
# Deviation strategy library
# ---------------------------------------------------------------------------


class GridDeviation:
    """Deviation strategy realized as per-grid-point action tables.

    ``table[x_own]`` rows are indexed by the nearest grid point during
    rollouts, exactly like the equilibrium policy lookup; ``first_step``
    optionally overrides the table at the first decision.
    """

    def __init__(self, name: str, agent: int, table: np.ndarray,
                 first_step: Optional[np.ndarray] = None):
        self.name = name
        self.agent = agent
        self.table = table  # (n_points, nx_i, na_i)
        self.first_step = first_step

    def dist_batch(self, t: int, nearest: np.ndarray, x_own: np.ndarray) -> np.ndarray:
        tab = self.first_step if (t == 0 and self.first_step is not None) else self.table
        return tab[nearest, x_own, :]

    def action_dist(self, t: int, belief: ProductBelief, agent: int, x: int,
                    grid: Optional[BeliefGrid] = None) -> np.ndarray:
        g = grid
        p = g.nearest_index(belief)
        tab = self.first_step if (t == 0 and self.first_step is not None) else self.table
        return tab[p, x, :]


def equilibrium_deviation(theta: PolicyGrid, agent: int) -> GridDeviation:
    """The null deviation: play the equilibrium policy itself."""
    return GridDeviation("equilibrium", agent, theta.gammas[agent])


def one_step_pure_deviation(theta: PolicyGrid, agent: int, action: int) -> GridDeviation:
    """Play a fixed pure action once, then return to equilibrium."""
    g = theta.gammas[agent]
    first = np.zeros_like(g)
    first[:, :, action] = 1.0
    return GridDeviation(f"one-step-a{action}", agent, g, first_step=first)


def uniform_random_deviation(spec: GameSpec, theta: PolicyGrid, agent: int) -> GridDeviation:
    na = spec.action_counts[agent]
    tab = np.full_like(theta.gammas[agent], 1.0 / na)
    return GridDeviation("uniform-random", agent, tab)


def myopic_greedy_deviation(spec: GameSpec, theta: PolicyGrid, agent: int) -> GridDeviation:
    """Maximize the stage reward only, against the equilibrium prescriptions.

    Ties break to the lowest action index (a pure deterministic probe).
    """
    batch = _StageBatch(spec, theta.grid.marginals, None, SolverConfig(), mirror=None)
    q = batch.q_values(theta.gammas, None)[agent]  # (P, nx, na), stage only
    best = np.argmax(q, axis=2)
    tab = np.zeros_like(theta.gammas[agent])
    P, nx = best.shape
    tab[np.repeat(np.arange(P), nx), np.tile(np.arange(nx), P), best.reshape(-1)] = 1.0
    return GridDeviation("myopic-greedy", agent, tab)


def default_deviation_library(spec: GameSpec, theta: PolicyGrid, agent: int) -> list[GridDeviation]:
    devs = [one_step_pure_deviation(theta, agent, a)
            for a in range(spec.action_counts[agent])]
    devs.append(uniform_random_deviation(spec, theta, agent))
    devs.append(myopic_greedy_deviation(spec, theta, agent))
    return devs


# ---------------------------------------------------------------------------
# Monte Carlo deviation gaps
# ---------------------------------------------------------------------------


@dataclass
class DeviationEntry:
    agent: int
    belief: list
    x: int
    deviation: str
    horizon: int
    n_samples: int
    seed: int
    w_mean: float
    v_ref: float
    gap: float
    se: float
    tail: float
    norm_gap: float
    norm_se: float
    norm_tail: float
    eps_dev: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "belief": self.belief,
            "type": self.x,
            "deviation": self.deviation,
            "horizon": self.horizon,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "reward_to_go_mean": self.w_mean,
            "value_reference": self.v_ref,
            "gap": self.gap,
            "se": self.se,
            "tail_bound": self.tail,
            "normalized_gap": self.norm_gap,
            "normalized_se": self.norm_se,
            "normalized_tail": self.norm_tail,
            "eps_dev": self.eps_dev,
            "verdict": "pass" if self.passed else "fail",
        }


@dataclass
class DeviationReport:
    entries: list[DeviationEntry] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def worst(self) -> Optional[DeviationEntry]:
        if not self.entries:
            return None
        return max(self.entries, key=lambda e: e.norm_gap - 3 * e.norm_se - e.norm_tail)

    def to_dict(self) -> dict:
        return {
            "all_passed": self.all_passed,
            "n_tests": len(self.entries),
            "entries": [e.to_dict() for e in self.entries],
        }


def tail_bound(spec: GameSpec, V_max: float, T: int) -> float:
    """Truncation error bound: everything after step T is geometric."""
    if spec.delta == 0.0:
        return 0.0
    return spec.delta ** T * (spec.r_max / (1.0 - spec.delta) + V_max)


def auto_horizon(spec: GameSpec, V_max: float, eps_dev: float = 1e-3) -> int:
    """Smallest horizon whose normalized tail bound is below eps_dev / 10."""
    if spec.delta == 0.0:
        return 1
    target = eps_dev / 10.0
    scale = (1.0 - spec.delta) * (spec.r_max / (1.0 - spec.delta) + V_max)
    if scale <= target:
        return 1
    T = int(np.ceil(np.log(target / scale) / np.log(spec.delta)))
    return max(T, 1)


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of a (S, k) probability matrix."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1)


def deviation_gap_mc(
    spec: GameSpec,
    V: ValueTable,
    theta: PolicyGrid,
    i: int,
    pi: ProductBelief,
    x_i: int,
    deviation: GridDeviation,
    T: int,
    n_samples: int,
    seed: int,
    eps_dev: float = 1e-3,
) -> DeviationEntry:
    """Monte Carlo estimate of the deviation's truncated reward-to-go gap.

    Simulates agent ``i`` playing ``deviation`` against the equilibrium
    policy for T steps, adds the discounted terminal value, and compares the
    sample mean with the interpolated equilibrium value at (pi, x_i). The
    belief along each rollout is updated with the equilibrium prescriptions
    (nearest grid point), never the deviation. Passing means the
    (1-delta)-normalized gap does not exceed eps_dev plus the normalized tail
    bound plus three standard errors. Deterministic given the seed: all
    randomness flows from one generator in a fixed draw order.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, i, x_i]))
    grid = theta.grid
    n = spec.n_agents
    S = int(n_samples)

    pis = [np.tile(pi[j], (S, 1)) for j in range(n)]
    x = np.empty((S, n), dtype=np.intp)
    x[:, i] = x_i
    for j in range(n):
        if j != i:
            x[:, j] = _sample_categorical(rng, np.tile(pi[j], (S, 1)))

    total = np.zeros(S)
    disc = 1.0
    a = np.empty((S, n), dtype=np.intp)
    for t in range(T):
        nearest = grid.nearest_index_batch(pis)
        gam = [theta.gammas[j][nearest] for j in range(n)]
        for j in range(n):
            if j == i:
                dist = deviation.dist_batch(t, nearest, x[:, i])
            else:
                dist = np.take_along_axis(
                    gam[j], x[:, j][:, None, None], axis=1
                )[:, 0, :]
            a[:, j] = _sample_categorical(rng, dist)
        af = np.ravel_multi_index(tuple(a.T), spec.action_counts)
        xf = np.ravel_multi_index(tuple(x.T), spec.type_counts)
        total += disc * spec.rewards[i][xf, af]
        # Public belief update with equilibrium prescriptions.
        new_pis = []
        for j in range(n):
            qsel = spec.q[j][:, af, :].transpose(1, 0, 2)  # (S, nx, nx')
            gj = np.take_along_axis(
                gam[j], a[:, j][:, None, None], axis=2
            )[:, :, 0]  # (S, nx)
            like = pis[j] * gj
            den = like.sum(axis=1)
            ok = den > 1e-12
            num = np.einsum("sx,sxy->sy", like, qsel)
            pf = np.einsum("sx,sxy->sy", pis[j], qsel)
            new_pis.append(
                np.where(ok[:, None], num / np.where(ok, den, 1.0)[:, None], pf)
            )
        pis = new_pis
        # Private types advance.
        for j in range(n):
            rows = spec.q[j][x[:, j], af, :]
            x[:, j] = _sample_categorical(rng, rows)
        disc *= spec.delta
    if spec.delta > 0.0 or T == 0:
        term = np.zeros(S)
        for xv in range(spec.type_counts[i]):
            mask = x[:, i] == xv
            if np.any(mask):
                term[mask] = V.evaluate_batch([m[mask] for m in pis], i, xv)
        total += disc * term

    v_ref = V.evaluate(pi, i, x_i)
    w_mean = float(total.mean())
    se = float(total.std(ddof=1) / np.sqrt(S)) if S > 1 else float("inf")
    tb = tail_bound(spec, V.max_abs(), T)
    norm = 1.0 - spec.delta
    gap = w_mean - v_ref
    passed = norm * gap <= eps_dev + norm * tb + 3 * norm * se
    return DeviationEntry(
        agent=i,
        belief=[list(map(float, pi[j])) for j in range(n)],
        x=x_i,
        deviation=deviation.name,
        horizon=T,
        n_samples=S,
        seed=seed,
        w_mean=w_mean,
        v_ref=float(v_ref),
        gap=float(gap),
        se=se,
        tail=float(tb),
        norm_gap=float(norm * gap),
        norm_se=float(norm * se),
        norm_tail=float(norm * tb),
        eps_dev=eps_dev,
        passed=bool(passed),
    )


def sample_eval_points(spec: GameSpec, n: int, seed: int) -> list[tuple[ProductBelief, int, int]]:
    """Deterministic random (belief, agent, type) probes for the suite."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE11EF]))
    out = []
    for _ in range(n):
        pi = ProductBelief.from_lists(
            [rng.dirichlet(np.ones(k)) for k in spec.type_counts]
        )
        i = int(rng.integers(spec.n_agents))
        x = int(rng.integers(spec.type_counts[i]))
        out.append((pi, i, x))
    return out


def run_deviation_suite(
    spec: GameSpec,
    V: ValueTable,
    theta: PolicyGrid,
    n_points: int = 64,
    n_samples: int = 1000,
    seed: int = 0,
    eps_dev: float = 1e-3,
    T: Optional[int] = None,
    extra_deviations: Optional[Sequence[GridDeviation]] = None,
) -> DeviationReport:
    """Deviation probes at sampled (belief, agent, type) points.

    Uses the default library (one-step pure per action, uniform-random
    stationary, myopic-greedy) plus any user-supplied grid deviations. The
    truncation horizon defaults to the smallest one whose tail bound is
    negligible next to eps_dev.
    """
    if T is None:
        T = auto_horizon(spec, V.max_abs(), eps_dev)
    report = DeviationReport()
    libs: dict[int, list[GridDeviation]] = {}
    for k, (pi, i, x_i) in enumerate(sample_eval_points(spec, n_points, seed)):
        if i not in libs:
            libs[i] = default_deviation_library(spec, theta, i)
            if extra_deviations:
                libs[i] += [d for d in extra_deviations if d.agent == i]
        for dev in libs[i]:
            entry = deviation_gap_mc(
                spec, V, theta, i, pi, x_i, dev, T, n_samples,
                seed=seed + 1000 * k, eps_dev=eps_dev,
            )
            report.entries.append(entry)
    return report


def lemma4_check(
    spec: GameSpec,
    V: ValueTable,
    T: int,
    cfg: Optional[SolverConfig] = None,
    theta: Optional[PolicyGrid] = None,
) -> float:
    """Finite/infinite consistency: re-solve T stages with V as terminal reward.

    For a genuine stationary fixed point, every stage value table must
    reproduce V up to solver tolerance and interpolation slack; returns the
    maximum discrepancy over stages, grid points, agents, and types.
    ``theta`` warm-starts the stage solves on the converged branch.
    """
    sol = backward_solve(spec, T, V, V.grid, cfg=cfg, warm=theta)
    worst = 0.0
    for vt in sol.values[:-1]:
        worst = max(worst, vt.sup_distance(V))
    return worst
