"""Forward simulation of equilibrium play and the induced belief chain.

Following the solved policy, the public belief is a Markov chain driven by
the sampled joint actions; trajectories expose how fast agents' actions
reveal their private types. Policy lookups snap to the nearest grid point
rather than interpolating, since mixing two equilibrium branches is not
itself an equilibrium prescription.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .belief import ProductBelief, update_joint
from .game import GameSpec
from .grid import PolicyGrid


def coordination_benchmarks(x: float) -> tuple[float, float]:
    """Per-round payoff bounds for the symmetric contribution game at cost x.

    Full coordination alternates single contributors between same-type
    agents, averaging (1 + (1 - x)) / 2 = 1 - x/2 per agent per round.
    Without coordination, both contribute independently with the best common
    probability, which can deliver at most (1 - x/2)**2. Neither bound need
    be an equilibrium; they calibrate the efficiency of computed values.
    """
    full = 1.0 - x / 2.0
    return full, full * full


@dataclass
class Trajectory:
    """One simulated play path. Beliefs are recorded at decision times, so
    ``beliefs[t]`` is the public belief when ``actions[t]`` is chosen;
    horizon-1 trajectories contain a single step and no update."""

    types: np.ndarray  # (horizon, n_agents) int
    actions: np.ndarray  # (horizon, n_agents) int
    beliefs: list[ProductBelief]  # length horizon
    rewards: np.ndarray  # (horizon, n_agents) float
    seed: int
    policy_tag: str = ""

    @property
    def horizon(self) -> int:
        return self.types.shape[0]

    def discounted_reward(self, delta: float) -> np.ndarray:
        disc = delta ** np.arange(self.horizon)
        return (disc[:, None] * self.rewards).sum(axis=0)

    def concentration_round(self, threshold: float) -> Optional[int]:
        """Rounds of play before every agent's true type carries belief mass
        at least ``threshold`` (0 if the initial belief already does); None
        if that never happens within the horizon."""
        for t, pi in enumerate(self.beliefs):
            if all(
                pi[i][self.types[t, i]] >= threshold
                for i in range(self.types.shape[1])
            ):
                return t
        return None

    def dump_csv(self, path, type_labels: Sequence[Sequence[str]]) -> None:
        n = self.types.shape[1]
        header = (
            ["t"]
            + [f"x^{i + 1}" for i in range(n)]
            + [f"a^{i + 1}" for i in range(n)]
            + [f"pi{i + 1}_{type_labels[i][0]}" for i in range(n)]
            + [f"r^{i + 1}" for i in range(n)]
        )
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(self.horizon):
                row = (
                    [t + 1]
                    + [int(v) for v in self.types[t]]
                    + [int(v) for v in self.actions[t]]
                    + [repr(float(self.beliefs[t][i][0])) for i in range(n)]
                    + [repr(float(v)) for v in self.rewards[t]]
                )
                w.writerow(row)


def sample_trajectory(
    spec: GameSpec,
    theta: PolicyGrid,
    pi_1: ProductBelief,
    x_1="sample",
    horizon: int = 10,
    seed: int = 0,
) -> Trajectory:
    """Simulate equilibrium play for ``horizon`` steps.

    Initial types are drawn from the spec's prior unless given explicitly.
    Bit-identical output for identical inputs and seed: a single generator
    drives all draws in a fixed order (types, then per-step actions agent by
    agent, then type transitions).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    n = spec.n_agents
    if isinstance(x_1, str):
        if x_1 != "sample":
            raise ValueError(f"x_1 must be a type profile or 'sample', got {x_1!r}")
        x = [int(rng.choice(spec.type_counts[i], p=spec.q0[i])) for i in range(n)]
    else:
        x = [int(v) for v in x_1]

    types = np.empty((horizon, n), dtype=np.intp)
    acts = np.empty((horizon, n), dtype=np.intp)
    rewards = np.empty((horizon, n))
    beliefs: list[ProductBelief] = []
    pi = pi_1
    for t in range(horizon):
        beliefs.append(pi)
        types[t] = x
        gamma = theta.prescription_at_belief(pi)
        for i in range(n):
            acts[t, i] = int(rng.choice(spec.action_counts[i], p=gamma[i][x[i]]))
        af = spec.flat_action(acts[t])
        xf = spec.flat_type(x)
        for i in range(n):
            rewards[t, i] = spec.rewards[i][xf, af]
        if t + 1 < horizon:
            pi = update_joint(pi, gamma, acts[t], spec)
            x = [
                int(rng.choice(spec.type_counts[i], p=spec.q[i][x[i], af]))
                for i in range(n)
            ]
    return Trajectory(
        types=types, actions=acts, beliefs=beliefs, rewards=rewards, seed=int(seed)
    )


@dataclass
class LearningStats:
    """Type-learning summary for one initial belief over many seeds."""

    initial_belief: list
    threshold: float
    horizon: int
    rounds: list  # per seed: rounds to concentration, None if never
    discounted_rewards: np.ndarray  # (n_seeds, n_agents)

    @property
    def frac_concentrated(self) -> float:
        return sum(r is not None for r in self.rounds) / len(self.rounds)

    def frac_within(self, max_rounds: int) -> float:
        return sum(
            r is not None and r <= max_rounds for r in self.rounds
        ) / len(self.rounds)

    @property
    def median_rounds(self) -> float:
        vals = [float("inf") if r is None else float(r) for r in self.rounds]
        return float(np.median(vals))

    def to_dict(self) -> dict:
        rew_mean = self.discounted_rewards.mean(axis=0)
        rew_se = self.discounted_rewards.std(axis=0, ddof=1) / np.sqrt(
            self.discounted_rewards.shape[0]
        )
        return {
            "initial_belief": self.initial_belief,
            "threshold": self.threshold,
            "horizon": self.horizon,
            "rounds_to_concentration": [
                None if r is None else int(r) for r in self.rounds
            ],
            "frac_concentrated": self.frac_concentrated,
            "median_rounds": None
            if np.isinf(self.median_rounds)
            else self.median_rounds,
            "mean_discounted_reward": [float(v) for v in rew_mean],
            "se_discounted_reward": [float(v) for v in rew_se],
        }


@dataclass
class EnsembleSummary:
    per_belief: list[LearningStats] = field(default_factory=list)
    threshold: float = 0.95
    horizon: int = 10

    def all_rounds(self) -> list:
        out = []
        for st in self.per_belief:
            out.extend(st.rounds)
        return out

    @property
    def frac_concentrated(self) -> float:
        rounds = self.all_rounds()
        return sum(r is not None for r in rounds) / len(rounds)

    def frac_within(self, max_rounds: int) -> float:
        rounds = self.all_rounds()
        return sum(r is not None and r <= max_rounds for r in rounds) / len(rounds)

    @property
    def median_rounds(self) -> float:
        vals = [float("inf") if r is None else float(r) for r in self.all_rounds()]
        return float(np.median(vals))

    def to_dict(self) -> dict:
        med = self.median_rounds
        return {
            "threshold": self.threshold,
            "horizon": self.horizon,
            "n_runs": len(self.all_rounds()),
            "frac_concentrated": self.frac_concentrated,
            "median_rounds": None if np.isinf(med) else med,
            "per_belief": [st.to_dict() for st in self.per_belief],
        }


def markov_chain_ensemble(
    spec: GameSpec,
    theta: PolicyGrid,
    initial_beliefs: Sequence[ProductBelief],
    n_seeds: int = 40,
    horizon: int = 11,
    threshold: float = 0.95,
    seed: int = 0,
) -> EnsembleSummary:
    """Simulate the belief chain from a lattice of initial beliefs.

    Seeds are derived per (belief, replicate) pair from the master seed, so
    the ensemble is reproducible and insensitive to iteration order.
    """
    if not initial_beliefs or n_seeds < 1:
        raise ValueError("need at least one initial belief and one seed")
    out = EnsembleSummary(per_belief=[], threshold=threshold, horizon=horizon)
    for b_idx, pi_1 in enumerate(initial_beliefs):
        rounds = []
        rews = np.empty((n_seeds, spec.n_agents))
        for s_idx in range(n_seeds):
            child = int(
                np.random.SeedSequence([int(seed), b_idx, s_idx]).generate_state(1)[0]
            )
            traj = sample_trajectory(
                spec, theta, pi_1, "sample", horizon=horizon, seed=child
            )
            rounds.append(traj.concentration_round(threshold))
            rews[s_idx] = traj.discounted_reward(spec.delta)
        out.per_belief.append(
            LearningStats(
                initial_belief=[list(map(float, pi_1[i])) for i in range(spec.n_agents)],
                threshold=threshold,
                horizon=horizon,
                rounds=rounds,
                discounted_rewards=rews,
            )
        )
    return out


def belief_lattice(spec: GameSpec, k: int = 5) -> list[ProductBelief]:
    """A k-per-axis lattice of interior product beliefs (two-type agents)."""
    if any(n != 2 for n in spec.type_counts):
        raise ValueError("belief_lattice supports two-type agents only")
    pts = np.linspace(0.0, 1.0, k + 2)[1:-1]
    out = []
    for combo in np.ndindex(*([k] * spec.n_agents)):
        out.append(
            ProductBelief.from_lists(
                [[pts[c], 1.0 - pts[c]] for c in combo]
            )
        )
    return out
