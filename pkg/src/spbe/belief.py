"""Common-belief objects and the public belief update.

Beliefs over private types are kept in product form: one marginal per agent
over that agent's own types. The update applies, per agent, a Bayes step on
the agent's observed action followed by the type-transition push-forward;
when the observed action has probability (numerically) zero under the
prescription, the Bayes step is skipped and only the push-forward applies, so
the update is total.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .game import GameSpec

# Bayes denominators at or below this threshold take the push-forward branch.
EPS_DENOM = 1e-12


class PolicyLookupError(KeyError):
    """A policy could not produce a prescription at a visited belief."""


@dataclass(frozen=True)
class ProductBelief:
    """Per-agent marginal distributions over own types."""

    marginals: tuple[np.ndarray, ...]

    @staticmethod
    def from_lists(marginals) -> "ProductBelief":
        out = []
        for m in marginals:
            v = np.ascontiguousarray(np.asarray(m, dtype=float))
            v.flags.writeable = False
            out.append(v)
        return ProductBelief(tuple(out))

    @staticmethod
    def uniform(spec: GameSpec) -> "ProductBelief":
        return ProductBelief.from_lists(
            [np.full(k, 1.0 / k) for k in spec.type_counts]
        )

    @staticmethod
    def initial(spec: GameSpec) -> "ProductBelief":
        """The prior belief given by the spec's initial type distributions."""
        return ProductBelief.from_lists([np.array(v) for v in spec.q0])

    def __getitem__(self, i: int) -> np.ndarray:
        return self.marginals[i]

    def __len__(self) -> int:
        return len(self.marginals)

    def validate(self, tol: float = 1e-9) -> None:
        for i, m in enumerate(self.marginals):
            if np.any(m < -tol) or abs(float(m.sum()) - 1.0) > tol:
                raise ValueError(f"marginal {i} is not a distribution: {m}")

    def close_to(self, other: "ProductBelief", tol: float = 1e-12) -> bool:
        return all(
            np.allclose(a, b, rtol=0.0, atol=tol)
            for a, b in zip(self.marginals, other.marginals)
        )


@dataclass(frozen=True)
class Prescription:
    """Per-agent map from own type to a distribution over own actions.

    ``gammas[i]`` has shape ``(n_types_i, n_actions_i)`` with rows summing
    to 1.
    """

    gammas: tuple[np.ndarray, ...]

    @staticmethod
    def from_lists(gammas) -> "Prescription":
        out = []
        for g in gammas:
            v = np.ascontiguousarray(np.asarray(g, dtype=float))
            v.flags.writeable = False
            out.append(v)
        return Prescription(tuple(out))

    @staticmethod
    def uniform(spec: GameSpec) -> "Prescription":
        return Prescription.from_lists(
            [np.full((k, m), 1.0 / m) for k, m in zip(spec.type_counts, spec.action_counts)]
        )

    def __getitem__(self, i: int) -> np.ndarray:
        return self.gammas[i]

    def validate(self, tol: float = 1e-9) -> None:
        for i, g in enumerate(self.gammas):
            if np.any(g < -tol) or np.any(np.abs(g.sum(axis=-1) - 1.0) > tol):
                raise ValueError(f"prescription {i} rows are not distributions")


def push_forward(pi_i: np.ndarray, a_flat: int, q_i: np.ndarray) -> np.ndarray:
    """Unconditional type-transition update: sum_x pi(x) q(x' | x, a)."""
    return pi_i @ q_i[:, a_flat, :]


def update_marginal(
    pi_i: np.ndarray,
    gamma_i: np.ndarray,
    a_own: int,
    a_flat: int,
    q_i: np.ndarray,
    eps: float = EPS_DENOM,
) -> np.ndarray:
    """One agent's belief update from an observed action.

    Computes the Bayes posterior over the agent's current type given that it
    played action ``a_own`` under prescription ``gamma_i``, then pushes the
    posterior through the type transition for the flat joint action
    ``a_flat``. When the prior probability of ``a_own`` is at most ``eps``
    the Bayes step is undefined and the unconditional push-forward is
    returned instead.
    """
    like = pi_i * gamma_i[:, a_own]
    den = float(like.sum())
    if den > eps:
        return (like / den) @ q_i[:, a_flat, :]
    return push_forward(pi_i, a_flat, q_i)


def update_joint(
    pi: ProductBelief,
    gamma: Prescription,
    a: Sequence[int],
    spec: GameSpec,
) -> ProductBelief:
    """Apply update_marginal independently per agent; product form is kept."""
    a = tuple(int(k) for k in a)
    a_flat = spec.flat_action(a)
    out = []
    for j in range(spec.n_agents):
        m = update_marginal(pi[j], gamma[j], a[j], a_flat, spec.q[j])
        m.flags.writeable = False
        out.append(m)
    return ProductBelief(tuple(out))


def as_policy_fn(policy) -> Callable[[ProductBelief, int], Prescription]:
    """Normalize a policy argument to a callable ``(belief, t) -> Prescription``.

    Accepts a callable directly, an object with a ``prescription_at_belief``
    method (stationary policy), or a sequence of such objects indexed by
    stage ``t`` (time-dependent policy).
    """
    if callable(policy):
        return policy
    if hasattr(policy, "prescription_at_belief"):
        return lambda belief, t: policy.prescription_at_belief(belief)
    if isinstance(policy, (list, tuple)):
        stages = list(policy)

        def staged(belief: ProductBelief, t: int) -> Prescription:
            if t >= len(stages):
                raise PolicyLookupError(
                    f"policy defined for {len(stages)} stages, asked for t={t}"
                )
            return stages[t].prescription_at_belief(belief)

        return staged
    raise TypeError(f"cannot interpret {type(policy).__name__} as a policy")


def forward_beliefs(
    spec: GameSpec,
    policy,
    actions: Sequence[Sequence[int]],
    pi_1: ProductBelief,
) -> list[ProductBelief]:
    """Run the public belief recursion along a sequence of joint actions.

    ``policy`` supplies the prescription used for the Bayes step at each
    visited belief (see :func:`as_policy_fn`). Returns beliefs for times
    ``1..len(actions)+1``; with no actions the output is ``[pi_1]``.
    """
    fn = as_policy_fn(policy)
    out = [pi_1]
    for t, a in enumerate(actions):
        gamma = fn(out[-1], t)
        out.append(update_joint(out[-1], gamma, a, spec))
    return out
