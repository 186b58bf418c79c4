"""Independent oracles the test suite checks the library against.

Everything here is deliberately written from first principles with no reuse
of the library's solver internals: brute-force joint-distribution Bayes for
the belief update, closed-form support enumeration for the one-shot
two-type contribution game, and plain dynamic programming helpers.
"""
from __future__ import annotations

import itertools

import numpy as np


def brute_force_posterior(pi_i, gamma_i, a_own, a_flat, q_i):
    """Bayes posterior over next own type by joint enumeration.

    Enumerates the joint distribution of (current type, own action, next
    type), conditions on the observed own action, and marginalizes; returns
    None when the observed action has prior probability zero.
    """
    pi_i = np.asarray(pi_i, dtype=float)
    gamma_i = np.asarray(gamma_i, dtype=float)
    nx = len(pi_i)
    joint = np.zeros(nx)
    norm = 0.0
    for x in range(nx):
        for xn in range(nx):
            p = pi_i[x] * gamma_i[x, a_own] * q_i[x, a_flat, xn]
            joint[xn] += p
        norm += pi_i[x] * gamma_i[x, a_own]
    if norm <= 0.0:
        return None
    return joint / norm


def one_shot_contribution_equilibria(pi1, pi2, x_high, x_low):
    """All one-shot equilibria of the two-type contribution game.

    Types are (high cost, low cost) with beliefs pi_i = P(opponent i is high
    cost). Assumes x_high > 1 > x_low > 0, so the high-cost type never
    contributes and only the low-cost contribution probabilities (u, v) for
    agents 1 and 2 remain. Returns a list of (u, v) pairs; one-dimensional
    continua are returned via their extreme points.
    """
    assert x_high > 1.0 > x_low > 0.0
    c = 1.0 - x_low  # low-cost gain from contributing

    def best_u(v):
        """Best responses of agent 1's low type to v = P(2's low contributes)."""
        p2 = (1.0 - pi2) * v
        if p2 < c - 1e-15:
            return [1.0]
        if p2 > c + 1e-15:
            return [0.0]
        return [0.0, 1.0, None]  # indifferent: anything

    out = []
    # Pure-pure combinations.
    for u in (0.0, 1.0):
        for v in (0.0, 1.0):
            if u in best_u(v) or None in best_u(v):
                p1 = (1.0 - pi1) * u
                ok_v = (
                    (v == 1.0 and p1 <= c + 1e-15)
                    or (v == 0.0 and p1 >= c - 1e-15)
                )
                if ok_v:
                    out.append((u, v))
    # Interior mixed: both indifferent.
    if 1.0 - pi2 > c and 1.0 - pi1 > c:
        out.append((c / (1.0 - pi1), c / (1.0 - pi2)))
    # Boundary-mixed families (one side indifferent) appear as pure cases
    # above through the tolerance; extreme points suffice for membership
    # tests because the equilibrium segments are axis-aligned.
    return out


def symmetric_branch_low_contribution(pi1, pi2, x_high, x_low):
    """The agent-symmetric preferred-branch solution u = gamma1(contribute|low).

    Derived by hand for the one-shot game: contribute when the opponent is
    likely high-cost, free-ride when the opponent is likely low-cost and own
    reputation is high, and mix (pinned by the opponent's indifference) when
    both reputations are low. The branch prefers pure contribution on
    boundary ties, matching a preference for symmetric supports with fewer
    mixed slots and contribution first.
    """
    assert x_high > 1.0 > x_low > 0.0
    c = 1.0 - x_low
    tau = x_low  # belief threshold: (1 - tau) == c
    if pi2 > tau + 1e-15:
        return 1.0
    if pi1 <= tau + 1e-15:
        return min(1.0, c / (1.0 - pi1))
    # pi1 > tau: free-ride region, except exactly on the pi2 == tau line
    # where pure contribution survives weakly.
    if abs(pi2 - tau) <= 1e-15:
        return 1.0
    return 0.0


def exact_reward_to_go(spec, strategies, belief, i, x_i, T, terminal=None,
                       update_gamma=None):
    """Trivially-recursive reward-to-go used to cross-check the verifier.

    ``strategies[j]`` maps (t, belief, x_j) to an action distribution;
    ``update_gamma`` maps a belief to the prescription profile used for the
    public update (defaults to the played strategies, which is only correct
    when nobody deviates).
    """
    from spbe.belief import Prescription, update_joint

    def gamma_at(pi, t):
        if update_gamma is not None:
            return update_gamma(pi)
        return Prescription.from_lists(
            [
                np.stack([strategies[j](t, pi, x) for x in range(spec.type_counts[j])])
                for j in range(spec.n_agents)
            ]
        )

    def node(t, x, pi):
        if t >= T:
            return 0.0 if terminal is None else terminal.evaluate(pi, i, x[i])
        total = 0.0
        xf = spec.flat_type(x)
        for a in itertools.product(*(range(k) for k in spec.action_counts)):
            pa = 1.0
            for j, aj in enumerate(a):
                pa *= strategies[j](t, pi, x[j])[aj]
            if pa == 0.0:
                continue
            af = spec.flat_action(a)
            val = spec.rewards[i][xf, af]
            if spec.delta > 0.0:
                nxt = update_joint(pi, gamma_at(pi, t), a, spec)
                ev = 0.0
                for xn in itertools.product(*(range(k) for k in spec.type_counts)):
                    px = 1.0
                    for j, xj in enumerate(xn):
                        px *= spec.q[j][x[j], af, xj]
                    if px > 0.0:
                        ev += px * node(t + 1, xn, nxt)
                val += spec.delta * ev
            total += pa * val
        return total

    others = [j for j in range(spec.n_agents) if j != i]
    W = 0.0
    for xo in itertools.product(*(range(spec.type_counts[j]) for j in others)):
        px = 1.0
        for j, xj in zip(others, xo):
            px *= belief[j][xj]
        if px == 0.0:
            continue
        xt = list(xo)
        xt.insert(i, x_i)
        W += px * node(0, tuple(xt), belief)
    return W
