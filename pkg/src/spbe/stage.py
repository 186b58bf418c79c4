"""Per-belief stage games: expected action values and equilibrium prescriptions.

At a fixed common belief, each agent-type picks an action distribution that is
a best response to the other prescriptions, where payoffs combine the stage
reward with the discounted continuation value evaluated at the updated belief.
The continuation belief always uses the candidate (equilibrium) prescriptions,
never a deviation, which makes the objective linear in each agent-type's own
action distribution.

Two solution paths are implemented:

* support enumeration (two-agent, two-action games): enumerate support
  patterns in a fixed preference order, solve the linear indifference
  conditions for interior mixing probabilities (refreshing the continuation
  constants when the discount is positive), and accept the first pattern that
  passes a fresh incentive check. This path is exact, deterministic, and
  finds the interior mixed solutions that best-response dynamics cycles
  around, so it runs first.
* damped best-response iteration from a deterministic start set, used for
  games outside the support path's scope and as a fallback.

With symmetry enforcement on (two-agent symmetric games), agent 2's
prescription at belief (pi_1, pi_2) is constrained to equal agent 1's at
(pi_2, pi_1), so each belief point is solved jointly with its mirror.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .belief import EPS_DENOM, Prescription, ProductBelief, update_joint
from .game import GameSpec
from .grid import BeliefGrid, PolicyGrid, ValueTable

# Support codes per (member, type) slot, in branch-preference order:
# pure "high" action first, then pure "low", then mixed.
_P1, _P0, _MIX = 0, 1, 2


@dataclass
class SolverConfig:
    """Tolerances and method parameters for stage equilibrium solving."""

    eps_eq: float = 1e-6  # accepted best-response gap
    tie_tol: float = 1e-9  # action-value ties inside best responses
    damping: float = 0.5  # damped best-response step size
    max_br_iters: int = 500  # per start
    max_refresh_iters: int = 300  # continuation-constant refreshes (delta > 0)
    refresh_tol: float = 1e-10  # convergence of mixing probabilities
    z_tol: float = 1e-7  # slack for mixing probabilities outside [0, 1]
    det_tol: float = 1e-12  # singularity gate for indifference systems
    symmetric: bool = False
    use_support_enumeration: bool = True
    max_nonconverged_frac: float = 0.02  # grid solves abort above this


@dataclass
class StageFixedPointReport:
    prescription: Prescription
    residual: float
    iterations: int
    converged: bool
    restarts: int
    support_id: int = -1
    values: Optional[list] = None  # achieved value per agent, arrays (n_types,)


def best_response(q: np.ndarray, tie_tol: float = 1e-9):
    """Optimal action set and value for one agent-type's action values.

    Any distribution supported on the returned set maximizes the (linear)
    stage objective.
    """
    q = np.asarray(q, dtype=float)
    value = float(np.max(q))
    actions = [int(a) for a in np.nonzero(q >= value - tie_tol)[0]]
    return actions, value


def _as_point_value(V) -> Optional[Callable[[ProductBelief, int, int], float]]:
    if V is None:
        return None
    if isinstance(V, ValueTable):
        return V.evaluate
    if callable(V):
        return V
    raise TypeError(f"cannot evaluate values from {type(V).__name__}")


def action_values(
    spec: GameSpec,
    pi: ProductBelief,
    gamma: Prescription,
    V,
    i: int,
    x_i: int,
) -> np.ndarray:
    """Expected value of each own action for agent ``i`` with type ``x_i``.

    Exact enumeration over opponent types, joint actions, and own next types;
    the continuation belief is updated with the prescription ``gamma`` for
    every agent. ``V`` may be a ValueTable, a callable
    ``(belief, agent, x) -> float``, or None; it is never evaluated when the
    discount is zero.
    """
    vfun = _as_point_value(V)
    others = [j for j in range(spec.n_agents) if j != i]
    nx_i = spec.type_counts[i]
    q = np.zeros(spec.action_counts[i])
    for af in range(spec.n_joint_actions):
        a = spec.action_profile(af)
        if spec.delta > 0.0 and vfun is not None:
            nxt = update_joint(pi, gamma, a, spec)
            cont = sum(
                spec.q[i][x_i, af, xp] * vfun(nxt, i, xp) for xp in range(nx_i)
            )
            w_m = 1.0
            for j in others:
                w_m *= float(pi[j] @ gamma[j][:, a[j]])
            q[a[i]] += spec.delta * w_m * cont
        for x_other in itertools.product(*(range(spec.type_counts[j]) for j in others)):
            xt = list(x_other)
            xt.insert(i, x_i)
            w = 1.0
            for j, xj in zip(others, x_other):
                w *= float(pi[j][xj] * gamma[j][xj, a[j]])
            q[a[i]] += w * spec.rewards[i][spec.flat_type(xt), af]
    return q


# ---------------------------------------------------------------------------
# Batched evaluation over many belief points
# ---------------------------------------------------------------------------


def _as_batch_value(V):
    """Normalize V to a batched evaluator (marginals, agent, x) -> (P,)."""
    if V is None:
        return None
    if isinstance(V, ValueTable):
        return V.evaluate_batch
    vfun = _as_point_value(V)

    def batch(marginals, agent, x):
        P = marginals[0].shape[0]
        out = np.empty(P)
        for p in range(P):
            out[p] = vfun(ProductBelief.from_lists([m[p] for m in marginals]), agent, x)
        return out

    return batch


class _StageBatch:
    """Vectorized stage-game evaluation at a batch of belief points.

    ``mirror`` switches on the symmetric coupling: one unknown prescription
    array G indexed by point, with agent 1's prescription at point p given by
    G[p] and agent 2's by G[mirror[p]]. Without it, one unknown per agent.
    """

    def __init__(self, spec: GameSpec, marginals, V, cfg: SolverConfig,
                 mirror: Optional[np.ndarray] = None):
        self.spec = spec
        self.pi = [np.ascontiguousarray(m, dtype=float) for m in marginals]
        self.P = self.pi[0].shape[0]
        self.value = _as_batch_value(V)
        self.cfg = cfg
        self.mirror = mirror
        self.nx = spec.type_counts
        self.na = spec.action_counts
        self.acts = [spec.action_profile(af) for af in range(spec.n_joint_actions)]
        self.agents_needed = [0] if mirror is not None else list(range(spec.n_agents))
        self._delta_r = None
        if spec.n_agents == 2 and all(n == 2 for n in self.na):
            self._delta_r = self._stage_reward_diffs()

    def _stage_reward_diffs(self):
        """dR[i][x_i, x_o, a_o] = R_i(play 1) - R_i(play 0), two-action games."""
        out = []
        for i in range(2):
            o = 1 - i
            d = np.zeros((self.nx[i], self.nx[o], 2))
            for x_i in range(self.nx[i]):
                for x_o in range(self.nx[o]):
                    xt = (x_i, x_o) if i == 0 else (x_o, x_i)
                    xf = self.spec.flat_type(xt)
                    for a_o in range(2):
                        a1 = (1, a_o) if i == 0 else (a_o, 1)
                        a0 = (0, a_o) if i == 0 else (a_o, 0)
                        d[x_i, x_o, a_o] = (
                            self.spec.rewards[i][xf, self.spec.flat_action(a1)]
                            - self.spec.rewards[i][xf, self.spec.flat_action(a0)]
                        )
            out.append(d)
        return out

    def pres_of(self, G):
        """Effective per-agent prescriptions from the unknown(s)."""
        if self.mirror is None:
            return G
        return [G, G[self.mirror]]

    def f_update(self, j: int, pres_j: np.ndarray, af: int, a_j: int) -> np.ndarray:
        qslice = self.spec.q[j][:, af, :]
        like = self.pi[j] * pres_j[:, :, a_j]
        den = like.sum(axis=1)
        ok = den > EPS_DENOM
        num = like @ qslice
        pf = self.pi[j] @ qslice
        safe = np.where(ok, den, 1.0)[:, None]
        return np.where(ok[:, None], num / safe, pf)

    def continuation(self, pres):
        """cont[i][:, af, x_i]: continuation-value kernel per joint action.

        None when the discount is zero or no value evaluator is given; the
        value evaluator is never touched in that case.
        """
        if self.spec.delta == 0.0 or self.value is None:
            return None
        cont = [None] * self.spec.n_agents
        for i in self.agents_needed:
            cont[i] = np.zeros((self.P, self.spec.n_joint_actions, self.nx[i]))
        for af in range(self.spec.n_joint_actions):
            a = self.acts[af]
            marg = [self.f_update(j, pres[j], af, a[j])
                    for j in range(self.spec.n_agents)]
            for i in self.agents_needed:
                vint = np.stack(
                    [self.value(marg, i, xp) for xp in range(self.nx[i])], axis=1
                )
                cont[i][:, af, :] = vint @ self.spec.q[i][:, af, :].T
        return cont

    def q_values(self, pres, cont):
        """Action values q[i][:, x_i, a_i] for every needed agent."""
        n = self.spec.n_agents
        m = [np.einsum("px,pxa->pa", self.pi[j], pres[j]) for j in range(n)]
        q = [np.zeros((self.P, self.nx[i], self.na[i])) for i in range(n)]
        for xf in range(self.spec.n_joint_types):
            xt = self.spec.type_profile(xf)
            for af in range(self.spec.n_joint_actions):
                a = self.acts[af]
                for i in self.agents_needed:
                    r = self.spec.rewards[i][xf, af]
                    if r == 0.0:
                        continue
                    w = None
                    for j in range(n):
                        if j == i:
                            continue
                        term = self.pi[j][:, xt[j]] * pres[j][:, xt[j], a[j]]
                        w = term if w is None else w * term
                    q[i][:, xt[i], a[i]] += r if w is None else w * r
        if cont is not None:
            for af in range(self.spec.n_joint_actions):
                a = self.acts[af]
                for i in self.agents_needed:
                    w = None
                    for j in range(n):
                        if j == i:
                            continue
                        term = m[j][:, a[j]]
                        w = term if w is None else w * term
                    if w is None:
                        q[i][:, :, a[i]] += self.spec.delta * cont[i][:, af, :]
                    else:
                        q[i][:, :, a[i]] += (
                            self.spec.delta * w[:, None] * cont[i][:, af, :]
                        )
        return q

    def indiff_coeffs(self, pres, cont):
        """Affine coefficients of q(1)-q(0) in the opponent's mixing probs.

        For each needed agent i: q_i(x_i,1)-q_i(x_i,0) = K[i][:,x_i]
        + sum_xo C[i][:,x_i,xo] * z_o(xo), treating continuation values as
        constants (they are refreshed by the caller). Two-agent, two-action
        games only.
        """
        K, C = {}, {}
        for i in self.agents_needed:
            o = 1 - i
            dR = self._delta_r[i]  # (nx_i, nx_o, 2)
            base = self.pi[o] @ dR[:, :, 0].T  # (P, nx_i)
            slope = self.pi[o][:, None, :] * (dR[:, :, 1] - dR[:, :, 0])[None, :, :]
            if cont is not None:
                dc = np.empty((self.P, self.nx[i], 2))
                for a_o in range(2):
                    hi = self.spec.flat_action((1, a_o) if i == 0 else (a_o, 1))
                    lo = self.spec.flat_action((0, a_o) if i == 0 else (a_o, 0))
                    dc[:, :, a_o] = cont[i][:, hi, :] - cont[i][:, lo, :]
                base = base + self.spec.delta * dc[:, :, 0]
                extra = self.spec.delta * (dc[:, :, 1] - dc[:, :, 0])
                slope = slope + self.pi[o][:, None, :] * extra[:, :, None]
            K[i], C[i] = base, slope
        return K, C

    def residual_from_q(self, q, pres):
        """Best-response gap per point, maxed over needed agents and types."""
        res = np.zeros(self.P)
        for i in self.agents_needed:
            best = q[i].max(axis=2)
            got = np.einsum("pxa,pxa->px", pres[i], q[i])
            res = np.maximum(res, (best - got).max(axis=1))
        return res

    def br_step(self, q):
        """Uniform-over-ties best-response prescriptions from action values."""
        out = []
        for i in self.agents_needed:
            best = q[i].max(axis=2, keepdims=True)
            opt = (q[i] >= best - self.cfg.tie_tol).astype(float)
            out.append(opt / opt.sum(axis=2, keepdims=True))
        return out


# ---------------------------------------------------------------------------
# Support enumeration (two-agent, two-action games)
# ---------------------------------------------------------------------------


def _candidate_profiles(n_slots: int, paired: bool) -> list[tuple[int, ...]]:
    """All support code tuples in deterministic branch-preference order.

    Preference: symmetric-consistent patterns first (both members of a
    mirrored pair share the same per-type supports), then fewer mixed slots,
    then lexicographic with the pure "high" action preferred.
    """
    codes = list(itertools.product((_P1, _P0, _MIX), repeat=n_slots))
    if paired:
        half = n_slots // 2

        def key(c):
            return (0 if c[:half] == c[half:] else 1, sum(k == _MIX for k in c), c)
    else:

        def key(c):
            return (sum(k == _MIX for k in c), c)

    return sorted(codes, key=key)


def _profile_id(codes: Sequence[int]) -> int:
    out = 0
    for c in codes:
        out = out * 3 + int(c)
    return out


def _decode_profile(pid: int, n_slots: int) -> tuple[int, ...]:
    out = []
    for _ in range(n_slots):
        out.append(pid % 3)
        pid //= 3
    return tuple(reversed(out))


class _UnitSystem:
    """Indifference-system solver for a batch of coupled units.

    A unit is one belief point with both agents' prescriptions unknown
    (general mode) or a (point, mirrored point) pair sharing one unknown
    prescription function (symmetric mode). Slots are (member, type) pairs:
    member 0 holds agent 1's prescription at the unit's first point, member 1
    holds the opposing prescription (agent 2's there, which in symmetric mode
    lives at the mirrored point). Mixed slots contribute linear indifference
    equations whose unknowns are the opposing member's mixing probabilities;
    pure slots contribute identity rows, keeping every system square.
    """

    def __init__(self, spec: GameSpec, cfg: SolverConfig, marginals,
                 V, u0: np.ndarray, u1: np.ndarray, symmetric: bool):
        self.spec = spec
        self.cfg = cfg
        self.symmetric = symmetric
        self.U = len(u0)
        self.diag = u0 == u1
        if symmetric:
            pts = np.concatenate([u0, u1])
            lm = np.concatenate(
                [np.arange(self.U) + self.U, np.arange(self.U)]
            ).astype(np.intp)
            self.batch = _StageBatch(
                spec, [m[pts] for m in marginals], V, cfg, mirror=lm)
            self.member_agent = (0, 0)
            self.member_rows = (np.arange(self.U), np.arange(self.U) + self.U)
            self.nx0 = self.nx1 = spec.type_counts[0]
        else:
            self.batch = _StageBatch(
                spec, [m[u0] for m in marginals], V, cfg, mirror=None)
            self.member_agent = (0, 1)
            self.member_rows = (np.arange(self.U), np.arange(self.U))
            self.nx0, self.nx1 = spec.type_counts
        self.n_slots = self.nx0 + self.nx1

    def _pres(self, z0: np.ndarray, z1: np.ndarray):
        if self.symmetric:
            g = np.empty((2 * self.U, self.nx0, 2))
            g[: self.U, :, 1] = z0
            g[self.U :, :, 1] = z1
            g[:, :, 0] = 1.0 - g[:, :, 1]
            return self.batch.pres_of(g)
        g0 = np.stack([1.0 - z0, z0], axis=2)
        g1 = np.stack([1.0 - z1, z1], axis=2)
        return [g0, g1]

    def solve(self, codes: np.ndarray, z_init0, z_init1, active):
        """Solve per-unit indifference systems for the given support codes.

        Returns (z0, z1, ok, iters): mixing probabilities per member, a mask
        of units whose systems were solvable with in-range solutions, and the
        number of continuation refreshes used.
        """
        cfg = self.cfg
        n0, n1 = self.nx0, self.nx1
        k = self.n_slots
        pure0 = np.where(codes[:, :n0] == _P1, 1.0, 0.0)
        pure1 = np.where(codes[:, n0:] == _P1, 1.0, 0.0)
        mix0 = codes[:, :n0] == _MIX
        mix1 = codes[:, n0:] == _MIX
        z0 = np.where(mix0, np.clip(z_init0, 0.0, 1.0), pure0)
        z1 = np.where(mix1, np.clip(z_init1, 0.0, 1.0), pure1)
        ok = active.copy()
        if not (mix0.any() or mix1.any()):
            # Pure assignment: nothing to solve, validation decides.
            return z0, z1, ok, 0
        raw0, raw1 = z0.copy(), z1.copy()
        one_shot = self.spec.delta == 0.0 or self.batch.value is None
        max_iters = 1 if one_shot else cfg.max_refresh_iters
        # Per-unit step size, shrunk whenever the iteration stops contracting:
        # the linearization ignores the continuation's dependence on z, so its
        # slope can be badly off near interpolation kinks.
        lam = np.ones(self.U)
        prev_change = np.full(self.U, np.inf)
        iters = 0
        for it in range(max_iters):
            iters = it + 1
            pres = self._pres(z0, z1)
            cont = self.batch.continuation(pres)
            K, C = self.batch.indiff_coeffs(pres, cont)
            r0, r1 = self.member_rows
            a0, a1 = self.member_agent
            K0, C0 = K[a0][r0], C[a0][r0]  # eqs at member 0, vars at member 1
            K1, C1 = K[a1][r1], C[a1][r1]  # eqs at member 1, vars at member 0
            A = np.zeros((self.U, k, k))
            b = np.zeros((self.U, k))
            for s in range(n0):
                A[:, s, n0:] = np.where(mix0[:, s, None], C0[:, s, :], 0.0)
                A[:, s, s] += np.where(mix0[:, s], 0.0, 1.0)
                b[:, s] = np.where(mix0[:, s], -K0[:, s], pure0[:, s])
            for s in range(n1):
                row = n0 + s
                A[:, row, :n0] = np.where(mix1[:, s, None], C1[:, s, :], 0.0)
                A[:, row, row] += np.where(mix1[:, s], 0.0, 1.0)
                b[:, row] = np.where(mix1[:, s], -K1[:, s], pure1[:, s])
            det_ok = np.abs(np.linalg.det(A)) > cfg.det_tol
            ok &= det_ok
            sol = np.zeros((self.U, k))
            if np.any(ok):
                sol[ok] = np.linalg.solve(A[ok], b[ok][:, :, None])[:, :, 0]
            raw0 = np.where(ok[:, None], sol[:, :n0], raw0)
            raw1 = np.where(ok[:, None], sol[:, n0:], raw1)
            new0 = np.where(mix0, np.clip(raw0, 0.0, 1.0), pure0)
            new1 = np.where(mix1, np.clip(raw1, 0.0, 1.0), pure1)
            if not one_shot:
                new0 = z0 + lam[:, None] * (new0 - z0)
                new1 = z1 + lam[:, None] * (new1 - z1)
            unit_change = np.maximum(
                np.abs(new0 - z0).max(axis=1), np.abs(new1 - z1).max(axis=1)
            )
            slow = ok & (unit_change > 0.95 * prev_change)
            lam[slow] = np.maximum(lam[slow] * 0.5, 1.0 / 256.0)
            prev_change = unit_change
            change = float(np.max(unit_change[ok])) if np.any(ok) else 0.0
            z0, z1 = new0, new1
            if self.symmetric and np.any(self.diag):
                z1[self.diag] = z0[self.diag]
            if change <= cfg.refresh_tol:
                break
        in_range = (
            np.all(((raw0 > -cfg.z_tol) & (raw0 < 1.0 + cfg.z_tol)) | ~mix0, axis=1)
            & np.all(((raw1 > -cfg.z_tol) & (raw1 < 1.0 + cfg.z_tol)) | ~mix1, axis=1)
        )
        ok &= in_range
        return z0, z1, ok, iters

    def defect(self, z0: np.ndarray, z1: np.ndarray) -> np.ndarray:
        """Exact play-1-minus-play-0 value gap per slot, (U, n_slots).

        One full evaluation at the given mixing probabilities; no
        linearization error (the affine coefficients are exact at the point
        they are computed).
        """
        pres = self._pres(z0, z1)
        cont = self.batch.continuation(pres)
        K, C = self.batch.indiff_coeffs(pres, cont)
        r0, r1 = self.member_rows
        a0, a1 = self.member_agent
        gap0 = K[a0][r0] + np.einsum("uxo,uo->ux", C[a0][r0], z1)
        gap1 = K[a1][r1] + np.einsum("uxo,uo->ux", C[a1][r1], z0)
        return np.concatenate([gap0, gap1], axis=1)

    def rescue(self, codes: np.ndarray, z0, z1, act: np.ndarray):
        """Globally robust root search for failed mixed-support units.

        The linearized refresh ignores how a unit's own mixing moves the
        continuation belief (the signaling feedback), which can defeat it
        when that feedback dominates. This fallback scans the mixed-slot
        probabilities on a coarse lattice to pick a basin, then polishes
        with a damped finite-difference Newton on the exact defect. Only
        patterns with at most two unknowns are handled (which covers
        one-type-per-member mixing); others are left untouched.
        Assumes homogeneous ``codes`` rows.
        """
        cfg = self.cfg
        n0 = self.nx0
        mix0 = codes[0, :n0] == _MIX
        mix1 = codes[0, n0:] == _MIX
        slots0 = [s for s in range(self.nx0) if mix0[s]]
        slots1 = [s for s in range(self.nx1) if mix1[s]]
        z0 = z0.copy()
        z1 = z1.copy()
        touched = np.zeros(self.U, dtype=bool)

        def run(rows_mask, unknown, sync_diag):
            if not np.any(rows_mask) or not 1 <= len(unknown) <= 2:
                return
            k = len(unknown)

            def apply(zvec):
                a0v, a1v = z0.copy(), z1.copy()
                for col, (mem, s) in enumerate(unknown):
                    tgt = a0v if mem == 0 else a1v
                    tgt[rows_mask, s] = zvec[rows_mask, col]
                if sync_diag:
                    a1v[rows_mask] = a0v[rows_mask]
                return a0v, a1v

            def score_at(zvec):
                a0v, a1v = apply(zvec)
                d = self.defect(a0v, a1v)
                cols = [s if mem == 0 else n0 + s for mem, s in unknown]
                return d[:, cols]

            # Coarse basin scan.
            pts = np.linspace(0.0, 1.0, 17 if k == 1 else 9)
            best_z = np.full((self.U, k), 0.5)
            best_s = np.full(self.U, np.inf)
            for combo in itertools.product(pts, repeat=k):
                zvec = np.tile(np.asarray(combo), (self.U, 1))
                sc = np.max(np.abs(score_at(zvec)), axis=1)
                better = rows_mask & (sc < best_s)
                best_s[better] = sc[better]
                best_z[better] = np.asarray(combo)
            # Damped Newton with finite-difference Jacobian.
            z = best_z
            lam = np.ones(self.U)
            fd = 1e-5
            for _ in range(40):
                D0 = score_at(z)
                s0 = np.max(np.abs(D0), axis=1)
                improved = rows_mask & (s0 <= best_s)
                best_s[improved] = s0[improved]
                best_z[improved] = z[improved]
                if not np.any(rows_mask & (best_s > 0.5 * cfg.eps_eq)):
                    break
                J = np.empty((self.U, k, k))
                for d in range(k):
                    zd = z.copy()
                    step = np.where(z[:, d] < 0.5, fd, -fd)
                    zd[:, d] = z[:, d] + step
                    J[:, :, d] = (score_at(zd) - D0) / step[:, None]
                det_ok = np.abs(np.linalg.det(J)) > cfg.det_tol
                delta = np.zeros((self.U, k))
                if np.any(det_ok):
                    delta[det_ok] = -np.linalg.solve(
                        J[det_ok], D0[det_ok][:, :, None]
                    )[:, :, 0]
                z_new = np.clip(z + lam[:, None] * delta, 0.0, 1.0)
                worse = rows_mask & (s0 > 0.95 * np.where(best_s > 0, best_s, np.inf))
                lam[worse] = np.maximum(lam[worse] * 0.5, 1.0 / 64.0)
                z = np.where((rows_mask & det_ok)[:, None], z_new, z)
            a0v, a1v = apply(best_z)
            z0[rows_mask] = a0v[rows_mask]
            z1[rows_mask] = a1v[rows_mask]
            touched[rows_mask] = True

        diag_rows = act & self.diag
        pair_rows = act & ~self.diag
        run(diag_rows, [(0, s) for s in slots0], sync_diag=True)
        run(pair_rows, [(0, s) for s in slots0] + [(1, s) for s in slots1],
            sync_diag=False)
        return z0, z1, touched

    def validate(self, codes, z0, z1):
        """Fresh incentive check per unit: (valid, residual)."""
        cfg = self.cfg
        n0 = self.nx0
        pres = self._pres(z0, z1)
        cont = self.batch.continuation(pres)
        q = self.batch.q_values(pres, cont)
        valid = np.ones(self.U, dtype=bool)
        res = np.zeros(self.U)
        members = (
            (self.member_rows[0], self.member_agent[0], self.nx0, codes[:, :n0], z0),
            (self.member_rows[1], self.member_agent[1], self.nx1, codes[:, n0:], z1),
        )
        for rows, agent, nx, cm, zm in members:
            qm = q[agent][rows]  # (U, nx, 2)
            gap = qm[:, :, 1] - qm[:, :, 0]  # value of playing 1 over 0
            for s in range(nx):
                c = cm[:, s]
                g = gap[:, s]
                bad = (
                    ((c == _P1) & (-g > cfg.eps_eq))
                    | ((c == _P0) & (g > cfg.eps_eq))
                    | ((c == _MIX) & (np.abs(g) > cfg.eps_eq))
                )
                valid &= ~bad
            got = qm[:, :, 0] * (1.0 - zm) + qm[:, :, 1] * zm
            gapres = np.maximum(qm[:, :, 0], qm[:, :, 1]) - got
            res = np.maximum(res, gapres.max(axis=1))
        return valid, res


@dataclass
class BatchSolveResult:
    """Stage equilibria at a batch of points, in per-agent array form."""

    gammas: list[np.ndarray]  # per agent (P, nx_i, na_i)
    values: list[np.ndarray]  # per agent (P, nx_i), achieved stage values
    residuals: np.ndarray
    converged: np.ndarray
    support_ids: np.ndarray
    iterations: np.ndarray
    restarts: np.ndarray


def solve_stage_batch(
    spec: GameSpec,
    marginals: Sequence[np.ndarray],
    V,
    cfg: SolverConfig,
    mirror: Optional[np.ndarray] = None,
    warm_gammas: Optional[Sequence[np.ndarray]] = None,
    warm_ids: Optional[np.ndarray] = None,
) -> BatchSolveResult:
    """Solve the stage fixed point at every point of a belief batch.

    ``mirror`` (a point permutation) activates the symmetric coupling; the
    game must then be agent-symmetric. ``warm_gammas``/``warm_ids`` reuse a
    previous solution's prescriptions and support patterns first, which keeps
    the equilibrium branch stable across outer iterations.
    """
    P = marginals[0].shape[0]
    sym = mirror is not None
    two_action = (
        cfg.use_support_enumeration
        and spec.n_agents == 2
        and all(n == 2 for n in spec.action_counts)
    )

    out_g = [np.zeros((P, spec.type_counts[i], spec.action_counts[i]))
             for i in range(spec.n_agents)]
    out_res = np.full(P, np.inf)
    out_conv = np.zeros(P, dtype=bool)
    out_sid = np.full(P, -1, dtype=np.int64)
    out_iter = np.zeros(P, dtype=np.int64)
    out_restart = np.zeros(P, dtype=np.int64)

    if two_action:
        if sym:
            all_u0 = np.nonzero(np.arange(P) <= mirror)[0].astype(np.intp)
            all_u1 = mirror[all_u0].astype(np.intp)
        else:
            all_u0 = np.arange(P, dtype=np.intp)
            all_u1 = all_u0
        U = len(all_u0)
        nx0 = spec.type_counts[0]
        nx1 = spec.type_counts[0] if sym else spec.type_counts[1]
        n_slots = nx0 + nx1
        profiles = _candidate_profiles(n_slots, paired=sym)

        accepted = np.zeros(U, dtype=bool)
        unit_z0 = np.zeros((U, nx0))
        unit_z1 = np.zeros((U, nx1))
        unit_res = np.full(U, np.inf)
        unit_sid = np.full(U, -1, dtype=np.int64)
        unit_iter = np.zeros(U, dtype=np.int64)
        unit_restart = np.zeros(U, dtype=np.int64)

        def run_subset(idx: np.ndarray, codes: np.ndarray, z_init0, z_init1):
            """Solve+validate one support assignment on a subset of units."""
            sysm = _UnitSystem(
                spec, cfg, marginals, V, all_u0[idx], all_u1[idx], sym)
            act = np.ones(len(idx), dtype=bool)
            z0, z1, ok, iters = sysm.solve(codes, z_init0, z_init1, act)
            valid, res = sysm.validate(codes, z0, z1)
            take = ok & valid
            rows = idx[take]
            accepted[rows] = True
            unit_z0[rows] = z0[take]
            unit_z1[rows] = z1[take]
            unit_res[rows] = res[take]
            unit_iter[rows] = iters
            unit_restart[idx] += 1
            for r, cr in zip(rows, codes[take]):
                unit_sid[r] = _profile_id(cr)

        # Warm pass: retry each unit's previous support pattern first. Units
        # whose pattern is all-pure resolve in one evaluation, so they are
        # processed separately from the iterating mixed-pattern units.
        if warm_ids is not None and warm_gammas is not None:
            wid = warm_ids[all_u0]
            usable = np.nonzero(wid >= 0)[0]
            if len(usable):
                codes = np.array(
                    [_decode_profile(int(w), n_slots) for w in wid[usable]],
                    dtype=np.int8,
                )
                if sym:
                    wz0 = warm_gammas[0][all_u0[usable]][:, :, 1]
                    wz1 = warm_gammas[0][all_u1[usable]][:, :, 1]
                else:
                    wz0 = warm_gammas[0][all_u0[usable]][:, :, 1]
                    wz1 = warm_gammas[1][all_u1[usable]][:, :, 1]
                has_mix = np.any(codes == _MIX, axis=1)
                for part in (~has_mix, has_mix):
                    if np.any(part):
                        run_subset(usable[part], codes[part],
                                   wz0[part], wz1[part])

        # Preference-ordered enumeration on whatever remains.
        for cand in profiles:
            if np.all(accepted):
                break
            rem = ~accepted
            if sym and cand[:nx0] != cand[nx0:]:
                rem = rem & ~(all_u0 == all_u1)
            idx = np.nonzero(rem)[0]
            if not len(idx):
                continue
            codes = np.tile(np.asarray(cand, dtype=np.int8), (len(idx), 1))
            z_init0 = np.full((len(idx), nx0), 0.5)
            z_init1 = np.full((len(idx), nx1), 0.5)
            run_subset(idx, codes, z_init0, z_init1)

        # Write accepted units back to global per-agent arrays.
        g0 = np.stack([1.0 - unit_z0, unit_z0], axis=2)
        g1 = np.stack([1.0 - unit_z1, unit_z1], axis=2)
        if sym:
            out_g[0][all_u0] = g0
            out_g[0][all_u1] = g1
            out_g[1] = out_g[0][mirror]
        else:
            out_g[0], out_g[1] = g0, g1
        for arr_unit, arr_pt in (
            (unit_res, out_res),
            (unit_iter, out_iter),
            (unit_sid, out_sid),
            (unit_restart, out_restart),
        ):
            arr_pt[all_u0] = arr_unit
            arr_pt[all_u1] = arr_unit
        out_conv[all_u0] = accepted
        out_conv[all_u1] = accepted
        remaining_pts = ~out_conv
    else:
        remaining_pts = np.ones(P, dtype=bool)

    if np.any(remaining_pts):
        # After exhaustive support enumeration (two-action games) the damped
        # iteration is a best-effort diagnostic only, so it runs light.
        _br_solve(
            spec, marginals, V, cfg, mirror, warm_gammas, remaining_pts,
            out_g, out_res, out_conv, out_iter, out_restart,
            light=two_action,
        )
        if sym:
            out_g[1] = out_g[0][mirror]

    values = _achieved_values(spec, marginals, V, cfg, out_g)
    return BatchSolveResult(
        gammas=out_g,
        values=values,
        residuals=out_res,
        converged=out_conv,
        support_ids=out_sid,
        iterations=out_iter,
        restarts=out_restart,
    )


def _pure_prescription_starts(spec: GameSpec, agents: Sequence[int]):
    """Deterministic start list: every pure type->action map, then uniform."""
    per_agent = []
    for i in agents:
        nx, na = spec.type_counts[i], spec.action_counts[i]
        maps = []
        for combo in itertools.product(range(na), repeat=nx):
            g = np.zeros((nx, na))
            g[np.arange(nx), combo] = 1.0
            maps.append(g)
        maps.append(np.full((nx, na), 1.0 / na))
        per_agent.append(maps)
    n_starts = max(len(m) for m in per_agent)
    starts = []
    for k in range(n_starts):
        starts.append([per_agent[j][min(k, len(per_agent[j]) - 1)]
                       for j in range(len(agents))])
    return starts


def _br_solve(spec, marginals, V, cfg, mirror, warm_gammas, mask,
              out_g, out_res, out_conv, out_iter, out_restart, light=False):
    """Damped best-response iteration on the masked points (in place)."""
    pts = np.nonzero(mask)[0]
    sym = mirror is not None
    if sym:
        # Closure under mirroring keeps every unit's partner in the batch.
        pts = np.unique(np.concatenate([pts, mirror[pts]]))
        local = -np.ones(marginals[0].shape[0], dtype=np.intp)
        local[pts] = np.arange(len(pts))
        lm = local[mirror[pts]]
        batch = _StageBatch(spec, [m[pts] for m in marginals], V, cfg, mirror=lm)
    else:
        batch = _StageBatch(spec, [m[pts] for m in marginals], V, cfg, mirror=None)
    Pl = len(pts)
    agents = [0] if sym else list(range(spec.n_agents))

    if light:
        starts = [[np.full((spec.type_counts[i], spec.action_counts[i]),
                           1.0 / spec.action_counts[i]) for i in agents]]
        max_iters = min(cfg.max_br_iters, 100)
    else:
        starts = _pure_prescription_starts(spec, agents)
        max_iters = cfg.max_br_iters
    if warm_gammas is not None:
        warm = [np.array(warm_gammas[0][pts] if sym else warm_gammas[j][pts])
                for j in range(len(agents))]
        starts.insert(0, warm)

    done = np.zeros(Pl, dtype=bool)
    best_res = np.full(Pl, np.inf)
    for s_idx, start in enumerate(starts):
        if np.all(done):
            break
        G = [np.tile(g, (Pl, 1, 1)) if g.ndim == 2 else g.copy() for g in start]
        for it in range(max_iters):
            pres = batch.pres_of(G[0]) if sym else G
            cont = batch.continuation(pres)
            q = batch.q_values(pres, cont)
            res = batch.residual_from_q(q, pres)
            if sym:
                res = np.maximum(res, res[lm])
            update = res < best_res
            newly = (~done) & (res <= cfg.eps_eq)
            rows = np.nonzero((update & ~done) | newly)[0]
            if len(rows):
                best_res[rows] = res[rows]
                gpt = pts[rows]
                for k in range(len(agents)):
                    out_g[agents[k]][gpt] = G[k][rows]
                out_res[gpt] = res[rows]
                out_iter[gpt] = it + 1
                out_restart[gpt] += 1
            if np.any(newly):
                out_conv[pts[newly]] = True
                done |= newly
            if np.all(done):
                break
            br = batch.br_step(q)
            lam = cfg.damping
            for k in range(len(agents)):
                G[k] = (1.0 - lam) * G[k] + lam * br[k]


def _achieved_values(spec, marginals, V, cfg, gammas):
    """Stage values obtained by playing the given prescriptions."""
    batch = _StageBatch(spec, marginals, V, cfg, mirror=None)
    cont = batch.continuation(gammas)
    q = batch.q_values(gammas, cont)
    return [np.einsum("pxa,pxa->px", gammas[i], q[i]) for i in range(spec.n_agents)]


def stage_fixed_point(
    spec: GameSpec,
    pi: ProductBelief,
    V,
    cfg: Optional[SolverConfig] = None,
    warm: Optional[Prescription] = None,
) -> StageFixedPointReport:
    """Equilibrium prescriptions at one belief.

    With ``cfg.symmetric`` the belief is solved jointly with its agent-swapped
    mirror so the returned profile lies on the symmetric branch. Reports the
    best-response gap; ``converged`` means the gap is at most ``cfg.eps_eq``.
    """
    cfg = cfg or SolverConfig()
    mirror = None
    if cfg.symmetric:
        if not spec.is_symmetric():
            raise ValueError("symmetric solving requested for an asymmetric game")
        swapped = ProductBelief.from_lists([pi[1], pi[0]])
        if pi.close_to(swapped):
            marginals = [pi[j].reshape(1, -1) for j in range(2)]
            mirror = np.array([0], dtype=np.intp)
        else:
            marginals = [np.stack([pi[j], swapped[j]]) for j in range(2)]
            mirror = np.array([1, 0], dtype=np.intp)
    else:
        marginals = [pi[j].reshape(1, -1) for j in range(spec.n_agents)]

    warm_g = None
    if warm is not None:
        rows = marginals[0].shape[0]
        if mirror is not None:
            stackd = [warm[0]] if rows == 1 else [warm[0], warm[1]]
            warm_g = [np.stack(stackd)]
        else:
            warm_g = [np.tile(warm[i], (rows, 1, 1)) for i in range(spec.n_agents)]
    res = solve_stage_batch(spec, marginals, V, cfg, mirror=mirror,
                            warm_gammas=warm_g)
    pres = Prescription.from_lists([res.gammas[i][0] for i in range(spec.n_agents)])
    return StageFixedPointReport(
        prescription=pres,
        residual=float(res.residuals[0]),
        iterations=int(res.iterations[0]),
        converged=bool(res.converged[0]),
        restarts=int(res.restarts[0]),
        support_id=int(res.support_ids[0]),
        values=[res.values[i][0] for i in range(spec.n_agents)],
    )


@dataclass
class StageGridResult:
    policy: PolicyGrid
    values: list[np.ndarray]  # per agent (n_points, nx_i)


class GridNonConvergence(RuntimeError):
    def __init__(self, frac: float, cap: float):
        self.frac = frac
        super().__init__(
            f"stage equilibria failed at {frac:.1%} of grid points (cap {cap:.1%})"
        )


def solve_stage_grid(
    spec: GameSpec,
    grid: BeliefGrid,
    V,
    cfg: SolverConfig,
    warm: Optional[PolicyGrid] = None,
) -> StageGridResult:
    """One backward step: stage equilibria at every grid point against V."""
    mirror = None
    if cfg.symmetric:
        if not spec.is_symmetric():
            raise ValueError("symmetric solving requested for an asymmetric game")
        mirror = grid.mirror_permutation()
    warm_g = warm_ids = None
    if warm is not None:
        warm_g = [warm.gammas[0]] if cfg.symmetric else warm.gammas
        warm_ids = warm.support_ids
    res = solve_stage_batch(
        spec, grid.marginals, V, cfg, mirror=mirror,
        warm_gammas=warm_g, warm_ids=warm_ids,
    )
    frac = float(np.mean(~res.converged))
    if frac > cfg.max_nonconverged_frac:
        raise GridNonConvergence(frac, cfg.max_nonconverged_frac)
    policy = PolicyGrid(
        grid=grid,
        gammas=res.gammas,
        residuals=res.residuals,
        converged=res.converged,
        support_ids=res.support_ids,
        iterations=res.iterations,
        meta={"symmetric": cfg.symmetric, "eps_eq": cfg.eps_eq},
    )
    return StageGridResult(policy=policy, values=res.values)
