"""Game specifications: validation, JSON I/O, and built-in generators.

A game couples N agents, each holding a private finite type that evolves as a
controlled Markov chain driven by the publicly observed joint action profile.
All tensors use a canonical row-major layout with agent 0 slowest, matching
the JSON file schema, so that identical files produce bit-identical tensors.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Probability rows are accepted if they sum to 1 within this tolerance and
# have no entry below its negative; they are renormalized exactly afterwards.
PROB_TOL = 1e-9


class SpecFormatError(ValueError):
    """File or object cannot even be shaped into game tensors."""


class SpecValidationError(ValueError):
    """Well-formed tensors that violate game invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid game spec:\n  " + "\n  ".join(self.violations))


def flatten_profile(profile: Sequence[int], sizes: Sequence[int]) -> int:
    """Row-major flat index of a joint profile, agent 0 slowest."""
    return int(np.ravel_multi_index(tuple(int(k) for k in profile), tuple(sizes)))


def unflatten_profile(flat: int, sizes: Sequence[int]) -> tuple[int, ...]:
    """Inverse of :func:`flatten_profile`."""
    return tuple(int(k) for k in np.unravel_index(int(flat), tuple(sizes)))


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GameSpec:
    """Immutable description of a dynamic game with private types.

    Fields
    ------
    type_labels, action_labels : per-agent tuples of string labels, in
        canonical (declaration) order.
    q0 : per-agent initial distribution over own types, shape ``(n_x,)``.
    q : per-agent transition tensor ``q[i][x, a_flat, x']`` giving the
        probability of moving from own type ``x`` to ``x'`` under the flat
        joint action ``a_flat``.
    rewards : per-agent tensor ``rewards[i][x_flat, a_flat]`` over flat joint
        type and action profiles.
    delta : common discount factor in ``[0, 1)``.
    """

    type_labels: tuple[tuple[str, ...], ...]
    action_labels: tuple[tuple[str, ...], ...]
    q0: tuple[np.ndarray, ...]
    q: tuple[np.ndarray, ...]
    rewards: tuple[np.ndarray, ...]
    delta: float

    @property
    def n_agents(self) -> int:
        return len(self.type_labels)

    @property
    def type_counts(self) -> tuple[int, ...]:
        return tuple(len(t) for t in self.type_labels)

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.action_labels)

    @property
    def n_joint_types(self) -> int:
        return int(np.prod(self.type_counts))

    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.action_counts))

    @property
    def r_max(self) -> float:
        return max(float(np.max(np.abs(r))) for r in self.rewards)

    def flat_action(self, profile: Sequence[int]) -> int:
        return flatten_profile(profile, self.action_counts)

    def action_profile(self, flat: int) -> tuple[int, ...]:
        return unflatten_profile(flat, self.action_counts)

    def flat_type(self, profile: Sequence[int]) -> int:
        return flatten_profile(profile, self.type_counts)

    def type_profile(self, flat: int) -> tuple[int, ...]:
        return unflatten_profile(flat, self.type_counts)

    def joint_actions(self):
        """All joint action profiles in flat order."""
        return [self.action_profile(a) for a in range(self.n_joint_actions)]

    def is_symmetric(self) -> bool:
        """True for two-agent games invariant under swapping the agents."""
        if self.n_agents != 2:
            return False
        if self.type_labels[0] != self.type_labels[1]:
            return False
        if self.action_labels[0] != self.action_labels[1]:
            return False
        if not np.array_equal(self.q0[0], self.q0[1]):
            return False
        if not np.array_equal(self.q[0], self.q[1]):
            return False
        # R^2 at (x1,x2),(a1,a2) must equal R^1 at (x2,x1),(a2,a1).
        nx, na = self.type_counts, self.action_counts
        r0 = self.rewards[0].reshape(nx + na)
        r1 = self.rewards[1].reshape(nx + na)
        return np.allclose(r1, r0.transpose(1, 0, 3, 2), rtol=0.0, atol=1e-12)

    def to_json_dict(self) -> dict:
        return {
            "agents": self.n_agents,
            "types": [list(t) for t in self.type_labels],
            "actions": [list(a) for a in self.action_labels],
            "q0": [v.tolist() for v in self.q0],
            "q": [v.tolist() for v in self.q],
            "reward": [v.tolist() for v in self.rewards],
            "delta": self.delta,
        }

    def content_hash(self) -> str:
        """SHA-256 of the canonical JSON serialization."""
        blob = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _build_spec(
    types, actions, q0, q, reward, delta, renormalize: bool
) -> GameSpec:
    """Shape raw nested lists into a GameSpec; shape problems raise SpecFormatError."""
    try:
        type_labels = tuple(tuple(str(x) for x in t) for t in types)
        action_labels = tuple(tuple(str(a) for a in al) for al in actions)
        n = len(type_labels)
        if len(action_labels) != n or len(q0) != n or len(q) != n or len(reward) != n:
            raise SpecFormatError(
                "per-agent lists must all have length %d (agents)" % n
            )
        q0_t = tuple(np.asarray(v, dtype=float) for v in q0)
        q_t = tuple(np.asarray(v, dtype=float) for v in q)
        r_t = tuple(np.asarray(v, dtype=float) for v in reward)
        delta_f = float(delta)
    except SpecFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise SpecFormatError(f"cannot shape spec tensors: {exc}") from exc

    spec = GameSpec(
        type_labels=type_labels,
        action_labels=action_labels,
        q0=tuple(_readonly(v) for v in q0_t),
        q=tuple(_readonly(v) for v in q_t),
        rewards=tuple(_readonly(v) for v in r_t),
        delta=delta_f,
    )
    violations = validate_spec(spec)
    if violations:
        raise SpecValidationError(violations)
    if renormalize:
        spec = _renormalized(spec)
    return spec


def _renormalized(spec: GameSpec) -> GameSpec:
    """Clip tiny negatives and rescale every probability row to sum exactly 1."""

    def fix_rows(a: np.ndarray) -> np.ndarray:
        out = np.clip(np.array(a, dtype=float), 0.0, None)
        out /= out.sum(axis=-1, keepdims=True)
        return _readonly(out)

    return GameSpec(
        type_labels=spec.type_labels,
        action_labels=spec.action_labels,
        q0=tuple(fix_rows(v) for v in spec.q0),
        q=tuple(fix_rows(v) for v in spec.q),
        rewards=spec.rewards,
        delta=spec.delta,
    )


def validate_spec(spec: GameSpec) -> list[str]:
    """Return descriptions of every violated invariant (empty when valid)."""
    bad: list[str] = []
    n = spec.n_agents
    if n < 1:
        bad.append("agents: must be a positive integer")
        return bad
    for i in range(n):
        if len(spec.type_labels[i]) < 1:
            bad.append(f"types[{i}]: must be nonempty")
        if len(spec.action_labels[i]) < 1:
            bad.append(f"actions[{i}]: must be nonempty")
        if len(set(spec.type_labels[i])) != len(spec.type_labels[i]):
            bad.append(f"types[{i}]: labels must be unique")
        if len(set(spec.action_labels[i])) != len(spec.action_labels[i]):
            bad.append(f"actions[{i}]: labels must be unique")
    if bad:
        return bad

    nx = spec.type_counts
    njt, nja = spec.n_joint_types, spec.n_joint_actions
    for i in range(n):
        v = spec.q0[i]
        if v.shape != (nx[i],):
            bad.append(f"q0[{i}]: shape {v.shape}, expected ({nx[i]},)")
            continue
        if np.any(v < -PROB_TOL):
            j = int(np.argmin(v))
            bad.append(f"q0[{i}][{j}]: negative entry {v[j]:.3g}")
        if abs(float(v.sum()) - 1.0) > PROB_TOL:
            bad.append(f"q0[{i}]: sums to {float(v.sum()):.12g}, expected 1")

    for i in range(n):
        t = spec.q[i]
        if t.shape != (nx[i], nja, nx[i]):
            bad.append(f"q[{i}]: shape {t.shape}, expected ({nx[i]}, {nja}, {nx[i]})")
            continue
        if np.any(t < -PROB_TOL):
            x, a, _ = np.unravel_index(int(np.argmin(t)), t.shape)
            bad.append(f"q[{i}][{x}][{a}]: negative entry")
        sums = t.sum(axis=-1)
        off = np.abs(sums - 1.0) > PROB_TOL
        for x, a in zip(*np.nonzero(off)):
            bad.append(
                f"q[{i}][{x}][{a}]: row sums to {sums[x, a]:.12g}, expected 1"
            )

    for i in range(n):
        r = spec.rewards[i]
        if r.shape != (njt, nja):
            bad.append(f"reward[{i}]: shape {r.shape}, expected ({njt}, {nja})")
            continue
        if not np.all(np.isfinite(r)):
            x, a = np.unravel_index(int(np.argmax(~np.isfinite(r))), r.shape)
            bad.append(f"reward[{i}][{x}][{a}]: non-finite entry")

    if not math.isfinite(spec.delta) or spec.delta < 0.0:
        bad.append(f"delta: must be in [0, 1), got {spec.delta}")
    elif spec.delta >= 1.0:
        bad.append("delta: discount must be < 1")
    return bad


def load_spec(path) -> GameSpec:
    """Load and validate a game spec from a JSON file.

    Raises SpecFormatError on malformed files and SpecValidationError listing
    all violated invariants. Probability rows are renormalized exactly after
    passing the 1e-9 tolerance check.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise SpecFormatError(f"{path}: top level must be a JSON object")
    missing = [k for k in ("agents", "types", "actions", "q0", "q", "reward", "delta") if k not in raw]
    if missing:
        raise SpecFormatError(f"{path}: missing fields {missing}")
    spec = _build_spec(
        raw["types"], raw["actions"], raw["q0"], raw["q"], raw["reward"],
        raw["delta"], renormalize=True,
    )
    if spec.n_agents != int(raw["agents"]):
        raise SpecFormatError(
            f"{path}: 'agents' is {raw['agents']} but {spec.n_agents} agents declared"
        )
    return spec


def save_spec(spec: GameSpec, path) -> None:
    """Write the canonical JSON form (round-trips through load_spec)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def make_spec(types, actions, q0, q, reward, delta) -> GameSpec:
    """Build and validate a GameSpec from in-memory nested lists or arrays."""
    return _build_spec(types, actions, q0, q, reward, delta, renormalize=True)


def public_goods_spec(x_high: float = 1.2, x_low: float = 0.2,
                      delta: float = 0.95, q0=None) -> GameSpec:
    """Two-agent public goods game with static private cost types.

    Each agent privately knows its contribution cost, ``x_high`` or ``x_low``
    (type labels "H" and "L"). Contributing (action "1") yields ``1 - cost``
    to the contributor; not contributing yields 1 if the other agent
    contributed and 0 otherwise. Types never change. ``q0`` defaults to the
    uniform prior for both agents.
    """
    if not (0.0 <= delta < 1.0):
        raise ValueError(f"delta must be in [0, 1), got {delta}")
    costs = (float(x_high), float(x_low))
    nx, na = 2, 2
    # Static types: transition is the identity for every joint action.
    q_i = np.zeros((nx, na * na, nx))
    for x in range(nx):
        q_i[x, :, x] = 1.0
    rewards = []
    for i in range(2):
        r = np.zeros((nx * nx, na * na))
        for xf in range(nx * nx):
            xs = unflatten_profile(xf, (nx, nx))
            for af in range(na * na):
                acts = unflatten_profile(af, (na, na))
                if acts[i] == 1:
                    r[xf, af] = 1.0 - costs[xs[i]]
                else:
                    r[xf, af] = float(acts[1 - i])
        rewards.append(r)
    if q0 is None:
        q0 = [[0.5, 0.5], [0.5, 0.5]]
    return make_spec(
        types=[["H", "L"], ["H", "L"]],
        actions=[["0", "1"], ["0", "1"]],
        q0=q0,
        q=[q_i, q_i],
        reward=rewards,
        delta=delta,
    )
