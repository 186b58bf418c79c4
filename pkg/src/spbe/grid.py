"""Belief-space discretization, value tables, and policy tables.

Each agent's belief simplex is parameterized by its first ``n_types - 1``
coordinates, gridded uniformly with step ``h``; the product over agents forms
a rectangular lattice, so off-grid evaluation is plain multilinear
interpolation. For two-type agents the parameterization is exact; for agents
with more types, lattice corners whose coordinates exceed the simplex are
projected onto it (clipped and renormalized) when realized as beliefs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .belief import Prescription, ProductBelief
from .game import GameSpec


class GridConfigError(ValueError):
    pass


class BeliefGrid:
    """Rectangular lattice over the product of per-agent belief simplices."""

    def __init__(self, type_counts: Sequence[int], h: float = 0.02):
        if not (0.0 < h <= 0.5):
            raise GridConfigError(f"grid step must be in (0, 0.5], got {h}")
        m = round(1.0 / h)
        if abs(m * h - 1.0) > 1e-9:
            raise GridConfigError(f"grid step {h} must divide 1 exactly")
        self.h = float(h)
        self.points_per_axis = m + 1
        self.type_counts = tuple(int(k) for k in type_counts)
        # One axis per free simplex coordinate, grouped by agent.
        self.axes_per_agent = tuple(k - 1 for k in self.type_counts)
        self.n_axes = int(sum(self.axes_per_agent))
        self.shape = (self.points_per_axis,) * self.n_axes
        self.n_points = int(np.prod(self.shape)) if self.n_axes else 1
        self.axis_values = np.linspace(0.0, 1.0, self.points_per_axis)
        self._coords = self._lattice_coords()
        self._marginals = self._realize_marginals()
        if self.n_axes:
            strides = np.array(
                [int(np.prod(self.shape[d + 1 :])) for d in range(self.n_axes)],
                dtype=np.intp,
            )
            corners = np.array(
                list(np.ndindex(*([2] * self.n_axes))), dtype=np.intp
            )
            self._flat_strides = strides
            self._corner_bits = corners
            self._corner_offsets = corners @ strides

    def _lattice_coords(self) -> np.ndarray:
        if self.n_axes == 0:
            return np.zeros((1, 0))
        grids = np.meshgrid(*([self.axis_values] * self.n_axes), indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def _realize_marginals(self) -> list[np.ndarray]:
        out = []
        start = 0
        for n_x, d in zip(self.type_counts, self.axes_per_agent):
            block = self._coords[:, start : start + d]
            start += d
            m = np.empty((self.n_points, n_x))
            m[:, :-1] = block
            m[:, -1] = 1.0 - block.sum(axis=1)
            # Project lattice corners lying outside the simplex (>2 types only).
            np.clip(m, 0.0, None, out=m)
            m /= m.sum(axis=1, keepdims=True)
            out.append(m)
        return out

    @staticmethod
    def for_spec(spec: GameSpec, h: float = 0.02) -> "BeliefGrid":
        return BeliefGrid(spec.type_counts, h)

    @property
    def coords(self) -> np.ndarray:
        """Lattice coordinates, shape (n_points, n_axes)."""
        return self._coords

    @property
    def marginals(self) -> list[np.ndarray]:
        """Per-agent belief marginals at every lattice point."""
        return self._marginals

    def belief_at(self, p: int) -> ProductBelief:
        return ProductBelief.from_lists([m[p] for m in self._marginals])

    def coords_of(self, belief: ProductBelief) -> np.ndarray:
        return np.concatenate([belief[i][:-1] for i in range(len(self.type_counts))]) \
            if self.n_axes else np.zeros(0)

    def coords_of_batch(self, marginals: Sequence[np.ndarray]) -> np.ndarray:
        if self.n_axes == 0:
            return np.zeros((marginals[0].shape[0] if marginals else 1, 0))
        return np.concatenate([m[:, :-1] for m in marginals], axis=1)

    def nearest_index(self, belief: ProductBelief) -> int:
        return int(self.nearest_index_batch(
            [b.reshape(1, -1) for b in belief.marginals])[0])

    def nearest_index_batch(self, marginals: Sequence[np.ndarray]) -> np.ndarray:
        """Flat lattice index of the closest point, per row of the batch."""
        c = self.coords_of_batch(marginals)
        if self.n_axes == 0:
            return np.zeros(c.shape[0], dtype=np.intp)
        idx = np.clip(np.rint(c / self.h).astype(np.intp), 0, self.points_per_axis - 1)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def mirror_permutation(self) -> np.ndarray:
        """Index permutation swapping the two agents' coordinate blocks.

        Only defined for two-agent grids with equal type counts; maps the
        lattice point for (pi_1, pi_2) to the one for (pi_2, pi_1).
        """
        if len(self.type_counts) != 2 or self.type_counts[0] != self.type_counts[1]:
            raise GridConfigError("mirror permutation needs two agents with equal type counts")
        d = self.axes_per_agent[0]
        idx = np.unravel_index(np.arange(self.n_points), self.shape)
        swapped = tuple(idx[d:]) + tuple(idx[:d])
        return np.ravel_multi_index(swapped, self.shape)

    def interpolate(self, values_flat: np.ndarray, queries: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of lattice data at query coordinates.

        ``values_flat`` has one entry per lattice point (flat order);
        ``queries`` is (Q, n_axes), clipped into the cube. Exact at lattice
        points and affine along each axis.
        """
        if self.n_axes == 0:
            return np.full(queries.shape[0], float(values_flat[0]))
        v = np.asarray(values_flat).ravel()
        u = np.clip(queries / self.h, 0.0, self.points_per_axis - 1.0)
        i0 = np.minimum(u.astype(np.intp), self.points_per_axis - 2)
        w = u - i0
        base = i0 @ self._flat_strides
        out = np.zeros(queries.shape[0])
        for bits, off in zip(self._corner_bits, self._corner_offsets):
            weight = None
            for d, c in enumerate(bits):
                f = w[:, d] if c else (1.0 - w[:, d])
                weight = f if weight is None else weight * f
            out += weight * v[base + off]
        return out


@dataclass
class ValueTable:
    """Tabulated values per (lattice point, agent, own type)."""

    grid: BeliefGrid
    values: list[np.ndarray]  # per agent, shape (n_points, n_types_i)

    @staticmethod
    def zeros(grid: BeliefGrid) -> "ValueTable":
        return ValueTable(
            grid=grid,
            values=[np.zeros((grid.n_points, k)) for k in grid.type_counts],
        )

    @staticmethod
    def constant(grid: BeliefGrid, c: float) -> "ValueTable":
        vt = ValueTable.zeros(grid)
        for v in vt.values:
            v += c
        return vt

    def copy(self) -> "ValueTable":
        return ValueTable(self.grid, [v.copy() for v in self.values])

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(v))) if v.size else 0.0 for v in self.values)

    def sup_distance(self, other: "ValueTable") -> float:
        return max(
            float(np.max(np.abs(a - b)))
            for a, b in zip(self.values, other.values)
        )

    def evaluate(self, belief: ProductBelief, agent: int, x: int) -> float:
        q = self.grid.coords_of(belief).reshape(1, -1)
        return float(self.grid.interpolate(self.values[agent][:, x], q)[0])

    def evaluate_batch(
        self, marginals: Sequence[np.ndarray], agent: int, x: int
    ) -> np.ndarray:
        q = self.grid.coords_of_batch(marginals)
        return self.grid.interpolate(self.values[agent][:, x], q)

    def mirrored(self, perm: np.ndarray) -> "ValueTable":
        """Swap the two agents' tables through the grid mirror permutation."""
        return ValueTable(self.grid, [self.values[1][perm], self.values[0][perm]])

    def measured_interp_slack(self) -> float:
        """Leave-one-out multilinear defect, a direct measure of grid error.

        For every interior lattice point, compares the stored value with the
        multilinear reconstruction from the surrounding 2h-cell corners; the
        maximum over points, agents and types scales like h^2 where the value
        surface is smooth and like the jump size across policy kinks.
        """
        g = self.grid
        if g.n_axes == 0:
            return 0.0
        worst = 0.0
        interior = tuple(slice(1, -1) for _ in range(g.n_axes))
        for v_agent in self.values:
            for x in range(v_agent.shape[1]):
                v = v_agent[:, x].reshape(g.shape)
                center = v[interior]
                recon = np.zeros_like(center)
                for corner in np.ndindex(*([2] * g.n_axes)):
                    sl = tuple(
                        slice(0, -2) if c == 0 else slice(2, None) for c in corner
                    )
                    recon += v[sl]
                recon /= 2.0 ** g.n_axes
                if center.size:
                    worst = max(worst, float(np.max(np.abs(center - recon))))
        return worst


@dataclass
class PolicyGrid:
    """Prescription profile per lattice point, with solver diagnostics."""

    grid: BeliefGrid
    gammas: list[np.ndarray]  # per agent, shape (n_points, n_types_i, n_actions_i)
    residuals: np.ndarray  # best-response gap per point
    converged: np.ndarray  # bool per point
    support_ids: np.ndarray  # accepted support profile id per point (-1 if none)
    iterations: np.ndarray  # solver iterations used per point
    meta: dict = field(default_factory=dict)

    def prescription_at(self, p: int) -> Prescription:
        return Prescription.from_lists([g[p] for g in self.gammas])

    def prescription_at_belief(self, belief: ProductBelief) -> Prescription:
        """Nearest-lattice-point lookup (never interpolates between branches)."""
        return self.prescription_at(self.grid.nearest_index(belief))

    def n_nonconverged(self) -> int:
        return int(np.sum(~self.converged))
