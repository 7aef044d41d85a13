"""Uniform time grids used by every solver and simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [t_start, t_end] into `steps` intervals."""

    t_start: float
    t_end: float
    steps: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("grid needs at least one step")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")
        object.__setattr__(
            self, "nodes", np.linspace(self.t_start, self.t_end, self.steps + 1)
        )

    @property
    def h(self) -> float:
        return (self.t_end - self.t_start) / self.steps

    @property
    def num_nodes(self) -> int:
        return self.steps + 1

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.steps * factor)

    def node_index(self, t: float) -> int:
        """Index of the closest node; `t` must sit on the grid within round-off."""
        k = int(round((t - self.t_start) / self.h))
        if k < 0 or k > self.steps or abs(self.nodes[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a node of this grid")
        return k

    def same_mesh(self, other: "TimeGrid") -> bool:
        return (
            self.steps == other.steps
            and abs(self.t_start - other.t_start) < 1e-12
            and abs(self.t_end - other.t_end) < 1e-12
        )
