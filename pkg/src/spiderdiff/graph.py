"""Star-shaped metric graph: a finite set of edges glued at one junction vertex.

A point is a pair (edge, radius) where radius is the Euclidean distance to
the junction.  All points with radius 0 are identified; they canonicalize to
the single distinguished ``VERTEX`` value so that dataclass equality respects
the gluing.  Edge identifiers are dense integers 0..n_edges-1 so per-edge
data can live in flat arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

#: pseudo edge id carried by the canonical vertex representation
VERTEX_EDGE = -1


@dataclass(frozen=True)
class GraphPoint:
    """A point (edge, radius) on a star graph."""

    edge: int
    radius: float

    @property
    def is_vertex(self) -> bool:
        return self.radius == 0.0


#: the canonical junction vertex, equal to canonicalize((e, 0)) for every e
VERTEX = GraphPoint(VERTEX_EDGE, 0.0)


@dataclass(frozen=True)
class StarGraph:
    """A star graph given by its per-edge lengths (``math.inf`` allowed).

    Immutable after construction and safe to share across threads.
    """

    lengths: tuple[float, ...]

    def __post_init__(self):
        if len(self.lengths) == 0:
            raise DomainError("a star graph needs at least one edge")
        for e, l in enumerate(self.lengths):
            if not (l > 0):
                raise DomainError(f"edge {e}: length must be > 0, got {l}")

    @property
    def n_edges(self) -> int:
        return len(self.lengths)

    @property
    def edges(self) -> range:
        return range(self.n_edges)

    @property
    def min_length(self) -> float:
        return min(self.lengths)

    def validate_point(self, p: GraphPoint) -> None:
        """Raise DomainError unless p lies on this graph."""
        if p == VERTEX:
            return
        if not 0 <= p.edge < self.n_edges:
            raise DomainError(f"unknown edge {p.edge}")
        if p.radius < 0:
            raise DomainError(f"negative radius {p.radius}")
        if p.radius > self.lengths[p.edge]:
            raise DomainError(
                f"radius {p.radius} exceeds edge length {self.lengths[p.edge]}"
            )

    def point(self, edge: int, radius: float) -> GraphPoint:
        """Construct and canonicalize a point after validation."""
        p = GraphPoint(edge, float(radius))
        self.validate_point(p)
        return self.canonicalize(p)

    def canonicalize(self, p: GraphPoint) -> GraphPoint:
        """Map every zero-radius representative to the single vertex value.

        Idempotent; points with radius > 0 are returned unchanged.
        """
        self.validate_point(p)
        return VERTEX if p.radius == 0.0 else p

    def distance(self, p: GraphPoint, q: GraphPoint) -> float:
        """Graph metric: |x - y| on a common edge, x + y across the junction."""
        self.validate_point(p)
        self.validate_point(q)
        if p.edge == q.edge or p.radius == 0.0 or q.radius == 0.0:
            return abs(p.radius - q.radius)
        return p.radius + q.radius

    def in_ball(self, p: GraphPoint, delta: float) -> bool:
        """True iff p lies in the open ball of radius delta around the vertex."""
        if not delta > 0:
            raise DomainError(f"ball radius must be > 0, got {delta}")
        self.validate_point(p)
        return p.radius < delta


def unbounded_star(n_edges: int) -> StarGraph:
    """The star graph with n_edges infinite edges (state space of the Walsh
    Brownian motion)."""
    return StarGraph(tuple([math.inf] * n_edges))
