"""Structural analysis of a fitted principal tree.

The tree splits into non-branching segments (maximal paths whose
interior nodes have degree 2).  Data points inherit a segment label
from their nearest node, a root node is chosen by class enrichment, and
each point receives a pseudotime: its geodesic distance from the root
along the tree, counted in edges (fractional on the projected edge).
Root-to-leaf node paths define the trajectories a point can lie on.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .elpigraph import PrincipalGraph, _as_array, partition_points, project_points

SEGMENT_KINDS = ("internal", "terminal", "cycle", "isolated")


@dataclass(frozen=True)
class SegmentDecomposition:
    """Non-branching segments: node paths, kinds, and an edge lookup."""

    segments: tuple[tuple[int, ...], ...]
    kinds: tuple[str, ...]
    edge_segment: dict[tuple[int, int], int]

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def segments_of_node(self, node: int) -> tuple[int, ...]:
        return tuple(
            s for s, path in enumerate(self.segments) if node in path
        )


@dataclass(frozen=True)
class Trajectory:
    """A simple node path from the root to one leaf."""

    id: int
    nodes: tuple[int, ...]

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return tuple(
            (min(a, b), max(a, b)) for a, b in zip(self.nodes, self.nodes[1:])
        )


@dataclass(frozen=True)
class PseudotimeAssignment:
    """Per-point projection, pseudotime and trajectory memberships."""

    root: int
    edge: np.ndarray
    epsilon: np.ndarray
    sq_distance: np.ndarray
    pt: np.ndarray
    trajectory_ids: tuple[tuple[int, ...], ...]


def _walk_segment(start, first, neighbors, degrees, visited):
    # Follow degree-2 nodes from `start` through `first` until a leaf,
    # a branching node, or the start itself closes a loop.
    path = [start, first]
    visited.add((min(start, first), max(start, first)))
    prev, cur = start, first
    while degrees[cur] == 2 and cur != start:
        nxt = next(n for n in neighbors[cur] if n != prev)
        visited.add((min(cur, nxt), max(cur, nxt)))
        path.append(nxt)
        prev, cur = cur, nxt
    return path


def decompose_segments(g: PrincipalGraph) -> SegmentDecomposition:
    """Split the graph into maximal non-branching segments.

    Depth-first walks start at every leaf or branching node and store
    visited edges, so each edge lands in exactly one segment.  Pure
    cycle components become single segments of kind ``cycle``;
    edge-less nodes become ``isolated`` singletons.
    """
    deg = g.degrees
    neighbors = g.neighbors
    visited: set[tuple[int, int]] = set()
    segments: list[tuple[int, ...]] = []
    kinds: list[str] = []
    for start in range(g.n_nodes):
        if deg[start] == 2:
            continue
        if deg[start] == 0:
            segments.append((start,))
            kinds.append("isolated")
            continue
        for first in neighbors[start]:
            if (min(start, first), max(start, first)) in visited:
                continue
            path = _walk_segment(start, first, neighbors, deg, visited)
            segments.append(tuple(path))
            if path[0] == path[-1]:
                kinds.append("cycle")
            elif deg[path[0]] == 1 or deg[path[-1]] == 1:
                kinds.append("terminal")
            else:
                kinds.append("internal")
    # Components where every node has degree 2 are pure cycles.
    for start in range(g.n_nodes):
        if deg[start] != 2:
            continue
        first = next(
            (n for n in neighbors[start] if (min(start, n), max(start, n)) not in visited),
            None,
        )
        if first is None:
            continue
        path = _walk_segment(start, first, neighbors, deg, visited)
        segments.append(tuple(path))
        kinds.append("cycle")
    edge_segment: dict[tuple[int, int], int] = {}
    for s, path in enumerate(segments):
        for a, b in zip(path, path[1:]):
            edge_segment[(min(a, b), max(a, b))] = s
    return SegmentDecomposition(tuple(segments), tuple(kinds), edge_segment)


def partition_by_segments(X, g: PrincipalGraph, seg: SegmentDecomposition) -> np.ndarray:
    """Label each point with the segment of its nearest node.

    A branching node lies on several segments; such points go to the
    candidate segment holding the second-nearest node (among the nodes
    of those segments), ties to the lowest segment index.
    """
    x = _as_array(X)
    part = partition_points(x, g)
    node_segs = [seg.segments_of_node(j) for j in range(g.n_nodes)]
    lookup = np.array(
        [segs[0] if len(segs) == 1 else -1 for segs in node_segs], dtype=int
    )
    labels = lookup[part.node_index]
    for i in np.flatnonzero(labels < 0):
        j = int(part.node_index[i])
        best = None
        for s in node_segs[j]:
            others = [v for v in seg.segments[s] if v != j]
            if not others:
                continue
            d2 = ((x[i] - g.node_positions[others]) ** 2).sum(axis=1).min()
            if best is None or d2 < best[0]:
                best = (d2, s)
        labels[i] = node_segs[j][0] if best is None else best[1]
    return labels


def _node_class_chi2(n_at_node, target_at_node, n_total, target_total) -> float:
    # Pearson chi-squared of the 2x2 table (at node vs elsewhere) x
    # (target class vs other classes).
    observed = np.array(
        [
            [target_at_node, n_at_node - target_at_node],
            [target_total - target_at_node,
             (n_total - n_at_node) - (target_total - target_at_node)],
        ],
        dtype=float,
    )
    row = observed.sum(axis=1, keepdims=True)
    col = observed.sum(axis=0, keepdims=True)
    expected = row * col / n_total
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = np.where(expected > 0, (observed - expected) ** 2 / expected, 0.0)
    return float(terms.sum())


def select_root(
    g: PrincipalGraph, node_index: np.ndarray, point_classes, target_class
) -> int:
    """Node most enriched for the target class among its nearest points.

    Scores each node by the signed chi-squared of its 2x2 node-vs-class
    table (positive when the class is over-represented) and returns the
    argmax, ties to the lowest node index.
    """
    node_index = np.asarray(node_index)
    classes = np.asarray(point_classes)
    is_target = classes == target_class
    if not is_target.any():
        raise ValueError(f"target class {target_class!r} not present")
    n_total = len(classes)
    target_total = int(is_target.sum())
    scores = np.zeros(g.n_nodes)
    for j in range(g.n_nodes):
        at_node = node_index == j
        n_j = int(at_node.sum())
        if n_j == 0:
            continue
        t_j = int((at_node & is_target).sum())
        expected = n_j * target_total / n_total
        chi2 = _node_class_chi2(n_j, t_j, n_total, target_total)
        scores[j] = chi2 if t_j >= expected else -chi2
    return int(np.argmax(scores))


def _edge_depths(g: PrincipalGraph, root: int, weights=None) -> np.ndarray:
    depth = np.full(g.n_nodes, np.inf)
    depth[root] = 0.0
    queue = deque([root])
    while queue:
        cur = queue.popleft()
        for nxt in g.neighbors[cur]:
            if np.isinf(depth[nxt]):
                w = 1.0 if weights is None else weights[(min(cur, nxt), max(cur, nxt))]
                depth[nxt] = depth[cur] + w
                queue.append(nxt)
    return depth


def extract_trajectories(g: PrincipalGraph, root: int) -> tuple[Trajectory, ...]:
    """One root-to-leaf node path per leaf (the root never counts as a leaf)."""
    if not g.is_tree:
        raise ValueError("trajectories require a tree")
    if not 0 <= root < g.n_nodes:
        raise ValueError(f"root {root} out of range")
    parent = np.full(g.n_nodes, -1)
    order = deque([root])
    seen = {root}
    while order:
        cur = order.popleft()
        for nxt in g.neighbors[cur]:
            if nxt not in seen:
                seen.add(nxt)
                parent[nxt] = cur
                order.append(nxt)
    leaves = [j for j in range(g.n_nodes) if g.degrees[j] == 1 and j != root]
    out = []
    for t_id, leaf in enumerate(leaves):
        path = [leaf]
        while path[-1] != root:
            path.append(int(parent[path[-1]]))
        out.append(Trajectory(t_id, tuple(reversed(path))))
    return tuple(out)


def compute_pseudotime(
    X, g: PrincipalGraph, root: int, metric: str = "edges"
) -> PseudotimeAssignment:
    """Geodesic distance from the root to each point's projection.

    With the default ``edges`` metric a point at fraction epsilon along
    an edge whose nearer endpoint is d edges from the root gets
    pseudotime d + epsilon.  The ``euclidean`` metric replaces edge
    counts with embedded edge lengths.
    """
    if not g.is_tree:
        raise ValueError("pseudotime requires a tree")
    if metric not in ("edges", "euclidean"):
        raise ValueError(f"unknown metric {metric!r}")
    x = _as_array(X)
    weights = None
    if metric == "euclidean":
        weights = {
            (a, b): float(
                np.linalg.norm(g.node_positions[a] - g.node_positions[b])
            )
            for a, b in g.edges
        }
    depth = _edge_depths(g, root, weights)
    edge_idx, eps, d2 = project_points(x, g)
    pt = np.empty(len(x))
    for e, (a, b) in enumerate(g.edges):
        sel = edge_idx == e
        if not sel.any():
            continue
        w = 1.0 if weights is None else weights[(a, b)]
        if depth[a] <= depth[b]:
            pt[sel] = depth[a] + eps[sel] * w
        else:
            pt[sel] = depth[a] - eps[sel] * w
    trajectories = extract_trajectories(g, root)
    edge_to_traj: dict[int, list[int]] = {e: [] for e in range(len(g.edges))}
    edge_pos = {e: i for i, e in enumerate(g.edges)}
    for traj in trajectories:
        for e in traj.edges:
            edge_to_traj[edge_pos[e]].append(traj.id)
    memberships = tuple(
        tuple(edge_to_traj[int(e)]) for e in edge_idx
    )
    return PseudotimeAssignment(root, edge_idx, eps, d2, pt, memberships)
