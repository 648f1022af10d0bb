"""Elastic principal trees.

A principal graph is a set of nodes embedded in data space joined by
edges.  Its quality on a dataset is an energy with three parts: the
mean squared distance of points to their nearest node (optionally
trimmed at a radius r0), an edge-stretching term that penalizes long
edges (with extra weight at branching nodes), and a star-bending term
that pulls each node of degree >= 2 toward the centroid of its
neighbors.  For a fixed topology the optimal node positions solve one
symmetric positive-definite linear system per fit epoch; topology is
searched greedily with two grammar operations (add a node to a node,
bisect an edge), keeping the lowest-energy candidate at each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .dataset import NumericMatrix


@dataclass(frozen=True)
class ElasticParams:
    """Moduli of the elastic energy and the node budget."""

    lam: float = 0.05  # edge-stretching modulus
    mu: float = 0.1  # star-bending modulus
    alpha: float = 0.01  # extra stretching per unit of branching degree
    r0: float = math.inf  # trimming radius; points beyond it are capped
    n_nodes: int = 50

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.mu < 0 or self.alpha < 0:
            raise ValueError("mu and alpha must be non-negative")
        if self.r0 <= 0:
            raise ValueError("r0 must be positive")
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be at least 2")


def _canonical_edges(edges, n_nodes):
    seen = set()
    out = []
    for a, b in edges:
        a, b = int(a), int(b)
        if a == b:
            raise ValueError(f"self-loop at node {a}")
        if not (0 <= a < n_nodes and 0 <= b < n_nodes):
            raise ValueError(f"edge ({a}, {b}) references a missing node")
        e = (min(a, b), max(a, b))
        if e in seen:
            raise ValueError(f"duplicate edge {e}")
        seen.add(e)
        out.append(e)
    return tuple(sorted(out))


@dataclass(frozen=True)
class PrincipalGraph:
    """Embedded graph: node coordinates plus an edge list."""

    node_positions: np.ndarray  # n_nodes x n_dims
    edges: tuple[tuple[int, int], ...]
    params: ElasticParams = field(default_factory=ElasticParams)

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.node_positions, dtype=float))
        if not np.all(np.isfinite(pos)):
            raise ValueError("node positions must be finite")
        object.__setattr__(self, "node_positions", pos)
        object.__setattr__(self, "edges", _canonical_edges(self.edges, len(pos)))

    @property
    def n_nodes(self) -> int:
        return self.node_positions.shape[0]

    @property
    def n_dims(self) -> int:
        return self.node_positions.shape[1]

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=int)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        nb: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            nb[a].append(b)
            nb[b].append(a)
        return tuple(tuple(sorted(x)) for x in nb)

    @cached_property
    def is_tree(self) -> bool:
        if len(self.edges) != self.n_nodes - 1:
            return False
        seen = {0}
        stack = [0]
        while stack:
            for nxt in self.neighbors[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == self.n_nodes

    def with_positions(self, positions: np.ndarray) -> "PrincipalGraph":
        return PrincipalGraph(positions, self.edges, self.params)


@dataclass(frozen=True)
class PartitionVector:
    """Nearest node per data point, with trimming flags."""

    node_index: np.ndarray
    sq_distance: np.ndarray
    trimmed: np.ndarray

    def counts(self, n_nodes: int) -> np.ndarray:
        return np.bincount(self.node_index[~self.trimmed], minlength=n_nodes)


@dataclass(frozen=True)
class EnergyBreakdown:
    total: float
    msd: float
    stretching: float
    bending: float


@dataclass(frozen=True)
class Projection:
    """Closest point on the graph: edge index and position along it."""

    edge: int
    epsilon: float
    sq_distance: float


@dataclass(frozen=True)
class FitResult:
    graph: PrincipalGraph
    energy_trace: tuple[float, ...]
    converged: bool

    @property
    def energy(self) -> float:
        return self.energy_trace[-1]


def _as_array(X) -> np.ndarray:
    if isinstance(X, NumericMatrix):
        if not X.complete:
            raise ValueError("data must be complete (impute first)")
        return X.values
    return np.asarray(X, dtype=float)


def partition_points(X, g: PrincipalGraph) -> PartitionVector:
    """Assign every data point to its nearest node."""
    x = _as_array(X)
    if x.shape[1] != g.n_dims:
        raise ValueError(
            f"data has {x.shape[1]} dims but graph nodes have {g.n_dims}"
        )
    d2 = np.empty((x.shape[0], g.n_nodes))
    for j in range(g.n_nodes):
        diff = x - g.node_positions[j]
        d2[:, j] = np.einsum("ij,ij->i", diff, diff)
    idx = np.argmin(d2, axis=1)
    best = d2[np.arange(x.shape[0]), idx]
    return PartitionVector(idx, best, best > g.params.r0**2)


def _nearest_nodes(x, x_sq, nodes, buf=None, want_d2=True):
    # Nearest node via argmin of ||n||^2 / 2 - x.n (one BLAS call plus
    # one fused pass); squared distances recovered only when asked.
    n = x.shape[0]
    if buf is None or buf.shape != (n, len(nodes)):
        buf = np.empty((n, len(nodes)))
    np.matmul(x, nodes.T, out=buf)
    half = 0.5 * np.einsum("ij,ij->i", nodes, nodes)
    np.subtract(half[None, :], buf, out=buf)
    idx = np.argmin(buf, axis=1)
    if not want_d2:
        return idx, None
    best = np.maximum(2.0 * buf[np.arange(n), idx] + x_sq, 0.0)
    return idx, best


def _partition_fast(x, x_sq, nodes, r0):
    idx, best = _nearest_nodes(x, x_sq, nodes)
    return idx, best, best > r0**2


def edge_penalties(g: PrincipalGraph) -> np.ndarray:
    """Stretching modulus per edge, inflated at branching endpoints."""
    p = g.params
    deg = g.degrees
    return np.array(
        [p.lam + p.alpha * (max(2, deg[a], deg[b]) - 2) for a, b in g.edges]
    )


def _stars(g: PrincipalGraph):
    return [(c, g.neighbors[c]) for c in range(g.n_nodes) if g.degrees[c] >= 2]


def _elastic_energy(nodes, g: PrincipalGraph, penalties) -> tuple[float, float]:
    stretch = 0.0
    for w, (a, b) in zip(penalties, g.edges):
        diff = nodes[a] - nodes[b]
        stretch += w * float(diff @ diff)
    bend = 0.0
    for c, leaves in _stars(g):
        diff = nodes[c] - nodes[list(leaves)].mean(axis=0)
        bend += float(diff @ diff)
    return stretch, g.params.mu * bend


def compute_energy(X, g: PrincipalGraph, partition: PartitionVector) -> EnergyBreakdown:
    """Evaluate the elastic energy for a given point-to-node assignment."""
    x = _as_array(X)
    d2 = np.einsum(
        "ij,ij->i", x - g.node_positions[partition.node_index],
        x - g.node_positions[partition.node_index],
    )
    msd = float(np.minimum(d2, g.params.r0**2).mean())
    stretch, bend = _elastic_energy(g.node_positions, g, edge_penalties(g))
    return EnergyBreakdown(msd + stretch + bend, msd, stretch, bend)


def _elastic_matrix(g: PrincipalGraph, penalties) -> np.ndarray:
    # Quadratic form of the elastic terms: weighted graph Laplacian plus
    # mu * sum of star deviation projectors.  Shared by every coordinate.
    nv = g.n_nodes
    A = np.zeros((nv, nv))
    for w, (a, b) in zip(penalties, g.edges):
        A[a, a] += w
        A[b, b] += w
        A[a, b] -= w
        A[b, a] -= w
    for c, leaves in _stars(g):
        u = np.zeros(nv)
        u[c] = 1.0
        u[list(leaves)] -= 1.0 / len(leaves)
        A += g.params.mu * np.outer(u, u)
    return A


def _fit(x, x_sq, g: PrincipalGraph, max_epochs: int, tol: float, warm=None, buf=None):
    # Alternate nearest-node partition with the exact minimizer of the
    # quadratic energy for that partition.  Energy never increases.
    # ``warm`` optionally supplies (node index, squared distance) for
    # the first epoch, skipping one full partition.
    n, m = x.shape
    nv = g.n_nodes
    penalties = edge_penalties(g)
    a_elastic = _elastic_matrix(g, penalties)
    r0 = g.params.r0
    capped = math.isfinite(r0)
    nodes = g.node_positions.copy()
    if buf is None or buf.shape != (n, nv):
        buf = np.empty((n, nv))
    trace: list[float] = []
    converged = False
    for epoch in range(max_epochs):
        if epoch == 0 and warm is not None:
            idx, best = warm
        else:
            idx, best = _nearest_nodes(x, x_sq, nodes, buf, want_d2=capped)
        trimmed = best > r0**2 if capped else None
        if capped and trimmed.any():
            keep_idx = idx[~trimmed]
            xk = x[~trimmed]
        else:
            keep_idx = idx
            xk = x
        counts = np.bincount(keep_idx, minlength=nv)
        if counts.sum() == 0:
            raise ValueError("all points trimmed; increase r0")
        sums = np.empty((nv, m))
        for d in range(m):
            sums[:, d] = np.bincount(keep_idx, weights=xk[:, d], minlength=nv)
        A = a_elastic + np.diag(counts / n)
        nodes = scipy.linalg.solve(A, sums / n, assume_a="pos")
        if capped:
            d2 = np.einsum("ij,ij->i", x - nodes[idx], x - nodes[idx])
            msd = float(np.minimum(d2, r0**2).mean())
        else:
            # sum_i ||x_i - n_a(i)||^2 expands over the per-node sums.
            node_sq = np.einsum("ij,ij->i", nodes, nodes)
            msd = float(
                x_sq.sum() - 2.0 * np.einsum("ij,ij->", nodes, sums) + counts @ node_sq
            ) / n
        stretch, bend = _elastic_energy(nodes, g, penalties)
        energy = msd + stretch + bend
        if trace and trace[-1] - energy < tol * max(trace[-1], 1e-30):
            trace.append(energy)
            converged = True
            break
        trace.append(energy)
    return g.with_positions(nodes), tuple(trace), converged


def fit_nodes(X, g: PrincipalGraph, max_epochs: int = 100, tol: float = 1e-6) -> FitResult:
    """Optimize node positions for a fixed topology.

    Stops when the relative energy decrease falls below ``tol`` or after
    ``max_epochs`` epochs.  The recorded energy trace is non-increasing.
    """
    x = _as_array(X)
    if x.shape[1] != g.n_dims:
        raise ValueError(
            f"data has {x.shape[1]} dims but graph nodes have {g.n_dims}"
        )
    x_sq = np.einsum("ij,ij->i", x, x)
    graph, trace, converged = _fit(x, x_sq, g, max_epochs, tol)
    return FitResult(graph, trace, converged)


def _initial_segment(x, params: ElasticParams) -> PrincipalGraph:
    # Two nodes on the first principal axis, spanning the middle half of
    # the data's projections.
    center = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - center, full_matrices=False)
    axis = vt[0]
    t = (x - center) @ axis
    lo, hi = np.percentile(t, [25.0, 75.0])
    positions = np.vstack([center + lo * axis, center + hi * axis])
    return PrincipalGraph(positions, ((0, 1),), params)


def _grammar_candidates(g: PrincipalGraph, x, part_idx):
    # Yield (operation, site, candidate) in deterministic order.  New
    # nodes start at the centroid of the host node's points (falling
    # back to mirroring its neighborhood) or at an edge midpoint.
    nodes = g.node_positions
    nv = g.n_nodes
    for j in range(nv):
        sel = part_idx == j
        if sel.any():
            new_pos = x[sel].mean(axis=0)
        else:
            nb_mean = nodes[list(g.neighbors[j])].mean(axis=0)
            new_pos = 2.0 * nodes[j] - nb_mean
        cand = PrincipalGraph(
            np.vstack([nodes, new_pos]), g.edges + ((j, nv),), g.params
        )
        yield 0, j, cand
    for e_idx, (a, b) in enumerate(g.edges):
        mid = 0.5 * (nodes[a] + nodes[b])
        edges = tuple(e for i, e in enumerate(g.edges) if i != e_idx)
        cand = PrincipalGraph(
            np.vstack([nodes, mid]), edges + ((a, nv), (nv, b)), g.params
        )
        yield 1, e_idx, cand


def grow_tree(
    X,
    params: ElasticParams,
    candidate_epochs: int = 10,
    max_epochs: int = 100,
    tol: float = 1e-6,
) -> FitResult:
    """Grow a principal tree to the node budget by greedy grammar search.

    Starts from a two-node principal-component segment.  Each growth
    step fits every graph reachable by one grammar operation for a few
    epochs and keeps the lowest-energy one; ties go to the earliest
    (operation, site) pair.  The final tree is refit to convergence.
    """
    x = _as_array(X)
    if x.shape[0] < params.n_nodes:
        raise ValueError(
            f"need at least {params.n_nodes} points to place {params.n_nodes} nodes"
        )
    x_sq = np.einsum("ij,ij->i", x, x)
    graph, _, _ = _fit(x, x_sq, _initial_segment(x, params), max_epochs, tol)
    while graph.n_nodes < params.n_nodes:
        nv = graph.n_nodes
        part_idx, part_d2 = _nearest_nodes(x, x_sq, graph.node_positions)
        cand_buf = np.empty((x.shape[0], nv + 1))
        best = None
        for op, site, cand in _grammar_candidates(graph, x, part_idx):
            # The candidate shares all parent nodes, so its first
            # partition only needs distances to the one new node.
            p_new = cand.node_positions[nv]
            d2_new = np.maximum(
                2.0 * (0.5 * (p_new @ p_new) - x @ p_new) + x_sq, 0.0
            )
            take = d2_new < part_d2
            warm = (np.where(take, nv, part_idx), np.where(take, d2_new, part_d2))
            fitted, trace, _ = _fit(
                x, x_sq, cand, candidate_epochs, tol, warm=warm, buf=cand_buf
            )
            key = (trace[-1], op, site)
            if best is None or key < best[0]:
                best = (key, fitted)
        graph = best[1]
    graph, trace, converged = _fit(x, x_sq, graph, max_epochs, tol)
    return FitResult(graph, trace, converged)


def _drop_nodes(g: PrincipalGraph, drop: set[int]) -> PrincipalGraph:
    keep = [j for j in range(g.n_nodes) if j not in drop]
    relabel = {old: new for new, old in enumerate(keep)}
    edges = tuple(
        (relabel[a], relabel[b])
        for a, b in g.edges
        if a not in drop and b not in drop
    )
    return PrincipalGraph(g.node_positions[keep], edges, g.params)


def prune_tree(g: PrincipalGraph) -> PrincipalGraph:
    """Remove terminal segments that consist of a single edge.

    A leaf hanging directly off a branching node (degree >= 3) is such a
    segment; all of them are removed in one pass.  Longer arms and pure
    path graphs are untouched.
    """
    if not g.is_tree:
        raise ValueError("pruning expects a tree")
    deg = g.degrees
    drop = {
        leaf
        for leaf in range(g.n_nodes)
        if deg[leaf] == 1 and deg[g.neighbors[leaf][0]] >= 3
    }
    if g.n_nodes - len(drop) < 2:
        raise ValueError("pruning would leave fewer than 2 nodes")
    if not drop:
        return g
    return _drop_nodes(g, drop)


def extend_leaves(X, g: PrincipalGraph) -> PrincipalGraph:
    """Push each leaf outward so its points project inside its edge.

    A leaf moves along its terminal edge direction to the farthest
    projection coordinate of the points assigned to it, plus a 5% edge
    length margin; leaves already beyond their points stay put.  All
    moves use the original positions, and topology never changes.
    """
    x = _as_array(X)
    part = partition_points(x, g)
    positions = g.node_positions.copy()
    for leaf in range(g.n_nodes):
        if g.degrees[leaf] != 1:
            continue
        anchor = g.node_positions[g.neighbors[leaf][0]]
        offset = g.node_positions[leaf] - anchor
        length = float(np.linalg.norm(offset))
        if length == 0.0:
            continue
        direction = offset / length
        sel = (part.node_index == leaf) & ~part.trimmed
        if not sel.any():
            continue
        t_max = float(((x[sel] - anchor) @ direction).max())
        if t_max >= length:
            positions[leaf] = anchor + (t_max + 0.05 * length) * direction
    return g.with_positions(positions)


def project_point(point, g: PrincipalGraph) -> Projection:
    """Closest point of the graph, over all edges as closed segments."""
    p = np.asarray(point, dtype=float)
    best = None
    for e_idx, (a, b) in enumerate(g.edges):
        pa = g.node_positions[a]
        pb = g.node_positions[b]
        ab = pb - pa
        len2 = float(ab @ ab)
        eps = 0.0 if len2 == 0.0 else float(np.clip((p - pa) @ ab / len2, 0.0, 1.0))
        # Endpoint projections land exactly on the node so that two
        # edges sharing it tie bitwise and the lowest index wins.
        if eps == 0.0:
            q = pa
        elif eps == 1.0:
            q = pb
        else:
            q = pa + eps * ab
        d2 = float((p - q) @ (p - q))
        if best is None or d2 < best.sq_distance:
            best = Projection(e_idx, eps, d2)
    if best is None:
        raise ValueError("graph has no edges")
    return best


def project_points(X, g: PrincipalGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized project_point: per-point (edge index, epsilon, distance^2)."""
    x = _as_array(X)
    n = x.shape[0]
    best_d2 = np.full(n, np.inf)
    best_edge = np.zeros(n, dtype=int)
    best_eps = np.zeros(n)
    for e_idx, (a, b) in enumerate(g.edges):
        pa = g.node_positions[a]
        pb = g.node_positions[b]
        ab = pb - pa
        len2 = float(ab @ ab)
        if len2 == 0.0:
            eps = np.zeros(n)
        else:
            eps = np.clip((x - pa) @ ab / len2, 0.0, 1.0)
        q = pa + eps[:, None] * ab
        q[eps == 0.0] = pa
        q[eps == 1.0] = pb
        diff = x - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        take = d2 < best_d2
        best_d2[take] = d2[take]
        best_edge[take] = e_idx
        best_eps[take] = eps[take]
    if not g.edges:
        raise ValueError("graph has no edges")
    return best_edge, best_eps, best_d2


def explained_variance(X, g: PrincipalGraph) -> float:
    """Fraction of total variance captured by distances to the graph."""
    x = _as_array(X)
    total = float(((x - x.mean(axis=0)) ** 2).sum())
    if total == 0.0:
        raise ValueError("data has zero total variance")
    if g.edges:
        _, _, d2 = project_points(x, g)
    else:
        d2 = partition_points(x, g).sq_distance
    return 1.0 - float(d2.sum()) / total
