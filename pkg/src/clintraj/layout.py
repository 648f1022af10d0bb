"""2D drawing of a fitted principal graph.

Node coordinates come from Kamada-Kawai stress minimization against
graph-theoretic distances.  Each data point is drawn on its projection
edge, pushed perpendicular to a seeded-random side by the scattering
parameter times its full-dimensional residual distance.  Edge widths
encode a per-point variable, node glyphs a categorical composition, and
everything renders to deterministic SVG for byte-for-byte reproducible
artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph

from .elpigraph import PrincipalGraph, project_points

PALETTE = (
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3",
    "#937860", "#da8bc3", "#8c8c8c", "#ccb974", "#64b5cd",
)


@dataclass(frozen=True)
class Layout2D:
    """Drawn node and point coordinates with the scattering used."""

    node_xy: np.ndarray
    point_xy: np.ndarray
    scattering: float
    sides: np.ndarray

    def __post_init__(self):
        if self.scattering < 0:
            raise ValueError("scattering must be non-negative")
        if not np.all(np.isfinite(self.node_xy)):
            raise ValueError("node coordinates must be finite")


def graph_distances(g: PrincipalGraph) -> np.ndarray:
    """All-pairs graph distance in edge counts; errors if disconnected."""
    rows = [a for a, b in g.edges] + [b for a, b in g.edges]
    cols = [b for a, b in g.edges] + [a for a, b in g.edges]
    adj = scipy.sparse.coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(g.n_nodes, g.n_nodes)
    )
    d = scipy.sparse.csgraph.shortest_path(adj, method="D", unweighted=True)
    if not np.all(np.isfinite(d)):
        raise ValueError("layout requires a connected graph")
    return d


def _stress(y, d, w):
    diff = y[:, None, :] - y[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    err = dist - d
    np.fill_diagonal(err, 0.0)
    return 0.5 * float((w * err**2).sum()), dist


def _stress_minimize(d, w, y0, max_iter=500, tol=1e-9):
    # Gradient descent with Armijo backtracking; the recorded stress
    # trace never increases.
    y = y0.copy()
    stress, dist = _stress(y, d, w)
    trace = [stress]
    step = 1.0
    for _ in range(max_iter):
        safe = np.maximum(dist, 1e-12)
        ratio = w * (1.0 - d / safe)
        np.fill_diagonal(ratio, 0.0)
        grad = 2.0 * (ratio.sum(axis=1)[:, None] * y - ratio @ y)
        gsq = float((grad**2).sum())
        if gsq == 0.0:
            break
        step = min(step * 2.0, 1.0)
        accepted = False
        for _ in range(60):
            cand = y - step * grad
            cand_stress, cand_dist = _stress(cand, d, w)
            if cand_stress <= stress - 1e-4 * step * gsq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        y, dist = cand, cand_dist
        improved = stress - cand_stress
        stress = cand_stress
        trace.append(stress)
        if improved < tol * max(stress, 1e-30):
            break
    return y, tuple(trace)


def layout_graph(g: PrincipalGraph, seed: int = 0, max_iter: int = 500) -> np.ndarray:
    """Kamada-Kawai 2D embedding of the graph's topology.

    Target distances are graph distances in edge counts, weighted by
    1/d^2; the start is the classical MDS solution plus a seeded jitter
    that breaks symmetric saddle points, so the result is deterministic
    for a given seed.
    """
    if g.n_nodes == 1:
        return np.zeros((1, 2))
    d = graph_distances(g)
    with np.errstate(divide="ignore"):
        w = np.where(d > 0, 1.0 / np.maximum(d, 1e-12) ** 2, 0.0)
    # Classical MDS on squared distances gives the starting coordinates.
    j = np.eye(g.n_nodes) - 1.0 / g.n_nodes
    b = -0.5 * j @ (d**2) @ j
    vals, vecs = np.linalg.eigh(b)
    y0 = vecs[:, -2:] * np.sqrt(np.clip(vals[-2:], 0.0, None))
    rng = np.random.default_rng(seed)
    y0 = y0 + rng.normal(scale=1e-3 * d.max(), size=y0.shape)
    y, _ = _stress_minimize(d, w, y0, max_iter=max_iter)
    return y


def auto_scattering(node_xy: np.ndarray, edges, residual: np.ndarray) -> float:
    """Scattering that puts the median offset at 25% of median edge length."""
    med_res = float(np.median(residual)) if residual.size else 0.0
    if med_res == 0.0:
        return 0.0
    lengths = np.array(
        [np.linalg.norm(node_xy[a] - node_xy[b]) for a, b in edges]
    )
    return 0.25 * float(np.median(lengths)) / med_res


def layout_points(
    X, g: PrincipalGraph, node_xy: np.ndarray, s: float | None = None, seed: int = 0
) -> Layout2D:
    """Scatter data points orthogonally around their drawn edges.

    Each point sits at its projection's image on the drawn edge, offset
    along the edge's 2D perpendicular by s times the full-dimensional
    residual distance, on a seeded-random side.  ``s=None`` picks the
    scattering via `auto_scattering`.
    """
    node_xy = np.asarray(node_xy, dtype=float)
    edge_idx, eps, d2 = project_points(X, g)
    residual = np.sqrt(d2)
    if s is None:
        s = auto_scattering(node_xy, g.edges, residual)
    n = len(edge_idx)
    rng = np.random.default_rng(seed)
    sides = rng.integers(0, 2, size=n) * 2 - 1
    a = np.array([e[0] for e in g.edges])[edge_idx]
    b = np.array([e[1] for e in g.edges])[edge_idx]
    base = node_xy[a] + eps[:, None] * (node_xy[b] - node_xy[a])
    vec = node_xy[b] - node_xy[a]
    length = np.linalg.norm(vec, axis=1)
    length[length == 0.0] = 1.0
    perp = np.column_stack([-vec[:, 1], vec[:, 0]]) / length[:, None]
    point_xy = base + (sides * s * residual)[:, None] * perp
    return Layout2D(node_xy, point_xy, float(s), sides)


def edge_widths(
    g: PrincipalGraph,
    values,
    partition,
    width_range: tuple[float, float] = (1.0, 6.0),
) -> np.ndarray:
    """Per-edge drawing width encoding a numeric variable.

    Each edge takes the mean value over the points assigned to its two
    endpoint nodes, min/max-normalized into ``width_range``; edges with
    no points get the minimum width.
    """
    values = np.asarray(values, dtype=float)
    lo, hi = width_range
    node_idx = partition.node_index
    sums = np.bincount(node_idx, weights=values, minlength=g.n_nodes)
    counts = np.bincount(node_idx, minlength=g.n_nodes)
    means = np.full(len(g.edges), np.nan)
    for e, (a, b) in enumerate(g.edges):
        n_pts = counts[a] + counts[b]
        if n_pts > 0:
            means[e] = (sums[a] + sums[b]) / n_pts
    filled = ~np.isnan(means)
    widths = np.full(len(g.edges), lo)
    if filled.any():
        span = means[filled].max() - means[filled].min()
        if span == 0.0:
            widths[filled] = 0.5 * (lo + hi)
        else:
            widths[filled] = lo + (means[filled] - means[filled].min()) / span * (hi - lo)
    return widths


def node_composition(g: PrincipalGraph, labels, partition):
    """Category fractions and point counts per node.

    Returns (fractions, counts): one dict per node mapping category to
    its share (summing to 1 where points exist; empty dict otherwise)
    and the assigned point count per node.
    """
    labels = np.asarray(labels, dtype=object)
    counts = np.bincount(partition.node_index, minlength=g.n_nodes)
    fractions = []
    for j in range(g.n_nodes):
        here = labels[partition.node_index == j]
        if here.size == 0:
            fractions.append({})
            continue
        cats, n_cat = np.unique(here.astype(str), return_counts=True)
        fractions.append({c: k / here.size for c, k in zip(cats, n_cat)})
    return tuple(fractions), counts


def _category_colors(categories):
    return {c: PALETTE[i % len(PALETTE)] for i, c in enumerate(categories)}


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _pie_paths(cx, cy, r, fractions, colors):
    parts = []
    items = sorted(fractions.items(), key=lambda kv: str(kv[0]))
    if len(items) == 1:
        c = colors[items[0][0]]
        parts.append(
            f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" fill="{c}"/>'
        )
        return parts
    angle = -0.5 * np.pi
    for cat, frac in items:
        sweep = 2.0 * np.pi * frac
        x0, y0 = cx + r * np.cos(angle), cy + r * np.sin(angle)
        angle += sweep
        x1, y1 = cx + r * np.cos(angle), cy + r * np.sin(angle)
        large = 1 if sweep > np.pi else 0
        parts.append(
            f'<path d="M {_fmt(cx)} {_fmt(cy)} L {_fmt(x0)} {_fmt(y0)} '
            f'A {_fmt(r)} {_fmt(r)} 0 {large} 1 {_fmt(x1)} {_fmt(y1)} Z" '
            f'fill="{colors[cat]}"/>'
        )
    return parts


def render_svg(
    g: PrincipalGraph,
    layout: Layout2D,
    widths=None,
    point_classes=None,
    compositions=None,
    node_counts=None,
    size: tuple[int, int] = (640, 480),
) -> str:
    """Deterministic SVG of the layout.

    Edges honor ``widths``, points are colored by ``point_classes``,
    and nodes become pie glyphs when ``compositions`` (with
    ``node_counts`` driving glyph radius) are given; a legend lists the
    categories in play.  Identical inputs yield identical bytes.
    """
    w_px, h_px = size
    margin = 30.0
    pts = layout.point_xy if layout.point_xy.size else np.empty((0, 2))
    everything = np.vstack([layout.node_xy, pts])
    lo = everything.min(axis=0)
    hi = everything.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    scale = min((w_px - 2 * margin) / span[0], (h_px - 2 * margin) / span[1])
    center = 0.5 * (lo + hi)

    def to_px(xy):
        x = w_px / 2 + (xy[..., 0] - center[0]) * scale
        y = h_px / 2 - (xy[..., 1] - center[1]) * scale
        return x, y

    nx, ny = to_px(layout.node_xy)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_px}" height="{h_px}" '
        f'viewBox="0 0 {w_px} {h_px}">',
        f'<rect width="{w_px}" height="{h_px}" fill="white"/>',
        '<g id="edges" stroke="#555555" stroke-linecap="round">',
    ]
    for e, (a, b) in enumerate(g.edges):
        sw = widths[e] if widths is not None else 1.5
        out.append(
            f'<line x1="{_fmt(nx[a])}" y1="{_fmt(ny[a])}" '
            f'x2="{_fmt(nx[b])}" y2="{_fmt(ny[b])}" stroke-width="{_fmt(sw)}"/>'
        )
    out.append("</g>")

    categories = []
    if point_classes is not None:
        categories = sorted({str(c) for c in point_classes})
    if compositions is not None:
        categories = sorted(
            set(categories) | {str(c) for f in compositions for c in f}
        )
    colors = _category_colors(categories)

    if len(pts):
        px, py = to_px(pts)
        out.append('<g id="points" fill-opacity="0.55">')
        for i in range(len(pts)):
            fill = colors[str(point_classes[i])] if point_classes is not None else "#9a9a9a"
            out.append(
                f'<circle cx="{_fmt(px[i])}" cy="{_fmt(py[i])}" r="2.00" fill="{fill}"/>'
            )
        out.append("</g>")

    out.append('<g id="nodes" stroke="#222222" stroke-width="0.75">')
    max_count = int(node_counts.max()) if node_counts is not None and len(node_counts) else 0
    for j in range(g.n_nodes):
        if compositions is not None:
            count = int(node_counts[j]) if node_counts is not None else 0
            if count == 0 or not compositions[j]:
                continue
            r = 4.0 + 6.0 * np.sqrt(count / max_count) if max_count else 4.0
            out.append(f'<g id="node{j}">')
            out.extend(_pie_paths(nx[j], ny[j], r, compositions[j], colors))
            out.append("</g>")
        else:
            out.append(
                f'<circle id="node{j}" cx="{_fmt(nx[j])}" cy="{_fmt(ny[j])}" '
                f'r="4.00" fill="#ffffff"/>'
            )
    out.append("</g>")

    if categories:
        out.append('<g id="legend" font-family="sans-serif" font-size="11">')
        for i, cat in enumerate(categories):
            y = margin + 16.0 * i
            out.append(
                f'<rect x="{_fmt(margin)}" y="{_fmt(y - 9)}" width="10" height="10" '
                f'fill="{colors[cat]}"/>'
            )
            out.append(f'<text x="{_fmt(margin + 14)}" y="{_fmt(y)}">{cat}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out)


def layout_payload(
    g: PrincipalGraph, layout: Layout2D, widths=None, compositions=None, node_counts=None
) -> dict:
    """Layout as plain JSON-ready structures for external plotting."""
    payload = {
        "nodes_xy": layout.node_xy.tolist(),
        "edges": [list(e) for e in g.edges],
        "points_xy": layout.point_xy.tolist(),
        "scattering": layout.scattering,
        "sides": layout.sides.tolist(),
    }
    if widths is not None:
        payload["edge_widths"] = [float(v) for v in widths]
    if compositions is not None:
        payload["node_compositions"] = [
            {str(k): float(v) for k, v in f.items()} for f in compositions
        ]
    if node_counts is not None:
        payload["node_counts"] = [int(c) for c in node_counts]
    return payload
