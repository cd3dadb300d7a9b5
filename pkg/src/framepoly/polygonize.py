"""Frame-field corner detection, per-wall simplification, planar face
enumeration, and probability filtering into final building polygons."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field_algebra import Frame, FrameCoeffs, frame_from_coeffs, is_corner
from .field_synthesis import FrameFieldGrid
from .raster import RasterGrid, rasterize_ring_interior, signed_area
from .skeletonize import SkeletonGraph, rebuild_graph

AREA_EPS = 1e-9


class PlanarityError(ValueError):
    """Raised when the graph to polygonize has crossing segments."""


@dataclass
class SimplifyConfig:
    tolerance: float = 1.0
    probability_threshold: float = 0.5


@dataclass
class ScoredPolygon:
    outer: np.ndarray
    holes: list = field(default_factory=list)
    score: float = 1.0

    def rings(self):
        return [self.outer] + list(self.holes)


@dataclass
class BuildingSet:
    polygons: list = field(default_factory=list)


@dataclass
class Face:
    indices: np.ndarray  # node ids, open (no duplicated end)
    ring: np.ndarray     # closed coordinate ring, positive signed area


# ---------------------------------------------------------------------------
# corner detection

def _sample_frame_nn(fieldgrid: FrameFieldGrid, p) -> Frame:
    # nearest pixel center to a continuous (row, col) point
    r = int(np.clip(np.floor(p[0]), 0, fieldgrid.height - 1))
    c = int(np.clip(np.floor(p[1]), 0, fieldgrid.width - 1))
    v = fieldgrid.coeffs.data[r, c].astype(np.float64)
    return frame_from_coeffs(FrameCoeffs(c0=complex(v[0], v[1]), c2=complex(v[2], v[3])))


def detect_corners(graph: SkeletonGraph, fieldgrid: FrameFieldGrid) -> set:
    """Node ids where the walking direction switches frame directions.

    Open-path endpoints (junctions) are never corners.  On a closed isolated
    path every node is interior via wraparound, including the seam node.
    A run of consecutive flagged nodes marks one physical corner, so only the
    sharpest node (largest turn) of each run is reported.
    """
    corners = set()
    pos = graph.pos
    for path in graph.paths():
        n = len(path)
        if n < 3:
            continue
        closed = path[0] == path[-1]
        nodes = path[:-1] if closed else path
        m = len(nodes)
        flags = np.zeros(m, dtype=bool)
        turn = np.zeros(m)
        rng = range(m) if closed else range(1, m - 1)
        for k in rng:
            i_prev = nodes[(k - 1) % m] if closed else nodes[k - 1]
            i_next = nodes[(k + 1) % m] if closed else nodes[k + 1]
            p = pos[nodes[k]]
            e_prev = p - pos[i_prev]
            e_next = pos[i_next] - p
            if not (np.any(e_prev) and np.any(e_next)):
                continue
            f = _sample_frame_nn(fieldgrid, p)
            if is_corner(e_prev, e_next, f):
                flags[k] = True
                ca = float(np.dot(e_prev, e_next)
                           / (np.linalg.norm(e_prev) * np.linalg.norm(e_next)))
                turn[k] = np.arccos(np.clip(ca, -1.0, 1.0))
        for k in _run_maxima(flags, turn, closed):
            corners.add(int(nodes[k]))
    return corners


def _run_maxima(flags: np.ndarray, score: np.ndarray, cyclic: bool):
    """Position of the max score within each run of consecutive True flags."""
    m = len(flags)
    idx = np.flatnonzero(flags)
    if len(idx) == 0:
        return []
    runs = []
    cur = [int(idx[0])]
    for k in idx[1:]:
        if k == cur[-1] + 1:
            cur.append(int(k))
        else:
            runs.append(cur)
            cur = [int(k)]
    runs.append(cur)
    if cyclic and len(runs) > 1 and runs[0][0] == 0 and runs[-1][-1] == m - 1:
        runs[0] = runs.pop() + runs[0]
    return [max(run, key=lambda k: score[k]) for run in runs]


def _fit_line(pts):
    pts = np.asarray(pts, dtype=np.float64)
    mean = pts.mean(axis=0)
    d = pts - mean
    w, v = np.linalg.eigh(d.T @ d)
    direction = v[:, -1]
    normal = np.array([-direction[1], direction[0]])
    return mean, direction, normal


def _level_crossings(vals, ts, level):
    d = vals - level
    s = np.sign(d)
    idx = np.flatnonzero(s[:-1] * s[1:] < 0)
    roots = []
    for k in idx:
        roots.append(ts[k] - d[k] * (ts[k + 1] - ts[k]) / (d[k + 1] - d[k]))
    return roots


def _row_crossings(vals, ts, level):
    """Per row: all sign-change roots as (rows, root_t) arrays."""
    d = vals - level
    change = (np.sign(d[:, :-1]) * np.sign(d[:, 1:])) < 0
    rows, ks = np.nonzero(change)
    t0 = ts[ks]
    t1 = ts[ks + 1]
    d0 = d[rows, ks]
    d1 = d[rows, ks + 1]
    return rows, t0 - d0 * (t1 - t0) / (d1 - d0)


def _snap_offsets(centers, normal, y_int, y_edge, level):
    """Offset along the normal to the wall evidence for each probe center.

    Prefers the interior isoline crossing nearest zero; where the interior
    map is flat (shared walls) falls back to the midline of the edge band,
    accepted only at a plausible band width.  Returns (t, ok) arrays.
    """
    from .raster import bilinear_sample

    n = len(centers)
    t_out = np.zeros(n)
    ok = np.zeros(n, dtype=bool)
    ts = np.linspace(-0.9, 0.9, 19)
    probes = (centers[:, None, :] + ts[None, :, None] * normal[None, None, :])
    vals, _ = bilinear_sample(y_int, probes.reshape(-1, 2))
    rows, roots = _row_crossings(vals[:, 0].reshape(n, len(ts)), ts, level)
    order = np.argsort(np.abs(roots), kind="stable")
    for k in order[::-1]:  # nearest-zero root written last wins
        t_out[rows[k]] = roots[k]
        ok[rows[k]] = True
    if y_edge is not None and not ok.all():
        miss = np.flatnonzero(~ok)
        tw = np.linspace(-2.2, 2.2, 45)
        probes = (centers[miss, None, :] + tw[None, :, None] * normal[None, None, :])
        vals, _ = bilinear_sample(y_edge, probes.reshape(-1, 2))
        rows, roots = _row_crossings(vals[:, 0].reshape(len(miss), len(tw)), tw, level)
        lo = np.full(len(miss), -np.inf)
        hi = np.full(len(miss), np.inf)
        for r, t in zip(rows, roots):
            if t < 0:
                lo[r] = max(lo[r], t)
            else:
                hi[r] = min(hi[r], t)
        width = hi - lo
        good = np.isfinite(width) & (width >= 1.2) & (width <= 2.8)
        t_out[miss[good]] = 0.5 * (lo[good] + hi[good])
        ok[miss[good]] = True
    return t_out, ok


def _snap_arm(pts, y_int, y_edge, level):
    """Fit the arm, then refit through dense wall-evidence samples.

    Node positions only sparsely sample the isoline zigzag along slanted
    walls; probing the isoline every third of a pixel along the raw fit
    averages the zigzag out.
    """
    mean, direction, normal = _fit_line(pts)
    span = float(np.ptp(np.asarray(pts) @ direction))
    n_probe = max(12, int(span * 3))
    offs = np.linspace(-0.5 * span, 0.5 * span, n_probe)
    centers = mean[None, :] + offs[:, None] * direction[None, :]
    t, ok = _snap_offsets(centers, normal, y_int, y_edge, level)
    if int(ok.sum()) < max(3, n_probe // 2):
        return mean, direction, normal
    return _fit_line(centers[ok] + t[ok, None] * normal[None, :])


def validate_corners(graph: SkeletonGraph, corners: set, min_turn_deg: float = 20.0,
                     k: int = 3, exclude_r: float = 1.0) -> set:
    """Drop detected corners whose fitted arms are nearly collinear.

    Edges of a residual staircase on a 45-degree wall sit on the frame
    classification boundary, so noise flips single nodes into corners; the
    actual wall turn measured over a few neighbours on each side separates
    those from real building corners.
    """
    keep = set()
    pos = graph.pos
    for path in graph.paths():
        closed = path[0] == path[-1]
        nodes = path[:-1] if closed else path
        m = len(nodes)
        for ki in range(m):
            node = int(nodes[ki])
            if node not in corners:
                continue
            c = pos[node]

            def collect(step):
                pts = []
                j = ki
                for _ in range(m):
                    j = j + step
                    if closed:
                        j %= m
                        if j == ki:
                            break
                    elif not (0 <= j < m):
                        break
                    p = pos[nodes[j]]
                    if np.hypot(*(p - c)) >= exclude_r:
                        pts.append(p)
                        if len(pts) >= k:
                            break
                return pts

            side_a = [c] + collect(-1)
            side_b = [c] + collect(+1)
            if len(side_a) < 2 or len(side_b) < 2:
                continue
            _, da, _ = _fit_line(side_a)
            _, db, _ = _fit_line(side_b)
            turn = np.degrees(np.arccos(np.clip(abs(float(da @ db)), 0.0, 1.0)))
            if turn >= min_turn_deg:
                keep.add(node)
    return keep


def refine_corner_positions(graph: SkeletonGraph, corners: set,
                            y_int: RasterGrid | None = None,
                            y_edge: RasterGrid | None = None,
                            level: float = 0.5, fit_k: int = 8,
                            exclude_r: float = 2.5, max_move: float = 2.0) -> SkeletonGraph:
    """Re-position corner and junction nodes at the intersection of their
    incident wall lines.

    The optimizer leaves nodes within a few hundredths of a pixel of the
    walls but with a small systematic bias, and the node nearest a corner
    underestimates it; both poison downstream tangent comparisons.  Each
    incident wall arm is therefore fitted by total least squares through up
    to fit_k nodes (skipping those within exclude_r of the vertex), with
    every fit point snapped onto the probability isoline (or the edge band
    midline for interior shared walls) when y_int / y_edge are given.  The
    vertex moves to the least-squares intersection of its arms unless that
    lies farther than max_move away.
    """
    pos = graph.pos.copy()
    paths = list(graph.paths())

    def snap_or_raw(pts):
        if y_int is None:
            return _fit_line(pts)
        return _snap_arm(pts, y_int, y_edge, level)

    # arms per target node: corners live on one path, junctions end many
    arms_of = {}

    def add_arm(node, pts):
        if len(pts) >= 2:
            arms_of.setdefault(int(node), []).append(np.asarray(pts))

    for path in paths:
        closed = path[0] == path[-1]
        nodes = path[:-1] if closed else path
        m = len(nodes)
        if m < 3:
            continue
        stop_pos = {k for k in range(m) if int(nodes[k]) in corners}
        endpoints = set() if closed else {0, m - 1}

        def collect(k, step):
            c = pos[nodes[k]]
            pts = []
            j = k
            for _ in range(m):
                j = j + step
                if closed:
                    j %= m
                    if j == k:
                        break
                elif not (0 <= j < m):
                    break
                if j in stop_pos or j in endpoints:
                    break
                p = pos[nodes[j]]
                if np.hypot(*(p - c)) >= exclude_r:
                    pts.append(p)
                    if len(pts) >= fit_k:
                        break
            return pts

        for k in sorted(stop_pos):
            add_arm(nodes[k], collect(k, -1))
            add_arm(nodes[k], collect(k, +1))
        if not closed:
            if graph.degrees[nodes[0]] >= 3:
                add_arm(nodes[0], collect(0, +1))
            if graph.degrees[nodes[-1]] >= 3:
                add_arm(nodes[-1], collect(m - 1, -1))

    for node, arm_pts in arms_of.items():
        if len(arm_pts) < 2:
            continue
        lines = []
        for pts in arm_pts:
            mean, direction, normal = snap_or_raw(pts)
            span = float(np.ptp(pts @ direction))
            lines.append((mean, normal, max(span, 1e-3)))
        a = np.zeros((2, 2))
        b = np.zeros(2)
        for mean, normal, w in lines:
            nn = np.outer(normal, normal) * w
            a += nn
            b += nn @ mean
        # near-parallel arms (a false corner on a straight wall) give an
        # ill-conditioned system whose solution slides along the wall
        ev = np.linalg.eigvalsh(a)
        if ev[0] < 0.05 * ev[1]:
            continue
        x = np.linalg.solve(a, b)
        if np.hypot(*(x - pos[node])) <= max_move:
            pos[node] = x
    return graph.__class__(pos, graph.degrees.copy(), graph.path_index.copy(),
                           graph.path_delim.copy(), graph.batch_delim.copy())


# ---------------------------------------------------------------------------
# per-wall RDP

def _rdp_keep(points: np.ndarray, eps: float) -> np.ndarray:
    """Boolean keep-mask of Ramer-Douglas-Peucker on an open polyline."""
    n = len(points)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        a = points[lo]
        b = points[hi]
        seg = b - a
        rel = points[lo + 1:hi] - a
        den = float(seg @ seg)
        if den < 1e-24:
            dist = np.hypot(rel[:, 0], rel[:, 1])
        else:
            t = np.clip((rel @ seg) / den, 0.0, 1.0)
            off = rel - t[:, None] * seg
            dist = np.hypot(off[:, 0], off[:, 1])
        k = int(np.argmax(dist))
        if dist[k] > eps:
            mid = lo + 1 + k
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return keep


def split_and_simplify(graph: SkeletonGraph, corners: set,
                       cfg: SimplifyConfig) -> SkeletonGraph:
    """Apply RDP to every wall sub-path between corners and junctions.

    Corner and path-end nodes are always retained.  tolerance <= 0 disables
    simplification entirely.  The path structure (count, junction sharing,
    batching) is preserved; only interior nodes are removed.
    """
    eps = cfg.tolerance
    new_paths = []
    for path in graph.paths():
        n = len(path)
        if eps <= 0.0 or n <= 2:
            new_paths.append(np.asarray(path).copy())
            continue
        closed = path[0] == path[-1]
        if closed:
            nodes = np.asarray(path[:-1])
            m = len(nodes)
            breaks = sorted(k for k in range(m) if int(nodes[k]) in corners)
            if not breaks:
                # no corner on the ring: split at the seam and its farthest node
                d = np.hypot(*(graph.pos[nodes] - graph.pos[nodes[0]]).T)
                breaks = sorted({0, int(np.argmax(d))} if m > 1 else {0})
            start = breaks[0]
            rolled = np.roll(nodes, -start)
            rel = [(b - start) % m for b in breaks] + [m]
            out = [rolled[0]]
            for s, e in zip(rel[:-1], rel[1:]):
                sub = np.concatenate([rolled[s:e + 1]]) if e < m else np.concatenate([rolled[s:], rolled[:1]])
                pts = graph.pos[sub]
                kept = _rdp_keep(pts, eps)
                out.extend(sub[kept][1:])
            new_paths.append(np.asarray(out, dtype=np.int64))
        else:
            breaks = [0] + [k for k in range(1, n - 1) if int(path[k]) in corners] + [n - 1]
            out = [path[0]]
            for s, e in zip(breaks[:-1], breaks[1:]):
                sub = np.asarray(path[s:e + 1])
                kept = _rdp_keep(graph.pos[sub], eps)
                out.extend(sub[kept][1:])
            new_paths.append(np.asarray(out, dtype=np.int64))

    return rebuild_graph(graph, new_paths)


# ---------------------------------------------------------------------------
# planar faces

def _segments_cross(p1, p2, p3, p4) -> bool:
    """Proper or touching intersection of segments p1p2 and p3p4 (no shared ends)."""

    def orient(a, b, c):
        return (b[1] - a[1]) * (c[0] - a[0]) - (b[0] - a[0]) * (c[1] - a[1])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True

    def on_seg(a, b, c):
        return (abs(orient(a, b, c)) < AREA_EPS
                and min(a[0], b[0]) - AREA_EPS <= c[0] <= max(a[0], b[0]) + AREA_EPS
                and min(a[1], b[1]) - AREA_EPS <= c[1] <= max(a[1], b[1]) + AREA_EPS)

    for a, b, c in ((p1, p2, p3), (p1, p2, p4), (p3, p4, p1), (p3, p4, p2)):
        if on_seg(a, b, c):
            return True
    return False


def _collect_edges(graph: SkeletonGraph):
    edges = set()
    for path in graph.paths():
        for u, v in zip(path[:-1], path[1:]):
            u, v = int(u), int(v)
            if u == v:
                continue
            if not np.any(graph.pos[u] != graph.pos[v]):
                continue  # geometric null edge
            edges.add((min(u, v), max(u, v)))
    return sorted(edges)


def _check_planarity(graph: SkeletonGraph, edges) -> None:
    """All-pairs segment intersection test, bbox-prefiltered with numpy."""
    pos = graph.pos
    e = np.asarray(edges, dtype=np.int64)
    if len(e) < 2:
        return
    p = pos[e[:, 0]]
    q = pos[e[:, 1]]
    lo = np.minimum(p, q)
    hi = np.maximum(p, q)
    n = len(e)
    ii, jj = np.triu_indices(n, k=1)
    overlap = ~((hi[ii] < lo[jj] - AREA_EPS) | (hi[jj] < lo[ii] - AREA_EPS)).any(axis=1)
    shared = ((e[ii, 0:1] == e[jj]).any(axis=1) | (e[ii, 1:2] == e[jj]).any(axis=1))
    cand = np.flatnonzero(overlap & ~shared)
    for k in cand:
        i, j = int(ii[k]), int(jj[k])
        if _segments_cross(p[i], q[i], p[j], q[j]):
            raise PlanarityError(f"edges {tuple(e[i])} and {tuple(e[j])} intersect")


def _prune_ring(ids: list) -> list:
    """Remove immediate backtracks a-b-a (spur traversals) from a face cycle."""
    ring = list(ids)
    changed = True
    while changed and len(ring) >= 3:
        changed = False
        m = len(ring)
        for k in range(m):
            if ring[(k - 1) % m] == ring[(k + 1) % m]:
                drop = sorted(((k) % m, (k + 1) % m), reverse=True)
                for dk in drop:
                    ring.pop(dk)
                changed = True
                break
    # collapse any consecutive duplicates left by pruning
    out = [ring[0]] if ring else []
    for x in ring[1:]:
        if x != out[-1]:
            out.append(x)
    while len(out) > 1 and out[0] == out[-1]:
        out.pop()
    return out


def detect_polygons(graph: SkeletonGraph) -> list:
    """Trace bounded faces of the planar graph via the rotation system.

    Half-edges at each node are ordered by angle; the successor of (a -> b)
    is the rotational predecessor of the twin (b -> a) at b.  Faces with
    non-positive signed area (the unbounded face per component, degenerate
    slivers) are discarded; every bounded region is reported exactly once.
    """
    edges = _collect_edges(graph)
    if not edges:
        return []
    _check_planarity(graph, edges)
    pos = graph.pos
    out_edges = {}
    for a, b in edges:
        out_edges.setdefault(a, []).append(b)
        out_edges.setdefault(b, []).append(a)
    order = {}
    for v, nbrs in out_edges.items():
        ang = [np.arctan2(pos[n][0] - pos[v][0], pos[n][1] - pos[v][1]) for n in nbrs]
        ranked = [n for _, n in sorted(zip(ang, nbrs))]
        order[v] = {n: k for k, n in enumerate(ranked)}
        out_edges[v] = ranked

    visited = set()
    faces = []
    for a, b in edges:
        for he in ((a, b), (b, a)):
            if he in visited:
                continue
            ring = []
            cur = he
            while cur not in visited:
                visited.add(cur)
                ring.append(cur[0])
                u, v = cur
                nbrs = out_edges[v]
                k = order[v][u]
                cur = (v, nbrs[(k - 1) % len(nbrs)])
            ids = _prune_ring(ring)
            # distinct nodes can share a position after refinement; drop the
            # geometric duplicates so output rings stay simple
            dedup = []
            for i in ids:
                if not dedup or np.any(pos[i] != pos[dedup[-1]]):
                    dedup.append(i)
            while len(dedup) > 1 and np.all(pos[dedup[0]] == pos[dedup[-1]]):
                dedup.pop()
            ids = dedup
            if len(ids) < 3:
                continue
            coords = np.vstack([pos[ids], pos[ids[:1]]])
            if signed_area(coords) > AREA_EPS:
                faces.append(Face(indices=np.asarray(ids, dtype=np.int64), ring=coords))
    return faces


# ---------------------------------------------------------------------------
# probability filtering and hole assignment

def _representative_point(ring: np.ndarray):
    """A point strictly inside a closed ring (scanline midpoint)."""
    ys = ring[:-1, 0]
    lo, hi = float(ys.min()), float(ys.max())
    for frac in (0.5, 0.25, 0.75, 0.37, 0.63):
        yc = lo + (hi - lo) * frac
        xs = []
        y0 = ring[:-1, 0]
        y1 = ring[1:, 0]
        hit = ((y0 <= yc) & (yc < y1)) | ((y1 <= yc) & (yc < y0))
        if not hit.any():
            continue
        t = (yc - y0[hit]) / (y1[hit] - y0[hit])
        xs = np.sort(ring[:-1, 1][hit] + t * (ring[1:, 1][hit] - ring[:-1, 1][hit]))
        if len(xs) >= 2 and xs[1] - xs[0] > 1e-9:
            return np.array([yc, 0.5 * (xs[0] + xs[1])])
    return ring[:-1].mean(axis=0)


def _point_in_ring(p, ring: np.ndarray) -> bool:
    y0 = ring[:-1, 0]
    y1 = ring[1:, 0]
    x0 = ring[:-1, 1]
    x1 = ring[1:, 1]
    hit = ((y0 <= p[0]) & (p[0] < y1)) | ((y1 <= p[0]) & (p[0] < y0))
    if not hit.any():
        return False
    t = (p[0] - y0[hit]) / (y1[hit] - y0[hit])
    xs = x0[hit] + t * (x1[hit] - x0[hit])
    return bool(np.sum(xs > p[1]) % 2 == 1)


def filter_buildings(faces, y_int: RasterGrid, cfg: SimplifyConfig) -> BuildingSet:
    """Score faces by mean interior probability; low scores become holes.

    A face survives when its score is >= the threshold (ties kept).  A
    dropped face whose smallest strictly-containing face survives is attached
    to it as an interior ring; other dropped faces vanish.
    """
    extent = (y_int.height, y_int.width)
    scored = []
    for f in faces:
        area = signed_area(f.ring)
        if area <= AREA_EPS:
            continue
        mask = rasterize_ring_interior(f.ring, extent).data[:, :, 0]
        npix = float(mask.sum())
        score = float((mask * y_int.data[:, :, 0]).sum() / npix) if npix > 0 else 0.0
        scored.append((f, area, score))

    # containment parent: the smallest face strictly containing the probe point
    parents = []
    for i, (f, area, _) in enumerate(scored):
        probe = _representative_point(f.ring)
        best = None
        for j, (g, garea, _) in enumerate(scored):
            if i == j or garea <= area:
                continue
            if _point_in_ring(probe, g.ring):
                if best is None or garea < scored[best][1]:
                    best = j
        parents.append(best)

    polygons = []
    face_to_poly = {}
    for i, (f, _, score) in enumerate(scored):
        if score >= cfg.probability_threshold:
            face_to_poly[i] = len(polygons)
            polygons.append(ScoredPolygon(outer=f.ring.copy(), holes=[], score=score))
    for i, (f, _, score) in enumerate(scored):
        if score >= cfg.probability_threshold:
            continue
        parent = parents[i]
        if parent is not None and parent in face_to_poly:
            hole = f.ring[::-1].copy()  # negative orientation for interior rings
            polygons[face_to_poly[parent]].holes.append(hole)
    return BuildingSet(polygons=polygons)
