"""Thinning, skeleton graphs, marching squares, and flat-array graph batching.

The graph structure is a CSR-style set of flat arrays so whole batches can be
processed with array ops only:
  pos (N,2) float     node positions (row, col)
  degrees (N,)        distinct-neighbor counts
  path_index (K,)     node indices of all paths concatenated
  path_delim (P+1,)   start offsets of each path in path_index
  batch_delim (B+1,)  start offsets of each member graph in path_delim
A closed isolated contour is a path whose first and last entries coincide.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .raster import RasterGrid


@dataclass
class SkeletonGraph:
    pos: np.ndarray
    degrees: np.ndarray
    path_index: np.ndarray
    path_delim: np.ndarray
    batch_delim: np.ndarray = field(default=None)

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(-1, 2)
        self.degrees = np.asarray(self.degrees, dtype=np.int64).reshape(-1)
        self.path_index = np.asarray(self.path_index, dtype=np.int64).reshape(-1)
        self.path_delim = np.asarray(self.path_delim, dtype=np.int64).reshape(-1)
        if self.batch_delim is None:
            self.batch_delim = np.array([0, len(self.path_delim) - 1], dtype=np.int64)
        self.batch_delim = np.asarray(self.batch_delim, dtype=np.int64).reshape(-1)

    @property
    def n_nodes(self) -> int:
        return self.pos.shape[0]

    @property
    def n_paths(self) -> int:
        return len(self.path_delim) - 1

    def paths(self):
        for p in range(self.n_paths):
            yield self.path_index[self.path_delim[p]:self.path_delim[p + 1]]

    def validate(self) -> None:
        if self.path_delim[0] != 0 or self.path_delim[-1] != len(self.path_index):
            raise ValueError("path_delim must span path_index")
        if np.any(np.diff(self.path_delim) <= 0):
            raise ValueError("path_delim must be strictly increasing")
        if len(self.path_index) and (self.path_index.min() < 0
                                     or self.path_index.max() >= self.n_nodes):
            raise ValueError("path_index out of range")
        if self.batch_delim[0] != 0 or self.batch_delim[-1] != self.n_paths:
            raise ValueError("batch_delim must span path_delim")

    def to_json(self) -> str:
        return json.dumps({
            "pos": self.pos.tolist(),
            "degrees": self.degrees.tolist(),
            "path_index": self.path_index.tolist(),
            "path_delim": self.path_delim.tolist(),
            "batch_delim": self.batch_delim.tolist(),
        }, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SkeletonGraph":
        d = json.loads(text)
        return SkeletonGraph(np.array(d["pos"], dtype=np.float64).reshape(-1, 2),
                             d["degrees"], d["path_index"], d["path_delim"],
                             d["batch_delim"])


def empty_graph() -> SkeletonGraph:
    return SkeletonGraph(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, int),
                         np.array([0]), np.array([0, 0]))


def with_positions(graph: SkeletonGraph, pos: np.ndarray) -> SkeletonGraph:
    return replace(graph, pos=np.asarray(pos, dtype=np.float64).copy())


# ---------------------------------------------------------------------------
# Zhang-Suen thinning

def _neighbors8(img):
    # P2..P9 clockwise from north, via a zero pad
    p = np.pad(img, 1)
    return (p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:], p[2:, 2:],
            p[2:, 1:-1], p[2:, :-2], p[1:-1, :-2], p[:-2, :-2])


def _thin_pass(img, first: bool) -> bool:
    n = _neighbors8(img)
    b = np.zeros(img.shape, dtype=np.int32)
    for x in n:
        b += x
    seq = list(n) + [n[0]]
    a = np.zeros(img.shape, dtype=np.int32)
    for k in range(8):
        a += ((seq[k] == 0) & (seq[k + 1] == 1)).astype(np.int32)
    p2, _, p4, _, p6, _, p8, _ = n
    if first:
        cond = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
    else:
        cond = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
    kill = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & cond
    img[kill] = 0
    return bool(kill.any())


def thin(mask: RasterGrid) -> RasterGrid:
    """Two-subiteration thinning to a one-pixel-wide fixpoint (output subset of input)."""
    if mask.channels != 1:
        raise ValueError("thin expects a 1-channel mask")
    data = mask.data[:, :, 0]
    if not np.isin(data, (0.0, 1.0)).all():
        raise ValueError("thin expects a binary mask")
    img = data.astype(np.uint8)
    while True:
        c1 = _thin_pass(img, first=True)
        c2 = _thin_pass(img, first=False)
        if not (c1 or c2):
            break
    return RasterGrid(img.astype(np.float32))


# ---------------------------------------------------------------------------
# skeleton pixels -> graph

_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _pixel_adjacency(img):
    """Neighbor lists under 8-connectivity with diagonal shortcuts removed.

    A diagonal link is kept only when neither of the two orthogonal pixels it
    cuts across is set, so the resulting geometric graph has no crossing
    segments (pairs of crossing diagonals inside 2x2 blocks are replaced by
    the orthogonal 4-cycle).
    """
    coords = np.argwhere(img > 0)
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    coords = coords[order]
    index = {(int(r), int(c)): i for i, (r, c) in enumerate(coords)}
    h, w = img.shape
    nbrs = []
    for r, c in coords:
        lst = []
        for dr, dc in _OFFSETS:
            rr, cc = int(r) + dr, int(c) + dc
            if not (0 <= rr < h and 0 <= cc < w) or img[rr, cc] == 0:
                continue
            if dr != 0 and dc != 0:
                if img[int(r) + dr, int(c)] or img[int(r), int(c) + dc]:
                    continue
            lst.append(index[(rr, cc)])
        nbrs.append(lst)
    return coords, nbrs


def _merge_junction_clusters(coords, nbrs):
    """Collapse connected clusters of junction pixels (degree != 2) into one
    node at the lexicographically smallest member pixel.

    Thinning often leaves 2-3 adjacent junction pixels at a T; keeping them
    separate splits what is conceptually one junction across several nodes,
    which both breaks shared-wall coherence and lets the optimizer drive the
    near-coincident nodes into crossing segments.
    """
    n = len(coords)
    degrees = np.array([len(x) for x in nbrs], dtype=np.int64)
    is_junc = degrees != 2
    rep = np.arange(n)
    for i in range(n):
        if not is_junc[i]:
            continue
        for j in nbrs[i]:
            if is_junc[j]:
                a, b = rep[i], rep[j]
                while rep[a] != a:
                    a = rep[a]
                while rep[b] != b:
                    b = rep[b]
                if a != b:
                    hi, lo = max(a, b), min(a, b)
                    rep[hi] = lo
    for i in range(n):
        r = i
        while rep[r] != r:
            r = rep[r]
        rep[i] = r
    if np.all(rep == np.arange(n)):
        return coords, nbrs
    keep = np.flatnonzero(rep == np.arange(n))
    new_id = -np.ones(n, dtype=np.int64)
    new_id[keep] = np.arange(len(keep))
    merged_nbrs = [set() for _ in keep]
    for i in range(n):
        for j in nbrs[i]:
            a, b = new_id[rep[i]], new_id[rep[j]]
            if a != b:
                merged_nbrs[a].add(int(b))
    return coords[keep], [sorted(s) for s in merged_nbrs]


def _graph_from_adjacency(coords, nbrs) -> SkeletonGraph:
    n = len(coords)
    degrees = np.array([len(x) for x in nbrs], dtype=np.int64)
    pos = coords.astype(np.float64) + 0.5
    visited = set()
    paths = []

    def walk(start, first):
        seq = [start, first]
        visited.add((min(start, first), max(start, first)))
        prev, cur = start, first
        while degrees[cur] == 2:
            nxt = nbrs[cur][0] if nbrs[cur][0] != prev else nbrs[cur][1]
            key = (min(cur, nxt), max(cur, nxt))
            if key in visited:
                break
            visited.add(key)
            seq.append(nxt)
            prev, cur = cur, nxt
        return seq

    junctions = [i for i in range(n) if degrees[i] != 2]
    for j in junctions:
        for nb in nbrs[j]:
            key = (min(j, nb), max(j, nb))
            if key not in visited:
                paths.append(walk(j, nb))
    # remaining untouched edges belong to pure degree-2 cycles
    for i in range(n):
        if degrees[i] == 2:
            for nb in nbrs[i]:
                key = (min(i, nb), max(i, nb))
                if key not in visited:
                    paths.append(walk(i, nb))
    for j in junctions:
        if degrees[j] == 0:
            paths.append([j])

    if not paths:
        return empty_graph() if n == 0 else SkeletonGraph(
            pos, degrees, np.zeros(0, int), np.array([0]), np.array([0, 0]))
    path_index = np.concatenate([np.asarray(p, dtype=np.int64) for p in paths])
    path_delim = np.concatenate([[0], np.cumsum([len(p) for p in paths])]).astype(np.int64)
    return SkeletonGraph(pos, degrees, path_index, path_delim,
                         np.array([0, len(paths)], dtype=np.int64))


def skeleton_to_graph(skel: RasterGrid) -> SkeletonGraph:
    """Trace junction-to-junction polyline paths through a thin binary mask."""
    if skel.channels != 1:
        raise ValueError("skeleton_to_graph expects a 1-channel mask")
    img = skel.data[:, :, 0]
    if not np.isin(img, (0.0, 1.0)).all():
        raise ValueError("skeleton_to_graph expects a binary mask")
    coords, nbrs = _pixel_adjacency(img.astype(np.uint8))
    coords, nbrs = _merge_junction_clusters(coords, nbrs)
    return _graph_from_adjacency(coords, nbrs)


# ---------------------------------------------------------------------------
# marching squares

def _cross_point(key, g, level):
    kind, i, j = key
    a = g[i, j]
    if kind == "h":
        b = g[i, j + 1]
        t = (level - a) / (b - a)
        return (i + 0.5, j + 0.5 + t)
    b = g[i + 1, j]
    t = (level - a) / (b - a)
    return (i + 0.5 + t, j + 0.5)


def _cell_segments(ins, center_in):
    """Directed (entry_edge, exit_edge) pairs per cell; local edges t/r/b/l.

    Direction is chosen so the inside region sits on the fixed side used by
    the linker; saddles are split by the cell-center test.
    """
    tl, tr, br, bl = ins
    code = (tl << 3) | (tr << 2) | (br << 1) | bl
    table = {
        0b0000: [],
        0b1111: [],
        0b1000: [("l", "t")],
        0b0100: [("t", "r")],
        0b0010: [("r", "b")],
        0b0001: [("b", "l")],
        0b1100: [("l", "r")],
        0b0110: [("t", "b")],
        0b0011: [("r", "l")],
        0b1001: [("b", "t")],
        0b0111: [("t", "l")],
        0b1011: [("r", "t")],
        0b1101: [("b", "r")],
        0b1110: [("l", "b")],
    }
    if code == 0b1010:  # TL+BR inside
        return [("l", "b"), ("r", "t")] if center_in else [("l", "t"), ("r", "b")]
    if code == 0b0101:  # TR+BL inside
        return [("t", "l"), ("b", "r")] if center_in else [("t", "r"), ("b", "l")]
    return table[code]


def marching_squares(prob: RasterGrid, level: float):
    """Sub-pixel iso-contours of a 1-channel grid at the given level.

    Contours are closed polylines unless the underlying region touches the
    grid border, in which case they are open.  Points are (row, col) in the
    pixel-center frame so values sit at (i + 0.5, j + 0.5).
    """
    if prob.channels != 1:
        raise ValueError("marching_squares expects a 1-channel grid")
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie strictly between 0 and 1")
    g = prob.data[:, :, 0].astype(np.float64)
    h, w = g.shape
    if h < 2 or w < 2:
        return []
    inside = g >= level

    def edge_local(kind, i, j, loc):
        if loc == "t":
            return ("h", i, j)
        if loc == "b":
            return ("h", i + 1, j)
        if loc == "l":
            return ("v", i, j)
        return ("v", i, j + 1)

    succ = {}
    for i in range(h - 1):
        for j in range(w - 1):
            ins = (inside[i, j], inside[i, j + 1], inside[i + 1, j + 1], inside[i + 1, j])
            if all(ins) or not any(ins):
                continue
            center_in = (g[i, j] + g[i, j + 1] + g[i + 1, j] + g[i + 1, j + 1]) / 4.0 >= level
            for loc_in, loc_out in _cell_segments(tuple(int(x) for x in ins), center_in):
                succ[edge_local("", i, j, loc_in)] = edge_local("", i, j, loc_out)

    points = {k: _cross_point(k, g, level) for k in set(succ) | set(succ.values())}
    has_pred = set(succ.values())
    contours = []
    consumed = set()

    def trace(start):
        seq = [start]
        consumed.add(start)
        cur = start
        while cur in succ:
            nxt = succ[cur]
            if nxt == start:
                seq.append(nxt)  # closes the loop, duplicating the first point
                break
            if nxt in consumed:
                break
            seq.append(nxt)
            consumed.add(nxt)
            cur = nxt
        return np.array([points[e] for e in seq])

    # open contours first: their first crossing has no predecessor
    for k in sorted(succ.keys()):
        if k not in consumed and k not in has_pred:
            contours.append(trace(k))
    # remaining crossings belong to closed loops
    for k in sorted(succ.keys()):
        if k not in consumed:
            contours.append(trace(k))
    return contours


def contours_to_graph(contours) -> SkeletonGraph:
    """Each contour becomes one isolated path; closure means first == last point."""
    pos_parts = []
    degrees_parts = []
    paths = []
    offset = 0
    for cnt in contours:
        cnt = np.asarray(cnt, dtype=np.float64)
        if len(cnt) == 0:
            continue
        closed = len(cnt) > 1 and bool(np.array_equal(cnt[0], cnt[-1]))
        nodes = cnt[:-1] if closed else cnt
        n = len(nodes)
        pos_parts.append(nodes)
        idx = np.arange(offset, offset + n, dtype=np.int64)
        if closed:
            paths.append(np.concatenate([idx, idx[:1]]))
            deg = np.full(n, 2, dtype=np.int64)
        else:
            paths.append(idx)
            deg = np.full(n, 2, dtype=np.int64)
            if n >= 1:
                deg[0] = 1 if n > 1 else 0
                deg[-1] = 1 if n > 1 else 0
        degrees_parts.append(deg)
        offset += n
    if not paths:
        return empty_graph()
    path_index = np.concatenate(paths)
    path_delim = np.concatenate([[0], np.cumsum([len(p) for p in paths])]).astype(np.int64)
    return SkeletonGraph(np.vstack(pos_parts), np.concatenate(degrees_parts),
                         path_index, path_delim, np.array([0, len(paths)], dtype=np.int64))


def rebuild_graph(source: SkeletonGraph, new_paths) -> SkeletonGraph:
    """Flat-array graph from per-path node-id sequences into source.pos.

    Keeps only referenced nodes, remaps ids densely (ascending original id),
    and recomputes degrees from the new adjacency.  batch_delim carries over
    (the path count per member must be unchanged by the caller).
    """
    used = sorted({int(i) for p in new_paths for i in np.asarray(p).tolist()})
    remap = {old: new for new, old in enumerate(used)}
    pos = source.pos[used].copy()
    paths = [np.array([remap[int(i)] for i in p], dtype=np.int64) for p in new_paths]
    neighbors = [set() for _ in used]
    for p in paths:
        for u, v in zip(p[:-1], p[1:]):
            if u != v:
                neighbors[u].add(int(v))
                neighbors[v].add(int(u))
    degrees = np.array([len(s) for s in neighbors], dtype=np.int64)
    path_index = np.concatenate(paths) if paths else np.zeros(0, np.int64)
    path_delim = np.concatenate([[0], np.cumsum([len(p) for p in paths])]).astype(np.int64)
    return SkeletonGraph(pos, degrees, path_index, path_delim, source.batch_delim.copy())


def collapse_short_edges(graph: SkeletonGraph, min_len: float = 0.5) -> SkeletonGraph:
    """Drop interior path nodes closer than min_len to the last kept node.

    Optimization can leave sub-resolution edges next to junctions whose
    directions are pure noise; they poison corner detection, so they are
    collapsed before it runs.  Path endpoints are never dropped.
    """
    if min_len <= 0.0 or graph.n_nodes == 0:
        return graph
    new_paths = []
    for path in graph.paths():
        if len(path) <= 2:
            new_paths.append(np.asarray(path).copy())
            continue
        kept = [int(path[0])]
        for k in range(1, len(path) - 1):
            cand = int(path[k])
            if np.hypot(*(graph.pos[cand] - graph.pos[kept[-1]])) >= min_len:
                kept.append(cand)
        last = int(path[-1])
        # the node before a too-close endpoint goes instead of the endpoint
        if len(kept) > 1 and np.hypot(*(graph.pos[last] - graph.pos[kept[-1]])) < min_len:
            kept.pop()
        kept.append(last)
        new_paths.append(np.asarray(kept, dtype=np.int64))
    return rebuild_graph(graph, new_paths)


# ---------------------------------------------------------------------------
# batching

def batch_graphs(graphs) -> SkeletonGraph:
    """Concatenate graphs, shifting path_index by cumulative node counts."""
    if not graphs:
        return empty_graph()
    pos = [g.pos for g in graphs]
    degrees = [g.degrees for g in graphs]
    node_offsets = np.concatenate([[0], np.cumsum([len(p) for p in pos])])
    path_index = [g.path_index + node_offsets[i] for i, g in enumerate(graphs)]
    index_offsets = np.concatenate([[0], np.cumsum([len(x) for x in path_index])])
    path_delim = [np.asarray([0], dtype=np.int64)]
    batch_delim = [np.asarray([0], dtype=np.int64)]
    path_count = 0
    for i, g in enumerate(graphs):
        path_delim.append(g.path_delim[1:] + index_offsets[i])
        batch_delim.append(g.batch_delim[1:] + path_count)
        path_count += g.n_paths
    return SkeletonGraph(
        np.vstack(pos) if pos else np.zeros((0, 2)),
        np.concatenate(degrees) if degrees else np.zeros(0, int),
        np.concatenate(path_index) if path_index else np.zeros(0, int),
        np.concatenate(path_delim),
        np.concatenate(batch_delim))


def unbatch_graphs(graph: SkeletonGraph):
    """Inverse of batch_graphs for single-batch members.

    Node blocks are recovered from path_index, so the roundtrip is bit-exact
    whenever every node of each member appears in some path (true for all
    graphs built by this module).
    """
    out = []
    bd = graph.batch_delim
    node_lo = 0
    for b in range(len(bd) - 1):
        p_lo, p_hi = int(bd[b]), int(bd[b + 1])
        delim = graph.path_delim[p_lo:p_hi + 1]
        idx = graph.path_index[delim[0]:delim[-1]]
        node_hi = int(idx.max()) + 1 if len(idx) else node_lo
        out.append(SkeletonGraph(graph.pos[node_lo:node_hi].copy(),
                                 graph.degrees[node_lo:node_hi].copy(),
                                 idx - node_lo,
                                 delim - delim[0],
                                 np.array([0, p_hi - p_lo], dtype=np.int64)))
        node_lo = node_hi
    return out
