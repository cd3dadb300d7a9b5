"""Grid container, vector scenes, polygon rasterization, sampling and gradients.

Conventions used everywhere in this package:
  * points are (row, col) float pairs
  * pixel (r, c) has its center at the continuous coordinate (r + 0.5, c + 0.5)
  * ring signed area uses x = col, y = row; outer rings are positive,
    interior (hole) rings negative
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FFPR_MAGIC = b"FFPR"


class FfprFormatError(ValueError):
    """Raised for malformed FFPR headers or truncated payloads."""


@dataclass
class RasterGrid:
    """H x W x C float32 grid, row-major, channel-last."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"RasterGrid expects HxWxC data, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel(self, i: int) -> np.ndarray:
        return self.data[:, :, i]


@dataclass
class TangentField:
    """Per-pixel tangent angle in [0, pi) plus a validity mask.

    valid is 1 only where the covering edge direction is unambiguous (a pixel
    covered by two non-parallel segments, e.g. at a polygon corner, gets 0).
    Where it is 0 but the pixel is covered, theta2 holds the second distinct
    direction so corner pixels still know both incident walls.
    """

    theta: RasterGrid
    valid: RasterGrid
    theta2: RasterGrid = None
    conflict: RasterGrid = None


@dataclass
class Polygon:
    """Closed outer ring plus optional closed hole rings, (row, col) coords."""

    outer: np.ndarray
    holes: list = field(default_factory=list)

    def rings(self):
        return [self.outer] + list(self.holes)


@dataclass
class Scene:
    """Vector ground truth: building polygons in pixel units plus the extent."""

    extent: tuple
    buildings: list = field(default_factory=list)


def signed_area(ring: np.ndarray) -> float:
    """Shoelace area with x = col, y = row; ring closed (first == last)."""
    r = np.asarray(ring, dtype=float)
    x = r[:, 1]
    y = r[:, 0]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def _segments_of_ring(ring):
    r = np.asarray(ring, dtype=float)
    return r[:-1], r[1:]


def scene_segments(scene: Scene) -> np.ndarray:
    """All ring segments of a scene as an (M, 2, 2) array of (row, col) endpoints."""
    a_list, b_list = [], []
    for b in scene.buildings:
        for ring in b.rings():
            a, bb = _segments_of_ring(ring)
            a_list.append(a)
            b_list.append(bb)
    if not a_list:
        return np.zeros((0, 2, 2))
    return np.stack([np.vstack(a_list), np.vstack(b_list)], axis=1)


def validate_scene(scene: Scene) -> None:
    """Check ring closure and orientation invariants; raises ValueError."""
    for bi, b in enumerate(scene.buildings):
        for ri, ring in enumerate(b.rings()):
            ring = np.asarray(ring, dtype=float)
            if ring.shape[0] < 4:
                raise ValueError(f"building {bi} ring {ri}: fewer than 3 distinct vertices")
            if not np.array_equal(ring[0], ring[-1]):
                raise ValueError(f"building {bi} ring {ri}: ring not closed")
            area = signed_area(ring)
            if ri == 0 and area <= 0:
                raise ValueError(f"building {bi}: outer ring area {area} not positive")
            if ri > 0 and area >= 0:
                raise ValueError(f"building {bi} hole {ri - 1}: area {area} not negative")


# ---------------------------------------------------------------------------
# rasterization

def _fill_rows_even_odd(rings, height, width, out):
    """Scanline even-odd fill of pixel centers into boolean array `out` (|=)."""
    edges_a, edges_b = [], []
    for ring in rings:
        a, b = _segments_of_ring(ring)
        edges_a.append(a)
        edges_b.append(b)
    if not edges_a:
        return
    A = np.vstack(edges_a)
    B = np.vstack(edges_b)
    y0, x0 = A[:, 0], A[:, 1]
    y1, x1 = B[:, 0], B[:, 1]
    ymin = max(0, int(np.floor(min(y0.min(), y1.min()) - 0.5)))
    ymax = min(height - 1, int(np.ceil(max(y0.max(), y1.max()))))
    for r in range(ymin, ymax + 1):
        yc = r + 0.5
        # half-open rule so a scanline through a vertex is counted once
        hit = ((y0 <= yc) & (yc < y1)) | ((y1 <= yc) & (yc < y0))
        if not hit.any():
            continue
        t = (yc - y0[hit]) / (y1[hit] - y0[hit])
        xs = np.sort(x0[hit] + t * (x1[hit] - x0[hit]))
        for k in range(0, len(xs) - 1, 2):
            a, b = xs[k], xs[k + 1]
            c_lo = int(np.floor(a - 0.5)) + 1
            c_hi = int(np.ceil(b - 0.5)) - 1
            if c_hi >= 0 and c_lo <= width - 1:
                out[r, max(c_lo, 0):min(c_hi, width - 1) + 1] = True


def rasterize_interior(scene: Scene) -> RasterGrid:
    """1 where the pixel center lies strictly inside a building (even-odd fill)."""
    h, w = scene.extent
    out = np.zeros((h, w), dtype=bool)
    for b in scene.buildings:
        _fill_rows_even_odd(b.rings(), h, w, out)
    return RasterGrid(out.astype(np.float32))


def rasterize_ring_interior(ring: np.ndarray, extent) -> RasterGrid:
    """Even-odd fill of a single closed ring (orientation ignored)."""
    h, w = extent
    out = np.zeros((h, w), dtype=bool)
    _fill_rows_even_odd([ring], h, w, out)
    return RasterGrid(out.astype(np.float32))


def _segment_cover(seg_a, seg_b, half_width, height, width):
    """Pixel (rows, cols, dist) whose centers lie within half_width of the segment."""
    r0, c0 = seg_a
    r1, c1 = seg_b
    lo_r = max(0, int(np.floor(min(r0, r1) - half_width - 0.5)))
    hi_r = min(height - 1, int(np.ceil(max(r0, r1) + half_width)))
    lo_c = max(0, int(np.floor(min(c0, c1) - half_width - 0.5)))
    hi_c = min(width - 1, int(np.ceil(max(c0, c1) + half_width)))
    if lo_r > hi_r or lo_c > hi_c:
        return None
    rr, cc = np.meshgrid(np.arange(lo_r, hi_r + 1), np.arange(lo_c, hi_c + 1), indexing="ij")
    py = rr + 0.5
    px = cc + 0.5
    dy = r1 - r0
    dx = c1 - c0
    den = dy * dy + dx * dx
    if den == 0.0:
        dist = np.hypot(py - r0, px - c0)
    else:
        t = np.clip(((py - r0) * dy + (px - c0) * dx) / den, 0.0, 1.0)
        dist = np.hypot(py - (r0 + t * dy), px - (c0 + t * dx))
    m = dist < half_width
    if not m.any():
        return None
    return rr[m], cc[m], dist[m]


def rasterize_edges(scene: Scene, width_px: float = 2.0) -> RasterGrid:
    """1 where the pixel center is within width_px/2 of any ring segment."""
    if width_px <= 0:
        raise ValueError("width_px must be positive")
    h, w = scene.extent
    out = np.zeros((h, w), dtype=bool)
    segs = scene_segments(scene)
    for a, b in segs:
        cov = _segment_cover(a, b, width_px / 2.0, h, w)
        if cov is not None:
            out[cov[0], cov[1]] = True
    return RasterGrid(out.astype(np.float32))


def rasterize_tangent_angle(scene: Scene, width_px: float = 2.0,
                            parallel_eps: float = 1e-6) -> TangentField:
    """Per edge-covered pixel: unsigned tangent angle of the nearest segment.

    Pixels covered by two segments whose folded angles differ by more than
    parallel_eps (corner neighborhoods) are marked invalid.
    """
    if width_px <= 0:
        raise ValueError("width_px must be positive")
    h, w = scene.extent
    theta = np.zeros((h, w), dtype=np.float64)
    theta2 = np.zeros((h, w), dtype=np.float64)
    best = np.full((h, w), np.inf)
    best2 = np.full((h, w), np.inf)
    covered = np.zeros((h, w), dtype=bool)
    conflict = np.zeros((h, w), dtype=bool)

    for a, b in scene_segments(scene):
        dy = b[0] - a[0]
        dx = b[1] - a[1]
        if dy == 0.0 and dx == 0.0:
            continue
        ang = float(np.mod(np.arctan2(dy, dx), np.pi)) % np.pi
        cov = _segment_cover(a, b, width_px / 2.0, h, w)
        if cov is None:
            continue
        rr, cc, dist = cov
        diff = np.abs(theta[rr, cc] - ang)
        diff = np.minimum(diff, np.pi - diff)
        clash = covered[rr, cc] & (diff > parallel_eps)
        conflict[rr[clash], cc[clash]] = True
        closer = ~covered[rr, cc] | (dist < best[rr, cc])
        # a clashing nearer segment demotes the old nearest to second place
        demote = clash & closer
        theta2[rr[demote], cc[demote]] = theta[rr[demote], cc[demote]]
        best2[rr[demote], cc[demote]] = best[rr[demote], cc[demote]]
        second = clash & ~closer & (dist < best2[rr, cc])
        theta2[rr[second], cc[second]] = ang
        best2[rr[second], cc[second]] = dist[second]
        theta[rr[closer], cc[closer]] = ang
        best[rr[closer], cc[closer]] = dist[closer]
        covered[rr, cc] = True

    valid = covered & ~conflict
    theta = np.where(covered, theta, 0.0)
    theta2 = np.where(conflict & np.isfinite(best2), theta2, 0.0)
    return TangentField(theta=RasterGrid(theta.astype(np.float32)),
                        valid=RasterGrid(valid.astype(np.float32)),
                        theta2=RasterGrid(theta2.astype(np.float32)),
                        conflict=RasterGrid((conflict & np.isfinite(best2)).astype(np.float32)))


# ---------------------------------------------------------------------------
# sampling and gradients

def bilinear_sample(grid: RasterGrid, p):
    """Clamped bilinear sample at continuous (row, col) points.

    Accepts a single point (2,) or a batch (N, 2).  Returns (values, grad)
    where values has shape (..., C) and grad (..., C, 2) holds the analytic
    derivative w.r.t. (row, col); the derivative is zero in the clamped
    region outside the grid.
    """
    g = grid.data.astype(np.float64)
    h, w, c = g.shape
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    u = pts[:, 0] - 0.5
    v = pts[:, 1] - 0.5
    i0 = np.clip(np.floor(u).astype(np.int64), 0, max(h - 2, 0))
    j0 = np.clip(np.floor(v).astype(np.int64), 0, max(w - 2, 0))
    fr = np.clip(u - i0, 0.0, 1.0)
    fc = np.clip(v - j0, 0.0, 1.0)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)

    g00 = g[i0, j0]
    g01 = g[i0, j1]
    g10 = g[i1, j0]
    g11 = g[i1, j1]
    wr = fr[:, None]
    wc = fc[:, None]
    vals = (g00 * (1 - wr) * (1 - wc) + g01 * (1 - wr) * wc
            + g10 * wr * (1 - wc) + g11 * wr * wc)

    d_dr = (g10 - g00) * (1 - wc) + (g11 - g01) * wc
    d_dc = (g01 - g00) * (1 - wr) + (g11 - g10) * wr
    in_r = ((u >= 0.0) & (u <= h - 1))[:, None]
    in_c = ((v >= 0.0) & (v <= w - 1))[:, None]
    grad = np.stack([np.where(in_r, d_dr, 0.0), np.where(in_c, d_dc, 0.0)], axis=-1)

    if np.asarray(p).ndim == 1:
        return vals[0], grad[0]
    return vals, grad


def _grad1(arr: np.ndarray):
    """Central differences inside, one-sided at borders, along both axes."""
    a = np.asarray(arr, dtype=np.float64)
    gr = np.empty_like(a)
    gc = np.empty_like(a)
    if a.shape[0] == 1:
        gr[:] = 0.0
    else:
        gr[1:-1] = 0.5 * (a[2:] - a[:-2])
        gr[0] = a[1] - a[0]
        gr[-1] = a[-1] - a[-2]
    if a.shape[1] == 1:
        gc[:] = 0.0
    else:
        gc[:, 1:-1] = 0.5 * (a[:, 2:] - a[:, :-2])
        gc[:, 0] = a[:, 1] - a[:, 0]
        gc[:, -1] = a[:, -1] - a[:, -2]
    return gr, gc


def _grad1_adjoint(wr: np.ndarray, wc: np.ndarray):
    """Adjoint of _grad1: maps cotangents (wr, wc) back to the input grid."""
    out = np.zeros_like(np.asarray(wr, dtype=np.float64))
    if out.shape[0] > 1:
        out[2:] += 0.5 * wr[1:-1]
        out[:-2] -= 0.5 * wr[1:-1]
        out[1] += wr[0]
        out[0] -= wr[0]
        out[-1] += wr[-1]
        out[-2] -= wr[-1]
    if out.shape[1] > 1:
        out[:, 2:] += 0.5 * wc[:, 1:-1]
        out[:, :-2] -= 0.5 * wc[:, 1:-1]
        out[:, 1] += wc[:, 0]
        out[:, 0] -= wc[:, 0]
        out[:, -1] += wc[:, -1]
        out[:, -2] -= wc[:, -1]
    return out


def spatial_gradient(grid: RasterGrid) -> RasterGrid:
    """d/drow and d/dcol of a 1-channel grid as a 2-channel grid."""
    if grid.channels != 1:
        raise ValueError("spatial_gradient expects a 1-channel grid")
    gr, gc = _grad1(grid.data[:, :, 0])
    return RasterGrid(np.stack([gr, gc], axis=-1).astype(np.float32))


# ---------------------------------------------------------------------------
# FFPR container I/O

def write_ffpr(path, grid: RasterGrid) -> None:
    """magic 'FFPR', u32-LE h/w/c, then float32-LE values row-major channel-last."""
    with open(path, "wb") as fh:
        fh.write(FFPR_MAGIC)
        fh.write(struct.pack("<III", grid.height, grid.width, grid.channels))
        fh.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())


def read_ffpr(path) -> RasterGrid:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FFPR_MAGIC:
            raise FfprFormatError(f"bad magic {magic!r}, expected {FFPR_MAGIC!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise FfprFormatError("truncated header")
        h, w, c = struct.unpack("<III", header)
        payload = fh.read()
    expected = h * w * c * 4
    if len(payload) != expected:
        raise FfprFormatError(f"payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return RasterGrid(arr.copy())
