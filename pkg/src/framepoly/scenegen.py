"""Deterministic synthetic building scenes used as ground truth everywhere.

The generator is seeded by a splitmix-style 64-bit mixer whose update
constants are pinned below so any implementation can reproduce the exact
sequences: state += 0x9E3779B97F4A7C15, then two xor-shift-multiply rounds
with 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB, final xor-shift by 31.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import Polygon, Scene, signed_area, validate_scene

_MASK64 = (1 << 64) - 1

TEMPLATE_KINDS = ("axis_rect", "rotated_rect", "l_shape", "rect_with_hole", "adjoining_pair")


class PlacementError(RuntimeError):
    """Raised when a template cannot be placed without overlap."""


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # 53 mantissa bits give a float in [0, 1)
        return lo + (hi - lo) * ((self.next_u64() >> 11) / float(1 << 53))


@dataclass
class TemplateSpec:
    kind: str
    count: int = 1
    angle_deg: float | None = None  # rotated_rect only; None draws uniformly


@dataclass
class SceneSpec:
    extent: tuple = (128, 128)
    seed: int = 0
    templates: list = field(default_factory=lambda: [TemplateSpec("axis_rect", 3)])
    size_range: tuple = (10.0, 24.0)
    margin: float = 2.0

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        templates = [TemplateSpec(kind=t["kind"], count=int(t.get("count", 1)),
                                  angle_deg=t.get("angle_deg"))
                     for t in d.get("templates", [{"kind": "axis_rect", "count": 3}])]
        return SceneSpec(extent=tuple(d.get("extent", (128, 128))),
                         seed=int(d.get("seed", 0)),
                         templates=templates,
                         size_range=tuple(d.get("size_range", (10.0, 24.0))),
                         margin=float(d.get("margin", 2.0)))

    def to_dict(self) -> dict:
        return {
            "extent": list(self.extent),
            "seed": self.seed,
            "templates": [{"kind": t.kind, "count": t.count,
                           **({"angle_deg": t.angle_deg} if t.angle_deg is not None else {})}
                          for t in self.templates],
            "size_range": list(self.size_range),
            "margin": self.margin,
        }


def _close(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=np.float64)
    return np.vstack([arr, arr[:1]])


def _orient(ring: np.ndarray, positive: bool) -> np.ndarray:
    if (signed_area(ring) > 0) != positive:
        return ring[::-1].copy()
    return ring


def _ring_from_xy(pts_xy, positive=True) -> np.ndarray:
    # template math is done in (x, y); storage is (row, col) = (y, x)
    ring = _close([(y, x) for x, y in pts_xy])
    return _orient(ring, positive)


def _snap(*vals):
    # axis-aligned walls sit on integer coordinates so the binary raster
    # carries their exact position (the 0.5-isoline lands on the wall)
    return tuple(float(round(v)) for v in vals)


def _axis_rect(r0, c0, hgt, wid):
    r0, c0, hgt, wid = _snap(r0, c0, max(hgt, 4), max(wid, 4))
    return [_close([(r0, c0), (r0, c0 + wid), (r0 + hgt, c0 + wid), (r0 + hgt, c0)])]


def _rotated_rect(cr, cc, half_h, half_w, angle_rad):
    ca, sa = np.cos(angle_rad), np.sin(angle_rad)
    pts = []
    for px, py in ((-half_w, -half_h), (half_w, -half_h), (half_w, half_h), (-half_w, half_h)):
        x = cc + ca * px - sa * py
        y = cr + sa * px + ca * py
        pts.append((x, y))
    return [_ring_from_xy(pts, positive=True)]


def _l_shape(r0, c0, hgt, wid):
    r0, c0, hgt, wid = _snap(r0, c0, max(hgt, 6), max(wid, 6))
    r1 = r0 + hgt
    c1 = c0 + wid
    rm, cm = _snap(r0 + 0.5 * hgt, c0 + 0.5 * wid)
    ring = _close([(r0, c0), (r0, cm), (rm, cm), (rm, c1), (r1, c1), (r1, c0)])
    return [_orient(ring, True)]


def _rect_with_hole(r0, c0, hgt, wid):
    r0, c0, hgt, wid = _snap(r0, c0, max(hgt, 10), max(wid, 10))
    outer = _axis_rect(r0, c0, hgt, wid)[0]
    hr0, hr1 = _snap(r0 + 0.3 * hgt, r0 + 0.7 * hgt)
    hc0, hc1 = _snap(c0 + 0.3 * wid, c0 + 0.7 * wid)
    hole = _orient(_close([(hr0, hc0), (hr0, hc1), (hr1, hc1), (hr1, hc0)]), False)
    return [outer, hole]


def _adjoining_pair(r0, c0, hgt, wid_a, wid_b):
    # shared wall endpoints are the same float values in both rings
    r0, c0, hgt, wid_a, wid_b = _snap(r0, c0, max(hgt, 6), max(wid_a, 5), max(wid_b, 5))
    cm = c0 + wid_a
    left = _orient(_close([(r0, c0), (r0, cm), (r0 + hgt, cm), (r0 + hgt, c0)]), True)
    right = _orient(_close([(r0, cm), (r0, cm + wid_b), (r0 + hgt, cm + wid_b), (r0 + hgt, cm)]), True)
    return [[left], [right]]


def _bbox(rings):
    pts = np.vstack(rings)
    return pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max()


def generate(spec: SceneSpec) -> Scene:
    """Place the requested templates without overlap; deterministic per seed."""
    rng = SplitMix64(spec.seed)
    h, w = spec.extent
    m = spec.margin
    placed_boxes = []
    buildings = []

    def fits(rings) -> bool:
        r_lo, r_hi, c_lo, c_hi = _bbox(rings)
        if r_lo < m or c_lo < m or r_hi > h - m or c_hi > w - m:
            return False
        for (a, b, c, d) in placed_boxes:
            # inflated bbox separation keeps distinct buildings >= 2 px apart
            if not (r_hi + 2.0 <= a or b + 2.0 <= r_lo or c_hi + 2.0 <= c or d + 2.0 <= c_lo):
                return False
        return True

    for tmpl in spec.templates:
        if tmpl.kind not in TEMPLATE_KINDS:
            raise ValueError(f"unknown template kind {tmpl.kind!r}")
        for _ in range(tmpl.count):
            ok = False
            for _try in range(200):
                size_a = rng.uniform(*spec.size_range)
                size_b = rng.uniform(*spec.size_range)
                r0 = rng.uniform(m, max(m + 1.0, h - m - size_a))
                c0 = rng.uniform(m, max(m + 1.0, w - m - size_b))
                if tmpl.kind == "axis_rect":
                    polys = [_axis_rect(r0, c0, size_a, size_b)]
                elif tmpl.kind == "rotated_rect":
                    ang = (np.deg2rad(tmpl.angle_deg) if tmpl.angle_deg is not None
                           else rng.uniform(0.0, np.pi / 2))
                    polys = [_rotated_rect(r0 + size_a / 2, c0 + size_b / 2,
                                           size_a / 2, size_b / 2, ang)]
                elif tmpl.kind == "l_shape":
                    polys = [_l_shape(r0, c0, size_a, size_b)]
                elif tmpl.kind == "rect_with_hole":
                    polys = [_rect_with_hole(r0, c0, size_a, size_b)]
                else:  # adjoining_pair
                    wid_b = rng.uniform(*spec.size_range)
                    polys = _adjoining_pair(r0, c0, size_a, size_b, wid_b)
                all_rings = [ring for rings in polys for ring in rings]
                if fits(all_rings):
                    placed_boxes.append(_bbox(all_rings))
                    for rings in polys:
                        buildings.append(Polygon(outer=rings[0], holes=list(rings[1:])))
                    ok = True
                    break
            if not ok:
                raise PlacementError(f"could not place template {tmpl.kind!r} "
                                     f"in extent {spec.extent} after 200 tries")

    scene = Scene(extent=tuple(spec.extent), buildings=buildings)
    validate_scene(scene)
    return scene
