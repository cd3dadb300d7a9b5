"""GeoJSON serialization for scenes and extracted buildings.

Coordinates are written as [x, y] = [col, row] in pixel units.  Serialization
is byte-deterministic: sorted keys, compact separators, trailing newline.
"""
from __future__ import annotations

import json

import numpy as np

from .raster import Polygon, Scene


def _ring_to_coords(ring: np.ndarray) -> list:
    return [[float(c), float(r)] for r, c in np.asarray(ring, dtype=np.float64)]


def _coords_to_ring(coords) -> np.ndarray:
    return np.array([[y, x] for x, y in coords], dtype=np.float64)


def _polygon_geometry(outer, holes) -> dict:
    return {"type": "Polygon",
            "coordinates": [_ring_to_coords(outer)] + [_ring_to_coords(h) for h in holes]}


def dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def scene_to_geojson(scene: Scene) -> dict:
    features = [{"type": "Feature", "properties": {},
                 "geometry": _polygon_geometry(b.outer, b.holes)}
                for b in scene.buildings]
    return {"type": "FeatureCollection", "extent": list(scene.extent), "features": features}


def buildings_to_geojson(building_set) -> dict:
    features = [{"type": "Feature", "properties": {"score": float(p.score)},
                 "geometry": _polygon_geometry(p.outer, p.holes)}
                for p in building_set.polygons]
    return {"type": "FeatureCollection", "features": features}


def write_scene(path, scene: Scene) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(scene_to_geojson(scene)))


def write_buildings(path, building_set) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(buildings_to_geojson(building_set)))


def read_scene(path, extent=None) -> Scene:
    with open(path) as fh:
        doc = json.load(fh)
    if extent is None:
        if "extent" not in doc:
            raise ValueError(f"{path}: no extent stored and none supplied")
        extent = tuple(doc["extent"])
    buildings = []
    for feat in doc.get("features", []):
        rings = feat["geometry"]["coordinates"]
        buildings.append(Polygon(outer=_coords_to_ring(rings[0]),
                                 holes=[_coords_to_ring(r) for r in rings[1:]]))
    return Scene(extent=tuple(extent), buildings=buildings)


def read_buildings(path):
    from .polygonize import BuildingSet, ScoredPolygon

    with open(path) as fh:
        doc = json.load(fh)
    polys = []
    for feat in doc.get("features", []):
        rings = feat["geometry"]["coordinates"]
        polys.append(ScoredPolygon(outer=_coords_to_ring(rings[0]),
                                   holes=[_coords_to_ring(r) for r in rings[1:]],
                                   score=float(feat.get("properties", {}).get("score", 1.0))))
    return BuildingSet(polygons=polys)
