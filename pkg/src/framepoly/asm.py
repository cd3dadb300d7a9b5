"""Active Skeleton Model: energies over a skeleton graph and RMSprop descent.

Node positions are the only variables.  Junction nodes are single rows of
pos shared by every path through them, so gradient contributions from all
those paths scatter-sum into one row and shared walls move coherently.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .field_synthesis import FrameFieldGrid
from .raster import RasterGrid, bilinear_sample
from .skeletonize import SkeletonGraph

log = logging.getLogger(__name__)

RMS_EPS = 1e-8


@dataclass
class EnergyConfig:
    level: float = 0.5
    lambda_probability: float = 1.0
    lambda_frame_align: float = 1.0
    lambda_length: float = 0.1
    iterations: int = 300
    init_lr: float = 0.1
    rms_gamma: float = 0.9
    lr_decay: float = 0.99


def _path_edge_pairs(graph: SkeletonGraph):
    """Index pairs (a, b) of consecutive nodes within each path.

    Pairs straddling a path boundary ("hallucinated" edges between
    concatenated paths) are excluded.
    """
    idx = graph.path_index
    if len(idx) < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    keep = np.ones(len(idx) - 1, dtype=bool)
    keep[graph.path_delim[1:-1] - 1] = False
    a = idx[:-1][keep]
    b = idx[1:][keep]
    return a, b


def e_probability(graph: SkeletonGraph, y_int: RasterGrid, level: float):
    """Sum over nodes of (y_int(p) - level)^2 with bilinear sampling."""
    if graph.n_nodes == 0:
        return 0.0, np.zeros((0, 2))
    vals, grads = bilinear_sample(y_int, graph.pos)
    diff = vals[:, 0] - level
    energy = float(np.sum(diff * diff))
    grad = 2.0 * diff[:, None] * grads[:, 0, :]
    return energy, grad


def e_frame_align(graph: SkeletonGraph, fieldgrid: FrameFieldGrid):
    """Sum over path edges of |f(edge_dir; c(edge_center))|^2.

    The gradient reaches both endpoints through the normalized direction and
    through the bilinearly sampled coefficients at the edge center.
    Zero-length edges contribute nothing.
    """
    grad = np.zeros_like(graph.pos)
    a, b = _path_edge_pairs(graph)
    if len(a) == 0:
        return 0.0, grad
    p0 = graph.pos[a]
    p1 = graph.pos[b]
    d = p1 - p0
    length = np.hypot(d[:, 0], d[:, 1])
    ok = length > 0.0
    n_skipped = int(np.sum(~ok))
    if n_skipped:
        log.debug("e_frame_align: skipped %d zero-length edges", n_skipped)
    if not ok.any():
        return 0.0, grad
    a, b, p0, p1, d, length = a[ok], b[ok], p0[ok], p1[ok], d[ok], length[ok]
    center = 0.5 * (p0 + p1)
    vals, gmaps = bilinear_sample(fieldgrid.coeffs, center)
    c0 = vals[:, 0] + 1j * vals[:, 1]
    c2 = vals[:, 2] + 1j * vals[:, 3]
    z = (d[:, 1] + 1j * d[:, 0]) / length
    z2 = z * z
    f = z2 * z2 + c2 * z2 + c0
    energy = float(np.sum(f.real ** 2 + f.imag ** 2))

    # channel route: dE/dch at the sample point, then through the bilinear map
    g0 = 2.0 * f
    g2 = 2.0 * f * np.conj(z2)
    dch = np.stack([g0.real, g0.imag, g2.real, g2.imag], axis=-1)
    dcenter = np.einsum("ec,ecx->ex", dch, gmaps)

    # direction route: z = (dc + i dr) / L
    fprime = 4.0 * z2 * z + 2.0 * c2 * z
    fbar_fp = np.conj(f) * fprime
    de_dx = 2.0 * fbar_fp.real
    de_dy = -2.0 * fbar_fp.imag
    dr = d[:, 0]
    dc = d[:, 1]
    l3 = length ** 3
    de_ddr = de_dx * (-dc * dr / l3) + de_dy * (dc * dc / l3)
    de_ddc = de_dx * (dr * dr / l3) + de_dy * (-dr * dc / l3)
    ddir = np.stack([de_ddr, de_ddc], axis=-1)

    np.add.at(grad, a, 0.5 * dcenter - ddir)
    np.add.at(grad, b, 0.5 * dcenter + ddir)
    return energy, grad


def e_length(graph: SkeletonGraph):
    """Sum of squared edge lengths; keeps node spacing homogeneous and tight."""
    grad = np.zeros_like(graph.pos)
    a, b = _path_edge_pairs(graph)
    if len(a) == 0:
        return 0.0, grad
    d = graph.pos[b] - graph.pos[a]
    energy = float(np.sum(d * d))
    np.add.at(grad, a, -2.0 * d)
    np.add.at(grad, b, 2.0 * d)
    return energy, grad


def optimize(graph: SkeletonGraph, y_int: RasterGrid, fieldgrid: FrameFieldGrid,
             cfg: EnergyConfig, trace: list | None = None) -> SkeletonGraph:
    """RMSprop descent on node positions; returns a graph with updated pos.

    s <- gamma*s + (1-gamma)*g^2; pos <- pos - lr*g/sqrt(s+eps); lr decays
    by lr_decay per iteration.  Positions are clamped to the grid extent.
    Deterministic given inputs.
    """
    if graph.n_nodes == 0:
        raise ValueError("optimize needs a nonempty graph")
    work = replace(graph, pos=graph.pos.copy())
    h, w = y_int.height, y_int.width
    s = np.zeros_like(work.pos)
    lr = cfg.init_lr
    for it in range(cfg.iterations):
        ep, gp = e_probability(work, y_int, cfg.level)
        ef, gf = e_frame_align(work, fieldgrid)
        el, gl = e_length(work)
        total = (cfg.lambda_probability * ep + cfg.lambda_frame_align * ef
                 + cfg.lambda_length * el)
        if not np.isfinite(total):
            raise FloatingPointError(f"ASM energy non-finite at iteration {it}")
        if trace is not None:
            trace.append((it, ep, ef, el, total))
        g = (cfg.lambda_probability * gp + cfg.lambda_frame_align * gf
             + cfg.lambda_length * gl)
        s = cfg.rms_gamma * s + (1.0 - cfg.rms_gamma) * g * g
        work.pos -= lr * g / np.sqrt(s + RMS_EPS)
        lr *= cfg.lr_decay
        np.clip(work.pos[:, 0], 0.0, float(h), out=work.pos[:, 0])
        np.clip(work.pos[:, 1], 0.0, float(w), out=work.pos[:, 1])
    return work
