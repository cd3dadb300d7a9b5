"""The eight training losses with analytic gradients, loss normalization, and
a variational synthesizer that fits a smooth frame field to a vector scene.

The synthesizer plays the role of the learned frame-field head at desk scale:
it descends the (normalized, weighted) field losses over the four coefficient
channels while the rasterized scene stays fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .raster import (RasterGrid, Scene, TangentField, _grad1, _grad1_adjoint,
                     rasterize_edges, rasterize_interior, rasterize_tangent_angle)

LOSS_NAMES = ("int", "edge", "align", "align90", "smooth",
              "int_align", "edge_align", "int_edge")

BCE_EPS = 1e-7
NORMALIZER_FLOOR = 1e-8
COEFF_CLAMP = 4.0


@dataclass
class LossConfig:
    alpha: float = 0.25
    lambda_int: float = 10.0
    lambda_edge: float = 10.0
    lambda_align: float = 1.0
    lambda_align90: float = 0.2
    lambda_smooth: float = 0.005
    lambda_int_align: float = 0.2
    lambda_edge_align: float = 0.2
    lambda_int_edge: float = 0.2
    normalizers: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_NAMES})

    def weight(self, name: str) -> float:
        return getattr(self, "lambda_" + name)


@dataclass
class FrameFieldGrid:
    """Coefficient field: channels are Re c0, Im c0, Re c2, Im c2."""

    coeffs: RasterGrid

    def __post_init__(self):
        if self.coeffs.channels != 4:
            raise ValueError("frame field needs 4 channels")

    @property
    def height(self):
        return self.coeffs.height

    @property
    def width(self):
        return self.coeffs.width

    def c0(self) -> np.ndarray:
        d = self.coeffs.data.astype(np.float64)
        return d[:, :, 0] + 1j * d[:, :, 1]

    def c2(self) -> np.ndarray:
        d = self.coeffs.data.astype(np.float64)
        return d[:, :, 2] + 1j * d[:, :, 3]

    @staticmethod
    def from_complex(c0: np.ndarray, c2: np.ndarray) -> "FrameFieldGrid":
        stack = np.stack([c0.real, c0.imag, c2.real, c2.imag], axis=-1)
        return FrameFieldGrid(RasterGrid(stack.astype(np.float32)))


@dataclass
class LossTerm:
    value: float
    grads: dict


def _check_same_shape(a: RasterGrid, b: RasterGrid):
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def seg_loss(y: RasterGrid, yhat: RasterGrid, alpha: float) -> LossTerm:
    """alpha * BCE + (1 - alpha) * smoothed Dice, with analytic d/dyhat.

    Dice here is 1 - 2*(sum(y*yhat)+1)/(sum(y+yhat)+1); on an all-zero pair
    the literal value is -1, the only loss allowed to go negative.
    """
    _check_same_shape(y, yhat)
    yt = y.data.astype(np.float64)
    yp = yhat.data.astype(np.float64)
    hw = float(yt.shape[0] * yt.shape[1])

    ypc = np.clip(yp, BCE_EPS, 1.0 - BCE_EPS)
    bce = -float(np.sum(yt * np.log(ypc) + (1.0 - yt) * np.log1p(-ypc))) / hw
    inside = (yp > BCE_EPS) & (yp < 1.0 - BCE_EPS)
    dbce = np.where(inside, -(yt / ypc - (1.0 - yt) / (1.0 - ypc)) / hw, 0.0)

    s = float(np.sum(yt * yp))
    t = float(np.sum(yt + yp))
    dice = 1.0 - 2.0 * (s + 1.0) / (t + 1.0)
    ddice = -2.0 * (yt * (t + 1.0) - (s + 1.0)) / (t + 1.0) ** 2

    value = alpha * bce + (1.0 - alpha) * dice
    grad = alpha * dbce + (1.0 - alpha) * ddice
    return LossTerm(value=value, grads={"yhat": grad})


def _poly(z, c0, c2):
    z2 = z * z
    return z2 * z2 + c2 * z2 + c0


def _align_core(c0, c2, z, weights, hw):
    """Weighted sum of |f(z)|^2 / hw plus complex gradients on flat arrays."""
    z2 = z * z
    f = z2 * z2 + c2 * z2 + c0
    value = float(np.sum(weights * (f.real ** 2 + f.imag ** 2))) / hw
    scale = weights / hw
    g0 = 2.0 * scale * f
    g2 = 2.0 * scale * f * np.conj(z2)
    return value, g0, g2


def _scatter_field_grad(shape, flat_idx, g0, g2):
    out = np.zeros(shape + (4,), dtype=np.float64)
    flat = out.reshape(-1, 4)
    np.add.at(flat, flat_idx, np.stack([g0.real, g0.imag, g2.real, g2.imag], axis=-1))
    return out


def _masked_align(fieldgrid: FrameFieldGrid, theta, weights_grid, shift: float) -> LossTerm:
    h, w = fieldgrid.height, fieldgrid.width
    hw = float(h * w)
    weights = np.asarray(weights_grid, dtype=np.float64)
    idx = np.flatnonzero(weights > 0.0)
    if idx.size == 0:
        return LossTerm(0.0, {"field": np.zeros((h, w, 4))})
    th = np.asarray(theta, dtype=np.float64).reshape(-1)[idx] + shift
    z = np.exp(1j * th)
    c0 = fieldgrid.c0().reshape(-1)[idx]
    c2 = fieldgrid.c2().reshape(-1)[idx]
    value, g0, g2 = _align_core(c0, c2, z, weights.reshape(-1)[idx], hw)
    return LossTerm(value, {"field": _scatter_field_grad((h, w), idx, g0, g2)})


def loss_align(fieldgrid: FrameFieldGrid, tf: TangentField, edge_mask: RasterGrid) -> LossTerm:
    """Mean of edge_mask * |f(e^{i theta})|^2 over valid tangent pixels."""
    weights = edge_mask.data[:, :, 0].astype(np.float64) * tf.valid.data[:, :, 0].astype(np.float64)
    return _masked_align(fieldgrid, tf.theta.data[:, :, 0], weights, 0.0)


def loss_align90(fieldgrid: FrameFieldGrid, tf: TangentField, edge_mask: RasterGrid) -> LossTerm:
    """As loss_align but against the perpendicular tangent (theta - pi/2)."""
    weights = edge_mask.data[:, :, 0].astype(np.float64) * tf.valid.data[:, :, 0].astype(np.float64)
    return _masked_align(fieldgrid, tf.theta.data[:, :, 0], weights, -np.pi / 2.0)


def loss_smooth(fieldgrid: FrameFieldGrid) -> LossTerm:
    """Dirichlet energy of the four coefficient channels."""
    d = fieldgrid.coeffs.data.astype(np.float64)
    h, w, _ = d.shape
    hw = float(h * w)
    value = 0.0
    grad = np.zeros_like(d)
    for ch in range(4):
        gr, gc = _grad1(d[:, :, ch])
        value += float(np.sum(gr * gr + gc * gc))
        grad[:, :, ch] = _grad1_adjoint(2.0 * gr, 2.0 * gc)
    return LossTerm(value / hw, {"field": grad / hw})


def _grad_as_complex(yhat: RasterGrid):
    gr, gc = _grad1(yhat.data[:, :, 0])
    return gr, gc, gc + 1j * gr


def _grad_align(fieldgrid: FrameFieldGrid, yhat: RasterGrid) -> LossTerm:
    """Mean |f(grad as complex)|^2; gradients w.r.t. field and the map."""
    h, w = fieldgrid.height, fieldgrid.width
    hw = float(h * w)
    gr, gc, z = _grad_as_complex(yhat)
    c0 = fieldgrid.c0()
    c2 = fieldgrid.c2()
    z2 = z * z
    f = z2 * z2 + c2 * z2 + c0
    value = float(np.sum(f.real ** 2 + f.imag ** 2)) / hw
    g0 = 2.0 * f / hw
    g2 = 2.0 * f * np.conj(z2) / hw
    dfield = np.stack([g0.real, g0.imag, g2.real, g2.imag], axis=-1)
    fprime = 4.0 * z2 * z + 2.0 * c2 * z
    fbar_fp = np.conj(f) * fprime
    d_gc = 2.0 * fbar_fp.real / hw
    d_gr = -2.0 * fbar_fp.imag / hw
    dyhat = _grad1_adjoint(d_gr, d_gc)[:, :, None]
    return LossTerm(value, {"field": dfield, "yhat": dyhat})


def loss_int_align(fieldgrid: FrameFieldGrid, yhat_int: RasterGrid) -> LossTerm:
    return _grad_align(fieldgrid, yhat_int)


def loss_edge_align(fieldgrid: FrameFieldGrid, yhat_edge: RasterGrid) -> LossTerm:
    return _grad_align(fieldgrid, yhat_edge)


def loss_int_edge(yhat_int: RasterGrid, yhat_edge: RasterGrid) -> LossTerm:
    """max(1 - int, |grad int|) * | |grad int| - edge |, averaged over pixels."""
    _check_same_shape(yhat_int, yhat_edge)
    p = yhat_int.data[:, :, 0].astype(np.float64)
    e = yhat_edge.data[:, :, 0].astype(np.float64)
    hw = float(p.size)
    gr, gc = _grad1(p)
    n = np.hypot(gr, gc)
    weight = np.maximum(1.0 - p, n)
    diff = n - e
    value = float(np.sum(weight * np.abs(diff))) / hw

    sgn = np.sign(diff)
    d_e = -(weight * sgn) / hw
    d_weight = np.abs(diff) / hw
    d_p_direct = np.where(1.0 - p > n, -d_weight, 0.0)
    d_n = np.where(n > 1.0 - p, d_weight, 0.0) + weight * sgn / hw
    safe_n = np.where(n > 0.0, n, 1.0)
    d_gr = np.where(n > 0.0, d_n * gr / safe_n, 0.0)
    d_gc = np.where(n > 0.0, d_n * gc / safe_n, 0.0)
    d_p = d_p_direct + _grad1_adjoint(d_gr, d_gc)
    return LossTerm(value, {"yhat_int": d_p[:, :, None], "yhat_edge": d_e[:, :, None]})


def coupling_losses(fieldgrid: FrameFieldGrid, yhat_int: RasterGrid,
                    yhat_edge: RasterGrid):
    """(int_align, edge_align, int_edge) with their gradients."""
    return (loss_int_align(fieldgrid, yhat_int),
            loss_edge_align(fieldgrid, yhat_edge),
            loss_int_edge(yhat_int, yhat_edge))


def all_losses(fieldgrid: FrameFieldGrid, y_int: RasterGrid, y_edge: RasterGrid,
               tf: TangentField, yhat_int: RasterGrid, yhat_edge: RasterGrid,
               cfg: LossConfig) -> dict:
    """Every loss term keyed by name (values only consumers can ignore grads)."""
    ia, ea, ie = coupling_losses(fieldgrid, yhat_int, yhat_edge)
    return {
        "int": seg_loss(y_int, yhat_int, cfg.alpha),
        "edge": seg_loss(y_edge, yhat_edge, cfg.alpha),
        "align": loss_align(fieldgrid, tf, y_edge),
        "align90": loss_align90(fieldgrid, tf, y_edge),
        "smooth": loss_smooth(fieldgrid),
        "int_align": ia,
        "edge_align": ea,
        "int_edge": ie,
    }


def normalize_losses(sample_scenes, cfg: LossConfig, rng_seed: int,
                     edge_width: float = 2.0) -> LossConfig:
    """Fill cfg.normalizers with mean loss magnitudes on randomized inputs.

    Stands in for averaging over a random data subset with an untrained
    model: the field is uniform in [-1, 1] per channel and the predicted maps
    are the ground truth under clipped uniform noise.
    """
    if not sample_scenes:
        raise ValueError("normalize_losses needs at least one scene")
    rng = np.random.default_rng(rng_seed)
    sums = {k: 0.0 for k in LOSS_NAMES}
    for scene in sample_scenes:
        y_int = rasterize_interior(scene)
        y_edge = rasterize_edges(scene, edge_width)
        tf = rasterize_tangent_angle(scene, edge_width)
        h, w = scene.extent
        fieldgrid = FrameFieldGrid(RasterGrid(
            rng.uniform(-1.0, 1.0, size=(h, w, 4)).astype(np.float32)))
        yhat_int = RasterGrid(np.clip(
            y_int.data + rng.uniform(-0.25, 0.25, size=y_int.data.shape), 0.0, 1.0
        ).astype(np.float32))
        yhat_edge = RasterGrid(np.clip(
            y_edge.data + rng.uniform(-0.25, 0.25, size=y_edge.data.shape), 0.0, 1.0
        ).astype(np.float32))
        terms = all_losses(fieldgrid, y_int, y_edge, tf, yhat_int, yhat_edge, cfg)
        for k in LOSS_NAMES:
            sums[k] += terms[k].value
    n = len(sample_scenes)
    normalizers = {k: max(sums[k] / n, NORMALIZER_FLOOR) for k in LOSS_NAMES}
    return replace(cfg, normalizers=normalizers)


def init_field_from_tangents(tf: TangentField) -> np.ndarray:
    """Closed-form field init as float64 channels.

    Where the tangent is valid: u = e^{i theta}, v = i u, so c0 = -e^{4 i theta}
    and c2 = 0.  Elsewhere c0 = c2 = 0, the rotation-neutral coefficients:
    |f(e^{i a})| = 1 for every direction a, so off-band samples exert no
    directional pull.  (A fixed axis-aligned default would reward residual
    staircase edges of 45-degree walls and lock them in.)
    """
    theta = tf.theta.data[:, :, 0].astype(np.float64)
    valid = tf.valid.data[:, :, 0] > 0.0
    c0 = np.where(valid, -np.exp(4j * theta), 0.0 + 0j)
    c2 = np.zeros_like(c0)
    if tf.conflict is not None:
        # corner pixels carry both incident wall directions
        conf = tf.conflict.data[:, :, 0] > 0.0
        u2 = np.exp(2j * theta)
        v2 = np.exp(2j * tf.theta2.data[:, :, 0].astype(np.float64))
        c0 = np.where(conf, u2 * v2, c0)
        c2 = np.where(conf, -(u2 + v2), c2)
    out = np.stack([c0.real, c0.imag, c2.real, c2.imag], axis=-1)
    return np.ascontiguousarray(out)


def synthesize_frame_field(scene: Scene, iters: int = 200, step: float = 0.05,
                           cfg: LossConfig | None = None,
                           edge_width: float = 2.0) -> FrameFieldGrid:
    """Gradient-descend the normalized field losses from the tangent init.

    Only the field-dependent losses (align, align90, smooth) move; the
    rasterized scene is fixed.  Channels are clamped to [-4, 4] after each
    step, mirroring a bounded (tanh) output head.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    cfg = cfg or LossConfig()
    tf = rasterize_tangent_angle(scene, edge_width)
    edge_mask = rasterize_edges(scene, edge_width)
    h, w = scene.extent
    hw = float(h * w)
    data = init_field_from_tangents(tf)

    weights = (edge_mask.data[:, :, 0] * tf.valid.data[:, :, 0]).astype(np.float64)
    idx = np.flatnonzero(weights > 0.0)
    wsel = weights.reshape(-1)[idx]
    th = tf.theta.data[:, :, 0].astype(np.float64).reshape(-1)[idx]
    z = np.exp(1j * th)
    z90 = np.exp(1j * (th - np.pi / 2.0))

    wa = cfg.lambda_align / cfg.normalizers["align"]
    w90 = cfg.lambda_align90 / cfg.normalizers["align90"]
    ws = cfg.lambda_smooth / cfg.normalizers["smooth"]

    # hot loop in float32, channels-first, gradients fused; the public loss
    # kernels stay float64 and define the semantics this loop mirrors
    d4 = np.ascontiguousarray(data.transpose(2, 0, 1).astype(np.float32))
    z32 = z.astype(np.complex64)
    z902 = (z90 * z90).astype(np.complex64)
    z2_32 = (z32 * z32)
    wsel32 = wsel.astype(np.float32)
    k_sm = np.float32(2.0 * ws / hw)
    scale = (wsel32 / np.float32(hw))

    def grad_step(d):
        grad = np.zeros_like(d)
        c0 = d[0].reshape(-1)[idx] + 1j * d[1].reshape(-1)[idx]
        c2 = d[2].reshape(-1)[idx] + 1j * d[3].reshape(-1)[idx]
        for wk, zz2 in ((np.float32(wa), z2_32), (np.float32(w90), z902)):
            f = zz2 * zz2 + c2 * zz2 + c0
            g0 = (2.0 * wk) * scale * f
            g2 = g0 * np.conj(zz2)
            for ch, g in ((0, g0.real), (1, g0.imag), (2, g2.real), (3, g2.imag)):
                grad[ch].reshape(-1)[idx] += g
        for a in range(4):
            x = d[a]
            g = grad[a]
            gr = np.empty_like(x)
            gr[1:-1] = 0.5 * (x[2:] - x[:-2])
            gr[0] = x[1] - x[0]
            gr[-1] = x[-1] - x[-2]
            g[2:] += (k_sm * 0.5) * gr[1:-1]
            g[:-2] -= (k_sm * 0.5) * gr[1:-1]
            g[1] += k_sm * gr[0]
            g[0] -= k_sm * gr[0]
            g[-1] += k_sm * gr[-1]
            g[-2] -= k_sm * gr[-1]
            gc = np.empty_like(x)
            gc[:, 1:-1] = 0.5 * (x[:, 2:] - x[:, :-2])
            gc[:, 0] = x[:, 1] - x[:, 0]
            gc[:, -1] = x[:, -1] - x[:, -2]
            g[:, 2:] += (k_sm * 0.5) * gc[:, 1:-1]
            g[:, :-2] -= (k_sm * 0.5) * gc[:, 1:-1]
            g[:, 1] += k_sm * gc[:, 0]
            g[:, 0] -= k_sm * gc[:, 0]
            g[:, -1] += k_sm * gc[:, -1]
            g[:, -2] -= k_sm * gc[:, -1]
        return grad

    step32 = np.float32(step)
    for it in range(iters):
        grad = grad_step(d4)
        if it % 25 == 0 and not np.isfinite(grad).all():
            raise FloatingPointError("synthesis objective became non-finite")
        d4 -= step32 * grad
        np.clip(d4, -COEFF_CLAMP, COEFF_CLAMP, out=d4)
    if not np.isfinite(d4).all():
        raise FloatingPointError("synthesis objective became non-finite")
    return FrameFieldGrid(RasterGrid(d4.transpose(1, 2, 0)))


def synthesis_objective(fieldgrid: FrameFieldGrid, scene: Scene,
                        cfg: LossConfig | None = None,
                        edge_width: float = 2.0) -> float:
    """The synthesize_frame_field objective at a given field (for checks)."""
    cfg = cfg or LossConfig()
    tf = rasterize_tangent_angle(scene, edge_width)
    edge_mask = rasterize_edges(scene, edge_width)
    la = loss_align(fieldgrid, tf, edge_mask).value
    l9 = loss_align90(fieldgrid, tf, edge_mask).value
    ls = loss_smooth(fieldgrid).value
    return (cfg.lambda_align / cfg.normalizers["align"] * la
            + cfg.lambda_align90 / cfg.normalizers["align90"] * l9
            + cfg.lambda_smooth / cfg.normalizers["smooth"] * ls)
