"""Frame directions as complex pairs, their polynomial encoding, and corner tests.

A frame is the unordered set {u, -u, v, -v} of two independent directions.
Storing the pair (c0, c2) of the polynomial z**4 + c2*z**2 + c0 whose roots
are exactly those four directions removes the sign/order ambiguity.
"""
from __future__ import annotations

import cmath
from dataclasses import dataclass

import numpy as np

# |c2^2 - 4*c0| below this marks a collapsed line field (u^2 == v^2)
DEGENERACY_EPS = 1e-12


@dataclass(frozen=True)
class Frame:
    """One representative direction pair; the object it names is {u, -u, v, -v}."""

    u: complex
    v: complex


@dataclass(frozen=True)
class FrameCoeffs:
    """Coefficients of z**4 + c2*z**2 + c0."""

    c0: complex
    c2: complex


def eval_poly(z: complex, c: FrameCoeffs) -> complex:
    """Evaluate z**4 + c2*z**2 + c0."""
    z2 = z * z
    return z2 * z2 + c.c2 * z2 + c.c0


def coeffs_from_frame(f: Frame) -> FrameCoeffs:
    """c0 = u^2 v^2, c2 = -(u^2 + v^2); invariant under sign flips and swap."""
    u2 = f.u * f.u
    v2 = f.v * f.v
    return FrameCoeffs(c0=u2 * v2, c2=-(u2 + v2))


def frame_from_coeffs(c: FrameCoeffs) -> Frame:
    """Recover one direction pair from (c0, c2) via the quadratic in z^2.

    Uses principal complex square roots throughout.  For a degenerate line
    field (see is_degenerate) both directions coincide.
    """
    disc = cmath.sqrt(c.c2 * c.c2 - 4.0 * c.c0)
    u2 = -0.5 * (c.c2 + disc)
    v2 = -0.5 * (c.c2 - disc)
    return Frame(u=cmath.sqrt(u2), v=cmath.sqrt(v2))


def is_degenerate(c: FrameCoeffs, eps: float = DEGENERACY_EPS) -> bool:
    """True when the frame collapses to a line field (u^2 == v^2)."""
    return abs(c.c2 * c.c2 - 4.0 * c.c0) < eps


def _dir_vec(w: complex) -> np.ndarray:
    # complex direction w maps to the (row, col) vector (Im w, Re w)
    return np.array([w.imag, w.real])


def is_corner(e_prev, e_next, f: Frame) -> bool:
    """Decide whether the walk prev->next switches between the frame directions.

    Each edge is assigned to +-u or +-v by the larger absolute scalar product;
    the node is a corner iff the two edges are assigned differently.  Exact
    ties go to u so the decision is reproducible.
    """
    e_prev = np.asarray(e_prev, dtype=float)
    e_next = np.asarray(e_next, dtype=float)
    if not (np.linalg.norm(e_prev) > 0.0 and np.linalg.norm(e_next) > 0.0):
        raise ValueError("is_corner requires nonzero edge vectors")
    u = _dir_vec(f.u)
    v = _dir_vec(f.v)

    def to_u(e):
        return abs(float(np.dot(e, u))) >= abs(float(np.dot(e, v)))

    return to_u(e_prev) != to_u(e_next)
