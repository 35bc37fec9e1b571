"""Domains with a flat exit face, segment crossing detection, boundary frames.

Two domain shapes are supported: a half-space and an axis-aligned box. The
designated exit face ``gamma`` always lies in a single coordinate hyperplane
and the interior sits strictly on one side of it. Faces are identified by
strings ``"<axis><lo|hi>"`` (so ``"0lo"`` is the lower face of axis 0).

All types are immutable; every operation is read-only and safe to share
across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

Face = str

# Hit points are snapped onto the crossed hyperplane; a point within this
# distance of a second face is treated as a corner hit.
CORNER_TOL = 1e-12


def face_id(axis: int, side: str) -> Face:
    if side not in ("lo", "hi"):
        raise ValueError(f"face side must be 'lo' or 'hi', got {side!r}")
    return f"{axis}{side}"


@dataclass(frozen=True)
class Crossing:
    """First intersection of a step segment with the boundary."""

    theta: float
    point: np.ndarray
    face: Face


@dataclass(frozen=True)
class HalfSpace:
    """Interior ``{x : side * (x[axis] - level) > 0}`` with gamma = its boundary."""

    dim: int
    axis: int = 0
    level: float = 0.0
    side: int = 1  # +1: interior above the level, -1: below

    def __post_init__(self):
        if not (0 <= self.axis < self.dim):
            raise ValueError("gamma axis out of range")
        if self.side not in (-1, 1):
            raise ValueError("side must be +1 or -1")

    @property
    def gamma_axis(self) -> int:
        return self.axis

    @property
    def gamma_level(self) -> float:
        return self.level

    @property
    def gamma_face(self) -> Face:
        # Interior above the level means the boundary is a lower bound.
        return face_id(self.axis, "lo" if self.side > 0 else "hi")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        if self.side > 0:
            lo[self.axis] = self.level
        else:
            hi[self.axis] = self.level
        return lo, hi

    def gamma_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.bounds()


@dataclass(frozen=True)
class Box:
    """Open axis-aligned box with one face designated as gamma."""

    lo: tuple
    hi: tuple
    gamma_axis: int = 0
    gamma_side: str = "lo"

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ValueError("box corners must be 1-d and of equal length")
        if not np.all(lo < hi):
            raise ValueError("box lower corner must be strictly below upper corner")
        if not (0 <= self.gamma_axis < lo.size):
            raise ValueError("gamma axis out of range")
        if self.gamma_side not in ("lo", "hi"):
            raise ValueError("gamma side must be 'lo' or 'hi'")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def gamma_level(self) -> float:
        return (self.lo if self.gamma_side == "lo" else self.hi)[self.gamma_axis]

    @property
    def gamma_face(self) -> Face:
        return face_id(self.gamma_axis, self.gamma_side)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)

    def gamma_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate ranges of the gamma face (degenerate along its axis)."""
        lo, hi = self.bounds()
        lo[self.gamma_axis] = hi[self.gamma_axis] = self.gamma_level
        return lo, hi


Domain = Union[HalfSpace, Box]


def _check_dim(domain: Domain, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != domain.dim:
        raise ValueError(
            f"point dimension {x.shape[-1]} does not match domain dimension {domain.dim}"
        )
    return x


def contains(domain: Domain, x) -> bool:
    """True iff ``x`` lies in the open interior (boundary points excluded)."""
    x = _check_dim(domain, x)
    lo, hi = domain.bounds()
    return bool(np.all(x > lo) and np.all(x < hi))


def is_gamma_face(domain: Domain, face: Face) -> bool:
    return face == domain.gamma_face


def boundary_crossing(domain: Domain, x_prev, x_next) -> Optional[Crossing]:
    """First boundary intersection of the segment ``[x_prev, x_next]``.

    Returns the smallest ``theta`` in [0, 1] with ``x_prev + theta*(x_next -
    x_prev)`` on the boundary, the hit point (snapped onto the crossed
    hyperplane), and the face hit. Returns None when the segment stays
    interior; ``x_next`` exactly on the boundary counts as a crossing with
    theta = 1. A hit point lying on several faces at once (a box corner) is
    assigned to a non-gamma face.
    """
    x_prev = _check_dim(domain, x_prev)
    x_next = _check_dim(domain, x_next)
    if not contains(domain, x_prev):
        raise ValueError("segment start must be interior")
    lo, hi = domain.bounds()

    theta_min = np.inf
    axis_hit, side_hit = -1, "lo"
    for k in range(domain.dim):
        dxk = x_next[k] - x_prev[k]
        if x_next[k] <= lo[k]:
            th = (lo[k] - x_prev[k]) / dxk
            if th < theta_min:
                theta_min, axis_hit, side_hit = th, k, "lo"
        elif x_next[k] >= hi[k]:
            th = (hi[k] - x_prev[k]) / dxk
            if th < theta_min:
                theta_min, axis_hit, side_hit = th, k, "hi"
    if axis_hit < 0:
        return None

    point = x_prev + theta_min * (x_next - x_prev)
    level = lo[axis_hit] if side_hit == "lo" else hi[axis_hit]
    point[axis_hit] = level
    face = face_id(axis_hit, side_hit)

    # Corner rule: a gamma hit that also touches another face is reclassified
    # to the (lowest-axis, lo-first) non-gamma face.
    if face == domain.gamma_face:
        for k in range(domain.dim):
            for side, bound in (("lo", lo[k]), ("hi", hi[k])):
                cand = face_id(k, side)
                if cand == face or not np.isfinite(bound):
                    continue
                if abs(point[k] - bound) <= CORNER_TOL:
                    point[k] = bound
                    return Crossing(float(theta_min), point, cand)
    return Crossing(float(theta_min), point, face)


def gamma_frame(domain: Domain, z) -> tuple[np.ndarray, list[np.ndarray]]:
    """Outward unit normal and orthonormal tangent basis of gamma at ``z``.

    ``z`` must lie on the gamma face; the tangent basis is axis-aligned,
    listed in ascending axis order.
    """
    z = _check_dim(domain, z)
    glo, ghi = domain.gamma_bounds()
    axis = domain.gamma_axis
    if abs(z[axis] - domain.gamma_level) > CORNER_TOL:
        raise ValueError("point is not on the gamma hyperplane")
    others = np.delete(np.arange(domain.dim), axis)
    if np.any(z[others] < glo[others] - CORNER_TOL) or np.any(
        z[others] > ghi[others] + CORNER_TOL
    ):
        raise ValueError("point is outside the gamma face")

    normal = np.zeros(domain.dim)
    if isinstance(domain, HalfSpace):
        normal[axis] = -float(domain.side)
    else:
        normal[axis] = -1.0 if domain.gamma_side == "lo" else 1.0
    basis = []
    for k in others:
        t = np.zeros(domain.dim)
        t[k] = 1.0
        basis.append(t)
    return normal, basis


def on_boundary(domain: Domain, x, tol: float = 1e-12) -> bool:
    """True iff ``x`` is within ``tol`` of the boundary and not outside it."""
    x = _check_dim(domain, x)
    lo, hi = domain.bounds()
    inside = np.all(x >= lo - tol) and np.all(x <= hi + tol)
    touches = np.any(np.abs(x - lo) <= tol) or np.any(np.abs(x - hi) <= tol)
    return bool(inside and touches)
