"""Finite-difference solver for the exit-probability equation on intervals and boxes.

Solves <b, Dh> + (eps^2/2) Lap(h) = 0 with h = 1 on the gamma face and h = 0
on the remaining boundary (corners take 0). Diffusion uses the second-order
3/5-point stencil; advection is centered where the cell Peclet number
|b_k| dx_k / eps^2 is at most 2 and first-order upwind otherwise. The sparse
system is relaxed by damped point sweeps, lexicographic then reverse,
alternating, until the max-norm residual meets tolerance.

The logarithmic transform v = -eps^2 log h exposes the viscous
Hamilton-Jacobi structure used by the expansion checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .errors import HUnderflowError, NoConvergenceError, RegionInvalidError
from .geometry import Box

H_FLOOR = 1e-290
PECLET_CENTERED_MAX = 2.0
UPWIND_DAMPING = 0.8
RESIDUAL_CHECK_EVERY = 64


@dataclass(frozen=True)
class GridField:
    """Scalar field sampled on a uniform node grid over a box.

    ``values`` has one axis per space dimension (axis 0 is x1). ``valid``
    marks nodes with meaningful values.
    """

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))
        if self.values.ndim != self.lo.size:
            raise ValueError("values rank must match box dimension")
        if any(s < 3 for s in self.values.shape):
            raise ValueError("need at least 3 nodes per axis")
        if self.valid.shape != self.values.shape:
            raise ValueError("valid mask shape mismatch")

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.shape) - 1)

    def axes(self) -> list[np.ndarray]:
        return [
            np.linspace(self.lo[k], self.hi[k], self.shape[k]) for k in range(self.dim)
        ]

    def node_points(self) -> np.ndarray:
        """All node coordinates, shape ``(*shape, dim)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def interp(self, pts) -> np.ndarray:
        """Clamped multilinear interpolation at points of shape (..., dim)."""
        return _interp_linear(self, pts)

    def to_csv(self, path) -> None:
        pts = self.node_points().reshape(-1, self.dim)
        vals = self.values.reshape(-1)
        ok = self.valid.reshape(-1)
        idx = np.stack(
            np.meshgrid(*[np.arange(s) for s in self.shape], indexing="ij"), axis=-1
        ).reshape(-1, self.dim)
        with open(path, "w") as fh:
            cols = ["i", "j"][: self.dim] + [f"x{k + 1}" for k in range(self.dim)]
            fh.write(",".join(cols + ["value", "valid"]) + "\n")
            for r in range(vals.size):
                ix = ",".join(str(v) for v in idx[r])
                xs = ",".join(repr(float(v)) for v in pts[r])
                fh.write(f"{ix},{xs},{vals[r]!r},{int(ok[r])}\n")


def _interp_linear(field: GridField, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    frac = (pts - field.lo) / field.spacing
    out = None
    if field.dim == 1:
        nx = field.shape[0]
        f = frac[:, 0]
        i = np.clip(np.floor(f).astype(int), 0, nx - 2)
        u = np.clip(f - i, 0.0, 1.0)
        out = field.values[i] * (1 - u) + field.values[i + 1] * u
    elif field.dim == 2:
        nx, ny = field.shape
        f0, f1 = frac[:, 0], frac[:, 1]
        i = np.clip(np.floor(f0).astype(int), 0, nx - 2)
        j = np.clip(np.floor(f1).astype(int), 0, ny - 2)
        u = np.clip(f0 - i, 0.0, 1.0)
        v = np.clip(f1 - j, 0.0, 1.0)
        out = (
            field.values[i, j] * (1 - u) * (1 - v)
            + field.values[i + 1, j] * u * (1 - v)
            + field.values[i, j + 1] * (1 - u) * v
            + field.values[i + 1, j + 1] * u * v
        )
    else:
        raise NotImplementedError("interpolation supports 1-d and 2-d grids")
    return out[0] if scalar else out


@dataclass(frozen=True)
class SolveReport:
    """Relaxation outcome: sweep count, final max-norm residual, h range."""

    iterations: int
    residual: float
    h_min: float
    h_max: float


def _stencil_coefficients(b_nodes: list[np.ndarray], eps: float, spacing: np.ndarray):
    """Per-node stencil weights and damping for the hybrid scheme.

    Returns (plus, minus, diag, damp) where plus[k]/minus[k] multiply the
    neighbors along axis k and diag is the (positive) center weight.
    """
    kappa = 0.5 * eps * eps
    shape = b_nodes[0].shape
    diag = np.zeros(shape)
    damp = np.ones(shape)
    plus, minus = [], []
    for k, bk in enumerate(b_nodes):
        d = spacing[k]
        peclet = np.abs(bk) * d / (eps * eps)
        centered = peclet <= PECLET_CENTERED_MAX
        cp = np.where(centered, kappa / d**2 + bk / (2 * d), 0.0)
        cm = np.where(centered, kappa / d**2 - bk / (2 * d), 0.0)
        cd = np.where(centered, 2 * kappa / d**2, 0.0)
        up = ~centered
        pos = up & (bk > 0)
        neg = up & (bk <= 0)
        cp = np.where(pos, kappa / d**2 + bk / d, cp)
        cm = np.where(pos, kappa / d**2, cm)
        cd = np.where(pos, 2 * kappa / d**2 + bk / d, cd)
        cp = np.where(neg, kappa / d**2, cp)
        cm = np.where(neg, kappa / d**2 - bk / d, cm)
        cd = np.where(neg, 2 * kappa / d**2 - bk / d, cd)
        damp = np.where(up, UPWIND_DAMPING, damp)
        plus.append(cp)
        minus.append(cm)
        diag += cd
    return plus, minus, diag, damp


def _apply_stencil(h: np.ndarray, plus, minus, diag) -> np.ndarray:
    """Discrete operator applied to h on interior nodes (boundary rows zero)."""
    res = np.zeros_like(h)
    core = (slice(1, -1),) * h.ndim
    res[core] = -diag[core] * h[core]
    for k in range(h.ndim):
        up = [slice(1, -1)] * h.ndim
        dn = [slice(1, -1)] * h.ndim
        up[k] = slice(2, None)
        dn[k] = slice(None, -2)
        res[core] += plus[k][core] * h[tuple(up)] + minus[k][core] * h[tuple(dn)]
    return res


def _boundary_values(domain: Box, shape) -> np.ndarray:
    """Dirichlet data: 1 on the gamma face, 0 elsewhere, corners 0."""
    h = np.zeros(shape)
    dim = len(shape)
    gamma_sl = [slice(1, -1)] * dim
    gamma_sl[domain.gamma_axis] = 0 if domain.gamma_side == "lo" else -1
    h[tuple(gamma_sl)] = 1.0
    return h


def _initial_guess(domain: Box, h: np.ndarray, b_axis: np.ndarray, eps: float) -> None:
    """Exponential profile along the gamma axis; far closer to the solution
    than a linear ramp when advection pushes away from the face."""
    dim = h.ndim
    axis = domain.gamma_axis
    lo, hi = domain.bounds()
    coords = np.linspace(lo[axis], hi[axis], h.shape[axis])
    if domain.gamma_side == "lo":
        dist = coords - lo[axis]
        away = float(np.mean(b_axis))
    else:
        dist = hi[axis] - coords
        away = -float(np.mean(b_axis))
    away = max(away, 1e-6)
    profile = np.exp(-2.0 * away * dist / (eps * eps))
    shape = [1] * dim
    shape[axis] = h.shape[axis]
    interior = (slice(1, -1),) * dim
    h[interior] = np.broadcast_to(profile.reshape(shape), h.shape)[interior]


def solve_h_eps(
    b_model: Callable,
    eps: float,
    domain: Box,
    shape,
    tol: float = 1e-10,
    max_iter: int = 200_000,
) -> tuple[GridField, SolveReport]:
    """Solve the exit-probability boundary value problem on a node grid.

    ``shape`` is the node count per axis (int for 1-d). Raises
    NoConvergenceError when the sweep budget is exhausted and HUnderflowError
    if any interior value lands below 1e-290.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(domain, Box):
        raise ValueError("the elliptic solver needs a bounded box domain")
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    dim = domain.dim
    if len(shape) != dim or dim not in (1, 2):
        raise ValueError("grid must be 1-d or 2-d and match the domain")
    if any(s < 3 for s in shape):
        raise ValueError("need at least 3 nodes per axis")

    lo, hi = domain.bounds()
    spacing = (hi - lo) / (np.asarray(shape) - 1)
    axes = [np.linspace(lo[k], hi[k], shape[k]) for k in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(mesh, axis=-1)
    b_vals = np.asarray(b_model(pts), dtype=float)
    b_nodes = [np.ascontiguousarray(b_vals[..., k]) for k in range(dim)]

    plus, minus, diag, damp = _stencil_coefficients(b_nodes, eps, spacing)
    h = _boundary_values(domain, shape)
    _initial_guess(domain, h, b_nodes[domain.gamma_axis], eps)

    sweeps_done = 0
    residual = np.inf
    while sweeps_done < max_iter:
        n_sweeps = min(RESIDUAL_CHECK_EVERY, max_iter - sweeps_done)
        forward_first = sweeps_done % 2 == 0
        if dim == 1:
            K.gauss_seidel_sweeps_1d(
                h, plus[0], minus[0], diag, damp, n_sweeps, forward_first
            )
        else:
            K.gauss_seidel_sweeps_2d(
                h, plus[0], minus[0], plus[1], minus[1], diag, damp,
                n_sweeps, forward_first,
            )
        sweeps_done += n_sweeps
        residual = float(np.max(np.abs(_apply_stencil(h, plus, minus, diag))))
        if residual <= tol:
            break
    if residual > tol:
        raise NoConvergenceError(
            f"residual {residual:.3e} above tol {tol:.3e} after {sweeps_done} sweeps"
        )

    interior = (slice(1, -1),) * dim
    h_min = float(np.min(h[interior]))
    h_max = float(np.max(h[interior]))
    if h_min < H_FLOOR:
        raise HUnderflowError(f"interior exit probability underflowed: min = {h_min:.3e}")
    field = GridField(lo, hi, h, np.ones(shape, dtype=bool))
    return field, SolveReport(sweeps_done, residual, h_min, h_max)


def residual_field(b_model: Callable, eps: float, domain: Box, field: GridField) -> np.ndarray:
    """Re-apply the discrete operator to a solved field (self-audit helper)."""
    pts = field.node_points()
    b_vals = np.asarray(b_model(pts), dtype=float)
    b_nodes = [b_vals[..., k] for k in range(field.dim)]
    plus, minus, diag, _ = _stencil_coefficients(b_nodes, eps, field.spacing)
    return _apply_stencil(field.values, plus, minus, diag)


def hopf_cole(h: GridField, eps: float) -> GridField:
    """Logarithmic transform v = -eps^2 log h; nodes with h < 1e-290 go invalid."""
    ok = h.valid & (h.values >= H_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(ok, -eps * eps * np.log(np.maximum(h.values, H_FLOOR)), np.inf)
    return GridField(h.lo, h.hi, v, ok)


def gradient_field(f: GridField) -> tuple[GridField, ...]:
    """Per-axis derivative fields: central interior, one-sided second order at
    faces; the invalid mask is dilated by one node."""
    grads = []
    vals = np.where(f.valid, f.values, 0.0)  # masked nodes would poison FD with inf
    for k in range(f.dim):
        d = f.spacing[k]
        g = np.gradient(vals, d, axis=k, edge_order=2)
        struct = np.zeros((3,) * f.dim, dtype=bool)
        idx = [slice(1, 2)] * f.dim
        idx[k] = slice(None)
        struct[tuple(idx)] = True
        bad = ndimage.binary_dilation(~f.valid, structure=struct)
        grads.append(GridField(f.lo, f.hi, np.where(bad, np.nan, g), ~bad))
    return tuple(grads)


def expansion_check(
    v_eps_list: Sequence[tuple[float, GridField]],
    v0: Callable,
    v1: Callable,
    region: Callable,
    dv0: Optional[Callable] = None,
    v1_fd_step: Optional[float] = None,
) -> list[dict]:
    """Order-eps^2 expansion residuals of v and Dv on a node region.

    For each (eps, field) pair, reports r0 = max |(v_eps - v0)/eps^2 - v1| and
    r1 = max |(Dv_eps - Dv0)/eps^2 - Dv1| over region nodes; Dv1 comes from
    central differences of ``v1`` and Dv0 from ``dv0`` (or differences of
    ``v0``). ``region`` maps node coordinates (..., dim) to a boolean mask.
    """
    rows = []
    for eps, field in v_eps_list:
        pts = field.node_points()
        mask = np.asarray(region(pts), dtype=bool)
        if not np.any(mask):
            raise RegionInvalidError("comparison region contains no grid nodes")
        if not np.all(field.valid[mask]):
            raise RegionInvalidError(f"region contains invalid nodes at eps={eps}")
        sel = pts[mask]
        eps2 = eps * eps

        v0_vals = np.asarray(v0(sel), dtype=float)
        v1_vals = np.asarray(v1(sel), dtype=float)
        r0 = float(np.max(np.abs((field.values[mask] - v0_vals) / eps2 - v1_vals)))

        grads = gradient_field(field)
        if not all(np.all(g.valid[mask]) for g in grads):
            raise RegionInvalidError(f"region touches invalid gradient nodes at eps={eps}")
        dv_eps = np.stack([g.values[mask] for g in grads], axis=-1)

        step = v1_fd_step if v1_fd_step is not None else float(np.min(field.spacing))
        dv0_vals = (
            np.asarray(dv0(sel), dtype=float)
            if dv0 is not None
            else _fd_gradient(v0, sel, step)
        )
        dv1_vals = _fd_gradient(v1, sel, step)
        r1 = float(np.max(np.abs((dv_eps - dv0_vals) / eps2 - dv1_vals)))
        rows.append({"eps": float(eps), "r0": r0, "r1": r1, "nodes": int(mask.sum())})
    return rows


def _fd_gradient(fn: Callable, pts: np.ndarray, step: float) -> np.ndarray:
    dim = pts.shape[-1]
    out = np.empty_like(pts)
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = step
        out[..., k] = (np.asarray(fn(pts + e)) - np.asarray(fn(pts - e))) / (2 * step)
    return out
