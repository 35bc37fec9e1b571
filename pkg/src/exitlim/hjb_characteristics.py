"""Method-of-characteristics solver for the inviscid Hamilton-Jacobi equation.

The stationary equation -<b, Dv> + |Dv|^2/2 = 0 with v = 0 on the exit face
is solved by shooting the Hamiltonian system

    dx/dt = -b(x) + p,   dp/dt = Db(x)^T p,   dv/dt = <-b(x) + p, p>,

from boundary points x(0) = psi(y) with p(0) = 2 <b, nu> nu, into the domain.
Along the rays v is the quasipotential (the minimal action to reach the exit
face against the drift), p its gradient, and b - p the limiting conditioned
drift. The first-order correction v1 rides along the same rays via
dv1/dt = Lap(v)/2. The fan is trusted only on its region of strong
regularity: in-domain nodes where the ray map stays a diffeomorphism
(Jacobian bounded away from zero, constant sign) connected to the boundary
patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage
from scipy.integrate import simpson
from scipy.spatial import cKDTree

from .dynamics import DriftFieldModel, TrajectoryRecord, flow_to_exit, fundamental_matrix_Y
from .errors import NonTransversalError, OutsideRegionError
from .geometry import Domain, gamma_frame

EIKONAL_TOL = 1e-8
TRANSVERSALITY_MARGIN = 1e-8
DEFAULT_JAC_FLOOR = 1e-6
DEFAULT_LAMBDA_FLOOR = 1e-3
NEWTON_MAX_ITER = 50
# Allow this many cells of extrapolation beyond the fan edges during
# inversion (integrator stages may poke one step past the exit face).
EXTRAP_CELLS = 2.0


def initial_p(b, psi_y, nu) -> np.ndarray:
    """Boundary gradient 2 <b, nu> nu of the quasipotential at a gamma point.

    Requires the drift to enter the domain: <b, nu> < 0 (nu is the outward
    normal); otherwise the exit conditioning has no boundary layer and the
    shooting problem is ill-posed.
    """
    psi_y = np.asarray(psi_y, dtype=float)
    nu = np.asarray(nu, dtype=float)
    bv = np.asarray(b(psi_y) if callable(b) else b, dtype=float)
    bn = float(bv @ nu)
    if bn >= -TRANSVERSALITY_MARGIN:
        raise NonTransversalError(
            f"drift-normal product {bn:.3e} is not negative at the boundary point"
        )
    return 2.0 * bn * nu


@dataclass
class CharacteristicFan:
    """Ray bundle from a gamma patch with quasipotential data.

    Arrays are indexed (time, ray); ``x``/``p`` carry a trailing space axis.
    ``v0`` is the quasipotential along rays, ``v1`` the transport correction
    (filled by :func:`augment_v1`). ``jac`` stacks [dx/dt | dx/dy] columns and
    ``valid`` is the region-of-strong-regularity mask.
    """

    domain: Domain
    b_model: DriftFieldModel
    t: np.ndarray
    y: np.ndarray
    x: np.ndarray
    p: np.ndarray
    v0: np.ndarray
    jac: np.ndarray
    jac_det: np.ndarray
    residual: np.ndarray
    valid: np.ndarray
    v1: Optional[np.ndarray] = None
    lap_v0: Optional[np.ndarray] = None
    d2v0: Optional[np.ndarray] = None
    dlap_v0: Optional[np.ndarray] = None
    dv1: Optional[np.ndarray] = None
    _tree: Optional[cKDTree] = dataclass_field(default=None, repr=False)
    _tree_idx: Optional[np.ndarray] = dataclass_field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.x.shape[-1]

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0]) if self.y.size > 1 else 1.0

    def gamma_points(self) -> np.ndarray:
        return self.x[0]

    def to_csv(self, path) -> None:
        nt, ny, n = self.x.shape
        v1 = self.v1 if self.v1 is not None else np.full((nt, ny), np.nan)
        with open(path, "w") as fh:
            xs = ",".join(f"x{k + 1}" for k in range(n))
            ps = ",".join(f"p{k + 1}" for k in range(n))
            fh.write(f"t,y,{xs},{ps},z,z1,jac_det,valid\n")
            for i in range(nt):
                for j in range(ny):
                    row = [repr(float(self.t[i])), repr(float(self.y[j]))]
                    row += [repr(float(v)) for v in self.x[i, j]]
                    row += [repr(float(v)) for v in self.p[i, j]]
                    row += [repr(float(self.v0[i, j])), repr(float(v1[i, j]))]
                    row += [repr(float(self.jac_det[i, j])), str(int(self.valid[i, j]))]
                    fh.write(",".join(row) + "\n")


def _fan_rhs(b_model: DriftFieldModel, x: np.ndarray, p: np.ndarray):
    bv = b_model(x)
    jac = b_model.jacobian(x)
    dp = np.einsum("...ki,...k->...i", jac, p)
    dx = -bv + p
    dv = np.einsum("...i,...i->...", dx, p)
    return dx, dp, dv


def shoot_fan(
    b_model: DriftFieldModel,
    domain: Domain,
    patch_lo: float,
    patch_hi: float,
    n_rays: int,
    dt_ode: float,
    t_max: float,
    jac_floor: float = DEFAULT_JAC_FLOOR,
    lambda_floor: float = DEFAULT_LAMBDA_FLOOR,
) -> CharacteristicFan:
    """Shoot a fan of characteristics from a patch of the gamma face.

    The patch parametrizes the free coordinate of the face (1-d and 2-d
    domains; a 1-d domain has a single ray). Rays freeze once they leave the
    domain. Raises NonTransversalError if the drift fails to point inward
    with the required margin anywhere on the patch.
    """
    n = domain.dim
    if n not in (1, 2):
        raise NotImplementedError("characteristic fans support 1-d and 2-d domains")
    axis = domain.gamma_axis
    level = domain.gamma_level
    if n == 1:
        y = np.zeros(1)
        psi = np.array([[level]])
    else:
        free_axis = 1 - axis
        n_rays = max(int(n_rays), 2)
        y = np.linspace(float(patch_lo), float(patch_hi), n_rays)
        psi = np.zeros((n_rays, 2))
        psi[:, axis] = level
        psi[:, free_axis] = y
    nu, _ = gamma_frame(domain, psi[0])

    b_gamma = b_model(psi)
    bn = b_gamma @ nu
    if np.any(bn >= -TRANSVERSALITY_MARGIN):
        raise NonTransversalError("drift is not inward-pointing on the whole patch")
    p0 = 2.0 * bn[:, None] * nu[None, :]

    nt = int(np.floor(t_max / dt_ode + 1e-12)) + 1
    ny = y.size
    xs = np.empty((nt, ny, n))
    ps = np.empty((nt, ny, n))
    vs = np.empty((nt, ny))
    alive = np.ones(ny, dtype=bool)
    in_dom = np.zeros((nt, ny), dtype=bool)

    x_cur, p_cur, v_cur = psi.astype(float), p0.astype(float), np.zeros(ny)
    xs[0], ps[0], vs[0] = x_cur, p_cur, v_cur
    in_dom[0] = True
    lo_b, hi_b = domain.bounds()
    for i in range(1, nt):
        xn, pn, vn = _rk4_fan(b_model, x_cur, p_cur, v_cur, dt_ode)
        # Freeze rays that have left the closed domain.
        inside = np.all(xn >= lo_b - 1e-12, axis=-1) & np.all(xn <= hi_b + 1e-12, axis=-1)
        newly_dead = alive & ~inside
        keep = ~newly_dead & alive
        x_cur = np.where(keep[:, None], xn, x_cur)
        p_cur = np.where(keep[:, None], pn, p_cur)
        v_cur = np.where(keep, vn, v_cur)
        alive = keep
        xs[i], ps[i], vs[i] = x_cur, p_cur, v_cur
        in_dom[i] = alive

    # Hamiltonian residual; conserved (= 0) along exact rays.
    b_on = b_model(xs.reshape(-1, n)).reshape(nt, ny, n)
    residual = np.abs(
        -np.einsum("tyn,tyn->ty", b_on, ps) + 0.5 * np.einsum("tyn,tyn->ty", ps, ps)
    )

    # Jacobian of (t, y) -> x: the t-column is the exact ray velocity.
    dx_dt = -b_on + ps
    jac = np.empty((nt, ny, n, n))
    jac[..., 0] = dx_dt
    if n == 2:
        dy = y[1] - y[0]
        jac[..., 1] = np.gradient(xs, dy, axis=1, edge_order=2)
        jac_det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    else:
        jac_det = jac[..., 0, 0]

    valid = in_dom & (np.abs(jac_det) >= jac_floor) & (residual <= EIKONAL_TOL)
    valid &= np.abs(bn)[None, :] >= lambda_floor
    sign0 = np.sign(np.median(jac_det[0]))
    valid &= np.sign(jac_det) == sign0
    if ny >= 3:
        # Cross-ray differences are only trusted where the FD stencil stays alive.
        nbr = in_dom.copy()
        nbr[:, 1:-1] &= in_dom[:, :-2] & in_dom[:, 2:]
        nbr[:, 0] &= in_dom[:, 1] & in_dom[:, 2]
        nbr[:, -1] &= in_dom[:, -2] & in_dom[:, -3]
        valid &= nbr
    valid = _connected_to_patch(valid)

    return CharacteristicFan(
        domain, b_model, np.arange(nt) * dt_ode, y, xs, ps, vs,
        jac, jac_det, residual, valid,
    )


def _rk4_fan(b_model, x, p, v, h):
    k1 = _fan_rhs(b_model, x, p)
    k2 = _fan_rhs(b_model, x + 0.5 * h * k1[0], p + 0.5 * h * k1[1])
    k3 = _fan_rhs(b_model, x + 0.5 * h * k2[0], p + 0.5 * h * k2[1])
    k4 = _fan_rhs(b_model, x + h * k3[0], p + h * k3[1])
    xn = x + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    pn = p + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    vn = v + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return xn, pn, vn


def _connected_to_patch(valid: np.ndarray) -> np.ndarray:
    """Keep only the valid components touching the boundary row t = 0."""
    labels, _ = ndimage.label(valid)
    keep = np.unique(labels[0][valid[0]])
    keep = keep[keep > 0]
    return np.isin(labels, keep)


def _grid_partials(fan: CharacteristicFan, arr: np.ndarray, dt_exact: Optional[np.ndarray] = None):
    """Partial derivatives of a fan-sampled array w.r.t. (t, y).

    ``dt_exact`` supplies an analytic time derivative where available;
    cross-ray derivatives are central differences.
    """
    d_t = dt_exact if dt_exact is not None else np.gradient(arr, fan.dt, axis=0, edge_order=2)
    if fan.y.size > 1:
        d_y = np.gradient(arr, fan.dy, axis=1, edge_order=2)
    else:
        d_y = np.zeros_like(arr)
    return d_t, d_y


def augment_v1(fan: CharacteristicFan) -> CharacteristicFan:
    """Fill the transport correction v1 and the second-derivative fields.

    Lap(v0) is the divergence of the p-field in physical coordinates,
    obtained by the (t, y) -> x chain rule; v1 integrates Lap(v0)/2 along
    each ray from v1 = 0 on the boundary. Nodes where the ray-map Jacobian
    is deficient stay invalid rather than raising.
    """
    nt, ny, n = fan.x.shape
    b_jac = fan.b_model.jacobian(fan.x.reshape(-1, n)).reshape(nt, ny, n, n)
    dp_dt = np.einsum("tykn,tyk->tyn", b_jac, fan.p)  # exact along rays

    jac_inv = _safe_inverse(fan.jac, fan.jac_det)
    dp_cols = [None] * n
    dp_cols[0] = dp_dt
    if n == 2:
        dp_cols[1] = np.gradient(fan.p, fan.dy, axis=1, edge_order=2)
    dp_ty = np.stack(dp_cols, axis=-1) if n == 2 else dp_dt[..., None]
    d2v0 = np.einsum("tyic,tycj->tyij", dp_ty, jac_inv)
    d2v0 = 0.5 * (d2v0 + np.swapaxes(d2v0, -1, -2))
    lap = np.einsum("tyii->ty", d2v0)

    # Cumulative trapezoid of Lap(v0)/2 along each ray.
    g = 0.5 * lap
    v1 = np.zeros((nt, ny))
    v1[1:] = np.cumsum(0.5 * fan.dt * (g[1:] + g[:-1]), axis=0)

    dlap_t, dlap_y = _grid_partials(fan, lap)
    dlap_ty = np.stack([dlap_t, dlap_y][:n], axis=-1)
    dlap = np.einsum("tyc,tycj->tyj", dlap_ty, jac_inv)

    dv1_t = g  # transport equation: dv1/dt along a ray equals Lap(v0)/2
    _, dv1_y = _grid_partials(fan, v1)
    dv1_ty = np.stack([dv1_t, dv1_y][:n], axis=-1)
    dv1 = np.einsum("tyc,tycj->tyj", dv1_ty, jac_inv)

    fan.v1 = v1
    fan.lap_v0 = lap
    fan.d2v0 = d2v0
    fan.dlap_v0 = dlap
    fan.dv1 = dv1
    # Degenerate-Jacobian nodes poison the chain rule with NaN; drop them
    # (and anything downstream along the ray) instead of raising.
    finite = (
        np.isfinite(lap)
        & np.isfinite(v1)
        & np.all(np.isfinite(dlap), axis=-1)
        & np.all(np.isfinite(dv1), axis=-1)
    )
    fan.valid = _connected_to_patch(fan.valid & finite)
    fan._tree = None
    return fan


def _safe_inverse(jac: np.ndarray, det: np.ndarray) -> np.ndarray:
    """Inverse of the ray-map Jacobian; degenerate nodes get NaN (stay invalid)."""
    n = jac.shape[-1]
    safe = np.where(np.abs(det) > 1e-300, det, np.nan)
    if n == 1:
        return (1.0 / safe)[..., None, None]
    inv = np.empty_like(jac)
    inv[..., 0, 0] = jac[..., 1, 1] / safe
    inv[..., 0, 1] = -jac[..., 0, 1] / safe
    inv[..., 1, 0] = -jac[..., 1, 0] / safe
    inv[..., 1, 1] = jac[..., 0, 0] / safe
    return inv


# ---------------------------------------------------------------------------
# Fan inversion


def _bilinear_gather(arr: np.ndarray, it: np.ndarray, iy: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear interpolation of (t, y)-indexed array values at cell coords."""
    f00 = arr[it, iy]
    f10 = arr[it + 1, iy]
    if arr.shape[1] > 1:
        f01 = arr[it, iy + 1]
        f11 = arr[it + 1, iy + 1]
    else:
        f01, f11 = f00, f10
    w = (
        f00 * ((1 - u) * (1 - v)).reshape(u.shape + (1,) * (arr.ndim - 2))
        + f10 * (u * (1 - v)).reshape(u.shape + (1,) * (arr.ndim - 2))
        + f01 * ((1 - u) * v).reshape(u.shape + (1,) * (arr.ndim - 2))
        + f11 * (u * v).reshape(u.shape + (1,) * (arr.ndim - 2))
    )
    return w


def _cell_coords(fan: CharacteristicFan, t: np.ndarray, yy: np.ndarray):
    nt, ny = fan.v0.shape
    ft = t / fan.dt
    it = np.clip(np.floor(ft).astype(int), 0, nt - 2)
    u = ft - it
    if ny > 1:
        fy = (yy - fan.y[0]) / fan.dy
        iy = np.clip(np.floor(fy).astype(int), 0, ny - 2)
        v = fy - iy
    else:
        iy = np.zeros_like(it)
        v = np.zeros_like(u)
    return it, iy, u, v


def _ensure_tree(fan: CharacteristicFan):
    if fan._tree is None:
        pts = fan.x[fan.valid]
        fan._tree = cKDTree(pts)
        fan._tree_idx = np.argwhere(fan.valid)


class FanEvaluation:
    """Batch result of inverting the ray map at interior points."""

    def __init__(self, t, y, v0, dv0, v1, b0bar, ok):
        self.t = t
        self.y = y
        self.v0 = v0
        self.dv0 = dv0
        self.v1 = v1
        self.b0bar = b0bar
        self.ok = ok


def evaluate_fan(fan: CharacteristicFan, points) -> FanEvaluation:
    """Invert x(t, y) = point by Newton iteration for a batch of points.

    Seeds at the nearest valid node (lexicographic (t, y) tie-break), uses the
    stored ray-map Jacobian, and marks points that fail to converge inside the
    valid region. Converged coordinates may overhang the fan edge by a
    fraction of a cell to tolerate integrator stages beyond the exit face.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = pts.shape[0]
    n = fan.dim
    if not np.any(fan.valid):
        raise OutsideRegionError("fan has no valid nodes")
    _ensure_tree(fan)
    dist, nearest = fan._tree.query(pts)
    cand = fan._tree_idx[nearest]
    # Lexicographic tie-break among equally near valid nodes.
    ties = fan._tree.query_ball_point(pts, dist * (1 + 1e-12) + 1e-300)
    for i, group in enumerate(ties):
        if len(group) > 1:
            idxs = fan._tree_idx[np.asarray(group)]
            order = np.lexsort((idxs[:, 1], idxs[:, 0]))
            cand[i] = idxs[order[0]]

    t = fan.t[cand[:, 0]].astype(float)
    yy = fan.y[cand[:, 1]].astype(float)
    active = np.ones(m, dtype=bool)
    for _ in range(NEWTON_MAX_ITER):
        it, iy, u, v = _cell_coords(fan, t, yy)
        x_cur = _bilinear_gather(fan.x, it, iy, u, v)
        resid = pts - x_cur
        err = np.linalg.norm(resid, axis=-1)
        active = err > 1e-12
        if not np.any(active):
            break
        jac = _bilinear_gather(fan.jac.reshape(fan.jac.shape[:2] + (n * n,)), it, iy, u, v)
        jac = jac.reshape(-1, n, n)
        step = _solve_small(jac[active], resid[active])
        t[active] += step[..., 0]
        if n == 2:
            yy[active] += step[..., 1]
        t = np.clip(t, -EXTRAP_CELLS * fan.dt, fan.t[-1] + EXTRAP_CELLS * fan.dt)
        if fan.y.size > 1:
            yy = np.clip(yy, fan.y[0] - EXTRAP_CELLS * fan.dy, fan.y[-1] + EXTRAP_CELLS * fan.dy)

    it, iy, u, v = _cell_coords(fan, t, yy)
    x_cur = _bilinear_gather(fan.x, it, iy, u, v)
    err = np.linalg.norm(pts - x_cur, axis=-1)
    cell_ok = fan.valid[it, iy] & fan.valid[it + 1, iy]
    if fan.y.size > 1:
        cell_ok &= fan.valid[it, iy + 1] & fan.valid[it + 1, iy + 1]
    ok = (err <= 1e-9) & cell_ok

    v0 = _bilinear_gather(fan.v0, it, iy, u, v)
    dv0 = _bilinear_gather(fan.p, it, iy, u, v)
    v1 = _bilinear_gather(fan.v1, it, iy, u, v) if fan.v1 is not None else np.full(m, np.nan)
    b0bar = fan.b_model(pts) - dv0
    return FanEvaluation(t, yy, v0, dv0, v1, b0bar, ok)


def _solve_small(jac: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    n = jac.shape[-1]
    if n == 1:
        return rhs / jac[..., 0, 0]
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    det = np.where(np.abs(det) > 1e-300, det, np.nan)
    out = np.empty_like(rhs)
    out[..., 0] = (jac[..., 1, 1] * rhs[..., 0] - jac[..., 0, 1] * rhs[..., 1]) / det
    out[..., 1] = (-jac[..., 1, 0] * rhs[..., 0] + jac[..., 0, 0] * rhs[..., 1]) / det
    return out


def invert_fan(fan: CharacteristicFan, x) -> tuple:
    """Resolve one interior point: (t, y, v0, Dv0, v1, b0bar).

    Raises OutsideRegionError when Newton fails or lands outside the valid
    region of the fan.
    """
    res = evaluate_fan(fan, np.asarray(x, dtype=float)[None, :])
    if not res.ok[0]:
        raise OutsideRegionError(f"point {np.asarray(x)} is outside the resolved fan region")
    return (
        float(res.t[0]),
        float(res.y[0]),
        float(res.v0[0]),
        res.dv0[0],
        float(res.v1[0]) if fan.v1 is not None else None,
        res.b0bar[0],
    )


class FanDriftField:
    """Limiting conditioned drift b - Dv0 interpolated from a fan.

    Callable on single points; ``jacobian`` uses the fan's second-derivative
    field Db - D2v0 (available after :func:`augment_v1`).
    """

    def __init__(self, fan: CharacteristicFan):
        if fan.d2v0 is None:
            raise ValueError("run augment_v1 before building the drift field")
        self.fan = fan

    def _eval(self, x):
        res = evaluate_fan(self.fan, np.atleast_2d(x))
        if not np.all(res.ok):
            raise OutsideRegionError(f"drift requested outside the fan at {x}")
        return res

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        res = self._eval(x)
        out = self.fan.b_model(np.atleast_2d(x)) - res.dv0
        return out[0] if x.ndim == 1 else out

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        res = self._eval(x)
        it, iy, u, v = _cell_coords(self.fan, res.t, res.y)
        n = self.fan.dim
        d2 = _bilinear_gather(
            self.fan.d2v0.reshape(self.fan.d2v0.shape[:2] + (n * n,)), it, iy, u, v
        ).reshape(-1, n, n)
        out = self.fan.b_model.jacobian(np.atleast_2d(x)) - d2
        return out[0] if x.ndim == 1 else out


def action_of_curve(times, gamma, b) -> float:
    """Action (1/2) integral |dgamma/dt - b(gamma)|^2 dt on a uniform grid.

    The velocity uses centered differences (second-order one-sided at the
    ends); the integral is a trapezoid rule.
    """
    times = np.asarray(times, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    vel = np.gradient(gamma, times, axis=0, edge_order=2)
    integrand = np.sum((vel - np.asarray(b(gamma), dtype=float)) ** 2, axis=-1)
    return 0.5 * float(np.trapezoid(integrand, times))


def dv1_representation_check(fan: CharacteristicFan, x, dt_ode: float) -> dict:
    """Compare the ray-transport gradient of v1 with its flow representation.

    The representation propagates D(Lap v0)/2 along the limiting drift flow
    from ``x`` to the boundary with the adjoint fundamental matrix and adds
    the boundary gradient of v1:

        V(x) = (1/2) int_0^tau Y(t) D(Lap v0)(X(t)) dt + Y(tau) Dv1(X(tau)).

    Returns the discrepancy |V - Dv1_fd| where Dv1_fd is a central difference
    of the interpolated v1.
    """
    if fan.dv1 is None:
        raise ValueError("run augment_v1 first")
    x = np.asarray(x, dtype=float)
    field = FanDriftField(fan)
    traj = flow_to_exit(field, x, fan.domain, dt_ode, t_max=float(fan.t[-1]) * 4 + 1.0)

    def b0_jacobian(pt):
        return -field.jacobian(pt)  # Db0 = -D(b - Dv0)

    ypath = fundamental_matrix_Y(b0_jacobian, traj)

    nodes = list(traj.states) + [traj.exit_point]
    dlap_nodes = []
    for pt in nodes:
        res = evaluate_fan(fan, pt[None, :])
        it, iy, u, v = _cell_coords(fan, res.t, res.y)
        dlap_nodes.append(_bilinear_gather(fan.dlap_v0, it, iy, u, v)[0])
    integrand = np.einsum("tij,tj->ti", ypath.matrices, np.asarray(dlap_nodes))
    integral = np.array(
        [simpson(integrand[:, k], x=ypath.times) for k in range(fan.dim)]
    )

    res_exit = evaluate_fan(fan, traj.exit_point[None, :])
    it, iy, u, v = _cell_coords(fan, np.zeros(1), res_exit.y)
    dv1_gamma = _bilinear_gather(fan.dv1, it, iy, np.zeros(1), v)[0]
    v_repr = 0.5 * integral + ypath.matrices[-1] @ dv1_gamma

    step = 0.5 * max(fan.dt, fan.dy if fan.y.size > 1 else fan.dt)
    dv1_fd = np.empty(fan.dim)
    for k in range(fan.dim):
        e = np.zeros(fan.dim)
        e[k] = step
        hi = evaluate_fan(fan, (x + e)[None, :])
        lo = evaluate_fan(fan, (x - e)[None, :])
        if not (hi.ok[0] and lo.ok[0]):
            raise OutsideRegionError("finite-difference stencil leaves the fan region")
        dv1_fd[k] = (hi.v1[0] - lo.v1[0]) / (2 * step)

    disc = float(np.max(np.abs(v_repr - dv1_fd)))
    return {
        "representation": v_repr,
        "fd_gradient": dv1_fd,
        "discrepancy": disc,
        "exit_time": traj.exit_time,
    }
