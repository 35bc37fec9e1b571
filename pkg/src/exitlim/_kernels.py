"""Compiled inner loops for the Euler-Maruyama exit sampler.

The kernel is resumable: it consumes one pre-drawn standard-normal row per
step and returns control when the block is exhausted, so callers can stream
variates from per-trial generators. The boundary logic mirrors
``geometry.boundary_crossing`` (smallest crossing parameter, hit point
snapped to the face, corner hits reassigned to a non-gamma face).
"""

import numpy as np
from numba import njit

STATUS_RUNNING = 0
STATUS_EXIT = 1
STATUS_TRUNCATED = 2
STATUS_NONFINITE = 3
STATUS_UNDERFLOW = 4

GUARD_RADIUS = 1e6
H_FLOOR = 1e-290
H_LOG_SWITCH = 1e-30
CORNER_TOL = 1e-12


@njit(cache=True, inline="always")
def _poly_eval_into(coeffs, expons, xv, out):
    n, m = coeffs.shape
    for i in range(n):
        acc = 0.0
        for j in range(m):
            c = coeffs[i, j]
            if c != 0.0:
                term = c
                for k in range(xv.shape[0]):
                    e = expons[j, k]
                    while e > 0:
                        term *= xv[k]
                        e -= 1
                acc += term
        out[i] = acc


@njit(cache=True, inline="always")
def _bilinear(f00, f10, f01, f11, u, v):
    return (
        f00 * (1.0 - u) * (1.0 - v)
        + f10 * u * (1.0 - v)
        + f01 * (1.0 - u) * v
        + f11 * u * v
    )


@njit(cache=True, inline="always")
def _gridh_log_gradient(x0v, x1v, lo0, lo1, inv_d0, inv_d1, H, DH0, DH1, V, DV0, DV1, vok, eps2, g):
    """Dh/h at a point, switching to -Dv/eps^2 where h is tiny. Returns 0/1 (ok/underflow)."""
    nx = H.shape[0]
    ny = H.shape[1]
    f0 = (x0v - lo0) * inv_d0
    f1 = (x1v - lo1) * inv_d1
    i = int(np.floor(f0))
    j = int(np.floor(f1))
    if i < 0:
        i = 0
    if i > nx - 2:
        i = nx - 2
    if j < 0:
        j = 0
    if j > ny - 2:
        j = ny - 2
    u = f0 - i
    v = f1 - j
    if u < 0.0:
        u = 0.0
    elif u > 1.0:
        u = 1.0
    if v < 0.0:
        v = 0.0
    elif v > 1.0:
        v = 1.0
    h00 = H[i, j]
    h10 = H[i + 1, j]
    h01 = H[i, j + 1]
    h11 = H[i + 1, j + 1]
    hmin = min(min(h00, h10), min(h01, h11))
    if hmin >= H_LOG_SWITCH:
        hval = _bilinear(h00, h10, h01, h11, u, v)
        if hval < H_FLOOR:
            return 1
        g[0] = _bilinear(DH0[i, j], DH0[i + 1, j], DH0[i, j + 1], DH0[i + 1, j + 1], u, v) / hval
        g[1] = _bilinear(DH1[i, j], DH1[i + 1, j], DH1[i, j + 1], DH1[i + 1, j + 1], u, v) / hval
        return 0
    if vok[i, j] == 0 or vok[i + 1, j] == 0 or vok[i, j + 1] == 0 or vok[i + 1, j + 1] == 0:
        return 1
    g[0] = -_bilinear(DV0[i, j], DV0[i + 1, j], DV0[i, j + 1], DV0[i + 1, j + 1], u, v) / eps2
    g[1] = -_bilinear(DV1[i, j], DV1[i + 1, j], DV1[i, j + 1], DV1[i + 1, j + 1], u, v) / eps2
    return 0


@njit(cache=True, nogil=True)
def euler_exit_kernel(
    x,
    steps_done,
    normals,
    dt,
    amp,
    coeffs,
    expons,
    has_gridh,
    gh_lo,
    gh_inv_d,
    gh_h,
    gh_dh0,
    gh_dh1,
    gh_v,
    gh_dv0,
    gh_dv1,
    gh_vok,
    eps2,
    a_mat,
    lo,
    hi,
    gamma_code,
    max_steps,
    snap_step,
    snap_out,
    hit_out,
):
    """Advance one trial through a block of normals.

    Returns ``(status, steps_done, face_code, theta)``. On STATUS_EXIT the
    crossing happened during step ``steps_done + 1`` at fraction ``theta``
    and ``hit_out`` holds the boundary point; face codes are
    ``2*axis + (0 lo | 1 hi)``.
    """
    n = x.shape[0]
    drift = np.empty(n)
    xn = np.empty(n)
    g = np.empty(2)
    for s in range(normals.shape[0]):
        _poly_eval_into(coeffs, expons, x, drift)
        if has_gridh:
            st = _gridh_log_gradient(
                x[0], x[1], gh_lo[0], gh_lo[1], gh_inv_d[0], gh_inv_d[1],
                gh_h, gh_dh0, gh_dh1, gh_v, gh_dv0, gh_dv1, gh_vok, eps2, g,
            )
            if st != 0:
                return STATUS_UNDERFLOW, steps_done, -1, 0.0
            for k in range(n):
                acc = 0.0
                for l in range(n):
                    acc += a_mat[k, l] * g[l]
                drift[k] += eps2 * acc

        big = 0.0
        for k in range(n):
            xn[k] = x[k] + drift[k] * dt + amp * normals[s, k]
            ab = abs(xn[k])
            if ab > big:
                big = ab

        theta_min = np.inf
        axis_hit = -1
        side_hit = 0
        for k in range(n):
            if xn[k] <= lo[k]:
                th = (lo[k] - x[k]) / (xn[k] - x[k])
                if th < theta_min:
                    theta_min = th
                    axis_hit = k
                    side_hit = 0
            elif xn[k] >= hi[k]:
                th = (hi[k] - x[k]) / (xn[k] - x[k])
                if th < theta_min:
                    theta_min = th
                    axis_hit = k
                    side_hit = 1
        if axis_hit >= 0:
            for k in range(n):
                hit_out[k] = x[k] + theta_min * (xn[k] - x[k])
            if side_hit == 0:
                hit_out[axis_hit] = lo[axis_hit]
            else:
                hit_out[axis_hit] = hi[axis_hit]
            face = 2 * axis_hit + side_hit
            if face == gamma_code:
                done = False
                for k in range(n):
                    if done:
                        break
                    for side in range(2):
                        fc = 2 * k + side
                        if fc == gamma_code:
                            continue
                        bound = lo[k] if side == 0 else hi[k]
                        if np.isfinite(bound) and abs(hit_out[k] - bound) <= CORNER_TOL:
                            hit_out[k] = bound
                            face = fc
                            done = True
                            break
            if 0 <= snap_step and steps_done < snap_step:
                for k in range(n):
                    snap_out[k] = hit_out[k]
            return STATUS_EXIT, steps_done, face, theta_min

        if big > GUARD_RADIUS:
            return STATUS_NONFINITE, steps_done, -1, 0.0

        for k in range(n):
            x[k] = xn[k]
        steps_done += 1
        if steps_done == snap_step:
            for k in range(n):
                snap_out[k] = x[k]
        if steps_done >= max_steps:
            return STATUS_TRUNCATED, steps_done, -1, 0.0
    return STATUS_RUNNING, steps_done, -1, 0.0


@njit(cache=True, nogil=True)
def gauss_seidel_sweeps_2d(h, a_e, a_w, a_n, a_s, a_diag, damp, n_sweeps, forward_first):
    """Damped point-relaxation sweeps, lexicographic then reverse, alternating.

    Boundary rows hold Dirichlet data and are never touched.
    """
    nx, ny = h.shape
    for sweep in range(n_sweeps):
        forward = (sweep % 2 == 0) == forward_first
        if forward:
            for i in range(1, nx - 1):
                for j in range(1, ny - 1):
                    val = (
                        a_e[i, j] * h[i + 1, j]
                        + a_w[i, j] * h[i - 1, j]
                        + a_n[i, j] * h[i, j + 1]
                        + a_s[i, j] * h[i, j - 1]
                    ) / a_diag[i, j]
                    w = damp[i, j]
                    h[i, j] = (1.0 - w) * h[i, j] + w * val
        else:
            for i in range(nx - 2, 0, -1):
                for j in range(ny - 2, 0, -1):
                    val = (
                        a_e[i, j] * h[i + 1, j]
                        + a_w[i, j] * h[i - 1, j]
                        + a_n[i, j] * h[i, j + 1]
                        + a_s[i, j] * h[i, j - 1]
                    ) / a_diag[i, j]
                    w = damp[i, j]
                    h[i, j] = (1.0 - w) * h[i, j] + w * val


@njit(cache=True, nogil=True)
def gauss_seidel_sweeps_1d(h, a_e, a_w, a_diag, damp, n_sweeps, forward_first):
    nx = h.shape[0]
    for sweep in range(n_sweeps):
        forward = (sweep % 2 == 0) == forward_first
        if forward:
            for i in range(1, nx - 1):
                val = (a_e[i] * h[i + 1] + a_w[i] * h[i - 1]) / a_diag[i]
                w = damp[i]
                h[i] = (1.0 - w) * h[i] + w * val
        else:
            for i in range(nx - 2, 0, -1):
                val = (a_e[i] * h[i + 1] + a_w[i] * h[i - 1]) / a_diag[i]
                w = damp[i]
                h[i] = (1.0 - w) * h[i] + w * val
