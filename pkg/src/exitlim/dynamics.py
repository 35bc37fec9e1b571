"""Analytic drift fields, deterministic flows, and matrix variational equations.

Drift fields are polynomial of total degree <= 3 (constant and affine fields
are special cases), so the Jacobian is available in closed form. Flows are
integrated with the classical fixed-step fourth-order Runge-Kutta method;
exit events are refined by bisection on the integrator time.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NoExitError
from .geometry import Domain, boundary_crossing, contains

EXIT_TIME_TOL = 1e-12


def monomial_exponents(dim: int, max_degree: int = 3) -> np.ndarray:
    """All exponent tuples with total degree <= max_degree, graded lexicographic."""
    rows = []
    for deg in range(max_degree + 1):
        for combo in itertools.product(range(deg + 1), repeat=dim):
            if sum(combo) == deg:
                rows.append(combo)
    return np.asarray(rows, dtype=np.int64)


@dataclass(frozen=True)
class DriftFieldModel:
    """Polynomial vector field b(x) with analytic Jacobian Db(x).

    ``coeffs[i, j]`` multiplies the monomial ``prod_k x_k**expons[j, k]`` in
    component i. Use the ``constant``/``affine``/``poly3`` constructors.
    """

    dim: int
    coeffs: np.ndarray  # (dim, n_terms)
    expons: np.ndarray  # (n_terms, dim)
    kind: str = "poly3"

    def __post_init__(self):
        coeffs = np.ascontiguousarray(np.atleast_2d(self.coeffs), dtype=float)
        expons = np.ascontiguousarray(np.atleast_2d(self.expons), dtype=np.int64)
        if coeffs.shape != (self.dim, expons.shape[0]) or expons.shape[1] != self.dim:
            raise ValueError("coefficient/exponent table shapes are inconsistent")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("drift coefficients must be finite")
        # Drop monomials that no component uses; keeps kernels tight.
        used = np.any(coeffs != 0.0, axis=0)
        if not np.any(used):
            used[0] = True
        object.__setattr__(self, "coeffs", coeffs[:, used].copy())
        object.__setattr__(self, "expons", expons[used].copy())

    @classmethod
    def constant(cls, values) -> "DriftFieldModel":
        values = np.asarray(values, dtype=float)
        dim = values.size
        return cls(dim, values.reshape(dim, 1), np.zeros((1, dim), dtype=np.int64), "constant")

    @classmethod
    def affine(cls, const, matrix) -> "DriftFieldModel":
        """b(x) = const + matrix @ x."""
        const = np.asarray(const, dtype=float)
        matrix = np.asarray(matrix, dtype=float)
        dim = const.size
        if matrix.shape != (dim, dim):
            raise ValueError("affine matrix must be square and match the constant part")
        expons = np.zeros((dim + 1, dim), dtype=np.int64)
        coeffs = np.zeros((dim, dim + 1))
        coeffs[:, 0] = const
        for k in range(dim):
            expons[1 + k, k] = 1
            coeffs[:, 1 + k] = matrix[:, k]
        return cls(dim, coeffs, expons, "affine")

    @classmethod
    def poly3(cls, dim: int, terms) -> "DriftFieldModel":
        """Build from ``(component, coefficient, exponent_tuple)`` triples."""
        exp_table = monomial_exponents(dim, 3)
        index = {tuple(row): j for j, row in enumerate(exp_table)}
        coeffs = np.zeros((dim, exp_table.shape[0]))
        for comp, coef, expo in terms:
            expo = tuple(int(e) for e in expo)
            if expo not in index:
                raise ValueError(f"exponent {expo} exceeds degree 3 or wrong arity")
            coeffs[int(comp), index[expo]] += float(coef)
        return cls(dim, coeffs, exp_table, "poly3")

    def __call__(self, x) -> np.ndarray:
        """Evaluate b(x); broadcasts over leading axes of ``x``."""
        x = np.asarray(x, dtype=float)
        powers = np.prod(x[..., None, :] ** self.expons, axis=-1)  # (..., m)
        return powers @ self.coeffs.T

    def jacobian(self, x) -> np.ndarray:
        """Analytic Jacobian Db(x) with Db[i, k] = d b_i / d x_k."""
        x = np.asarray(x, dtype=float)
        m, dim = self.expons.shape
        out = np.zeros(x.shape[:-1] + (dim, dim))
        for k in range(dim):
            e = self.expons.copy()
            fac = e[:, k].astype(float)
            e[:, k] = np.maximum(e[:, k] - 1, 0)
            powers = fac * np.prod(x[..., None, :] ** e, axis=-1)
            out[..., :, k] = powers @ self.coeffs.T
        return out

    def with_constant_offset(self, offset) -> "DriftFieldModel":
        """New field b(x) + offset (used to fold constant drift corrections)."""
        offset = np.asarray(offset, dtype=float)
        zero_row = np.where(~self.expons.any(axis=1))[0]
        coeffs = self.coeffs.copy()
        expons = self.expons
        if zero_row.size:
            coeffs[:, zero_row[0]] += offset
        else:
            coeffs = np.hstack([offset.reshape(self.dim, 1), coeffs])
            expons = np.vstack([np.zeros((1, self.dim), dtype=np.int64), expons])
        return DriftFieldModel(self.dim, coeffs, expons, self.kind)

    def kernel_spec(self):
        from .sde_sim import KernelDriftSpec

        return KernelDriftSpec(self.coeffs, self.expons)


def eval_drift(field: DriftFieldModel, x) -> np.ndarray:
    return field(x)


def eval_jacobian(field: DriftFieldModel, x) -> np.ndarray:
    return field.jacobian(x)


@dataclass(frozen=True)
class TrajectoryRecord:
    """Deterministic flow with uniform sampling and refined exit data.

    ``times``/``states``/``velocities`` sample the flow on the uniform grid up
    to the last interior node; ``exit_time``/``exit_point`` hold the refined
    boundary hit (``exit_velocity`` is the field there).
    """

    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray
    exit_time: float
    exit_point: np.ndarray
    exit_velocity: np.ndarray
    face: str

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0


@dataclass(frozen=True)
class MatrixPath:
    """Matrix-valued path M(t_i) along a trajectory; M at the first node is I."""

    times: np.ndarray
    matrices: np.ndarray  # (k, n, n)

    def at_end(self) -> np.ndarray:
        return self.matrices[-1]


def _rk4_step(field: Callable, x: np.ndarray, h: float) -> np.ndarray:
    k1 = field(x)
    k2 = field(x + 0.5 * h * k1)
    k3 = field(x + 0.5 * h * k2)
    k4 = field(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow_to_exit(
    field: Callable,
    x0,
    domain: Domain,
    dt_ode: float,
    t_max: float,
) -> TrajectoryRecord:
    """Integrate dx/dt = field(x) until the path leaves the domain.

    Fixed-step RK4; when a step segment crosses the boundary, the exit time is
    refined by bisection on the integrator step to 1e-12 in time. Raises
    NoExitError if ``t_max`` is reached while interior.
    """
    x = np.asarray(x0, dtype=float).copy()
    if not contains(domain, x):
        raise ValueError("flow start point must be interior")
    n_steps = int(np.ceil(t_max / dt_ode))
    times = [0.0]
    states = [x.copy()]
    velocities = [np.asarray(field(x), dtype=float)]
    for i in range(n_steps):
        x_new = _rk4_step(field, x, dt_ode)
        crossing = boundary_crossing(domain, x, x_new)
        if crossing is not None:
            lo_s, hi_s = 0.0, dt_ode
            x_hi = x_new
            while hi_s - lo_s > EXIT_TIME_TOL:
                mid = 0.5 * (lo_s + hi_s)
                x_mid = _rk4_step(field, x, mid)
                if contains(domain, x_mid):
                    lo_s = mid
                else:
                    hi_s, x_hi = mid, x_mid
            x_lo = _rk4_step(field, x, lo_s) if lo_s > 0.0 else x
            final = boundary_crossing(domain, x_lo, x_hi)
            if final is None:  # target sits within snap distance of the face
                final = crossing
                exit_t = i * dt_ode + hi_s
            else:
                exit_t = i * dt_ode + lo_s + final.theta * (hi_s - lo_s)
            z = final.point
            return TrajectoryRecord(
                np.asarray(times),
                np.asarray(states),
                np.asarray(velocities),
                float(exit_t),
                z,
                np.asarray(field(z), dtype=float),
                final.face,
            )
        x = x_new
        times.append((i + 1) * dt_ode)
        states.append(x.copy())
        velocities.append(np.asarray(field(x), dtype=float))
    raise NoExitError(f"flow still interior at t_max = {t_max}")


def _hermite(x0, v0, x1, v1, h: float, s: float):
    """Cubic Hermite state interpolation on one step, s in [0, h]."""
    u = s / h
    h00 = (1 + 2 * u) * (1 - u) ** 2
    h10 = u * (1 - u) ** 2
    h01 = u * u * (3 - 2 * u)
    h11 = u * u * (u - 1)
    return h00 * x0 + h * h10 * v0 + h01 * x1 + h * h11 * v1


def _integrate_matrix_path(
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray],
    trajectory: TrajectoryRecord,
) -> MatrixPath:
    """RK4 on dM/dt = rhs(x(t), M) with states interpolated along the trajectory."""
    n = trajectory.states.shape[1]
    nodes = list(trajectory.states)
    vels = list(trajectory.velocities)
    steps = [trajectory.dt] * (len(nodes) - 1)
    last = trajectory.exit_time - trajectory.times[-1]
    if last > 1e-14:
        nodes.append(trajectory.exit_point)
        vels.append(trajectory.exit_velocity)
        steps.append(last)

    mats = [np.eye(n)]
    out_times = [0.0]
    t = 0.0
    for i, h in enumerate(steps):
        x0, v0, x1, v1 = nodes[i], vels[i], nodes[i + 1], vels[i + 1]
        x_mid = _hermite(x0, v0, x1, v1, h, 0.5 * h)
        m = mats[-1]
        k1 = rhs(x0, m)
        k2 = rhs(x_mid, m + 0.5 * h * k1)
        k3 = rhs(x_mid, m + 0.5 * h * k2)
        k4 = rhs(x1, m + h * k3)
        mats.append(m + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        t += h
        out_times.append(t)
    return MatrixPath(np.asarray(out_times), np.asarray(mats))


def variational_matrix(field_jacobian: Callable, trajectory: TrajectoryRecord) -> MatrixPath:
    """Flow linearization: dPhi/dt = Db(x(t)) Phi, Phi(0) = I."""
    return _integrate_matrix_path(lambda x, m: field_jacobian(x) @ m, trajectory)


def fundamental_matrix_Y(b0_jacobian: Callable, trajectory: TrajectoryRecord) -> MatrixPath:
    """Adjoint fundamental matrix: dY/dt = -Y Db0(x(t))^T, Y(0) = I."""
    return _integrate_matrix_path(lambda x, m: -m @ b0_jacobian(x).T, trajectory)
