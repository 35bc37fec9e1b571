"""Predicted Gaussian law of the rescaled exit pair.

Under the limiting conditioned drift the path exits at a deterministic time T
and point z; the rescaled fluctuations (tau - T, X(tau) - z)/eps converge to
the image of the Gaussian vector

    phi = Phi(T) int_0^T Phi(s)^{-1} sigma(X(s)) dW(s)

under the decomposition of a vector at z into its component along the
limiting drift (time part, with a sign flip) and its tangential coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import simpson

from .dynamics import MatrixPath, flow_to_exit, variational_matrix
from .errors import NonTransversalError, OutsideRegionError, SingularPhiError
from .geometry import Domain, gamma_frame

PHI_DET_FLOOR = 1e-12
PROJECTION_DET_FLOOR = 1e-10


@dataclass(frozen=True)
class LimitLaw:
    """Deterministic exit data and the limit covariance of (u, w).

    ``P`` maps a fluctuation vector to (minus its drift coefficient, its
    tangential coordinates); ``Sigma_limit = P Sigma_phi P^T`` is the
    covariance of the rescaled (exit time, exit location) pair.
    """

    T: float
    z: np.ndarray
    b0bar_z: np.ndarray
    normal: np.ndarray
    basis: list
    Sigma_phi: np.ndarray
    P: np.ndarray
    Sigma_limit: np.ndarray

    @property
    def dim(self) -> int:
        return self.z.size

    def to_json_dict(self) -> dict:
        return {
            "T": self.T,
            "z": self.z.tolist(),
            "b0bar_z": self.b0bar_z.tolist(),
            "basis": [t.tolist() for t in self.basis],
            "Sigma_phi": self.Sigma_phi.tolist(),
            "P": self.P.tolist(),
            "Sigma_limit": self.Sigma_limit.tolist(),
        }


def phi_covariance(Phi: MatrixPath, a_along_path: Callable[[float], np.ndarray], T: float) -> np.ndarray:
    """Covariance of phi by composite Simpson quadrature on the stored grid.

    Sigma = Phi(T) [int_0^T Phi(s)^{-1} a(s) Phi(s)^{-T} ds] Phi(T)^T.
    Raises SingularPhiError when the linearization degenerates numerically.
    """
    times = Phi.times
    if times[-1] < T - 1e-9:
        raise ValueError("matrix path does not cover [0, T]")
    n = Phi.matrices.shape[-1]
    dets = np.linalg.det(Phi.matrices)
    if np.any(np.abs(dets) < PHI_DET_FLOOR):
        raise SingularPhiError(f"|det Phi| dropped to {np.min(np.abs(dets)):.3e}")
    inv = np.linalg.inv(Phi.matrices)
    integrand = np.empty((times.size, n, n))
    for i, s in enumerate(times):
        integrand[i] = inv[i] @ np.asarray(a_along_path(float(s)), dtype=float) @ inv[i].T
    inner = np.empty((n, n))
    for r in range(n):
        for c in range(n):
            inner[r, c] = simpson(integrand[:, r, c], x=times)
    phi_T = Phi.matrices[-1]
    sigma = phi_T @ inner @ phi_T.T
    return 0.5 * (sigma + sigma.T)


def projection_matrix(b0bar_z, tangent_basis) -> np.ndarray:
    """Matrix sending v to (-pi_b v, tangential coordinates of v).

    Solves v = c * b0bar(z) + sum_i alpha_i t_i; the first output row is -c,
    the rest are the alpha_i. Raises NonTransversalError when the drift at
    the exit point is (numerically) tangent to the face.
    """
    b0bar_z = np.asarray(b0bar_z, dtype=float)
    n = b0bar_z.size
    B = np.column_stack([b0bar_z] + [np.asarray(t, dtype=float) for t in tangent_basis])
    if B.shape != (n, n):
        raise ValueError("need n-1 tangent vectors for an n-dim domain")
    if abs(np.linalg.det(B)) < PROJECTION_DET_FLOOR:
        raise NonTransversalError("limiting drift is tangent to the exit face")
    sign = np.ones(n)
    sign[0] = -1.0
    return np.diag(sign) @ np.linalg.inv(B)


def build_limit_law(
    b0bar_field,
    b_model,
    a_matrix,
    x0,
    domain: Domain,
    dt_ode: float,
    t_max: float = 100.0,
) -> LimitLaw:
    """Assemble the limit law by flowing x0 to the exit face.

    ``b0bar_field`` is the limiting conditioned drift (callable with a
    ``jacobian`` attribute, e.g. hjb_characteristics.FanDriftField or a
    DriftFieldModel for analytically known cases). ``a_matrix`` is the
    constant diffusion matrix sigma sigma^T.
    """
    x0 = np.asarray(x0, dtype=float)
    a_matrix = np.asarray(a_matrix, dtype=float)
    traj = flow_to_exit(b0bar_field, x0, domain, dt_ode, t_max)
    if traj.face != domain.gamma_face:
        raise OutsideRegionError(
            f"limiting flow exits through {traj.face}, not the gamma face"
        )
    T, z = traj.exit_time, traj.exit_point

    jac = getattr(b0bar_field, "jacobian", None)
    if jac is None:
        raise ValueError("b0bar_field must expose a jacobian")
    phi = variational_matrix(jac, traj)
    sigma_phi = phi_covariance(phi, lambda s: a_matrix, T)

    normal, basis = gamma_frame(domain, z)
    b0bar_z = np.asarray(b0bar_field(z), dtype=float)
    if float(b0bar_z @ normal) <= 0:
        raise NonTransversalError("limiting drift does not exit through the face")
    P = projection_matrix(b0bar_z, basis)
    sigma_limit = P @ sigma_phi @ P.T
    sigma_limit = 0.5 * (sigma_limit + sigma_limit.T)
    return LimitLaw(float(T), z, b0bar_z, normal, basis, sigma_phi, P, sigma_limit)
