"""Euler-Maruyama simulation of dX = b dt + eps*sigma dW with boundary absorption.

Noise is isotropic: sigma = sigma_scale * I. Each trial owns a counter-based
random stream keyed by (master_seed, trial_index), so a batch outcome is a
deterministic function of the seed and the trial index set no matter how the
trials are scheduled across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .errors import NonFiniteError
from .geometry import Domain, boundary_crossing, contains, face_id

_NO_GRID = np.zeros((2, 2))
_NO_GRID_OK = np.zeros((2, 2), dtype=np.uint8)
_NO_VEC2 = np.zeros(2)


@dataclass(frozen=True)
class SimConfig:
    """Noise level, step size, truncation horizon, and noise scale s (sigma = s*I)."""

    eps: float
    dt: float
    t_max: float
    sigma_scale: float = 1.0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be nonnegative (eps = 0 is the deterministic limit)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_max < self.dt:
            raise ValueError("t_max must be at least one step")

    @property
    def max_steps(self) -> int:
        return int(np.ceil(self.t_max / self.dt - 1e-12))


@dataclass
class RngStream:
    """Counter-based normal variate stream for one trial.

    Streams with distinct (master_seed, stream_index) are independent;
    identical keys reproduce identical variate sequences from the start.
    """

    master_seed: int
    stream_index: int
    _gen: np.random.Generator = field(repr=False, default=None)

    def __post_init__(self):
        if self._gen is None:
            bitgen = np.random.Philox(key=[self.master_seed, self.stream_index])
            self._gen = np.random.Generator(bitgen)

    def normals(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)


def make_stream(master_seed: int, trial_index: int) -> RngStream:
    """Deterministic, independent stream for one trial of one experiment."""
    return RngStream(int(master_seed), int(trial_index))


@dataclass(frozen=True)
class ExitSample:
    """One trajectory's exit record.

    ``tau``/``exit_point`` are absent (None) when the path was truncated at
    the horizon. ``steps`` counts Euler steps taken, including the crossing
    step. ``snapshot`` is the state of the stopped path at the requested
    snapshot time, when one was requested.
    """

    trial: int
    tau: Optional[float]
    exit_point: Optional[np.ndarray]
    face: Optional[str]
    truncated: bool
    steps: int
    snapshot: Optional[np.ndarray] = None


@dataclass(frozen=True)
class KernelDriftSpec:
    """Drift description the compiled sampler understands.

    ``coeffs``/``expons`` give the polynomial part; ``gridh`` optionally adds
    the exit-probability correction eps^2 * a * Dh/h interpolated from grid
    arrays (see conditioning.HField.kernel_payload).
    """

    coeffs: np.ndarray
    expons: np.ndarray
    gridh: Optional[tuple] = None  # (lo, inv_d, H, DH0, DH1, V, DV0, DV1, vok)
    eps2: float = 0.0
    a_mat: Optional[np.ndarray] = None


def _kernel_spec(drift) -> Optional[KernelDriftSpec]:
    spec = getattr(drift, "kernel_spec", None)
    if callable(spec):
        spec = spec()
    return spec if isinstance(spec, KernelDriftSpec) else None


def _domain_arrays(domain: Domain):
    lo, hi = domain.bounds()
    axis = domain.gamma_axis
    side = 0 if domain.gamma_face.endswith("lo") else 1
    return lo, hi, 2 * axis + side


def _face_from_code(code: int) -> str:
    return face_id(code // 2, "lo" if code % 2 == 0 else "hi")


def _block_len(block_index: int, remaining: int) -> int:
    return int(min(remaining, 65536, 4096 << min(block_index, 4)))


def simulate_exit(
    drift: Callable,
    cfg: SimConfig,
    x0,
    domain: Domain,
    stream: RngStream,
    snap_time: Optional[float] = None,
) -> ExitSample:
    """Run one trial to absorption or truncation.

    One standard-normal draw per coordinate per step; the exit time is the
    linear crossing fraction of the final step segment. Raises NonFiniteError
    if the state leaves the guard box of radius 1e6.
    """
    x = np.asarray(x0, dtype=float)
    if not contains(domain, x):
        raise ValueError("start point must be interior")
    spec = _kernel_spec(drift)
    if spec is not None:
        return _simulate_kernel(spec, cfg, x, domain, stream, snap_time)
    return _simulate_python(drift, cfg, x, domain, stream, snap_time)


def _snap_step_of(cfg: SimConfig, snap_time: Optional[float]) -> int:
    if snap_time is None:
        return -1
    return max(0, int(round(snap_time / cfg.dt)))


def _simulate_kernel(
    spec: KernelDriftSpec,
    cfg: SimConfig,
    x0: np.ndarray,
    domain: Domain,
    stream: RngStream,
    snap_time: Optional[float],
) -> ExitSample:
    n = x0.size
    x = x0.copy()
    lo, hi, gamma_code = _domain_arrays(domain)
    amp = cfg.eps * cfg.sigma_scale * np.sqrt(cfg.dt)
    max_steps = cfg.max_steps
    snap_step = _snap_step_of(cfg, snap_time)
    snap_out = np.full(n, np.nan)
    hit_out = np.empty(n)
    if snap_step == 0:
        snap_out[:] = x

    if spec.gridh is not None:
        gh_lo, gh_inv_d, H, DH0, DH1, V, DV0, DV1, vok = spec.gridh
        has_gridh = True
        a_mat = spec.a_mat
    else:
        gh_lo, gh_inv_d = _NO_VEC2, _NO_VEC2
        H = DH0 = DH1 = V = DV0 = DV1 = _NO_GRID
        vok = _NO_GRID_OK
        has_gridh = False
        a_mat = np.eye(n)

    steps = 0
    block_index = 0
    while True:
        blk = _block_len(block_index, max_steps - steps)
        block_index += 1
        normals = stream.normals((blk, n))
        status, steps, face_code, theta = K.euler_exit_kernel(
            x, steps, normals, cfg.dt, amp,
            spec.coeffs, spec.expons,
            has_gridh, gh_lo, gh_inv_d, H, DH0, DH1, V, DV0, DV1, vok,
            spec.eps2, a_mat, lo, hi, gamma_code,
            max_steps, snap_step, snap_out, hit_out,
        )
        if status == K.STATUS_RUNNING:
            continue
        snap = None if snap_step < 0 else snap_out.copy()
        if status == K.STATUS_EXIT:
            tau = (steps + theta) * cfg.dt
            return ExitSample(
                stream.stream_index, float(tau), hit_out.copy(),
                _face_from_code(face_code), False, steps + 1, snap,
            )
        if status == K.STATUS_TRUNCATED:
            return ExitSample(stream.stream_index, None, None, None, True, steps, snap)
        if status == K.STATUS_NONFINITE:
            raise NonFiniteError("state left the guard box; drift may be blowing up")
        from .errors import HUnderflowError

        raise HUnderflowError("exit-probability underflow while evaluating the drift")


def _simulate_python(
    drift: Callable,
    cfg: SimConfig,
    x0: np.ndarray,
    domain: Domain,
    stream: RngStream,
    snap_time: Optional[float],
) -> ExitSample:
    """Reference path for arbitrary Python drift callables.

    Consumes variates in the same block layout as the compiled path so a
    given (seed, trial) sees the same noise either way.
    """
    n = x0.size
    x = x0.copy()
    amp = cfg.eps * cfg.sigma_scale * np.sqrt(cfg.dt)
    max_steps = cfg.max_steps
    snap_step = _snap_step_of(cfg, snap_time)
    snap = x.copy() if snap_step == 0 else None

    steps = 0
    block_index = 0
    while steps < max_steps:
        blk = _block_len(block_index, max_steps - steps)
        block_index += 1
        normals = stream.normals((blk, n))
        for s in range(blk):
            x_new = x + np.asarray(drift(x), dtype=float) * cfg.dt + amp * normals[s]
            crossing = boundary_crossing(domain, x, x_new)
            if crossing is not None:
                tau = (steps + crossing.theta) * cfg.dt
                if 0 <= snap_step and steps < snap_step:
                    snap = crossing.point.copy()
                return ExitSample(
                    stream.stream_index, float(tau), crossing.point,
                    crossing.face, False, steps + 1, snap,
                )
            if np.max(np.abs(x_new)) > K.GUARD_RADIUS:
                raise NonFiniteError("state left the guard box; drift may be blowing up")
            x = x_new
            steps += 1
            if steps == snap_step:
                snap = x.copy()
            if steps >= max_steps:
                break
    return ExitSample(stream.stream_index, None, None, None, True, steps, snap)


def simulate_batch(
    drift: Callable,
    cfg: SimConfig,
    x0,
    domain: Domain,
    master_seed: int,
    n_trials: int,
    first_trial: int = 0,
    snap_time: Optional[float] = None,
    workers: int = 1,
) -> list[ExitSample]:
    """Simulate trials ``first_trial .. first_trial + n_trials - 1``.

    The result is sorted by trial index and is invariant to ``workers``.
    """
    trials = range(first_trial, first_trial + n_trials)

    def one(i: int) -> ExitSample:
        return simulate_exit(drift, cfg, x0, domain, make_stream(master_seed, i), snap_time)

    if workers <= 1 or n_trials < 4:
        return [one(i) for i in trials]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, trials))
