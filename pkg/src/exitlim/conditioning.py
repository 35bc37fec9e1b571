"""Conditioning on the gamma-exit event: rejection and h-transform sampling.

The drift of the conditioned process is b + eps^2 a Dh/h where h(x) is the
probability of exiting through gamma; equivalently b - a Dv with
v = -eps^2 log h. Both the exact half-plane h and grid solutions from the
elliptic solver are supported.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import DriftFieldModel
from .errors import AcceptanceTooLowError, HUnderflowError
from .geometry import Box, Domain, HalfSpace
from .hjb_elliptic import GridField, gradient_field, hopf_cole
from .sde_sim import ExitSample, KernelDriftSpec, SimConfig, simulate_batch

H_FLOOR = 1e-290
H_LOG_SWITCH = 1e-30


@dataclass(frozen=True)
class HField:
    """Positive exit-probability field with value/gradient handles.

    ``grad_log`` evaluates Dh/h; for grid sources it switches to the
    logarithmic representation -Dv/eps^2 wherever the local h stencil drops
    below 1e-30, which keeps the conditioned drift finite deep in the
    unlikely region.
    """

    value: Callable
    gradient: Callable
    grad_log: Callable
    source: str
    eps: float
    sigma2: float = 1.0
    kernel_payload: Optional[tuple] = None
    constant_grad_log: Optional[np.ndarray] = None

    @classmethod
    def analytic_halfplane(
        cls, domain: HalfSpace, drift_normal: float, eps: float, sigma2: float = 1.0
    ) -> "HField":
        """Exact h for a half-space with constant drift.

        ``drift_normal`` is the constant drift component along the gamma axis;
        it must push away from the boundary, so h = exp(-2 b_k (x_k - c) /
        (eps^2 sigma2)) decays into the interior.
        """
        axis, level, side = domain.axis, domain.level, domain.side
        if side * drift_normal <= 0:
            raise ValueError("analytic half-plane h needs drift pointing away from gamma")
        rate = 2.0 * drift_normal / (eps * eps * sigma2)
        glog = np.zeros(domain.dim)
        glog[axis] = -rate

        def value(x):
            x = np.asarray(x, dtype=float)
            return np.exp(-rate * (x[..., axis] - level))

        def gradient(x):
            x = np.asarray(x, dtype=float)
            return value(x)[..., None] * glog

        def grad_log(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(glog, x.shape).copy()

        return cls(value, gradient, grad_log, "analytic_halfplane", eps, sigma2,
                   constant_grad_log=glog)

    @classmethod
    def from_grid(cls, h_grid: GridField, eps: float, sigma2: float = 1.0) -> "HField":
        """Interpolated field from an elliptic solve.

        Node gradients use central differences (one-sided at faces) and are
        interpolated bilinearly; the same holds for v = -eps^2 log h, which
        backs the logarithmic branch of ``grad_log``. The zero-Dirichlet
        boundary ring (where v is formally infinite) is filled by linear
        extrapolation so near-face cells keep a finite repelling drift; rare
        crossings there surface as counted anomalies downstream. Interior
        nodes whose h genuinely underflowed stay invalid.
        """
        dh = gradient_field(h_grid)
        v_raw = hopf_cole(h_grid, eps)
        v_filled, v_node_ok = _fill_boundary_ring(v_raw.values, v_raw.valid)
        v_grid = GridField(h_grid.lo, h_grid.hi, v_filled, v_node_ok)
        dv = gradient_field(v_grid)
        dv_vals = [np.where(g.valid, g.values, 0.0) for g in dv]
        v_ok = np.logical_and.reduce([g.valid for g in dv])

        def value(x):
            return h_grid.interp(x)

        def gradient(x):
            x = np.asarray(x, dtype=float)
            comps = [g.interp(x) for g in dh]
            return np.stack(comps, axis=-1)

        def grad_log(x):
            x = np.asarray(x, dtype=float)
            scalar = x.ndim == 1
            pts = np.atleast_2d(x)
            stencil_min = _stencil_min(h_grid, pts)
            out = np.empty_like(pts)
            direct = stencil_min >= H_LOG_SWITCH
            if np.any(direct):
                hv = h_grid.interp(pts[direct])
                if np.any(hv < H_FLOOR):
                    raise HUnderflowError("exit probability below 1e-290 at an evaluation point")
                g = np.stack([g_.interp(pts[direct]) for g_ in dh], axis=-1)
                out[direct] = g / hv[..., None]
            if np.any(~direct):
                sub = pts[~direct]
                if not np.all(_stencil_all_valid(v_ok, h_grid, sub)):
                    raise HUnderflowError(
                        "exit probability underflowed and no logarithmic data is available"
                    )
                gv = np.stack(
                    [GridField(h_grid.lo, h_grid.hi, dvk, v_ok).interp(sub) for dvk in dv_vals],
                    axis=-1,
                )
                out[~direct] = -gv / (eps * eps)
            return out[0] if scalar else out

        payload = None
        if h_grid.dim == 2:
            inv_d = np.ascontiguousarray(1.0 / h_grid.spacing)
            payload = (
                np.ascontiguousarray(h_grid.lo),
                inv_d,
                np.ascontiguousarray(h_grid.values),
                np.ascontiguousarray(dh[0].values),
                np.ascontiguousarray(dh[1].values),
                np.ascontiguousarray(np.where(v_grid.valid, v_grid.values, 0.0)),
                np.ascontiguousarray(dv_vals[0]),
                np.ascontiguousarray(dv_vals[1]),
                np.ascontiguousarray(v_ok.astype(np.uint8)),
            )
        return cls(value, gradient, grad_log, "grid", eps, sigma2, kernel_payload=payload)

    @classmethod
    def constant(cls, c: float, dim: int, eps: float) -> "HField":
        """Constant field (trivial conditioning; the drift is unchanged)."""

        def value(x):
            x = np.asarray(x, dtype=float)
            return np.full(x.shape[:-1], float(c))

        def grad(x):
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape)

        return cls(value, grad, grad, "constant", eps,
                   constant_grad_log=np.zeros(dim))


def _fill_boundary_ring(values: np.ndarray, valid: np.ndarray):
    """Extrapolate the log-field onto invalid grid-boundary nodes.

    Near a zero-Dirichlet face h vanishes linearly, so v jumps by
    eps^2 log 2 between the last two interior nodes; the linear extrapolation
    2 v1 - v2 reproduces exactly that step and keeps the face repelling
    without blowing up the interpolated drift.
    """
    v = values.copy()
    ok = valid.copy()
    dim = v.ndim
    for _ in range(2):  # second pass catches corners
        for axis in range(dim):
            for side in (0, -1):
                face = [slice(None)] * dim
                in1 = [slice(None)] * dim
                in2 = [slice(None)] * dim
                face[axis] = side
                in1[axis] = 1 if side == 0 else -2
                in2[axis] = 2 if side == 0 else -3
                face, in1, in2 = tuple(face), tuple(in1), tuple(in2)
                can = ~ok[face] & ok[in1] & ok[in2]
                with np.errstate(invalid="ignore"):  # inf - inf on discarded lanes
                    v[face] = np.where(can, 2.0 * v[in1] - v[in2], v[face])
                ok[face] = ok[face] | can
    return v, ok


def _stencil_min(grid: GridField, pts: np.ndarray) -> np.ndarray:
    """Minimum of the interpolation stencil values at each point."""
    frac = (pts - grid.lo) / grid.spacing
    if grid.dim == 1:
        i = np.clip(np.floor(frac[:, 0]).astype(int), 0, grid.shape[0] - 2)
        return np.minimum(grid.values[i], grid.values[i + 1])
    i = np.clip(np.floor(frac[:, 0]).astype(int), 0, grid.shape[0] - 2)
    j = np.clip(np.floor(frac[:, 1]).astype(int), 0, grid.shape[1] - 2)
    vals = np.stack(
        [grid.values[i, j], grid.values[i + 1, j], grid.values[i, j + 1], grid.values[i + 1, j + 1]]
    )
    return vals.min(axis=0)


def _stencil_all_valid(ok: np.ndarray, grid: GridField, pts: np.ndarray) -> np.ndarray:
    frac = (pts - grid.lo) / grid.spacing
    if grid.dim == 1:
        i = np.clip(np.floor(frac[:, 0]).astype(int), 0, grid.shape[0] - 2)
        return ok[i] & ok[i + 1]
    i = np.clip(np.floor(frac[:, 0]).astype(int), 0, grid.shape[0] - 2)
    j = np.clip(np.floor(frac[:, 1]).astype(int), 0, grid.shape[1] - 2)
    return ok[i, j] & ok[i + 1, j] & ok[i, j + 1] & ok[i + 1, j + 1]


@dataclass(frozen=True)
class HTransformDrift:
    """Conditioned drift b(x) + eps^2 a Dh(x)/h(x), callable on points."""

    base: Callable
    a_matrix: np.ndarray
    h: HField
    eps: float
    _spec: Optional[KernelDriftSpec] = None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        corr = (self.eps * self.eps) * (self.h.grad_log(x) @ self.a_matrix.T)
        return np.asarray(self.base(x), dtype=float) + corr

    def kernel_spec(self) -> Optional[KernelDriftSpec]:
        return self._spec


def h_transform_drift(b, a_matrix, h: HField, eps: float) -> HTransformDrift:
    """Drift of the process conditioned to exit through gamma.

    With a constant-log-gradient h (half-plane, constant field) the
    correction folds into the polynomial drift, so the sampler sees an exact
    eps-independent field. Grid-backed h raises HUnderflowError whenever an
    evaluation lands where h < 1e-290 and no logarithmic data exists.
    """
    a_matrix = np.asarray(a_matrix, dtype=float)
    spec = None
    if isinstance(b, DriftFieldModel):
        if h.constant_grad_log is not None:
            corr = (eps * eps) * (a_matrix @ h.constant_grad_log)
            folded = b.with_constant_offset(corr)
            spec = KernelDriftSpec(folded.coeffs, folded.expons)
        elif h.kernel_payload is not None:
            spec = KernelDriftSpec(
                b.coeffs, b.expons, gridh=h.kernel_payload, eps2=eps * eps,
                a_mat=np.ascontiguousarray(a_matrix),
            )
    return HTransformDrift(b, a_matrix, h, eps, spec)


@dataclass(frozen=True)
class ConditionedBatch:
    """Accepted exit samples plus bookkeeping for the conditioning step."""

    samples: list[ExitSample]
    attempted: int
    acceptance_rate: float
    truncated_count: int
    anomalous_count: int
    eps: float
    x0: np.ndarray
    mode: str

    @property
    def taus(self) -> np.ndarray:
        return np.array([s.tau for s in self.samples])

    @property
    def exit_points(self) -> np.ndarray:
        return np.array([s.exit_point for s in self.samples])


def rejection_sample(
    b,
    cfg: SimConfig,
    x0,
    domain: Domain,
    n_target: int,
    max_trials: int,
    seed: int,
    workers: int = 1,
) -> ConditionedBatch:
    """Sample the conditioned exit law by brute-force rejection.

    Runs the original drift on streams (seed, 0..) and keeps trajectories
    that exit through gamma before the horizon. The acceptance rate is a
    Monte Carlo estimate of h(x0). Raises AcceptanceTooLowError (with the
    partial batch attached) when ``max_trials`` is exhausted first.
    """
    if n_target < 1:
        raise ValueError("n_target must be at least 1")
    x0 = np.asarray(x0, dtype=float)
    collected = _collect_until(
        b, cfg, x0, domain, n_target, max_trials, seed, workers, "rejection"
    )
    if len(collected.samples) >= n_target:
        return collected
    raise AcceptanceTooLowError(
        f"only {len(collected.samples)}/{n_target} accepted after {collected.attempted} trials",
        batch=collected,
    )


def conditioned_sample_via_h(
    b,
    a_matrix,
    h: HField,
    cfg: SimConfig,
    x0,
    domain: Domain,
    n_target: int,
    seed: int,
    workers: int = 1,
    max_trials: Optional[int] = None,
) -> ConditionedBatch:
    """Sample exits with the h-transformed drift.

    The conditioned process exits through gamma almost surely, so every
    non-truncated trajectory is accepted; stray non-gamma exits (a
    discretization artifact) are excluded and counted as anomalies.
    """
    if n_target < 1:
        raise ValueError("n_target must be at least 1")
    x0 = np.asarray(x0, dtype=float)
    drift = h_transform_drift(b, a_matrix, h, cfg.eps)
    if max_trials is None:
        max_trials = 2 * n_target + 1000
    collected = _collect_until(
        drift, cfg, x0, domain, n_target, max_trials, seed, workers, "htransform"
    )
    if len(collected.samples) >= n_target:
        return collected
    raise AcceptanceTooLowError(
        f"only {len(collected.samples)}/{n_target} conditioned exits after "
        f"{collected.attempted} trials",
        batch=collected,
    )


def _collect_until(
    drift,
    cfg: SimConfig,
    x0: np.ndarray,
    domain: Domain,
    n_target: int,
    max_trials: int,
    seed: int,
    workers: int,
    mode: str,
) -> ConditionedBatch:
    """Simulate trials 0.. in chunks and cut at the exact prefix holding the
    n_target-th gamma exit, so the attempted count is worker-invariant.

    Only accepted samples are retained; rejects contribute flags.
    """
    gamma = domain.gamma_face
    chunk = max(64, min(8192, 4 * n_target))
    accepted: list[ExitSample] = []
    accept_flags: list[bool] = []
    trunc_flags: list[bool] = []
    simulated = 0
    while simulated < max_trials:
        n_now = min(chunk, max_trials - simulated)
        batch = simulate_batch(drift, cfg, x0, domain, seed, n_now, first_trial=simulated,
                               workers=workers)
        simulated += n_now
        for s in batch:
            ok = (not s.truncated) and s.face == gamma
            accept_flags.append(ok)
            trunc_flags.append(s.truncated)
            if ok:
                accepted.append(s)
        if len(accepted) >= n_target:
            cum = np.cumsum(accept_flags)
            cut = int(np.searchsorted(cum, n_target)) + 1
            kept = [s for s in accepted if s.trial < cut]
            truncated = int(np.sum(trunc_flags[:cut]))
            anomalous = cut - len(kept) - truncated if mode == "htransform" else 0
            return ConditionedBatch(
                kept, cut, len(kept) / cut, truncated, anomalous, cfg.eps, x0, mode
            )
    truncated = int(np.sum(trunc_flags))
    anomalous = simulated - len(accepted) - truncated if mode == "htransform" else 0
    return ConditionedBatch(
        accepted, simulated, len(accepted) / max(simulated, 1), truncated,
        anomalous, cfg.eps, x0, mode,
    )


def kernel_ratio_check(
    b,
    a_matrix,
    h: HField,
    cfg: SimConfig,
    x0,
    domain: Domain,
    t_check: float,
    n: int,
    seed: int,
    workers: int = 1,
) -> dict:
    """Compare two estimates of the conditioned time-t marginal.

    Route A: states at ``t_check`` of rejection-conditioned paths. Route B:
    states of unconditioned paths reweighted by h(X(t_check)) / h(x0) (the
    stopped state is used once a path has been absorbed). Reports the
    per-coordinate weighted Kolmogorov-Smirnov discrepancy and z-scores of
    the two cumulative estimates on ten interior quantiles.
    """
    x0 = np.asarray(x0, dtype=float)
    gamma = domain.gamma_face
    snaps_a = []
    first = 0
    while len(snaps_a) < n:
        todo = max(n - len(snaps_a), 64)
        batch = simulate_batch(b, cfg, x0, domain, seed, int(todo * 1.2) + 32,
                               first_trial=first, snap_time=t_check, workers=workers)
        first += len(batch)
        for s in batch:
            if (not s.truncated) and s.face == gamma:
                snaps_a.append(s.snapshot)
        if first > 200 * n + 10_000:
            break
    snaps_a = np.asarray(snaps_a[:n])

    cfg_b = replace(cfg, t_max=max(t_check, cfg.dt))
    batch_b = simulate_batch(b, cfg_b, x0, domain, seed, n, first_trial=2**32,
                             snap_time=t_check, workers=workers)
    snaps_b = np.asarray([s.snapshot for s in batch_b])
    h0 = float(h.value(x0))
    weights = np.asarray(h.value(snaps_b), dtype=float) / h0
    wsum = float(weights.sum())
    ess = wsum * wsum / float((weights**2).sum()) if wsum > 0 else 0.0

    report = {
        "n_conditioned": int(snaps_a.shape[0]),
        "n_weighted": int(snaps_b.shape[0]),
        "weight_mean": wsum / max(len(weights), 1),
        "ess_weighted": ess,
        "coords": [],
    }
    probs = (np.arange(1, 11) - 0.5) / 10.0
    for k in range(x0.size):
        a_k = np.sort(snaps_a[:, k])
        b_k = snaps_b[:, k]
        order = np.argsort(b_k)
        b_sorted = b_k[order]
        w_sorted = weights[order]
        wcum = np.cumsum(w_sorted) / wsum

        pooled = np.concatenate([a_k, b_sorted])
        fa = np.searchsorted(a_k, pooled, side="right") / a_k.size
        fb = wcum[np.clip(np.searchsorted(b_sorted, pooled, side="right") - 1, 0, len(wcum) - 1)]
        fb = np.where(pooled < b_sorted[0], 0.0, fb)
        ks = float(np.max(np.abs(fa - fb)))

        qs = np.quantile(pooled, probs)
        fa_q = np.searchsorted(a_k, qs, side="right") / a_k.size
        idx = np.clip(np.searchsorted(b_sorted, qs, side="right") - 1, 0, len(wcum) - 1)
        fb_q = np.where(qs < b_sorted[0], 0.0, wcum[idx])
        fbar = 0.5 * (fa_q + fb_q)
        var_a = fbar * (1 - fbar) / a_k.size
        var_b = fbar * (1 - fbar) * float((weights**2).sum()) / wsum**2
        z = np.abs(fa_q - fb_q) / np.sqrt(var_a + var_b + 1e-300)
        report["coords"].append(
            {"ks": ks, "quantile_z_max": float(np.max(z)), "quantile_z": z.tolist()}
        )
    return report
