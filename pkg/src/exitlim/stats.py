"""Empirical rescaling of exit samples and Gaussian goodness-of-fit checks.

The rescaled pair is u = (tau - T)/eps and the tangential coordinates
w = <exit - z, t_i>/eps; under the limit law (u, w) is centered Gaussian
with covariance ``LimitLaw.Sigma_limit``. Covariance standard errors use a
delete-one-block jackknife (20 blocks), which stays honest under the mild
non-Gaussianity at finite eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammainc

from .conditioning import ConditionedBatch
from .errors import DegeneratePredictionError, MalformedExitPointError
from .scaling_limit import LimitLaw

JACKKNIFE_BLOCKS = 20
KS_SERIES_TERMS = 100
NORMAL_OFFPLANE_TOL = 1e-9
DEFAULT_Z_MAX = 4.0
DEFAULT_P_MIN = 1e-3


@dataclass(frozen=True)
class RescaledSample:
    """Rescaled exit fluctuation: time part u and tangential coordinates w."""

    u: float
    w: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.u], self.w])


def rescale(batch: ConditionedBatch, law: LimitLaw) -> list[RescaledSample]:
    """Rescale accepted exit samples by the limit law's (T, z, eps).

    Exit points must lie on the gamma hyperplane: a normal component beyond
    1e-9 raises MalformedExitPointError.
    """
    eps = batch.eps
    out = []
    for s in batch.samples:
        dx = np.asarray(s.exit_point, dtype=float) - law.z
        off = float(dx @ law.normal)
        if abs(off) > NORMAL_OFFPLANE_TOL:
            raise MalformedExitPointError(
                f"exit point {s.exit_point} lies {off:.2e} off the gamma hyperplane"
            )
        u = (s.tau - law.T) / eps
        w = np.array([float(dx @ t) for t in law.basis]) / eps
        out.append(RescaledSample(float(u), w))
    return out


def unrescale(sample: RescaledSample, law: LimitLaw, eps: float) -> tuple[float, np.ndarray]:
    """Invert :func:`rescale` (tau, exit point)."""
    tau = law.T + eps * sample.u
    point = law.z.copy()
    for wi, t in zip(sample.w, law.basis):
        point = point + eps * wi * t
    return float(tau), point


def samples_matrix(samples: Iterable[RescaledSample] | np.ndarray) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return np.atleast_2d(samples)
    return np.array([s.vector() for s in samples])


@dataclass(frozen=True)
class ComparisonReport:
    """Gaussian comparison result with per-criterion pass flags."""

    n: int
    mean: np.ndarray
    mean_se: np.ndarray
    mean_z: np.ndarray
    cov: np.ndarray
    cov_se: np.ndarray
    cov_z: np.ndarray
    ks_marginals: list
    ks_mahalanobis: dict
    thresholds: dict
    passed: dict = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "mean": self.mean.tolist(),
            "mean_se": self.mean_se.tolist(),
            "mean_z": self.mean_z.tolist(),
            "cov": self.cov.tolist(),
            "cov_se": self.cov_se.tolist(),
            "cov_z": self.cov_z.tolist(),
            "ks_marginals": self.ks_marginals,
            "ks_mahalanobis": self.ks_mahalanobis,
            "thresholds": self.thresholds,
            "pass": {**self.passed, "all": self.all_passed},
        }


def _norm_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(x) / math.sqrt(2.0)))


def _chi2_cdf(x: np.ndarray, dof: int) -> np.ndarray:
    return gammainc(dof / 2.0, np.asarray(x) / 2.0)


def kolmogorov_sf(lam: float, terms: int = KS_SERIES_TERMS) -> float:
    """Asymptotic Kolmogorov survival function (series truncated at 100 terms)."""
    if lam <= 1e-8:
        return 1.0
    total = 0.0
    for k in range(1, terms + 1):
        total += (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
    return float(min(max(2.0 * total, 0.0), 1.0))


def ks_one_sample(values: np.ndarray, cdf) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    f = np.asarray(cdf(x), dtype=float)
    d_plus = np.max(np.arange(1, n + 1) / n - f)
    d_minus = np.max(f - np.arange(0, n) / n)
    d = max(d_plus, d_minus)
    return float(d), kolmogorov_sf(math.sqrt(n) * d)


def two_sample_ks(a, b) -> tuple[float, float]:
    """Two-sample KS statistic with the asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    d = float(np.max(np.abs(fa - fb)))
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    return d, kolmogorov_sf(en * d)


def _canonical_permutation(data: np.ndarray) -> np.ndarray:
    """Deterministic shuffle derived from the sample values themselves.

    Jackknife blocks must be exchangeable, so they are formed after a
    pseudo-random permutation; seeding it from a hash of the sorted values
    makes the report invariant under relabeling of the input order.
    """
    import hashlib

    order = np.lexsort(data.T[::-1])
    digest = hashlib.sha256(np.ascontiguousarray(data[order]).tobytes()).digest()
    seed = int.from_bytes(digest[:8], "little")
    return order[np.random.default_rng(seed).permutation(data.shape[0])]


def _jackknife_cov_se(data: np.ndarray, blocks: int = JACKKNIFE_BLOCKS) -> np.ndarray:
    """Delete-one-block jackknife standard errors for covariance entries."""
    n, d = data.shape
    blocks = min(blocks, n)
    shuffled = data[_canonical_permutation(data)]
    idx = np.array_split(np.arange(n), blocks)
    thetas = np.empty((blocks, d, d))
    for i, block in enumerate(idx):
        rest = np.delete(np.arange(n), block)
        thetas[i] = np.cov(shuffled[rest].T, bias=False).reshape(d, d)
    mean = thetas.mean(axis=0)
    var = (blocks - 1) / blocks * np.sum((thetas - mean) ** 2, axis=0)
    return np.sqrt(var)


def gaussian_comparison(
    samples,
    law: LimitLaw,
    z_max: float = DEFAULT_Z_MAX,
    p_min: float = DEFAULT_P_MIN,
    p_min_mahalanobis: float = DEFAULT_P_MIN,
) -> ComparisonReport:
    """Test rescaled samples against the predicted centered Gaussian.

    Performs per-entry covariance z-tests (jackknife SEs), one-sample KS of
    each marginal against N(0, Sigma_kk), and a KS test of the squared
    Mahalanobis distances against the chi-square law. Raises
    DegeneratePredictionError when the predicted covariance is singular.
    """
    data = samples_matrix(samples)
    n, d = data.shape
    if n < 100:
        raise ValueError("need at least 100 samples for the Gaussian comparison")
    sigma = law.Sigma_limit
    eigs = np.linalg.eigvalsh(sigma)
    if np.min(eigs) < 1e-12:
        raise DegeneratePredictionError(f"predicted covariance eigenvalue {np.min(eigs):.3e}")

    mean = data.mean(axis=0)
    mean_se = data.std(axis=0, ddof=1) / math.sqrt(n)
    mean_z = np.abs(mean) / mean_se

    cov = np.cov(data.T, bias=False).reshape(d, d)
    cov_se = _jackknife_cov_se(data)
    cov_z = np.abs(cov - sigma) / cov_se

    ks_marginals = []
    for k in range(d):
        sd = math.sqrt(sigma[k, k])
        stat, p = ks_one_sample(data[:, k], lambda x: _norm_cdf(x / sd))
        ks_marginals.append({"coord": k, "stat": stat, "p": p})

    m2 = np.einsum("ij,jk,ik->i", data, np.linalg.inv(sigma), data)
    stat_m, p_m = ks_one_sample(m2, lambda x: _chi2_cdf(x, d))
    ks_mahalanobis = {"stat": stat_m, "p": p_m}

    thresholds = {"z_max": z_max, "p_min": p_min, "p_min_mahalanobis": p_min_mahalanobis}
    passed = {
        "cov_z": bool(np.max(cov_z) <= z_max),
        "ks_marginals": all(e["p"] >= p_min for e in ks_marginals),
        "ks_mahalanobis": bool(p_m >= p_min_mahalanobis),
    }
    return ComparisonReport(
        n, mean, mean_se, mean_z, cov, cov_se, cov_z,
        ks_marginals, ks_mahalanobis, thresholds, passed,
    )
