"""Randomized-smoothing prediction and l2 certification.

Radii use the one-sided bound R = sigma * phi_inv(pA_lower), where pA_lower is
a Clopper-Pearson lower confidence bound on the top-class probability.
"""
from __future__ import annotations

import csv
import functools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import binomtest

from .network import BNMode, Network, adapt


class _Abstain:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "ABSTAIN"

    def __reduce__(self):
        return (_Abstain, ())


ABSTAIN = _Abstain()


# ---------------------------------------------------------------- normal quantile

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / _SQRT2)


def _lower_quantile(p: float) -> float:
    # p in (0, 0.5]: rational initial guess, then one Halley step on erfc
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    e = 0.5 * math.erfc(-x / _SQRT2) - p
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def phi_inv(p: float) -> float:
    """Standard normal quantile for 0 < p < 1."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"phi_inv needs 0 < p < 1, got {p}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return _lower_quantile(p)
    # 1 - p is exact for p >= 0.5
    return -_lower_quantile(1.0 - p)


# ---------------------------------------------------------------- binomial bounds


@functools.lru_cache(maxsize=64)
def _log_binom_coeffs(n: int) -> np.ndarray:
    k = np.arange(n + 1, dtype=np.float64)
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def binom_upper_tail(x: int, n: int, p: float) -> float:
    """P[Bin(n, p) >= x], summed in log space."""
    if x <= 0:
        return 1.0
    if x > n:
        return 0.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    k = np.arange(x, n + 1, dtype=np.float64)
    logs = _log_binom_coeffs(n)[x:] + k * math.log(p) + (n - k) * math.log1p(-p)
    return float(math.exp(min(0.0, logsumexp(logs))))


@functools.lru_cache(maxsize=4096)
def binom_lower_bound(x: int, n: int, alpha: float, tol: float = 1e-12) -> float:
    """One-sided Clopper-Pearson lower bound on p from ``x`` successes in ``n`` trials.

    Returns the left end of a bisection bracket of width ``tol`` around the p
    solving P[Bin(n, p) >= x] = alpha, so the result never overshoots the root.
    """
    x, n = int(x), int(n)
    if n < 1 or x < 0:
        raise ValueError("need n >= 1 and x >= 0")
    if x > n:
        raise ValueError(f"successes {x} exceed trials {n}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if x == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if binom_upper_tail(x, n, mid) > alpha:
            hi = mid
        else:
            lo = mid
    return lo


# ---------------------------------------------------------------- smoothed classifier


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.5
    n0: int = 100
    n: int = 10_000
    alpha: float = 0.001
    mc_batch: int = 500
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n0 < 1 or self.n < 1 or self.mc_batch < 1:
            raise ValueError("n0, n and mc_batch must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass
class CertificationResult:
    decision: object  # class id or ABSTAIN
    p_a_lower: float
    radius: float
    counts: list[int] = field(default_factory=list)
    sigma: float = 0.0
    n: int = 0
    n0: int = 0
    alpha: float = 0.0

    @property
    def abstained(self) -> bool:
        return self.decision is ABSTAIN

    def record(self, index: int, label: int | None) -> dict:
        return {
            "index": int(index),
            "label": None if label is None else int(label),
            "decision": "abstain" if self.abstained else int(self.decision),
            "p_a_lower": self.p_a_lower,
            "radius": self.radius,
            "sigma": self.sigma,
            "n": self.n,
            "n0": self.n0,
            "alpha": self.alpha,
        }


def _classifier(base) -> tuple[Callable[[np.ndarray], np.ndarray], int | None]:
    if isinstance(base, Network):
        if base.mode is BNMode.TRAIN:
            raise RuntimeError("base classifier must have fixed BN statistics (Frozen or Adaptive)")
        return base.predict, base.num_classes
    if hasattr(base, "predict"):
        return base.predict, getattr(base, "num_classes", None)
    return base, getattr(base, "num_classes", None)


def noise_stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for one example, independent of batching."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0, int(index)))))


def sample_counts(base, x, sigma: float, num: int, rng: np.random.Generator, mc_batch: int = 500) -> np.ndarray:
    """Class tallies of the base classifier on ``num`` Gaussian perturbations of ``x``."""
    classify, k = _classifier(base)
    x = np.asarray(x, dtype=np.float64)
    counts = np.zeros(k or 0, dtype=np.int64)
    left = num
    while left > 0:
        b = min(mc_batch, left)
        noisy = x[None] + sigma * rng.standard_normal((b,) + x.shape)
        preds = np.asarray(classify(noisy), dtype=np.int64)
        c = np.bincount(preds, minlength=len(counts))
        if len(c) > len(counts):
            counts = np.pad(counts, (0, len(c) - len(counts)))
        counts += c
        left -= b
    return counts


def smoothed_predict(base, x, cfg: SmoothingConfig, index: int = 0):
    """Top class of the smoothed classifier, or ABSTAIN when top vs runner-up is not significant."""
    rng = noise_stream(cfg.seed, index)
    counts = sample_counts(base, x, cfg.sigma, cfg.n0, rng, cfg.mc_batch)
    order = np.argsort(-counts, kind="stable")
    na = int(counts[order[0]])
    nb = int(counts[order[1]]) if len(counts) > 1 else 0
    if binomtest(na, na + nb, 0.5).pvalue > cfg.alpha:
        return ABSTAIN
    return int(order[0])


def radius_from_bound(p_a_lower: float, sigma: float) -> float:
    return sigma * phi_inv(p_a_lower) if p_a_lower > 0.5 else 0.0


def certify(base, x, cfg: SmoothingConfig, index: int = 0) -> CertificationResult:
    """Select a class on n0 samples, bound its probability on n fresh samples."""
    rng = noise_stream(cfg.seed, index)
    c0 = sample_counts(base, x, cfg.sigma, cfg.n0, rng, cfg.mc_batch)
    top = int(np.argmax(c0))
    counts = sample_counts(base, x, cfg.sigma, cfg.n, rng, cfg.mc_batch)
    na = int(counts[top]) if top < len(counts) else 0
    pa = binom_lower_bound(na, cfg.n, cfg.alpha)
    common = dict(counts=[int(c) for c in counts], sigma=cfg.sigma, n=cfg.n, n0=cfg.n0, alpha=cfg.alpha)
    if pa <= 0.5:
        return CertificationResult(ABSTAIN, pa, 0.0, **common)
    return CertificationResult(top, pa, radius_from_bound(pa, cfg.sigma), **common)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SMOOTHCERT_THREADS", "1")))
    except ValueError:
        return 1


def certify_batch(base, xs, cfg: SmoothingConfig, indices: Sequence[int] | None = None) -> list[CertificationResult]:
    """Certify each row of ``xs``; results do not depend on the thread count."""
    xs = np.asarray(xs, dtype=np.float64)
    indices = list(range(len(xs))) if indices is None else list(indices)
    jobs = list(zip(xs, indices))
    threads = min(_threads(), len(jobs)) if jobs else 1
    if threads <= 1:
        return [certify(base, x, cfg, i) for x, i in jobs]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda job: certify(base, job[0], cfg, job[1]), jobs))


def adapt_then_certify(net: Network, test_batch, rho: float, cfg: SmoothingConfig,
                       exclude_self: bool = False, blend: str = "std") -> list[CertificationResult]:
    """Adapt BN once on the noise-augmented batch, freeze, and certify every element.

    The caller's network is left untouched. With ``exclude_self`` each example
    is certified by a copy adapted without its own noisy image.
    """
    xs = np.asarray(test_batch, dtype=np.float64)
    if len(xs) == 0:
        raise ValueError("empty test batch")
    if len(xs) < 2 + int(exclude_self):
        raise ValueError("test batch too small to adapt on")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(1,))))
    noisy = xs + cfg.sigma * rng.standard_normal(xs.shape)
    base = net.copy()
    base.set_mode(BNMode.FROZEN)
    if not exclude_self:
        adapt(base, noisy, rho, blend)
        return certify_batch(base, xs, cfg)
    out = []
    for i in range(len(xs)):
        model = base.copy()
        adapt(model, np.delete(noisy, i, axis=0), rho, blend)
        out.append(certify(model, xs[i], cfg, i))
    return out


def certified_accuracy_curve(results: Sequence[CertificationResult], labels, radii) -> np.ndarray:
    """Fraction of examples certified correct with radius >= r, for each r."""
    labels = np.asarray(labels)
    radii = np.asarray(radii, dtype=np.float64)
    if len(results) != len(labels):
        raise ValueError("results and labels differ in length")
    if len(results) == 0:
        return np.zeros(len(radii))
    ok = np.array([not r.abstained and r.decision == int(y) for r, y in zip(results, labels)])
    rad = np.array([r.radius for r in results])
    return np.array([(ok & (rad >= r)).mean() for r in radii])


def linf_radius_from_l2(r2: float, d: int) -> float:
    """l_inf radius guaranteed by an l2 certificate of radius ``r2`` in ``d`` dimensions."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return r2 / math.sqrt(d)


def l2_radius_for_linf(r_inf: float, d: int) -> float:
    """l2 radius whose ball contains the l_inf ball of radius ``r_inf``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return r_inf * math.sqrt(d)


# ---------------------------------------------------------------- reports


def write_certification_jsonl(path, results: Sequence[CertificationResult], labels, indices=None) -> None:
    indices = range(len(results)) if indices is None else indices
    with open(path, "w") as fh:
        for i, r, y in zip(indices, results, labels):
            fh.write(json.dumps(r.record(i, y), sort_keys=True) + "\n")


def write_curve_csv(path, radii, accuracy, header=("radius", "accuracy")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r, a in zip(radii, accuracy):
            w.writerow([repr(float(r)), repr(float(a))])
