"""Two-component univariate Gaussian mixture for myelinated-WM extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateError, DimensionError, ValidationError
from .volume import MWM, BrainMask, LabelVolume, ScalarVolume

S_FLOOR = 1e-4
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Gmm2:
    weights: tuple
    means: tuple
    stds: tuple
    log_likelihood: List[float] = field(default_factory=list)
    iterations: int = 0

    def __post_init__(self):
        self.weights = tuple(float(v) for v in self.weights)
        self.means = tuple(float(v) for v in self.means)
        self.stds = tuple(float(v) for v in self.stds)
        if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) <= 0:
            raise ValidationError("weights must be positive and sum to 1")
        if min(self.stds) <= 0:
            raise ValidationError("stds must be positive")

    def canonical(self) -> "Gmm2":
        if self.means[0] <= self.means[1]:
            return self
        return Gmm2(self.weights[::-1], self.means[::-1], self.stds[::-1],
                    list(self.log_likelihood), self.iterations)

    def component_log_density(self, x) -> np.ndarray:
        """log(pi_k N(x | m_k, s_k)) shaped (2, n)."""
        x = np.asarray(x, dtype=np.float64)
        w = np.array(self.weights)[:, None]
        m = np.array(self.means)[:, None]
        s = np.array(self.stds)[:, None]
        return np.log(w) - 0.5 * _LOG_2PI - np.log(s) - 0.5 * ((x[None, :] - m) / s) ** 2

    def posterior_high(self, x) -> np.ndarray:
        """Posterior probability of the higher-mean component."""
        g = self.canonical()
        ld = g.component_log_density(np.atleast_1d(x))
        return np.exp(ld[1] - logsumexp(ld, axis=0))

    def to_dict(self):
        return {"weights": list(self.weights), "means": list(self.means), "stds": list(self.stds),
                "iterations": self.iterations, "log_likelihood": self.log_likelihood[-1:]}


def initial_gmm2(values) -> Gmm2:
    """Split at the median and moment-match each side."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    med = np.median(x)
    lo, hi = x[x <= med], x[x > med]
    if hi.size == 0:
        lo, hi = x[x < med], x[x >= med]
    if lo.size == 0 or hi.size == 0:
        raise DegenerateError("all values identical")
    return Gmm2((lo.size / x.size, hi.size / x.size), (lo.mean(), hi.mean()),
                (max(lo.std(), S_FLOOR), max(hi.std(), S_FLOOR)))


def gmm2_em(values, init: Gmm2 = None, tol: float = 1e-8, max_iters: int = 200,
            s_floor: float = S_FLOOR) -> Gmm2:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 10:
        raise ValidationError("need at least 10 samples")
    if not tol > 0:
        raise ValidationError("tol must be positive")
    if np.all(x == x[0]):
        raise DegenerateError("all values identical")
    model = init if init is not None else initial_gmm2(x)
    n = x.size
    ld = model.component_log_density(x)
    norm = logsumexp(ld, axis=0)
    trace = [float(norm.sum())]
    it = 0
    for it in range(1, max_iters + 1):
        resp = np.exp(ld - norm)                  # E step
        nk = resp.sum(axis=1)
        if np.any(nk <= 0):
            raise DegenerateError("a mixture component lost all its mass")
        means = (resp @ x) / nk                   # M step
        var = np.array([(resp[k] * (x - means[k]) ** 2).sum() / nk[k] for k in range(2)])
        stds = np.maximum(np.sqrt(var), s_floor)
        weights = nk / n
        weights = weights / weights.sum()
        cand = Gmm2(weights, means, stds)
        cand_ld = cand.component_log_density(x)
        cand_norm = logsumexp(cand_ld, axis=0)
        ll = float(cand_norm.sum())
        if ll < trace[-1]:
            # EM cannot decrease the likelihood; a drop at rounding level means converged
            if ll < trace[-1] - 1e-9 * max(1.0, abs(trace[-1])):
                raise AssertionError(f"EM log-likelihood decreased: {trace[-1]} -> {ll}")
            it -= 1
            break
        model, ld, norm = cand, cand_ld, cand_norm
        trace.append(ll)
        if ll - trace[-2] < tol:
            break
    model.log_likelihood = trace
    model.iterations = it
    return model.canonical()


def myelin_threshold(model: Gmm2) -> float:
    """Intensity above which a voxel is assigned to the higher-mean component.

    The boundary is the upper crossing of the weighted component densities,
    which keeps the labeling monotone in intensity. Returns +inf if the
    higher component never dominates and -inf if it always does.
    """
    g = model.canonical()
    (w1, w2), (m1, m2), (s1, s2) = g.weights, g.means, g.stds
    # log(w2 N2) - log(w1 N1) = A x^2 + B x + C
    A = 0.5 / s1 ** 2 - 0.5 / s2 ** 2
    B = m2 / s2 ** 2 - m1 / s1 ** 2
    C = (math.log(w2) - math.log(s2) - 0.5 * m2 ** 2 / s2 ** 2) - \
        (math.log(w1) - math.log(s1) - 0.5 * m1 ** 2 / s1 ** 2)
    if abs(A) < 1e-15:
        if B == 0:
            return -math.inf if C > 0 else math.inf
        return -C / B
    disc = B * B - 4 * A * C
    if disc < 0:
        # no crossing: the sign of A decides which component wins everywhere
        return -math.inf if A > 0 else math.inf
    r = sorted(((-B - math.sqrt(disc)) / (2 * A), (-B + math.sqrt(disc)) / (2 * A)))
    # A > 0: the high component wins above the larger root; A < 0: above the smaller
    return r[1] if A > 0 else r[0]


def difference_image(pdw: ScalarVolume, t1w: ScalarVolume, mask: BrainMask) -> ScalarVolume:
    if pdw.dims != t1w.dims or pdw.dims != mask.dims:
        raise DimensionError("PDw, T1w and mask must share dims")
    diff = pdw.data.astype(np.float64) - t1w.data.astype(np.float64)
    diff[~mask.data] = 0.0
    return ScalarVolume(diff, t1w.voxel_size)


def classify_myelin(diff: ScalarVolume, mask: BrainMask, model: Gmm2) -> LabelVolume:
    """Label MWM (4) where the difference exceeds the posterior crossing, BG elsewhere."""
    t = myelin_threshold(model)
    out = np.zeros(diff.dims, dtype=np.uint8)
    out[mask.data & (diff.data.astype(np.float64) > t)] = MWM
    return LabelVolume(out, diff.voxel_size)
