"""Cumulant generating function of ``log m0``, its Legendre dual, tilting and
critical exponents.

``Lambda(t) = log E m0**t`` is a finite log-sum-exp, so derivatives are exact
tilted moments.  The dual ``Lambda*`` is found by solving ``Lambda'(t) = x``
with a bracketed Newton iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env_model import EnvModel, env_summary
from .errors import InvalidEnv, NoConvergence

MAX_ITER = 200
DUAL_TOL = 1e-10


def logsumexp(a: np.ndarray) -> float:
    # small fixed-size arrays: scipy's generic version costs ~100us per call
    c = float(np.max(a))
    return c + math.log(math.fsum(np.exp(a - c)))


class RateFunction:
    """Evaluator for ``Lambda``, its first two derivatives and ``Lambda*``.

    Laws with equal means are merged, so ``log_means`` is strictly increasing.
    The effective domain of ``Lambda*`` is ``[x_min, x_max]``.
    """

    def __init__(self, env: EnvModel):
        lm, inv = np.unique(env.log_means, return_inverse=True)
        w = np.zeros(lm.size)
        np.add.at(w, inv, env.weights)
        self.log_means = lm
        self.weights = w
        self._log_w = np.log(w)
        self.E_log_m = math.fsum(w * lm)
        self.x_min = float(lm[0])
        self.x_max = float(lm[-1])
        self.degenerate = lm.size == 1

    @property
    def domain(self):
        return (self.x_min, self.x_max)

    def _tilted(self, t: float) -> np.ndarray:
        a = self._log_w + t * self.log_means
        return np.exp(a - logsumexp(a))

    def lam(self, t: float) -> float:
        return float(logsumexp(self._log_w + t * self.log_means))

    def dlam(self, t: float) -> float:
        return math.fsum(self._tilted(t) * self.log_means)

    def d2lam(self, t: float) -> float:
        q = self._tilted(t)
        mu = math.fsum(q * self.log_means)
        return math.fsum(q * (self.log_means - mu) ** 2)

    def solve_dual(self, x: float) -> float:
        """Root ``t*`` of ``Lambda'(t) = x`` for ``x`` strictly inside the domain."""
        if not (self.x_min < x < self.x_max):
            raise ValueError(f"x={x} outside the open domain ({self.x_min}, {self.x_max})")
        tol = DUAL_TOL * max(1.0, abs(x))
        f = lambda t: self.dlam(t) - x  # noqa: E731
        it = 0
        lo, hi = -1.0, 1.0
        while f(lo) > 0:
            hi, lo = lo, 2.0 * lo
            it += 1
            if it > MAX_ITER:
                raise NoConvergence("bracket growth failed", (lo, hi))
        while f(hi) < 0:
            lo, hi = hi, 2.0 * hi
            it += 1
            if it > MAX_ITER:
                raise NoConvergence("bracket growth failed", (lo, hi))
        t = 0.0 if lo < 0.0 < hi else 0.5 * (lo + hi)
        for _ in range(it, MAX_ITER):
            ft = f(t)
            if abs(ft) <= tol:
                return t
            if ft < 0:
                lo = t
            else:
                hi = t
            d = self.d2lam(t)
            step = t - ft / d if d > 0 else math.nan
            t = step if lo < step < hi else 0.5 * (lo + hi)
            if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(t)):
                if abs(f(t)) <= 10 * tol:
                    return t
                break
        raise NoConvergence(f"Lambda'(t) = {x} not solved in {MAX_ITER} iterations", (lo, hi))

    def boundary_value(self, x: float) -> float:
        """Finite supremum at an endpoint: ``-log`` of the weight sitting there."""
        if x == self.x_max:
            return -math.log(self.weights[-1])
        if x == self.x_min:
            return -math.log(self.weights[0])
        raise ValueError("not an endpoint")

    def lambda_star(self, x: float) -> float:
        return self.legendre(x)[0]

    def legendre(self, x: float):
        """``(Lambda*(x), t*)``; ``t*`` is ``+-inf`` at the endpoints and ``nan`` outside."""
        if self.degenerate:
            return (0.0, 0.0) if x == self.x_min else (math.inf, math.nan)
        if x < self.x_min or x > self.x_max:
            return math.inf, math.nan
        if x == self.x_max:
            return self.boundary_value(x), math.inf
        if x == self.x_min:
            return self.boundary_value(x), -math.inf
        if x == self.E_log_m:
            return 0.0, 0.0
        t = self.solve_dual(x)
        return max(t * x - self.lam(t), 0.0), t


def lam(rf: RateFunction, t: float) -> float:
    return rf.lam(t)


def lambda_star(rf: RateFunction, x: float) -> float:
    return rf.lambda_star(x)


@dataclass(frozen=True)
class TiltedEnvModel:
    """Environment law reweighted by ``m**t / E m0**t``; offspring pmfs untouched."""

    base: EnvModel
    t: float
    tilted_weights: np.ndarray
    log_norm: float
    as_env: EnvModel = field(repr=False)

    def log_likelihood_ratio(self, log_pi, n: int):
        """``log dP/dP~`` on environment prefixes of length ``n``: ``n Lambda(t) - t log Pi_n``."""
        return n * self.log_norm - self.t * np.asarray(log_pi)


def tilt(env: EnvModel, t: float) -> TiltedEnvModel:
    a = np.log(env.weights) + t * env.log_means
    norm = float(logsumexp(a))
    w = np.exp(a - norm)
    w = w / math.fsum(w)
    if t == 0:
        w = env.weights.copy()
    w.setflags(write=False)
    return TiltedEnvModel(env, float(t), w, norm, env if t == 0 else env.with_weights(w))


def critical_a0(env: EnvModel) -> float:
    """Root of ``E p1 m0**a = 1``; ``+inf`` when ``p1 = 0`` on the whole support."""
    if np.any(env.means <= 1):
        raise InvalidEnv("critical_a0 needs every law mean > 1")
    p1 = env.p1
    keep = p1 > 0
    if not keep.any():
        return math.inf
    log_c = np.log(env.weights[keep]) + np.log(p1[keep])  # product can underflow
    lm = env.log_means[keep]
    g = lambda a: math.exp(logsumexp(log_c + a * lm))  # noqa: E731
    if g(0.0) >= 1:
        raise InvalidEnv("E p1 >= 1")
    lo, hi = 0.0, 1.0
    while g(hi) < 1:
        lo, hi = hi, 2 * hi
    while True:
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm - 1) <= 1e-12 or mid in (lo, hi):
            return mid
        if gm < 1:
            lo = mid
        else:
            hi = mid


def quenched_alpha0(env: EnvModel) -> float:
    """``-E log p1 / E log m0``; ``+inf`` if some law has ``p1 = 0``."""
    p1 = env.p1
    if np.any(p1 == 0):
        return math.inf
    return -env.expect(np.log(p1)) / env_summary(env).E_log_m


def positive_moment_criterion(env: EnvModel, s: float) -> bool:
    """Finite-support form of ``0 < E W**s < inf``: ``E m0**(1-s) < 1``."""
    if not s > 1:
        raise ValueError("s must be > 1")
    return RateFunction(env).lam(1.0 - s) < 0
