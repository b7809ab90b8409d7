"""Offspring laws, finite-support environment laws and the standing assumptions.

An environment is a finite list of offspring pmfs (all with ``p0 = 0``) drawn
i.i.d. each generation with fixed weights.  Everything downstream (rate
functions, tilting, the exact oracle) relies on this finiteness.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    InvalidEnv,
    NegativeMass,
    NonZeroP0,
    NotNormalized,
    NotSupercritical,
)

NORM_TOL = 1e-12
K_OFF_MAX = 64


class InvalidLawShape(NotNormalized):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class OffspringLaw:
    """Reproduction pmf ``probs[j] = P(X = j)`` for ``j = 0..K``."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs))

    @property
    def max_offspring(self) -> int:
        return int(np.flatnonzero(self.probs)[-1])

    @property
    def min_offspring(self) -> int:
        return int(np.flatnonzero(self.probs)[0])

    @property
    def p1(self) -> float:
        return float(self.probs[1]) if self.probs.size > 1 else 0.0

    @property
    def mean(self) -> float:
        return self.moment(1.0)

    def moment(self, p: float) -> float:
        return moment(self, p)

    @property
    def variance_ratio(self) -> float:
        """``m(2) / m**2``, equal to 1 only for deterministic laws."""
        return self.moment(2.0) / self.mean**2

    def __eq__(self, other):
        return isinstance(other, OffspringLaw) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())

    def __repr__(self):
        nz = {int(j): float(p) for j, p in enumerate(self.probs) if p > 0}
        return f"OffspringLaw({nz})"


def new_offspring_law(probs: Sequence[float], k_off: int = K_OFF_MAX) -> OffspringLaw:
    """Validate a pmf and build an :class:`OffspringLaw`.

    Masses summing to 1 within ``1e-12`` are renormalized; anything further off
    is rejected.  Trailing zeros are dropped.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise InvalidLawShape(f"offspring pmf needs at least 2 entries, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NotNormalized("offspring pmf contains non-finite entries")
    if np.any(p < 0):
        raise NegativeMass(f"negative mass at j={int(np.flatnonzero(p < 0)[0])}")
    if p[0] != 0:
        raise NonZeroP0(f"p0 must be exactly 0, got {p[0]!r}")
    total = math.fsum(p)
    if abs(total - 1.0) > NORM_TOL:
        raise NotNormalized(f"masses sum to {total!r}")
    nz = np.flatnonzero(p)
    p = p[: nz[-1] + 1] / total
    if p.size - 1 > k_off:
        raise InvalidLawShape(f"offspring support {p.size - 1} exceeds K_off={k_off}")
    return OffspringLaw(p)


def moment(law: OffspringLaw, p: float) -> float:
    """``sum_j j**p * probs[j]`` (exact finite sum)."""
    if not p > 0:
        raise ValueError(f"moment order must be > 0, got {p}")
    j = np.arange(law.probs.size, dtype=np.float64)
    return math.fsum(j**p * law.probs)


@dataclass(frozen=True, eq=False)
class EnvModel:
    """Finite-support i.i.d. environment: law ``laws[k]`` w.p. ``weights[k]``."""

    laws: tuple
    weights: np.ndarray
    means: np.ndarray = field(init=False, repr=False)
    log_means: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        laws = tuple(l if isinstance(l, OffspringLaw) else new_offspring_law(l) for l in self.laws)
        w = np.asarray(self.weights, dtype=np.float64)
        if len(laws) == 0:
            raise InvalidEnv("environment needs at least one law")
        if w.shape != (len(laws),):
            raise InvalidEnv(f"{len(laws)} laws but weights of shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise InvalidEnv("weights must be finite and strictly positive")
        total = math.fsum(w)
        if abs(total - 1.0) > NORM_TOL:
            raise InvalidEnv(f"weights sum to {total!r}")
        means = np.array([l.mean for l in laws])
        if np.any(means <= 0):
            raise InvalidEnv("every law needs a positive mean")
        object.__setattr__(self, "laws", laws)
        object.__setattr__(self, "weights", _frozen(w / total))
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "log_means", _frozen(np.log(means)))

    @classmethod
    def from_dict(cls, d: dict) -> "EnvModel":
        return cls(tuple(new_offspring_law(p) for p in d["laws"]), d["weights"])

    @classmethod
    def from_json(cls, text: str | bytes) -> "EnvModel":
        return cls.from_dict(json.loads(text))

    @classmethod
    def single(cls, probs) -> "EnvModel":
        return cls((new_offspring_law(probs),), [1.0])

    def to_dict(self) -> dict:
        return {"laws": [l.probs.tolist() for l in self.laws], "weights": self.weights.tolist()}

    def env_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_weights(self, weights) -> "EnvModel":
        """Same laws, new weights; laws whose weight underflows to 0 are dropped."""
        w = np.asarray(weights, dtype=np.float64)
        keep = w > 0
        return EnvModel(tuple(l for l, k in zip(self.laws, keep) if k), w[keep] / math.fsum(w[keep]))

    @property
    def n_laws(self) -> int:
        return len(self.laws)

    @property
    def k_off(self) -> int:
        return max(l.max_offspring for l in self.laws)

    @property
    def p1(self) -> np.ndarray:
        return np.array([l.p1 for l in self.laws])

    def prob_table(self) -> np.ndarray:
        """``(n_laws, k_off + 1)`` array of offspring pmfs, zero padded."""
        out = np.zeros((self.n_laws, self.k_off + 1))
        for i, l in enumerate(self.laws):
            out[i, : l.probs.size] = l.probs
        return out

    def expect(self, values) -> float:
        return math.fsum(self.weights * np.asarray(values, dtype=np.float64))


@dataclass(frozen=True)
class EnvSummary:
    E_log_m: float
    sigma2: float
    E_p1: float
    _log_means: np.ndarray = field(repr=False)
    _weights: np.ndarray = field(repr=False)

    def E_m_pow(self, t: float) -> float:
        """``E m0**t``."""
        return math.fsum(self._weights * np.exp(t * self._log_means))


def env_summary(env: EnvModel) -> EnvSummary:
    e = env.expect(env.log_means)
    # centred form keeps sigma2 exactly 0 for a constant m0
    sigma2 = env.expect((env.log_means - e) ** 2)
    if not e > 0:
        raise NotSupercritical(f"E log m0 = {e} <= 0")
    return EnvSummary(e, sigma2, env.expect(env.p1), env.log_means, env.weights)


@dataclass(frozen=True)
class HypothesisHReport:
    A1: float
    A: float
    delta: float
    holds: bool
    p1_sup: float
    E_p1: float
    underline_m: int
    gamma: float | None
    p1_zero: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_hypothesis_H(env: EnvModel, delta: float = 1.0) -> HypothesisHReport:
    """Tightest constants for the uniform moment bounds ``A1 <= m0`` and
    ``m0(1+delta) <= A**(1+delta)``.

    On finite support the second bound always holds for the reported ``A``, so
    the verdict reduces to ``A1 > 1``.
    """
    if not delta > 0:
        raise ValueError("delta must be > 0")
    q = 1.0 + delta
    A1 = float(env.means.min())
    A_pow = max(l.moment(q) ** (1.0 / q) for l in env.laws)
    A = max(A_pow, A1 * (1 + 1e-9))
    underline_m = min(l.min_offspring for l in env.laws)
    p1 = env.p1
    p1_zero = bool(np.all(p1 == 0))
    gamma = math.log(underline_m) / math.log(A) if p1_zero and underline_m >= 2 else None
    return HypothesisHReport(
        A1=A1,
        A=A,
        delta=float(delta),
        holds=bool(A1 > 1),
        p1_sup=float(p1.max()),
        E_p1=env.expect(p1),
        underline_m=underline_m,
        gamma=gamma,
        p1_zero=p1_zero,
    )
