"""Exact small-n laws of ``Z_n`` by pmf propagation.

Annealed marginals use the averaged one-step kernel, which is legitimate
because ``xi_n`` is independent of everything up to generation ``n``.  Anything
that couples the population with the environment (``W_n = Z_n / Pi_n``) goes
through explicit enumeration of environment sequences instead.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, NamedTuple

import numpy as np

from .env_model import EnvModel, OffspringLaw
from .errors import DivergentSeries, EnumerationTooLarge, TruncationExceeded

Z_MAX_DEFAULT = 2**16
TRUNCATION_BUDGET = 1e-10
ENUMERATION_CAP = 10**5


@dataclass(frozen=True)
class PmfVector:
    """Law of a population size: ``masses[z] = P(Z = z)`` for ``z = 0..len-1``.

    ``masses[0]`` is always 0 (no extinction); mass beyond ``z_max`` has been
    discarded and is accounted for in ``lost_mass``.
    """

    masses: np.ndarray
    lost_mass: float = 0.0
    z_max: int = Z_MAX_DEFAULT

    @classmethod
    def delta(cls, z: int = 1, z_max: int = Z_MAX_DEFAULT) -> "PmfVector":
        m = np.zeros(z + 1)
        m[z] = 1.0
        return cls(m, 0.0, z_max)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.masses)

    @property
    def total(self) -> float:
        return math.fsum(self.masses) + self.lost_mass

    def as_dict(self) -> dict:
        return {int(z): float(self.masses[z]) for z in self.support}

    def mass(self, z: int) -> float:
        return float(self.masses[z]) if 0 <= z < self.masses.size else 0.0


def _trim(m: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(m)
    return m[: nz[-1] + 1] if nz.size else m[:2]


def step_quenched(pmf: PmfVector, law: OffspringLaw, z_max: int | None = None) -> PmfVector:
    """One generation under a fixed offspring law.

    Mass at ``z`` spreads over the ``z``-fold convolution of the law.  Since
    ``p0 = 0`` the truncated convolution powers stay exact below ``z_max``.
    """
    z_max = pmf.z_max if z_max is None else z_max
    p = law.probs
    zs = pmf.support
    out = np.zeros(min(z_max, int(zs[-1]) * (p.size - 1)) + 1)
    lost = [pmf.lost_mass]
    power = np.array([1.0])
    cut = 0.0  # mass of the current power beyond z_max
    for z in range(1, int(zs[-1]) + 1):
        full = np.convolve(power, p)
        if full.size > z_max + 1:
            # everything above z_max stays above it in later powers
            cut += math.fsum(full[z_max + 1 :])
            full = full[: z_max + 1]
        power = full
        w = pmf.masses[z]
        if w == 0:
            continue
        out[: power.size] += w * power
        if cut:
            lost.append(w * cut)
    return PmfVector(_trim(out), max(math.fsum(lost), 0.0), z_max)


def annealed_pmf(
    env: EnvModel, n: int, z_max: int = Z_MAX_DEFAULT, budget: float = TRUNCATION_BUDGET
) -> PmfVector:
    """Marginal law of ``Z_n`` under the annealed measure."""
    if n < 0:
        raise ValueError("n must be >= 0")
    pmf = PmfVector.delta(1, z_max)
    for _ in range(n):
        parts = [step_quenched(pmf, law, z_max) for law in env.laws]
        size = max(q.masses.size for q in parts)
        acc = np.zeros((len(parts), size))
        for i, (w, q) in enumerate(zip(env.weights, parts)):
            acc[i, : q.masses.size] = w * q.masses
        masses = np.array([math.fsum(col) for col in acc.T])
        lost = math.fsum(w * q.lost_mass for w, q in zip(env.weights, parts))
        pmf = PmfVector(_trim(masses), lost, z_max)
        if pmf.lost_mass > budget:
            raise TruncationExceeded(f"lost mass {pmf.lost_mass:.3g} exceeds budget {budget:.3g}")
    return pmf


class JointEntry(NamedTuple):
    env_sequence: tuple
    weight: float
    pmf: PmfVector
    log_pi: float


def enumerate_joint(
    env: EnvModel, n: int, z_max: int = Z_MAX_DEFAULT, cap: int = ENUMERATION_CAP
) -> list[JointEntry]:
    """Quenched law of ``Z_n`` for every environment sequence of length ``n``.

    Prefixes are shared, so the cost is one quenched step per tree node.
    """
    k = env.n_laws
    if k**n > cap:
        raise EnumerationTooLarge(f"{k}**{n} sequences exceeds cap {cap}")
    out: list[JointEntry] = []

    def walk(prefix, weight, log_pi, pmf):
        if len(prefix) == n:
            out.append(JointEntry(prefix, weight, pmf, log_pi))
            return
        for i, law in enumerate(env.laws):
            walk(
                prefix + (i,),
                weight * env.weights[i],
                log_pi + env.log_means[i],
                step_quenched(pmf, law, z_max),
            )

    walk((), 1.0, 0.0, PmfVector.delta(1, z_max))
    return out


class MomentValue(NamedTuple):
    value: float
    error_bound: float


def exact_moment(pmf: PmfVector, t: float) -> MomentValue:
    """``E Z**t`` over the retained masses, with a bound for the truncated part."""
    zs = pmf.support
    value = math.fsum(zs.astype(float) ** t * pmf.masses[zs])
    bound = pmf.lost_mass * (float(pmf.z_max) ** t if t > 0 else 1.0)
    return MomentValue(value, bound)


def joint_moment_W(joint: Iterable[JointEntry], t: float, weights=None) -> float:
    """``E W_n**t`` from an enumeration.

    ``weights`` optionally replaces the per-sequence probabilities, e.g. to
    evaluate under a tilted environment law (``weights[seq]`` products).
    """
    terms = []
    for e in joint:
        w = e.weight if weights is None else math.prod(weights[i] for i in e.env_sequence)
        zs = e.pmf.support
        terms.append(w * math.fsum(np.exp(t * (np.log(zs) - e.log_pi)) * e.pmf.masses[zs]))
    return math.fsum(terms)


def marginalize(joint: Iterable[JointEntry]) -> PmfVector:
    joint = list(joint)
    size = max(e.pmf.masses.size for e in joint)
    acc = np.zeros((len(joint), size))
    for i, e in enumerate(joint):
        acc[i, : e.pmf.masses.size] = e.weight * e.pmf.masses
    lost = math.fsum(e.weight * e.pmf.lost_mass for e in joint)
    return PmfVector(_trim(np.array([math.fsum(c) for c in acc.T])), lost, joint[0].pmf.z_max)


class SeriesValue(NamedTuple):
    value: float
    tail_bound: float
    terms: int


def delta_inf_sq(
    env: EnvModel, env_sequence: Iterable[int], tol: float = 1e-14, k_max: int = 10_000
) -> SeriesValue:
    """Quenched variance of ``W``: ``sum_k (m_k(2)/m_k**2 - 1) / Pi_k``.

    ``tail_bound`` bounds the neglected remainder using ``Pi_j >= Pi_k A1**(j-k)``
    and the largest ``m(2)/m**2 - 1`` over the environment's laws.
    """
    excess = np.array([l.variance_ratio - 1.0 for l in env.laws])
    excess = np.maximum(excess, 0.0)
    a1 = float(env.means.min())
    if a1 <= 1:
        raise DivergentSeries("series needs every law mean > 1")
    geo = a1 / (a1 - 1.0)
    cap_excess = float(excess.max())
    terms = []
    log_pi = 0.0
    it = iter(env_sequence)
    for k in range(k_max):
        try:
            i = next(it)
        except StopIteration:
            bound = cap_excess * math.exp(-log_pi) * geo
            return SeriesValue(math.fsum(terms), bound, k)
        terms.append(excess[i] * math.exp(-log_pi))
        log_pi += env.log_means[i]
        bound = cap_excess * math.exp(-log_pi) * geo
        s = math.fsum(terms)
        if bound <= tol * s or bound == 0.0:
            return SeriesValue(s, bound, k + 1)
    raise DivergentSeries(f"tail bound {bound:.3g} not below tol after {k_max} terms")


def constant_sequence(index: int = 0):
    return itertools.repeat(index)


# --- rational cross-check mode -------------------------------------------------


def _frac_law(law: OffspringLaw) -> dict:
    return {j: Fraction(p).limit_denominator(10**12) for j, p in enumerate(law.probs) if p > 0}


def _frac_conv(a: dict, b: dict) -> dict:
    out: dict = {}
    for i, x in a.items():
        for j, y in b.items():
            out[i + j] = out.get(i + j, 0) + x * y
    return out


def annealed_pmf_rational(env: EnvModel, n: int) -> dict:
    """Exact rational law of ``Z_n`` (pmfs rounded to denominators ``<= 1e12``)."""
    if n > 3:
        raise EnumerationTooLarge("rational mode is meant for n <= 3")
    laws = [_frac_law(l) for l in env.laws]
    weights = [Fraction(w).limit_denominator(10**12) for w in env.weights]
    pmf = {1: Fraction(1)}
    for _ in range(n):
        nxt: dict = {}
        for w, law in zip(weights, laws):
            power = {0: Fraction(1)}
            for z in range(1, max(pmf) + 1):
                power = _frac_conv(power, law)
                if z in pmf:
                    for k, v in power.items():
                        nxt[k] = nxt.get(k, 0) + w * pmf[z] * v
        pmf = nxt
    return dict(sorted(pmf.items()))
