import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from bpre.env_model import EnvModel, new_offspring_law
from bpre.errors import DivergentSeries, EnumerationTooLarge, TruncationExceeded
from bpre.exact_engine import (
    PmfVector,
    annealed_pmf,
    annealed_pmf_rational,
    constant_sequence,
    delta_inf_sq,
    enumerate_joint,
    exact_moment,
    joint_moment_W,
    marginalize,
    step_quenched,
)
from bpre.rate_function import RateFunction, tilt
from conftest import ENV_A, ENV_B, ENV_C, HALF_HALF


def brute_force(env, n):
    """Law of Z_n by listing every environment and every individual's offspring."""
    out = {}
    laws = [{j: p for j, p in enumerate(l.probs) if p > 0} for l in env.laws]

    def walk(z, prob, depth):
        if depth == n:
            out[z] = out.get(z, 0.0) + prob
            return
        for w, law in zip(env.weights, laws):
            for kids in itertools.product(law.items(), repeat=z):
                walk(sum(j for j, _ in kids), prob * w * math.prod(p for _, p in kids), depth + 1)

    walk(1, 1.0, 0)
    return out


def test_step_examples():
    assert step_quenched(PmfVector.delta(1), new_offspring_law([0, 0, 1])).as_dict() == {2: 1.0}
    out = step_quenched(PmfVector.delta(2), new_offspring_law([0, 0.5, 0.5])).as_dict()
    assert out == pytest.approx({2: 0.25, 3: 0.5, 4: 0.25})
    pmf = PmfVector.delta(1)
    for _ in range(7):
        pmf = step_quenched(pmf, new_offspring_law([0, 0, 1]))
    assert pmf.as_dict() == {128: 1.0}


def test_truncation_tracks_lost_mass():
    law = new_offspring_law([0, 0.5, 0.5])
    pmf = PmfVector.delta(1, z_max=10)
    prev = 0.0
    for _ in range(5):
        pmf = step_quenched(pmf, law)
        assert pmf.lost_mass >= prev
        assert pmf.total == pytest.approx(1.0, abs=1e-12)
        prev = pmf.lost_mass
    assert pmf.lost_mass > 0
    assert pmf.masses.size <= 11
    with pytest.raises(TruncationExceeded):
        annealed_pmf(ENV_B, 5, z_max=8)


@pytest.mark.parametrize("env, n", [(ENV_A, 2), (ENV_B, 3), (ENV_C, 2), (HALF_HALF, 3)])
def test_annealed_matches_brute_force(env, n):
    bf = brute_force(env, n)
    got = annealed_pmf(env, n).as_dict()
    assert set(got) == set(bf)
    for z, p in bf.items():
        assert got[z] == pytest.approx(p, rel=1e-12, abs=1e-16)


def test_annealed_examples():
    assert annealed_pmf(ENV_A, 2).as_dict() == pytest.approx({4: 0.25, 6: 0.5, 9: 0.25})
    assert annealed_pmf(ENV_A, 0).as_dict() == {1: 1.0}
    assert exact_moment(annealed_pmf(ENV_B, 3), 1.0).value == pytest.approx(5.832, rel=1e-12)


@pytest.mark.parametrize("env", [ENV_A, ENV_B, ENV_C])
def test_mean_identity(env):
    for n in range(7):
        pmf = annealed_pmf(env, n)
        assert pmf.lost_mass == 0.0
        assert exact_moment(pmf, 1.0).value == pytest.approx(env.expect(env.means) ** n, rel=1e-9)


def test_env_a_binomial_support():
    for n in range(11):
        got = annealed_pmf(ENV_A, n).as_dict()
        expected = {}
        for j in range(n + 1):
            z = 2**j * 3 ** (n - j)
            expected[z] = expected.get(z, 0.0) + math.comb(n, j) / 2**n
        assert set(got) == set(expected)
        for z in expected:
            assert got[z] == pytest.approx(expected[z], rel=1e-12)


def test_rational_mode_agrees():
    for env in (ENV_A, ENV_B, ENV_C):
        exact = annealed_pmf_rational(env, 3)
        assert sum(exact.values()) == Fraction(1)
        flt = annealed_pmf(env, 3).as_dict()
        assert set(flt) == set(exact)
        for z, q in exact.items():
            assert flt[z] == pytest.approx(float(q), rel=1e-11)
    with pytest.raises(EnumerationTooLarge):
        annealed_pmf_rational(ENV_B, 4)


def test_enumerate_joint_env_a():
    j = enumerate_joint(ENV_A, 1)
    assert [e.env_sequence for e in j] == [(0,), (1,)]
    assert [e.pmf.as_dict() for e in j] == [{2: 1.0}, {3: 1.0}]
    for t in (-2.0, -0.5, 1.0, 3.0):
        assert joint_moment_W(enumerate_joint(ENV_A, 4), t) == pytest.approx(1.0, rel=1e-13)


def test_enumerate_joint_env_b_harmonic():
    # four-term sum: (1/2)(0.3*1.7 + 0.7*1.7/2) + (1/2)(0.1*1.9 + 0.9*1.9/2)
    by_hand = 0.5 * (0.3 * 1.7 + 0.7 * 0.85) + 0.5 * (0.1 * 1.9 + 0.9 * 0.95)
    assert by_hand == pytest.approx(1.075)
    assert joint_moment_W(enumerate_joint(ENV_B, 1), -1.0) == pytest.approx(by_hand, rel=1e-14)


def test_enumerate_joint_mean_and_marginal():
    j = enumerate_joint(ENV_B, 2)
    assert len(j) == 4
    assert exact_moment(marginalize(j), 1.0).value == pytest.approx(3.24, rel=1e-13)
    for n in range(1, 6):
        a = annealed_pmf(ENV_B, n).as_dict()
        m = marginalize(enumerate_joint(ENV_B, n)).as_dict()
        assert set(a) == set(m)
        assert all(abs(a[z] - m[z]) <= 1e-10 for z in a)


def test_enumeration_cap():
    with pytest.raises(EnumerationTooLarge):
        enumerate_joint(ENV_B, 20)


def test_harmonic_moments_nondecreasing():
    vals = [joint_moment_W(enumerate_joint(ENV_B, n), -1.5) for n in range(1, 6)]
    assert all(b >= a - 1e-14 for a, b in zip(vals, vals[1:]))


def test_moment_identity_via_tilt():
    rf = RateFunction(ENV_B)
    for t in (-1.0, 0.5, 2.0):
        for n in (1, 3, 5):
            direct = exact_moment(annealed_pmf(ENV_B, n), t).value
            tw = tilt(ENV_B, t).tilted_weights
            via = joint_moment_W(enumerate_joint(ENV_B, n), t, weights=tw) * math.exp(n * rf.lam(t))
            assert via == pytest.approx(direct, rel=1e-12)


def test_exact_moment_examples():
    assert exact_moment(PmfVector.delta(4), -0.5).value == 0.5
    pmf = annealed_pmf(ENV_A, 2)
    assert exact_moment(pmf, 1.0).value == pytest.approx(6.25)
    assert exact_moment(pmf, -1.0).value == pytest.approx((5 / 12) ** 2, rel=1e-14)
    lossy = PmfVector(np.array([0.0, 0.5]), 0.5, z_max=10)
    assert exact_moment(lossy, 2.0).error_bound == pytest.approx(50.0)
    assert exact_moment(lossy, -1.0).error_bound == 0.5


def test_delta_inf_sq():
    assert delta_inf_sq(ENV_A, constant_sequence(0)).value == 0.0
    s = delta_inf_sq(HALF_HALF, constant_sequence(0))
    assert s.value == pytest.approx(1 / 3, rel=1e-12)
    assert s.tail_bound <= 1e-14 * s.value
    rng = np.random.default_rng(3)
    seq = rng.integers(0, 2, 500)
    v = delta_inf_sq(ENV_B, iter(seq))
    excess = [l.variance_ratio - 1 for l in ENV_B.laws]
    assert 0 < v.value <= max(excess) * 1.7 / 0.7
    # remainder bound is honest: adding more terms does not exceed it
    short = delta_inf_sq(ENV_B, iter(seq[:10]))
    assert v.value - short.value <= short.tail_bound


def test_delta_inf_sq_divergent():
    env = EnvModel(([0, 0.5, 0.5], [0, 1]), [0.5, 0.5])
    with pytest.raises(DivergentSeries):
        delta_inf_sq(env, constant_sequence(0))
