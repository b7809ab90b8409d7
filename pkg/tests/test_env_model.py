import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpre.env_model import (
    EnvModel,
    OffspringLaw,
    check_hypothesis_H,
    env_summary,
    moment,
    new_offspring_law,
)
from bpre.errors import InvalidEnv, NegativeMass, NonZeroP0, NotNormalized, NotSupercritical
from bpre.exact_engine import PmfVector, step_quenched
from conftest import ENV_A, ENV_B, ENV_C


def test_doubling_law():
    law = new_offspring_law([0, 0, 1])
    assert law.mean == 2.0
    assert law.max_offspring == 2 and law.min_offspring == 2


def test_mean_by_hand():
    assert new_offspring_law([0, 0.3, 0.7]).mean == pytest.approx(1.7, abs=1e-15)


@pytest.mark.parametrize(
    "probs, err",
    [
        ([0.1, 0, 0.9], NonZeroP0),
        ([0, 0.5, 0.4], NotNormalized),
        ([0, -0.1, 1.1], NegativeMass),
        ([0, float("nan"), 1], NotNormalized),
        ([1.0], NotNormalized),
    ],
)
def test_invalid_laws(probs, err):
    with pytest.raises(err):
        new_offspring_law(probs)


def test_renormalizes_only_within_tolerance():
    law = new_offspring_law([0, 0.5, 0.5 + 5e-13])
    assert math.fsum(law.probs) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(NotNormalized):
        new_offspring_law([0, 0.5, 0.5 + 1e-11])


def test_trailing_zeros_trimmed_and_frozen():
    law = new_offspring_law([0, 0, 1, 0, 0])
    assert law.probs.size == 3
    with pytest.raises(ValueError):
        law.probs[1] = 0.5


def test_offspring_cap():
    with pytest.raises(NotNormalized):
        new_offspring_law([0] * 70 + [1])


@pytest.mark.parametrize(
    "probs, p, expected",
    [([0, 0, 1], 1, 2.0), ([0, 0.3, 0.7], 2, 3.1), ([0, 0, 0.5, 0.5], 1, 2.5)],
)
def test_moment_examples(probs, p, expected):
    assert moment(new_offspring_law(probs), p) == pytest.approx(expected, rel=1e-15)


def test_moment_rejects_nonpositive_order():
    with pytest.raises(ValueError):
        moment(new_offspring_law([0, 0, 1]), 0)


def test_mean_matches_generating_function_derivative():
    # f(s) = sum p_j s^j ; f'(1) from the pmf of a one-step propagation
    for env in (ENV_A, ENV_B, ENV_C):
        for law in env.laws:
            pmf = step_quenched(PmfVector.delta(1), law)
            coeffs = pmf.masses
            deriv = np.polynomial.polynomial.polyder(coeffs)
            assert law.mean == pytest.approx(np.polynomial.polynomial.polyval(1.0, deriv), abs=1e-12)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.floats(0.1, 4.0), st.floats(0.1, 4.0))
@settings(max_examples=60, deadline=None)
def test_moment_nondecreasing_in_order(raw, p, q):
    probs = np.array([0.0] + raw)
    law = OffspringLaw(probs / probs.sum())
    lo, hi = sorted((p, q))
    assert moment(law, lo) <= moment(law, hi) * (1 + 1e-12)


def test_env_summary_env_a():
    s = env_summary(ENV_A)
    assert s.E_log_m == pytest.approx((math.log(2) + math.log(3)) / 2, rel=1e-15)
    assert s.sigma2 == pytest.approx(((math.log(3) - math.log(2)) / 2) ** 2, rel=1e-12)
    assert s.sigma2 == pytest.approx(0.0411005, abs=1e-7)
    assert s.E_m_pow(1.0) == pytest.approx(2.5)


def test_env_summary_single_law_sigma_zero():
    assert env_summary(EnvModel.single([0, 0, 1])).sigma2 == 0.0


def test_not_supercritical():
    env = EnvModel.single([0, 0.95, 0.05])  # m = 1.05 > 1: supercritical
    env_summary(env)
    sub = EnvModel(([0, 1], [0, 0, 1]), [0.5, 0.5])  # E log m = log2 / 2 > 0
    env_summary(sub)
    with pytest.raises(NotSupercritical):
        env_summary(EnvModel.single([0, 1]))


def test_env_validation():
    with pytest.raises(InvalidEnv):
        EnvModel(([0, 0, 1], [0, 0, 0, 1]), [0.5, 0.3])
    with pytest.raises(InvalidEnv):
        EnvModel(([0, 0, 1], [0, 0, 0, 1]), [1.0, 0.0])
    with pytest.raises(InvalidEnv):
        EnvModel(([0, 0, 1],), [0.5, 0.5])


def test_json_roundtrip_and_hash():
    env = EnvModel.from_json(json.dumps(ENV_B.to_dict()))
    assert env.env_hash() == ENV_B.env_hash()
    assert env.env_hash() != ENV_A.env_hash()


def test_with_weights_drops_zero():
    env = ENV_A.with_weights([0.0, 1.0])
    assert env.n_laws == 1 and env.means[0] == 3.0


def test_hypothesis_env_b():
    rep = check_hypothesis_H(ENV_B, 1.0)
    assert rep.holds
    assert rep.A1 == pytest.approx(1.7)
    assert rep.p1_sup == pytest.approx(0.3)
    assert rep.underline_m == 1
    assert rep.gamma is None and not rep.p1_zero
    assert rep.A == pytest.approx(math.sqrt(3.7))


def test_hypothesis_env_c_large_delta():
    rep = check_hypothesis_H(ENV_C, 200.0)
    assert rep.p1_zero and rep.underline_m == 2
    assert rep.A == pytest.approx(3.0, rel=5e-3)
    assert rep.gamma == pytest.approx(math.log(2) / math.log(3), rel=5e-3)
    assert 0 < rep.gamma < 1


def test_hypothesis_low_mean_law():
    # mean 1.1 > 1, so A1 > 1 and the report holds
    rep = check_hypothesis_H(EnvModel.single([0, 0.9, 0.1]))
    assert rep.A1 == pytest.approx(1.1) and rep.holds
    rep = check_hypothesis_H(EnvModel(([0, 1], [0, 0, 0, 1]), [0.5, 0.5]))
    assert not rep.holds


@pytest.mark.parametrize("env", [ENV_A, ENV_B, ENV_C])
def test_A_nondecreasing_in_delta(env):
    deltas = [0.1, 0.5, 1, 2, 5, 20]
    As = [check_hypothesis_H(env, d).A for d in deltas]
    assert all(b >= a * (1 - 1e-12) for a, b in zip(As, As[1:]))


@pytest.mark.parametrize("env", [ENV_A, ENV_B, ENV_C])
def test_underline_m_iff_p1_zero(env):
    rep = check_hypothesis_H(env)
    assert (rep.underline_m >= 2) == rep.p1_zero
    assert (rep.gamma is not None) == rep.p1_zero
