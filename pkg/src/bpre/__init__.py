"""Supercritical branching processes in an i.i.d. random environment.

Finite-support environment laws, the log-mean cumulant function and its
Legendre dual, an exact small-n oracle, a reproducible Monte Carlo engine
and a harness of convergence studies.
"""

from .env_model import (
    EnvModel,
    EnvSummary,
    HypothesisHReport,
    OffspringLaw,
    check_hypothesis_H,
    env_summary,
    moment,
    new_offspring_law,
)
from .errors import *  # noqa: F401,F403
from .exact_engine import (
    PmfVector,
    annealed_pmf,
    delta_inf_sq,
    enumerate_joint,
    exact_moment,
    joint_moment_W,
    marginalize,
    step_quenched,
)
from .harness import (
    MdpSchedule,
    StudyResult,
    run_berry_esseen_study,
    run_clt_study,
    run_harmonic_study,
    run_ldp_study,
    run_mdp_study,
    run_moment_study,
    run_study,
)
from .mc_engine import (
    EstimatorSummary,
    berry_esseen_statistic,
    estimate_ldp_tail,
    estimate_moment_ratio,
    harmonic_moment_path,
    ks_distance,
    laplace_estimate,
    sample_trajectory,
    sample_W,
    simulate,
)
from .rate_function import (
    RateFunction,
    TiltedEnvModel,
    critical_a0,
    lam,
    lambda_star,
    positive_moment_criterion,
    quenched_alpha0,
    tilt,
)

__version__ = "0.1.0"
