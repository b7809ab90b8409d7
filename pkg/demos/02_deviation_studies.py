# %% [markdown]
# # Large deviations and the harmonic-moment dichotomy by simulation
#
# Each study returns a `StudyResult` with tabulated rows and a verdict.
# Sample sizes here are small so the demo runs in well under a minute;
# the acceptance suite uses the full sizes.

# %%
from bpre import EnvModel, run_harmonic_study, run_ldp_study, run_moment_study

env = EnvModel.from_dict({"laws": [[0, 0.2, 0.8], [0, 0.1, 0.2, 0.3, 0.4]], "weights": [0.5, 0.5]})


def show(res):
    print(f"== {res.study_id}: {res.verdict} ({res.runtime_s:.1f} s)")
    for r in res.rows:
        flag = {True: "ok", False: "FAIL", None: "?"}[r.ok]
        print(f"  {r.family:<10} {r.label:<28} est={r.estimate:.5g} theory={r.theory_value:.5g} [{flag}]")


# %% [markdown]
# Lower-tail large deviations of `log Z_n / n`, estimated under the tilted
# environment law and corrected by the exact likelihood ratio.  The slope of
# `log P` against `n` is compared with `-Lambda*(x)`.

# %%
show(run_ldp_study(env, [0.75], [25, 50, 100], 20_000, seed=1))

# %% [markdown]
# Moment ratios `E Z_n**t / (E m0**t)**n` settle quickly for `t < 0`.

# %%
show(run_moment_study(env, [-0.5], [6, 20, 40, 80], 20_000, seed=2))

# %% [markdown]
# Harmonic moments `E W_n**(-a)`: bounded below the critical exponent,
# blowing up above it.

# %%
show(run_harmonic_study(env, [0.5, 1.5], [5, 10, 20], 20_000, seed=3, relative=True))
