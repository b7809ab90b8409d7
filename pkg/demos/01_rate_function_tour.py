# %% [markdown]
# # The log-mean cumulant and its dual
#
# A two-state environment: in each generation the offspring law is drawn
# i.i.d. from two laws with different means.  `Lambda(t) = log E m0**t`
# controls every deviation question about `log Z_n`.

# %%
import numpy as np

from bpre import EnvModel, RateFunction, annealed_pmf, critical_a0, env_summary, exact_moment, tilt

env = EnvModel.from_dict({"laws": [[0, 0.2, 0.8], [0, 0.1, 0.2, 0.3, 0.4]], "weights": [0.5, 0.5]})
s = env_summary(env)
rf = RateFunction(env)
print(f"E log m0 = {s.E_log_m:.6f}, Var log m0 = {s.sigma2:.6f}")
print(f"domain of Lambda* = [{rf.x_min:.4f}, {rf.x_max:.4f}]")

# %% [markdown]
# `Lambda*` vanishes at the mean and grows towards the domain ends.  The
# tilt that attains the supremum is the importance-sampling parameter used
# by the Monte Carlo engine.

# %%
for x in np.linspace(rf.x_min, rf.x_max, 7)[1:-1]:
    v, t = rf.legendre(float(x))
    print(f"x = {x:.4f}  Lambda*(x) = {v:.6f}  tilt t* = {t:+.4f}")

# %% [markdown]
# Tilting by `t` reweights the environment states by `m**t`.  Tilts compose
# additively.

# %%
tw = tilt(env, 1.5).tilted_weights
print("tilted weights at t=1.5:", tw)
print("via 0.5 then 1.0:       ", tilt(tilt(env, 0.5).as_env, 1.0).tilted_weights)

# %% [markdown]
# Exact moments for small `n`: the ratio `E Z_n**t / (E m0**t)**n` shows how
# much of the moment comes from the environment alone.

# %%
for n in (2, 4, 6):
    pmf = annealed_pmf(env, n)
    for t in (-1.0, 1.0):
        r = exact_moment(pmf, t).value / np.exp(n * rf.lam(t))
        print(f"n={n} t={t:+.0f}  E Z^t / E Pi^t = {r:.6f}")
print("critical exponent a0 =", critical_a0(env))
