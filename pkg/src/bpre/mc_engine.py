"""Trajectory simulation, importance sampling and distributional statistics.

Trajectories are simulated in fixed-size blocks.  Block ``b`` of stream ``s``
always draws from the counter-based generator keyed by ``(seed, s, b)``, and
every block is simulated at full size, so trajectory ``i`` depends only on
``(seed, stream, i)``: not on ``M`` and not on how blocks are spread over
worker processes.

One generation given ``Z_k`` individuals is drawn as a multinomial split over
offspring counts using sequential exact binomials, which costs ``O(K_off)``
per generation instead of ``O(Z_k)``.  Above ``z_cap`` the martingale is frozen
(``log W`` constant) and only ``log Pi`` keeps moving.
"""

from __future__ import annotations

import math
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .env_model import EnvModel, env_summary
from .errors import DegenerateTilt, HypothesisViolated, PreconditionViolated
from .rate_function import RateFunction, TiltedEnvModel, tilt

BLOCK = 2048
Z_CAP_DEFAULT = 10**9
INT64_MAX = np.iinfo(np.int64).max


def stream_id(name: str | int) -> int:
    return name if isinstance(name, int) else zlib.crc32(name.encode())


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for the key path ``(seed, *key)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def max_exact_cap(env: EnvModel) -> int:
    """Largest cap for which one more generation cannot overflow int64."""
    return INT64_MAX // (env.k_off + 1)


def _as_env(env) -> EnvModel:
    return env.as_env if isinstance(env, TiltedEnvModel) else env


@dataclass(frozen=True)
class _Kernel:
    """Per-generation sampling tables for one environment law."""

    cum_weights: np.ndarray
    cond: np.ndarray  # cond[l, j] = P(X = j | X >= j) under law l
    columns: np.ndarray  # offspring counts with positive mass somewhere
    means: np.ndarray
    log_means: np.ndarray

    @classmethod
    def build(cls, env: EnvModel, weights=None) -> "_Kernel":
        w = env.weights if weights is None else np.asarray(weights, dtype=float)
        table = env.prob_table()
        tails = np.flip(np.cumsum(np.flip(table, axis=1), axis=1), axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(tails > 0, table / tails, 0.0)
        for l, law in enumerate(env.laws):
            cond[l, law.max_offspring] = 1.0
        cond = np.clip(cond, 0.0, 1.0)
        cols = np.flatnonzero(table.any(axis=0))
        cw = np.cumsum(w)
        cw[-1] = 1.0
        return cls(cw, cond, cols, env.means.copy(), env.log_means.copy())

    def draw_env(self, gen: np.random.Generator, size: int) -> np.ndarray:
        u = gen.random(size)
        return np.searchsorted(self.cum_weights, u, side="right").clip(0, self.cum_weights.size - 1)

    def offspring(self, gen: np.random.Generator, z: np.ndarray, e: np.ndarray) -> np.ndarray:
        remaining = z.copy()
        out = np.zeros_like(z)
        for j in self.columns:
            if j == 0:
                continue
            p = self.cond[e, j]
            if not p.any():
                continue
            nj = remaining if np.all(p == 1.0) else gen.binomial(remaining, p)
            out += j * nj
            remaining = remaining - nj
        return out


@dataclass(frozen=True)
class _BlockSpec:
    env: EnvModel
    kernel: _Kernel
    first: _Kernel | None
    n: int
    record: tuple
    z_cap: int
    keep_env: bool
    extend: int
    seed: int
    stream: int


def _simulate_block(spec: _BlockSpec, block: int) -> dict:
    gen = substream(spec.seed, spec.stream, block)
    B = BLOCK
    rec = {g: i for i, g in enumerate(spec.record)}
    R = len(spec.record)
    log_pi_r = np.zeros((B, R))
    log_w_r = np.zeros((B, R))
    z_r = np.full((B, R), -1, dtype=np.int64)
    env_idx = np.zeros((B, spec.n + spec.extend), dtype=np.int16) if spec.keep_env else None

    z = np.ones(B, dtype=np.int64)
    log_pi = np.zeros(B)
    log_w = np.zeros(B)
    active = np.ones(B, dtype=bool)
    frozen_at = np.full(B, -1, dtype=np.int64)
    if 0 in rec:
        z_r[:, rec[0]] = 1
    for k in range(spec.n):
        kern = spec.first if (k == 0 and spec.first is not None) else spec.kernel
        e = kern.draw_env(gen, B)
        if env_idx is not None:
            env_idx[:, k] = e
        z_new = kern.offspring(gen, np.where(active, z, 0), e)
        m = kern.means[e]
        with np.errstate(divide="ignore", invalid="ignore"):
            inc = np.log(z_new / (z.astype(np.float64) * m))
        log_w = np.where(active, log_w + inc, log_w)
        log_pi = log_pi + kern.log_means[e]
        z = np.where(active, z_new, -1)
        newly = active & (z > spec.z_cap)
        frozen_at[newly] = k + 1
        active &= ~newly
        z[newly] = -1
        if k + 1 in rec:
            c = rec[k + 1]
            log_pi_r[:, c] = log_pi
            log_w_r[:, c] = log_w
            z_r[:, c] = z
    if spec.extend:
        ext_gen = substream(spec.seed, spec.stream, block, 1)
        env_idx[:, spec.n :] = spec.kernel.draw_env(ext_gen, B * spec.extend).reshape(B, spec.extend)
    return {
        "log_pi": log_pi_r,
        "log_w": log_w_r,
        "z": z_r,
        "frozen_at": frozen_at,
        "env_idx": env_idx,
    }


@dataclass
class SimBatch:
    """Recorded quantities for ``M`` trajectories at generations ``record``."""

    record: tuple
    log_pi: np.ndarray
    log_w: np.ndarray
    z: np.ndarray
    frozen_at: np.ndarray
    env_idx: np.ndarray | None
    tilt: TiltedEnvModel | None = None

    def col(self, n: int) -> int:
        return self.record.index(n)

    def log_z(self, n: int) -> np.ndarray:
        c = self.col(n)
        return self.log_pi[:, c] + self.log_w[:, c]

    def log_lr(self, n: int) -> np.ndarray:
        """Log likelihood ratio base/sampling law of the first ``n`` environments."""
        if self.tilt is None:
            return np.zeros(self.log_pi.shape[0])
        return self.tilt.log_likelihood_ratio(self.log_pi[:, self.col(n)], n)


def simulate(
    env,
    n: int,
    M: int,
    seed: int,
    stream: int | str = 0,
    record: Sequence[int] | None = None,
    z_cap: int = Z_CAP_DEFAULT,
    workers: int = 1,
    keep_env: bool = False,
    extend: int = 0,
    first_generation: tuple | None = None,
) -> SimBatch:
    """Simulate ``M`` trajectories of length ``n`` under ``env`` (base or tilted).

    ``first_generation = (env0, weights0)`` overrides the law of generation 0,
    which is how conditioned first steps are sampled.  ``extend`` extra
    environment indices are drawn after generation ``n`` (no population).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    base = _as_env(env)
    if z_cap > max_exact_cap(base):
        raise ValueError(f"z_cap {z_cap} would overflow int64 for K_off={base.k_off}")
    rec = tuple(sorted(set(record if record is not None else [n])))
    if rec[0] < 0 or rec[-1] > n:
        raise ValueError("record generations must lie in [0, n]")
    first = None
    if first_generation is not None:
        env0, w0 = first_generation
        # offspring drawn from env0's laws, but Pi and W keep the base means
        first = replace(_Kernel.build(env0, w0), means=base.means.copy(), log_means=base.log_means.copy())
    spec = _BlockSpec(
        base,
        _Kernel.build(base),
        first,
        int(n),
        rec,
        int(z_cap),
        keep_env or extend > 0,
        int(extend),
        int(seed),
        stream_id(stream),
    )
    nblocks = -(-M // BLOCK)
    if workers > 1 and nblocks > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_block, [spec] * nblocks, range(nblocks)))
    else:
        parts = [_simulate_block(spec, b) for b in range(nblocks)]

    def cat(key):
        if parts[0][key] is None:
            return None
        return np.concatenate([p[key] for p in parts])[:M]

    return SimBatch(
        rec,
        cat("log_pi"),
        cat("log_w"),
        cat("z"),
        cat("frozen_at"),
        cat("env_idx"),
        env if isinstance(env, TiltedEnvModel) else None,
    )


@dataclass
class Trajectory:
    env_indices: np.ndarray
    log_Pi: np.ndarray
    Z_exact: list
    log_W: np.ndarray
    frozen_at: int | None

    @property
    def n(self) -> int:
        return self.env_indices.size

    @property
    def log_Z(self) -> np.ndarray:
        return self.log_Pi + self.log_W

    def S(self, E_log_m: float) -> np.ndarray:
        """Centred random walk ``log Pi_k - k E log m0``."""
        return self.log_Pi - E_log_m * np.arange(self.log_Pi.size)


def sample_trajectory(
    env, n: int, seed: int, index: int = 0, stream: int | str = 0, z_cap: int = Z_CAP_DEFAULT
) -> Trajectory:
    """Trajectory number ``index`` of stream ``stream``; identical to row ``index``
    of any :func:`simulate` call with the same seed, stream and cap."""
    base = _as_env(env)
    block, off = divmod(index, BLOCK)
    spec = _BlockSpec(
        base, _Kernel.build(base), None, int(n), tuple(range(n + 1)), int(z_cap), True, 0,
        int(seed), stream_id(stream),
    )
    out = _simulate_block(spec, block)
    z = out["z"][off]
    fa = int(out["frozen_at"][off])
    return Trajectory(
        env_indices=out["env_idx"][off].astype(np.int64),
        log_Pi=out["log_pi"][off],
        Z_exact=[int(v) for v in (z if fa < 0 else z[:fa])],
        log_W=out["log_w"][off],
        frozen_at=None if fa < 0 else fa,
    )


# --- estimators ---------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorSummary:
    mean: float
    std_error: float
    n_samples: int
    effective_sample_size: float
    ci95: tuple = field(default=(math.nan, math.nan))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std_error": self.std_error,
            "n_samples": self.n_samples,
            "effective_sample_size": self.effective_sample_size,
            "ci95": list(self.ci95),
        }


def summarize(values: np.ndarray, lr: np.ndarray | None = None) -> EstimatorSummary:
    """Plain mean with standard error; ``lr`` (likelihood ratios) only feeds the ESS."""
    v = np.asarray(values, dtype=np.float64)
    M = v.size
    mean = math.fsum(v) / M
    sd = math.sqrt(math.fsum((v - mean) ** 2) / (M - 1)) if M > 1 else math.inf
    se = sd / math.sqrt(M)
    if lr is None:
        ess = float(M)
    else:
        lr = np.asarray(lr, dtype=np.float64)
        s2 = math.fsum(lr**2)
        ess = min(math.fsum(lr) ** 2 / s2, float(M)) if s2 > 0 else 0.0
    return EstimatorSummary(mean, se, M, ess, (mean - 1.96 * se, mean + 1.96 * se))


def _check_negative_moment_gate(env: EnvModel, t: float):
    if t >= 0:
        return
    s = env_summary(env)
    p1_sup = float(env.p1.max())
    if p1_sup >= 1:
        raise PreconditionViolated("negative moments need ess sup p1 < 1")
    if not s.E_p1 < s.E_m_pow(t):
        raise PreconditionViolated(
            f"negative moments need E p1 < E m0**t: {s.E_p1:.6g} >= {s.E_m_pow(t):.6g}"
        )


@dataclass
class MomentPath:
    """``W_n**t`` per trajectory under the ``t``-tilted environment, common
    random numbers across ``n``."""

    t: float
    n_list: tuple
    values: np.ndarray  # (M, len(n_list))

    def summary(self, n: int) -> EstimatorSummary:
        return summarize(self.values[:, self.n_list.index(n)])

    def difference(self, n2: int, n1: int) -> EstimatorSummary:
        """``r_{n2} - r_{n1}`` estimated on the same trajectories."""
        return summarize(self.values[:, self.n_list.index(n2)] - self.values[:, self.n_list.index(n1)])


def moment_ratio_path(
    env: EnvModel, t: float, n_list, M: int, seed: int, stream=0, z_cap=Z_CAP_DEFAULT, workers=1
) -> MomentPath:
    _check_negative_moment_gate(env, t)
    n_list = tuple(sorted(set(int(n) for n in n_list)))
    batch = simulate(tilt(env, t), n_list[-1], M, seed, stream, n_list, z_cap, workers)
    return MomentPath(float(t), n_list, np.exp(t * batch.log_w))


def estimate_moment_ratio(
    env: EnvModel, t: float, n: int, M: int, seed: int, stream=0, z_cap=Z_CAP_DEFAULT, workers=1
) -> EstimatorSummary:
    """Estimate ``E Z_n**t / (E m0**t)**n`` as the tilted mean of ``W_n**t``."""
    return moment_ratio_path(env, t, [n], M, seed, stream, z_cap, workers).summary(n)


@dataclass(frozen=True)
class LdpTailEstimate:
    log_prob: float
    log_prob_se: float
    summary: EstimatorSummary
    t_star: float
    upper: bool
    log_prob_pi: float  # same estimator with log Pi_n in place of log Z_n


def _tail_cells(batch: SimBatch, n: int, x: float, upper: bool):
    lr = np.exp(batch.log_lr(n))
    lz = batch.log_z(n)
    lp = batch.log_pi[:, batch.col(n)]
    if upper:
        ind, ind_pi = lz >= n * x, lp >= n * x
    else:
        ind, ind_pi = lz <= n * x, lp <= n * x
    return ind * lr, ind_pi * lr, lr


def _safe_log(v: float) -> float:
    return math.log(v) if v > 0 else -math.inf


def estimate_ldp_tail(
    env: EnvModel,
    x: float,
    n: int,
    M: int,
    seed: int,
    stream=0,
    z_cap=Z_CAP_DEFAULT,
    workers=1,
    t: float | None = None,
) -> LdpTailEstimate:
    """Importance-sampling estimate of ``P(log Z_n >= n x)`` (``x`` above the
    mean) or ``P(log Z_n <= n x)`` (below), tilting the environment at the
    dual point ``t*`` of ``x``.  ``t`` forces a different tilt."""
    rf = RateFunction(env)
    if rf.degenerate:
        raise DegenerateTilt("m0 is constant; nothing to tilt")
    if x == rf.E_log_m:
        raise PreconditionViolated("x equals E log m0: the tilt is trivial")
    if t is None:
        if not rf.x_min < x < rf.x_max:
            raise PreconditionViolated(f"x={x} outside ({rf.x_min}, {rf.x_max})")
        t = rf.solve_dual(x)
    upper = x > rf.E_log_m
    batch = simulate(tilt(env, t), n, M, seed, stream, [n], z_cap, workers)
    vals, vals_pi, lr = _tail_cells(batch, n, x, upper)
    s = summarize(vals, lr)
    p_pi = math.fsum(vals_pi) / M
    return LdpTailEstimate(
        _safe_log(s.mean),
        s.std_error / s.mean if s.mean > 0 else math.inf,
        s,
        float(t),
        upper,
        _safe_log(p_pi),
    )


def sample_W(env: EnvModel, n_total: int, M: int, seed: int, stream=0, z_cap=Z_CAP_DEFAULT, workers=1):
    """``M`` draws of ``W_{n_total}`` as proxies for ``W``.

    Negative moments of ``W_n`` increase to those of ``W``, so averages of
    ``W_n**-a`` computed from these samples are lower estimates.
    """
    e = env_summary(env).E_log_m
    if n_total * e < math.log(1e12):
        warnings.warn(
            f"E log Pi_{n_total} = {n_total * e:.1f} < log 1e12; W_n is a coarse proxy",
            stacklevel=2,
        )
    batch = simulate(env, n_total, M, seed, stream, [n_total], z_cap, workers)
    return np.exp(batch.log_w[:, 0])


def laplace_estimate(samples, t: float) -> float:
    s = np.asarray(samples, dtype=np.float64)
    return math.fsum(np.exp(-t * s)) / s.size


# Abramowitz & Stegun 26.2.17, |error| < 7.5e-8
_AS_P = 0.2316419
_AS_B = (0.319381530, -0.356563782, 1.781477937, -1.821255978, 1.330274429)


def normal_cdf(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    k = 1.0 / (1.0 + _AS_P * ax)
    poly = k * (_AS_B[0] + k * (_AS_B[1] + k * (_AS_B[2] + k * (_AS_B[3] + k * _AS_B[4]))))
    upper = np.exp(-0.5 * ax * ax) / math.sqrt(2 * math.pi) * poly
    out = np.where(x >= 0, 1.0 - upper, upper)
    return out if out.ndim else float(out)


def ks_distance(samples, reference_cdf: Callable = normal_cdf) -> float:
    """``sup |F_M - F|`` over the sample points (both one-sided gaps)."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    M = x.size
    F = np.asarray(reference_cdf(x), dtype=np.float64)
    i = np.arange(1, M + 1)
    return float(max(np.max(i / M - F), np.max(F - (i - 1) / M)))


def ks_noise_floor(M: int) -> float:
    """Asymptotic 95% critical value of the one-sample KS statistic."""
    return 1.36 / math.sqrt(M)


# --- harmonic moments ---------------------------------------------------------


def _bregman_neg_power(u: np.ndarray, v: np.ndarray, a: float) -> np.ndarray:
    """Bregman gap ``phi(e^v) - phi(e^u) - phi'(e^u)(e^v - e^u)`` for ``phi(w) = w**-a``."""
    d = v - u
    small = np.abs(d) < 1e-3
    f = np.expm1(-a * d) + a * np.expm1(d)
    ds = d[small]
    # Taylor series: sum_k ((-a)^k + a) d^k / k!, k >= 2
    series = np.zeros_like(ds)
    term = np.ones_like(ds)
    for k in range(1, 8):
        term = term * ds / k
        if k >= 2:
            series += ((-a) ** k + a) * term
    f[small] = series
    return np.maximum(f, 0.0) * np.exp(-a * u)


@dataclass
class HarmonicPath:
    a: float
    n_list: tuple
    g: float  # E p1 m0**a
    values: np.ndarray  # per-trajectory unbiased contributions, (M, len(n_list))

    def summary(self, n: int) -> EstimatorSummary:
        return summarize(self.values[:, self.n_list.index(n)])

    @property
    def means(self) -> np.ndarray:
        return np.array([self.summary(n).mean for n in self.n_list])


def harmonic_moment_path(
    env: EnvModel, a: float, n_list, M: int, seed: int, stream=0, z_cap=Z_CAP_DEFAULT, workers=1
) -> HarmonicPath:
    """Estimate ``E W_n**-a`` for every ``n`` in ``n_list``.

    Splitting on the length ``L`` of the initial run of single-child
    generations gives, with ``g = E p1 m0**a`` and
    ``h_k = E[W_k**-a ; Z_1 >= 2]``,

        E W_n**-a = g**n + sum_{L<n} g**L h_{n-L}.

    ``g`` is exact.  ``h_k`` is sampled from trajectories whose first
    generation is conditioned on ``Z_1 >= 2``: ``h_1`` is exact and each
    increment ``h_{k+1} - h_k`` is the mean Bregman gap of ``w -> w**-a``
    along the martingale, which is unbiased and nonnegative.  The singleton
    runs carry the mass that ordinary sampling never reaches when
    ``a >= a0``.
    """
    if not a > 0:
        raise ValueError("a must be > 0")
    n_list = tuple(sorted(set(int(n) for n in n_list)))
    N = n_list[-1]
    p1 = env.p1
    g = env.expect(p1 * env.means**a)
    c = 1.0 - env.expect(p1)
    if c <= 0:
        raise PreconditionViolated("P(Z_1 >= 2) = 0")
    h1 = 0.0
    cond_laws, cond_w, keep = [], [], []
    for i, law in enumerate(env.laws):
        q = law.probs.copy()
        j = np.arange(q.size)
        h1 += env.weights[i] * law.mean**a * math.fsum(q[2:] * j[2:] ** (-a))
        if law.p1 < 1:
            q[1] = 0.0
            cond_laws.append(q / math.fsum(q))
            cond_w.append(env.weights[i] * (1 - law.p1))
            keep.append(i)
    # conditioned first law in the same index layout as env (zero weight where p1 = 1)
    w0 = np.zeros(env.n_laws)
    w0[keep] = np.array(cond_w) / math.fsum(cond_w)
    first_env = EnvModel(
        tuple(cond_laws[keep.index(i)] if i in keep else env.laws[i].probs for i in range(env.n_laws)),
        np.full(env.n_laws, 1.0 / env.n_laws),
    )
    batch = simulate(
        env, N, M, seed, stream, range(1, N + 1), z_cap, workers, first_generation=(first_env, w0)
    )
    lw = batch.log_w
    S = np.empty((batch.log_w.shape[0], N + 1))
    S[:, 1] = h1
    if N > 1:
        D = _bregman_neg_power(lw[:, :-1], lw[:, 1:], a)
        S[:, 2:] = h1 + c * np.cumsum(D, axis=1)
    V = np.empty_like(S)
    V[:, 0] = 1.0
    for k in range(1, N + 1):
        V[:, k] = g * V[:, k - 1] + S[:, k]
    return HarmonicPath(float(a), n_list, g, V[:, list(n_list)])


# --- Berry-Esseen statistic -----------------------------------------------------


@dataclass(frozen=True)
class BerryEsseenSample:
    ks: float
    samples: np.ndarray
    n: int
    horizon: int


def berry_esseen_statistic(
    env: EnvModel,
    n: int,
    horizon: int,
    M: int,
    seed: int,
    stream=0,
    z_cap=Z_CAP_DEFAULT,
    workers=1,
    tol: float = 1e-12,
) -> BerryEsseenSample:
    """Samples of ``Pi_n (W_{n+h} - W_n) / (sqrt(Z_n) delta_inf(T^n xi))`` and
    their KS distance to the standard normal."""
    ratios = np.array([l.variance_ratio for l in env.laws])
    if np.any(ratios <= 1.0):
        raise HypothesisViolated("needs ess inf m0(2)/m0**2 > 1 (no deterministic laws)")
    excess = ratios - 1.0
    a1 = float(env.means.min())
    if a1 <= 1:
        raise HypothesisViolated("needs every law mean > 1")
    # remainder after K terms <= max_excess * A1**-K * A1/(A1-1) <= tol * min_excess
    K = math.ceil(math.log(excess.max() * a1 / (a1 - 1) / (tol * excess.min())) / math.log(a1))
    extend = max(K - horizon, 0)
    batch = simulate(env, n + horizon, M, seed, stream, [n, n + horizon], z_cap, workers, extend=extend)
    zn = batch.z[:, batch.col(n)]
    if np.any(zn < 0):
        raise PreconditionViolated(f"population exceeded z_cap={z_cap} before generation {n}")
    tail = batch.env_idx[:, n:].astype(np.int64)
    log_pi_tail = np.cumsum(env.log_means[tail], axis=1)
    log_pi_tail = np.concatenate([np.zeros((tail.shape[0], 1)), log_pi_tail[:, :-1]], axis=1)
    delta2 = np.sum(excess[tail] * np.exp(-log_pi_tail), axis=1)
    dlw = batch.log_w[:, batch.col(n + horizon)] - batch.log_w[:, batch.col(n)]
    stat = np.sqrt(zn.astype(np.float64)) * np.expm1(dlw) / np.sqrt(delta2)
    return BerryEsseenSample(ks_distance(stat), stat, n, horizon)
