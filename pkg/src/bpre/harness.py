"""End-to-end convergence studies.

Each study turns one limit statement into a table of rows with explicit
tolerances.  A row is *designated* when it enters the verdict; its ``ok`` is
``True``/``False`` or ``None`` when Monte Carlo resolution cannot decide.
Verdicts: ``fail`` if any designated row fails, else ``inconclusive`` if any
is undecided, else ``pass``.  Hypothesis gates are evaluated before sampling;
a violated gate raises, and :func:`run_study` converts that into a
``refused`` result.
"""

from __future__ import annotations

import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import exact_engine as ex
from . import mc_engine as mc
from .env_model import EnvModel, check_hypothesis_H, env_summary
from .errors import (
    BpreError,
    DegenerateSigma,
    DegenerateTilt,
    HypothesisViolated,
    PreconditionViolated,
    TruncationExceeded,
)
from .rate_function import RateFunction, critical_a0

VERDICTS = ("pass", "fail", "inconclusive", "refused", "error")

DEFAULT_TOLERANCES = {
    "ldp_slope": 0.02,
    "mdp_rel": 0.25,
    "mdp_oracle_se": 3.0,
    "mdp_trend_se": 2.0,
    "clt_ks": 0.02,
    "clt_band": None,  # default 2 * 1.36 / sqrt(M)
    "moment_oracle_se": 3.0,
    "moment_rate": 0.01,
    "harmonic_flat": 1.02,
    "harmonic_diverge": 2.0,
    "harmonic_tail_frac": 0.9,
    "harmonic_fit_cap": 10.0,
    "laplace_gamma_slack": 0.1,
    "be_slack": 0.1,
}


@dataclass
class Row:
    family: str
    label: str
    n: int | None = None
    x: float | None = None
    t: float | None = None
    estimate: float = math.nan
    std_error: float = math.nan
    theory_value: float = math.nan
    abs_gap: float = math.nan
    tolerance: float = math.nan
    designated: bool = False
    ok: bool | None = None
    paired: float | None = None
    note: str = ""


ROW_FIELDS = tuple(f.name for f in fields(Row))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    return _json_float(obj)


@dataclass
class StudyResult:
    study_id: str
    env_hash: str
    rows: list
    verdict: str
    tolerances: dict
    gates: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    runtime_s: float = 0.0
    params: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)  # name -> list of (x, y)

    def designated(self) -> list:
        return [r for r in self.rows if r.designated]

    def to_dict(self) -> dict:
        d = {
            "study_id": self.study_id,
            "env_hash": self.env_hash,
            "verdict": self.verdict,
            "tolerances": self.tolerances,
            "gates": self.gates,
            "notes": self.notes,
            "runtime_s": self.runtime_s,
            "params": self.params,
            "rows": [asdict(r) for r in self.rows],
        }
        return _clean(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rows_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(ROW_FIELDS) + "\n")
        for r in self.rows:
            cells = [_fmt(getattr(r, k)) for k in ROW_FIELDS]
            buf.write(",".join(_csv_cell(c) for c in cells) + "\n")
        return buf.getvalue()

    def plot_tsv(self) -> dict:
        out = {}
        for name, pts in self.series.items():
            lines = ["x\ty"] + [f"{_fmt(float(a))}\t{_fmt(float(b))}" for a, b in pts]
            out[name] = "\n".join(lines) + "\n"
        return out


def _csv_cell(s: str) -> str:
    if any(c in s for c in ',"\n'):
        return '"' + s.replace('"', '""') + '"'
    return s


def decide(rows) -> str:
    oks = [r.ok for r in rows if r.designated]
    if any(o is False for o in oks):
        return "fail"
    if any(o is None for o in oks):
        return "inconclusive"
    return "pass"


def tolerances_with(overrides: dict | None) -> dict:
    tol = dict(DEFAULT_TOLERANCES)
    for k, v in (overrides or {}).items():
        if k not in tol:
            raise KeyError(f"unknown tolerance {k!r}")
        tol[k] = v
    return tol


def _gate(passed: bool, detail: str, **values) -> dict:
    return {"passed": bool(passed), "detail": detail, **values}


def _refuse(exc_cls, message: str, gates: dict):
    """Raise a gate failure carrying the evaluated gates."""
    err = exc_cls(message)
    err.gates = gates
    raise err


def _h_gate(env: EnvModel) -> dict:
    rep = check_hypothesis_H(env)
    return _gate(rep.holds, "1 < A1 <= m0, finite support", **rep.to_dict())


def _fit_slope(xs, ys, ses=None):
    """OLS slope and its standard error from independent per-point errors."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if not np.all(np.isfinite(ys)):
        return -math.inf if np.any(ys == -math.inf) else math.nan, math.nan
    c = (xs - xs.mean()) / np.sum((xs - xs.mean()) ** 2)
    slope = float(np.sum(c * ys))
    se = math.nan if ses is None else float(math.sqrt(np.sum((c * np.asarray(ses)) ** 2)))
    return slope, se


def _finish(study_id, env, rows, tol, gates, notes, t0, params, series) -> StudyResult:
    return StudyResult(
        study_id, env.env_hash(), rows, decide(rows), tol, gates, notes,
        round(time.perf_counter() - t0, 3), params, series,
    )


# --- hypothesis gates -----------------------------------------------------------


def ldp_gates(env: EnvModel) -> dict:
    rep = check_hypothesis_H(env)
    return {
        "hypothesis_H": _h_gate(env),
        "m0_nonconstant": _gate(not RateFunction(env).degenerate, "m0 must not be constant"),
        "upper_tail_moments": _gate(True, "finite support: all positive moments finite"),
        "lower_tail_p1_zero": _gate(rep.p1_zero, "lower-tail rate equals Lambda* only if p1 = 0"),
    }


def clt_gates(env: EnvModel) -> dict:
    s2 = env_summary(env).sigma2
    return {"sigma2_positive": _gate(s2 > 0, "var log m0 > 0", sigma2=s2)}


def mdp_gates(env: EnvModel) -> dict:
    return {"hypothesis_H": _h_gate(env), **clt_gates(env)}


def moment_gates(env: EnvModel, t_grid) -> dict:
    return {f"t={float(t):g}": _moment_gate(env, float(t)) for t in t_grid}


def harmonic_gates(env: EnvModel) -> dict:
    p1_sup = float(env.p1.max())
    return {"p1_sup_below_1": _gate(p1_sup < 1, "ess sup p1 < 1", p1_sup=p1_sup),
            "hypothesis_H": _h_gate(env)}


def berry_esseen_gates(env: EnvModel, epsilon: float) -> dict:
    s = env_summary(env)
    rate = s.E_m_pow(-epsilon / 2)
    vr_min = min(l.variance_ratio for l in env.laws)
    return {
        "E_p1_below_rate": _gate(s.E_p1 < rate, "E p1 < E m0**(-eps/2)", E_p1=s.E_p1, rate=rate),
        "variance_floor": _gate(vr_min > 1, "ess inf m0(2)/m0**2 > 1", min_ratio=vr_min),
        "moment_2_plus_eps": _gate(True, "finite support: E Z1**(2+eps) finite"),
    }


def _moment_gate(env: EnvModel, t: float) -> dict:
    s = env_summary(env)
    if t >= 0:
        return _gate(True, "t >= 0: finite support suffices")
    p1_sup = float(env.p1.max())
    ok = p1_sup < 1 and s.E_p1 < s.E_m_pow(t)
    return _gate(ok, "t < 0 needs ess sup p1 < 1 and E p1 < E m0**t",
                 p1_sup=p1_sup, E_p1=s.E_p1, E_m_pow_t=s.E_m_pow(t))


# --- LDP ------------------------------------------------------------------------


def run_ldp_study(
    env: EnvModel,
    x_grid,
    n_list,
    M: int,
    seed: int,
    *,
    tolerances: dict | None = None,
    workers: int = 1,
    z_cap: int = mc.Z_CAP_DEFAULT,
    study_id: str = "ldp",
) -> StudyResult:
    """Slope of ``log P(log Z_n / n >= x)`` (or ``<= x`` below the mean) in ``n``
    against ``-Lambda*(x)``.

    Lower-tail rows for environments with ``p1 > 0`` somewhere only test the
    one-sided bound ``slope >= -Lambda*(x)``, since the true lower rate can be
    smaller.  Points outside ``[log m_min_offspring, log K_off]`` make the event
    impossible; rows there are checked in the extended reals.
    """
    t0 = time.perf_counter()
    tol = tolerances_with(tolerances)
    rf = RateFunction(env)
    s = env_summary(env)
    rep = check_hypothesis_H(env)
    n_list = sorted(int(n) for n in n_list)
    gates = ldp_gates(env)
    if rf.degenerate:
        _refuse(DegenerateTilt, "m0 is constant: no large deviations to tilt towards", gates)
    if not rep.holds:
        _refuse(HypothesisViolated, "hypothesis (H) fails: some law has mean <= 1", gates)
    rows, notes, series = [], [], {}
    log_lo = math.log(rep.underline_m)
    log_hi = math.log(env.k_off)
    for x in (float(v) for v in x_grid):
        if x == s.E_log_m:
            notes.append(f"x={x!r} equals E log m0; skipped")
            continue
        upper = x > s.E_log_m
        bound_only = not upper and not rep.p1_zero
        lam_star = rf.lambda_star(x)
        theory = -lam_star
        impossible = (not upper and x < log_lo) or (upper and x > log_hi)
        side = "upper" if upper else "lower"
        if impossible:
            for n in n_list:
                rows.append(Row("tail", f"{side} x={x:g}", n=n, x=x, estimate=-math.inf,
                                std_error=0.0, theory_value=-n * lam_star, paired=-math.inf,
                                note="event impossible"))
            # P = 0 for every n and Lambda*(x) = inf: both sides are -inf
            rows.append(Row("slope", f"{side} x={x:g}", x=x, estimate=-math.inf, std_error=0.0,
                            theory_value=theory, abs_gap=0.0, tolerance=tol["ldp_slope"],
                            designated=True, ok=theory == -math.inf, paired=-math.inf,
                            note="degenerate: event impossible, compared in extended reals"))
            continue
        if not rf.x_min < x < rf.x_max:
            notes.append(f"x={x!r} outside the open tilt domain; not tested")
            continue
        logs, ses, pairs = [], [], []
        for n in n_list:
            est = mc.estimate_ldp_tail(env, x, n, M, seed, mc.stream_id(f"ldp:{x!r}:{n}"),
                                       z_cap, workers)
            logs.append(est.log_prob)
            ses.append(est.log_prob_se)
            pairs.append(est.log_prob_pi)
            rows.append(Row("tail", f"{side} x={x:g}", n=n, x=x, t=est.t_star,
                            estimate=est.log_prob, std_error=est.log_prob_se,
                            theory_value=-n * lam_star, paired=est.log_prob_pi,
                            note=f"ess={est.summary.effective_sample_size:.1f}"))
        series[f"logp_{side}_x{x:g}"] = list(zip(n_list, logs))
        slope, se = _fit_slope(n_list, logs, ses)
        slope_pi, _ = _fit_slope(n_list, pairs)
        if bound_only:
            gap = max(theory - slope, 0.0)
            note = "bound only: lower rate <= Lambda*(x) when p1 > 0"
        else:
            gap = abs(slope - theory)
            note = ""
        rows.append(Row("slope", f"{side} x={x:g}", x=x, estimate=slope, std_error=se,
                        theory_value=theory, abs_gap=gap, tolerance=tol["ldp_slope"],
                        designated=True, ok=bool(gap <= tol["ldp_slope"]), paired=slope_pi,
                        note=note))
    params = {"x_grid": list(x_grid), "n_list": n_list, "M": M, "seed": seed}
    return _finish(study_id, env, rows, tol, gates, notes, t0, params, series)


# --- MDP ------------------------------------------------------------------------


@dataclass(frozen=True)
class MdpSchedule:
    """Normalization ``a_n = n**beta`` with ``beta`` strictly between 1/2 and 1."""

    beta: float

    def __post_init__(self):
        if not 0.5 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (1/2, 1), got {self.beta}")

    def a(self, n: int) -> float:
        return float(n) ** self.beta


def _exact_ratio(env: EnvModel, t: float, n: int) -> float:
    """``E Z_n**t / (E m0**t)**n`` from the exact annealed law."""
    pmf = ex.annealed_pmf(env, n)
    mom = ex.exact_moment(pmf, t)
    return mom.value / math.exp(n * RateFunction(env).lam(t))


def run_mdp_study(
    env: EnvModel,
    schedule: MdpSchedule,
    x_grid,
    n_list,
    M: int,
    seed: int,
    *,
    t_grid=(),
    side: str = "lower",
    oracle_max_n: int = 6,
    tolerances: dict | None = None,
    workers: int = 1,
    z_cap: int = mc.Z_CAP_DEFAULT,
    study_id: str = "mdp",
) -> StudyResult:
    """Scaled tails ``(n/a_n**2) log P(log Z_n - n E log m0 <= -x a_n)`` against
    ``-x**2/(2 sigma**2)``, plus moment-ratio rows ``E Z_n**t_n / E Pi_n**t_n``
    at ``t_n = t a_n / n`` against 1.

    Tails are importance sampled at the dual point of the threshold.  When the
    threshold leaves the tilt domain no tilt exists and plain Monte Carlo is
    used (the event may then be impossible, giving ``-inf``).
    """
    t0 = time.perf_counter()
    tol = tolerances_with(tolerances)
    if side not in ("lower", "upper"):
        raise ValueError("side must be 'lower' or 'upper'")
    s = env_summary(env)
    rf = RateFunction(env)
    gates = mdp_gates(env)
    if not s.sigma2 > 0:
        _refuse(DegenerateSigma, "var log m0 = 0: no moderate deviations to measure", gates)
    if not gates["hypothesis_H"]["passed"]:
        _refuse(HypothesisViolated, "hypothesis (H) fails: some law has mean <= 1", gates)
    n_list = sorted(int(n) for n in n_list)
    sign = -1.0 if side == "lower" else 1.0
    rows, notes, series = [], [], {}
    for x in (float(v) for v in x_grid):
        theory = -x * x / (2 * s.sigma2)
        pts = []
        for n in n_list:
            a_n = schedule.a(n)
            y = s.E_log_m + sign * x * a_n / n
            scale = n / a_n**2
            if rf.x_min < y < rf.x_max:
                est = mc.estimate_ldp_tail(env, y, n, M, seed, mc.stream_id(f"mdp:{x!r}:{n}"),
                                           z_cap, workers)
                note = f"tilted t={est.t_star:.6g}"
            else:
                # plain MC; the threshold is outside (x_min, x_max)
                est = mc.estimate_ldp_tail(env, y, n, M, seed, mc.stream_id(f"mdp:{x!r}:{n}"),
                                           z_cap, workers, t=0.0)
                note = "threshold outside tilt domain; untilted"
            val = scale * est.log_prob
            gap = abs(val - theory)
            last = n == n_list[-1]
            rows.append(Row("tail", f"x={x:g}", n=n, x=x, t=est.t_star, estimate=val,
                            std_error=scale * est.log_prob_se, theory_value=theory, abs_gap=gap,
                            tolerance=tol["mdp_rel"] * abs(theory), designated=last,
                            ok=bool(gap <= tol["mdp_rel"] * abs(theory)) if last else None,
                            paired=scale * est.log_prob_pi, note=note))
            pts.append((n, val))
        series[f"scaled_tail_x{x:g}"] = pts
    for t in (float(v) for v in t_grid):
        prev = None
        pts = []
        for n in n_list:
            t_n = t * schedule.a(n) / n
            r = mc.estimate_moment_ratio(env, t_n, n, M, seed, mc.stream_id(f"mdp-ratio:{t!r}:{n}"),
                                         z_cap, workers)
            rows.append(Row("ratio", f"t={t:g}", n=n, t=t_n, estimate=r.mean,
                            std_error=r.std_error, theory_value=1.0, abs_gap=abs(r.mean - 1.0)))
            pts.append((n, r.mean))
            if n <= oracle_max_n:
                exact = _exact_ratio(env, t_n, n)
                g = abs(r.mean - exact)
                k = tol["mdp_oracle_se"] * r.std_error
                rows.append(Row("ratio_oracle", f"t={t:g}", n=n, t=t_n, estimate=r.mean,
                                std_error=r.std_error, theory_value=exact, abs_gap=g,
                                tolerance=k, designated=True, ok=bool(g <= k)))
            if prev is not None:
                band = tol["mdp_trend_se"] * math.hypot(prev[1], r.std_error)
                d_prev, d_now = abs(prev[0] - 1.0), abs(r.mean - 1.0)
                rows.append(Row("ratio_trend", f"t={t:g}", n=n, t=t_n, estimate=d_now,
                                theory_value=d_prev, abs_gap=d_now - d_prev, tolerance=band,
                                designated=True, ok=bool(d_now <= d_prev + band),
                                note="|ratio - 1| nonincreasing in n within noise band"))
            prev = (r.mean, r.std_error)
        series[f"ratio_t{t:g}"] = pts
    params = {"beta": schedule.beta, "x_grid": list(x_grid), "n_list": n_list, "M": M,
              "seed": seed, "t_grid": list(t_grid), "side": side}
    return _finish(study_id, env, rows, tol, gates, notes, t0, params, series)


# --- CLT ------------------------------------------------------------------------


def run_clt_study(
    env: EnvModel,
    n_list,
    M: int,
    seed: int,
    *,
    tolerances: dict | None = None,
    workers: int = 1,
    z_cap: int = mc.Z_CAP_DEFAULT,
    study_id: str = "clt",
) -> StudyResult:
    """KS distance of ``(log Z_n - n E log m0) / (sqrt(n) sigma)`` to the normal.

    All ``n`` share one batch of trajectories.  The ``paired`` column holds the
    same statistic computed from ``log Pi_n`` alone.
    """
    t0 = time.perf_counter()
    tol = tolerances_with(tolerances)
    s = env_summary(env)
    gates = clt_gates(env)
    if not s.sigma2 > 0:
        _refuse(DegenerateSigma, "var log m0 = 0: the CLT is degenerate", gates)
    n_list = sorted(int(n) for n in n_list)
    floor = mc.ks_noise_floor(M)
    band = tol["clt_band"] if tol["clt_band"] is not None else 2 * floor
    tol["clt_band"] = band
    batch = mc.simulate(env, n_list[-1], M, seed, mc.stream_id("clt"), n_list, z_cap, workers)
    rows, series = [], {}
    ks_list = []
    for n in n_list:
        scale = math.sqrt(n * s.sigma2)
        ks = mc.ks_distance((batch.log_z(n) - n * s.E_log_m) / scale)
        ks_pi = mc.ks_distance((batch.log_pi[:, batch.col(n)] - n * s.E_log_m) / scale)
        ks_list.append(ks)
        rows.append(Row("ks", "KS", n=n, estimate=ks, std_error=floor, theory_value=0.0,
                        abs_gap=ks, paired=ks_pi))
    for i in range(1, len(n_list)):
        d = ks_list[i] - ks_list[i - 1]
        rows.append(Row("ks_trend", f"{n_list[i - 1]}->{n_list[i]}", n=n_list[i],
                        estimate=ks_list[i], theory_value=ks_list[i - 1], abs_gap=d,
                        tolerance=band, designated=True, ok=bool(d <= band),
                        note="KS nonincreasing within noise band"))
    thr = tol["clt_ks"]
    ks_last = ks_list[-1]
    ok = bool(ks_last <= thr)
    note = ""
    if not ok and thr < floor:
        ok, note = None, "threshold below KS resolution 1.36/sqrt(M)"
    rows.append(Row("ks_final", "KS at largest n", n=n_list[-1], estimate=ks_last,
                    std_error=floor, theory_value=0.0, abs_gap=ks_last, tolerance=thr,
                    designated=True, ok=ok, paired=rows[len(n_list) - 1].paired, note=note))
    series["ks"] = list(zip(n_list, ks_list))
    params = {"n_list": n_list, "M": M, "seed": seed}
    return _finish(study_id, env, rows, tol, gates, [], t0, params, series)


# --- moment ratios --------------------------------------------------------------


def run_moment_study(
    env: EnvModel,
    t_grid,
    n_list,
    M: int,
    seed: int,
    *,
    oracle_max_n: int = 6,
    tolerances: dict | None = None,
    workers: int = 1,
    z_cap: int | None = None,
    study_id: str = "moment",
) -> StudyResult:
    """Ratios ``r_n(t) = E Z_n**t / (E m0**t)**n``.

    Checks: oracle agreement for ``n <= oracle_max_n``; Cauchy trend
    ``|r_c - r_b| < |r_b - r_a|`` over consecutive triples of ``n_list``
    (differences on common trajectories); and the implied growth rate at the
    largest ``n`` against ``Lambda(t)``.  The limit ``C(t)`` itself has no
    closed form and is only estimated.
    """
    t0 = time.perf_counter()
    tol = tolerances_with(tolerances)
    rf = RateFunction(env)
    z_cap = mc.max_exact_cap(env) if z_cap is None else z_cap
    n_list = sorted(set(int(n) for n in n_list))
    gates = moment_gates(env, t_grid)
    bad = [k for k, g in gates.items() if not g["passed"]]
    if bad:
        _refuse(PreconditionViolated, f"moment gate fails at {', '.join(bad)}", gates)
    rows, notes, series = [], [], {}
    for t in (float(v) for v in t_grid):
        path = mc.moment_ratio_path(env, t, n_list, M, seed, mc.stream_id(f"moment:{t!r}"),
                                    z_cap, workers)
        pts = []
        for n in n_list:
            sm = path.summary(n)
            pts.append((n, sm.mean))
            row = Row("ratio", f"t={t:g}", n=n, t=t, estimate=sm.mean, std_error=sm.std_error)
            if n <= oracle_max_n:
                try:
                    exact = _exact_ratio(env, t, n)
                except TruncationExceeded as e:
                    notes.append(f"oracle skipped at n={n}: {e}")
                else:
                    k = tol["moment_oracle_se"] * sm.std_error
                    g = abs(sm.mean - exact)
                    row.theory_value, row.abs_gap, row.tolerance = exact, g, k
                    # an exactly constant W has zero error: compare to rounding
                    row.designated, row.ok = True, bool(g <= max(k, 1e-12 * abs(exact)))
                    row.note = "oracle"
            rows.append(row)
        for a, b, c in zip(n_list, n_list[1:], n_list[2:]):
            near = abs(path.difference(b, a).mean)
            far = abs(path.difference(c, b).mean)
            rows.append(Row("cauchy", f"t={t:g} {a},{b},{c}", n=c, t=t, estimate=far,
                            std_error=path.difference(c, b).std_error, theory_value=near,
                            abs_gap=far, tolerance=near, designated=True,
                            ok=bool(far < near or far == 0.0),
                            note="|r_c - r_b| < |r_b - r_a| on common trajectories"))
        n = n_list[-1]
        sm = path.summary(n)
        implied = rf.lam(t) + (math.log(sm.mean) / n if sm.mean > 0 else -math.inf)
        g = abs(implied - rf.lam(t))
        rows.append(Row("rate", f"t={t:g}", n=n, t=t, estimate=implied,
                        std_error=sm.std_error / (n * sm.mean) if sm.mean > 0 else math.inf,
                        theory_value=rf.lam(t), abs_gap=g, tolerance=tol["moment_rate"],
                        designated=True, ok=bool(g <= tol["moment_rate"]),
                        note="(1/n) log E Z_n**t vs Lambda(t)"))
        series[f"ratio_t{t:g}"] = pts
    params = {"t_grid": list(t_grid), "n_list": n_list, "M": M, "seed": seed, "z_cap": z_cap}
    return _finish(study_id, env, rows, tol, gates, notes, t0, params, series)


# --- harmonic moments -----------------------------------------------------------


def _default_tail_n(env: EnvModel) -> int:
    return max(40, math.ceil(1.2 * math.log(1e12) / env_summary(env).E_log_m))


def run_harmonic_study(
    env: EnvModel,
    a_grid,
    n_list,
    M: int,
    seed: int,
    *,
    relative: bool = False,
    tail_n: int | None = None,
    tail_M: int | None = None,
    tail_skip: int = 10,
    laplace_t=(10.0, 1000.0),
    tolerances: dict | None = None,
    workers: int = 1,
    z_cap: int = mc.Z_CAP_DEFAULT,
    study_id: str = "harmonic",
) -> StudyResult:
    """Finite/infinite dichotomy of ``E W**-a`` around ``a0``.

    With ``relative=True`` the grid is in units of ``a0``.  Rows: the path
    ``E W_n**-a`` (nondecreasing; flattening below ``0.9 a0``; growing above
    ``1.1 a0``, a growth-trend heuristic since divergence cannot be certified
    by finite sampling), a left-tail fit of ``P(W <= x)``, and for
    ``p1 = 0`` environments a stretched-exponential check of the Laplace
    transform.
    """
    t0 = time.perf_counter()
    tol = tolerances_with(tolerances)
    p1_sup = float(env.p1.max())
    gates = harmonic_gates(env)
    if not p1_sup < 1:
        _refuse(HypothesisViolated, "harmonic moments need ess sup p1 < 1", gates)
    if not gates["hypothesis_H"]["passed"]:
        _refuse(HypothesisViolated, "hypothesis (H) fails: some law has mean <= 1", gates)
    a0 = critical_a0(env)
    gates["critical_a0"] = _gate(True, "root of E p1 m0**a = 1", a0=a0)
    n_list = sorted(set(int(n) for n in n_list))
    rows, notes, series = [], [], {}
    notes.append("divergence rows are a growth-trend heuristic, not a certificate")
    for a_in in (float(v) for v in a_grid):
        if relative and not math.isfinite(a0):
            _refuse(PreconditionViolated, "a0 is infinite (p1 = 0): relative a grid undefined", gates)
        a = a_in * a0 if relative else a_in
        path = mc.harmonic_moment_path(env, a, n_list, M, seed, mc.stream_id(f"harmonic:{a!r}"),
                                       z_cap, workers)
        means = path.means
        lab = f"a={a:.6g}"
        for n, mval in zip(n_list, means):
            sm = path.summary(n)
            rows.append(Row("harmonic", lab, n=n, t=a, estimate=sm.mean, std_error=sm.std_error))
        series[f"harmonic_a{a:.6g}"] = list(zip(n_list, means))
        steps = np.diff(means)
        worst = float(steps.min()) if steps.size else 0.0
        rows.append(Row("monotone", lab, t=a, estimate=worst, theory_value=0.0,
                        tolerance=1e-12 * float(means.max()), designated=True,
                        ok=bool(worst >= -1e-12 * float(means.max())),
                        note="smallest increment of E W_n**-a over n"))
        if len(n_list) >= 2 and a < 0.9 * a0:
            r = float(means[-1] / means[-2])
            rows.append(Row("flatten", lab, n=n_list[-1], t=a, estimate=r, theory_value=1.0,
                            abs_gap=r - 1.0, tolerance=tol["harmonic_flat"], designated=True,
                            ok=bool(r <= tol["harmonic_flat"]), note="final/penultimate"))
        elif len(n_list) >= 2 and a > 1.1 * a0:
            r = float(means[-1] / means[0])
            rows.append(Row("diverge", lab, n=n_list[-1], t=a, estimate=r,
                            tolerance=tol["harmonic_diverge"], designated=True,
                            ok=bool(r >= tol["harmonic_diverge"]),
                            note="final/first; growth-trend heuristic"))
        else:
            notes.append(f"a={a:.6g} within 10% of a0={a0:.6g}: no finiteness verdict")
    # left tail of W
    tail_n = _default_tail_n(env) if tail_n is None else int(tail_n)
    tail_M = M if tail_M is None else int(tail_M)
    w = np.sort(mc.sample_W(env, tail_n, tail_M, seed, mc.stream_id("harmonic:tail"), z_cap, workers))
    rep = check_hypothesis_H(env)
    if rep.p1_zero:
        lo, hi = (float(v) for v in laplace_t)
        ts = np.geomspace(lo, hi, 9)
        phi = np.array([mc.laplace_estimate(w, t) for t in ts])
        keep = (phi > 0) & (phi < 1)
        series["laplace"] = list(zip(np.log(ts[keep]), np.log(-np.log(phi[keep]))))
        target = rep.gamma - tol["laplace_gamma_slack"]
        if keep.sum() >= 2:
            slope = float(np.polyfit(np.log(ts[keep]), np.log(-np.log(phi[keep])), 1)[0])
            ok = bool(slope >= target)
        else:
            slope, ok = math.nan, None
        rows.append(Row("laplace", f"t in [{lo:g},{hi:g}]", n=tail_n, estimate=slope,
                        theory_value=rep.gamma, abs_gap=rep.gamma - slope,
                        tolerance=tol["laplace_gamma_slack"], designated=True, ok=ok,
                        note="slope of log(-log phi(t)) vs log t >= gamma - slack"))
    else:
        lo = w[0]
        sel = np.flatnonzero(w <= 10 * lo)[tail_skip:]
        target = tol["harmonic_tail_frac"] * min(a0, tol["harmonic_fit_cap"])
        if sel.size >= 3 and w[sel[-1]] > w[sel[0]]:
            F = (sel + 1) / w.size
            lx, lf = np.log(w[sel]), np.log(F)
            slope = float(np.polyfit(lx, lf, 1)[0])
            ok = bool(slope >= target)
            series["tail_cdf"] = list(zip(lx, lf))
        else:
            slope, ok = math.nan, None
            notes.append("too few distinct points in the lowest decade for a tail fit")
        rows.append(Row("tail_fit", "lowest decade", n=tail_n, estimate=slope,
                        theory_value=min(a0, tol["harmonic_fit_cap"]), abs_gap=target - slope,
                        tolerance=target, designated=True, ok=ok,
                        note="slope of log P(W<=x) vs log x >= frac * min(a0, cap)"))
    params = {"a_grid": list(a_grid), "relative": relative, "n_list": n_list, "M": M,
              "seed": seed, "tail_n": tail_n, "tail_M": tail_M}
    return _finish(study_id, env, rows, tol, gates, notes, t0, params, series)


# --- Berry-Esseen ---------------------------------------------------------------


def run_berry_esseen_study(
    env: EnvModel,
    epsilon: float,
    n_list,
    horizon: int,
    M: int,
    seed: int,
    *,
    tolerances: dict | None = None,
    workers: int = 1,
    z_cap: int = mc.Z_CAP_DEFAULT,
    study_id: str = "berry_esseen",
) -> StudyResult:
    """Geometric decay of the KS distance of the normalized martingale tail.

    The fitted slope of ``log KS_n`` against ``n`` must not exceed
    ``log E m0**(-eps/2)`` plus a slack.  Points at or below the KS noise floor
    ``1.36/sqrt(M)`` are dropped; if fewer than two remain the verdict is
    inconclusive.
    """
    t0 = time.perf_counter()
    tol = tolerances_with(tolerances)
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    rate = env_summary(env).E_m_pow(-epsilon / 2)
    gates = berry_esseen_gates(env, epsilon)
    bad = [k for k, g in gates.items() if not g["passed"]]
    if bad:
        _refuse(HypothesisViolated, f"Berry-Esseen hypotheses fail: {', '.join(bad)}", gates)
    n_list = sorted(set(int(n) for n in n_list))
    floor = mc.ks_noise_floor(M)
    rows, notes = [], []
    ks = []
    for n in n_list:
        b = mc.berry_esseen_statistic(env, n, horizon, M, seed, mc.stream_id(f"be:{n}"),
                                      z_cap, workers)
        ks.append(b.ks)
        rows.append(Row("ks", "KS", n=n, estimate=b.ks, std_error=floor, theory_value=0.0,
                        abs_gap=b.ks, note="resolution-limited" if b.ks <= floor else ""))
    bound = math.log(rate)
    keep = [i for i, v in enumerate(ks) if v > floor]
    if len(keep) >= 2:
        slope, _ = _fit_slope([n_list[i] for i in keep], np.log([ks[i] for i in keep]))
        ok = bool(slope <= bound + tol["be_slack"])
    else:
        slope, ok = math.nan, None
        notes.append("KS values at the 1.36/sqrt(M) resolution floor: verdict inconclusive")
    rows.append(Row("slope", "log KS_n vs n", estimate=slope, theory_value=bound,
                    abs_gap=slope - bound if math.isfinite(slope) else math.nan,
                    tolerance=tol["be_slack"], designated=True, ok=ok,
                    note="slope <= log E m0**(-eps/2) + slack"))
    series = {"log_ks": [(n, math.log(v)) for n, v in zip(n_list, ks)]}
    params = {"epsilon": epsilon, "n_list": n_list, "horizon": horizon, "M": M, "seed": seed}
    return _finish(study_id, env, rows, tol, gates, notes, t0, params, series)


# --- dispatch -------------------------------------------------------------------

STUDY_KINDS = ("ldp", "mdp", "clt", "moment", "harmonic", "berry_esseen")


def preflight(study_id: str, env: EnvModel, params: dict) -> dict:
    """Gate results a study would evaluate, without sampling anything."""
    kind = study_kind(study_id)
    if kind == "ldp":
        return ldp_gates(env)
    if kind == "mdp":
        try:
            MdpSchedule(params["beta"])
            sched = _gate(True, "beta in (1/2, 1)", beta=params["beta"])
        except ValueError as e:
            sched = _gate(False, str(e), beta=params["beta"])
        t_grid = params.get("t_grid", ())
        return {"schedule": sched, **mdp_gates(env), **moment_gates(env, [-abs(t) for t in t_grid if t < 0])}
    if kind == "clt":
        return clt_gates(env)
    if kind == "moment":
        return moment_gates(env, params["t_grid"])
    if kind == "harmonic":
        return harmonic_gates(env)
    if kind == "berry_esseen":
        return berry_esseen_gates(env, params["epsilon"])
    raise KeyError(f"unknown study kind {kind!r}")


def study_kind(study_id: str) -> str:
    """``"ldp"`` for ``"ldp"`` or ``"ldp:upper"``: the suffix only names the run."""
    return study_id.split(":", 1)[0]


def run_study(
    study_id: str,
    env: EnvModel,
    params: dict,
    seed: int,
    *,
    workers: int = 1,
    tolerances: dict | None = None,
) -> StudyResult:
    """Run one configured study; gate failures become ``refused`` results and
    other package errors become ``error`` results."""
    kind = study_kind(study_id)
    p = dict(params)
    common = {"tolerances": tolerances, "workers": workers, "study_id": study_id}
    if kind not in STUDY_KINDS:
        raise KeyError(f"unknown study kind {kind!r}")
    t0 = time.perf_counter()
    try:
        if kind == "ldp":
            return run_ldp_study(env, p.pop("x_grid"), p.pop("n_list"), p.pop("M"), seed, **p, **common)
        if kind == "mdp":
            sched = MdpSchedule(p.pop("beta"))
            return run_mdp_study(env, sched, p.pop("x_grid", ()), p.pop("n_list"), p.pop("M"), seed,
                                 **p, **common)
        if kind == "clt":
            return run_clt_study(env, p.pop("n_list"), p.pop("M"), seed, **p, **common)
        if kind == "moment":
            return run_moment_study(env, p.pop("t_grid"), p.pop("n_list"), p.pop("M"), seed, **p, **common)
        if kind == "harmonic":
            return run_harmonic_study(env, p.pop("a_grid"), p.pop("n_list"), p.pop("M"), seed,
                                      **p, **common)
        return run_berry_esseen_study(env, p.pop("epsilon"), p.pop("n_list"), p.pop("horizon"),
                                      p.pop("M"), seed, **p, **common)
    except PreconditionViolated as e:
        verdict, msg, gates = "refused", f"{type(e).__name__}: {e}", getattr(e, "gates", {})
    except (BpreError, ValueError) as e:
        verdict, msg, gates = "error", f"{type(e).__name__}: {e}", getattr(e, "gates", {})
    return StudyResult(study_id, env.env_hash(), [], verdict, tolerances_with(tolerances),
                       _clean(gates), [msg], round(time.perf_counter() - t0, 3), dict(params), {})
