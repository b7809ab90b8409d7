"""Command-line entry point: ``bpre {validate,rate,exact,study}``.

Configs are strict JSON (unknown keys rejected).  Study outputs go to
``<out>/<study_id>/{result.json, rows.csv, plot/*.tsv}`` and ``summary.json``
is written last by atomic rename, so its absence marks an interrupted run.

Exit codes for ``study``: 0 if every study passes, 2 if some are
inconclusive and none fail, 1 otherwise (fail, refused or error).  Config
errors exit with 1 after printing the offending JSON pointer.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
import tempfile
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import exact_engine as ex
from . import harness
from .env_model import EnvModel, check_hypothesis_H, env_summary, new_offspring_law
from .errors import BpreError, InvalidEnv, InvalidLaw, SchemaError, UnknownStudy
from .rate_function import RateFunction, critical_a0, quenched_alpha0

_num_list = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_int_list = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}
_M = {"type": "integer", "minimum": 2}


def _params(required: dict, optional: dict | None = None) -> dict:
    props = {**required, **(optional or {})}
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


STUDY_PARAMS = {
    "ldp": _params({"x_grid": _num_list, "n_list": _int_list, "M": _M},
                   {"z_cap": {"type": "integer", "minimum": 1}}),
    "mdp": _params({"beta": {"type": "number"}, "n_list": _int_list, "M": _M},
                   {"x_grid": {"type": "array", "items": {"type": "number"}},
                    "t_grid": {"type": "array", "items": {"type": "number"}},
                    "side": {"enum": ["lower", "upper"]},
                    "oracle_max_n": {"type": "integer", "minimum": 0}}),
    "clt": _params({"n_list": _int_list, "M": _M}),
    "moment": _params({"t_grid": _num_list, "n_list": _int_list, "M": _M},
                      {"oracle_max_n": {"type": "integer", "minimum": 0}}),
    "harmonic": _params({"a_grid": _num_list, "n_list": _int_list, "M": _M},
                        {"relative": {"type": "boolean"},
                         "tail_n": {"type": "integer", "minimum": 1},
                         "tail_M": {"type": "integer", "minimum": 2},
                         "tail_skip": {"type": "integer", "minimum": 0}}),
    "berry_esseen": _params({"epsilon": {"type": "number"}, "n_list": _int_list,
                             "horizon": {"type": "integer", "minimum": 1}, "M": _M}),
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["env", "studies", "seed"],
    "properties": {
        "env": {
            "type": "object",
            "additionalProperties": False,
            "required": ["laws", "weights"],
            "properties": {
                "laws": {"type": "array", "minItems": 1,
                         "items": {"type": "array", "items": {"type": "number"}, "minItems": 2}},
                "weights": {"type": "array", "minItems": 1, "items": {"type": "number"}},
            },
        },
        "studies": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["study_id"],
                "properties": {"study_id": {"type": "string", "minLength": 1},
                               "params": {"type": "object"}},
            },
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": ["number", "null"]} for k in harness.DEFAULT_TOLERANCES},
        },
    },
}


@dataclass
class StudySpec:
    study_id: str
    params: dict


@dataclass
class ExperimentConfig:
    env: EnvModel
    studies: list
    seed: int
    workers: int = 1
    output_dir: str = "out"
    tolerances: dict = field(default_factory=dict)


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def _schema_error(err: jsonschema.ValidationError) -> SchemaError:
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        path.append(missing[0])
    elif err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        if extra:
            path.append(extra[0])
    return SchemaError(err.message, _pointer(path))


def _validate(instance, schema, prefix=()):
    v = jsonschema.Draft202012Validator(schema)
    errs = sorted(v.iter_errors(instance), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errs:
        err = _schema_error(errs[0])
        raise SchemaError(str(err).split(": ", 1)[1], _pointer(prefix) + err.pointer)


def parse_config(data: bytes | str) -> ExperimentConfig:
    """Parse and validate a JSON experiment config."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise SchemaError(f"config is not UTF-8: {e}", "") from None
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e}", "") from None
    _validate(raw, CONFIG_SCHEMA)
    laws = []
    for i, p in enumerate(raw["env"]["laws"]):
        try:
            laws.append(new_offspring_law(p))
        except InvalidLaw as e:
            raise SchemaError(str(e), f"/env/laws/{i}") from None
    w = raw["env"]["weights"]
    if len(w) != len(laws):
        raise SchemaError(f"{len(laws)} laws but {len(w)} weights", "/env/weights")
    try:
        env = EnvModel(tuple(laws), w)
    except InvalidEnv as e:
        raise SchemaError(str(e), "/env/weights") from None
    studies = []
    for i, st in enumerate(raw["studies"]):
        sid = st["study_id"]
        kind = harness.study_kind(sid)
        if kind not in harness.STUDY_KINDS:
            raise UnknownStudy(f"unknown study {sid!r}; known: {', '.join(harness.STUDY_KINDS)}",
                               f"/studies/{i}/study_id")
        if any(s.study_id == sid for s in studies):
            raise SchemaError(f"duplicate study_id {sid!r}", f"/studies/{i}/study_id")
        params = st.get("params", {})
        _validate(params, STUDY_PARAMS[kind], ("studies", i, "params"))
        studies.append(StudySpec(sid, params))
    return ExperimentConfig(
        env=env,
        studies=studies,
        seed=int(raw["seed"]),
        workers=int(raw.get("workers", 1)),
        output_dir=raw.get("output_dir", "out"),
        tolerances={k: v for k, v in raw.get("tolerances", {}).items()},
    )


# --- output helpers -------------------------------------------------------------


def _safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", s)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def _g(v) -> str:
    return "%.17g" % float(v)


def write_result(res: harness.StudyResult, out: Path) -> Path:
    d = out / _safe_name(res.study_id)
    _write(d / "result.json", res.to_json())
    _write(d / "rows.csv", res.rows_csv())
    for name, text in res.plot_tsv().items():
        _write(d / "plot" / f"{_safe_name(name)}.tsv", text)
    return d


def exit_code(verdicts) -> int:
    v = list(verdicts)
    if any(x in ("fail", "refused", "error") for x in v):
        return 1
    if any(x == "inconclusive" for x in v):
        return 2
    return 0


def run(config: ExperimentConfig, out: str | Path | None = None, log=sys.stderr) -> int:
    """Run every configured study; returns the exit code."""
    out = Path(out if out is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for spec in config.studies:
        try:
            res = harness.run_study(spec.study_id, config.env, spec.params, config.seed,
                                    workers=config.workers, tolerances=config.tolerances)
        except Exception as e:  # noqa: BLE001 - recorded, not swallowed
            res = harness.StudyResult(spec.study_id, config.env.env_hash(), [], "error",
                                      harness.tolerances_with(config.tolerances), {},
                                      [f"{type(e).__name__}: {e}", traceback.format_exc()])
        write_result(res, out)
        summary[spec.study_id] = res.verdict
        print(f"{spec.study_id}: {res.verdict} ({res.runtime_s:.1f} s)", file=log)
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return exit_code(summary.values())


# --- subcommands ----------------------------------------------------------------


def _env_report(env: EnvModel) -> dict:
    s = env_summary(env)
    rep = check_hypothesis_H(env)
    p1_sup = float(env.p1.max())
    report = {
        "env_hash": env.env_hash(),
        "E_log_m": s.E_log_m,
        "sigma2": s.sigma2,
        "E_p1": s.E_p1,
        "hypothesis_H": rep.to_dict(),
    }
    if np.all(env.means > 1) and p1_sup < 1:
        report["a0"] = critical_a0(env)
        report["alpha0"] = quenched_alpha0(env)
    return harness._clean(report)


def cmd_validate(cfg: ExperimentConfig, args) -> int:
    report = _env_report(cfg.env)
    report["studies"] = {}
    ok = True
    for spec in cfg.studies:
        gates = harness._clean(harness.preflight(spec.study_id, cfg.env, spec.params))
        report["studies"][spec.study_id] = gates
        ok &= all(g["passed"] for g in gates.values())
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write(Path(args.out) / "validate.json", text)
    print(text, end="")
    return 0 if ok else 1


def cmd_rate(cfg: ExperimentConfig, args) -> int:
    rf = RateFunction(cfg.env)
    ts = np.linspace(args.t_min, args.t_max, args.points)
    lines = ["t,Lambda,dLambda,d2Lambda"]
    lines += [",".join(_g(v) for v in (t, rf.lam(t), rf.dlam(t), rf.d2lam(t))) for t in ts]
    xs = np.linspace(rf.x_min, rf.x_max, args.points) if not rf.degenerate else np.array([rf.x_min])
    dual = ["x,Lambda_star,t_star"]
    for x in xs:
        v, t = rf.legendre(float(x))
        dual.append(",".join(_g(u) for u in (x, v, t)))
    out = Path(args.out or cfg.output_dir) / "rate"
    _write(out / "lambda.csv", "\n".join(lines) + "\n")
    _write(out / "lambda_star.csv", "\n".join(dual) + "\n")
    _write(out / "plot" / "lambda.tsv",
           "x\ty\n" + "".join(f"{_g(t)}\t{_g(rf.lam(t))}\n" for t in ts))
    _write(out / "plot" / "lambda_star.tsv",
           "x\ty\n" + "".join(f"{_g(x)}\t{_g(rf.lambda_star(float(x)))}\n" for x in xs))
    print(f"wrote {out}", file=sys.stderr)
    return 0


def cmd_exact(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out or cfg.output_dir) / "exact"
    pmf = ex.annealed_pmf(cfg.env, args.n)
    _write(out / f"pmf_n{args.n}.csv",
           "z,probability\n" + "".join(f"{z},{_g(p)}\n" for z, p in pmf.as_dict().items()))
    rf = RateFunction(cfg.env)
    rows = ["t,E_Z_n_pow_t,error_bound,ratio_to_E_Pi_n_pow_t"]
    for t in args.t:
        mv = ex.exact_moment(pmf, t)
        rows.append(",".join(_g(v) for v in (t, mv.value, mv.error_bound,
                                                 mv.value / math.exp(args.n * rf.lam(t)))))
    _write(out / f"moments_n{args.n}.csv", "\n".join(rows) + "\n")
    _write(out / f"meta_n{args.n}.json", json.dumps(
        {"n": args.n, "lost_mass": pmf.lost_mass, "z_max": pmf.z_max,
         "env_hash": cfg.env.env_hash()}, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}", file=sys.stderr)
    return 0


def cmd_study(cfg: ExperimentConfig, args) -> int:
    return run(cfg, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpre", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed-override", type=int, help="replace the config seed")
        sp.add_argument("--workers", type=int, help="worker processes (overrides config)")
        return sp

    common(sub.add_parser("validate", help="check config and hypothesis gates"))
    r = common(sub.add_parser("rate", help="Lambda and Lambda* grids"))
    r.add_argument("--t-min", type=float, default=-3.0)
    r.add_argument("--t-max", type=float, default=3.0)
    r.add_argument("--points", type=int, default=61)
    e = common(sub.add_parser("exact", help="exact annealed pmf and moments"))
    e.add_argument("--n", type=int, default=4)
    e.add_argument("--t", type=float, nargs="+", default=[-1.0, -0.5, 0.5, 1.0, 2.0])
    common(sub.add_parser("study", help="run configured studies"))
    return p


COMMANDS = {"validate": cmd_validate, "rate": cmd_rate, "exact": cmd_exact, "study": cmd_study}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(Path(args.config).read_bytes())
    except SchemaError as e:
        print(f"config error at {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return 1
    if args.seed_override is not None:
        if not 0 <= args.seed_override < 2**64:
            print("seed must be a 64-bit unsigned integer", file=sys.stderr)
            return 1
        cfg.seed = args.seed_override
    if args.workers is not None:
        cfg.workers = max(1, args.workers)
    try:
        return COMMANDS[args.command](cfg, args)
    except (BpreError, OSError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
