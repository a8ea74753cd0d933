"""Batch command-line front end.

Every command reads a population (popspec/1 JSON) or unit records (CSV),
writes a table or JSON to stdout and diagnostics to stderr. All randomness
comes from ``--seed``, so reruns are byte-identical.

Exit codes: 0 ok, 1 validation failure, 2 parse/usage failure, 3 infeasible
or undefined estimate.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .covariate import BinningRule, format_recovered, group_by_covariate, recover_principal_table
from .errors import IdentificationError, InfeasibleError, UndefinedEstimateError
from .estimators import (
    DEFAULT_GRID_POINTS,
    IVE_NOTE,
    NAIVE_NOTE,
    ArmObservation,
    AssumptionSet,
    BoundOptions,
    ive_zero_imputation,
    naive_survivor_contrast,
    sace_bounds,
)
from .mixture import EmOptions, analyze_arms, effective_components
from .strata import Arm, PopulationSpec, true_sace, true_survival_rate, validate
from .trial import (
    ALIVE,
    CELLS,
    RecordError,
    RecordParseError,
    RecordTable,
    assign_and_observe,
    empirical_summary,
    expected_observed_summary,
)

COMMANDS = ("truth", "simulate", "observe", "naive", "ive", "bounds", "em", "covariate-recover", "report")
ASSUMPTIONS = {
    "monotonicity": "monotonicity",
    "stochastic-dominance": "stochastic_dominance",
    "exclusion": "exclusion",
}
# the four rows of the classic bounds table
BOUND_ROWS = (
    AssumptionSet(),
    AssumptionSet(monotonicity=True),
    AssumptionSet(stochastic_dominance=True),
    AssumptionSet(monotonicity=True, stochastic_dominance=True),
)
REPORT_SCHEMA = "sacekit-report/1"
GRID_ENV = "SACEKIT_GRID_POINTS"
DEFAULT_N = 200_000
MAX_LISTED_SUPPORT = 8

EXIT_OK, EXIT_INVALID, EXIT_PARSE, EXIT_INFEASIBLE = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    command: str
    pop_path: Optional[str] = None
    records_path: Optional[str] = None
    seed: int = 0
    n: int = DEFAULT_N
    assumptions: AssumptionSet = field(default_factory=AssumptionSet)
    output_format: str = "table"
    grid_points: int = DEFAULT_GRID_POINTS
    bin_width: Optional[float] = None


# Formatting -----------------------------------------------------------------


def fmt(v) -> str:
    """Numbers to 10 significant digits; -0 prints as 0."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "undefined"
    s = f"{float(v):.10g}"
    return "0" if s == "-0" else s


def _law(law) -> str:
    if law is None:
        return "*"
    return fmt(law.mean) if law.sd == 0 else f"{fmt(law.mean)} ({fmt(law.sd)})"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(o):
    # NaN is not valid JSON
    if isinstance(o, float) and math.isnan(o):
        return None
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default, allow_nan=False)


def population_table(pop: PopulationSpec) -> str:
    lines = [f"{'stratum':<8}{'%pop':>7}  {'S(T)':>4}  {'Y(T)':>12}  {'S(C)':>4}  {'Y(C)':>12}  {'effect':>8}"]
    for s in pop.strata:
        st = s.stratum
        eff = "*" if s.qol_t is None or s.qol_c is None else fmt(s.qol_t.mean - s.qol_c.mean)
        lines.append(
            f"{st.value:<8}{100 * s.proportion:7.2f}  "
            f"{'L' if st.survives(Arm.T) else 'D':>4}  {_law(s.qol_t):>12}  "
            f"{'L' if st.survives(Arm.C) else 'D':>4}  {_law(s.qol_c):>12}  {eff:>8}"
        )
    return "\n".join(lines)


def _dist(d) -> str:
    if d is None:
        return "continuous"
    if len(d) > MAX_LISTED_SUPPORT:
        return f"{len(d)} support points"
    return ", ".join(f"{fmt(v)}: {fmt(m)}" for v, m in sorted(d.items()))


def summary_table(summary) -> str:
    lines = [f"{'Z':<3}{'S':<3}{'%obs':>7}  {'mean Y':>10}  distribution"]
    for z, alive in CELLS:
        c = summary.cell(z, alive)
        mean = fmt(c.mean_y) if alive and c.mean_y is not None else "*"
        dist = _dist(c.dist_y) if alive and c.mean_y is not None else "*"
        lines.append(f"{z.value:<3}{'L' if alive else 'D':<3}{100 * c.share:7.2f}  {mean:>10}  {dist}")
    lines.append(
        f"survival rate: T {fmt(summary.survival_rate(Arm.T))}, C {fmt(summary.survival_rate(Arm.C))}"
    )
    if summary.n is not None:
        lines.append(f"units: {summary.n}")
    return "\n".join(lines)


def bounds_line(res) -> str:
    lo, hi, lo_open = res.pi_ll_range
    rng = f"{'(' if lo_open else '['}{fmt(lo)}, {fmt(hi)}]"
    interval = f"[{fmt(res.lower)}, {fmt(res.upper)}]"
    return f"{res.assumptions.label():<34}{interval:<28}pi_LL in {rng}"


def fit_table(label: str, fit) -> str:
    lines = [f"{label}: loglik {fmt(fit.loglik)}, iterations {fit.iterations}, converged {fit.converged}"]
    for c in fit.components:
        lines.append(f"  weight {fmt(round(c.weight, 6))}  mean {fmt(round(c.mean, 4))}  sd {fmt(round(c.sd, 4))}")
    return "\n".join(lines)


def mixture_text(analysis) -> str:
    out = [fit_table("treated survivors", analysis.fit_t), fit_table("control survivors", analysis.fit_c)]
    if analysis.identification is None:
        out.append(f"identification failed: {analysis.error}")
        return "\n".join(out)
    ident = analysis.identification
    out.append(f"solutions: {len(ident.solutions)}  ambiguous: {ident.ambiguous}")
    for i, (sol, sace) in enumerate(zip(ident.solutions, _solution_sace(analysis))):
        props = "  ".join(f"{k.value} {fmt(round(v, 6))}" for k, v in sol.proportions.items())
        out.append(f"  solution {i + 1}: {props}  SACE {fmt(round(sace, 4))}")
    out.append("SACE candidates: " + ", ".join(fmt(round(s, 4)) for s in analysis.sace))
    return "\n".join(out)


def _solution_sace(analysis):
    comps_t = effective_components(analysis.fit_t)
    comps_c = effective_components(analysis.fit_c)
    return [comps_t[s.t_ll].mean - comps_c[s.c_ll].mean for s in analysis.identification.solutions]


# Input handling -------------------------------------------------------------


def _load_pop(path: str) -> PopulationSpec:
    try:
        pop = PopulationSpec.load(path)
    except OSError as exc:
        raise CliError(f"cannot read population file: {exc}", EXIT_PARSE) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot parse population file {path}: {exc}", EXIT_PARSE) from None
    report = validate(pop)
    if not report.ok:
        raise CliError("invalid population: " + "; ".join(report.violations), EXIT_INVALID)
    return pop


def _load_records(path: str) -> RecordTable:
    try:
        return RecordTable.load(path)
    except OSError as exc:
        raise CliError(f"cannot read records file: {exc}", EXIT_PARSE) from None
    except RecordParseError as exc:
        raise CliError(f"cannot parse records file {path}: {exc}", EXIT_PARSE) from None
    except RecordError as exc:
        raise CliError(f"invalid records: {exc}", EXIT_INVALID) from None


def _need(cfg: RunConfig, pop: bool, records: bool) -> None:
    """Check the command got exactly one of the inputs it accepts."""
    given = [name for name, ok, val in (("--pop", pop, cfg.pop_path), ("--records", records, cfg.records_path)) if val]
    allowed = [name for name, ok in (("--pop", pop), ("--records", records)) if ok]
    bad = [g for g in given if g not in allowed]
    if bad or len(given) != 1:
        raise CliError(f"{cfg.command} needs exactly one of {' or '.join(allowed)}", EXIT_PARSE)


def _summary(cfg: RunConfig):
    if cfg.pop_path:
        return expected_observed_summary(_load_pop(cfg.pop_path))
    return empirical_summary(_load_records(cfg.records_path))


def _records(cfg: RunConfig) -> RecordTable:
    if cfg.records_path:
        return _load_records(cfg.records_path)
    return _simulate(_load_pop(cfg.pop_path), cfg)


def _simulate(pop: PopulationSpec, cfg: RunConfig) -> RecordTable:
    try:
        return assign_and_observe(pop, cfg.n, cfg.seed)
    except ValueError as exc:
        raise CliError(f"cannot simulate: {exc}", EXIT_INVALID) from None


def _arm_observations(summary):
    try:
        return ArmObservation.from_summary(summary, Arm.T), ArmObservation.from_summary(summary, Arm.C)
    except (ValueError, UndefinedEstimateError) as exc:
        raise CliError(f"bounds need discrete survivor distributions: {exc}", EXIT_INFEASIBLE) from None


def _bounds(obs_t, obs_c, assumptions, cfg):
    return sace_bounds(obs_t, obs_c, assumptions, BoundOptions(grid_points=cfg.grid_points))


# Commands -------------------------------------------------------------------


def cmd_truth(cfg):
    _need(cfg, pop=True, records=False)
    pop = _load_pop(cfg.pop_path)
    sace, p_t, p_c = true_sace(pop), true_survival_rate(pop, Arm.T), true_survival_rate(pop, Arm.C)
    data = {"population": pop.to_dict(), "sace": sace, "survival_rate": {"T": p_t, "C": p_c}}
    text = "\n".join(
        [population_table(pop), f"SACE: {fmt(sace)}", f"survival rate: T {fmt(p_t)}, C {fmt(p_c)}"]
    )
    return data, text


def cmd_simulate(cfg):
    _need(cfg, pop=True, records=False)
    table = _simulate(_load_pop(cfg.pop_path), cfg)
    # records have one documented format, CSV, whatever --output-format says
    return None, table.to_csv().rstrip("\n")


def cmd_observe(cfg):
    _need(cfg, pop=True, records=True)
    summary = _summary(cfg)
    return summary.to_dict(), summary_table(summary)


def _foil(cfg, fn, name, note):
    _need(cfg, pop=True, records=True)
    summary = _summary(cfg)
    try:
        value = fn(summary)
    except UndefinedEstimateError as exc:
        raise CliError(f"{name} undefined: {exc}", EXIT_INFEASIBLE) from None
    return {name: value, "note": note}, f"{name}: {fmt(value)}\nnote: {note}"


def cmd_naive(cfg):
    return _foil(cfg, naive_survivor_contrast, "naive_survivor_contrast", NAIVE_NOTE)


def cmd_ive(cfg):
    return _foil(cfg, ive_zero_imputation, "ive_zero_imputation", IVE_NOTE)


def cmd_bounds(cfg):
    _need(cfg, pop=True, records=True)
    obs_t, obs_c = _arm_observations(_summary(cfg))
    try:
        res = _bounds(obs_t, obs_c, cfg.assumptions, cfg)
    except UndefinedEstimateError as exc:
        raise CliError(f"bounds undefined: {exc}", EXIT_INFEASIBLE) from None
    if not res.feasible:
        raise CliError(f"infeasible: {res.attained_at['reason']}", EXIT_INFEASIBLE)
    return res.to_dict(), "SACE bounds " + bounds_line(res)


def _analysis(table: RecordTable, cfg):
    summary = empirical_summary(table)
    p_t, p_c = summary.survival_rate(Arm.T), summary.survival_rate(Arm.C)
    try:
        return analyze_arms(table.arm_outcomes(Arm.T), table.arm_outcomes(Arm.C), p_t, p_c, EmOptions(seed=cfg.seed))
    except ValueError as exc:
        raise CliError(f"mixture fit impossible: {exc}", EXIT_INFEASIBLE) from None


def cmd_em(cfg):
    _need(cfg, pop=True, records=True)
    analysis = _analysis(_records(cfg), cfg)
    if analysis.identification is None:
        raise CliError(f"identification failed: {analysis.error}", EXIT_INFEASIBLE)
    return analysis.to_dict(), mixture_text(analysis)


def cmd_covariate_recover(cfg):
    _need(cfg, pop=True, records=True)
    table = _records(cfg)
    try:
        groups = group_by_covariate(table, BinningRule(width=cfg.bin_width))
        rec = recover_principal_table(groups)
    except RecordError as exc:
        raise CliError(f"invalid records: {exc}", EXIT_INVALID) from None
    except ValueError as exc:
        raise CliError(f"cannot recover strata: {exc}", EXIT_INFEASIBLE) from None
    return rec.to_dict(), format_recovered(rec) + f"\nSACE: {fmt(rec.sace)}"


def cmd_report(cfg):
    _need(cfg, pop=True, records=False)
    pop = _load_pop(cfg.pop_path)
    sace = true_sace(pop)
    p_t, p_c = true_survival_rate(pop, Arm.T), true_survival_rate(pop, Arm.C)
    summary = expected_observed_summary(pop)
    data = {
        "schema": REPORT_SCHEMA,
        "config": {"seed": cfg.seed, "n": cfg.n, "grid_points": cfg.grid_points},
        "truth": {"population": pop.to_dict(), "sace": sace, "survival_rate": {"T": p_t, "C": p_c}},
        "observed": summary.to_dict(),
    }
    text = [
        "== truth ==",
        population_table(pop),
        f"SACE: {fmt(sace)}",
        f"survival rate: T {fmt(p_t)}, C {fmt(p_c)}",
        "",
        "== observed (expected, infinite sample) ==",
        summary_table(summary),
        "",
        "== estimators vs truth ==",
        f"{'estimator':<34}{'estimate':<22}truth SACE {fmt(sace)}",
    ]
    estimators = {}
    for name, fn, note in (
        ("naive_survivor_contrast", naive_survivor_contrast, NAIVE_NOTE),
        ("ive_zero_imputation", ive_zero_imputation, IVE_NOTE),
    ):
        try:
            value, err = fn(summary), None
        except UndefinedEstimateError as exc:
            value, err = None, str(exc)
        estimators[name] = {"value": value, "note": note, "error": err, "causal": False}
        flag = "NOT CAUSAL" if name.startswith("naive") else "needs monotonicity+exclusion"
        text.append(f"{name:<34}{fmt(value):<22}{flag}")

    # bounds need a discrete law; with spread, use the simulated sample
    records = _simulate(pop, cfg) if pop.has_spread else None
    source = "expected" if records is None else f"simulated (n={cfg.n}, seed={cfg.seed})"
    bound_summary = summary if records is None else empirical_summary(records)
    obs_t, obs_c = _arm_observations(bound_summary)
    rows = []
    text.append(f"SACE bounds from {source} data:")
    for a in BOUND_ROWS:
        try:
            res = _bounds(obs_t, obs_c, a, cfg)
        except UndefinedEstimateError as exc:
            rows.append({"assumptions": a.label(), "error": str(exc)})
            text.append(f"  {a.label():<32}undefined: {exc}")
            continue
        d = res.to_dict()
        d["contains_truth"] = None if sace is None or not res.feasible else res.contains(sace, 1e-9)
        rows.append(d)
        if not res.feasible:
            text.append(f"  {a.label():<34}infeasible")
        elif d["contains_truth"] is None:
            text.append(f"  {bounds_line(res)}")
        else:
            text.append(f"  {bounds_line(res)}  covers truth: {'yes' if d['contains_truth'] else 'no'}")
    estimators["bounds"] = {"source": source, "rows": rows}
    data["estimators"] = estimators

    if records is not None:
        analysis = _analysis(records, cfg)
        data["mixture"] = analysis.to_dict()
        text += ["", f"== mixture identification (n={cfg.n}, seed={cfg.seed}) ==", mixture_text(analysis)]
    text += ["", f"note: {NAIVE_NOTE}"]
    return data, "\n".join(text)


HANDLERS = {
    "truth": cmd_truth,
    "simulate": cmd_simulate,
    "observe": cmd_observe,
    "naive": cmd_naive,
    "ive": cmd_ive,
    "bounds": cmd_bounds,
    "em": cmd_em,
    "covariate-recover": cmd_covariate_recover,
    "report": cmd_report,
}


def run(cfg: RunConfig) -> tuple[int, str]:
    """Dispatch one command; returns (exit status, stdout text). Errors go to the text of CliError."""
    data, text = HANDLERS[cfg.command](cfg)
    if cfg.output_format == "json" and data is not None:
        return EXIT_OK, dump_json(data)
    return EXIT_OK, text


# Argument parsing -----------------------------------------------------------


def _default_grid() -> int:
    raw = os.environ.get(GRID_ENV)
    if raw is None:
        return DEFAULT_GRID_POINTS
    try:
        value = int(raw)
    except ValueError:
        raise CliError(f"{GRID_ENV} must be an integer, got {raw!r}", EXIT_PARSE) from None
    if value < 2:
        raise CliError(f"{GRID_ENV} must be at least 2, got {value}", EXIT_PARSE)
    return value


def build_parser(grid_default: int = DEFAULT_GRID_POINTS) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sacekit", description="Survivor average causal effect toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--pop", dest="pop_path", help="population spec (popspec/1 JSON)")
    p.add_argument("--records", dest="records_path", help="unit records CSV (id,x,z,s,y)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=DEFAULT_N, help="units to simulate")
    p.add_argument(
        "--assume",
        action="append",
        default=[],
        metavar="NAME",
        help="monotonicity, stochastic-dominance or exclusion; repeat or comma-separate",
    )
    p.add_argument("--output-format", choices=("table", "json"), default="table")
    p.add_argument("--grid-points", type=int, default=grid_default)
    p.add_argument("--bin-width", type=float, default=None, help="covariate bin width (default: exact values)")
    return p


def parse_args(argv: Sequence[str]) -> RunConfig:
    parser = build_parser(_default_grid())
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        raise CliError("", EXIT_PARSE if exc.code else EXIT_OK) from None
    flags = {}
    for item in ns.assume:
        for name in filter(None, (s.strip() for s in item.split(","))):
            if name not in ASSUMPTIONS:
                raise CliError(f"unknown assumption {name!r}; choose from {', '.join(ASSUMPTIONS)}", EXIT_PARSE)
            flags[ASSUMPTIONS[name]] = True
    if ns.grid_points < 2:
        raise CliError("--grid-points must be at least 2", EXIT_PARSE)
    if ns.seed < 0:
        raise CliError("--seed must be non-negative", EXIT_PARSE)
    return RunConfig(
        command=ns.command,
        pop_path=ns.pop_path,
        records_path=ns.records_path,
        seed=ns.seed,
        n=ns.n,
        assumptions=AssumptionSet(**flags),
        output_format=ns.output_format,
        grid_points=ns.grid_points,
        bin_width=ns.bin_width,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = parse_args(sys.argv[1:] if argv is None else argv)
        code, text = run(cfg)
    except CliError as exc:
        if str(exc):
            print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (InfeasibleError, IdentificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    sys.stdout.write(text + "\n")
    return code
