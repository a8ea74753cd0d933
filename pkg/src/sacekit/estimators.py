"""Survivor-contrast and IV foils, and bounds on the survivor average causal effect.

The bounds engine treats each arm's survivors as a two-part mixture: treated
survivors are LL plus LD, control survivors are LL plus DL. For a given LL
proportion ``pi`` the LL part takes fraction ``pi / p_arm`` of that arm's
survivor distribution, and its mean is extremal when it takes the top or
bottom of the distribution (a trimmed mean). The interval is the envelope of
those extremes over every ``pi`` the observed survival rates allow.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np
from scipy.optimize import linprog

from .errors import InfeasibleError, UndefinedEstimateError
from .trial import ALIVE, Arm, ObservedSummary

NAIVE_NOTE = (
    "survivor contrast compares different mixtures of strata; it is not a causal effect"
)
IVE_NOTE = (
    "zero-imputation IV estimate; meaningless unless monotonicity and exclusion both hold"
)

DEFAULT_GRID_POINTS = 1001


# Foils ---------------------------------------------------------------------


def naive_survivor_contrast(summary: ObservedSummary) -> float:
    """Mean outcome of treated survivors minus that of control survivors."""
    t = summary.cell(Arm.T, ALIVE)
    c = summary.cell(Arm.C, ALIVE)
    if t.mean_y is None or c.mean_y is None:
        raise UndefinedEstimateError("a survivor cell is empty; the contrast is undefined")
    return t.mean_y - c.mean_y


def ive_zero_imputation(summary: ObservedSummary) -> float:
    """(E[Y|T] - E[Y|C]) / (p_T - p_C) with Y := 0 for the dead."""
    p_t = summary.survival_rate(Arm.T)
    p_c = summary.survival_rate(Arm.C)
    if p_t == p_c:
        raise UndefinedEstimateError("equal survival rates: IV denominator is zero")
    y_t = p_t * summary.cell(Arm.T, ALIVE).mean_y if p_t > 0 else 0.0
    y_c = p_c * summary.cell(Arm.C, ALIVE).mean_y if p_c > 0 else 0.0
    return (y_t - y_c) / (p_t - p_c)


# Inputs / outputs ------------------------------------------------------------


@dataclass(frozen=True)
class ArmObservation:
    """Survival rate and discrete survivor outcome distribution of one arm."""

    survival_rate: float
    values: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        masses = np.asarray(self.masses, dtype=float)
        order = np.argsort(values, kind="stable")
        object.__setattr__(self, "values", values[order])
        object.__setattr__(self, "masses", masses[order])
        if not 0 <= self.survival_rate <= 1:
            raise ValueError(f"survival rate {self.survival_rate} outside [0, 1]")
        if self.survival_rate > 0:
            if len(values) == 0:
                raise ValueError("positive survival rate with empty survivor distribution")
            if np.any(masses < 0) or abs(masses.sum() - 1) > 1e-9:
                raise ValueError("survivor masses must be non-negative and sum to 1")
        elif len(values):
            raise ValueError("survivor distribution must be empty when nobody survives")

    @classmethod
    def from_dist(cls, survival_rate: float, dist: dict) -> "ArmObservation":
        items = sorted(dist.items())
        return cls(survival_rate, [v for v, _ in items], [m for _, m in items])

    @classmethod
    def from_summary(cls, summary: ObservedSummary, arm: Arm | str) -> "ArmObservation":
        arm = Arm(arm)
        cell = summary.cell(arm, ALIVE)
        p = summary.survival_rate(arm)
        if p > 0 and cell.dist_y is None:
            raise ValueError(
                f"arm {arm.value} survivor outcomes are continuous; bounds need a "
                "discrete (point-mass or empirical) distribution"
            )
        return cls.from_dist(p, cell.dist_y or {})

    @property
    def mean(self) -> float:
        return float(np.dot(self.values, self.masses))


@dataclass(frozen=True)
class AssumptionSet:
    monotonicity: bool = False
    stochastic_dominance: bool = False
    # carried for documentation; the bounds never use it
    exclusion: bool = False

    def label(self) -> str:
        names = [k for k, v in asdict(self).items() if v]
        return "+".join(names) if names else "none"

    def issubset(self, other: "AssumptionSet") -> bool:
        return all(getattr(other, k) or not v for k, v in asdict(self).items())


@dataclass(frozen=True)
class BoundOptions:
    grid_points: int = DEFAULT_GRID_POINTS
    # "mean": E[Y|LL] >= E[Y|cell-mate]; "fosd": LL's law first-order dominates
    dominance: Literal["mean", "fosd"] = "mean"


@dataclass(frozen=True)
class BoundsResult:
    lower: float
    upper: float
    assumptions: AssumptionSet
    pi_ll_range: tuple  # (low, high, low_is_open)
    feasible: bool
    attained_at: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        lo, hi, lo_open = self.pi_ll_range
        return {
            "lower": _json_num(self.lower),
            "upper": _json_num(self.upper),
            "assumptions": asdict(self.assumptions),
            "pi_ll_range": {"low": lo, "high": hi, "low_open": lo_open},
            "feasible": self.feasible,
            "attained_at": self.attained_at,
        }

    def contains(self, value: float, tol: float = 0.0) -> bool:
        return self.lower - tol <= value <= self.upper + tol


def _json_num(v: float):
    return None if v is None or math.isnan(v) else v


# Trimmed means -------------------------------------------------------------


def trimmed_mean(values, masses, fraction: float, top: bool) -> float:
    """Mean of the top (or bottom) ``fraction`` of probability mass.

    Mass at the cut point is split fractionally. ``fraction == 0`` gives the
    limit as the fraction shrinks to zero, i.e. the largest (smallest)
    support point carrying positive mass.
    """
    values = np.asarray(values, dtype=float)
    masses = np.asarray(masses, dtype=float)
    keep = masses > 0
    values, masses = values[keep], masses[keep]
    order = np.argsort(values, kind="stable")
    if top:
        order = order[::-1]
    v, m = values[order], masses[order]
    if fraction <= 0:
        return float(v[0])
    fraction = min(fraction, 1.0)
    before = np.concatenate(([0.0], np.cumsum(m)[:-1]))
    take = np.clip(fraction - before, 0.0, m)
    # offset by the first value so a single retained point is returned exactly
    return float(v[0] + np.dot(take, v - v[0]) / take.sum())


def _pi_range(p_t: float, p_c: float, assumptions: AssumptionSet):
    """Feasible LL proportions as (grid-able low, high, low_open), or None if infeasible."""
    if assumptions.monotonicity:
        if p_c > p_t:
            return None
        return p_c, p_c, False
    lo = max(0.0, p_t + p_c - 1.0)
    hi = min(p_t, p_c)
    return lo, hi, lo == 0.0


def _check_rates(obs_t: ArmObservation, obs_c: ArmObservation):
    if obs_t.survival_rate <= 0 or obs_c.survival_rate <= 0:
        raise UndefinedEstimateError("an arm has no survivors, so LL is empty and SACE undefined")


def _infeasible(assumptions: AssumptionSet, p_t: float, p_c: float) -> BoundsResult:
    return BoundsResult(
        lower=math.nan,
        upper=math.nan,
        assumptions=assumptions,
        pi_ll_range=(p_c, p_c, False),
        feasible=False,
        attained_at={"reason": f"monotonicity needs p_C <= p_T, got {p_c} > {p_t}"},
    )


def _arm_extremes(obs: ArmObservation, frac: float, dominance: bool):
    hi = trimmed_mean(obs.values, obs.masses, frac, top=True)
    lo = trimmed_mean(obs.values, obs.masses, frac, top=False)
    if dominance:
        # LL at least as good as its cell-mate <=> at least the cell mean
        lo = max(lo, obs.mean)
    return lo, hi


def sace_bounds(
    obs_t: ArmObservation,
    obs_c: ArmObservation,
    assumptions: AssumptionSet = AssumptionSet(),
    opts: BoundOptions = BoundOptions(),
) -> BoundsResult:
    """Sharp bounds on E[Y(T) - Y(C) | LL] from observed survivor distributions."""
    _check_rates(obs_t, obs_c)
    p_t, p_c = obs_t.survival_rate, obs_c.survival_rate
    rng = _pi_range(p_t, p_c, assumptions)
    if rng is None:
        return _infeasible(assumptions, p_t, p_c)
    lo, hi, lo_open = rng
    if hi <= 0:
        raise UndefinedEstimateError("no positive LL proportion is compatible with the data")
    if lo == hi:
        grid = np.array([lo])
    else:
        grid = np.linspace(lo, hi, max(2, opts.grid_points))

    dom = assumptions.stochastic_dominance
    best_up = (-math.inf, None)
    best_lo = (math.inf, None)
    for pi in grid:
        # pi == 0 evaluates the one-sided limit (trim fraction -> 0+)
        t_lo, t_hi = _arm_extremes(obs_t, pi / p_t, dom)
        c_lo, c_hi = _arm_extremes(obs_c, pi / p_c, dom)
        up, low = t_hi - c_lo, t_lo - c_hi
        if up > best_up[0]:
            best_up = (up, pi)
        if low < best_lo[0]:
            best_lo = (low, pi)

    def where(pi, ll_t, ll_c):
        return {
            "pi_ll": float(pi),
            "limit": bool(pi == 0),
            "treated_ll": ll_t,
            "control_ll": ll_c,
            "trim_fraction_t": min(1.0, float(pi) / p_t),
            "trim_fraction_c": min(1.0, float(pi) / p_c),
        }

    low_side = "max(bottom, cell mean)" if dom else "bottom"
    return BoundsResult(
        lower=float(best_lo[0]),
        upper=float(best_up[0]),
        assumptions=assumptions,
        pi_ll_range=(float(lo), float(hi), lo_open),
        feasible=True,
        attained_at={
            "upper": where(best_up[1], "top", low_side),
            "lower": where(best_lo[1], low_side, "top"),
        },
    )


# LP oracle -----------------------------------------------------------------

_LP_OPTS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _arm_block(obs: ArmObservation, dominance: Optional[str]):
    """Inequality rows (over this arm's x and the shared t = 1/pi) for one arm.

    LL holds ``pi * x_j`` of the arm's mass at support point j, which can be
    at most ``p * f_j``; dividing by pi gives ``x_j - p f_j t <= 0``. Both
    dominance notions compare LL with the whole cell, which is equivalent to
    comparing it with its cell-mate.
    """
    v, f, p = obs.values, obs.masses, obs.survival_rate
    k = len(v)
    rows, rhs = [], []
    for j in range(k):
        row = np.zeros(k + 1)
        row[j], row[k] = 1.0, -p * f[j]
        rows.append(row)
        rhs.append(0.0)
    if dominance == "mean":
        # E[Y|LL] >= cell mean
        rows.append(np.concatenate((-v, [0.0])))
        rhs.append(-float(np.dot(f, v)))
    elif dominance == "fosd":
        # CDF of LL below the cell's CDF at every support point
        cdf = np.cumsum(f)
        for m in range(k - 1):
            row = np.zeros(k + 1)
            row[: m + 1] = 1.0
            rows.append(row)
            rhs.append(float(cdf[m]))
    return rows, rhs


def _lp_sace(obs_t, obs_c, t_bounds, dominance, sense: int) -> tuple[float, float]:
    """Optimize E[Y(T)|LL] - E[Y(C)|LL] jointly over LL's laws and t = 1/pi.

    Returns (optimum, pi at the optimum); sense=+1 max, -1 min.
    """
    kt, kc = len(obs_t.values), len(obs_c.values)
    rows_t, rhs_t = _arm_block(obs_t, dominance)
    rows_c, rhs_c = _arm_block(obs_c, dominance)
    # columns: x_t (kt), x_c (kc), t
    a_ub = [np.concatenate((r[:kt], np.zeros(kc), r[kt:])) for r in rows_t]
    a_ub += [np.concatenate((np.zeros(kt), r[:kc], r[kc:])) for r in rows_c]
    obj = np.concatenate((obs_t.values, -obs_c.values, [0.0])) * -sense
    a_eq = np.zeros((2, kt + kc + 1))
    a_eq[0, :kt] = 1.0
    a_eq[1, kt : kt + kc] = 1.0
    res = linprog(
        obj,
        A_ub=np.array(a_ub),
        b_ub=np.array(rhs_t + rhs_c),
        A_eq=a_eq,
        b_eq=[1.0, 1.0],
        bounds=[(0.0, None)] * (kt + kc) + [t_bounds],
        method="highs",
        options=_LP_OPTS,
    )
    if res.status != 0:
        raise InfeasibleError(f"bounds LP failed: {res.message}")
    return -sense * res.fun, 1.0 / res.x[-1]


def bounds_oracle(
    obs_t: ArmObservation,
    obs_c: ArmObservation,
    assumptions: AssumptionSet = AssumptionSet(),
    dominance: Literal["mean", "fosd"] = "mean",
) -> BoundsResult:
    """Brute-force bounds from one linear program per endpoint.

    The LL proportion pi enters only through ``t = 1/pi``, which makes the
    problem linear in (LL's laws, t), so no grid over pi is needed. This is
    independent of the trimmed-mean formulas.
    """
    _check_rates(obs_t, obs_c)
    p_t, p_c = obs_t.survival_rate, obs_c.survival_rate
    rng = _pi_range(p_t, p_c, assumptions)
    if rng is None:
        return _infeasible(assumptions, p_t, p_c)
    lo, hi, lo_open = rng
    if hi <= 0:
        raise UndefinedEstimateError("no positive LL proportion is compatible with the data")
    t_bounds = (1.0 / hi, None if lo == 0 else 1.0 / lo)
    dom = dominance if assumptions.stochastic_dominance else None
    up, pi_up = _lp_sace(obs_t, obs_c, t_bounds, dom, +1)
    low, pi_low = _lp_sace(obs_t, obs_c, t_bounds, dom, -1)
    return BoundsResult(
        lower=float(low),
        upper=float(up),
        assumptions=assumptions,
        pi_ll_range=(float(lo), float(hi), lo_open),
        feasible=True,
        attained_at={"upper": {"pi_ll": float(pi_up)}, "lower": {"pi_ll": float(pi_low)}},
    )
