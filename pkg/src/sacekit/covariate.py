"""Recovering the principal-strata table from a covariate that separates strata.

If units of one stratum share a baseline value (or a tight cluster of values),
then within each covariate group everybody has the same survival pattern, and
the per-arm survival rates in that group read off the stratum directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .strata import (
    STRATA,
    Arm,
    OutcomeLaw,
    PopulationSpec,
    PrincipalStratum,
    StratumSpec,
    true_sace,
)
from .trial import RecordError, RecordTable, UnitRecord


@dataclass(frozen=True)
class BinningRule:
    """``width=None`` groups by exact value; otherwise bins are centred on ``origin + k*width``."""

    width: Optional[float] = None
    origin: float = 0.0

    def centers(self, x: np.ndarray) -> np.ndarray:
        if self.width is None:
            return x
        if not self.width > 0:
            raise ValueError("bin width must be positive")
        return self.origin + np.round((x - self.origin) / self.width) * self.width


@dataclass(frozen=True)
class CovariateGroup:
    x_center: float
    n: int
    n_t: int
    n_c: int
    survival_rate_t: float
    survival_rate_c: float
    mean_y_t: Optional[float] = None
    mean_y_c: Optional[float] = None
    sd_y_t: Optional[float] = None
    sd_y_c: Optional[float] = None
    mean_x: float = math.nan
    sd_x: float = 0.0
    inferred_stratum: Optional[PrincipalStratum] = None
    separation_warning: bool = False

    def survival_rate(self, arm: Arm) -> float:
        return self.survival_rate_t if arm is Arm.T else self.survival_rate_c

    def mean_y(self, arm: Arm) -> Optional[float]:
        return self.mean_y_t if arm is Arm.T else self.mean_y_c

    def sd_y(self, arm: Arm) -> Optional[float]:
        return self.sd_y_t if arm is Arm.T else self.sd_y_c

    def to_dict(self) -> dict:
        d = {
            "x_center": self.x_center,
            "n": self.n,
            "n_t": self.n_t,
            "n_c": self.n_c,
            "survival_rate_t": self.survival_rate_t,
            "survival_rate_c": self.survival_rate_c,
            "mean_y_t": self.mean_y_t,
            "mean_y_c": self.mean_y_c,
            "separation_warning": self.separation_warning,
        }
        d["inferred_stratum"] = None if self.inferred_stratum is None else self.inferred_stratum.value
        return d


def _moments(v: np.ndarray):
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std())


def group_by_covariate(
    records: RecordTable | Iterable[UnitRecord], binning: BinningRule = BinningRule()
) -> list[CovariateGroup]:
    """Per-group, per-arm survival rates and survivor outcome moments, sorted by group centre."""
    table = records if isinstance(records, RecordTable) else RecordTable.from_records(records)
    if len(table) == 0:
        raise RecordError("no records to group")
    if np.isnan(table.x).any():
        missing = int(table.id[np.isnan(table.x)][0])
        raise RecordError(f"unit {missing} has no covariate value")
    centers = binning.centers(table.x)
    groups = []
    for c in np.unique(centers):
        in_g = centers == c
        treated = in_g & table.z
        control = in_g & ~table.z
        n_t, n_c = int(treated.sum()), int(control.sum())
        y_t = table.y[treated & table.alive]
        y_c = table.y[control & table.alive]
        m_t, s_t = _moments(y_t)
        m_c, s_c = _moments(y_c)
        xs = table.x[in_g]
        groups.append(
            CovariateGroup(
                x_center=float(c),
                n=int(in_g.sum()),
                n_t=n_t,
                n_c=n_c,
                survival_rate_t=y_t.size / n_t if n_t else math.nan,
                survival_rate_c=y_c.size / n_c if n_c else math.nan,
                mean_y_t=m_t,
                mean_y_c=m_c,
                sd_y_t=s_t,
                sd_y_c=s_c,
                mean_x=float(xs.mean()),
                sd_x=float(xs.std()),
            )
        )
    return groups


@dataclass(frozen=True)
class RecoveredTable:
    population: PopulationSpec
    groups: tuple[CovariateGroup, ...]
    low_confidence: bool

    @property
    def sace(self) -> Optional[float]:
        return true_sace(self.population)

    def to_dict(self) -> dict:
        return {
            "population": self.population.to_dict(),
            "groups": [g.to_dict() for g in self.groups],
            "low_confidence": self.low_confidence,
            "sace": self.sace,
        }


def _pool(parts: Sequence[tuple[float, float, float]]) -> tuple[float, float]:
    """Combine (weight, mean, sd) parts into one mean and sd (total variance)."""
    w = np.array([p[0] for p in parts], dtype=float)
    m = np.array([p[1] for p in parts], dtype=float)
    s = np.array([p[2] for p in parts], dtype=float)
    w = w / w.sum()
    mean = float(w @ m)
    var = float(w @ (s * s + (m - mean) ** 2))
    return mean, math.sqrt(max(var, 0.0))


def recover_principal_table(
    groups: Sequence[CovariateGroup],
    threshold: float = 0.5,
    warn_band: tuple[float, float] = (0.2, 0.8),
) -> RecoveredTable:
    """Classify each covariate group into a stratum and assemble a population.

    A group is alive under an arm when its survival rate there is at least
    ``threshold``. Groups of the same stratum are merged with size-weighted
    means. Any group with a survival rate inside ``warn_band`` is flagged:
    the covariate is not separating there and the whole estimate is marked
    low-confidence.
    """
    if not groups:
        raise ValueError("no covariate groups")
    for g in groups:
        if g.n_t == 0 or g.n_c == 0:
            raise ValueError(f"group at x={g.x_center} lacks one arm; both arms are required")

    lo, hi = warn_band
    labelled = []
    for g in groups:
        letters = "".join(
            "L" if g.survival_rate(arm) >= threshold else "D" for arm in (Arm.T, Arm.C)
        )
        warn = any(lo <= g.survival_rate(arm) <= hi for arm in Arm)
        labelled.append(replace(g, inferred_stratum=PrincipalStratum(letters), separation_warning=warn))

    total = sum(g.n for g in labelled)
    specs = []
    for stratum in STRATA:
        members = sorted(
            (g for g in labelled if g.inferred_stratum is stratum), key=lambda g: g.x_center
        )
        size = sum(g.n for g in members)
        if not members:
            specs.append(StratumSpec(stratum, 0.0))
            continue
        laws = {}
        for arm in Arm:
            if stratum.survives(arm):
                mean, sd = _pool([(g.n, g.mean_y(arm), g.sd_y(arm)) for g in members])
                laws[arm] = OutcomeLaw(mean, sd)
        x_mean, x_sd = _pool([(g.n, g.mean_x, g.sd_x) for g in members])
        specs.append(
            StratumSpec(
                stratum,
                size / total,
                qol_t=laws.get(Arm.T),
                qol_c=laws.get(Arm.C),
                covariate_mean=x_mean,
                covariate_sd=x_sd,
            )
        )
    # put any rounding residue on the largest stratum so proportions sum to 1
    props = [s.proportion for s in specs]
    residue = 1.0 - math.fsum(props)
    if residue:
        i = int(np.argmax(props))
        specs[i] = replace(specs[i], proportion=props[i] + residue)
    ordered = tuple(sorted(labelled, key=lambda g: g.x_center))
    return RecoveredTable(
        PopulationSpec(tuple(specs)),
        ordered,
        any(g.separation_warning for g in ordered),
    )


def format_recovered(rec: RecoveredTable) -> str:
    """Aligned text: covariate, share, stratum, survival and mean QOL per arm."""
    lines = [
        f"{'X':>8}  {'%pop':>6}  {'stratum':<7}  {'S(T)':>4}  {'Y(T)':>8}  {'S(C)':>4}  {'Y(C)':>8}  {'effect':>8}"
    ]
    for s in rec.population.strata:
        if s.proportion == 0:
            continue
        st = s.stratum

        def cell(arm):
            law = s.law(arm)
            return ("L" if st.survives(arm) else "D"), ("*" if law is None else f"{law.mean:.1f}")

        s_t, y_t = cell(Arm.T)
        s_c, y_c = cell(Arm.C)
        eff = "*" if s.qol_t is None or s.qol_c is None else f"{s.qol_t.mean - s.qol_c.mean:.1f}"
        x = "-" if s.covariate_mean is None else f"{s.covariate_mean:.0f}"
        lines.append(
            f"{x:>8}  {100 * s.proportion:6.2f}  {st.value:<7}  {s_t:>4}  {y_t:>8}  {s_c:>4}  {y_c:>8}  {eff:>8}"
        )
    flagged = [g for g in rec.groups if g.separation_warning]
    if flagged:
        centres = ", ".join(f"{g.x_center:g}" for g in flagged)
        lines.append(f"warning: covariate does not separate strata at x = {centres}; low confidence")
    return "\n".join(lines)
