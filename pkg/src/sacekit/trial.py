"""Completely randomized trials over latent strata, and observed-data summaries.

Every simulated unit owns one Philox block keyed by the seed and indexed by the
unit id, so a unit's stratum, covariate, outcome and assignment key depend only
on ``(seed, id)``. Generating ids in any order or in chunks reproduces the same
records bit for bit.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .strata import STRATA, Arm, PopulationSpec, PrincipalStratum, validate

ALIVE, DEAD = True, False
CELLS = ((Arm.T, ALIVE), (Arm.T, DEAD), (Arm.C, ALIVE), (Arm.C, DEAD))
CSV_HEADER = ("id", "x", "z", "s", "y")

_WORDS_PER_UNIT = 4
_CHUNK = 1 << 16


class RecordError(ValueError):
    """A unit record, or a set of them, breaks the record invariants."""


class RecordParseError(RecordError):
    """Records text is not well-formed CSV in the expected layout."""


@dataclass(frozen=True)
class UnitRecord:
    id: int
    z: Arm
    alive: bool
    y: Optional[float] = None
    x: Optional[float] = None
    stratum: Optional[PrincipalStratum] = None

    def check(self) -> None:
        if self.alive and self.y is None:
            raise RecordError(f"unit {self.id}: alive but no outcome")
        if not self.alive and self.y is not None:
            raise RecordError(f"unit {self.id}: outcome recorded on a dead unit")
        if self.stratum is not None and self.stratum.survives(self.z) != self.alive:
            raise RecordError(
                f"unit {self.id}: survival {self.alive} contradicts stratum "
                f"{self.stratum.value} under {self.z.value}"
            )


@dataclass(frozen=True)
class RecordTable(Sequence[UnitRecord]):
    """Columnar storage for unit records; iterates as ``UnitRecord``.

    ``y`` and ``x`` use NaN for absent values, ``stratum`` uses -1 when unknown.
    """

    id: np.ndarray
    z: np.ndarray  # bool, True = treated
    alive: np.ndarray
    y: np.ndarray
    x: np.ndarray
    stratum: np.ndarray

    def __len__(self) -> int:
        return len(self.id)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        code = int(self.stratum[i])
        return UnitRecord(
            id=int(self.id[i]),
            z=Arm.T if self.z[i] else Arm.C,
            alive=bool(self.alive[i]),
            y=None if math.isnan(self.y[i]) else float(self.y[i]),
            x=None if math.isnan(self.x[i]) else float(self.x[i]),
            stratum=None if code < 0 else STRATA[code],
        )

    def __iter__(self) -> Iterator[UnitRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def has_x(self) -> bool:
        return bool(len(self)) and not np.isnan(self.x).any()

    def check(self) -> None:
        has_y = ~np.isnan(self.y)
        bad = np.flatnonzero(has_y != self.alive)
        if bad.size:
            self[int(bad[0])].check()
        known = self.stratum >= 0
        if known.any():
            t_alive = np.array([s.survives(Arm.T) for s in STRATA])
            c_alive = np.array([s.survives(Arm.C) for s in STRATA])
            codes = self.stratum[known]
            expect = np.where(self.z[known], t_alive[codes], c_alive[codes])
            bad = np.flatnonzero(expect != self.alive[known])
            if bad.size:
                self[int(np.flatnonzero(known)[bad[0]])].check()

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord]) -> "RecordTable":
        records = list(records)
        for r in records:
            r.check()
        nan = float("nan")
        return cls(
            id=np.array([r.id for r in records], dtype=np.int64),
            z=np.array([r.z is Arm.T for r in records], dtype=bool),
            alive=np.array([r.alive for r in records], dtype=bool),
            y=np.array([nan if r.y is None else r.y for r in records], dtype=float),
            x=np.array([nan if r.x is None else r.x for r in records], dtype=float),
            stratum=np.array(
                [-1 if r.stratum is None else STRATA.index(r.stratum) for r in records],
                dtype=np.int64,
            ),
        )

    def arm_outcomes(self, arm: Arm) -> np.ndarray:
        """Observed outcomes of the survivors in one arm."""
        mask = self.alive & (self.z == (arm is Arm.T))
        return self.y[mask]

    # CSV ----------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in range(len(self)):
            w.writerow(
                (
                    int(self.id[i]),
                    _fmt(self.x[i]),
                    "T" if self.z[i] else "C",
                    "L" if self.alive[i] else "D",
                    _fmt(self.y[i]),
                )
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RecordTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise RecordParseError(f"expected CSV header {','.join(CSV_HEADER)}, got {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise RecordParseError(f"line {lineno}: expected 5 fields, got {len(row)}")
            rid, x, z, s, y = (f.strip() for f in row)
            if z not in ("T", "C") or s not in ("L", "D"):
                raise RecordParseError(f"line {lineno}: bad z/s values {z!r}/{s!r}")
            try:
                records.append(
                    UnitRecord(
                        id=int(rid),
                        z=Arm(z),
                        alive=s == "L",
                        y=float(y) if y else None,
                        x=float(x) if x else None,
                    )
                )
            except ValueError as exc:
                raise RecordParseError(f"line {lineno}: {exc}") from None
        return cls.from_records(records)

    @classmethod
    def load(cls, path) -> "RecordTable":
        with open(path, newline="") as fh:
            return cls.from_csv(fh.read())


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


# Simulation ---------------------------------------------------------------


def _unit_words(seed: int, start: int, count: int) -> np.ndarray:
    """Philox words for units ``start .. start+count-1``, shape (count, 4)."""
    bg = np.random.Philox(key=seed)
    bg.advance(start)
    return bg.random_raw(count * _WORDS_PER_UNIT).reshape(count, _WORDS_PER_UNIT)


def _open_unit(words: np.ndarray) -> np.ndarray:
    # 53-bit uniform on the open interval (0, 1)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def assign_and_observe(pop: PopulationSpec, n: int, seed: int) -> RecordTable:
    """Draw ``n`` units from ``pop`` and randomize exactly half to treatment.

    Strata are independent categorical draws (so stratum counts are
    multinomial); the n/2 units with the smallest assignment keys are treated.
    """
    if n <= 0 or n % 2:
        raise ValueError(f"n must be a positive even count, got {n}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    report = validate(pop)
    if not report.ok:
        raise ValueError("invalid population: " + "; ".join(report.violations))

    cum = np.cumsum([s.proportion for s in pop.strata])
    cum[-1] = max(cum[-1], 1.0)
    ids = np.arange(n, dtype=np.int64)
    stratum = np.empty(n, dtype=np.int64)
    u_y = np.empty(n)
    u_x = np.empty(n)
    key = np.empty(n, dtype=np.uint64)
    for start in range(0, n, _CHUNK):
        count = min(_CHUNK, n - start)
        w = _unit_words(seed, start, count)
        sl = slice(start, start + count)
        stratum[sl] = np.searchsorted(cum, _open_unit(w[:, 0]), side="right")
        u_y[sl] = _open_unit(w[:, 1])
        u_x[sl] = _open_unit(w[:, 2])
        key[sl] = w[:, 3]
    stratum = np.minimum(stratum, len(STRATA) - 1)

    # ties broken by id, so the split is a pure function of (seed, n)
    order = np.lexsort((ids, key))
    z = np.zeros(n, dtype=bool)
    z[order[: n // 2]] = True

    z_y = ndtri(u_y)
    z_x = ndtri(u_x)
    alive = np.zeros(n, dtype=bool)
    y = np.full(n, np.nan)
    x = np.full(n, np.nan)
    for code, spec in enumerate(pop.strata):
        in_s = stratum == code
        if not in_s.any():
            continue
        if spec.covariate_mean is not None:
            x[in_s] = spec.covariate_mean + (spec.covariate_sd or 0.0) * z_x[in_s]
        for arm in Arm:
            if not spec.stratum.survives(arm):
                continue
            cell = in_s & (z == (arm is Arm.T))
            law = spec.law(arm)
            alive[cell] = True
            y[cell] = law.mean + law.sd * z_y[cell] if law.sd > 0 else law.mean
    return RecordTable(id=ids, z=z, alive=alive, y=y, x=x, stratum=stratum)


# Summaries ------------------------------------------------------------------


@dataclass(frozen=True)
class CellSummary:
    """One (assignment, survival) cell of the observed data.

    Survivor cells carry ``mean_y``; ``dist_y`` is present whenever the
    outcome distribution is finite discrete (point-mass laws or empirical
    data). ``components`` lists (mass within cell, stratum, law) for exact
    summaries.
    """

    z: Arm
    alive: bool
    share: float
    mean_y: Optional[float] = None
    dist_y: Optional[dict] = None
    components: tuple = ()

    @property
    def n_support(self) -> int:
        return 0 if self.dist_y is None else len(self.dist_y)


@dataclass(frozen=True)
class ObservedSummary:
    cells: tuple[CellSummary, ...]
    n: Optional[int] = None  # None for infinite-sample summaries

    def cell(self, z: Arm | str, alive: bool) -> CellSummary:
        z = Arm(z)
        for c in self.cells:
            if c.z is z and c.alive == alive:
                return c
        raise KeyError((z, alive))

    def arm_share(self, arm: Arm | str) -> float:
        return self.cell(arm, ALIVE).share + self.cell(arm, DEAD).share

    def survival_rate(self, arm: Arm | str) -> float:
        total = self.arm_share(arm)
        if total == 0:
            raise ValueError(f"arm {Arm(arm).value} has no units")
        return self.cell(arm, ALIVE).share / total

    def to_dict(self) -> dict:
        out = []
        for c in self.cells:
            d = {"z": c.z.value, "s": "L" if c.alive else "D", "share": c.share}
            if c.alive:
                d["mean_y"] = c.mean_y
                if c.dist_y is not None:
                    d["dist_y"] = [[v, m] for v, m in sorted(c.dist_y.items())]
            out.append(d)
        return {"n": self.n, "cells": out}


def _exact(v: float) -> Fraction:
    # shortest decimal repr, so 0.4/0.6 is exactly 2/3
    return Fraction(repr(float(v)))


def expected_observed_summary(pop: PopulationSpec) -> ObservedSummary:
    """Infinite-sample observed data under a 50/50 complete randomization."""
    cells = []
    for z, alive in CELLS:
        members = [s for s in pop.strata if s.stratum.survives(z) == alive]
        weight = sum((_exact(s.proportion) for s in members), Fraction(0))
        share = weight / 2
        if not alive:
            cells.append(CellSummary(z, alive, float(share)))
            continue
        if weight == 0:
            cells.append(CellSummary(z, alive, 0.0))
            continue
        comps = []
        mean = Fraction(0)
        dist: Optional[dict] = {}
        for s in members:
            if s.proportion == 0:
                continue
            mass = _exact(s.proportion) / weight
            law = s.law(z)
            comps.append((float(mass), s.stratum, law))
            mean += mass * _exact(law.mean)
            if law.sd > 0:
                dist = None
            elif dist is not None:
                key = float(law.mean)
                dist[key] = dist.get(key, Fraction(0)) + mass
        if dist is not None:
            dist = {k: float(m) for k, m in sorted(dist.items())}
        cells.append(CellSummary(z, alive, float(share), float(mean), dist, tuple(comps)))
    return ObservedSummary(tuple(cells))


def classify_group(z: Arm | str, alive: bool) -> frozenset[PrincipalStratum]:
    """Latent strata compatible with an observed (assignment, survival) cell."""
    z = Arm(z)
    return frozenset(s for s in STRATA if s.survives(z) == alive)


def empirical_summary(records: RecordTable | Iterable[UnitRecord]) -> ObservedSummary:
    """Finite-sample observed summary; outcome values are kept exactly, no binning."""
    table = records if isinstance(records, RecordTable) else RecordTable.from_records(records)
    if len(table) == 0:
        raise RecordError("empirical_summary needs at least one record")
    table.check()
    n = len(table)
    cells = []
    for z, alive in CELLS:
        mask = (table.z == (z is Arm.T)) & (table.alive == alive)
        count = int(mask.sum())
        share = count / n
        if not alive or count == 0:
            cells.append(CellSummary(z, alive, share))
            continue
        values, counts = np.unique(table.y[mask], return_counts=True)
        dist = {float(v): int(c) / count for v, c in zip(values, counts)}
        # sorted-value summation keeps the mean independent of record order
        mean = float(math.fsum(np.sort(table.y[mask]))) / count
        cells.append(CellSummary(z, alive, share, mean, dist))
    return ObservedSummary(tuple(cells), n=n)
