"""Principal strata, population specifications and their exact "truth" functionals.

A population is four latent strata (LL, LD, DL, DD) named by survival under
treatment then control. Outcome laws exist only for cells where the stratum
survives; a dead cell has no law at all rather than a sentinel value.
"""

from __future__ import annotations

import enum
import json
import math
from fractions import Fraction
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

SCHEMA = "popspec/1"
PROPORTION_TOL = 1e-12


class Arm(str, enum.Enum):
    T = "T"
    C = "C"

    @property
    def other(self) -> "Arm":
        return Arm.C if self is Arm.T else Arm.T


class PrincipalStratum(str, enum.Enum):
    LL = "LL"
    LD = "LD"
    DL = "DL"
    DD = "DD"

    def survives(self, arm: Arm) -> bool:
        """First letter is survival under T, second under C."""
        letter = self.value[0] if arm is Arm.T else self.value[1]
        return letter == "L"

    def swapped(self) -> "PrincipalStratum":
        return PrincipalStratum(self.value[::-1])


STRATA = tuple(PrincipalStratum)


@dataclass(frozen=True)
class OutcomeLaw:
    """Univariate normal law; ``sd == 0`` is a point mass."""

    mean: float
    sd: float = 0.0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd}

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeLaw":
        return cls(mean=float(d["mean"]), sd=float(d.get("sd", 0.0)))


def point(value: float) -> OutcomeLaw:
    return OutcomeLaw(float(value), 0.0)


@dataclass(frozen=True)
class StratumSpec:
    stratum: PrincipalStratum
    proportion: float
    qol_t: Optional[OutcomeLaw] = None
    qol_c: Optional[OutcomeLaw] = None
    covariate_mean: Optional[float] = None
    covariate_sd: Optional[float] = None

    def law(self, arm: Arm) -> Optional[OutcomeLaw]:
        return self.qol_t if arm is Arm.T else self.qol_c

    def to_dict(self) -> dict:
        d: dict = {"stratum": self.stratum.value, "proportion": self.proportion}
        if self.qol_t is not None:
            d["qol_t"] = self.qol_t.to_dict()
        if self.qol_c is not None:
            d["qol_c"] = self.qol_c.to_dict()
        if self.covariate_mean is not None:
            d["x"] = {"mean": self.covariate_mean, "sd": self.covariate_sd or 0.0}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StratumSpec":
        x = d.get("x")
        return cls(
            stratum=PrincipalStratum(d["stratum"]),
            proportion=float(d["proportion"]),
            qol_t=OutcomeLaw.from_dict(d["qol_t"]) if "qol_t" in d else None,
            qol_c=OutcomeLaw.from_dict(d["qol_c"]) if "qol_c" in d else None,
            covariate_mean=float(x["mean"]) if x is not None else None,
            covariate_sd=float(x.get("sd", 0.0)) if x is not None else None,
        )


@dataclass(frozen=True)
class PopulationSpec:
    """Ground-truth latent population, one entry per principal stratum.

    SUTVA is assumed throughout: a unit's potential outcomes do not depend on
    any other unit's assignment.
    """

    strata: tuple[StratumSpec, ...]

    def __post_init__(self):
        labels = [s.stratum for s in self.strata]
        if sorted(labels) != sorted(STRATA):
            raise ValueError(f"population needs exactly one entry per stratum, got {labels}")
        # canonical order LL, LD, DL, DD so equality and serialization are stable
        ordered = tuple(sorted(self.strata, key=lambda s: STRATA.index(s.stratum)))
        object.__setattr__(self, "strata", ordered)

    def __getitem__(self, label: PrincipalStratum | str) -> StratumSpec:
        label = PrincipalStratum(label)
        return self.strata[STRATA.index(label)]

    def proportion(self, label: PrincipalStratum | str) -> float:
        return self[label].proportion

    @property
    def has_covariate(self) -> bool:
        return all(s.covariate_mean is not None for s in self.strata)

    @property
    def has_spread(self) -> bool:
        """True when any outcome law has positive sd."""
        return any(
            law is not None and law.sd > 0
            for s in self.strata
            for law in (s.qol_t, s.qol_c)
        )

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "strata": [s.to_dict() for s in self.strata]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationSpec":
        schema = d.get("schema", SCHEMA)
        if schema != SCHEMA:
            raise ValueError(f"unsupported schema {schema!r}, expected {SCHEMA!r}")
        return cls(tuple(StratumSpec.from_dict(s) for s in d["strata"]))

    @classmethod
    def from_json(cls, text: str) -> "PopulationSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "PopulationSpec":
        with open(path) as fh:
            return cls.from_json(fh.read())


def make_population(specs: Iterable[StratumSpec]) -> PopulationSpec:
    return PopulationSpec(tuple(specs))


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate(pop: PopulationSpec) -> ValidationReport:
    """Check proportions and law placement; never raises."""
    problems = []
    total = sum(s.proportion for s in pop.strata)
    if abs(total - 1.0) > PROPORTION_TOL:
        problems.append(f"proportions sum to {total!r}, not 1")
    for s in pop.strata:
        name = s.stratum.value
        if not math.isfinite(s.proportion) or s.proportion < 0:
            problems.append(f"{name}: negative proportion {s.proportion!r}")
        for arm in Arm:
            law = s.law(arm)
            alive = s.stratum.survives(arm)
            if law is None:
                # zero-weight strata may omit laws (e.g. recovered tables)
                if alive and s.proportion > 0:
                    problems.append(f"{name}: missing outcome law on alive cell ({arm.value})")
                continue
            if not alive:
                problems.append(f"{name}: outcome law on dead cell ({arm.value})")
            if not (law.sd >= 0):
                problems.append(f"{name}: negative sd {law.sd!r} ({arm.value})")
            if not math.isfinite(law.mean):
                problems.append(f"{name}: non-finite mean ({arm.value})")
        if s.covariate_sd is not None and not (s.covariate_sd >= 0):
            problems.append(f"{name}: negative covariate sd {s.covariate_sd!r}")
    return ValidationReport(tuple(problems))


def true_sace(pop: PopulationSpec) -> Optional[float]:
    """E[Y(T) - Y(C) | LL]; None when the LL stratum is empty."""
    ll = pop[PrincipalStratum.LL]
    if ll.proportion == 0 or ll.qol_t is None or ll.qol_c is None:
        return None
    return ll.qol_t.mean - ll.qol_c.mean


def true_survival_rate(pop: PopulationSpec, arm: Arm | str) -> float:
    arm = Arm(arm)
    # sum the shortest decimal forms exactly, so 0.2 + 0.4 is 0.6 and not 0.6000000000000001
    total = sum((Fraction(repr(s.proportion)) for s in pop.strata if s.stratum.survives(arm)), Fraction(0))
    return float(total)


def swap_arms(pop: PopulationSpec) -> PopulationSpec:
    """Exchange the roles of treatment and control (LD <-> DL, qol_t <-> qol_c)."""
    return PopulationSpec(
        tuple(
            replace(s, stratum=s.stratum.swapped(), qol_t=s.qol_c, qol_c=s.qol_t)
            for s in pop.strata
        )
    )


def table1_population(spread: bool = False, covariate_sd: Optional[float] = None) -> PopulationSpec:
    """The running-example population (20/40/20/20).

    With ``spread`` the outcome laws get the normal spreads used for the
    mixture example; with ``covariate_sd`` the baseline covariate means
    800/500/900/300 are attached.
    """
    sds = {"LL_t": 70.0, "LL_c": 50.0, "LD_t": 40.0, "DL_c": 60.0} if spread else {}
    cov = covariate_sd is not None

    def law(mean, key):
        return OutcomeLaw(mean, sds.get(key, 0.0))

    return make_population(
        [
            StratumSpec(PrincipalStratum.LL, 0.2, law(900, "LL_t"), law(700, "LL_c"),
                        800.0 if cov else None, covariate_sd),
            StratumSpec(PrincipalStratum.LD, 0.4, law(600, "LD_t"), None,
                        500.0 if cov else None, covariate_sd),
            StratumSpec(PrincipalStratum.DL, 0.2, None, law(800, "DL_c"),
                        900.0 if cov else None, covariate_sd),
            StratumSpec(PrincipalStratum.DD, 0.2, None, None,
                        300.0 if cov else None, covariate_sd),
        ]
    )
