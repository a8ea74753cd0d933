import numpy as np
import pytest

from sacekit import ArmObservation, expected_observed_summary, table1_population
from sacekit.strata import OutcomeLaw, PopulationSpec, PrincipalStratum, StratumSpec


@pytest.fixture
def table1():
    return table1_population()


@pytest.fixture
def table4(table1):
    return expected_observed_summary(table1)


@pytest.fixture
def table4_arms(table4):
    return ArmObservation.from_summary(table4, "T"), ArmObservation.from_summary(table4, "C")


def random_population(rng, monotonicity=False, dominance=False, values=(0, 1000)):
    """Point-mass population drawn at random, respecting the requested assumptions."""
    props = rng.dirichlet(np.ones(4))
    if monotonicity:
        props[2] = 0.0
        props = props / props.sum()
    props = np.round(props, 6)
    props[3] = 0.0
    props[3] = round(1.0 - props.sum(), 6)
    if props[3] < 0:
        props[0] += props[3]
        props[3] = 0.0
    props = [float(p) for p in props]
    lo, hi = values
    ll_t, ll_c, ld_t, dl_c = (float(v) for v in rng.integers(lo, hi, size=4))
    if dominance:
        ld_t = min(ld_t, ll_t)
        dl_c = min(dl_c, ll_c)
    LL, LD, DL, DD = PrincipalStratum
    return PopulationSpec(
        (
            StratumSpec(LL, props[0], OutcomeLaw(ll_t), OutcomeLaw(ll_c)),
            StratumSpec(LD, props[1], OutcomeLaw(ld_t), None),
            StratumSpec(DL, props[2], None, OutcomeLaw(dl_c)),
            StratumSpec(DD, props[3]),
        )
    )


def random_arm(rng, max_support=6, survival=None):
    k = int(rng.integers(1, max_support + 1))
    values = rng.choice(np.arange(0, 101), size=k, replace=False).astype(float)
    masses = rng.dirichlet(np.ones(k))
    masses = masses / masses.sum()
    p = float(rng.uniform(0.05, 1.0)) if survival is None else survival
    return ArmObservation(p, values, masses)
