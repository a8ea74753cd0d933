import numpy as np
import pytest

from sacekit.covariate import (
    BinningRule,
    format_recovered,
    group_by_covariate,
    recover_principal_table,
)
from sacekit.strata import Arm, PrincipalStratum, table1_population, true_sace, validate
from sacekit.trial import RecordError, UnitRecord, assign_and_observe

LL, LD, DL, DD = PrincipalStratum

# Table 8 layout in units of 1%: (x, stratum, arm, alive, y)
TABLE8 = [
    (800, LL, Arm.T, True, 900.0), (800, LL, Arm.C, True, 700.0),
    (500, LD, Arm.T, True, 600.0), (500, LD, Arm.C, False, None),
    (900, DL, Arm.T, False, None), (900, DL, Arm.C, True, 800.0),
    (300, DD, Arm.T, False, None), (300, DD, Arm.C, False, None),
]
SHARES = {LL: 10, LD: 20, DL: 10, DD: 10}


@pytest.fixture
def table9_records():
    records = []
    for x, stratum, arm, alive, y in TABLE8:
        for _ in range(SHARES[stratum]):
            records.append(UnitRecord(len(records), arm, alive, y, float(x)))
    return records


def test_groups_match_table9(table9_records):
    groups = group_by_covariate(table9_records)
    by_x = {g.x_center: g for g in groups}
    assert sorted(by_x) == [300, 500, 800, 900]
    assert (by_x[800].survival_rate_t, by_x[800].survival_rate_c) == (1.0, 1.0)
    assert (by_x[500].survival_rate_t, by_x[500].survival_rate_c) == (1.0, 0.0)
    assert (by_x[900].survival_rate_t, by_x[900].survival_rate_c) == (0.0, 1.0)
    assert (by_x[300].survival_rate_t, by_x[300].survival_rate_c) == (0.0, 0.0)
    assert by_x[800].mean_y_t == 900 and by_x[800].mean_y_c == 700
    assert by_x[500].mean_y_c is None


def test_recovers_table7(table9_records):
    rec = recover_principal_table(group_by_covariate(table9_records))
    pop = rec.population
    assert validate(pop).ok
    assert [s.proportion for s in pop.strata] == [0.2, 0.4, 0.2, 0.2]
    assert (pop[LL].qol_t.mean, pop[LL].qol_c.mean) == (900, 700)
    assert pop[LD].qol_t.mean == 600 and pop[LD].qol_c is None
    assert pop[DL].qol_c.mean == 800 and pop[DL].qol_t is None
    assert pop[DD].qol_t is None and pop[DD].qol_c is None
    assert [pop[s].covariate_mean for s in (LL, LD, DL, DD)] == [800, 500, 900, 300]
    assert true_sace(pop) == 200
    assert not rec.low_confidence


def test_group_order_does_not_matter(table9_records):
    groups = group_by_covariate(table9_records)
    a = recover_principal_table(groups)
    b = recover_principal_table(list(reversed(groups)))
    assert a.population == b.population


def test_single_group_alive_everywhere():
    recs = [UnitRecord(i, Arm.T if i % 2 else Arm.C, True, 1.0, 5.0) for i in range(10)]
    (g,) = group_by_covariate(recs)
    assert (g.survival_rate_t, g.survival_rate_c) == (1.0, 1.0)


def test_all_dead_group_is_dd():
    recs = [UnitRecord(i, Arm.T if i % 2 else Arm.C, False, None, 5.0) for i in range(10)]
    rec = recover_principal_table(group_by_covariate(recs))
    assert rec.population.proportion(DD) == 1.0
    assert validate(rec.population).ok


def test_missing_covariate_rejected():
    with pytest.raises(RecordError, match="covariate"):
        group_by_covariate([UnitRecord(0, Arm.T, True, 1.0, None)])


def test_constant_covariate_warns_everywhere(table1):
    rec_table = assign_and_observe(table1, 2000, seed=3)  # no covariate in Table 1
    rec_table.x[:] = 100.0
    rec = recover_principal_table(group_by_covariate(rec_table))
    assert rec.low_confidence
    assert all(g.separation_warning for g in rec.groups)
    assert "warning" in format_recovered(rec)


def test_merged_groups_use_size_weighted_means():
    recs = []
    for x, y, n in [(1.0, 10.0, 30), (2.0, 40.0, 10)]:
        for i in range(n):
            recs.append(UnitRecord(len(recs), Arm.T if i % 2 else Arm.C, True, y, x))
    rec = recover_principal_table(group_by_covariate(recs))
    ll = rec.population[LL]
    assert ll.proportion == 1.0
    assert ll.qol_t.mean == pytest.approx((30 * 10 + 10 * 40) / 40)


def test_simulated_table7_recovered():
    pop = table1_population(covariate_sd=10)
    records = assign_and_observe(pop, 10_000, seed=0)
    groups = group_by_covariate(records, BinningRule(width=100))
    assert [g.x_center for g in groups] == [300, 500, 800, 900]
    rec = recover_principal_table(groups)
    for s in rec.population.strata:
        assert abs(s.proportion - pop[s.stratum].proportion) <= 0.02
        for arm in Arm:
            truth, got = pop[s.stratum].law(arm), s.law(arm)
            assert (truth is None) == (got is None)
            if truth is not None:
                assert abs(got.mean - truth.mean) <= 5
    assert abs(rec.sace - 200) <= 10


def test_report_layout(table9_records):
    text = format_recovered(recover_principal_table(group_by_covariate(table9_records)))
    lines = text.splitlines()
    assert lines[0].split()[:3] == ["X", "%pop", "stratum"]
    ld = next(l for l in lines if " LD " in l)
    assert ld.split()[-3:] == ["D", "*", "*"]
