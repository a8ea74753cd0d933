import math

import numpy as np
import pytest

from sacekit.errors import IdentificationError, InfeasibleError
from sacekit.mixture import (
    EmOptions,
    MixtureFit,
    NormalComponent,
    effective_components,
    em_fit,
    expected_fit,
    identify_strata,
    sace_candidates,
)
from sacekit.strata import PrincipalStratum

LL, LD, DL, DD = PrincipalStratum


def mixture_draws(seed, n, parts):
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, [w for w, _, _ in parts])
    return np.concatenate([rng.normal(m, s, c) for c, (_, m, s) in zip(counts, parts)])


@pytest.fixture(scope="module")
def treated_draws():
    return mixture_draws(1, 200_000, [(1 / 3, 900, 70), (2 / 3, 600, 40)])


@pytest.fixture(scope="module")
def control_draws():
    return mixture_draws(2, 200_000, [(0.5, 700, 50), (0.5, 800, 60)])


def assert_monotone(fit):
    steps = np.diff(fit.trace)
    # relative slack for floating summation only
    assert steps.min() >= -1e-9 * abs(fit.loglik), steps.min()


def test_treated_mixture_recovered(treated_draws):
    fit = em_fit(treated_draws, 2, EmOptions(seed=3))
    low, high = fit.components
    assert abs(low.weight - 2 / 3) <= 0.02 and abs(high.weight - 1 / 3) <= 0.02
    assert abs(low.mean - 600) <= 0.02 * 600 and abs(high.mean - 900) <= 0.02 * 900
    assert fit.converged
    assert_monotone(fit)


def test_control_mixture_weights(control_draws):
    fit = em_fit(control_draws, 2, EmOptions(seed=4))
    for c in fit.components:
        assert abs(c.weight - 0.5) <= 0.03
    assert_monotone(fit)


def test_single_normal_with_two_components():
    y = np.random.default_rng(7).normal(0, 1, 3000)
    fit = em_fit(y)
    combined = sum(c.weight * c.mean for c in fit.components)
    assert combined == pytest.approx(float(y.mean()), abs=1e-6)
    assert abs(combined) < 0.1
    # the components need not coincide, but together they must still look normal
    from scipy.stats import norm

    grid = np.linspace(-4, 4, 161)
    cdf = sum(c.weight * norm.cdf(grid, c.mean, c.sd) for c in fit.components)
    assert np.max(np.abs(cdf - norm.cdf(grid))) < 0.05
    empirical = np.searchsorted(np.sort(y), grid, side="right") / len(y)
    assert np.max(np.abs(cdf - empirical)) < 0.02
    assert_monotone(fit)


def test_components_sorted_and_weights_sum_to_one(treated_draws):
    fit = em_fit(treated_draws[:5000], 2)
    means = [c.mean for c in fit.components]
    assert means == sorted(means)
    assert sum(c.weight for c in fit.components) == pytest.approx(1.0, abs=1e-12)


def test_too_few_samples():
    with pytest.raises(ValueError, match="at least 20"):
        em_fit(np.arange(19.0), 2)


def test_identical_samples_rejected():
    with pytest.raises(ValueError, match="identical"):
        em_fit(np.full(100, 3.0), 2)


def test_restart_count_and_determinism(control_draws):
    y = control_draws[:4000]
    a = em_fit(y, 2, EmOptions(seed=11))
    b = em_fit(y, 2, EmOptions(seed=11))
    assert a == b
    assert a.restarts_used == 10


@pytest.mark.parametrize("seed", range(6))
def test_loglik_monotone_on_fixtures(seed):
    rng = np.random.default_rng(seed)
    parts = [(0.3, 0, 1), (0.7, rng.uniform(0.5, 4), rng.uniform(0.3, 2))]
    fit = em_fit(mixture_draws(seed, 2000, parts), 2, EmOptions(seed=seed))
    assert_monotone(fit)


@pytest.mark.parametrize("a, b", [(2.0, -100.0), (0.01, 3.0), (1000.0, 1e5)])
def test_affine_equivariance(treated_draws, a, b):
    y = treated_draws[:6000]
    base = em_fit(y, 2, EmOptions(seed=5))
    moved = em_fit(a * y + b, 2, EmOptions(seed=5))
    for c0, c1 in zip(base.components, moved.components):
        assert c1.weight == pytest.approx(c0.weight, abs=1e-6)
        assert (c1.mean - b) / a == pytest.approx(c0.mean, abs=1e-6)
        assert c1.sd / a == pytest.approx(c0.sd, abs=1e-6)


def test_variance_floor_blocks_spikes():
    y = np.concatenate([np.zeros(50), np.random.default_rng(0).normal(5, 1, 500)])
    fit = em_fit(y, 2)
    assert min(c.sd for c in fit.components) >= math.sqrt(1e-6) * y.std() * (1 - 1e-9)
    assert np.isfinite(fit.loglik)


# Identification ---------------------------------------------------------------

EXACT_T = expected_fit([(2 / 3, 600, 40), (1 / 3, 900, 70)])
EXACT_C = expected_fit([(0.5, 700, 50), (0.5, 800, 60)])


def test_exact_inputs_identify_ll():
    ident = identify_strata(EXACT_T, EXACT_C, 0.6, 0.4, tol=0.0)
    assert ident.ambiguous
    assert len(ident.solutions) == 2
    for s in ident.solutions:
        p = s.proportions
        assert p[LL] == pytest.approx(0.2, abs=1e-12)
        assert p[LD] == pytest.approx(0.4, abs=1e-12)
        assert p[DL] == pytest.approx(0.2, abs=1e-12)
        assert p[DD] == pytest.approx(0.2, abs=1e-12)
        assert EXACT_T.components[s.t_ll].mean == 900
    assert sace_candidates(ident, EXACT_T, EXACT_C) == [100.0, 200.0]


def test_pure_ll_limit():
    one = expected_fit([(1.0, 500, 20)])
    ident = identify_strata(one, one, 0.7, 0.7)
    assert not ident.ambiguous
    (s,) = ident.solutions
    assert s.proportions[LL] == 0.7
    assert s.proportions[LD] == 0 and s.proportions[DL] == 0
    assert sace_candidates(ident, one, one) == [0.0]


def test_unambiguous_is_singleton():
    t = expected_fit([(0.5, 600, 40), (0.5, 900, 70)])  # sizes 0.3 / 0.3
    c = expected_fit([(0.75, 700, 50), (0.25, 800, 60)])  # sizes 0.3 / 0.1
    ident = identify_strata(t, c, 0.6, 0.4, tol=0.0)
    # both treated candidates equal 0.3, so treated labeling is the ambiguous side here
    assert ident.ambiguous
    t2 = expected_fit([(5 / 6, 600, 40), (1 / 6, 900, 70)])  # sizes 0.5 / 0.1
    c2 = expected_fit([(0.25, 700, 50), (0.75, 800, 60)])  # sizes 0.1 / 0.3
    ident2 = identify_strata(t2, c2, 0.6, 0.4, tol=0.0)
    assert not ident2.ambiguous
    assert sace_candidates(ident2, t2, c2) == [pytest.approx(200.0)]


def test_infeasible_when_ll_exceeds_control_survival():
    t = expected_fit([(0.35, 500, 10), (0.65, 900, 10)])  # 0.315 / 0.585
    c = expected_fit([(1.0, 700, 10)])  # 0.3
    with pytest.raises(InfeasibleError):
        identify_strata(t, c, 0.9, 0.3, tol=0.1)


def test_no_match_is_identification_failure():
    t = expected_fit([(0.5, 600, 40), (0.5, 900, 70)])
    c = expected_fit([(0.9, 700, 50), (0.1, 800, 60)])
    with pytest.raises(IdentificationError):
        identify_strata(t, c, 0.6, 0.4, tol=0.05)


def test_collapsed_component_treated_as_single_stratum():
    fit = expected_fit([(0.995, 500, 10), (0.005, 520, 10)])
    (comp,) = effective_components(fit)
    assert comp.weight == 1.0
    assert comp.mean == pytest.approx(0.995 * 500 + 0.005 * 520)


@pytest.mark.parametrize("seed", range(25))
def test_identified_proportions_consistent(seed):
    rng = np.random.default_rng(seed)
    p_t, p_c = rng.uniform(0.3, 0.9, size=2)
    pi = rng.uniform(0.05, min(p_t, p_c))
    if pi < p_t + p_c - 1:
        pi = p_t + p_c - 1 + 0.01
    wt, wc = pi / p_t, pi / p_c
    t = expected_fit([(wt, 900, 30)] + ([(1 - wt, 500, 30)] if wt < 1 else []))
    c = expected_fit([(wc, 700, 30)] + ([(1 - wc, 300, 30)] if wc < 1 else []))
    ident = identify_strata(t, c, p_t, p_c, tol=0.0)
    for s in ident.solutions:
        p = s.proportions
        assert math.fsum(p.values()) == pytest.approx(1.0, abs=1e-15)
        assert p[LL] + p[LD] == pytest.approx(p_t, abs=1e-15)
        assert p[LL] + p[DL] == pytest.approx(p_c, abs=1e-15)
        assert all(v >= -1e-15 for v in p.values())


def test_well_separated_expectation_inputs_are_unambiguous():
    # strata sizes 0.25/0.35 (T) and 0.25/0.10 (C); gaps > 4 sd
    t = expected_fit([(0.25 / 0.6, 900, 20), (0.35 / 0.6, 600, 20)])
    c = expected_fit([(0.25 / 0.35, 700, 20), (0.10 / 0.35, 400, 20)])
    ident = identify_strata(t, c, 0.6, 0.35, tol=0.05)
    assert not ident.ambiguous
    (s,) = ident.solutions
    assert s.proportions[LL] == pytest.approx(0.25)
    assert s.proportions[DD] == pytest.approx(0.30)
    assert sace_candidates(ident, t, c) == [pytest.approx(200.0)]


def test_fit_json_shape(treated_draws):
    doc = em_fit(treated_draws[:3000]).to_dict()
    assert set(doc) >= {"components", "loglik", "iterations", "converged", "restarts_used"}
