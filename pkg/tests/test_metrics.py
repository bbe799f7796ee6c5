import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coherence_audit.errors import ValidationError
from coherence_audit.metrics import (
    MetricKind,
    MetricValue,
    QuantileGrid,
    ResponseProfile,
    contrast,
    empirical_quantile,
    profile_diagnostics,
    qbm,
    qbm_order_statistics,
    ti_wcm,
    wcm,
    wcm_bruteforce_oracle,
)

from conftest import make_profile

REVERSAL = make_profile([0, 1, 2, 3], [3, 2, 1, 0])
NEAR_REVERSAL = make_profile([0, 1, 2], [2.1, 1.1, 0.1])


def _oracle_min_cost(orig, pert):
    # exact rational enumeration of every assignment
    o = [Fraction(str(x)) for x in orig]
    p = [Fraction(str(x)) for x in pert]
    return min(
        sum((p[perm[i]] - o[i]) ** 2 for i in range(len(o)))
        for perm in itertools.permutations(range(len(o)))
    )


# -- empirical_quantile ------------------------------------------------------

@pytest.mark.parametrize(
    "values, level, expected",
    [([1, 2, 3, 4], 0.5, 2.5), ([5], 0.25, 5.0), ([0, 1, 2, 3], 0.25, 0.75)],
)
def test_empirical_quantile_examples(values, level, expected):
    assert empirical_quantile(values, level) == pytest.approx(expected, abs=1e-15)


def test_empirical_quantile_matches_numpy_linear_method():
    rng = np.random.default_rng(3)
    for _ in range(50):
        v = rng.normal(size=rng.integers(1, 40))
        for q in rng.uniform(0.001, 0.999, size=5):
            assert empirical_quantile(v, q) == pytest.approx(np.quantile(v, q), abs=1e-12)


@pytest.mark.parametrize(
    "values, level, code",
    [([], 0.5, "empty_input"), ([1.0, float("nan")], 0.5, "non_finite_value"),
     ([1.0], 0.0, "level_out_of_range"), ([1.0], 1.0, "level_out_of_range")],
)
def test_empirical_quantile_errors(values, level, code):
    with pytest.raises(ValidationError) as err:
        empirical_quantile(values, level)
    assert err.value.code == code


# -- profile + grid validation ----------------------------------------------

def test_profile_validation():
    with pytest.raises(ValidationError, match="length_mismatch"):
        ResponseProfile(("a", "b"), np.array([1.0, 2.0]), np.array([1.0]))
    with pytest.raises(ValidationError, match="empty_profile"):
        ResponseProfile((), np.array([]), np.array([]))
    with pytest.raises(ValidationError, match="non_finite_score"):
        make_profile([1.0], [float("inf")])


def test_profile_is_immutable():
    p = make_profile([1.0, 2.0], [2.0, 3.0])
    with pytest.raises(ValueError):
        p.original[0] = 5.0


@pytest.mark.parametrize("levels", [(), (0.5, 0.5), (0.6, 0.4), (0.0, 0.5), (0.5, 1.0)])
def test_grid_validation(levels):
    with pytest.raises(ValidationError):
        QuantileGrid(levels)


def test_equispaced_grids():
    assert QuantileGrid.equispaced(5).levels == pytest.approx([1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6])
    assert QuantileGrid.equispaced(9).levels == pytest.approx([0.1 * i for i in range(1, 10)])
    assert QuantileGrid.equispaced(3).grid_id == "K3"


# -- diagnostics -------------------------------------------------------------

def test_diagnostics_reversal():
    d = profile_diagnostics(REVERSAL)
    assert d.paired_rms == pytest.approx(math.sqrt(5), abs=1e-12)
    assert d.transport_rms == 0.0
    assert d.n == 4


def test_diagnostics_identity_and_shift():
    base = [0.3, -1.2, 4.0, 2.2]
    d = profile_diagnostics(make_profile(base, base))
    assert d.paired_rms == 0.0 and d.transport_rms == 0.0
    d = profile_diagnostics(make_profile(base, [x + 5 for x in base]))
    assert d.paired_rms == pytest.approx(5.0)
    assert d.transport_rms == pytest.approx(5.0)
    assert d.mean_perturbed - d.mean_original == pytest.approx(5.0)


# -- QBM ---------------------------------------------------------------------

def test_qbm_reversal_is_one():
    assert qbm(REVERSAL, QuantileGrid((0.25, 0.5, 0.75))).value == pytest.approx(1.0, abs=1e-12)


def test_qbm_near_reversal_median_grid():
    # median displacement 0.1, paired mean square 8.03/3
    expected = 1 - 0.1 / math.sqrt(8.03 / 3)
    assert qbm(NEAR_REVERSAL, QuantileGrid((0.5,))).value == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.93888, abs=5e-6)


@pytest.mark.parametrize("grid", [(0.25, 0.5, 0.75), (0.1, 0.9), (0.5,)])
def test_qbm_uniform_shift_is_zero(grid):
    p = make_profile([0.1, 0.5, -2.0, 3.3], [2.1, 2.5, 0.0, 5.3])
    assert qbm(p, QuantileGrid(grid)).value == pytest.approx(0.0, abs=1e-12)


def test_qbm_positive_part():
    # quantiles move more than the pointwise RMS -> ratio > 1 -> clamp to 0
    p = make_profile([0, 0, 0, 10], [0, 0, 10, 10])
    assert qbm(p, QuantileGrid((0.5, 0.75))).value == 0.0


# -- WCM ---------------------------------------------------------------------

def test_wcm_examples():
    assert wcm(REVERSAL)[0].value == pytest.approx(1.0, abs=1e-12)
    shift = make_profile([0.3, 1.0, -4.0], [1.3, 2.0, -3.0])
    assert wcm(shift)[0].value == pytest.approx(0.0, abs=1e-12)
    cost = _oracle_min_cost([0, 1, 2], [2.1, 1.1, 0.1])
    assert cost == Fraction(3, 100)
    expected = 1 - math.sqrt(0.03 / 8.03)
    assert wcm(NEAR_REVERSAL)[0].value == pytest.approx(expected, abs=1e-12)
    # the commonly quoted 0.938876 is truncated; exact value is 0.93887725...
    assert expected == pytest.approx(0.9388772543, abs=1e-10)


def test_wcm_witness_is_optimal_assignment():
    value, witness = wcm(NEAR_REVERSAL)
    assign = witness.assignment()
    cost = sum((NEAR_REVERSAL.perturbed[assign[i]] - NEAR_REVERSAL.original[i]) ** 2 for i in range(3))
    assert cost == pytest.approx(0.03, abs=1e-12)
    assert sorted(witness.sort_original) == [0, 1, 2]


def test_wcm_witness_ties_break_on_pair_id():
    p = make_profile([1.0, 1.0, 0.0], [5.0, 5.0, 5.0], ids=["c", "a", "b"])
    _, witness = wcm(p)
    assert witness.sort_original == (2, 1, 0)
    assert witness.sort_perturbed == (1, 2, 0)


def test_bruteforce_oracle_examples_and_limits():
    assert wcm_bruteforce_oracle(NEAR_REVERSAL).value == pytest.approx(1 - math.sqrt(0.03 / 8.03))
    same = wcm_bruteforce_oracle(make_profile([1, 2], [1, 2]))
    assert same.value == 0.0 and same.degenerate
    assert wcm_bruteforce_oracle(make_profile([1.0], [4.0])).value == 0.0
    with pytest.raises(ValidationError, match="too_large"):
        wcm_bruteforce_oracle(make_profile(list(range(9)), list(range(9))))


def test_wcm_matches_oracle_random():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        p = make_profile(rng.normal(size=n), rng.normal(size=n))
        assert wcm(p)[0].value == pytest.approx(wcm_bruteforce_oracle(p).value, abs=1e-12)


# -- TI-WCM ------------------------------------------------------------------

def test_ti_wcm_examples():
    shift = make_profile([0.3, 1.0, -4.0, 2.0], [5.3, 6.0, 1.0, 7.0])
    assert ti_wcm(shift).value == pytest.approx(1.0, abs=1e-12)
    assert ti_wcm(make_profile([0, 2], [0, 4])).value == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
    assert ti_wcm(REVERSAL).value == pytest.approx(1.0, abs=1e-12)


def test_ti_wcm_agrees_with_subtraction_form():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(2, 50))
        p = make_profile(rng.normal(size=n), rng.normal(1.0, 2.0, size=n))
        d = profile_diagnostics(p)
        radicand = max(0.0, d.transport_rms**2 - d.mean_gap**2)
        expected = min(1, max(0, 1 - math.sqrt(radicand) / d.paired_rms))
        assert ti_wcm(p).value == pytest.approx(expected, abs=1e-9)


# -- degenerate --------------------------------------------------------------

@pytest.mark.parametrize("fn", [lambda p: qbm(p), lambda p: wcm(p)[0], ti_wcm, qbm_order_statistics])
def test_degenerate_profile(fn):
    p = make_profile([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    out = fn(p)
    assert out.degenerate and out.value == 0.0


# -- contrast ----------------------------------------------------------------

@pytest.mark.parametrize("mech, spur, delta", [(0.5, 0.5, 0.0), (0.4, 0.7, 0.3), (1.0, 0.0, -1.0)])
def test_contrast(mech, spur, delta):
    c = contrast(MetricValue(MetricKind.WCM, mech), MetricValue(MetricKind.WCM, spur))
    assert c.delta == pytest.approx(delta, abs=1e-15)
    assert c.delta == spur - mech


def test_contrast_kind_mismatch():
    with pytest.raises(ValidationError, match="metric_kind_mismatch"):
        contrast(MetricValue(MetricKind.WCM, 0.1), MetricValue(MetricKind.QBM, 0.2))


# -- properties --------------------------------------------------------------

scores = st.lists(
    st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False),
    min_size=2, max_size=30,
)


@st.composite
def profiles(draw):
    orig = draw(scores)
    pert = draw(st.lists(
        st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False),
        min_size=len(orig), max_size=len(orig)))
    return make_profile(orig, pert)


@settings(max_examples=200, deadline=None)
@given(profiles())
def test_property_ranges_and_ordering(p):
    q = qbm(p).value
    w = wcm(p)[0].value
    t = ti_wcm(p).value
    for v in (q, w, t):
        assert 0.0 <= v <= 1.0
    assert w <= t + 1e-12
    d = profile_diagnostics(p)
    assert d.transport_rms <= d.paired_rms + 1e-9 * max(1.0, d.paired_rms)
    assert d.transport_rms**2 >= d.mean_gap**2 - 1e-9 * max(1.0, d.transport_rms**2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-10_000, 10_000), min_size=2, max_size=7, unique=True),
       st.randoms(use_true_random=False))
def test_property_non_identity_permutation_gives_wcm_one(ints, rnd):
    values = [i / 100 for i in ints]
    perm = list(values)
    while perm == values:
        rnd.shuffle(perm)
    assert wcm(make_profile(values, perm))[0].value == pytest.approx(1.0, abs=1e-9)


def test_grid_refinement_identity_small():
    rng = np.random.default_rng(2)
    for n in range(2, 40):
        p = make_profile(rng.normal(size=n), rng.normal(size=n))
        assert qbm_order_statistics(p).value == pytest.approx(wcm(p)[0].value, abs=1e-9)


def test_metric_panel_matches_single_metric_functions():
    from coherence_audit.metrics import metric_panel

    rng = np.random.default_rng(8)
    grids = [QuantileGrid((0.25, 0.5, 0.75)), QuantileGrid.equispaced(9)]
    for _ in range(30):
        n = int(rng.integers(1, 100))
        p = make_profile(rng.normal(size=n), rng.normal(size=n) * 2)
        req = [(MetricKind.QBM, np.array(g.levels)) for g in grids]
        req += [(MetricKind.WCM, None), (MetricKind.TI_WCM, None)]
        got = metric_panel(p.original, p.perturbed, req)
        expected = [qbm(p, g) for g in grids] + [wcm(p)[0], ti_wcm(p)]
        assert [v for v, _ in got] == [e.value for e in expected]
