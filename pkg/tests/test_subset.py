import math

import mpmath
import pytest
from hypothesis import given, settings, strategies as st

from treeprune import fixtures
from treeprune.pipeline import RunConfig
from treeprune.subset import (FeatureSubset, PerturbationCounts, StatTestConfig, SubsetError,
                              choose_margin, count_perturbed, expand_subset, greene_bound,
                              hypergeom_tail_exact, rank_features, select_subset, subset_size)

GOLDEN_GREENE = 0.03219663033659753  # greene_bound(100, 10000, 1.0), frozen before the build


def greene_mp(n, N, lam):
    """The same expression evaluated at 50 digits."""
    mpmath.mp.dps = 50
    n, N, lam = mpmath.mpf(n), mpmath.mpf(N), mpmath.mpf(lam)
    rn = mpmath.sqrt(n)
    pre = mpmath.sqrt(1 / (2 * mpmath.pi * lam ** 2)) / 2
    ratios = ((N - n) / N) * ((rn + 2 * lam) / (rn - 2 * lam)) \
        * ((N - n + 2 * rn * lam) / (N - n - 2 * rn * lam))
    decay = mpmath.exp(-2 / (1 - n / N) * lam ** 2)
    quartic = mpmath.exp(-(1 + n ** 3 / (N - n) ** 3) * lam ** 4 / (3 * n))
    return float(pre * mpmath.sqrt(ratios) * decay * quartic)


class TestCounting:
    def test_identical_pairs(self):
        x = (0.1, 0.2, 0.3)
        assert count_perturbed([(x, x)] * 4).counts == [0, 0, 0]

    def test_single_feature(self):
        pairs = [((0.0, 0.0, 0.0), (0.0, 0.0, v)) for v in (0.1, 0.2, 0.3)]
        c = count_perturbed(pairs)
        assert c.counts == [0, 0, 3] and c.total == 3

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            count_perturbed([((0.0, 0.0), (0.0,))])

    def test_mass_on_informative_features(self):
        informative = tuple(range(0, 100, 10))
        e = fixtures.informative_ensemble(d=100, trees=10, depth=4, seed=2,
                                          informative=informative)
        data = fixtures.uniform_data(e, 60, seed=1)
        from treeprune.pipeline import Setting, adversarial_pairs, generate
        recs = generate(e, data, (), Setting.FULL, RunConfig.untimed(0.1))
        c = count_perturbed(adversarial_pairs(data, recs), 100)
        mass = sum(c.counts)
        assert mass > 0
        assert sum(c.counts[f] for f in informative) >= 0.9 * mass


class TestRanking:
    def test_zero_fraction(self):
        assert len(rank_features(PerturbationCounts([3, 2, 1]), 0.0, 3)) == 0

    def test_ceiling(self):
        assert len(rank_features(PerturbationCounts.zeros(20), 0.05, 20)) == 1

    def test_tie_by_index(self):
        assert rank_features(PerturbationCounts([5, 5, 3]), 0.5, 3).features == (0, 1)

    def test_schedule_sizes_784(self):
        sizes = [subset_size(p, 784) for p in (0.05, 0.10, 0.20, 0.30, 0.40)]
        assert sizes == [40, 79, 157, 236, 314]

    def test_decimal_fraction_is_exact(self):
        assert subset_size(0.1, 30) == 3

    def test_expansion_is_nested(self):
        first = rank_features(PerturbationCounts([9, 8, 0, 0, 0, 0]), 0.2, 6)
        refreshed = PerturbationCounts([9, 8, 0, 0, 50, 40])
        grown = expand_subset(first, refreshed, 0.5, 6, 2)
        assert set(first.features) <= set(grown.features)
        assert set(grown.features) == {0, 1, 4}


class TestGreeneBound:
    def test_golden_value(self):
        assert greene_bound(100, 10000, 1.0) == pytest.approx(GOLDEN_GREENE, rel=1e-9)

    def test_matches_high_precision(self):
        for n, N, lam in [(100, 10000, 1.0), (20, 60, 1.2), (50, 500, 2.0)]:
            assert greene_bound(n, N, lam) == pytest.approx(greene_mp(n, N, lam), rel=1e-12)

    def test_vacuous_when_lambda_too_large(self):
        assert greene_bound(16, 100, 2.0) == 1.0   # sqrt(n) - 2 lambda == 0
        assert greene_bound(16, 100, 3.0) == 1.0

    def test_rejects_nonsense(self):
        with pytest.raises(SubsetError):
            greene_bound(10, 10, 1.0)
        with pytest.raises(SubsetError):
            greene_bound(10, 100, 0.0)

    @settings(max_examples=200)
    @given(n=st.integers(2, 200), extra=st.integers(1, 10000), lam=st.floats(0.01, 20))
    def test_probability_range(self, n, extra, lam):
        N = max(n + extra, 5)
        assert 0.0 <= greene_bound(n, N, lam) <= 1.0


class TestHypergeometric:
    def test_whole_range(self):
        assert hypergeom_tail_exact(5, 3, 10, 5) == 1.0

    def test_negative_threshold(self):
        assert hypergeom_tail_exact(5, 3, 10, -1) == 0.0

    def test_hand_computed(self):
        # (1 + 25 + 100) / 252
        assert hypergeom_tail_exact(5, 5, 10, 2) == 0.5

    def test_invalid(self):
        with pytest.raises(SubsetError):
            hypergeom_tail_exact(5, 11, 10, 2)

    def test_sums_to_one(self):
        n, D, N = 7, 9, 30
        pmf = [math.comb(D, k) * math.comb(N - D, n - k) / math.comb(N, n) for k in range(n + 1)]
        assert hypergeom_tail_exact(n, D, N, 3) == pytest.approx(sum(pmf[:4]), abs=1e-15)


class TestChooseMargin:
    def test_default_configuration(self):
        margin = choose_margin(StatTestConfig(n=100, N=10000, eta=0.1, corrections=4))
        assert 0.08 <= margin <= 0.12
        assert margin == pytest.approx(0.11)

    def test_loose_requirement(self):
        cfg = StatTestConfig(n=100, N=10000, eta=0.99, corrections=1)
        first = next(k / 100 for k in range(1, 50) if greene_bound(100, 10000, k / 10) < 0.99)
        assert choose_margin(cfg) == first

    def test_monotone_in_eta(self):
        margins = [choose_margin(StatTestConfig(eta=eta)) for eta in
                   (0.01, 0.02, 0.05, 0.1, 0.2, 0.4, 0.8, 0.99)]
        assert all(a >= b for a, b in zip(margins, margins[1:]))

    def test_small_n_fails(self):
        with pytest.raises(SubsetError, match="increase n"):
            choose_margin(StatTestConfig(n=3, N=600))

    def test_config_validation(self):
        with pytest.raises(SubsetError):
            StatTestConfig(tau=1.5)
        with pytest.raises(SubsetError):
            StatTestConfig(n=10, N=10)
        with pytest.raises(SubsetError):
            StatTestConfig(delta_margin=0.6)

    def test_lambda(self):
        cfg = StatTestConfig(delta_margin=0.1)
        assert cfg.lam == pytest.approx(1.0)


class TestSelectSubset:
    def test_informative_fixture_stops_at_five_percent(self, informative):
        pool = fixtures.uniform_data(informative, 500, seed=3)
        subset, report = select_subset(informative, pool, RunConfig.untimed(0.1),
                                       StatTestConfig(N=500))
        assert subset.fraction == 0.05 and len(subset) == 5
        assert set(fixtures.INFORMATIVE_3) <= set(subset.features)
        assert report.v_bar_history == [0.0]
        assert report.rounds_used == 2

    def test_parity_fixture_falls_back(self):
        e = fixtures.parity_ensemble(20)
        pool = fixtures.parity_data(20, 500)
        subset, report = select_subset(e, pool, RunConfig.untimed(0.1), StatTestConfig(N=500))
        assert subset.fraction == 0.40 and len(subset) == 8
        assert len(report.v_bar_history) == 4
        assert all(v > 0.25 - report.delta_margin for v in report.v_bar_history)

    def test_pool_too_small(self, informative):
        pool = fixtures.uniform_data(informative, 499, seed=3)
        with pytest.raises(SubsetError, match="500"):
            select_subset(informative, pool, RunConfig.untimed(0.1), StatTestConfig(N=1000))

    def test_report_json(self, informative):
        pool = fixtures.uniform_data(informative, 500, seed=3)
        _, report = select_subset(informative, pool, RunConfig.untimed(0.1),
                                  StatTestConfig(N=500))
        doc = report.to_json()
        assert doc["format_version"] == 1
        assert set(doc) == {"format_version", "features", "fraction", "counts", "rounds_used",
                            "v_bar_history", "delta_margin"}
        assert doc["delta_margin"] == report.delta_margin

    def test_feature_subset_helpers(self):
        fs = FeatureSubset((4, 1), 0.5)
        assert 4 in fs and list(fs) == [4, 1] and fs.complement(5) == [0, 2, 3]
