"""
Tests for ANOVA, Tukey HSD, Fisher's exact test and the group summaries,
checked against scipy and brute-force enumeration.
"""

import math

import numpy as np
from scipy import stats as sps
from scipy.special import gammaln

from src.errors import OnhError
from src.parameters import OnhParameters
from src.stats import (
    GroupSamples,
    demographics_table,
    fisher_exact,
    one_way_anova,
    studentized_range_sf,
    summarize,
    tukey_hsd,
)
from src.volume_io import SeverityGroup, SubjectMeta


def _samples(seed=0, sizes=(8, 11, 6), shifts=(0.0, 0.8, 1.5)) -> GroupSamples:
    rng = np.random.default_rng(seed)
    values = [rng.normal(s, 1.0, size=n) for n, s in zip(sizes, shifts)]
    return GroupSamples(["A", "B", "C"][:len(values)], values)


def _table_log_prob(table, rows, cols) -> float:
    n = sum(rows)
    return (gammaln(np.asarray(rows) + 1).sum() + gammaln(np.asarray(cols) + 1).sum()
            - gammaln(n + 1) - gammaln(np.asarray(table) + 1).sum())


def _brute_force_2xc(table) -> float:
    """Exact two-sided p for a 2 x 3 table by listing every table with its margins."""
    table = np.asarray(table)
    rows, cols = table.sum(axis=1), table.sum(axis=0)
    observed = math.exp(_table_log_prob(table, rows, cols))
    p = 0.0
    for a in range(min(rows[0], cols[0]) + 1):
        for b in range(min(rows[0] - a, cols[1]) + 1):
            c = rows[0] - a - b
            if c > cols[2]:
                continue
            candidate = np.array([[a, b, c], [cols[0] - a, cols[1] - b, cols[2] - c]])
            prob = math.exp(_table_log_prob(candidate, rows, cols))
            if prob <= observed * (1 + 1e-7):
                p += prob
    return p


def _expect_code(fn, code):
    try:
        fn()
        assert False, f"Should have raised {code}"
    except OnhError as e:
        assert e.code == code, f"expected {code}, got {e.code}"
        return e


def test_anova_matches_scipy():
    for seed in range(3):
        samples = _samples(seed)
        result = one_way_anova(samples)
        reference = sps.f_oneway(*samples.values)
        assert abs(result.f - reference.statistic) < 1e-9 * max(1.0, reference.statistic)
        assert abs(result.p - reference.pvalue) < 1e-10
        assert (result.df_between, result.df_within) == (2, 22)
    print("   [OK] F statistic and p agree with scipy.stats.f_oneway")


def test_anova_errors():
    with_nan = GroupSamples(["A", "B"], [[1.0, np.nan, 2.0], [3.0, 4.0]])
    assert [len(v) for v in with_nan.values] == [2, 2]
    _expect_code(lambda: one_way_anova(GroupSamples(["A"], [[1.0, 2.0]])), "TOO_FEW_GROUPS")
    _expect_code(lambda: one_way_anova(GroupSamples(["A", "B"], [[1.0], [2.0]])), "TOO_FEW_VALUES")
    _expect_code(lambda: one_way_anova(GroupSamples(["A", "B"], [[1.0, 1.0], [2.0, 2.0]])),
                 "ZERO_WITHIN_VARIANCE")
    _expect_code(lambda: GroupSamples(["A", "B"], [[1.0]]), "SHAPE_MISMATCH")
    assert GroupSamples(["A", "B", "C"], [[1.0, 2.0], [3.0], [4.0, 5.0]]).retained(2).labels == ["A", "C"]
    print("   [OK] too few groups, too few values and constant groups are rejected")


def test_studentized_range_matches_scipy():
    for q, k, df in ((3.5, 4, 20), (2.0, 3, 10), (5.0, 4, 60), (1.2, 2, 15)):
        ours = studentized_range_sf(q, k, df)
        reference = float(sps.studentized_range.sf(q, k, df))
        assert abs(ours - reference) < 1e-5, f"q={q} k={k} df={df}: {ours} vs {reference}"
    assert studentized_range_sf(0.0, 3, 10) == 1.0
    print("   [OK] upper tail of the studentized range within 1e-5 of scipy")


def test_tukey_two_groups_equals_t_test():
    samples = _samples(4, sizes=(9, 13), shifts=(0.0, 0.7))
    result = tukey_hsd(samples)
    pair = result.pair("A", "B")
    t = sps.ttest_ind(samples.values[0], samples.values[1])
    assert abs(pair.q - abs(t.statistic) * math.sqrt(2.0)) < 1e-9
    assert abs(pair.p - t.pvalue) < 1e-6
    assert abs(pair.mean_diff - (samples.values[0].mean() - samples.values[1].mean())) < 1e-12
    print(f"   [OK] k = 2 reduces to the pooled t test (p = {pair.p:.4f})")


def test_tukey_kramer_matches_scipy():
    samples = _samples(5)
    result = tukey_hsd(samples)
    reference = sps.tukey_hsd(*samples.values)
    assert [(p.group_a, p.group_b) for p in result.pairs] == [("A", "B"), ("A", "C"), ("B", "C")]
    for pair in result.pairs:
        i, j = "ABC".index(pair.group_a), "ABC".index(pair.group_b)
        assert abs(pair.p - reference.pvalue[i, j]) < 1e-5
        assert pair.significant == (pair.p < 0.05) and pair.star == ("*" if pair.significant else "")
    assert result.k == 3 and result.df_within == 22
    try:
        result.pair("A", "D")
        assert False, "Should have raised KeyError"
    except KeyError:
        pass
    print("   [OK] unequal-size pairwise p values agree with scipy.stats.tukey_hsd")


def test_fisher_2x2_matches_scipy():
    for table in ([[8, 2], [1, 5]], [[3, 7], [7, 3]], [[0, 5], [5, 0]], [[10, 10], [10, 10]]):
        result = fisher_exact(table)
        _, reference = sps.fisher_exact(table)
        assert result.method == "hypergeometric"
        assert abs(result.p_value - reference) < 1e-10, f"{table}: {result.p_value} vs {reference}"
    print("   [OK] 2 x 2 p values agree with scipy.stats.fisher_exact")


def test_fisher_enumeration():
    for table in ([[3, 1, 4], [1, 5, 2]], [[6, 0, 2], [1, 4, 3]], [[2, 2, 2], [2, 2, 2]]):
        result = fisher_exact(table)
        assert result.method == "enumeration"
        assert abs(result.p_value - _brute_force_2xc(table)) < 1e-10
    big = fisher_exact([[5, 2, 1], [1, 4, 2], [0, 1, 6]])
    assert big.method == "enumeration" and 0.0 < big.p_value < 0.1
    print("   [OK] r x c enumeration equals brute force over all tables with the margins")


def test_fisher_monte_carlo():
    table = [[40, 30, 31], [30, 40, 30]]
    result = fisher_exact(table, seed=3, mc_tables=40_000)
    assert result.method == "monte-carlo" and result.n_tables == 40_000
    exact = _brute_force_2xc(table)
    assert abs(result.p_value - exact) < 4 * result.mc_standard_error + 1e-3
    again = fisher_exact(table, seed=3, mc_tables=40_000)
    assert again.p_value == result.p_value
    print(f"   [OK] Monte-Carlo p {result.p_value:.4f} +/- {result.mc_standard_error:.4f} (exact {exact:.4f})")


def test_fisher_errors():
    _expect_code(lambda: fisher_exact([[1, 2, 3]]), "SHAPE_MISMATCH")
    _expect_code(lambda: fisher_exact([[1, -1], [2, 3]]), "INVALID_TABLE")
    _expect_code(lambda: fisher_exact([[1.5, 1], [2, 3]]), "INVALID_TABLE")
    _expect_code(lambda: fisher_exact([[1, 0], [2, 0]]), "EMPTY_MARGIN")
    print("   [OK] bad shapes, non-count cells and empty margins rejected")


def _params(rng, rnfl_shift=0.0, lcd=None, bmoa=2.0) -> OnhParameters:
    return OnhParameters(
        rnflt_um=rng.normal(100.0 + rnfl_shift, 3.0, size=8),
        mrw_um=rng.normal(300.0, 30.0, size=8),
        gcct_um=rng.normal(170.0, 10.0, size=8),
        cht_um=rng.normal(150.0, 20.0, size=8),
        pld_um=float(rng.normal(250.0, 20.0)),
        mpt_um=float(rng.normal(180.0, 20.0)),
        lcd_um=float(rng.normal(430.0, 20.0)) if lcd is None else lcd,
        lc_gsi=float(rng.normal(-0.4, 0.1)),
        ppsa_deg=float(rng.normal(5.0, 2.0)),
        bmoa_mm2=bmoa,
    )


def test_summarize():
    rng = np.random.default_rng(9)
    eyes = [(_params(rng), SeverityGroup.NORMAL) for _ in range(3)]
    eyes.append((_params(rng, lcd=np.nan), SeverityGroup.NORMAL))
    eyes += [(_params(rng, rnfl_shift=-40.0), SeverityGroup.MILD) for _ in range(4)]
    eyes.append((_params(rng), SeverityGroup.MODERATE))
    report = summarize(eyes)

    assert report.groups == {"NORMAL": 4, "MILD": 4, "MODERATE": 1}
    assert len(report.sector_table) == 4 * 9 * 3
    row = report.sector_table[(report.sector_table["parameter"] == "rnflt")
                              & (report.sector_table["octant"] == "T")
                              & (report.sector_table["group"] == "NORMAL")].iloc[0]
    expected = np.array([p.rnflt_um[0] for p, g in eyes if g == SeverityGroup.NORMAL])
    assert abs(row["mean"] - expected.mean()) < 1e-9 and abs(row["sd"] - expected.std(ddof=1)) < 1e-9
    single = report.sector_table[report.sector_table["group"] == "MODERATE"]
    assert single["sd"].isna().all() and (single["n"] == 1).all()

    box = report.boxplot
    assert len(box) == 10 * 3
    lcd_normal = box[(box["parameter"] == "lcd_um") & (box["group"] == "NORMAL")].iloc[0]
    assert lcd_normal["n"] == 3, "NaN values are dropped per parameter"

    assert "bmoa_mm2" not in report.anova
    assert report.notes == ["bmoa_mm2: stats.ZERO_WITHIN_VARIANCE"]
    assert len(report.tukey) == 41 and len(report.anova) == 41
    assert set(report.tukey["group_a"]) == {"NORMAL"} and set(report.tukey["group_b"]) == {"MILD"}
    rnfl_avg = report.tukey[(report.tukey["parameter"] == "rnflt") & (report.tukey["octant"] == "avg")].iloc[0]
    assert bool(rnfl_avg["significant"]) and rnfl_avg["star"] == "*"
    assert rnfl_avg["mean_diff"] > 30.0
    print(f"   [OK] {len(report.sector_table)} sector rows, {len(report.tukey)} comparisons, constant BMOA noted")


def test_demographics_table():
    subjects = [
        (SubjectMeta("n1", age=60.0, sex="F", md_db=-0.5, race="Chinese"), SeverityGroup.NORMAL),
        (SubjectMeta("n2", age=62.0, sex="M", md_db=-1.0, race="Chinese"), SeverityGroup.NORMAL),
        (SubjectMeta("n3", age=64.0, sex="F", md_db=0.5, race="Indian"), SeverityGroup.NORMAL),
        (SubjectMeta("m1", age=66.0, sex="M", md_db=-3.0, race="Chinese"), SeverityGroup.MILD),
        (SubjectMeta("m2", age=70.0, sex="M", md_db=-4.0, race="Malay"), SeverityGroup.MILD),
        (SubjectMeta("m3", age=71.0, sex="F", md_db=-5.5), SeverityGroup.MILD),
    ]
    table = demographics_table(subjects)
    assert list(table.columns) == ["characteristic", "NORMAL", "MILD", "p"]
    rows = table.set_index("characteristic")
    assert rows.loc["n", "NORMAL"] == "3"
    assert rows.loc["age, years", "NORMAL"] == "62.00 (2.00)"
    age_p = sps.f_oneway([60.0, 62.0, 64.0], [66.0, 70.0, 71.0]).pvalue
    assert rows.loc["age, years", "p"] == f"{age_p:.3g}"
    assert rows.loc["female, n (%)", "NORMAL"] == "2 (66.7)"
    assert rows.loc["female, n (%)", "p"] == f"{sps.fisher_exact([[2, 1], [1, 2]])[1]:.3g}"
    race_rows = [r for r in table["characteristic"] if r.startswith("race: ")]
    assert race_rows == ["race: Chinese, n", "race: Indian, n", "race: Malay, n", "race: unknown, n"]
    assert rows.loc["race: unknown, n", "MILD"] == "1" and rows.loc["race: Indian, n", "p"] == ""
    assert 0.0 < float(rows.loc["race: Chinese, n", "p"]) <= 1.0
    print("   [OK] age and MD as mean (sd) with ANOVA p; sex and race counts with Fisher p")


if __name__ == "__main__":
    print("=" * 60)
    print("STATISTICS TEST")
    print("=" * 60)
    tests = [
        test_anova_matches_scipy,
        test_anova_errors,
        test_studentized_range_matches_scipy,
        test_tukey_two_groups_equals_t_test,
        test_tukey_kramer_matches_scipy,
        test_fisher_2x2_matches_scipy,
        test_fisher_enumeration,
        test_fisher_monte_carlo,
        test_fisher_errors,
        test_summarize,
        test_demographics_table,
    ]
    for i, test in enumerate(tests, 1):
        print(f"\n{i}. {test.__name__}...")
        test()
    print("\n" + "=" * 60)
    print("ALL TESTS PASSED [OK]")
    print("=" * 60)
