"""
Statistics

One-way ANOVA with Tukey-Kramer post-hoc comparisons, Fisher's exact test
for r x c tables, per-group parameter summaries and the cohort demographics
table.
"""

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, special
from scipy.stats import chi, hypergeom, random_table

from src.config import ALPHA, FISHER_EXACT_MAX_TOTAL, FISHER_MAX_TABLES, FISHER_MC_TABLES, TUKEY_EPSABS
from src.errors import OnhError
from src.parameters import PARAMETER_COLUMNS, SCALAR_PARAMETERS, SECTOR_PARAMETERS, OnhParameters
from src.surfaces import OCTANT_NAMES
from src.volume_io import SeverityGroup, SubjectMeta

GROUP_ORDER = [g.value for g in SeverityGroup]
FISHER_REL_TOL = 1e-7  # tables this close to the observed probability count as "as extreme"

SECTOR_COLUMNS = ["parameter", "octant", "group", "mean", "sd", "n"]
BOXPLOT_COLUMNS = ["parameter", "group", "min", "q1", "median", "q3", "max", "n"]
TUKEY_COLUMNS = ["parameter", "octant", "group_a", "group_b", "mean_diff", "q", "p", "significant", "star"]


@dataclass
class GroupSamples:
    """Values per group with NaNs dropped."""
    labels: List[str]
    values: List[np.ndarray]

    def __post_init__(self):
        if len(self.labels) != len(self.values):
            raise OnhError("stats", "SHAPE_MISMATCH", f"{len(self.labels)} labels but {len(self.values)} groups",
                           field="labels")
        self.values = [np.asarray(v, dtype=float) for v in self.values]
        self.values = [v[~np.isnan(v)] for v in self.values]

    @classmethod
    def from_frame(cls, df: pd.DataFrame, value: str, group: str,
                   order: Optional[Sequence[str]] = None) -> "GroupSamples":
        order = list(order) if order is not None else sorted(df[group].unique())
        return cls(list(order), [df.loc[df[group] == g, value].to_numpy(dtype=float) for g in order])

    def retained(self, min_n: int = 2) -> "GroupSamples":
        keep = [i for i, v in enumerate(self.values) if len(v) >= min_n]
        return GroupSamples([self.labels[i] for i in keep], [self.values[i] for i in keep])

    @property
    def k(self) -> int:
        return len(self.labels)

    @property
    def n(self) -> int:
        return int(sum(len(v) for v in self.values))


class AnovaResult(NamedTuple):
    f: float
    p: float
    df_between: int
    df_within: int


def _within(samples: GroupSamples) -> Tuple[float, int]:
    ssw = float(sum(((v - v.mean()) ** 2).sum() for v in samples.values))
    return ssw, samples.n - samples.k


def _check_anova(samples: GroupSamples) -> None:
    if samples.k < 2:
        raise OnhError("stats", "TOO_FEW_GROUPS", f"need at least 2 groups with 2 values, got {samples.k}",
                       field="groups")
    if samples.n < samples.k + 1 or any(len(v) == 0 for v in samples.values):
        raise OnhError("stats", "TOO_FEW_VALUES", f"{samples.n} values for {samples.k} groups",
                       field="values")


def one_way_anova(samples: GroupSamples) -> AnovaResult:
    """
    One-way ANOVA F test.

    Returns:
        AnovaResult(f, p, df_between, df_within); p from the regularized
        incomplete beta function

    Raises:
        OnhError: ZERO_WITHIN_VARIANCE, TOO_FEW_GROUPS, TOO_FEW_VALUES
    """
    _check_anova(samples)
    grand = np.concatenate(samples.values).mean()
    ssb = float(sum(len(v) * (v.mean() - grand) ** 2 for v in samples.values))
    ssw, df_within = _within(samples)
    df_between = samples.k - 1
    if ssw <= 0:
        raise OnhError("stats", "ZERO_WITHIN_VARIANCE", "all groups are constant", field="values")
    f = (ssb / df_between) / (ssw / df_within)
    p = float(special.betainc(df_within / 2.0, df_between / 2.0, df_within / (df_within + df_between * f)))
    return AnovaResult(float(f), min(max(p, 0.0), 1.0), df_between, df_within)


# =============================================================================
# Studentized range
# =============================================================================

def range_cdf(w: float, k: int) -> float:
    """P(range of k standard normals <= w)."""
    if w <= 0:
        return 0.0

    def integrand(z):
        return special.ndtr(z) - special.ndtr(z - w)

    value, _ = integrate.quad(lambda z: math.exp(-0.5 * z * z) * integrand(z) ** (k - 1),
                              -8.5, 8.5 + w, epsabs=1e-11, limit=200)
    return min(1.0, k * value / math.sqrt(2 * math.pi))


def studentized_range_sf(q: float, k: int, df: float, epsabs: float = TUKEY_EPSABS) -> float:
    """
    P(Q > q) for the studentized range with k groups and df degrees of freedom.

    The outer integral runs over the density of s = chi(df) / sqrt(df); the
    inner range probability uses adaptive quadrature over the normal kernel.
    """
    if q <= 0:
        return 1.0
    scale = 1.0 / math.sqrt(df)
    lo = chi.ppf(1e-14, df, scale=scale)
    hi = chi.isf(1e-14, df, scale=scale)
    value, _ = integrate.quad(lambda s: chi.pdf(s, df, scale=scale) * (1.0 - range_cdf(q * s, k)),
                              lo, hi, epsabs=epsabs, limit=200)
    return min(max(value, 0.0), 1.0)


@dataclass
class TukeyPair:
    group_a: str
    group_b: str
    mean_diff: float  # mean_a - mean_b
    q: float
    p: float
    significant: bool

    @property
    def star(self) -> str:
        return "*" if self.significant else ""


@dataclass
class TukeyResult:
    pairs: List[TukeyPair]
    msw: float
    df_within: int
    k: int
    alpha: float = ALPHA

    def pair(self, a: str, b: str) -> TukeyPair:
        for p in self.pairs:
            if {p.group_a, p.group_b} == {a, b}:
                return p
        raise KeyError((a, b))

    def to_dict(self) -> dict:
        return {"pairs": [asdict(p) for p in self.pairs], "msw": self.msw,
                "df_within": self.df_within, "k": self.k, "alpha": self.alpha}


def tukey_hsd(samples: GroupSamples, alpha: float = ALPHA) -> TukeyResult:
    """
    Tukey HSD with the Tukey-Kramer adjustment for unequal group sizes.

    Raises:
        OnhError: as one_way_anova
    """
    _check_anova(samples)
    ssw, df_within = _within(samples)
    if ssw <= 0:
        raise OnhError("stats", "ZERO_WITHIN_VARIANCE", "all groups are constant", field="values")
    msw = ssw / df_within
    pairs = []
    for i, j in combinations(range(samples.k), 2):
        a, b = samples.values[i], samples.values[j]
        diff = float(a.mean() - b.mean())
        q = abs(diff) / math.sqrt(msw / 2.0 * (1.0 / len(a) + 1.0 / len(b)))
        p = studentized_range_sf(q, samples.k, df_within)
        pairs.append(TukeyPair(samples.labels[i], samples.labels[j], diff, q, p, p < alpha))
    return TukeyResult(pairs=pairs, msw=msw, df_within=df_within, k=samples.k, alpha=alpha)


# =============================================================================
# Fisher's exact test
# =============================================================================

@dataclass
class FisherResult:
    p_value: float
    method: str  # "hypergeometric", "enumeration" or "monte-carlo"
    mc_standard_error: Optional[float] = None
    n_tables: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_table(table) -> np.ndarray:
    table = np.asarray(table)
    if table.ndim != 2 or table.shape[0] < 2 or table.shape[1] < 2:
        raise OnhError("stats", "SHAPE_MISMATCH", f"expected an r x c table with r, c >= 2, got {table.shape}",
                       field="table")
    if np.any(table < 0) or np.any(table != np.round(table)):
        raise OnhError("stats", "INVALID_TABLE", "counts must be nonnegative integers", field="table")
    table = table.astype(np.int64)
    if np.any(table.sum(axis=0) == 0) or np.any(table.sum(axis=1) == 0):
        raise OnhError("stats", "EMPTY_MARGIN", "every row and column needs a positive total", field="table")
    return table


def _log_table_weight(tables: np.ndarray) -> np.ndarray:
    """Log probability up to the margin constant: -sum log(cell!)."""
    return -special.gammaln(np.asarray(tables) + 1.0).sum(axis=(-2, -1))


def _fisher_2x2(table: np.ndarray) -> FisherResult:
    (a, b), (c, d) = table
    n, row1, col1 = a + b + c + d, a + b, a + c
    support = np.arange(max(0, row1 + col1 - n), min(row1, col1) + 1)
    pmf = hypergeom.pmf(support, n, col1, row1)
    observed = hypergeom.pmf(a, n, col1, row1)
    p = float(pmf[pmf <= observed * (1 + FISHER_REL_TOL)].sum())
    return FisherResult(min(p, 1.0), "hypergeometric", n_tables=len(support))


def _enumerate_tables(rows: np.ndarray, cols: np.ndarray, limit: int):
    """All tables with the given margins, or None past the limit."""
    tables: List[np.ndarray] = []
    r, c = len(rows), len(cols)

    def fill_row(i, remaining_cols, acc):
        if len(tables) > limit:
            return
        if i == r - 1:
            tables.append(np.vstack(acc + [remaining_cols]))
            return
        for row in _compositions(int(rows[i]), remaining_cols):
            fill_row(i + 1, remaining_cols - row, acc + [row])
            if len(tables) > limit:
                return

    fill_row(0, cols.copy(), [])
    return None if len(tables) > limit else np.array(tables)


def _compositions(total: int, caps: np.ndarray):
    """Nonnegative integer vectors bounded by caps that sum to total."""
    if len(caps) == 1:
        if total <= caps[0]:
            yield np.array([total], dtype=np.int64)
        return
    rest = int(caps[1:].sum())
    for first in range(max(0, total - rest), min(total, int(caps[0])) + 1):
        for tail in _compositions(total - first, caps[1:]):
            yield np.concatenate(([first], tail))


def fisher_exact(table, seed: int = 0, mc_tables: int = FISHER_MC_TABLES) -> FisherResult:
    """
    Two-sided Fisher exact test for an r x c table.

    2 x 2 tables use the hypergeometric distribution. Larger tables are
    enumerated when the total is at most 200 and the table count stays
    manageable; otherwise the p-value is a Monte-Carlo estimate over random
    tables with the observed margins.

    Raises:
        OnhError: EMPTY_MARGIN
    """
    table = _check_table(table)
    if table.shape == (2, 2):
        return _fisher_2x2(table)

    rows, cols = table.sum(axis=1), table.sum(axis=0)
    observed = _log_table_weight(table) + math.log1p(FISHER_REL_TOL)
    if table.sum() <= FISHER_EXACT_MAX_TOTAL:
        tables = _enumerate_tables(rows, cols, FISHER_MAX_TABLES)
        if tables is not None:
            weights = _log_table_weight(tables)
            norm = special.logsumexp(weights)
            extreme = weights <= observed
            p = float(np.exp(special.logsumexp(weights[extreme]) - norm))
            return FisherResult(min(p, 1.0), "enumeration", n_tables=len(tables))

    rng = np.random.default_rng(seed)
    dist = random_table(rows, cols)
    hits = 0
    remaining = mc_tables
    while remaining > 0:
        chunk = min(remaining, 10_000)
        hits += int(np.count_nonzero(_log_table_weight(dist.rvs(size=chunk, random_state=rng)) <= observed))
        remaining -= chunk
    p = hits / mc_tables
    return FisherResult(p, "monte-carlo", mc_standard_error=math.sqrt(p * (1 - p) / mc_tables),
                        n_tables=mc_tables)


# =============================================================================
# Group summaries
# =============================================================================

def _group_label(group) -> str:
    return group.value if isinstance(group, SeverityGroup) else str(group)


def _star(significant: bool) -> str:
    return "*" if significant else ""


def _parameter_targets() -> List[Tuple[str, str, str]]:
    """(column, parameter, octant) for every summarized value; octant is "" for scalars."""
    targets = []
    for name in SECTOR_PARAMETERS:
        for octant in OCTANT_NAMES + ["avg"]:
            targets.append((f"{name}_{octant}_um", name, octant))
    return targets + [(name, name, "") for name in SCALAR_PARAMETERS]


@dataclass
class SummaryReport:
    sector_table: pd.DataFrame
    boxplot: pd.DataFrame
    tukey: pd.DataFrame
    anova: Dict[str, dict] = field(default_factory=dict)
    groups: Dict[str, int] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"groups": self.groups, "anova": self.anova, "notes": self.notes}


def parameter_frame(eyes: Sequence[Tuple[OnhParameters, SeverityGroup]]) -> pd.DataFrame:
    rows = []
    for params, group in eyes:
        row = params.to_row()
        row["group"] = _group_label(group)
        rows.append(row)
    return pd.DataFrame(rows, columns=PARAMETER_COLUMNS + ["group"])


def summarize(eyes: Sequence[Tuple[OnhParameters, SeverityGroup]], alpha: float = ALPHA) -> SummaryReport:
    """
    Per-parameter, per-group mean and sd, five-number summaries and pairwise
    Tukey comparisons. NaNs are dropped per parameter. Groups with a single
    eye get an empty sd and are left out of the comparisons.
    """
    df = parameter_frame(eyes)
    present = set(df["group"])
    order = [g for g in GROUP_ORDER if g in present] + sorted(present - set(GROUP_ORDER))

    sector_rows, box_rows, tukey_rows = [], [], []
    anova: Dict[str, dict] = {}
    notes: List[str] = []
    for column, name, octant in _parameter_targets():
        samples = GroupSamples.from_frame(df, column, "group", order)
        for label, values in zip(samples.labels, samples.values):
            sd = float(np.std(values, ddof=1)) if len(values) > 1 else math.nan
            mean = float(values.mean()) if len(values) else math.nan
            if octant:
                sector_rows.append([name, octant, label, mean, sd, len(values)])
            if not octant or octant == "avg":
                if len(values):
                    q = np.percentile(values, [0, 25, 50, 75, 100])
                else:
                    q = [math.nan] * 5
                box_rows.append([name if not octant else f"{name}_avg", label, *[float(x) for x in q], len(values)])

        testable = samples.retained(2)
        if testable.k < 2:
            continue
        try:
            result = one_way_anova(testable)
            post_hoc = tukey_hsd(testable, alpha)
        except OnhError as e:
            notes.append(f"{column}: {e.qualified_code}")
            continue
        anova[column] = result._asdict()
        for pair in post_hoc.pairs:
            tukey_rows.append([name, octant, pair.group_a, pair.group_b, pair.mean_diff, pair.q, pair.p,
                               pair.significant, _star(pair.significant)])

    return SummaryReport(
        sector_table=pd.DataFrame(sector_rows, columns=SECTOR_COLUMNS),
        boxplot=pd.DataFrame(box_rows, columns=BOXPLOT_COLUMNS),
        tukey=pd.DataFrame(tukey_rows, columns=TUKEY_COLUMNS),
        anova=anova,
        groups={g: int((df["group"] == g).sum()) for g in order},
        notes=notes,
    )


# =============================================================================
# Demographics
# =============================================================================

def demographics_table(subjects: Sequence[Tuple[SubjectMeta, SeverityGroup]]) -> pd.DataFrame:
    """
    Cohort summary: age and MD as mean (sd) with ANOVA p, sex and race
    counts with Fisher exact p. One row per characteristic, one column per
    group plus "p".
    """
    df = pd.DataFrame([{
        "group": _group_label(g), "age": m.age, "md_db": m.md_db,
        "female": (m.sex or "").upper().startswith("F"), "race": m.race or "unknown",
    } for m, g in subjects])
    present = set(df["group"])
    order = [g for g in GROUP_ORDER if g in present]
    rows = []

    rows.append(["n"] + [str(int((df["group"] == g).sum())) for g in order] + [""])
    for column, label in (("age", "age, years"), ("md_db", "MD, dB")):
        samples = GroupSamples.from_frame(df, column, "group", order)
        cells = [f"{v.mean():.2f} ({v.std(ddof=1):.2f})" if len(v) > 1 else
                 (f"{v.mean():.2f}" if len(v) else "") for v in samples.values]
        try:
            p = f"{one_way_anova(samples.retained(2)).p:.3g}"
        except OnhError:
            p = ""
        rows.append([label] + cells + [p])

    sex = pd.crosstab(df["group"], df["female"]).reindex(index=order, columns=[True, False], fill_value=0)
    counts = sex[True].to_numpy()
    totals = sex.sum(axis=1).to_numpy()
    rows.append(["female, n (%)"] + [f"{c} ({100.0 * c / t:.1f})" for c, t in zip(counts, totals)]
                + [_fisher_cell(sex.to_numpy())])

    races = sorted(df["race"].unique())
    race = pd.crosstab(df["group"], df["race"]).reindex(index=order, columns=races, fill_value=0)
    race_p = _fisher_cell(race.to_numpy())
    for i, name in enumerate(races):
        rows.append([f"race: {name}, n"] + [str(int(race.loc[g, name])) for g in order]
                    + [race_p if i == 0 else ""])
    return pd.DataFrame(rows, columns=["characteristic"] + order + ["p"])


def _fisher_cell(table: np.ndarray) -> str:
    try:
        return f"{fisher_exact(table).p_value:.3g}"
    except OnhError:
        return ""
