"""Exact and closed-form statistics for the trial report.

Three tests cover every outcome:

* ``poisson_rate_compare`` -- two-group Poisson rate comparison, identical to
  a one-covariate log-link Poisson regression: the Wald test on the log rate
  ratio with SE = sqrt(1/sum_t + 1/sum_c).
* ``mann_whitney_u`` -- exact two-sided p by full enumeration of group
  assignments when n_x + n_y <= 12, otherwise the normal approximation with
  tie and continuity corrections.
* ``fisher_exact`` -- two-sided p as the total hypergeometric probability of
  all tables (margins fixed) no more likely than the observed one, computed
  in log-gamma arithmetic so large margins stay exact enough.

Each result carries a ``flags`` tuple naming any degenerate-input handling.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

EXACT_MWU_LIMIT = 12
_PROB_TIE_SLACK = 1e-12


def normal_sf(z: float) -> float:
    """Survival function of the standard normal."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass(frozen=True)
class PoissonComparison:
    mean_t: float
    mean_c: float
    rate_ratio: float
    p_value: float | None
    flags: tuple[str, ...] = ()

    @property
    def relative_reduction(self) -> float:
        return 1.0 - self.rate_ratio


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_value: float
    method: str
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class FisherResult:
    p_two_sided: float
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class SavingsResult:
    tests_avoided: int
    dollars: float


def poisson_rate_compare(counts_t: Sequence[int], counts_c: Sequence[int]) -> PoissonComparison:
    """Compare mean event counts between two groups of observation units.

    Equivalent to Poisson regression with a single binary group covariate;
    with one covariate the MLE is the ratio of group means and the Wald SE of
    its log is sqrt(1/S_t + 1/S_c) where S is the group total. If exactly one
    total is zero a 0.5 continuity correction is applied to both totals
    (flagged ``zero_total_correction``); if both are zero the ratio is 1 and
    p is undefined (flagged ``undefined``).
    """
    if not counts_t or not counts_c:
        raise ValueError("both count lists must be non-empty")
    if any(c < 0 for c in counts_t) or any(c < 0 for c in counts_c):
        raise ValueError("counts must be non-negative")
    n_t, n_c = len(counts_t), len(counts_c)
    s_t, s_c = float(sum(counts_t)), float(sum(counts_c))
    mean_t, mean_c = s_t / n_t, s_c / n_c

    flags: list[str] = []
    if s_t == 0 and s_c == 0:
        return PoissonComparison(mean_t, mean_c, 1.0, None, ("undefined", "zero_totals"))
    wt, wc = s_t, s_c
    if s_t == 0 or s_c == 0:
        wt, wc = s_t + 0.5, s_c + 0.5
        flags.append("zero_total_correction")
    rate_ratio = (wt / n_t) / (wc / n_c) if (s_t == 0 or s_c == 0) else mean_t / mean_c
    log_rr = math.log(wt / n_t) - math.log(wc / n_c)
    se = math.sqrt(1.0 / wt + 1.0 / wc)
    z = log_rr / se
    p = min(1.0, 2.0 * normal_sf(abs(z)))
    return PoissonComparison(mean_t, mean_c, rate_ratio, p, tuple(flags))


def _midranks(pooled: Sequence[float]) -> list[float]:
    """Fractional ranks (ties get the mean rank), 1-based."""
    order = sorted(range(len(pooled)), key=lambda i: pooled[i])
    ranks = [0.0] * len(pooled)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        mean_rank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def mann_whitney_u(xs: Sequence[float], ys: Sequence[float]) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test.

    The statistic reported is U for ``xs`` (rank-sum form). The exact path
    enumerates every way of assigning the pooled values to the two groups and
    counts assignments at least as extreme as observed, i.e. with
    min(U, U') <= the observed min; this handles ties with midranks.
    """
    if not xs or not ys:
        raise ValueError("both samples must be non-empty")
    n1, n2 = len(xs), len(ys)
    pooled = list(xs) + list(ys)
    ranks = _midranks(pooled)
    r1 = sum(ranks[:n1])
    u1 = r1 - n1 * (n1 + 1) / 2.0
    u2 = n1 * n2 - u1

    if len(set(pooled)) == 1:
        return MannWhitneyResult(u=u1, p_value=1.0, method="exact" if n1 + n2 <= EXACT_MWU_LIMIT else "normal_approx", flags=("all_ties",))

    if n1 + n2 <= EXACT_MWU_LIMIT:
        observed_min = min(u1, u2)
        total = 0
        extreme = 0
        for combo in itertools.combinations(range(n1 + n2), n1):
            r = sum(ranks[i] for i in combo)
            u = r - n1 * (n1 + 1) / 2.0
            total += 1
            if min(u, n1 * n2 - u) <= observed_min + 1e-9:
                extreme += 1
        return MannWhitneyResult(u=u1, p_value=extreme / total, method="exact")

    n = n1 + n2
    tie_counts: dict[float, int] = {}
    for v in pooled:
        tie_counts[v] = tie_counts.get(v, 0) + 1
    tie_term = sum(t ** 3 - t for t in tie_counts.values()) / (n * (n - 1))
    var_u = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var_u <= 0:
        return MannWhitneyResult(u=u1, p_value=1.0, method="normal_approx", flags=("all_ties",))
    mu = n1 * n2 / 2.0
    z = (max(u1, u2) - mu - 0.5) / math.sqrt(var_u)
    p = min(1.0, 2.0 * normal_sf(z))
    return MannWhitneyResult(u=u1, p_value=p, method="normal_approx")


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def fisher_exact(a: int, b: int, c: int, d: int) -> FisherResult:
    """Fisher's exact test on the 2x2 table [[a, b], [c, d]].

    Two-sided p sums the hypergeometric probabilities of every table with the
    observed margins whose probability does not exceed the observed table's
    (within 1e-12 relative slack for float comparability). Degenerate margins
    give p = 1 by convention, flagged.
    """
    for v in (a, b, c, d):
        if v < 0 or v != int(v):
            raise ValueError("table entries must be non-negative integers")
    r1, r2 = a + b, c + d
    c1 = a + c
    n = r1 + r2
    if n == 0:
        return FisherResult(1.0, ("degenerate_margins", "all_zero"))
    if r1 == 0 or r2 == 0 or c1 == 0 or c1 == n:
        return FisherResult(1.0, ("degenerate_margins",))

    denom = _log_comb(n, c1)
    lo = max(0, c1 - r2)
    hi = min(r1, c1)
    log_obs = _log_comb(r1, a) + _log_comb(r2, c1 - a) - denom
    cutoff = log_obs + math.log1p(_PROB_TIE_SLACK)
    p = 0.0
    for k in range(lo, hi + 1):
        log_pk = _log_comb(r1, k) + _log_comb(r2, c1 - k) - denom
        if log_pk <= cutoff:
            p += math.exp(log_pk)
    return FisherResult(min(1.0, p))


def relative_reduction(mean_t: float, mean_c: float) -> float:
    """Relative reduction of the treatment mean versus control: 1 - t/c."""
    if mean_c == 0:
        raise ValueError("control mean must be non-zero")
    return 1.0 - mean_t / mean_c


def savings(
    annual_tests: float,
    repetitive_fraction: float,
    relative_reduction: float,
    unit_charge: float = 0.0,
) -> SavingsResult:
    """Tests avoided per year and the corresponding charge savings.

    tests_avoided = annual_tests * repetitive_fraction * relative_reduction,
    rounded to the nearest integer; dollars = tests_avoided * unit_charge.
    """
    if annual_tests < 0 or unit_charge < 0:
        raise ValueError("inputs must be non-negative")
    for name, frac in (("repetitive_fraction", repetitive_fraction), ("relative_reduction", relative_reduction)):
        if not 0 <= frac <= 1:
            raise ValueError(f"{name} must lie in [0, 1]")
    avoided = round(annual_tests * repetitive_fraction * relative_reduction)
    return SavingsResult(tests_avoided=int(avoided), dollars=avoided * unit_charge)
