"""Normality-gated one-sided comparison of static and dynamic model accuracies.

Shapiro-Wilk decides the route: if neither sample rejects normality a
pooled-variance Student t-test is used, otherwise a Mann-Whitney U-test.
Both test ``H0: mean(static) >= mean(dynamic)`` against
``H1: mean(static) < mean(dynamic)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .errors import EmptyInput, SampleTooLarge, SampleTooSmall, ZeroVariance

DEFAULT_ALPHA = 0.05
EXACT_U_MAX_PRODUCT = 400


class TestName(str, enum.Enum):
    __test__ = False  # not a pytest class

    SHAPIRO_WILK = "ShapiroWilk"
    STUDENT_T = "StudentT"
    MANN_WHITNEY_U = "MannWhitneyU"


class Conclusion(str, enum.Enum):
    DYNAMIC_BETTER = "DynamicBetter"
    NO_EVIDENCE = "NoEvidence"


@dataclass(frozen=True)
class TestReport:
    __test__ = False

    test_name: TestName
    statistic: float
    p_value: float
    alpha: float = DEFAULT_ALPHA
    note: str = ""

    @property
    def reject_null(self) -> bool:
        return self.p_value < self.alpha

    def to_json(self) -> dict:
        d = asdict(self)
        d["test_name"] = self.test_name.value
        d["reject_null"] = self.reject_null
        if not d["note"]:
            del d["note"]
        return d


# --- Shapiro-Wilk (Royston's AS R94 approximation) --------------------------

_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coefs: Sequence[float], x: float) -> float:
    return sum(c * x ** i for i, c in enumerate(coefs))


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    """Royston's approximate coefficients ``a_1..a_{n//2}`` (positive, largest first)."""
    half = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    m = -special.ndtri((np.arange(1, half + 1) - 0.375) / (n + 0.25))
    summ2 = 2.0 * float(np.sum(m ** 2))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a1 = _poly(_C1, rsn) + m[0] / ssumm2
    if n > 5:
        a2 = _poly(_C2, rsn) + m[1] / ssumm2
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1 ** 2 - 2 * a2 ** 2))
        a = m / fac
        a[1] = a2
    else:
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1 ** 2))
        a = m / fac
    a[0] = a1
    return a


def shapiro_wilk(samples: Sequence[float], alpha: float = DEFAULT_ALPHA) -> TestReport:
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n < 3:
        raise SampleTooSmall(f"Shapiro-Wilk needs at least 3 values, got {n}")
    if n > 5000:
        raise SampleTooLarge(f"Shapiro-Wilk approximation is valid up to 5000 values, got {n}")
    if x[-1] - x[0] <= 0:
        raise ZeroVariance("all values are identical")
    a = shapiro_wilk_coefficients(n)
    half = a.size
    num = float(np.dot(a, x[::-1][:half] - x[:half])) ** 2
    ssq = float(np.sum((x - x.mean()) ** 2))
    w = min(num / ssq, 1.0)

    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return TestReport(TestName.SHAPIRO_WILK, w, min(max(p, 0.0), 1.0), alpha)
    w1 = math.log(1.0 - w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if w1 >= gamma:
            return TestReport(TestName.SHAPIRO_WILK, w, 1e-99, alpha)
        w1 = -math.log(gamma - w1)
        mu = _poly(_C3, n)
        sigma = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mu = _poly(_C5, ln)
        sigma = math.exp(_poly(_C6, ln))
    p = float(special.ndtr(-(w1 - mu) / sigma))
    return TestReport(TestName.SHAPIRO_WILK, w, p, alpha)


# --- Student t ------------------------------------------------------------------


def t_cdf(t: float, df: float) -> float:
    """CDF of Student's t distribution via the regularised incomplete beta."""
    tail = 0.5 * special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return float(tail if t < 0 else 1.0 - tail)


def student_t_test(a: Sequence[float], b: Sequence[float], alpha: float = DEFAULT_ALPHA) -> TestReport:
    """Pooled-variance t-test of ``mean(a) < mean(b)``; ``p = P(T <= t)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise SampleTooSmall(f"t-test needs >= 2 values per sample, got {na} and {nb}")
    df = na + nb - 2
    pooled = (np.sum((a - a.mean()) ** 2) + np.sum((b - b.mean()) ** 2)) / df
    if pooled <= 0:
        raise ZeroVariance("pooled variance is zero")
    t = float((a.mean() - b.mean()) / math.sqrt(pooled * (1.0 / na + 1.0 / nb)))
    return TestReport(TestName.STUDENT_T, t, t_cdf(t, df), alpha)


# --- Mann-Whitney U -------------------------------------------------------------


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    values = np.asarray(values)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def u_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    """Pairs ``(x in a, y in b)`` with ``x < y``, ties counting one half.

    Large values mean ``a`` tends to be smaller than ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ranks = midranks(np.concatenate([a, b]))
    na, nb = a.size, b.size
    return float(na * nb + na * (na + 1) / 2.0 - ranks[:na].sum())


def _rank_sum_counts(doubled_ranks: np.ndarray, na: int) -> np.ndarray:
    """``counts[s]`` = number of ``na``-subsets whose doubled-rank sum is ``s``."""
    total = int(doubled_ranks.sum())
    # object ints only when the subset count could overflow int64
    dtype = np.int64 if math.comb(doubled_ranks.size, na) < 2**62 else object
    # dp[c, s]: subsets of size c of the items seen so far with sum s
    dp = np.zeros((na + 1, total + 1), dtype=dtype)
    dp[0, 0] = 1
    for r in doubled_ranks.astype(np.int64):
        dp[1:, r:] += dp[:-1, :total + 1 - r].copy()
    return dp[na]


def mann_whitney_u(a: Sequence[float], b: Sequence[float], alpha: float = DEFAULT_ALPHA, exact: bool | None = None) -> TestReport:
    """One-sided U-test that ``a`` is stochastically smaller than ``b``.

    The statistic is :func:`u_statistic` for ``a`` and ``p = P(U >= U_obs)``.
    When ``len(a) * len(b) <= 400`` (or ``exact=True``) the p-value comes from
    the exact permutation distribution of the midrank sum, which also
    handles ties. Otherwise a tie-corrected normal approximation with
    continuity correction is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na == 0 or nb == 0:
        raise EmptyInput("Mann-Whitney U needs non-empty samples")
    u = u_statistic(a, b)
    ranks = midranks(np.concatenate([a, b]))
    if exact is None:
        exact = na * nb <= EXACT_U_MAX_PRODUCT
    if exact:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _rank_sum_counts(doubled, na)
        # U >= u  <=>  doubled rank sum of a <= 2 * (na*nb + na(na+1)/2 - u)
        limit = int(round(2 * (na * nb + na * (na + 1) / 2.0 - u)))
        hits = int(counts[:limit + 1].sum(dtype=object))
        total = math.comb(na + nb, na)
        return TestReport(TestName.MANN_WHITNEY_U, u, min(hits / total, 1.0), alpha)

    n = na + nb
    _, tie_sizes = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_sizes ** 3 - tie_sizes)) / (n * (n - 1))
    var = na * nb / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return TestReport(TestName.MANN_WHITNEY_U, u, 0.5 if na * nb else 1.0, alpha,
                          note="all values tied")
    z = (u - na * nb / 2.0 - 0.5) / math.sqrt(var)
    return TestReport(TestName.MANN_WHITNEY_U, u, float(special.ndtr(-z)), alpha)


# --- pipeline -------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonVerdict:
    normality_a: TestReport
    normality_b: TestReport
    chosen_test: TestName
    main: TestReport

    @property
    def conclusion(self) -> Conclusion:
        return Conclusion.DYNAMIC_BETTER if self.main.reject_null else Conclusion.NO_EVIDENCE

    def to_json(self) -> dict:
        return {
            "normality_static": self.normality_a.to_json(),
            "normality_dynamic": self.normality_b.to_json(),
            "chosen_test": self.chosen_test.value,
            "main": self.main.to_json(),
            "conclusion": self.conclusion.value,
        }


def _normality(values: Sequence[float], alpha: float) -> TestReport:
    try:
        return shapiro_wilk(values, alpha)
    except ZeroVariance:
        # a constant sample is treated as non-normal, which routes to the rank test
        return TestReport(TestName.SHAPIRO_WILK, float("nan"), 0.0, alpha, note="zero variance")


def compare_models(static_accuracies: Sequence[float], dynamic_accuracies: Sequence[float], alpha: float = DEFAULT_ALPHA) -> ComparisonVerdict:
    """Test whether the dynamic model's accuracies exceed the static model's."""
    if len(static_accuracies) < 3 or len(dynamic_accuracies) < 3:
        raise SampleTooSmall("compare_models needs at least 3 accuracies per model")
    na = _normality(static_accuracies, alpha)
    nb = _normality(dynamic_accuracies, alpha)
    if not na.reject_null and not nb.reject_null:
        main = student_t_test(static_accuracies, dynamic_accuracies, alpha)
    else:
        main = mann_whitney_u(static_accuracies, dynamic_accuracies, alpha)
    return ComparisonVerdict(na, nb, main.test_name, main)
