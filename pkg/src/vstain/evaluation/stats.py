"""One-way ANOVA and Fisher's LSD with a self-contained incomplete beta."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from ..errors import UndefinedStatisticError

_EPS = 1e-16
_FPMIN = 1e-300
_MAXIT = 10_000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def betainc_complement(a: float, b: float, x: float) -> float:
    """``1 - I_x(a, b)`` without cancellation."""
    return betainc(b, a, 1.0 - x)


def f_sf(f: float, d1: float, d2: float) -> float:
    """Survival function of the F distribution."""
    if math.isinf(f):
        return 0.0
    if f <= 0:
        return 1.0
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


def t_sf_two_sided(t: float, df: float) -> float:
    t = abs(t)
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def betainc_inv(a: float, b: float, p: float) -> float:
    """Solve ``I_x(a, b) = p`` for x by bisection."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if betainc(a, b, mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def t_quantile_two_sided(alpha: float, df: float) -> float:
    """``t`` with ``P(|T| > t) = alpha``, i.e. the ``1 - alpha/2`` quantile."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    x = betainc_inv(df / 2.0, 0.5, alpha)
    return math.sqrt(df * (1.0 - x) / x)


@dataclass
class LsdPair:
    group_a: str
    group_b: str
    mean_diff: float
    lsd_threshold: float
    significant: bool
    p_value: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StatTestResult:
    f_stat: float
    p_value: float
    df_between: int
    df_within: int
    ms_within: float
    group_names: List[str]
    group_means: List[float]
    alpha: float = 0.05
    pairwise: List[LsdPair] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "f_stat": self.f_stat,
            "p_value": self.p_value,
            "df_between": self.df_between,
            "df_within": self.df_within,
            "ms_within": self.ms_within,
            "alpha": self.alpha,
            "groups": [{"name": n, "mean": m} for n, m in zip(self.group_names, self.group_means)],
            "pairwise": [p.to_dict() for p in self.pairwise],
        }


def _check_groups(groups):
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    for i, g in enumerate(groups):
        if len(g) < 2:
            raise ValueError(f"group {i} has fewer than two samples")


def anova_oneway(groups: Sequence[Sequence[float]], names: Optional[Sequence[str]] = None,
                 alpha: float = 0.05) -> StatTestResult:
    groups = [[float(v) for v in g] for g in groups]
    _check_groups(groups)
    names = list(names) if names is not None else [f"group_{i}" for i in range(len(groups))]
    k = len(groups)
    n_total = sum(len(g) for g in groups)
    means = [math.fsum(g) / len(g) for g in groups]
    grand = math.fsum(v for g in groups for v in g) / n_total
    ss_between = math.fsum(len(g) * (m - grand) ** 2 for g, m in zip(groups, means))
    ss_within = math.fsum((v - m) ** 2 for g, m in zip(groups, means) for v in g)
    df_b, df_w = k - 1, n_total - k
    ms_b, ms_w = ss_between / df_b, ss_within / df_w
    # relative to the data scale, so constant offsets don't leave rounding residue
    scale = max(1.0, max(abs(v) for g in groups for v in g)) ** 2 * n_total
    between_zero = ss_between <= 1e-28 * scale
    within_zero = ss_within <= 1e-28 * scale
    if within_zero and between_zero:
        raise UndefinedStatisticError("F undefined: no variance within or between groups")
    if within_zero:
        f, p = math.inf, 0.0
    else:
        f = 0.0 if between_zero else ms_b / ms_w
        p = f_sf(f, df_b, df_w)
    return StatTestResult(f, p, df_b, df_w, ms_w, names, means, alpha)


def fisher_lsd(groups: Sequence[Sequence[float]], alpha: float = 0.05,
               names: Optional[Sequence[str]] = None) -> StatTestResult:
    """ANOVA followed by Fisher's LSD on every pair of groups."""
    res = anova_oneway(groups, names, alpha)
    t_crit = t_quantile_two_sided(alpha, res.df_within)
    sizes = [len(g) for g in groups]
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            se = math.sqrt(res.ms_within * (1.0 / sizes[i] + 1.0 / sizes[j]))
            diff = res.group_means[i] - res.group_means[j]
            thr = t_crit * se
            if se == 0:
                pval = 0.0 if diff != 0 else 1.0
            else:
                pval = t_sf_two_sided(diff / se, res.df_within)
            res.pairwise.append(LsdPair(res.group_names[i], res.group_names[j], diff, thr,
                                        abs(diff) > thr, pval))
    return res
