"""Independent brute-force references used by the stats tests and the acceptance gate."""

from __future__ import annotations

from fractions import Fraction
from math import comb


def fisher_enumeration(a: int, b: int, c: int, d: int, slack: Fraction = Fraction(1, 10**7)) -> float:
    """Two-sided p by listing every table with the observed margins, in exact rationals."""
    r1, c1, n = a + b, a + c, a + b + c + d
    denom = comb(n, c1)

    def prob(x: int) -> Fraction:
        return Fraction(comb(r1, x) * comb(n - r1, c1 - x), denom)

    observed = prob(a)
    lo, hi = max(0, c1 - (n - r1)), min(r1, c1)
    total = sum((p for p in map(prob, range(lo, hi + 1)) if p <= observed * (1 + slack)), Fraction(0))
    return float(min(total, Fraction(1)))


def auc_pairwise(scores, labels) -> float:
    """Mann-Whitney form: fraction of positive/negative pairs ranked correctly, ties count 1/2."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = Fraction(0)
    for p in pos:
        for q in neg:
            wins += 1 if p > q else Fraction(1, 2) if p == q else 0
    return float(wins / (len(pos) * len(neg)))
