"""Evaluation metrics, run aggregation, Fisher's exact test and cohort term comparison."""

from __future__ import annotations

import math
import statistics
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from figmine.errors import FigmineError

# Relative tolerance when comparing point probabilities against the observed table.
FISHER_RELATIVE_SLACK = 1e-7

STAR_LADDER: tuple[tuple[float, str], ...] = ((1e-4, "****"), (1e-3, "***"), (1e-2, "**"), (5e-2, "*"))


class StatsError(FigmineError, ValueError):
    pass


class EmptyTable(StatsError):
    pass


class SingleClass(StatsError):
    pass


class EmptyRuns(StatsError):
    pass


class EmptyCohort(StatsError):
    pass


# --------------------------------------------------------------------------
# Fisher's exact test
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Rows are cohorts, columns are term present / absent."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self) -> None:
        if min(self.a, self.b, self.c, self.d) < 0:
            raise StatsError("contingency counts must be non-negative")

    @property
    def total(self) -> int:
        return self.a + self.b + self.c + self.d

    def transpose(self) -> ContingencyTable2x2:
        return ContingencyTable2x2(self.a, self.c, self.b, self.d)

    @classmethod
    def of(cls, rows: Sequence[Sequence[int]]) -> ContingencyTable2x2:
        (a, b), (c, d) = rows
        return cls(int(a), int(b), int(c), int(d))


class _LogFactorials:
    """Growing table of log(k!); entries come from lgamma so they never depend on growth history."""

    def __init__(self) -> None:
        self._table = np.zeros(1)

    def upto(self, n: int) -> np.ndarray:
        if n >= len(self._table):
            size = max(n + 1, 2 * len(self._table))
            start = len(self._table)
            fresh = np.fromiter((math.lgamma(k + 1) for k in range(start, size)), np.float64, size - start)
            self._table = np.concatenate([self._table, fresh])
        return self._table


_LOG_FACT = _LogFactorials()


def fisher_exact(table: ContingencyTable2x2 | Sequence[Sequence[int]]) -> float:
    """Two-sided p-value: total probability of all tables with the observed
    margins that are no more likely than the observed one."""
    t = table if isinstance(table, ContingencyTable2x2) else ContingencyTable2x2.of(table)
    n = t.total
    if n == 0:
        raise EmptyTable("table has no observations")
    r1, r2, c1, c2 = t.a + t.b, t.c + t.d, t.a + t.c, t.b + t.d
    lf = _LOG_FACT.upto(n)
    lo, hi = max(0, c1 - r2), min(r1, c1)
    x = np.arange(lo, hi + 1)
    const = lf[r1] + lf[r2] + lf[c1] + lf[c2] - lf[n]
    log_p = const - (lf[x] + lf[r1 - x] + lf[c1 - x] + lf[r2 - c1 + x])
    observed = log_p[t.a - lo]
    keep = log_p <= observed + math.log1p(FISHER_RELATIVE_SLACK)
    if keep.all():
        # the whole distribution, which sums to exactly 1
        return 1.0
    p = float(np.exp(log_p[keep]).sum())
    return min(1.0, max(0.0, p))


def significance_stars(p: float) -> str:
    for threshold, stars in STAR_LADDER:
        if p <= threshold:
            return stars
    return ""


# --------------------------------------------------------------------------
# classifier metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BinaryConfusion:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise StatsError("confusion counts must be non-negative")

    def swapped(self) -> BinaryConfusion:
        """The same predictions scored with the other class as positive."""
        return BinaryConfusion(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)

    @classmethod
    def from_labels(cls, y_true: Sequence[bool], y_pred: Sequence[bool]) -> BinaryConfusion:
        t = np.asarray(y_true, dtype=bool)
        p = np.asarray(y_pred, dtype=bool)
        return cls(
            tp=int(np.sum(t & p)),
            fp=int(np.sum(~t & p)),
            tn=int(np.sum(~t & ~p)),
            fn=int(np.sum(t & ~p)),
        )


@dataclass(frozen=True)
class MetricSet:
    precision: float
    recall_sensitivity: float
    specificity: float
    f1: float
    npv: float = 0.0
    auc: float | None = None
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float | None]:
        return {
            "auc": self.auc,
            "precision": self.precision,
            "recall_sensitivity": self.recall_sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
        }


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"{name}: undefined (0/0), reported as 0")
        return 0.0
    return num / den


def compute_metrics(c: BinaryConfusion, auc: float | None = None) -> MetricSet:
    flags: list[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    specificity = _ratio(c.tn, c.tn + c.fp, "specificity", flags)
    npv = _ratio(c.tn, c.tn + c.fn, "npv", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    if flags:
        warnings.warn("; ".join(flags), RuntimeWarning, stacklevel=2)
    return MetricSet(precision, recall, specificity, f1, npv, auc, tuple(flags))


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    auc: float


def roc_auc(scores: Sequence[float], labels: Sequence[int | bool]) -> RocCurve:
    """ROC by sweeping every distinct score as a threshold; AUC by trapezoids.

    Tied scores move along a diagonal segment, which credits each tied
    positive/negative pair with one half.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise StatsError("scores and labels must be 1-D and equal length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("both classes are required for ROC analysis")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, np.cumsum(y)[last_of_group]]
    fp = np.r_[0, np.cumsum(~y)[last_of_group]]
    # twice the area in units of one positive-negative pair, exact in integers
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(tuple((fp / n_neg).tolist()), tuple((tp / n_pos).tolist()), auc)


def multiclass_metrics(
    y_true: Sequence[str],
    y_pred: Sequence[str],
    classes: Sequence[str],
    probs: Sequence[Sequence[float]] | None = None,
) -> dict[str, MetricSet]:
    """One-vs-rest metrics per class plus a ``macro`` average entry."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    out: dict[str, MetricSet] = {}
    for k, cls in enumerate(classes):
        auc = None
        if probs is not None and (t == cls).any() and (t != cls).any():
            auc = roc_auc([row[k] for row in probs], t == cls).auc
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out[cls] = compute_metrics(BinaryConfusion.from_labels(t == cls, p == cls), auc)
    per = list(out.values())
    aucs = [m.auc for m in per if m.auc is not None]
    out["macro"] = MetricSet(
        precision=float(np.mean([m.precision for m in per])),
        recall_sensitivity=float(np.mean([m.recall_sensitivity for m in per])),
        specificity=float(np.mean([m.specificity for m in per])),
        f1=float(np.mean([m.f1 for m in per])),
        npv=float(np.mean([m.npv for m in per])),
        auc=float(np.mean(aucs)) if len(aucs) == len(per) else None,
        flags=tuple(f"{c}: {f}" for c, m in out.items() for f in m.flags),
    )
    return out


# --------------------------------------------------------------------------
# multi-run aggregation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int
    flagged: bool = False

    def format(self, digits: int = 3) -> str:
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"

    __str__ = format


def aggregate_values(values: Sequence[float]) -> Aggregate:
    if not values:
        raise EmptyRuns("no runs to aggregate")
    vals = [float(v) for v in values]
    if len(vals) < 2:
        return Aggregate(vals[0], 0.0, 1, flagged=True)
    return Aggregate(statistics.fmean(vals), statistics.stdev(vals), len(vals))


def aggregate_runs(runs: Sequence[MetricSet]) -> dict[str, Aggregate]:
    """Per-metric mean and sample standard deviation across repeated runs."""
    if not runs:
        raise EmptyRuns("no runs to aggregate")
    out: dict[str, Aggregate] = {}
    for name in ("auc", "precision", "recall_sensitivity", "specificity", "f1"):
        vals = [getattr(r, name) for r in runs]
        if any(v is None for v in vals):
            continue
        out[name] = aggregate_values(vals)
    return out


# --------------------------------------------------------------------------
# cohort term frequencies
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TermComparison:
    term: str
    category: str
    count_a: int
    n_a: int
    count_b: int
    n_b: int
    p_value: float
    stars: str
    direction: str = field(default="")  # "A", "B" or "" when proportions are equal

    @property
    def prop_a(self) -> float:
        return self.count_a / self.n_a

    @property
    def prop_b(self) -> float:
        return self.count_b / self.n_b

    def as_dict(self) -> dict[str, object]:
        return {
            "term": self.term,
            "category": self.category,
            "count_a": self.count_a,
            "n_a": self.n_a,
            "prop_a": self.prop_a,
            "count_b": self.count_b,
            "n_b": self.n_b,
            "prop_b": self.prop_b,
            "p_value": self.p_value,
            "stars": self.stars,
            "enriched_in": self.direction,
        }


def _present(unit: Iterable) -> frozenset[str]:
    terms = set()
    for item in unit:
        if isinstance(item, str):
            terms.add(item)
        elif getattr(item, "polarity", None) == "positive":
            terms.add(item.term)
    return frozenset(terms)


def frequency_comparison(
    cohort_a: Sequence[Iterable],
    cohort_b: Sequence[Iterable],
    terms: Sequence[tuple[str, str]] | Mapping[str, str] | object,
) -> list[TermComparison]:
    """Per-term presence counts in two cohorts with Fisher's exact p-values.

    Each cohort item is one unit (an article) given as its mentions or as a
    set of positively mentioned term names; a unit counts once per term.
    ``terms`` is a lexicon or an ordered ``(term, category)`` collection.
    """
    if not cohort_a or not cohort_b:
        raise EmptyCohort("both cohorts must contain at least one item")
    if hasattr(terms, "entries"):
        pairs = [(e.term, e.category) for e in terms.entries]  # type: ignore[attr-defined]
    elif isinstance(terms, Mapping):
        pairs = list(terms.items())
    else:
        pairs = list(terms)  # type: ignore[arg-type]
    sets_a = [_present(u) for u in cohort_a]
    sets_b = [_present(u) for u in cohort_b]
    n_a, n_b = len(sets_a), len(sets_b)
    out = []
    for term, category in pairs:
        ca = sum(term in s for s in sets_a)
        cb = sum(term in s for s in sets_b)
        p = fisher_exact(ContingencyTable2x2(ca, n_a - ca, cb, n_b - cb))
        diff = ca * n_b - cb * n_a
        direction = "A" if diff > 0 else "B" if diff < 0 else ""
        out.append(TermComparison(term, category, ca, n_a, cb, n_b, p, significance_stars(p), direction))
    return out
