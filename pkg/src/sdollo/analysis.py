"""Posterior summaries: consensus trees, HPD intervals, calibration cross-validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .mcmc import ChainConfig, ChainTrace, ess_geyer, run_chain
from .newick import _fmt, _quote
from .phylotree import Calibration, CalibrationSet, Phylogeny
from .traitdata import RegistrationRule, TraitMatrix

# 2 log B above this counts as strong evidence against a constraint (B > 12)
CONFLICT_THRESHOLD = 5.0
LABEL_BELOW = 0.95


def hpd_interval(values, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ``ceil(level * n)`` of the samples."""
    x = np.sort(np.asarray(values, dtype=float).ravel())
    n = len(x)
    if n < 2:
        raise ValueError("need at least two samples for an HPD interval")
    if not np.isfinite(x).all():
        raise ValueError("HPD samples must be finite")
    if not 0 < level <= 1:
        raise ValueError(f"HPD level must lie in (0, 1], got {level}")
    m = min(n, math.ceil(level * n - 1e-9))
    widths = x[m - 1:] - x[: n - m + 1]
    j = int(np.argmin(widths))
    return float(x[j]), float(x[j + m - 1])


# -- consensus -----------------------------------------------------------------

@dataclass
class Split:
    leaves: frozenset[str]
    support: float
    age: float
    cats: float
    parent: int = -1

    @property
    def labelled(self) -> bool:
        return self.support < LABEL_BELOW


@dataclass
class ConsensusTree:
    """Majority-rule consensus; ``splits`` are sorted by size, root last.

    Leaves are included as trivial splits so every node carries an age.
    ``cats`` is the mean catastrophe count on the edge above the split,
    averaged over the samples containing it (the root has none).
    """

    labels: tuple[str, ...]
    splits: list[Split]
    n_samples: int

    def children(self, j: int) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s.parent == j]

    def find(self, leaves: Sequence[str]) -> Split | None:
        key = frozenset(leaves)
        for s in self.splits:
            if s.leaves == key:
                return s
        return None

    def to_newick(self) -> str:
        """Annotated Newick; splits below 95% support carry it as a node label."""

        def rec(j: int) -> str:
            s = self.splits[j]
            attrs = f"[&support={_fmt(s.support)},age={_fmt(s.age)}"
            if s.parent >= 0:
                attrs += f",k={int(round(s.cats))}"
            attrs += "]"
            if len(s.leaves) == 1:
                text = _quote(next(iter(s.leaves)))
            else:
                kids = sorted(self.children(j), key=lambda i: min(self.splits[i].leaves))
                text = "(" + ",".join(rec(i) for i in kids) + ")"
                if s.labelled:
                    text += str(int(round(100 * s.support)))
            if s.parent < 0:
                return text + attrs
            length = max(self.splits[s.parent].age - s.age, 0.0)
            return f"{text}:{_fmt(length)}{attrs}"

        return rec(len(self.splits) - 1) + ";"

    def support_table(self) -> str:
        rows = ["support\tage\tk\tlabelled\tleaves"]
        for s in self.splits:
            if len(s.leaves) == 1:
                continue
            rows.append(
                f"{s.support:.3f}\t{s.age:.1f}\t{int(round(s.cats))}\t"
                f"{'yes' if s.labelled else 'no'}\t{','.join(sorted(s.leaves))}"
            )
        return "\n".join(rows) + "\n"


def majority_consensus(samples: Sequence[Phylogeny], threshold: float = 0.5) -> ConsensusTree:
    """Splits present in at least ``threshold`` of the samples, with conditional means."""
    if not samples:
        raise ValueError("consensus needs at least one tree")
    labels = samples[0].labels
    keyset = frozenset(labels)
    for t in samples[1:]:
        if frozenset(t.labels) != keyset:
            raise ValueError("trees in the sample have different leaf sets")
    count: dict[frozenset, int] = {}
    age_sum: dict[frozenset, float] = {}
    cat_sum: dict[frozenset, float] = {}
    for t in samples:
        ls = t.leafsets
        lab = np.array(t.labels)
        for i in range(t.n_nodes):
            key = frozenset(lab[ls[i]].tolist())
            count[key] = count.get(key, 0) + 1
            age_sum[key] = age_sum.get(key, 0.0) + float(t.ages[i])
            cat_sum[key] = cat_sum.get(key, 0.0) + (0.0 if i == t.root else float(t.cats[i]))
    n = len(samples)
    # exactly-50% ties can conflict; keep the first compatible one by support
    ranked = sorted(count, key=lambda k: (-count[k], -len(k), sorted(k)))
    kept: list[frozenset] = []
    for key in ranked:
        if count[key] < threshold * n:
            break
        if all(key <= other or other <= key or not (key & other) for other in kept):
            kept.append(key)
    kept.sort(key=lambda k: (len(k), sorted(k)))
    splits = [Split(k, count[k] / n, age_sum[k] / count[k], cat_sum[k] / count[k]) for k in kept]
    for j, s in enumerate(splits):
        for m in range(j + 1, len(splits)):
            if s.leaves < splits[m].leaves:
                s.parent = m
                break
    return ConsensusTree(tuple(labels), splits, n)


# -- parameter summaries -------------------------------------------------------

@dataclass
class SummaryRow:
    name: str
    mean: float
    sd: float
    hpd: tuple[float, float]
    ess: float

    def formatted(self) -> str:
        return f"{self.mean:.3g} ± {self.sd:.3g}"


def posterior_summary(trace: ChainTrace, level: float = 0.95) -> list[SummaryRow]:
    """Mean, standard deviation, HPD interval and ESS for every scalar column."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    rows = []
    for name in trace.columns()[1:]:
        x = trace.column(name)
        hpd = hpd_interval(x, level) if len(x) >= 2 else (float(x[0]), float(x[0]))
        sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        rows.append(SummaryRow(name, float(np.mean(x)), sd, hpd, ess_geyer(x)))
    return rows


def format_summary(rows: Sequence[SummaryRow], level: float = 0.95) -> str:
    pct = f"{100 * level:g}%"
    out = [f"name\tmean ± sd\t{pct} HPD\tESS"]
    for r in rows:
        out.append(f"{r.name}\t{r.formatted()}\t[{r.hpd[0]:.4g}, {r.hpd[1]:.4g}]\t{r.ess:.0f}")
    return "\n".join(out) + "\n"


# -- calibration cross-validation ----------------------------------------------

def freed(cals: CalibrationSet, key: str | int) -> CalibrationSet:
    """The calibration set with constraint ``key`` removed.

    A removed leaf-age constraint leaves the leaf free above age zero rather
    than pinning it at its current age.
    """
    j = cals.index(key)
    c = cals.calibrations[j]
    if c.kind == "clade":
        return cals.without(j)
    loose = Calibration("leaf", c.leaves, 0.0, None, c.label)
    rest = list(cals.calibrations)
    rest[j] = loose
    return CalibrationSet(tuple(rest), cals.root_cap)


def constraint_age(tree: Phylogeny, cal: Calibration) -> float:
    """Age of the node a calibration refers to (the clade MRCA or the leaf)."""
    return float(tree.ages[cal.node(tree)])


def _fraction(hits: np.ndarray) -> tuple[float, float, int]:
    """Fraction of hits, its autocorrelation-aware standard error, and the count."""
    n = len(hits)
    k = int(hits.sum())
    p = k / n
    n_eff = ess_geyer(hits.astype(float)) if 0 < k < n else n
    se = math.sqrt(p * (1 - p) / n_eff)
    return p, se, k


@dataclass
class XvalEntry:
    """Leave-one-out check of one constraint.

    ``two_log_bf`` is ``2 log`` of the prior-to-posterior ratio of the
    probability that the constraint holds, so large values mean the data
    predict the constraint poorly.  When a count is zero the value is
    computed with a count of one and ``bound`` says which side it bounds.
    """

    name: str
    lower: float | None
    upper: float | None
    hpd: tuple[float, float]
    post_frac: float
    post_se: float
    prior_frac: float
    prior_se: float
    two_log_bf: float
    se: float
    bound: str = ""
    n_post: int = 0
    n_prior: int = 0

    @property
    def conflict(self) -> bool:
        return self.two_log_bf > CONFLICT_THRESHOLD

    HEADER = "name\tmin\tmax\thpd_lo\thpd_hi\tpost_frac\tpost_se\tprior_frac\tprior_se\t2logB\tse\tbound\tconflict"

    def row(self) -> str:
        lo = "" if self.lower is None else _fmt(self.lower)
        hi = "" if self.upper is None else _fmt(self.upper)
        vals = [
            self.name, lo, hi, f"{self.hpd[0]:.1f}", f"{self.hpd[1]:.1f}",
            f"{self.post_frac:.6g}", f"{self.post_se:.3g}", f"{self.prior_frac:.6g}", f"{self.prior_se:.3g}",
            f"{self.two_log_bf:.4g}", f"{self.se:.3g}", self.bound or "-", "yes" if self.conflict else "no",
        ]
        return "\t".join(vals)


@dataclass
class XvalReport:
    entries: list[XvalEntry] = field(default_factory=list)

    def to_text(self) -> str:
        return "\n".join([XvalEntry.HEADER, *(e.row() for e in self.entries)]) + "\n"


def xval_from_samples(
    cal: Calibration,
    posterior_trees: Sequence[Phylogeny],
    prior_trees: Sequence[Phylogeny],
    level: float = 0.95,
) -> XvalEntry:
    """Bayes-factor entry from posterior and prior samples drawn without ``cal``."""
    if not posterior_trees or not prior_trees:
        raise ValueError("cross-validation needs posterior and prior samples")
    post_hits = np.array([cal.satisfied(t) for t in posterior_trees])
    prior_hits = np.array([cal.satisfied(t) for t in prior_trees])
    p1, se1, k1 = _fraction(post_hits)
    p0, se0, k0 = _fraction(prior_hits)
    n1, n0 = len(post_hits), len(prior_hits)
    bound = ""
    if k1 == 0 and k0 == 0:
        value, se = math.nan, math.nan
        bound = "undefined"
    else:
        q1 = p1 if k1 else 1 / n1
        q0 = p0 if k0 else 1 / n0
        value = 2 * (math.log(q0) - math.log(q1))
        # delta method on log p, using the ESS-based binomial variances
        se = 2 * math.sqrt((se1 / q1) ** 2 + (se0 / q0) ** 2)
        if k1 == 0:
            bound = "lower"
        elif k0 == 0:
            bound = "upper"
    ages = [constraint_age(t, cal) for t in posterior_trees]
    hpd = hpd_interval(ages, level) if len(ages) >= 2 else (ages[0], ages[0])
    return XvalEntry(cal.label, cal.lower, cal.upper, hpd, p1, se1, p0, se0, value, se, bound, n1, n0)


def bayes_factor_xval(
    data: TraitMatrix,
    rule: RegistrationRule,
    cals: CalibrationSet,
    c: str | int,
    config: ChainConfig,
    burn: float = 0.1,
) -> XvalEntry:
    """Drop constraint ``c``, sample posterior and prior, and compare how often it holds."""
    cal = cals.calibrations[cals.index(c)]
    loose = freed(cals, c)
    post = run_chain(data, rule, loose, replace(config, prior_only=False)).discard(burn)
    prior = run_chain(data, rule, loose, replace(config, prior_only=True, seed=config.seed + 1)).discard(burn)
    return xval_from_samples(cal, post.trees, prior.trees)
