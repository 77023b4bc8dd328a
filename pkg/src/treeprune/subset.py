"""Selecting the features that adversarial examples actually perturb.

Features are ranked by how often generated adversarial examples change
them.  Growing subsets are tested on fresh batches of ``n`` examples: a
subset is accepted once the observed false-negative fraction ``v_bar``
satisfies ``v_bar <= tau - margin``, where ``margin`` is sized with Greene's
exponential bound for hypergeometric tails so that accepting a subset whose
true false-negative rate is at least ``tau`` has probability below ``eta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .model import Ensemble, Example, ModelError

DEFAULT_SCHEDULE = (0.05, 0.10, 0.20, 0.30)
FALLBACK_FRACTION = 0.40


class SubsetError(ValueError):
    """Invalid statistical-test configuration or an undersized example pool."""


@dataclass
class PerturbationCounts:
    counts: list[int]
    total: int = 0

    @classmethod
    def zeros(cls, d: int) -> "PerturbationCounts":
        return cls([0] * d, 0)

    def add(self, x: Sequence[float], x_adv: Sequence[float]) -> None:
        if len(x) != len(self.counts) or len(x_adv) != len(self.counts):
            raise ModelError("pair dimension does not match the counts")
        for f, (a, b) in enumerate(zip(x, x_adv)):
            if a != b:
                self.counts[f] += 1
        self.total += 1

    def nonzero(self) -> dict[int, int]:
        return {f: c for f, c in enumerate(self.counts) if c}


def _vals(x) -> Sequence[float]:
    return x.values if isinstance(x, Example) else x


def count_perturbed(pairs: Iterable[tuple], d: int | None = None) -> PerturbationCounts:
    """Count, per feature, the pairs ``(x, x_adv)`` that differ on it."""
    pairs = [(_vals(a), _vals(b)) for a, b in pairs]
    if d is None:
        if not pairs:
            raise ModelError("cannot infer the dimension from zero pairs")
        d = len(pairs[0][0])
    counts = PerturbationCounts.zeros(d)
    for a, b in pairs:
        counts.add(a, b)
    return counts


@dataclass(frozen=True)
class FeatureSubset:
    features: tuple[int, ...]
    fraction: float
    round: int = 0

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    def __contains__(self, f):
        return f in self.features

    def complement(self, d: int) -> list[int]:
        keep = set(self.features)
        return [f for f in range(d) if f not in keep]


def subset_size(p: float, d: int) -> int:
    # exact decimal arithmetic so that e.g. 0.1 * 30 is 3, not 4
    return math.ceil(Fraction(str(p)) * d)


def _ranking(counts: PerturbationCounts) -> list[int]:
    return sorted(range(len(counts.counts)), key=lambda f: (-counts.counts[f], f))


def rank_features(counts: PerturbationCounts, p: float, d: int, round: int = 0) -> FeatureSubset:
    """The ``ceil(p * d)`` most perturbed features, ties by lower index."""
    k = subset_size(p, d)
    return FeatureSubset(tuple(_ranking(counts)[:k]), p, round)


def expand_subset(current: FeatureSubset, counts: PerturbationCounts, p: float, d: int,
                  round: int) -> FeatureSubset:
    """Grow ``current`` to ``ceil(p * d)`` features using the refreshed ranking.

    Existing members are always kept so successive subsets are nested.
    """
    k = subset_size(p, d)
    chosen = set(current.features)
    for f in _ranking(counts):
        if len(chosen) >= k:
            break
        chosen.add(f)
    ordered = sorted(chosen, key=lambda f: (-counts.counts[f], f))
    return FeatureSubset(tuple(ordered), p, round)


# ------------------------------------------------------------ the bound

def greene_bound(n: int, N: int, lam: float) -> float:
    """Greene's bound on ``P[sqrt(n) (v_bar - mu) >= lam]`` for a hypergeometric mean.

    Returns 1.0 (vacuous) outside the region where the expression is defined,
    and never more than 1.0.
    """
    if not (2 <= n < N) or N <= 4:
        raise SubsetError(f"need N > 4 and 2 <= n < N, got n={n}, N={N}")
    if not lam > 0:
        raise SubsetError("lambda must be positive")
    rn = math.sqrt(n)
    margin = lam / rn
    if not 0 < margin < 0.5:
        return 1.0
    if rn - 2 * lam <= 0 or N - n - 2 * rn * lam <= 0:
        return 1.0
    prefactor = math.sqrt(1.0 / (2 * math.pi * lam ** 2)) * 0.5
    ratios = ((N - n) / N) \
        * ((rn + 2 * lam) / (rn - 2 * lam)) \
        * ((N - n + 2 * rn * lam) / (N - n - 2 * rn * lam))
    decay = math.exp(-2.0 / (1.0 - n / N) * lam ** 2)
    quartic = math.exp(-(1.0 / 3.0) * (1.0 + n ** 3 / (N - n) ** 3) * lam ** 4 / n)
    return min(1.0, prefactor * math.sqrt(ratios) * decay * quartic)


def hypergeom_tail_exact(n: int, D: int, N: int, threshold) -> float:
    """Exact ``P[K <= threshold]`` for K successes when drawing ``n`` of ``N``
    items without replacement, ``D`` of which are successes."""
    if not (0 <= D <= N and 0 <= n <= N):
        raise SubsetError(f"invalid hypergeometric parameters n={n}, D={D}, N={N}")
    if threshold < 0:
        return 0.0
    top = min(n, D, math.floor(threshold))
    lo = max(0, n - (N - D))
    hits = sum(math.comb(D, k) * math.comb(N - D, n - k) for k in range(lo, top + 1))
    return float(Fraction(hits, math.comb(N, n)))


@dataclass(frozen=True)
class StatTestConfig:
    n: int = 100
    N: int = 10_000
    tau: float = 0.25
    eta: float = 0.1
    corrections: int = 4
    delta_margin: float | None = None

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise SubsetError("tau must lie in (0, 1)")
        if not 0 < self.eta < 1:
            raise SubsetError("eta must lie in (0, 1)")
        if not 2 <= self.n < self.N:
            raise SubsetError(f"need 2 <= n < N, got n={self.n}, N={self.N}")
        if self.corrections < 1:
            raise SubsetError("corrections must be at least 1")
        if self.delta_margin is not None and not 0 < self.delta_margin < 0.5:
            raise SubsetError("delta_margin must lie in (0, 1/2)")

    @property
    def lam(self) -> float:
        return self.margin * math.sqrt(self.n)

    @property
    def margin(self) -> float:
        return self.delta_margin if self.delta_margin is not None else choose_margin(self)


def choose_margin(cfg: StatTestConfig) -> float:
    """Smallest grid margin k/n (< 1/2) whose bound is below eta / corrections."""
    target = cfg.eta / cfg.corrections
    rn = math.sqrt(cfg.n)
    k = 1
    while 2 * k < cfg.n:
        margin = k / cfg.n
        if greene_bound(cfg.n, cfg.N, margin * rn) < target:
            return margin
        k += 1
    raise SubsetError(
        f"no margin below 1/2 reaches confidence {1 - cfg.eta:g} with n={cfg.n}, "
        f"N={cfg.N}; increase n")


# ------------------------------------------------------------ selection

@dataclass
class SelectionReport:
    subset: FeatureSubset
    counts: PerturbationCounts
    rounds_used: int
    v_bar_history: list[float]
    delta_margin: float
    records: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "format_version": 1,
            "features": list(self.subset.features),
            "fraction": self.subset.fraction,
            "counts": {str(f): c for f, c in sorted(self.counts.nonzero().items())},
            "rounds_used": self.rounds_used,
            "v_bar_history": list(self.v_bar_history),
            "delta_margin": self.delta_margin,
        }


def _harvest(counts: PerturbationCounts, data: Sequence[Example], records) -> None:
    for x, rec in zip(data, records):
        final = rec.final
        if final.status == "SAT" and final.witness is not None:
            counts.add(x.values, final.witness)


def select_subset(e: Ensemble, pool: Sequence[Example], run, cfg: StatTestConfig,
                  schedule: Sequence[float] = DEFAULT_SCHEDULE,
                  fallback: float = FALLBACK_FRACTION) -> tuple[FeatureSubset, SelectionReport]:
    """Find a small feature subset with a bounded false-negative rate.

    ``pool`` must already be in random order; consecutive slices of ``n``
    examples feed the rounds, so no example is used twice.
    """
    from .pipeline import Setting, false_negative_count, generate

    n = cfg.n
    rounds = len(schedule) + 1
    if len(pool) < rounds * n:
        raise SubsetError(
            f"subset selection needs at least {rounds * n} examples ({rounds} x n), "
            f"got {len(pool)}")
    d = e.num_features
    margin = cfg.margin
    counts = PerturbationCounts.zeros(d)
    history: list[float] = []
    all_records = []

    # round 0 only gathers counts: every pruned call on the empty subset fails
    batch = pool[:n]
    records = generate(e, batch, (), Setting.MIXED, run)
    _harvest(counts, batch, records)
    all_records.extend(records)

    subset = FeatureSubset((), 0.0, 0)
    for k, p in enumerate(schedule, start=1):
        subset = expand_subset(subset, counts, p, d, k)
        batch = pool[k * n:(k + 1) * n]
        records = generate(e, batch, subset.features, Setting.MIXED, run)
        v_bar = false_negative_count(records) / n
        history.append(v_bar)
        _harvest(counts, batch, records)
        all_records.extend(records)
        if v_bar <= cfg.tau - margin:
            return subset, SelectionReport(subset, counts, k + 1, history, margin, all_records)

    subset = expand_subset(subset, counts, fallback, d, rounds)
    return subset, SelectionReport(subset, counts, rounds, history, margin, all_records)
