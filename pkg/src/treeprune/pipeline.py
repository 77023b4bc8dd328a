"""Repeated adversarial example generation in full, pruned and mixed settings.

``generate`` runs the attack on every example of a dataset.  In the pruned
and mixed settings the ensemble is first pruned to the selected features
for that example; mixed falls back to the full ensemble whenever the pruned
attack does not return SAT.  The rest of the module turns the resulting
records into run-level metrics.
"""

from __future__ import annotations

import enum
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .attack import (AttackOutcome, AttackStats, EngineConfig, Mode, Status, min_robustness,
                     search)
from .model import Ensemble, Example, ModelError, label_of_margin, predict_margin, prune, sigmoid


class InvariantError(RuntimeError):
    """A result failed re-validation against the full ensemble."""


class ConfigError(ValueError):
    pass


class Setting(str, enum.Enum):
    FULL = "full"
    PRUNED = "pruned"
    MIXED = "mixed"


# statuses beyond SAT/UNSAT/TIMEOUT that only appear in records
MISCLASSIFIED = "MISCLASSIFIED"
SKIPPED = "SKIPPED"

ENGINES = {"exact": Mode.MIN_DELTA, "heuristic": Mode.OPTIMIZE}


@dataclass(frozen=True)
class RunConfig:
    delta: float
    engine: str = "exact"
    t_full: float = 60.0
    t_prun: float | None = None
    global_timeout: float = 6 * 3600.0
    seed: int = 0
    node_budget: int | None = None
    tree_order: str = "range_descending"
    threads: int = 1

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {sorted(ENGINES)}, got {self.engine!r}")
        if self.t_prun is None:
            object.__setattr__(self, "t_prun", 1.0 if self.engine == "exact" else 0.1)
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if not (self.t_full > 0 and self.t_prun > 0 and self.global_timeout > 0):
            raise ConfigError("timeouts must be positive")
        if self.t_prun >= self.t_full and self.t_full != math.inf:
            raise ConfigError("the pruned timeout must be shorter than the full timeout")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")

    @classmethod
    def untimed(cls, delta: float, engine: str = "exact", **kw) -> "RunConfig":
        """Configuration with every timeout disabled."""
        return cls(delta, engine, t_full=math.inf, t_prun=math.inf,
                   global_timeout=math.inf, **kw)

    def engine_config(self, timeout: float) -> EngineConfig:
        return EngineConfig(ENGINES[self.engine], timeout, self.node_budget, self.tree_order)


@dataclass
class PhaseResult:
    status: str
    linf: float | None = None
    margin: float | None = None
    wall_s: float = 0.0
    expansions: int = 0
    witness: tuple[float, ...] | None = None

    @property
    def is_sat(self) -> bool:
        return self.status == "SAT"

    @classmethod
    def from_attack(cls, outcome: AttackOutcome, stats: AttackStats, wall_s: float) -> "PhaseResult":
        w = outcome.witness.values if outcome.witness is not None else None
        return cls(outcome.status.value, outcome.linf, outcome.margin, wall_s,
                   stats.expansions, w)


@dataclass
class AttackRecord:
    example_id: int
    setting: str
    final: PhaseResult
    pruned: PhaseResult | None = None
    full: PhaseResult | None = None
    used_fallback: bool = False

    @property
    def attacked(self) -> bool:
        return self.final.status not in (MISCLASSIFIED, SKIPPED)


def _validate(e: Ensemble, x: Sequence[float], phase: PhaseResult, delta: float) -> None:
    if not phase.is_sat:
        return
    w = phase.witness
    dist = max((abs(a - b) for a, b in zip(w, x)), default=0.0)
    if not dist < delta:
        raise InvariantError(f"witness at distance {dist} is outside delta {delta}")
    if label_of_margin(predict_margin(e, w)) == label_of_margin(predict_margin(e, x)):
        raise InvariantError("witness does not flip the full ensemble's label")


def attack_one(e: Ensemble, x: Example, example_id: int, features: Sequence[int],
               setting: Setting, cfg: RunConfig) -> AttackRecord:
    """Attack one example in the given setting, falling back to full for mixed."""
    setting = Setting(setting)
    values = x.values
    if x.label is not None and label_of_margin(predict_margin(e, values)) != x.label:
        return AttackRecord(example_id, setting.value,
                            PhaseResult(MISCLASSIFIED, 0.0, predict_margin(e, values),
                                        witness=values))
    pruned = full = None
    fallback = False
    if setting is not Setting.FULL:
        t0 = time.perf_counter()
        # pruning is per example and charged to this phase
        pe = prune(e, values, features)
        out, stats = search(pe, values, cfg.delta, cfg.engine_config(cfg.t_prun))
        pruned = PhaseResult.from_attack(out, stats, time.perf_counter() - t0)
        _validate(e, values, pruned, cfg.delta)
    if (setting is Setting.MIXED and pruned.status == "UNSAT"
            and e.split_features <= frozenset(features)):
        # nothing was pruned, so the UNSAT already holds for the full ensemble
        full = PhaseResult("UNSAT")
    elif setting is Setting.FULL or (setting is Setting.MIXED and not pruned.is_sat):
        fallback = setting is Setting.MIXED
        t0 = time.perf_counter()
        out, stats = search(e, values, cfg.delta, cfg.engine_config(cfg.t_full))
        full = PhaseResult.from_attack(out, stats, time.perf_counter() - t0)
        _validate(e, values, full, cfg.delta)
    final = full if full is not None else pruned
    return AttackRecord(example_id, setting.value, final, pruned, full, fallback)


def generate(e: Ensemble, data: Sequence[Example], features: Iterable[int], setting: Setting,
             cfg: RunConfig, ids: Sequence[int] | None = None) -> list[AttackRecord]:
    """Attack every example; one record per example, in input order."""
    setting = Setting(setting)
    features = tuple(features)
    bad = [f for f in features if not 0 <= f < e.num_features]
    if bad:
        raise ModelError(f"feature subset references invalid features {bad}")
    for x in data:
        if len(x) != e.num_features:
            raise ModelError(
                f"example has {len(x)} features, ensemble expects {e.num_features}")
    ids = list(range(len(data))) if ids is None else list(ids)
    start = time.perf_counter()

    def task(i: int) -> AttackRecord:
        if time.perf_counter() - start > cfg.global_timeout:
            return AttackRecord(ids[i], setting.value, PhaseResult(SKIPPED))
        return attack_one(e, data[i], ids[i], features, setting, cfg)

    if cfg.threads == 1:
        return [task(i) for i in range(len(data))]
    with ThreadPoolExecutor(cfg.threads) as pool:
        return list(pool.map(task, range(len(data))))


# --------------------------------------------------------------- metrics

def _is_false_negative(rec: AttackRecord) -> bool:
    if rec.pruned is None or rec.pruned.status != "UNSAT":
        return False
    if rec.full is None:
        raise ConfigError(
            f"example {rec.example_id}: pruned UNSAT without a paired full result")
    return rec.full.is_sat


def false_negative_count(records: Iterable[AttackRecord]) -> int:
    return sum(_is_false_negative(r) for r in records if r.attacked)


def false_negative_rate(records: Sequence[AttackRecord]) -> float:
    """Fraction of attacked examples where pruned says UNSAT but full finds SAT.

    A pruned TIMEOUT is never a false negative.
    """
    attacked = [r for r in records if r.attacked]
    if not attacked:
        raise ConfigError("no attacked records")
    return false_negative_count(attacked) / len(attacked)


def pair_records(pruned_run: Sequence[AttackRecord],
                 full_run: Sequence[AttackRecord]) -> list[AttackRecord]:
    """Join a pruned run and a full run on ``example_id``."""
    full_by_id = {r.example_id: r for r in full_run}
    out = []
    for r in pruned_run:
        f = full_by_id.get(r.example_id)
        if f is None:
            raise ConfigError(f"example {r.example_id} has no full-setting record")
        if not r.attacked or not f.attacked:
            continue
        out.append(AttackRecord(r.example_id, "paired", f.final, r.pruned or r.final, f.full or f.final))
    return out


@dataclass
class Histogram:
    never: int
    rare: int
    frequent: int
    frequent_features: list[int] = field(default_factory=list)
    rare_features: list[int] = field(default_factory=list)


def perturbation_histogram(pairs: Iterable[tuple], total_adv: int, d: int,
                           rare_cutoff: float = 0.05) -> Histogram:
    """Bucket features by the fraction of adversarial examples changing them:
    never (0), rare (up to ``rare_cutoff``) and frequent (above it)."""
    if total_adv <= 0:
        raise ConfigError("total_adv must be positive")
    counts = [0] * d
    for x, x_adv in pairs:
        xv = x.values if isinstance(x, Example) else x
        av = x_adv.values if isinstance(x_adv, Example) else x_adv
        for f in range(d):
            if xv[f] != av[f]:
                counts[f] += 1
    never, rare, frequent = [], [], []
    for f, c in enumerate(counts):
        if c == 0:
            never.append(f)
        elif c / total_adv <= rare_cutoff:
            rare.append(f)
        else:
            frequent.append(f)
    return Histogram(len(never), len(rare), len(frequent), frequent, rare)


def adversarial_pairs(data: Sequence[Example], records: Sequence[AttackRecord]) -> list[tuple]:
    by_id = {r.example_id: r for r in records}
    out = []
    for i, x in enumerate(data):
        r = by_id.get(i)
        if r is not None and r.final.is_sat and r.final.witness is not None:
            out.append((x.values, r.final.witness))
    return out


def _mispredicted_confidence(margin: float) -> float:
    # probability the model gives to the label it predicts for the witness
    return sigmoid(margin) if margin >= 0 else sigmoid(-margin)


def probability_delta(full_records: Sequence[AttackRecord],
                      other_records: Sequence[AttackRecord]) -> float | None:
    """Mean absolute gap in the confidence of the mispredicted class between
    full-setting witnesses and other-setting witnesses of the same examples."""
    other = {r.example_id: r for r in other_records}
    diffs = []
    for r in full_records:
        o = other.get(r.example_id)
        if o is None or not (r.attacked and o.attacked):
            continue
        if r.final.is_sat and o.final.is_sat and None not in (r.final.margin, o.final.margin):
            diffs.append(abs(_mispredicted_confidence(r.final.margin)
                             - _mispredicted_confidence(o.final.margin)))
    return statistics.fmean(diffs) if diffs else None


@dataclass
class RobustnessReport:
    values: list[float]
    statuses: list[str]
    used_full: list[bool]

    @property
    def mean(self) -> float | None:
        finite = [v for v in self.values if math.isfinite(v)]
        return statistics.fmean(finite) if finite else None


def empirical_robustness(e: Ensemble, data: Sequence[Example], setting: Setting,
                         cfg: RunConfig, features: Iterable[int] = ()) -> RobustnessReport:
    """Nearest-adversarial distance per example.

    Only distances below ``cfg.delta`` are searched; examples without a flip
    there get ``inf``.  Mixed uses the pruned value unless the pruned
    ensemble has no flip at any candidate radius, in which case the full
    value is used.
    """
    setting = Setting(setting)
    features = tuple(features)
    values, statuses, used_full = [], [], []
    for x in data:
        if setting is Setting.FULL:
            res = min_robustness(e, x, cfg.engine_config(cfg.t_full), cfg.delta)
            full_used = True
        else:
            res = min_robustness(prune(e, x, features), x, cfg.engine_config(cfg.t_prun),
                                 cfg.delta)
            full_used = False
            if setting is Setting.MIXED and res.status is not Status.SAT:
                res = min_robustness(e, x, cfg.engine_config(cfg.t_full), cfg.delta)
                full_used = True
        values.append(res.delta_star)
        statuses.append(MISCLASSIFIED if res.misclassified else res.status.value)
        used_full.append(full_used)
    return RobustnessReport(values, statuses, used_full)


@dataclass
class RunSummary:
    dataset: str
    setting: str
    engine: str
    examples: int
    attacked: int
    sat: int
    unsat: int
    timeout: int
    skipped: int
    misclassified: int
    total_wall_s: float
    mean_wall_s: float | None
    speedup: float | None
    fnr: float | None
    fallback_frac: float | None
    timeout_frac: float | None
    skipped_frac: float
    mean_linf: float | None
    mean_prob_delta: float | None
    total_expansions: int
    subset_size: int | None

    TIME_FIELDS = ("total_wall_s", "mean_wall_s", "speedup")

    @classmethod
    def columns(cls) -> list[str]:
        return [f for f in cls.__dataclass_fields__ if f != "TIME_FIELDS"]

    def row(self) -> dict:
        return {c: getattr(self, c) for c in self.columns()}


def _phase_sum(rec: AttackRecord, attr: str):
    return sum(getattr(p, attr) for p in (rec.pruned, rec.full) if p is not None)


def total_wall(records: Iterable[AttackRecord]) -> float:
    return sum(_phase_sum(r, "wall_s") for r in records if r.attacked)


def total_expansions(records: Iterable[AttackRecord]) -> int:
    return sum(_phase_sum(r, "expansions") for r in records if r.attacked)


def summarize(records: Sequence[AttackRecord], reference: Sequence[AttackRecord] | None = None,
              dataset: str = "", engine: str = "", subset_size: int | None = None,
              paired_full: Sequence[AttackRecord] | None = None) -> RunSummary:
    """Aggregate a run.  ``reference`` (usually the full run) gives the speedup
    and probability deltas; ``paired_full`` lets a pruned run report its FNR."""
    if not records:
        raise ConfigError("cannot summarize an empty run")
    attacked = [r for r in records if r.attacked]
    status = [r.final.status for r in attacked]
    n_att = len(attacked)
    wall = total_wall(records)
    speedup = None
    if reference is not None:
        ref_wall = total_wall(reference)
        speedup = ref_wall / wall if wall > 0 else None
    fnr = None
    setting = records[0].setting
    if setting == Setting.MIXED.value and attacked:
        fnr = false_negative_rate(attacked)
    elif setting == Setting.PRUNED.value and paired_full is not None:
        paired = pair_records(records, paired_full)
        fnr = false_negative_rate(paired) if paired else None
    linfs = [r.final.linf for r in attacked if r.final.is_sat and r.final.linf is not None]
    prob_delta = None
    if reference is not None and reference is not records:
        prob_delta = probability_delta(reference, records)
    return RunSummary(
        dataset=dataset,
        setting=setting,
        engine=engine,
        examples=len(records),
        attacked=n_att,
        sat=status.count("SAT"),
        unsat=status.count("UNSAT"),
        timeout=status.count("TIMEOUT"),
        skipped=sum(r.final.status == SKIPPED for r in records),
        misclassified=sum(r.final.status == MISCLASSIFIED for r in records),
        total_wall_s=wall,
        mean_wall_s=wall / n_att if n_att else None,
        speedup=speedup,
        fnr=fnr,
        fallback_frac=sum(r.used_fallback for r in attacked) / n_att if n_att else None,
        timeout_frac=status.count("TIMEOUT") / n_att if n_att else None,
        skipped_frac=sum(r.final.status == SKIPPED for r in records) / len(records),
        mean_linf=statistics.fmean(linfs) if linfs else None,
        mean_prob_delta=prob_delta,
        total_expansions=total_expansions(records),
        subset_size=subset_size,
    )
