"""Complete best-first branch and bound over per-tree leaf choices.

A search state fixes one leaf for each of the first ``cursor`` trees (in the
engine's tree order) together with the box of inputs that reach all chosen
leaves.  Its priority is ``g + h`` where ``g`` is the margin accumulated so
far and ``h`` sums, over the remaining trees, the best leaf value still
reachable inside the state's box.  ``h`` never underestimates what a
completion can add, so the bound is admissible.

Boxes are half-open float intervals ``[lo, hi)`` per feature.  The open
lower end of the L-inf ball is stored as the first float strictly inside it,
so membership is exact on IEEE doubles and ``witness`` can always realize a
point of the box.

Three modes share the engine:

``decision``
    Stop at the first complete leaf selection that flips the label.
``optimize``
    Maximize (or minimize) the margin inside the ball; the first complete
    state popped is optimal.
``min_delta``
    Smallest L-inf distance to a label flip below ``delta``, found by binary
    search over threshold-crossing radii with decision searches.
"""

from __future__ import annotations

import enum
import heapq
import math
import struct
import sys
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .model import Ensemble, Example, Leaf, ModelError, Tree, label_of_margin, predict_margin

_INF = math.inf
_TIME_CHECK_EVERY = 256


class AttackError(ValueError):
    pass


class Status(str, enum.Enum):
    SAT = "SAT"
    UNSAT = "UNSAT"
    TIMEOUT = "TIMEOUT"


class Mode(str, enum.Enum):
    DECISION = "decision"
    OPTIMIZE = "optimize"
    MIN_DELTA = "min_delta"


@dataclass(frozen=True)
class EngineConfig:
    mode: Mode = Mode.DECISION
    timeout: float = _INF
    node_budget: int | None = None
    tree_order: str = "range_descending"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.timeout > 0:
            raise AttackError("timeout must be positive")
        if self.node_budget is not None and self.node_budget < 0:
            raise AttackError("node_budget must be non-negative")
        if self.tree_order not in ("range_descending", "model_order"):
            raise AttackError(f"unknown tree order {self.tree_order!r}")


@dataclass(frozen=True)
class AttackOutcome:
    status: Status
    witness: Example | None = None
    linf: float | None = None
    margin: float | None = None

    @property
    def is_sat(self) -> bool:
        return self.status is Status.SAT


UNSAT = AttackOutcome(Status.UNSAT)
TIMEOUT = AttackOutcome(Status.TIMEOUT)


@dataclass
class AttackStats:
    expansions: int = 0
    wall_time: float = 0.0
    optimal_proven: bool = False
    best_bound: float | None = None
    incumbent: AttackOutcome | None = None
    bracket: tuple[float, float] | None = None
    searches: int = 0


# ---------------------------------------------------------------- boxes

def _next_up(v: float) -> float:
    return math.nextafter(v, _INF)


def _next_down(v: float) -> float:
    return math.nextafter(v, -_INF)


def _ordered(v: float) -> int:
    # integer key whose order matches the float order (finite values)
    (i,) = struct.unpack("<q", struct.pack("<d", v))
    return i if i >= 0 else -(i & 0x7FFFFFFFFFFFFFFF)


def _from_ordered(i: int) -> float:
    bits = i if i >= 0 else (-i) | -0x8000000000000000
    return struct.unpack("<d", struct.pack("<q", bits))[0]


def _first_true(pred, a: float, b: float) -> float:
    """Smallest float in ``(a, b]`` satisfying a monotone ``pred`` with
    ``pred(a)`` false and ``pred(b)`` true."""
    ia, ib = _ordered(a), _ordered(b)
    while ib - ia > 1:
        mid = (ia + ib) // 2
        if pred(_from_ordered(mid)):
            ib = mid
        else:
            ia = mid
    return _from_ordered(ib)


def ball_interval(xf: float, delta: float) -> tuple[float, float]:
    """Float interval ``[lo, hi)`` of all p with ``abs(p - xf) < delta``."""
    if delta == _INF:
        return -_INF, _INF
    big = sys.float_info.max
    # fl(xf - p) and fl(p - xf) are monotone in p, so both ends bisect
    inside_lo = lambda p: xf - p < delta
    outside_hi = lambda p: not p - xf < delta
    step = delta
    while inside_lo(max(xf - step, -big)) and xf - step > -big:
        step *= 2
    a = max(xf - step, -big)
    lo = -_INF if inside_lo(a) else _first_true(inside_lo, a, xf)
    step = delta
    while not outside_hi(min(xf + step, big)) and xf + step < big:
        step *= 2
    b = min(xf + step, big)
    hi = _INF if not outside_hi(b) else _first_true(outside_hi, xf, b)
    return lo, hi


@dataclass(frozen=True)
class FeatureBox:
    """Per-feature half-open intervals; absent features are unbounded."""

    intervals: Mapping[int, tuple[float, float]] = field(default_factory=dict)

    def interval(self, f: int) -> tuple[float, float]:
        return self.intervals.get(f, (-_INF, _INF))

    def is_empty(self) -> bool:
        return any(not lo < hi for lo, hi in self.intervals.values())

    def intersect(self, other: "FeatureBox") -> "FeatureBox | None":
        out = dict(self.intervals)
        for f, (lo, hi) in other.intervals.items():
            a, b = out.get(f, (-_INF, _INF))
            lo, hi = max(a, lo), min(b, hi)
            if not lo < hi:
                return None
            out[f] = (lo, hi)
        return FeatureBox(out)

    def contains(self, point: Sequence[float]) -> bool:
        return all(lo <= point[f] < hi for f, (lo, hi) in self.intervals.items())


def delta_box(x, delta: float, features: Sequence[int] | None = None) -> FeatureBox:
    """The open L-inf ball of radius ``delta`` around ``x``."""
    if not delta > 0:
        raise AttackError("delta must be positive")
    values = x.values if isinstance(x, Example) else x
    fs = range(len(values)) if features is None else features
    return FeatureBox({f: ball_interval(values[f], delta) for f in fs})


def witness(box: FeatureBox, x) -> Example:
    """Point of ``box`` closest to ``x`` in L-inf, changing only what it must."""
    values = list(x.values if isinstance(x, Example) else x)
    for f, (lo, hi) in box.intervals.items():
        if not lo < hi:
            raise AttackError(f"empty interval on feature {f}")
        v = values[f]
        if v < lo:
            values[f] = lo
        elif v >= hi:
            values[f] = _next_down(hi)
    return Example(tuple(values))


# ------------------------------------------------------- compiled trees

class _CTree:
    """Flat, search-friendly copy of a tree.

    ``plo``/``phi`` hold the interval that the root-to-node path already
    imposes on the node's split feature; ``cons`` lists, per leaf, the merged
    path constraints as ``(feature, lo, hi)``.
    """

    __slots__ = ("feat", "thr", "left", "right", "plo", "phi", "value", "cons",
                 "features", "root", "index")

    def __init__(self, tree: Tree, index: int):
        n = len(tree.nodes)
        self.index = index
        self.root = tree.root
        self.feat = [-1] * n
        self.thr = [0.0] * n
        self.left = [-1] * n
        self.right = [-1] * n
        self.plo = [-_INF] * n
        self.phi = [_INF] * n
        self.value = [0.0] * n
        self.cons: dict[int, tuple[tuple[int, float, float], ...]] = {}
        stack: list[tuple[int, dict[int, tuple[float, float]]]] = [(tree.root, {})]
        while stack:
            i, path = stack.pop()
            node = tree.nodes[i]
            if type(node) is Leaf:
                self.value[i] = node.value
                self.cons[i] = tuple((f, lo, hi) for f, (lo, hi) in sorted(path.items()))
                continue
            f, t = node.feature, node.threshold
            lo, hi = path.get(f, (-_INF, _INF))
            self.feat[i], self.thr[i] = f, t
            self.left[i], self.right[i] = node.left, node.right
            self.plo[i], self.phi[i] = lo, hi
            if lo < t:
                lpath = dict(path)
                lpath[f] = (lo, min(hi, t))
                stack.append((node.left, lpath))
            if hi > t:
                rpath = dict(path)
                rpath[f] = (max(lo, t), hi)
                stack.append((node.right, rpath))
        self.features = frozenset(f for f in self.feat if f >= 0)

    def reachable(self, ov: Mapping[int, tuple[float, float]], blo, bhi) -> list[int]:
        """Leaf ids whose region meets the box (``ov`` overrides ``blo/bhi``)."""
        feat, thr, plo, phi = self.feat, self.thr, self.plo, self.phi
        left, right = self.left, self.right
        out = []
        stack = [self.root]
        pop, push = stack.pop, stack.append
        while stack:
            i = pop()
            f = feat[i]
            if f < 0:
                out.append(i)
                continue
            iv = ov.get(f)
            if iv is None:
                lo, hi = blo[f], bhi[f]
            else:
                lo, hi = iv
            a = plo[i]
            if a > lo:
                lo = a
            b = phi[i]
            if b < hi:
                hi = b
            t = thr[i]
            if hi > t:
                push(right[i])
            if lo < t:
                push(left[i])
        return out

    def best(self, ov, blo, bhi, sign: float) -> float:
        value = self.value
        return max(sign * value[i] for i in self.reachable(ov, blo, bhi))


def compile_ensemble(e: Ensemble) -> list[_CTree]:
    cached = e.__dict__.get("_compiled")
    if cached is None:
        cached = [_CTree(t, i) for i, t in enumerate(e.trees)]
        e.__dict__["_compiled"] = cached
    return cached


def _unbounded(d: int) -> tuple[list[float], list[float]]:
    return [-_INF] * d, [_INF] * d


def reachable_leaves(tree: Tree, box: FeatureBox) -> list[tuple[float, FeatureBox]]:
    """Leaves of ``tree`` whose region meets ``box``, with the intersected box."""
    ct = _CTree(tree, 0)
    d = max(ct.features | set(box.intervals), default=-1) + 1
    blo, bhi = _unbounded(d)
    out = []
    for leaf in sorted(ct.reachable(box.intervals, blo, bhi)):
        region = FeatureBox({f: (lo, hi) for f, lo, hi in ct.cons[leaf]})
        inter = box.intersect(region)
        if inter is not None:
            out.append((ct.value[leaf], inter))
    return out


def remaining_bound(e: Ensemble, order: Sequence[int], cursor: int, box: FeatureBox,
                    maximize: bool = True) -> float:
    """Optimistic margin still obtainable from trees ``order[cursor:]``."""
    cts = compile_ensemble(e)
    blo, bhi = _unbounded(e.num_features)
    sign = 1.0 if maximize else -1.0
    total = 0.0
    for j in order[cursor:]:
        total += cts[j].best(box.intervals, blo, bhi, sign)
    return sign * total


def tree_order(e: Ensemble, x, delta: float, how: str = "range_descending") -> list[int]:
    cts = compile_ensemble(e)
    if how == "model_order":
        return list(range(len(cts)))
    values = x.values if isinstance(x, Example) else x
    blo, bhi = _ball_lists(values, delta, e)
    spans = []
    for ct in cts:
        vals = [ct.value[i] for i in ct.reachable({}, blo, bhi)]
        spans.append(max(vals) - min(vals))
    return sorted(range(len(cts)), key=lambda j: (-spans[j], j))


def _ball_lists(values, delta, e: Ensemble) -> tuple[list[float], list[float]]:
    blo, bhi = _unbounded(e.num_features)
    for f in e.split_features:
        blo[f], bhi[f] = ball_interval(values[f], delta)
    return blo, bhi


# ---------------------------------------------------------------- search

class _Clock:
    __slots__ = ("deadline", "budget", "expansions")

    def __init__(self, timeout: float, budget: int | None, start: float):
        self.deadline = start + timeout
        self.budget = budget
        self.expansions = 0

    def expired(self) -> bool:
        return time.perf_counter() > self.deadline


def _check_dims(e: Ensemble, x) -> tuple[float, ...]:
    values = x.values if isinstance(x, Example) else tuple(x)
    if len(values) != e.num_features:
        raise ModelError(
            f"example has {len(values)} features, ensemble expects {e.num_features}")
    return values


def _make_witness(values, ov, features, blo, bhi) -> tuple[float, ...]:
    w = list(values)
    for f in features:
        iv = ov.get(f)
        lo, hi = (blo[f], bhi[f]) if iv is None else iv
        v = w[f]
        if v < lo:
            w[f] = lo
        elif v >= hi:
            w[f] = _next_down(hi)
    return tuple(w)


def _linf(a, b) -> float:
    return max((abs(p - q) for p, q in zip(a, b)), default=0.0)


def _run_bnb(e: Ensemble, values, radius: float, mode: Mode, order_how: str,
             clock: _Clock, stats: AttackStats) -> AttackOutcome:
    """One decision/optimize search at a fixed radius."""
    stats.searches += 1
    cts = compile_ensemble(e)
    base_label = label_of_margin(predict_margin(e, values))
    # label -1 -> push margin up to >= 0; label +1 -> push it below 0
    sign = 1.0 if base_label < 0 else -1.0
    strict = sign < 0

    def flips(score: float) -> bool:
        return score > 0 if strict else score >= 0

    blo, bhi = _ball_lists(values, radius, e)
    g0 = e.bias
    live = []      # (span, index, tree, base best)
    for ct in cts:
        leaves = ct.reachable({}, blo, bhi)
        if len(leaves) == 1:
            # the whole ball routes to this leaf: constant contribution
            g0 += ct.value[leaves[0]]
            continue
        vals = [ct.value[i] for i in leaves]
        best = max(sign * v for v in vals)
        live.append((max(vals) - min(vals), ct.index, ct, best))
    if order_how == "range_descending":
        live.sort(key=lambda r: (-r[0], r[1]))
    else:
        live.sort(key=lambda r: r[1])
    trees = [r[2] for r in live]
    base_bests = [r[3] for r in live]
    n_trees = len(trees)
    features = sorted(e.split_features)

    positions_of: dict[int, list[int]] = {}
    for p, ct in enumerate(trees):
        for f in ct.features:
            positions_of.setdefault(f, []).append(p)

    def accept(ov, g) -> AttackOutcome | None:
        w = _make_witness(values, ov, features, blo, bhi)
        m = predict_margin(e, w)
        if label_of_margin(m) == base_label:
            return None
        dist = _linf(w, values)
        if not dist < radius:
            return None
        return AttackOutcome(Status.SAT, Example(w), dist, m)

    root_bound = sign * g0 + sum(base_bests)
    stats.best_bound = sign * root_bound
    if not flips(root_bound):
        stats.optimal_proven = True
        return UNSAT
    if n_trees == 0:
        out = accept({}, g0)
        if out is not None:
            stats.optimal_proven = True
            return out
        return UNSAT

    counter = 0
    # heap entry: (-bound, -cursor, counter, ov, g, bests)
    heap = [(-root_bound, 0, counter, {}, g0, base_bests)]
    incumbent: AttackOutcome | None = None
    inc_score = -_INF
    optimize = mode is Mode.OPTIMIZE

    stopped = False
    while heap and not stopped:
        if clock.budget is not None and clock.expansions >= clock.budget:
            stopped = True
            break
        if clock.expansions % _TIME_CHECK_EVERY == 0 and clock.expired():
            stopped = True
            break
        neg_bound, neg_cursor, _, ov, g, bests = heapq.heappop(heap)
        cursor = -neg_cursor
        if cursor == n_trees:
            # complete state at the top of the heap: optimal
            out = accept(ov, g)
            if out is not None:
                stats.optimal_proven = True
                stats.best_bound = sign * -neg_bound
                return out
            continue
        clock.expansions += 1
        ct = trees[cursor]
        nxt = cursor + 1
        complete = nxt == n_trees
        value, cons = ct.value, ct.cons
        children = []
        for leaf in ct.reachable(ov, blo, bhi):
            cov = ov
            tightened = []
            dist = 0.0
            for f, lo, hi in cons[leaf]:
                iv = cov.get(f)
                clo, chi = (blo[f], bhi[f]) if iv is None else iv
                nlo = lo if lo > clo else clo
                nhi = hi if hi < chi else chi
                if nlo != clo or nhi != chi:
                    if cov is ov:
                        cov = dict(ov)
                    cov[f] = (nlo, nhi)
                    tightened.append(f)
                    xf = values[f]
                    if xf < nlo:
                        gap = nlo - xf
                    elif xf >= nhi:
                        gap = xf - _next_down(nhi)
                    else:
                        gap = 0.0
                    if gap > dist:
                        dist = gap
            children.append((dist, leaf, cov, tightened))
        # least-perturbing leaves first; equal bounds then pop in this order
        children.sort(key=lambda c: c[0])
        for _, leaf, cov, tightened in children:
            cg = g + value[leaf]
            cbests = bests
            h = 0.0
            if not complete:
                if tightened:
                    touched = set()
                    for f in tightened:
                        for p in positions_of.get(f, ()):
                            if p > cursor:
                                touched.add(p)
                    if touched:
                        cbests = list(bests)
                        for p in touched:
                            cbests[p] = trees[p].best(cov, blo, bhi, sign)
                h = sum(cbests[nxt:])
            bound = sign * cg + h
            if not flips(bound):
                continue
            if complete:
                if mode is Mode.DECISION:
                    out = accept(cov, cg)
                    if out is not None:
                        return out
                    continue
                if sign * cg > inc_score:
                    out = accept(cov, cg)
                    if out is not None:
                        incumbent, inc_score = out, sign * cg
                        stats.incumbent = incumbent
                        if clock.expired():
                            stopped = True
                            break
            counter += 1
            heapq.heappush(heap, (-bound, -nxt, counter, cov, cg, cbests))

    if stopped:
        if heap:
            stats.best_bound = sign * -heap[0][0]
        return TIMEOUT
    stats.optimal_proven = True
    return UNSAT


def search(e: Ensemble, x, delta: float, cfg: EngineConfig = EngineConfig()
           ) -> tuple[AttackOutcome, AttackStats]:
    """Attack ``x`` on ``e`` inside the open L-inf ball of radius ``delta``."""
    values = _check_dims(e, x)
    if not delta > 0:
        raise AttackError("delta must be positive")
    start = time.perf_counter()
    stats = AttackStats()
    clock = _Clock(cfg.timeout, cfg.node_budget, start)
    if cfg.mode is Mode.MIN_DELTA:
        res = _min_radius(e, values, delta, cfg, clock, stats)
        # an interrupted bisection still holds a valid adversarial example
        outcome = res.outcome
    else:
        outcome = _run_bnb(e, values, delta, cfg.mode, cfg.tree_order, clock, stats)
    stats.expansions = clock.expansions
    stats.wall_time = time.perf_counter() - start
    return outcome, stats


# --------------------------------------------------- nearest adversarial

def crossing_radii(e: Ensemble, x) -> list[tuple[float, float]]:
    """Sorted ``(radius, distance)`` pairs, one per distinct crossing radius.

    ``distance`` is ``abs(x_f - threshold)``; ``radius`` is the smallest ball
    radius whose float box contains a point on the other side of the split.
    """
    values = x.values if isinstance(x, Example) else x
    best: dict[float, float] = {}
    for ct in compile_ensemble(e):
        for f, t in zip(ct.feat, ct.thr):
            if f < 0:
                continue
            xf = values[f]
            if xf < t:
                gap = t - xf
            else:
                gap = xf - _next_down(t)
            r = _next_up(gap)
            dist = abs(xf - t)
            if r not in best or dist < best[r]:
                best[r] = dist
    return sorted(best.items())


@dataclass
class RobustnessResult:
    """Nearest-flip distance and the witness realizing it.

    ``status`` is TIMEOUT when the search ran out of budget; ``bracket`` then
    holds the interval known to contain the true distance and ``outcome``
    carries the best witness found so far, if any.
    """

    delta_star: float
    outcome: AttackOutcome
    status: Status
    misclassified: bool = False
    bracket: tuple[float, float] | None = None
    stats: AttackStats = field(default_factory=AttackStats)

    @property
    def witness(self) -> Example | None:
        return self.outcome.witness


def _min_radius(e: Ensemble, values, cap: float, cfg: EngineConfig, clock: _Clock,
                stats: AttackStats) -> RobustnessResult:
    cands = crossing_radii(e, values)
    if cap < _INF:
        cands = [c for c in cands if c[0] <= cap]

    def decide(radius):
        return _run_bnb(e, values, radius, Mode.DECISION, cfg.tree_order, clock, stats)

    if not cands:
        # no threshold can be crossed: the prediction is constant on the ball
        stats.optimal_proven = True
        return RobustnessResult(_INF, UNSAT, Status.UNSAT, stats=stats)
    # decisions are constant between consecutive crossing radii, so the
    # answer at the cap equals the answer at the largest candidate
    top_radius = cap if cap < _INF else cands[-1][0]
    top = decide(top_radius)
    if top.status is Status.UNSAT:
        return RobustnessResult(_INF, UNSAT, Status.UNSAT, stats=stats)
    if top.status is Status.TIMEOUT:
        return RobustnessResult(_INF, TIMEOUT, Status.TIMEOUT,
                                bracket=(0.0, _INF), stats=stats)
    lo, hi = 0, len(cands) - 1
    best_out, best_dist = top, cands[-1][1]
    while lo < hi:
        mid = (lo + hi) // 2
        out = decide(cands[mid][0])
        if out.status is Status.SAT:
            best_out, best_dist = out, cands[mid][1]
            hi = mid
        elif out.status is Status.UNSAT:
            lo = mid + 1
        else:
            lower = cands[lo - 1][1] if lo > 0 else 0.0
            return RobustnessResult(best_dist, best_out, Status.TIMEOUT,
                                    bracket=(lower, best_dist), stats=stats)
    stats.optimal_proven = True
    lower = cands[lo - 1][1] if lo > 0 else 0.0
    return RobustnessResult(best_dist, best_out, Status.SAT,
                            bracket=(lower, best_dist), stats=stats)


def min_robustness(e: Ensemble, x, cfg: EngineConfig = EngineConfig(),
                   max_radius: float = _INF) -> RobustnessResult:
    """Distance from ``x`` to the nearest label flip of ``e`` (L-inf).

    Candidate distances are the threshold-crossing distances of ``x``; the
    smallest one whose decision search is SAT is returned as an infimum.
    A labelled ``x`` that ``e`` already misclassifies gets distance 0 and is
    flagged.  No reachable flip gives ``inf``.
    """
    values = _check_dims(e, x)
    start = time.perf_counter()
    stats = AttackStats()
    label = x.label if isinstance(x, Example) else None
    if label is not None:
        m = predict_margin(e, values)
        if label_of_margin(m) != label:
            return RobustnessResult(0.0, AttackOutcome(Status.SAT, Example(values), 0.0, m),
                                    Status.SAT, misclassified=True, stats=stats)
    clock = _Clock(cfg.timeout, cfg.node_budget, start)
    res = _min_radius(e, values, max_radius, cfg, clock, stats)
    stats.expansions = clock.expansions
    stats.wall_time = time.perf_counter() - start
    return res
