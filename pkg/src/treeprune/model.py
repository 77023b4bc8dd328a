"""Tree ensemble data model: prediction, per-example pruning and fixtures.

Trees are stored as flat node arrays.  An internal node routes an example
to its left child iff ``x[feature] < threshold`` (strict), otherwise right.
The ensemble output is the additive margin ``bias + sum(leaf values)``;
the probability view is ``sigmoid(margin)`` and the label is ``+1`` iff
``margin >= 0``.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence


class ModelError(ValueError):
    """Structural problem in a model, or a model/example mismatch."""


class Split(NamedTuple):
    feature: int
    threshold: float
    left: int
    right: int


class Leaf(NamedTuple):
    value: float


Node = Split | Leaf


@dataclass(frozen=True)
class Example:
    values: tuple[float, ...]
    label: int | None = None

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not all(math.isfinite(v) for v in values):
            raise ModelError("example contains non-finite values")
        if self.label not in (None, -1, 1):
            raise ModelError(f"label must be -1, +1 or None, got {self.label!r}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=True)
class Tree:
    nodes: tuple[Node, ...]
    root: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        self._validate()

    def _validate(self):
        nodes = self.nodes
        if not nodes:
            raise ModelError("tree has no nodes")
        if not 0 <= self.root < len(nodes):
            raise ModelError(f"root index {self.root} out of range")
        seen = set()
        stack = [self.root]
        while stack:
            i = stack.pop()
            if i in seen:
                raise ModelError(f"node {i} has more than one parent")
            seen.add(i)
            node = nodes[i]
            if isinstance(node, Split):
                if not math.isfinite(node.threshold):
                    raise ModelError(f"node {i}: non-finite threshold")
                if node.feature < 0:
                    raise ModelError(f"node {i}: negative feature index")
                if node.left == node.right:
                    raise ModelError(f"node {i}: children must be distinct")
                for child in (node.left, node.right):
                    if not 0 <= child < len(nodes):
                        raise ModelError(f"node {i}: child {child} out of range")
                    stack.append(child)
            elif isinstance(node, Leaf):
                if not math.isfinite(node.value):
                    raise ModelError(f"node {i}: non-finite leaf value")
            else:
                raise ModelError(f"node {i}: unknown node kind {type(node).__name__}")
        if len(seen) != len(nodes):
            raise ModelError("tree contains nodes unreachable from the root")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_leaves(self) -> int:
        return sum(isinstance(n, Leaf) for n in self.nodes)

    def split_features(self) -> set[int]:
        return {n.feature for n in self.nodes if isinstance(n, Split)}

    def max_feature(self) -> int:
        return max((n.feature for n in self.nodes if isinstance(n, Split)), default=-1)


@dataclass(eq=False)
class Ensemble:
    """Additive ensemble of binary trees over ``num_features`` inputs.

    Instances are treated as immutable once built; derived views are cached.
    """

    trees: tuple[Tree, ...]
    num_features: int
    bias: float = 0.0

    def __post_init__(self):
        self.trees = tuple(self.trees)
        self.bias = float(self.bias)
        if self.num_features <= 0:
            raise ModelError("num_features must be positive")
        if not math.isfinite(self.bias):
            raise ModelError("bias must be finite")
        for t, tree in enumerate(self.trees):
            if tree.max_feature() >= self.num_features:
                raise ModelError(
                    f"tree {t} splits on feature {tree.max_feature()} "
                    f">= num_features {self.num_features}")

    def __eq__(self, other):
        if not isinstance(other, Ensemble):
            return NotImplemented
        return (self.num_features == other.num_features
                and self.bias == other.bias
                and self.trees == other.trees)

    __hash__ = None

    @property
    def num_nodes(self) -> int:
        return sum(t.num_nodes for t in self.trees)

    @cached_property
    def split_features(self) -> frozenset[int]:
        feats = set()
        for t in self.trees:
            feats |= t.split_features()
        return frozenset(feats)


def _values_of(e: Ensemble, x) -> Sequence[float]:
    values = x.values if isinstance(x, Example) else x
    if len(values) != e.num_features:
        raise ModelError(
            f"example has {len(values)} features, ensemble expects {e.num_features}")
    return values


def evaluate_tree(tree: Tree, x) -> float:
    values = x.values if isinstance(x, Example) else x
    nodes = tree.nodes
    node = nodes[tree.root]
    while type(node) is Split:
        if node.feature >= len(values):
            raise ModelError(
                f"split on feature {node.feature} but example has {len(values)} features")
        node = nodes[node.left] if values[node.feature] < node.threshold else nodes[node.right]
    return node.value


def predict_margin(e: Ensemble, x) -> float:
    values = _values_of(e, x)
    total = e.bias
    for tree in e.trees:
        total += evaluate_tree(tree, values)
    return total


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def predict_proba(e: Ensemble, x) -> float:
    return sigmoid(predict_margin(e, x))


def label_of_margin(margin: float) -> int:
    # tie at exactly 0 goes to +1
    return 1 if margin >= 0 else -1


def predict_label(e: Ensemble, x) -> int:
    return label_of_margin(predict_margin(e, x))


def prune(e: Ensemble, x, selected) -> Ensemble:
    """Fix every feature outside ``selected`` to its value in ``x``.

    Each split on a non-selected feature is replaced by the child that ``x``
    routes to; the other subtree is dropped.  Trees that collapse keep a
    single leaf so tree positions are preserved.
    """
    values = _values_of(e, x)
    keep = frozenset(selected)
    bad = [f for f in keep if not 0 <= f < e.num_features]
    if bad:
        raise ModelError(f"selected features out of range: {sorted(bad)}")
    return Ensemble(tuple(_prune_tree(t, values, keep) for t in e.trees),
                    e.num_features, e.bias)


def _prune_tree(tree: Tree, values, keep: frozenset[int]) -> Tree:
    nodes = tree.nodes
    out: list[Node] = []

    def emit(i: int) -> int:
        node = nodes[i]
        while type(node) is Split and node.feature not in keep:
            i = node.left if values[node.feature] < node.threshold else node.right
            node = nodes[i]
        pos = len(out)
        if type(node) is Leaf:
            out.append(node)
            return pos
        out.append(None)  # placeholder, filled once children are placed
        left = emit(node.left)
        right = emit(node.right)
        out[pos] = Split(node.feature, node.threshold, left, right)
        return pos

    emit(tree.root)
    return Tree(tuple(out), 0)


def random_tree(rng: random.Random, depth: int, features: Sequence[int],
                leaf_scale: float) -> Tree:
    nodes: list[Node] = []

    def grow(level: int) -> int:
        pos = len(nodes)
        if level == depth:
            nodes.append(Leaf(rng.uniform(-leaf_scale, leaf_scale)))
            return pos
        nodes.append(None)
        f = rng.choice(features)
        thr = rng.random()
        left = grow(level + 1)
        right = grow(level + 1)
        nodes[pos] = Split(f, thr, left, right)
        return pos

    grow(0)
    return Tree(tuple(nodes), 0)


def random_ensemble(trees: int, depth: int, d: int, leaf_scale: float = 1.0,
                    seed: int = 0, features: Sequence[int] | None = None,
                    bias: float = 0.0) -> Ensemble:
    """Seeded ensemble of complete trees with thresholds in [0, 1).

    ``features`` restricts which features may be split on.
    """
    if trees < 0 or depth < 0 or d <= 0:
        raise ModelError("trees and depth must be non-negative, d positive")
    pool = list(range(d)) if features is None else sorted(set(features))
    if not pool or pool[0] < 0 or pool[-1] >= d:
        raise ModelError("split feature pool must be a non-empty subset of range(d)")
    rng = random.Random(seed)
    return Ensemble(tuple(random_tree(rng, depth, pool, leaf_scale) for _ in range(trees)),
                    d, bias)
