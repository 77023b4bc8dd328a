"""Seeded synthetic ensembles and datasets with known structure.

These are used by the test-suite, the benchmark command and ``gen``.  Each
builder documents the property that makes it useful as an oracle.
"""

from __future__ import annotations

import random
from typing import Sequence

from .model import Ensemble, Example, Leaf, ModelError, Split, Tree, predict_label, random_ensemble

INFORMATIVE_3 = (7, 42, 81)
SPARSE_INFORMATIVE = (3, 17, 38, 61, 90)


def two_stumps() -> Ensemble:
    """``[f0 < 0.5 ? +1 : -1] + [f1 < 0.5 ? +1 : -1]`` over two features.

    ``(0.6, 0.6)`` has margin -2; moving one coordinate below 0.5 gives
    margin 0, which the tie rule labels +1.
    """
    stump = lambda f: Tree((Split(f, 0.5, 1, 2), Leaf(1.0), Leaf(-1.0)))
    return Ensemble((stump(0), stump(1)), 2, 0.0)


def informative_ensemble(d: int = 100, trees: int = 20, depth: int = 5, seed: int = 0,
                         informative: Sequence[int] = INFORMATIVE_3) -> Ensemble:
    """Random ensemble that only ever splits on ``informative``.

    Pruning to any superset of ``informative`` leaves the ensemble unchanged,
    so pruned and full attacks solve the same problem.
    """
    return random_ensemble(trees, depth, d, 1.0, seed, informative)


def sparse_relevance_ensemble(d: int = 100, trees: int = 20, depth: int = 5,
                              informative: Sequence[int] = SPARSE_INFORMATIVE,
                              informative_depth: int = 3, noise_scale: float = 0.0,
                              seed: int = 1) -> Ensemble:
    """Trees whose top levels split on a few informative features and whose
    lower levels split on noise features.

    Every leaf below a node at ``informative_depth`` shares that node's
    region value (plus ``noise_scale`` jitter), so with the default zero
    jitter the noise splits are value-neutral: they make the full search
    space much larger without changing which inputs flip the label.
    """
    informative = sorted(set(informative))
    noise = [f for f in range(d) if f not in informative]
    if not informative or informative[-1] >= d or not noise:
        raise ModelError("informative features must be a proper subset of range(d)")
    if not 0 <= informative_depth <= depth:
        raise ModelError("informative_depth must lie in [0, depth]")
    rng = random.Random(seed)
    out = []
    for _ in range(trees):
        nodes: list = []

        def grow(level: int, base: float) -> int:
            pos = len(nodes)
            if level == depth:
                nodes.append(Leaf(base + noise_scale * rng.uniform(-1.0, 1.0)))
                return pos
            if level == informative_depth:
                base = rng.uniform(-1.0, 1.0)
            nodes.append(None)
            f = rng.choice(informative if level < informative_depth else noise)
            thr = rng.random()
            left = grow(level + 1, base)
            right = grow(level + 1, base)
            nodes[pos] = Split(f, thr, left, right)
            return pos

        grow(0, 0.0)
        out.append(Tree(tuple(nodes)))
    return Ensemble(tuple(out), d, 0.0)


def uniform_data(e: Ensemble, rows: int, seed: int = 0) -> list[Example]:
    """Uniform inputs on ``[0, 1)^d`` labelled with the ensemble's own prediction."""
    rng = random.Random(seed)
    out = []
    for _ in range(rows):
        values = tuple(rng.random() for _ in range(e.num_features))
        out.append(Example(values, predict_label(e, values)))
    return out


def parity_ensemble(d: int = 20) -> Ensemble:
    """One stump per feature at 0.5 worth ``+2`` on the right, bias ``-1``.

    An input with every feature below 0.5 has margin ``-1``; pushing any
    single feature across 0.5 flips it to ``+1``.
    """
    stumps = tuple(Tree((Split(f, 0.5, 1, 2), Leaf(0.0), Leaf(2.0))) for f in range(d))
    return Ensemble(stumps, d, -1.0)


def parity_data(d: int, rows: int, delta: float = 0.1, seed: int = 0) -> list[Example]:
    """Inputs for :func:`parity_ensemble` that each need a different feature.

    Example ``i`` has one uniformly chosen feature within ``delta / 2`` below
    0.5 and every other feature at 0.1, far outside the ball, so its only
    adversarial examples move that one feature.  No feature subset smaller
    than the whole set avoids false negatives on most examples.
    """
    if not 0 < delta < 0.8:
        raise ModelError("delta must lie in (0, 0.8)")
    rng = random.Random(seed)
    out = []
    for _ in range(rows):
        values = [0.1] * d
        values[rng.randrange(d)] = 0.5 - delta / 2
        out.append(Example(tuple(values), -1))
    return out
