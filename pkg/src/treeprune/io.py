"""Reading and writing models, datasets, feature subsets and run results.

Every writer is deterministic: keys are emitted in a fixed order and floats
use Python's shortest round-trip ``repr``, so equal inputs give
byte-identical files and loading recovers every float exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import fields
from pathlib import Path
from typing import Any, Iterable, Sequence

from .model import Ensemble, Example, Leaf, ModelError, Split, Tree
from .pipeline import AttackRecord, PhaseResult, RobustnessReport, RunSummary
from .subset import FeatureSubset, SelectionReport

FORMAT_VERSION = 1

log = logging.getLogger(__name__)

Node = Split | Leaf


class FormatError(ValueError):
    """A file does not follow the expected format."""


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _read_json(path) -> Any:
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not a text file") from exc
    try:
        # NaN/Infinity literals are parsed so validation can name their location
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


def _check_version(obj: dict, what: str) -> None:
    v = obj.get("format_version")
    if v != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported format_version {v!r}")


# ----------------------------------------------------------------- models

def _reroot(tree: Tree) -> list[Node]:
    """Node list with the root at index 0 (pre-order renumbering if needed)."""
    if tree.root == 0:
        return list(tree.nodes)
    order: list[int] = []
    stack = [tree.root]
    while stack:
        i = stack.pop()
        order.append(i)
        node = tree.nodes[i]
        if isinstance(node, Split):
            stack += [node.right, node.left]
    new = {old: k for k, old in enumerate(order)}
    out = []
    for old in order:
        node = tree.nodes[old]
        if isinstance(node, Split):
            node = Split(node.feature, node.threshold, new[node.left], new[node.right])
        out.append(node)
    return out


def ensemble_to_dict(e: Ensemble) -> dict:
    trees = []
    for tree in e.trees:
        nodes = []
        for node in _reroot(tree):
            if isinstance(node, Split):
                nodes.append({"feature": node.feature, "threshold": node.threshold,
                              "left": node.left, "right": node.right})
            else:
                nodes.append({"value": node.value})
        trees.append(nodes)
    return {"format_version": FORMAT_VERSION, "num_features": e.num_features,
            "bias": e.bias, "trees": trees}


def _number(v, where: str, integer: bool = False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FormatError(f"{where}: expected a number, got {type(v).__name__}")
    if integer:
        if isinstance(v, float):
            raise FormatError(f"{where}: expected an integer")
        return v
    v = float(v)
    if not math.isfinite(v):
        raise FormatError(f"{where}: non-finite value {v}")
    return v


def ensemble_from_dict(obj: Any, source: str = "model") -> Ensemble:
    if not isinstance(obj, dict):
        raise FormatError(f"{source}: top level must be an object")
    _check_version(obj, source)
    for key in ("num_features", "bias", "trees"):
        if key not in obj:
            raise FormatError(f"{source}: missing field {key!r}")
    d = _number(obj["num_features"], f"{source}.num_features", integer=True)
    bias = _number(obj["bias"], f"{source}.bias")
    if not isinstance(obj["trees"], list):
        raise FormatError(f"{source}.trees: expected an array")
    trees = []
    for t, raw in enumerate(obj["trees"]):
        where_t = f"trees[{t}]"
        if not isinstance(raw, list):
            raise FormatError(f"{where_t}: expected a node array")
        nodes: list[Node] = []
        for i, n in enumerate(raw):
            where = f"{where_t}.nodes[{i}]"
            if not isinstance(n, dict):
                raise FormatError(f"{where}: expected an object")
            if set(n) == {"value"}:
                nodes.append(Leaf(_number(n["value"], f"{where}.value")))
            elif set(n) == {"feature", "threshold", "left", "right"}:
                nodes.append(Split(
                    _number(n["feature"], f"{where}.feature", integer=True),
                    _number(n["threshold"], f"{where}.threshold"),
                    _number(n["left"], f"{where}.left", integer=True),
                    _number(n["right"], f"{where}.right", integer=True)))
            else:
                raise FormatError(
                    f"{where}: node must have either 'value' or "
                    f"'feature/threshold/left/right', got {sorted(n)}")
        try:
            trees.append(Tree(tuple(nodes), 0))
        except ModelError as exc:
            raise FormatError(f"{where_t}: {exc}") from exc
    try:
        return Ensemble(tuple(trees), d, bias)
    except ModelError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def save_ensemble(e: Ensemble, path) -> None:
    Path(path).write_text(_dumps(ensemble_to_dict(e)) + "\n")


def load_ensemble(path) -> Ensemble:
    return ensemble_from_dict(_read_json(path), str(path))


# --------------------------------------------------------- xgboost dumps

def _xgb_feature(split, num_features: int, where: str) -> int:
    if isinstance(split, int) and not isinstance(split, bool):
        f = split
    elif isinstance(split, str) and split[:1] == "f" and split[1:].isdigit():
        f = int(split[1:])
    elif isinstance(split, str) and split.isdigit():
        f = int(split)
    else:
        raise FormatError(f"{where}: cannot map split {split!r} to a feature index; "
                          "dump the model without feature names")
    if not 0 <= f < num_features:
        raise FormatError(f"{where}: feature {f} outside [0, {num_features})")
    return f


def _convert_xgb_tree(root: dict, num_features: int, where: str) -> tuple[Tree, bool]:
    nodes: list = []
    saw_missing = False

    def emit(node, path: str) -> int:
        nonlocal saw_missing
        if not isinstance(node, dict):
            raise FormatError(f"{path}: expected an object")
        pos = len(nodes)
        if "leaf" in node:
            nodes.append(Leaf(_number(node["leaf"], f"{path}.leaf")))
            return pos
        if "categories" in node or node.get("split_type") == "categorical":
            raise FormatError(f"{path}: categorical splits are not supported")
        for key in ("split", "split_condition", "yes", "no", "children"):
            if key not in node:
                raise FormatError(f"{path}: missing field {key!r}")
        if "missing" in node:
            saw_missing = True
        f = _xgb_feature(node["split"], num_features, path)
        thr = _number(node["split_condition"], f"{path}.split_condition")
        kids = {c.get("nodeid"): c for c in node["children"] if isinstance(c, dict)}
        yes, no = node["yes"], node["no"]
        if yes not in kids or no not in kids or yes == no:
            raise FormatError(f"{path}: yes/no must name two distinct children")
        nodes.append(None)
        # "yes" is taken when x_f < split_condition
        left = emit(kids[yes], f"{path}/{yes}")
        right = emit(kids[no], f"{path}/{no}")
        nodes[pos] = Split(f, thr, left, right)
        return pos

    emit(root, where)
    return Tree(tuple(nodes), 0), saw_missing


def import_xgboost_dump(path, num_features: int, base_score: float = 0.5) -> Ensemble:
    """Convert a JSON tree dump (array of nested trees) to an ensemble.

    ``base_score`` is the probability-space base score; the ensemble bias is
    its logit.  Missing-value directions are dropped since inputs are dense.
    """
    if not 0 < base_score < 1:
        raise FormatError("base_score must lie in (0, 1)")
    raw = _read_json(path)
    if not isinstance(raw, list):
        raise FormatError(f"{path}: expected an array of trees")
    trees = []
    dropped = False
    for t, root in enumerate(raw):
        tree, saw = _convert_xgb_tree(root, num_features, f"tree[{t}]")
        trees.append(tree)
        dropped |= saw
    if dropped:
        warnings.warn("ignoring missing-value directions in the dump", stacklevel=2)
    bias = math.log(base_score / (1 - base_score))
    return Ensemble(tuple(trees), num_features, bias)


# ---------------------------------------------------------------- datasets

def load_dataset(path, label_column: str | None = "label") -> list[Example]:
    """Read a CSV with a header; every column but ``label_column`` is a feature.

    Labels in ``{0, 1}`` are mapped to ``{-1, +1}``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if label_column is not None and label_column not in header:
            raise FormatError(f"{path}: no label column {label_column!r} in header")
        li = header.index(label_column) if label_column is not None else None
        rows, raw_labels = [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
            values = []
            for c, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise FormatError(
                        f"{path}: row {r}, column {header[c]!r}: non-numeric cell {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise FormatError(
                        f"{path}: row {r}, column {header[c]!r}: non-finite cell {cell!r}")
                if c == li:
                    if v not in (-1.0, 0.0, 1.0):
                        raise FormatError(
                            f"{path}: row {r}: label {cell!r} not in {{-1, 0, 1}}")
                    raw_labels.append(int(v))
                else:
                    values.append(v)
            rows.append(tuple(values))
    labels: list[int | None] = [None] * len(rows)
    if li is not None:
        seen = set(raw_labels)
        if 0 in seen and -1 in seen:
            raise FormatError(f"{path}: labels mix 0 and -1")
        if 0 in seen:
            log.info("%s: mapping labels {0, 1} to {-1, +1}", path)
            raw_labels = [1 if v == 1 else -1 for v in raw_labels]
        labels = raw_labels
    return [Example(v, lab) for v, lab in zip(rows, labels)]


def save_dataset(data: Sequence[Example], path, label_column: str = "label") -> None:
    """Write ``data`` as CSV with columns ``f0..f{d-1}`` and a trailing label."""
    if not data:
        raise FormatError("cannot write an empty dataset")
    d = len(data[0])
    labelled = data[0].label is not None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ([label_column] if labelled else []))
        for x in data:
            if len(x) != d or (x.label is not None) != labelled:
                raise FormatError("dataset rows differ in width or labelling")
            w.writerow([repr(v) for v in x.values] + ([x.label] if labelled else []))


# ---------------------------------------------------------------- subsets

def save_subset(report: SelectionReport, path) -> None:
    Path(path).write_text(_dumps(report.to_json()) + "\n")


def load_subset(path) -> FeatureSubset:
    obj = _read_json(path)
    if not isinstance(obj, dict) or "features" not in obj:
        raise FormatError(f"{path}: expected an object with a 'features' array")
    feats = obj["features"]
    if not isinstance(feats, list):
        raise FormatError(f"{path}: 'features' must be an array")
    out = tuple(_number(f, f"{path}.features[{i}]", integer=True) for i, f in enumerate(feats))
    fraction = obj.get("fraction", 0.0)
    return FeatureSubset(out, float(fraction), int(obj.get("rounds_used", 0)))


# ---------------------------------------------------------------- results

def _finite_or_none(v):
    return v if v is None or math.isfinite(v) else None


def _phase_to_dict(p: PhaseResult | None) -> dict | None:
    if p is None:
        return None
    return {"status": p.status, "linf": _finite_or_none(p.linf),
            "margin": _finite_or_none(p.margin), "wall_s": p.wall_s,
            "expansions": p.expansions,
            "witness": list(p.witness) if p.witness is not None else None}


def _phase_from_dict(obj: dict | None) -> PhaseResult | None:
    if obj is None:
        return None
    w = obj.get("witness")
    return PhaseResult(obj["status"], obj.get("linf"), obj.get("margin"),
                       obj.get("wall_s", 0.0), obj.get("expansions", 0),
                       tuple(w) if w is not None else None)


def record_to_dict(r: AttackRecord) -> dict:
    return {"format_version": FORMAT_VERSION, "example_id": r.example_id,
            "setting": r.setting, "used_fallback": r.used_fallback,
            "final": _phase_to_dict(r.final), "pruned": _phase_to_dict(r.pruned),
            "full": _phase_to_dict(r.full)}


def record_from_dict(obj: dict) -> AttackRecord:
    _check_version(obj, "record")
    return AttackRecord(obj["example_id"], obj["setting"], _phase_from_dict(obj["final"]),
                        _phase_from_dict(obj.get("pruned")), _phase_from_dict(obj.get("full")),
                        obj.get("used_fallback", False))


def write_records(records: Iterable[AttackRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(_dumps(record_to_dict(r)) + "\n")


def read_records(path) -> list[AttackRecord]:
    out = []
    with open(path) as fh:
        for k, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}: line {k}: bad record ({exc})") from None
    return out


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_summaries(summaries: Sequence[RunSummary], path) -> None:
    cols = RunSummary.columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["format_version"] + cols)
        for s in summaries:
            w.writerow([FORMAT_VERSION] + [_cell(getattr(s, c)) for c in cols])


def read_summaries(path) -> list[RunSummary]:
    types = {f.name: f.type for f in fields(RunSummary)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.pop("format_version", None) != str(FORMAT_VERSION):
                raise FormatError(f"{path}: unsupported format_version")
            kw = {}
            for name, cell in row.items():
                t = str(types[name])
                if cell == "" and "None" in t:
                    kw[name] = None
                elif t.startswith("str"):
                    kw[name] = cell
                elif t.startswith("int"):
                    kw[name] = int(cell)
                else:
                    kw[name] = float(cell)
            out.append(RunSummary(**kw))
    return out


def write_robustness(report: RobustnessReport, path, ids: Sequence[int] | None = None) -> None:
    ids = range(len(report.values)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "delta_star", "status", "used_full"])
        for i, v, s, u in zip(ids, report.values, report.statuses, report.used_full):
            w.writerow([i, repr(v), s, int(u)])


def write_histogram(hist, path) -> None:
    buckets = (("never", hist.never, None), ("rare", hist.rare, hist.rare_features),
               ("frequent", hist.frequent, hist.frequent_features))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "count", "features"])
        for name, count, feats in buckets:
            w.writerow([name, count, "" if feats is None else " ".join(map(str, feats))])
