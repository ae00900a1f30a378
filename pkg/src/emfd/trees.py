"""Additive regression-tree ensemble shared by the learner and the explainer.

Trees are stored as flat parallel arrays (feature, threshold, left, right,
value, cover) with node 0 as the root; leaves have feature -1. Each tree
carries a scale multiplier applied to its leaf values at prediction time
(the boosting learning rate, or 1/n_trees for bagged forests), so

    prediction(x) = base_score + sum over trees of scale * leaf(x).

Routing rule: go left when feature value < threshold, right otherwise
(values exactly at the threshold go right).

The JSON serialization nests nodes as {feature, threshold, cover, left,
right} / {value, cover} objects under a versioned envelope and round-trips
floats exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import ModelError, SchemaError

FORMAT_VERSION = 1

LEAF = -1


@dataclass
class Tree:
    feature: np.ndarray    # int32; LEAF for leaves
    threshold: np.ndarray  # float64; nan for leaves
    left: np.ndarray       # int32; LEAF for leaves
    right: np.ndarray      # int32
    value: np.ndarray      # float64; leaf outputs (0.0 on internal nodes)
    cover: np.ndarray      # float64; training rows reaching each node
    scale: float = 1.0

    def n_nodes(self) -> int:
        return len(self.feature)

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes(), dtype=np.int64)
        deepest = 0
        for i in range(self.n_nodes()):
            deepest = max(deepest, int(depth[i]))
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return deepest

    def expected_value(self) -> float:
        """Cover-weighted mean output (the traversal expectation of the empty set)."""
        total = 0.0
        root_cover = float(self.cover[0])
        for i in range(self.n_nodes()):
            if self.feature[i] == LEAF:
                total += float(self.cover[i]) / root_cover * float(self.value[i])
        return total


@dataclass
class TreeEnsemble:
    trees: list[Tree]
    base_score: float
    n_features: int
    shrinkage: float = 1.0
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.feature_names is not None and len(self.feature_names) != self.n_features:
            raise ValueError("feature_names length disagrees with n_features")


def validate_tree(tree: Tree, n_features: int) -> None:
    """Check structural invariants: child links, cover additivity, positive covers."""
    n = tree.n_nodes()
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    while stack:
        i = stack.pop()
        if seen[i]:
            raise ModelError(f"node {i} reachable twice (not a tree)")
        seen[i] = True
        if tree.feature[i] == LEAF:
            continue
        if not 0 <= tree.feature[i] < n_features:
            raise ModelError(f"node {i} splits on unknown feature {tree.feature[i]}")
        lo, hi = int(tree.left[i]), int(tree.right[i])
        if not (0 <= lo < n and 0 <= hi < n):
            raise ModelError(f"node {i} has dangling child link")
        if tree.cover[i] <= 0:
            raise ModelError(f"internal node {i} has nonpositive cover")
        if not math.isclose(tree.cover[i], tree.cover[lo] + tree.cover[hi],
                            rel_tol=1e-9, abs_tol=1e-9):
            raise ModelError(f"node {i}: cover(parent) != cover(left) + cover(right)")
        stack.append(lo)
        stack.append(hi)
    if not seen.all():
        raise ModelError("orphan nodes present")


def validate_ensemble(model: TreeEnsemble) -> None:
    for tree in model.trees:
        validate_tree(tree, model.n_features)


def tree_leaf(tree: Tree, row: np.ndarray) -> int:
    """Index of the leaf reached by a row."""
    i = 0
    while tree.feature[i] != LEAF:
        if row[tree.feature[i]] < tree.threshold[i]:
            i = int(tree.left[i])
        else:
            i = int(tree.right[i])
    return i


def predict(model: TreeEnsemble, row: Sequence[float]) -> float:
    """Single-row prediction; exact (order-independent) tree summation."""
    x = np.asarray(row, dtype=float)
    if x.shape != (model.n_features,):
        raise ValueError(f"row length {x.shape} != n_features {model.n_features}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature value")
    terms = [tree.scale * float(tree.value[tree_leaf(tree, x)]) for tree in model.trees]
    return model.base_score + math.fsum(terms)


def predict_many(model: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """Vectorized prediction over an (N, F) matrix, accumulated in tree order."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected (N, {model.n_features}) matrix, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature value")
    out = np.full(X.shape[0], model.base_score, dtype=float)
    for tree in model.trees:
        node = np.zeros(X.shape[0], dtype=np.int64)
        # all rows start at the root; iterate until every row sits on a leaf
        while True:
            feat = tree.feature[node]
            live = feat != LEAF
            if not live.any():
                break
            rows = np.nonzero(live)[0]
            f = feat[rows]
            go_left = X[rows, f] < tree.threshold[node[rows]]
            node[rows] = np.where(go_left, tree.left[node[rows]], tree.right[node[rows]])
        out += tree.scale * tree.value[node]
    return out


def _node_to_dict(tree: Tree, i: int) -> dict:
    if tree.feature[i] == LEAF:
        return {"value": float(tree.value[i]), "cover": float(tree.cover[i])}
    return {
        "feature": int(tree.feature[i]),
        "threshold": float(tree.threshold[i]),
        "cover": float(tree.cover[i]),
        "left": _node_to_dict(tree, int(tree.left[i])),
        "right": _node_to_dict(tree, int(tree.right[i])),
    }


def _dict_to_nodes(node: dict, arrays: dict[str, list]) -> int:
    idx = len(arrays["feature"])
    for key in arrays:
        arrays[key].append(0)
    if "value" in node:
        arrays["feature"][idx] = LEAF
        arrays["threshold"][idx] = float("nan")
        arrays["left"][idx] = LEAF
        arrays["right"][idx] = LEAF
        arrays["value"][idx] = float(node["value"])
        arrays["cover"][idx] = float(node["cover"])
    else:
        arrays["feature"][idx] = int(node["feature"])
        arrays["threshold"][idx] = float(node["threshold"])
        arrays["value"][idx] = 0.0
        arrays["cover"][idx] = float(node["cover"])
        arrays["left"][idx] = _dict_to_nodes(node["left"], arrays)
        arrays["right"][idx] = _dict_to_nodes(node["right"], arrays)
    return idx


def to_json_dict(model: TreeEnsemble) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "base_score": float(model.base_score),
        "shrinkage": float(model.shrinkage),
        "n_features": model.n_features,
        "trees": [{"scale": float(t.scale), "root": _node_to_dict(t, 0)} for t in model.trees],
    }
    if model.feature_names is not None:
        doc["feature_names"] = list(model.feature_names)
    return doc


def from_json_dict(doc: dict) -> TreeEnsemble:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported model format_version: {version!r}")
    trees = []
    for entry in doc["trees"]:
        arrays: dict[str, list] = {k: [] for k in
                                   ("feature", "threshold", "left", "right", "value", "cover")}
        _dict_to_nodes(entry["root"], arrays)
        trees.append(Tree(
            feature=np.asarray(arrays["feature"], dtype=np.int32),
            threshold=np.asarray(arrays["threshold"], dtype=np.float64),
            left=np.asarray(arrays["left"], dtype=np.int32),
            right=np.asarray(arrays["right"], dtype=np.int32),
            value=np.asarray(arrays["value"], dtype=np.float64),
            cover=np.asarray(arrays["cover"], dtype=np.float64),
            scale=float(entry.get("scale", 1.0)),
        ))
    names = doc.get("feature_names")
    return TreeEnsemble(
        trees=trees,
        base_score=float(doc["base_score"]),
        n_features=int(doc["n_features"]),
        shrinkage=float(doc.get("shrinkage", 1.0)),
        feature_names=tuple(names) if names is not None else None,
    )


def save_model(path: str | os.PathLike, model: TreeEnsemble,
               provenance: dict | None = None) -> None:
    doc = to_json_dict(model)
    if provenance:
        doc["provenance"] = provenance
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_model(path: str | os.PathLike) -> TreeEnsemble:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "trees" not in doc:
        raise SchemaError("model file lacks a trees section")
    return from_json_dict(doc)


def build_tree(nodes: Iterable[tuple], scale: float = 1.0) -> Tree:
    """Assemble a Tree from (feature, threshold, left, right, value, cover) tuples.

    Convenience for tests and hand-built fixtures; pass feature=-1 (LEAF)
    with left/right=-1 for leaves.
    """
    rows = list(nodes)
    return Tree(
        feature=np.asarray([r[0] for r in rows], dtype=np.int32),
        threshold=np.asarray([r[1] for r in rows], dtype=np.float64),
        left=np.asarray([r[2] for r in rows], dtype=np.int32),
        right=np.asarray([r[3] for r in rows], dtype=np.int32),
        value=np.asarray([r[4] for r in rows], dtype=np.float64),
        cover=np.asarray([r[5] for r in rows], dtype=np.float64),
        scale=scale,
    )
