"""Supervised dataset assembly, gradient-boosted / bagged tree training, metrics.

The boosted trainer is second-order with unit hessians (squared error):
each round fits one tree to gradients g_i = prediction_i - y_i, leaf values
are -sum(g) / (count + l2), and splits are chosen greedily over histogram
bin boundaries (equal-frequency bins built once from the training set).
Tie-broken equal gains resolve to the lowest feature index, then the lowest
threshold, so training is deterministic.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import fmt_float, read_csv_dicts, write_csv
from .errors import ModelError, SchemaError
from .emissions import EmissionState
from .traffic import NetworkState
from .trees import Tree, TreeEnsemble

DENSITY_FEATURE = "density"
FLEET_FEATURE = "vehtype_L1"


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names with the density / fleet-indicator positions."""

    names: tuple[str, ...]
    density_index: int
    fleet_index: int | None = None

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if not 0 <= self.density_index < len(self.names):
            raise ValueError("density feature missing from schema")
        if self.fleet_index is not None and not 0 <= self.fleet_index < len(self.names):
            raise ValueError("fleet index out of range")

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "FeatureSchema":
        names = tuple(names)
        if DENSITY_FEATURE not in names:
            raise SchemaError(f"schema lacks the {DENSITY_FEATURE!r} feature")
        fleet = names.index(FLEET_FEATURE) if FLEET_FEATURE in names else None
        return cls(names=names, density_index=names.index(DENSITY_FEATURE), fleet_index=fleet)

    @property
    def location_factor_names(self) -> tuple[str, ...]:
        skip = {self.density_index, self.fleet_index}
        return tuple(n for i, n in enumerate(self.names) if i not in skip)


@dataclass
class Dataset:
    X: np.ndarray  # (N, F) float64
    y: np.ndarray  # (N,) float64, emission rate in g/veh/mile
    schema: FeatureSchema

    def __post_init__(self) -> None:
        self.X = np.ascontiguousarray(self.X, dtype=float)
        self.y = np.ascontiguousarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"inconsistent dataset shapes {self.X.shape} / {self.y.shape}")
        if self.X.shape[1] != len(self.schema.names):
            raise ValueError("feature matrix width disagrees with schema")
        if self.X.shape[0] < 1:
            raise ValueError("dataset must have at least one row")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class GbtParams:
    n_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    l2_penalty: float = 1.0          # lambda on leaf weights
    gain_threshold: float = 0.0      # gamma subtracted from every split gain
    min_child_cover: int = 5
    histogram_bins: int = 64
    seed: int = 0                    # reserved for subsampling variants

    def __post_init__(self) -> None:
        if self.n_trees < 1 or self.max_depth < 1:
            raise ValueError("n_trees and max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.l2_penalty < 0 or self.gain_threshold < 0:
            raise ValueError("l2_penalty and gain_threshold must be >= 0")
        if self.histogram_bins < 2:
            raise ValueError("histogram_bins must be >= 2")


@dataclass(frozen=True)
class Metrics:
    r2: float
    mae: float   # g/veh/mile
    rmse: float  # g/veh/mile
    mape: float  # percent


def assemble_dataset(
    network_states: Sequence[NetworkState],
    emission_states_by_fleet: Mapping[str, Sequence[EmissionState]],
    factors: Mapping[str, Mapping[str, float]],
    fleet_codes: Mapping[str, float],
) -> Dataset:
    """One row per (tract, bin, fleet): density + location factors + fleet code.

    ``factors`` maps tract_id to its location-factor values; every tract in
    the network states must provide the full factor-name set.
    """
    if set(emission_states_by_fleet) != set(fleet_codes):
        raise SchemaError("fleet labels disagree between emission states and fleet codes")
    factor_names = sorted({name for vals in factors.values() for name in vals})
    tract_ids = sorted({ns.tract_id for ns in network_states})
    missing = [t for t in tract_ids
               if t not in factors or any(n not in factors[t] for n in factor_names)]
    if missing:
        raise SchemaError(f"missing location factors for tracts: {', '.join(missing)}")
    schema = FeatureSchema.from_names(
        (DENSITY_FEATURE, *factor_names, FLEET_FEATURE))

    ordered = sorted(network_states, key=lambda s: (s.tract_id, s.bin_start))
    rows = []
    targets = []
    for label in sorted(fleet_codes):
        code = float(fleet_codes[label])
        by_key = {(e.tract_id, e.bin_start): e for e in emission_states_by_fleet[label]}
        for ns in ordered:
            es = by_key.get((ns.tract_id, ns.bin_start))
            if es is None:
                raise SchemaError(
                    f"fleet {label!r}: no emission state for {(ns.tract_id, str(ns.bin_start))}")
            fac = factors[ns.tract_id]
            rows.append([ns.mean_density, *(fac[n] for n in factor_names), code])
            targets.append(es.rate)
    X = np.asarray(rows, dtype=float)
    y = np.asarray(targets, dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise SchemaError("assembled dataset contains non-finite values")
    return Dataset(X=X, y=y, schema=schema)


def split_sizes(n: int, train_fraction: float) -> tuple[int, int]:
    """Partition sizes (ceil(n*f), remainder), clamped to leave both sides nonempty."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    t = n * train_fraction
    n_train = round(t) if abs(t - round(t)) < 1e-9 else math.ceil(t)
    n_train = min(max(n_train, 1), n - 1)
    return n_train, n - n_train


def split_train_test(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Uniform random row partition, deterministic for a fixed seed."""
    n = len(ds)
    if n < 2:
        raise ValueError("need at least 2 rows to split")
    n_train, _ = split_sizes(n, train_fraction)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return (Dataset(ds.X[train_idx], ds.y[train_idx], ds.schema),
            Dataset(ds.X[test_idx], ds.y[test_idx], ds.schema))


# --- histogram split machinery -------------------------------------------------

def _candidate_thresholds(col: np.ndarray, bins: int) -> np.ndarray:
    """Equal-frequency candidate thresholds drawn from the data values.

    A split at threshold t sends rows with value < t left, so the column
    minimum is never a useful threshold and is dropped.
    """
    uniq = np.unique(col)
    if uniq.size <= bins:
        return uniq[1:]
    qs = np.quantile(col, np.arange(1, bins) / bins, method="higher")
    qs = np.unique(qs)
    return qs[qs > uniq[0]]


def _bin_columns(X: np.ndarray, bins: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    thresholds = []
    binned = []
    for f in range(X.shape[1]):
        t = _candidate_thresholds(X[:, f], bins)
        thresholds.append(t)
        # bin index = number of thresholds <= x; split at t[k] <=> bins 0..k go left
        binned.append(np.searchsorted(t, X[:, f], side="right").astype(np.int64))
    return thresholds, binned


def _grow_tree(binned: list[np.ndarray], thresholds: list[np.ndarray],
               g: np.ndarray, rows: np.ndarray, max_depth: int | None,
               l2: float, gain_threshold: float, min_child_cover: int,
               ) -> tuple[Tree, np.ndarray]:
    """Greedy histogram tree on gradients; returns the tree and per-row leaf ids."""
    n_features = len(binned)
    min_cc = max(min_child_cover, 1)

    feature = [0]
    threshold = [math.nan]
    left = [-1]
    right = [-1]
    value = [0.0]
    cover = [0.0]
    leaf_of = np.zeros(len(rows), dtype=np.int64)

    def make_leaf(node: int, idx: np.ndarray, G: float, H: float) -> None:
        feature[node] = -1
        value[node] = -G / (H + l2)
        cover[node] = float(len(idx))
        leaf_of[idx_positions[node]] = node

    # idx_positions maps node -> positions (into rows) currently assigned to it
    idx_positions: dict[int, np.ndarray] = {0: np.arange(len(rows))}
    active = [0]
    depth = 0
    while active:
        next_active = []
        for node in active:
            pos = idx_positions[node]
            idx = rows[pos]
            g_node = g[idx]
            G = float(g_node.sum())
            H = float(len(idx))
            cover[node] = H
            at_depth_limit = max_depth is not None and depth >= max_depth
            if at_depth_limit or len(idx) < 2 * min_cc:
                make_leaf(node, idx, G, H)
                continue
            parent_term = G * G / (H + l2)
            best_gain = 0.0
            best_feature = -1
            best_k = -1
            for f in range(n_features):
                t = thresholds[f]
                if t.size == 0:
                    continue
                b = binned[f][idx]
                nb = t.size + 1
                hg = np.bincount(b, weights=g_node, minlength=nb)
                hn = np.bincount(b, minlength=nb)
                GL = np.cumsum(hg)[:-1]
                NL = np.cumsum(hn)[:-1]
                GR = G - GL
                NR = H - NL
                valid = (NL >= min_cc) & (NR >= min_cc)
                if not valid.any():
                    continue
                gains = np.full(t.size, -np.inf)
                gains[valid] = 0.5 * (GL[valid] ** 2 / (NL[valid] + l2)
                                      + GR[valid] ** 2 / (NR[valid] + l2)
                                      - parent_term) - gain_threshold
                k = int(np.argmax(gains))  # first max -> lowest threshold on ties
                if gains[k] > best_gain:
                    best_gain = float(gains[k])
                    best_feature = f
                    best_k = k
            if best_feature < 0:
                make_leaf(node, idx, G, H)
                continue
            go_left = binned[best_feature][idx] <= best_k
            lid = len(feature)
            rid = lid + 1
            for _ in range(2):
                feature.append(0)
                threshold.append(math.nan)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
                cover.append(0.0)
            feature[node] = best_feature
            threshold[node] = float(thresholds[best_feature][best_k])
            left[node] = lid
            right[node] = rid
            idx_positions[lid] = pos[go_left]
            idx_positions[rid] = pos[~go_left]
            del idx_positions[node]
            next_active.extend((lid, rid))
        active = next_active
        depth += 1

    tree = Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64),
        cover=np.asarray(cover, dtype=np.float64),
    )
    return tree, leaf_of


def train_gbt(train: Dataset, params: GbtParams = GbtParams()) -> TreeEnsemble:
    """Second-order boosted trees with unit hessians on squared error."""
    n = len(train)
    if n < 2:
        raise ValueError("train_gbt needs at least 2 rows")
    thresholds, binned = _bin_columns(train.X, params.histogram_bins)
    base = float(np.mean(train.y))
    preds = np.full(n, base)
    all_rows = np.arange(n)
    trees = []
    for _ in range(params.n_trees):
        g = preds - train.y
        tree, leaf_of = _grow_tree(binned, thresholds, g, all_rows,
                                   params.max_depth, params.l2_penalty,
                                   params.gain_threshold, params.min_child_cover)
        tree.scale = params.learning_rate
        preds += params.learning_rate * tree.value[leaf_of]
        trees.append(tree)
    return TreeEnsemble(trees=trees, base_score=base, n_features=train.X.shape[1],
                        shrinkage=params.learning_rate,
                        feature_names=train.schema.names)


def train_forest(train: Dataset, n_trees: int = 100, max_depth: int | None = None,
                 rows_per_tree: float = 1.0, seed: int = 0,
                 histogram_bins: int = 64) -> TreeEnsemble:
    """Bagged variance-reducing trees; prediction is the mean of tree outputs.

    Each tree sees round(rows_per_tree * N) rows drawn without replacement
    (the full sample when rows_per_tree = 1), encoded with base_score 0 and
    per-tree scale 1/n_trees.
    """
    n = len(train)
    if n < 2:
        raise ValueError("train_forest needs at least 2 rows")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if not 0 < rows_per_tree <= 1:
        raise ValueError("rows_per_tree must lie in (0, 1]")
    thresholds, binned = _bin_columns(train.X, histogram_bins)
    g = -train.y  # leaf value -sum(g)/count is then the leaf mean of y
    rng = np.random.default_rng(seed)
    sample_size = max(1, round(rows_per_tree * n))
    trees = []
    for _ in range(n_trees):
        if sample_size >= n:
            rows = np.arange(n)
        else:
            rows = np.sort(rng.choice(n, size=sample_size, replace=False))
        tree, _ = _grow_tree(binned, thresholds, g, rows, max_depth,
                             0.0, 0.0, 1)
        tree.scale = 1.0 / n_trees
        trees.append(tree)
    return TreeEnsemble(trees=trees, base_score=0.0, n_features=train.X.shape[1],
                        shrinkage=1.0, feature_names=train.schema.names)


def train_baseline(train: Dataset) -> TreeEnsemble:
    """Constant-mean model in the shared ensemble representation."""
    return TreeEnsemble(trees=[], base_score=float(np.mean(train.y)),
                        n_features=train.X.shape[1],
                        feature_names=train.schema.names)


def evaluate(y: np.ndarray, yhat: np.ndarray, mape_floor: float = 1.0) -> Metrics:
    """R^2, MAE, RMSE, and MAPE (restricted to rows with |y| >= mape_floor)."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if y.size < 2:
        raise ValueError("need at least 2 rows to evaluate")
    err = y - yhat
    ss_res = float(np.sum(err ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise ModelError("R^2 undefined: zero target variance")
    mask = np.abs(y) >= mape_floor
    if not mask.any():
        raise ModelError(f"MAPE undefined: all targets below floor {mape_floor}")
    return Metrics(
        r2=1.0 - ss_res / ss_tot,
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mape=100.0 * float(np.mean(np.abs(err[mask]) / np.abs(y[mask]))),
    )


def read_predictions(source: str | os.PathLike | Iterable[str]) -> np.ndarray:
    """Read an external prediction file (CSV with a ``prediction`` column)."""
    _, rows = read_csv_dicts(source, required=("prediction",))
    out = []
    for lineno, row in rows:
        try:
            out.append(float(row["prediction"]))
        except ValueError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc
    return np.asarray(out, dtype=float)


def evaluate_external(predictions_file: str | os.PathLike | Iterable[str],
                      y_test: np.ndarray, mape_floor: float = 1.0) -> Metrics:
    """Score a row-aligned external prediction file against exported test targets."""
    preds = read_predictions(predictions_file)
    y_test = np.asarray(y_test, dtype=float)
    if preds.shape[0] != y_test.shape[0]:
        raise SchemaError(
            f"prediction rows ({preds.shape[0]}) do not match test rows ({y_test.shape[0]})")
    return evaluate(y_test, preds, mape_floor)


def write_dataset(path: str | os.PathLike, ds: Dataset,
                  provenance: str | None = None) -> None:
    header = list(ds.schema.names) + ["target"]
    rows = ([*(fmt_float(v) for v in ds.X[i])] + [fmt_float(ds.y[i])]
            for i in range(len(ds)))
    write_csv(path, header, rows, provenance)


def read_dataset(source: str | os.PathLike | Iterable[str]) -> Dataset:
    header, rows = read_csv_dicts(source)
    if "target" not in header:
        raise SchemaError("dataset lacks a target column")
    names = [c for c in header if c != "target"]
    if not rows:
        raise SchemaError("dataset has no rows")
    try:
        X = np.asarray([[float(row[c]) for c in names] for _, row in rows])
        y = np.asarray([float(row["target"]) for _, row in rows])
    except ValueError as exc:
        raise SchemaError(f"dataset has non-numeric values: {exc}") from exc
    try:
        return Dataset(X=X, y=y, schema=FeatureSchema.from_names(names))
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc
