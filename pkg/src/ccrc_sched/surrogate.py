"""Training and serving of the stability classifier and indicator regressors.

The classifier learns the stability label over pooled configurations (role
columns included); regressors learn one indicator per configuration, with
winsorized targets by default.  Model selection runs stratified k-fold CV
over a hyperparameter lattice; fitted models serialize to a directory and
reload bit-identically.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import dataforge
from .dataforge import Dataset
from .estimators import FAMILY_CLASSES, build_estimator

TASKS = ("classification", "regression")

_ALLOWED_PARAMS = {
    "dummy": set(),
    "linear": {"penalty", "max_iter"},
    "ridge": {"penalty", "max_iter"},
    "decision-tree": {"max_depth", "min_samples_leaf"},
    "gradient-boosted-trees": {"n_estimators", "learning_rate", "max_depth",
                               "subsample", "min_samples_leaf", "reg_lambda",
                               "max_bins"},
    "multilayer-perceptron": {"hidden_layer_sizes", "activation",
                              "learning_rate", "max_epochs", "batch_size",
                              "l2", "validation_fraction", "patience"},
}

DEFAULT_GBT_GRID = {
    "learning_rate": (0.1, 0.3),
    "max_depth": (4, 6, 8),
    "subsample": (0.8, 1.0),
}


def default_mlp_grid(n_inputs: int) -> dict:
    half, full = max(2, n_inputs // 2), max(2, n_inputs)
    return {"hidden_layer_sizes": ((half,), (full,),
                                   (half, half), (full, full))}


class ManifestError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# specs and trained models
# ---------------------------------------------------------------------------

def _freeze(value):
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    return value


@dataclass(frozen=True)
class ModelSpec:
    family: str
    task: str
    params: tuple[tuple[str, object], ...] = ()

    def __post_init__(self):
        if self.family not in FAMILY_CLASSES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        bad = [k for k, _ in self.params if k not in _ALLOWED_PARAMS[self.family]]
        if bad:
            raise ValueError(f"invalid params for {self.family}: {bad}")
        p = self.param_dict()
        if p.get("learning_rate", 1.0) <= 0:
            raise ValueError("learning_rate must be positive")
        if p.get("max_depth") is not None and "max_depth" in p \
                and p["max_depth"] < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < p.get("subsample", 1.0) <= 1.0:
            raise ValueError("subsample must be in (0, 1]")
        sizes = p.get("hidden_layer_sizes", (1,))
        if any(int(s) < 1 for s in sizes):
            raise ValueError("hidden layer sizes must be positive")

    @staticmethod
    def make(family: str, task: str, **params) -> "ModelSpec":
        items = tuple(sorted((k, _freeze(v)) for k, v in params.items()))
        return ModelSpec(family, task, items)

    def param_dict(self) -> dict:
        return {k: v for k, v in self.params}


class TrainedModel:
    """Immutable fitted model bound to an input column manifest."""

    def __init__(self, spec: ModelSpec, estimator, columns: Sequence[str],
                 seed: int, metadata: dict | None = None):
        self.spec = spec
        self._est = estimator
        self.columns = tuple(columns)
        self.seed = int(seed)
        self.metadata = dict(metadata or {})

    def _matrix(self, data) -> np.ndarray:
        if isinstance(data, Dataset):
            data = data.train_frame()
        if isinstance(data, pd.DataFrame):
            missing = [c for c in self.columns if c not in data.columns]
            if missing:
                raise ManifestError(f"rows lack manifest columns: {missing}")
            return data[list(self.columns)].to_numpy(dtype=float)
        X = np.asarray(data, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.columns):
            raise ManifestError(
                f"expected {len(self.columns)} columns, got {X.shape[1]}")
        return X

    def decision(self, data) -> np.ndarray:
        """Raw model output: class-1 score or regression value."""
        return self._est.decision(self._matrix(data))

    def predict(self, data) -> np.ndarray:
        out = self.decision(data)
        if self.spec.task == "classification":
            return (out >= 0.5).astype(float)
        return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def f_beta(predictions, labels, beta: float) -> float:
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if not set(np.unique(p)) <= {0.0, 1.0} or not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("inputs must be binary labels")
    tp = float(np.sum((p == 1) & (y == 1)))
    fp = float(np.sum((p == 1) & (y == 0)))
    fn = float(np.sum((p == 0) & (y == 1)))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    denom = beta ** 2 * precision + recall
    if denom == 0.0:
        warnings.warn("F_beta undefined (no true positives reachable); 0.0")
        return 0.0
    return (1 + beta ** 2) * precision * recall / denom


def choose_beta(stable_fraction: float) -> float:
    if not 0.0 <= stable_fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    # minority-stable data leans Recall; otherwise Precision is the risk
    return 2.0 if stable_fraction < 0.5 else 0.5


def r2_score(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(targets, dtype=float)
    if len(y) < 2:
        raise UndefinedMetricError("need at least two targets")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("zero target variance")
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


def resolve_metric(ds: Dataset, metric) -> tuple[Callable, str]:
    """Metric callable(y_true, y_pred).  Classification default is F_beta
    with beta picked from the dataset class balance."""
    if callable(metric):
        return metric, getattr(metric, "__name__", "custom")
    task = "classification" if ds.role == "D_upsilon" else "regression"
    if metric in (None, "auto"):
        metric = "f_beta" if task == "classification" else "r2"
    if metric == "r2":
        return (lambda y, p: r2_score(p, y)), "r2"
    if metric == "f_beta":
        beta = choose_beta(float(np.mean(ds.targets())))
        return (lambda y, p: f_beta(p, y, beta)), f"f_beta({beta})"
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CVResult:
    spec: ModelSpec
    fold_scores: tuple[float, ...]
    mean: float
    std: float
    metric: str


def _fold_assignment(y: np.ndarray, k: int, seed: int,
                     stratify: bool) -> list[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = len(y)
    folds = [[] for _ in range(k)]
    if stratify:
        # shared cursor keeps total fold sizes within 1 of each other while
        # each class still spreads round-robin
        cursor = 0
        for cls in np.unique(y):
            for j in rng.permutation(np.flatnonzero(y == cls)):
                folds[cursor % k].append(j)
                cursor += 1
    else:
        for i, j in enumerate(rng.permutation(n)):
            folds[i % k].append(j)
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def kfold_cv(spec: ModelSpec, ds: Dataset, k: int = 5, metric=None,
             seed: int = 0) -> CVResult:
    if k < 2:
        raise ValueError("k must be >= 2")
    X = ds.features()
    y = ds.targets()
    if len(y) < k:
        raise ValueError("fewer rows than folds")
    metric_fn, metric_name = resolve_metric(ds, metric)
    stratify = spec.task == "classification"
    if stratify:
        counts = [int(np.sum(y == c)) for c in np.unique(y)]
        if min(counts) < k:
            warnings.warn(
                f"class with {min(counts)} rows cannot fill {k} folds; "
                f"refolded with k={min(counts)}")
            k = min(counts)
            if k < 2:
                raise ValueError("a class has fewer than two rows")
    folds = _fold_assignment(y, k, seed, stratify)
    scores = []
    for f, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(y)), test_idx)
        est = build_estimator(spec.family, spec.task, spec.param_dict())
        rng = np.random.default_rng(np.random.SeedSequence((seed, f)))
        est.fit(X[train_idx], y[train_idx], rng)
        out = est.decision(X[test_idx])
        pred = (out >= 0.5).astype(float) if spec.task == "classification" else out
        scores.append(float(metric_fn(y[test_idx], pred)))
    arr = np.array(scores)
    return CVResult(spec, tuple(scores), float(arr.mean()), float(arr.std()),
                    metric_name)


def compare_models(specs: Sequence[ModelSpec], ds: Dataset, k: int = 5,
                   metric=None, seed: int = 0) -> list[CVResult]:
    if len(specs) < 2:
        raise ValueError("need at least two specs to compare")
    if not any(s.family == "dummy" for s in specs):
        raise ValueError("comparison must include a dummy baseline")
    results = [kfold_cv(s, ds, k=k, metric=metric, seed=seed) for s in specs]
    return sorted(results, key=lambda r: (-r.mean, _spec_size(r.spec)))


def _spec_size(spec: ModelSpec) -> tuple:
    p = spec.param_dict()
    if spec.family == "gradient-boosted-trees":
        size = (p.get("n_estimators", 200), p.get("max_depth", 4))
    elif spec.family == "multilayer-perceptron":
        sizes = p.get("hidden_layer_sizes", (32,))
        size = (int(sum(sizes)), len(sizes))
    elif spec.family == "decision-tree":
        size = (p.get("max_depth") or 10 ** 6,)
    else:
        size = (0,)
    return (*size, p.get("learning_rate", 0.0), repr(spec.params))


# ---------------------------------------------------------------------------
# feature importance and tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImportanceRow:
    column: str
    importance: float
    std: float


def permutation_importance(model: TrainedModel, ds: Dataset, metric=None,
                           repeats: int = 5, seed: int = 0
                           ) -> list[ImportanceRow]:
    frame = ds.train_frame().reset_index(drop=True)
    metric_fn, _ = resolve_metric(ds, metric)
    y = frame[list(ds.target_cols)].to_numpy(dtype=float)[:, 0]
    base = metric_fn(y, model.predict(frame))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    rows = []
    for col in model.columns:
        drops = []
        for _ in range(repeats):
            shuffled = frame.copy()
            shuffled[col] = rng.permutation(shuffled[col].to_numpy())
            drops.append(base - metric_fn(y, model.predict(shuffled)))
        drops = np.array(drops)
        rows.append(ImportanceRow(col, float(drops.mean()), float(drops.std())))
    return sorted(rows, key=lambda r: -r.importance)


def grid_search(family: str, grid: Mapping[str, Sequence], ds: Dataset,
                k: int = 5, metric=None, seed: int = 0,
                base_params: Mapping | None = None
                ) -> tuple[ModelSpec, list[CVResult]]:
    if not grid:
        raise ValueError("empty hyperparameter grid")
    task = "classification" if ds.role == "D_upsilon" else "regression"
    keys = sorted(grid)
    table = []
    for combo in itertools.product(*(grid[k_] for k_ in keys)):
        params = {**(base_params or {}), **dict(zip(keys, combo))}
        spec = ModelSpec.make(family, task, **params)
        table.append(kfold_cv(spec, ds, k=k, metric=metric, seed=seed))
    ranked = sorted(table, key=lambda r: (-r.mean, _spec_size(r.spec)))
    return ranked[0].spec, table


# ---------------------------------------------------------------------------
# training entry points
# ---------------------------------------------------------------------------

def fit_model(spec: ModelSpec, X: np.ndarray, y: np.ndarray,
              columns: Sequence[str], seed: int = 0,
              metadata: dict | None = None) -> TrainedModel:
    est = build_estimator(spec.family, spec.task, spec.param_dict())
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    est.fit(np.asarray(X, dtype=float), np.asarray(y, dtype=float), rng)
    return TrainedModel(spec, est, columns, seed, metadata)


def train_classifier(ds: Dataset, spec: ModelSpec,
                     seed: int = 0) -> TrainedModel:
    if spec.task != "classification" or ds.role != "D_upsilon":
        raise ValueError("classifier requires a stability dataset and task")
    if not ds.meta.get("categorical_cols"):
        raise ValueError("stability dataset must carry role columns")
    y = ds.targets()
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("stability target must be binary")
    balance = float(np.mean(y))
    model = fit_model(spec, ds.features(), y, ds.feature_cols, seed,
                      metadata={"class_balance": balance,
                                "beta": choose_beta(balance),
                                "rows": int(len(y))})
    return model


def predict_stability(model: TrainedModel, rows) -> tuple[np.ndarray, np.ndarray]:
    """(labels, class-1 scores) for the given rows."""
    scores = model.decision(rows)
    return (scores >= 0.5).astype(float), scores


def train_regressor(ds: Dataset, spec: ModelSpec, seed: int = 0,
                    winsor_percentile: float | None = 0.95) -> TrainedModel:
    if spec.task != "regression" or ds.role == "D_upsilon":
        raise ValueError("regressor requires an indicator dataset and task")
    if any(c.startswith("ccr_") for c in ds.feature_cols):
        raise ValueError("indicator datasets are per-configuration; "
                         "role columns must not appear")
    meta = {"rows": int(len(ds.train_frame())), "indicator": ds.target_cols[0],
            "ccrc_id": ds.ccrc_id}
    if winsor_percentile is not None:
        ds = dataforge.winsorize_targets(ds, winsor_percentile)
        meta["winsor_bounds"] = ds.meta["winsor_bounds"]
        meta["winsor_percentile"] = winsor_percentile
    return fit_model(spec, ds.features(), ds.targets(), ds.feature_cols,
                     seed, metadata=meta)


def predict_indicator(model: TrainedModel, rows) -> np.ndarray:
    return model.predict(rows)


# ---------------------------------------------------------------------------
# model store
# ---------------------------------------------------------------------------

_STORE_VERSION = 1


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def save_model(model: TrainedModel, dirpath: str | Path) -> Path:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    spec = {"family": model.spec.family, "task": model.spec.task,
            "params": _jsonable(model.spec.param_dict()),
            "format": _STORE_VERSION}
    (dirpath / "spec.json").write_text(json.dumps(spec, indent=2, sort_keys=True))
    arrays = model._est.param_arrays()
    layout = []
    blob = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = "<i8" if arr.dtype.kind in "iu" else "<f8"
        raw = arr.astype(dtype).tobytes()
        layout.append({"name": name, "dtype": dtype,
                       "shape": list(arr.shape), "offset": len(blob),
                       "nbytes": len(raw)})
        blob.extend(raw)
    (dirpath / "params.bin").write_bytes(bytes(blob))
    manifest = {"format": _STORE_VERSION, "columns": list(model.columns),
                "seed": model.seed, "metadata": _jsonable(model.metadata),
                "arrays": layout}
    (dirpath / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    return dirpath


def load_model(dirpath: str | Path) -> TrainedModel:
    dirpath = Path(dirpath)
    spec_doc = json.loads((dirpath / "spec.json").read_text())
    manifest = json.loads((dirpath / "manifest.json").read_text())
    if spec_doc.get("format") != _STORE_VERSION:
        raise ValueError("unsupported model store format")
    spec = ModelSpec.make(spec_doc["family"], spec_doc["task"],
                          **spec_doc["params"])
    blob = (dirpath / "params.bin").read_bytes()
    arrays = {}
    for entry in manifest["arrays"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    est = build_estimator(spec.family, spec.task, spec.param_dict())
    est.load_param_arrays(arrays)
    return TrainedModel(spec, est, manifest["columns"], manifest["seed"],
                        manifest["metadata"])
