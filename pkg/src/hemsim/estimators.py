"""Residual estimators: per-zone regression models of the one-step model error.

Two families share the same raw feature set (ambient temperature with two
lags, total electrical demand, time of day, day of year):

* a linear model fitted by least squares on cyclically transformed time
  features, and
* gradient-boosted regression trees built from scratch with exact greedy
  splits, which consume the raw time features directly.

A bundle holds nine homogeneous zone models and round-trips through a
versioned JSON file so trained estimators can be reused across scenarios.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

N_HIST = 2
N_ZONES = 9

FEATURE_COLUMNS = ("theta_air", "theta_air_lag1", "theta_air_lag2",
                   "p_dem", "tod", "doy")

# design-matrix column order of the linear model
LINEAR_COLUMNS = ("p_dem", "theta_air", "theta_air_lag1", "theta_air_lag2",
                  "sin_tod", "cos_tod", "sin_doy", "cos_doy", "intercept")

BUNDLE_SCHEMA_VERSION = 1


def cyclic_transform(tod, doy):
    """Map clock features onto the unit circle so midnight/New Year wrap.

    Returns (sin_tod, cos_tod, sin_doy, cos_doy); works elementwise on
    arrays.
    """
    tod = np.asarray(tod, dtype=float)
    doy = np.asarray(doy, dtype=float)
    if np.any(tod < 0) or np.any(tod >= 24):
        raise ValueError("time of day must lie in [0, 24)")
    if np.any(doy < 1) or np.any(doy > 365):
        raise ValueError("day of year must lie in [1, 365]")
    ang_t = 2 * np.pi * tod / 24.0
    ang_d = 2 * np.pi * doy / 365.0
    return np.sin(ang_t), np.cos(ang_t), np.sin(ang_d), np.cos(ang_d)


@dataclass(frozen=True)
class FeatureVector:
    """One row of estimator inputs at a control step."""

    theta_air: float
    theta_air_lags: tuple[float, ...]
    p_dem: float
    tod: float
    doy: int

    def __post_init__(self):
        if len(self.theta_air_lags) != N_HIST:
            raise ValueError(f"expected {N_HIST} ambient-temperature lags")
        if not (0.0 <= self.tod < 24.0):
            raise ValueError("time of day must lie in [0, 24)")
        if not (1 <= self.doy <= 365):
            raise ValueError("day of year must lie in [1, 365]")

    def as_row(self) -> np.ndarray:
        return np.array([self.theta_air, *self.theta_air_lags,
                         self.p_dem, self.tod, float(self.doy)])


def feature_matrix(samples) -> np.ndarray:
    """Stack feature vectors (or pass a raw (n, 6) array through)."""
    if isinstance(samples, np.ndarray):
        x = np.asarray(samples, dtype=float)
    else:
        x = np.array([s.as_row() for s in samples])
    if x.ndim != 2 or x.shape[1] != len(FEATURE_COLUMNS):
        raise ValueError(f"feature matrix must have {len(FEATURE_COLUMNS)} columns")
    return x


def _linear_design(x: np.ndarray) -> np.ndarray:
    x = feature_matrix(x)
    sin_t, cos_t, sin_d, cos_d = cyclic_transform(x[:, 4], x[:, 5])
    return np.column_stack([
        x[:, 3], x[:, 0], x[:, 1], x[:, 2],
        sin_t, cos_t, sin_d, cos_d, np.ones(len(x)),
    ])


@dataclass(frozen=True)
class LinearZoneModel:
    """Least-squares residual model for one zone (9 coefficients)."""

    alpha: float                     # demand
    beta: tuple[float, float, float]  # ambient temperature, now + 2 lags
    gamma: tuple[float, float]        # sin/cos time of day
    delta: tuple[float, float]        # sin/cos day of year
    kappa: float                      # intercept

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.alpha, *self.beta, *self.gamma, *self.delta,
                         self.kappa])

    def predict(self, x) -> np.ndarray:
        return _linear_design(x) @ self.coefficients

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": list(self.beta),
                "gamma": list(self.gamma), "delta": list(self.delta),
                "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearZoneModel":
        return cls(alpha=float(d["alpha"]), beta=tuple(d["beta"]),
                   gamma=tuple(d["gamma"]), delta=tuple(d["delta"]),
                   kappa=float(d["kappa"]))

    @classmethod
    def from_coefficients(cls, c) -> "LinearZoneModel":
        c = np.asarray(c, dtype=float)
        return cls(alpha=float(c[0]), beta=tuple(c[1:4]),
                   gamma=tuple(c[4:6]), delta=tuple(c[6:8]), kappa=float(c[8]))


def _collinear_columns(design: np.ndarray) -> list[str]:
    """Name columns that do not increase the design rank (greedy scan)."""
    bad = []
    rank = 0
    for j in range(design.shape[1]):
        r = np.linalg.matrix_rank(design[:, : j + 1])
        if r == rank:
            bad.append(LINEAR_COLUMNS[j])
        rank = r
    return bad


def fit_linear(x, y, zone: Optional[int] = None) -> LinearZoneModel:
    """Ordinary least squares on the transformed design; deterministic."""
    design = _linear_design(x)
    y = np.asarray(y, dtype=float)
    if len(design) < design.shape[1]:
        raise ValueError("need at least 9 samples to fit the linear model")
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        names = ", ".join(_collinear_columns(design))
        where = f" (zone {zone})" if zone is not None else ""
        raise ValueError(f"rank-deficient design matrix{where}: "
                         f"collinear column(s): {names}")
    return LinearZoneModel.from_coefficients(coef)


# -- gradient-boosted trees --------------------------------------------------


@dataclass
class _Tree:
    """Flat-array regression tree; node 0 is the root, leaves have feature -1."""

    feature: np.ndarray   # int, -1 at leaves
    threshold: np.ndarray
    left: np.ndarray      # int child indices
    right: np.ndarray
    value: np.ndarray     # leaf prediction (0 at internal nodes)

    def predict(self, x: np.ndarray) -> np.ndarray:
        n = len(x)
        out = np.empty(n)
        node = np.zeros(n, dtype=int)
        active = np.arange(n)
        while len(active):
            cur = node[active]
            leaf = self.feature[cur] < 0
            done = active[leaf]
            out[done] = self.value[cur[leaf]]
            active = active[~leaf]
            cur = node[active]
            go_left = x[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return out

    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(),
                "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "_Tree":
        return cls(feature=np.asarray(d["feature"], dtype=int),
                   threshold=np.asarray(d["threshold"], dtype=float),
                   left=np.asarray(d["left"], dtype=int),
                   right=np.asarray(d["right"], dtype=int),
                   value=np.asarray(d["value"], dtype=float))


def _best_split(x, y, min_leaf):
    """Exact greedy search: (feature, threshold, gain) or None.

    Gain is the reduction in sum of squared errors; prefix sums over each
    sorted feature give all candidate splits in O(n log n) per feature.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    total_sum = y.sum()
    total_sse = y @ y - total_sum ** 2 / n
    best = None
    best_gain = 1e-12
    for j in range(x.shape[1]):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        ys = y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys ** 2)
        # split after position i: left = [0..i], right = [i+1..n-1]
        idx = np.arange(min_leaf - 1, n - min_leaf)
        valid = xs[idx] < xs[idx + 1]
        idx = idx[valid]
        if len(idx) == 0:
            continue
        nl = idx + 1
        nr = n - nl
        sse_l = csq[idx] - csum[idx] ** 2 / nl
        sse_r = (csq[-1] - csq[idx]) - (total_sum - csum[idx]) ** 2 / nr
        gains = total_sse - sse_l - sse_r
        k = int(np.argmax(gains))
        if gains[k] > best_gain:
            best_gain = float(gains[k])
            thr = 0.5 * (xs[idx[k]] + xs[idx[k] + 1])
            best = (j, float(thr), best_gain)
    return best


def _grow_tree(x, y, max_depth, min_leaf) -> _Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def build(rows, depth):
        node = new_node()
        yr = y[rows]
        split = _best_split(x[rows], yr, min_leaf) if depth < max_depth else None
        if split is None:
            value[node] = float(yr.mean())
            return node
        j, thr, _ = split
        go_left = x[rows, j] <= thr
        feature[node] = j
        threshold[node] = thr
        left[node] = build(rows[go_left], depth + 1)
        right[node] = build(rows[~go_left], depth + 1)
        return node

    build(np.arange(len(y)), 0)
    return _Tree(feature=np.array(feature, dtype=int),
                 threshold=np.array(threshold),
                 left=np.array(left, dtype=int),
                 right=np.array(right, dtype=int),
                 value=np.array(value))


@dataclass(frozen=True)
class GbtHyperParams:
    n_trees: int = 150
    max_depth: int = 4
    shrinkage: float = 0.1
    min_leaf: int = 15
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("invalid tree hyperparameters")
        if not (0.0 < self.subsample <= 1.0):
            raise ValueError("subsample must lie in (0, 1]")
        if not (0.0 < self.shrinkage <= 1.0):
            raise ValueError("shrinkage must lie in (0, 1]")


@dataclass
class GbtZoneModel:
    """Boosted regression trees for one zone; raw tod/doy features."""

    trees: list
    shrinkage: float
    base_score: float

    def predict(self, x) -> np.ndarray:
        x = feature_matrix(x)
        out = np.full(len(x), self.base_score)
        for tree in self.trees:
            out += self.shrinkage * tree.predict(x)
        return out

    def to_dict(self) -> dict:
        return {"shrinkage": self.shrinkage, "base_score": self.base_score,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "GbtZoneModel":
        return cls(trees=[_Tree.from_dict(t) for t in d["trees"]],
                   shrinkage=float(d["shrinkage"]),
                   base_score=float(d["base_score"]))


def fit_gbt(x, y, zone: Optional[int] = None,
            hyper: GbtHyperParams = GbtHyperParams()) -> GbtZoneModel:
    """Squared-loss gradient boosting; each tree fits the current residual."""
    x = feature_matrix(x)
    y = np.asarray(y, dtype=float)
    if len(y) < hyper.min_leaf:
        raise ValueError("not enough samples to fit trees")
    rng = np.random.default_rng(hyper.seed + (zone or 0))
    base = float(y.mean())
    pred = np.full(len(y), base)
    trees = []
    for _ in range(hyper.n_trees):
        residual = y - pred
        if hyper.subsample < 1.0:
            size = min(len(y), max(int(hyper.subsample * len(y)),
                                   2 * hyper.min_leaf))
            rows = rng.choice(len(y), size=size, replace=False)
        else:
            rows = np.arange(len(y))
        tree = _grow_tree(x[rows], residual[rows], hyper.max_depth,
                          hyper.min_leaf)
        trees.append(tree)
        pred += hyper.shrinkage * tree.predict(x)
    return GbtZoneModel(trees=trees, shrinkage=hyper.shrinkage, base_score=base)


# -- the nine-zone bundle ----------------------------------------------------


@dataclass
class EstimatorBundle:
    """Nine homogeneous per-zone models plus training metadata."""

    kind: str                 # "linear" | "gbt"
    per_zone: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("linear", "gbt"):
            raise ValueError("estimator kind must be 'linear' or 'gbt'")
        if len(self.per_zone) != N_ZONES:
            raise ValueError(f"bundle needs exactly {N_ZONES} zone models")
        want = LinearZoneModel if self.kind == "linear" else GbtZoneModel
        if not all(isinstance(m, want) for m in self.per_zone):
            raise ValueError("bundle zone models must be homogeneous")

    def predict(self, features) -> np.ndarray:
        """eps_tilde for all 9 zones at one feature row."""
        row = features.as_row() if isinstance(features, FeatureVector) else features
        x = np.asarray(row, dtype=float).reshape(1, -1)
        return np.array([m.predict(x)[0] for m in self.per_zone])

    def predict_matrix(self, x) -> np.ndarray:
        """(n, 9) predictions for a whole feature matrix at once."""
        x = feature_matrix(x)
        return np.column_stack([m.predict(x) for m in self.per_zone])

    def save(self, path) -> None:
        payload = {
            "schema_version": BUNDLE_SCHEMA_VERSION,
            "kind": self.kind,
            "feature_columns": list(FEATURE_COLUMNS),
            "metadata": self.metadata,
            "zones": [m.to_dict() for m in self.per_zone],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "EstimatorBundle":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        version = payload.get("schema_version")
        if version != BUNDLE_SCHEMA_VERSION:
            raise ValueError(f"unsupported bundle schema version: {version}")
        if tuple(payload.get("feature_columns", ())) != FEATURE_COLUMNS:
            raise ValueError("bundle feature schema does not match")
        kind = payload["kind"]
        loader = LinearZoneModel.from_dict if kind == "linear" else GbtZoneModel.from_dict
        return cls(kind=kind,
                   per_zone=[loader(z) for z in payload["zones"]],
                   metadata=payload.get("metadata", {}))


def fit_linear_bundle(x, targets, metadata: Optional[dict] = None) -> EstimatorBundle:
    """Fit all 9 zones by least squares; ``targets`` is (n, 9)."""
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2 or targets.shape[1] != N_ZONES:
        raise ValueError("targets must be (n, 9)")
    models = [fit_linear(x, targets[:, z], zone=z + 1) for z in range(N_ZONES)]
    return EstimatorBundle(kind="linear", per_zone=models,
                           metadata=metadata or {})


def fit_gbt_bundle(x, targets, hyper: GbtHyperParams = GbtHyperParams(),
                   metadata: Optional[dict] = None,
                   n_jobs: int = 1) -> EstimatorBundle:
    """Fit all 9 zones; per-zone fits are independent, so they parallelize."""
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2 or targets.shape[1] != N_ZONES:
        raise ValueError("targets must be (n, 9)")
    x = feature_matrix(x)
    if n_jobs == 1:
        models = [fit_gbt(x, targets[:, z], zone=z + 1, hyper=hyper)
                  for z in range(N_ZONES)]
    else:
        models = Parallel(n_jobs=n_jobs)(
            delayed(fit_gbt)(x, targets[:, z], z + 1, hyper)
            for z in range(N_ZONES))
    return EstimatorBundle(kind="gbt", per_zone=models, metadata=metadata or {})


def train_test_split(x, targets, ratio: float = 0.7,
                     mode: str = "chronological", seed: int = 0):
    """Disjoint (train, test) partition; chronological keeps row order."""
    x = np.asarray(x)
    targets = np.asarray(targets)
    n = len(x)
    if n < 10:
        raise ValueError("need at least 10 samples to split")
    if not (0.0 < ratio < 1.0):
        raise ValueError("split ratio must lie in (0, 1)")
    n_train = int(n * ratio)
    if mode == "chronological":
        idx = np.arange(n)
    elif mode == "shuffled":
        idx = np.random.default_rng(seed).permutation(n)
    else:
        raise ValueError("split mode must be 'chronological' or 'shuffled'")
    tr, te = idx[:n_train], idx[n_train:]
    return (x[tr], targets[tr]), (x[te], targets[te])
