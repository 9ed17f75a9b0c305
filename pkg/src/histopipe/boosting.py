"""Gradient-boosted decision trees with a multiclass softmax objective.

Trees are grown leaf-wise (best gain first) over quantile feature
histograms. Bin boundaries are computed once per dataset; when a feature
has no more distinct values than bins, the boundaries are the midpoints
between consecutive distinct values, so the histogram split search is
exactly the exhaustive one on small data. Row and feature subsampling
consume a single seeded stream in fixed (round, class) order, which makes
fitted models a pure function of (data, params, seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import HistopipeError


class SingleClassData(HistopipeError):
    pass


class EmptyData(HistopipeError):
    pass


class FeatureCountMismatch(HistopipeError):
    pass


class CorruptModel(HistopipeError):
    pass


class VersionMismatch(HistopipeError):
    pass


@dataclass(frozen=True)
class GbdtParams:
    num_rounds: int = 200
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_samples_leaf: int = 5
    feature_fraction: float = 0.8
    bagging_fraction: float = 0.8
    num_bins: int = 255
    lambda_l2: float = 1.0
    num_classes: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if not 0 < self.feature_fraction <= 1 or not 0 < self.bagging_fraction <= 1:
            raise ValueError("fractions must lie in (0, 1]")
        if self.num_bins < 2 or self.num_bins > 65535:
            raise ValueError("num_bins must lie in [2, 65535]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


@dataclass
class TrainingMatrix:
    rows: np.ndarray
    labels: np.ndarray
    group_ids: Optional[list[str]] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.shape[0] != self.labels.shape[0]:
            raise ValueError("row and label counts differ")
        if self.group_ids is not None and len(self.group_ids) != self.rows.shape[0]:
            raise ValueError("group_ids length differs from row count")


@dataclass
class DecisionTree:
    """Binary tree in array form; ``feature < 0`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int32)
        while True:
            active = np.flatnonzero(self.feature[node] >= 0)
            if active.size == 0:
                break
            cur = node[active]
            go_left = x[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return self.value[node]


@dataclass
class GbdtModel:
    params: GbdtParams
    num_classes: int
    n_features: int
    base_scores: np.ndarray
    trees: list[list[DecisionTree]]  # per class, per round
    train_log_loss: list[float] = field(default_factory=list)


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_loss(proba: np.ndarray, labels: np.ndarray) -> float:
    picked = np.clip(proba[np.arange(labels.shape[0]), labels], 1e-15, None)
    return float(-np.log(picked).mean())


def compute_bins(x: np.ndarray, num_bins: int) -> list[np.ndarray]:
    """Global per-feature bin boundaries (ascending).

    A value v falls in bin b = first index with boundaries[b] >= v, so a
    split "bin <= b" is exactly "v <= boundaries[b]".
    """
    boundaries = []
    for j in range(x.shape[1]):
        col = x[:, j]
        distinct = np.unique(col)
        if distinct.size <= 1:
            b = np.empty(0, dtype=np.float64)
        elif distinct.size <= num_bins:
            b = (distinct[:-1] + distinct[1:]) / 2.0
        else:
            qs = np.quantile(col, np.linspace(0.0, 1.0, num_bins + 1)[1:-1])
            b = np.unique(qs)
        boundaries.append(b)
    return boundaries


def _bin_matrix(x: np.ndarray, boundaries: list[np.ndarray]) -> np.ndarray:
    binned = np.empty(x.shape, dtype=np.uint16)
    for j, b in enumerate(boundaries):
        binned[:, j] = np.searchsorted(b, x[:, j], side="left")
    return binned


class _LeafState:
    __slots__ = ("node_id", "rows", "hist", "best")

    def __init__(self, node_id, rows, hist, best):
        self.node_id = node_id
        self.rows = rows
        self.hist = hist
        self.best = best  # (gain, feat_pos, bin) or None


def _node_histograms(binned, feats, stride, rows, g, h):
    """Per-feature (gradient, hessian, count) bin sums as one (3, F, B) array."""
    sub = binned[np.ix_(rows, feats)].astype(np.int64)
    sub += np.arange(feats.size, dtype=np.int64) * stride
    flat = sub.ravel()
    length = feats.size * stride
    hist = np.empty((3, feats.size, stride))
    hist[0] = np.bincount(flat, weights=np.repeat(g[rows], feats.size),
                          minlength=length).reshape(feats.size, stride)
    hist[1] = np.bincount(flat, weights=np.repeat(h[rows], feats.size),
                          minlength=length).reshape(feats.size, stride)
    hist[2] = np.bincount(flat, minlength=length).reshape(feats.size, stride)
    return hist


def _best_split(hist, bin_mask, min_samples_leaf, lam):
    """Highest second-order gain; ties resolve to the lowest feature then
    the lowest threshold (argmax takes the first maximum)."""
    cum = np.cumsum(hist, axis=2)  # (3, n_feats, stride): g, h, count prefixes
    gl, hl, cl = cum[0, :, :-1], cum[1, :, :-1], cum[2, :, :-1]
    tg, th, tc = cum[0, :, -1:], cum[1, :, -1:], cum[2, :, -1:]
    gr, hr, cr = tg - gl, th - hl, tc - cl

    valid = (cl >= min_samples_leaf) & (cr >= min_samples_leaf) & bin_mask
    if lam <= 0:
        valid &= (hl + lam > 0) & (hr + lam > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - tg * tg / (th + lam))
    gain[~valid] = -np.inf

    per_feat_bin = np.argmax(gain, axis=1)
    per_feat_gain = gain[np.arange(gain.shape[0]), per_feat_bin]
    feat_pos = int(np.argmax(per_feat_gain))
    best_gain = per_feat_gain[feat_pos]
    if not np.isfinite(best_gain) or best_gain <= 0:
        return None
    return float(best_gain), feat_pos, int(per_feat_bin[feat_pos])


def _grow_tree(binned, boundaries, n_bounds_all, g, h, rows, feats, params) -> DecisionTree:
    stride = params.num_bins
    lam = params.lambda_l2
    # Candidate-bin validity is constant per tree: bin b splits feature f
    # only when b indexes a real boundary of f.
    bin_mask = np.arange(stride - 1)[np.newaxis, :] < n_bounds_all[feats][:, np.newaxis]

    feature = [np.int32(-1)]
    threshold = [0.0]
    left = [np.int32(-1)]
    right = [np.int32(-1)]

    root_hist = _node_histograms(binned, feats, stride, rows, g, h)
    root = _LeafState(0, rows, root_hist,
                      _best_split(root_hist, bin_mask, params.min_samples_leaf, lam))
    leaves = [root]

    while len(leaves) < params.max_leaves:
        candidates = [lf for lf in leaves if lf.best is not None]
        if not candidates:
            break
        # Highest gain; creation order (node_id) breaks exact ties.
        chosen = max(candidates, key=lambda lf: (lf.best[0], -lf.node_id))
        gain, feat_pos, split_bin = chosen.best
        f_global = feats[feat_pos]
        go_left = binned[chosen.rows, f_global] <= split_bin
        rows_l = chosen.rows[go_left]
        rows_r = chosen.rows[~go_left]

        feature[chosen.node_id] = np.int32(f_global)
        threshold[chosen.node_id] = float(boundaries[f_global][split_bin])
        node_l = len(feature)
        node_r = node_l + 1
        left[chosen.node_id] = np.int32(node_l)
        right[chosen.node_id] = np.int32(node_r)
        for _ in range(2):
            feature.append(np.int32(-1))
            threshold.append(0.0)
            left.append(np.int32(-1))
            right.append(np.int32(-1))

        # Build the smaller child's histogram; the sibling is the difference.
        small_rows = rows_l if rows_l.size <= rows_r.size else rows_r
        small_hist = _node_histograms(binned, feats, stride, small_rows, g, h)
        big_hist = chosen.hist - small_hist
        hist_l, hist_r = (
            (small_hist, big_hist) if rows_l.size <= rows_r.size else (big_hist, small_hist)
        )

        leaves.remove(chosen)
        for node_id, node_rows, node_hist in (
            (node_l, rows_l, hist_l),
            (node_r, rows_r, hist_r),
        ):
            best = _best_split(node_hist, bin_mask, params.min_samples_leaf, lam)
            leaves.append(_LeafState(node_id, node_rows, node_hist, best))

    value = np.zeros(len(feature), dtype=np.float64)
    for lf in leaves:
        gs = g[lf.rows].sum()
        hs = h[lf.rows].sum()
        value[lf.node_id] = -gs / (hs + lam) * params.learning_rate

    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=value,
    )


def fit(data: TrainingMatrix, params: GbdtParams) -> GbdtModel:
    """Train a multiclass GBDT.

    Per round and class, gradients/hessians of the softmax cross-entropy
    are computed at the current scores and one tree is grown; the leaf
    value is the shrunken Newton step -sum(g)/(sum(h)+lambda) * lr.
    """
    x = np.ascontiguousarray(data.rows, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    n, d = x.shape
    if n == 0:
        raise EmptyData("no training rows")
    if n < 2 * params.min_samples_leaf:
        raise EmptyData(
            f"{n} rows cannot support two leaves of {params.min_samples_leaf}"
        )
    present = np.unique(y)
    if present.size < 2:
        raise SingleClassData("all rows share one label")
    num_classes = params.num_classes or int(y.max()) + 1
    if y.max() >= num_classes or y.min() < 0:
        raise ValueError("labels out of range for num_classes")

    counts = np.bincount(y, minlength=num_classes).astype(np.float64)
    base_scores = np.log(np.maximum(counts, 0.5) / n)
    scores = np.tile(base_scores, (n, 1))
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0

    boundaries = compute_bins(x, params.num_bins)
    n_bounds_all = np.array([b.size for b in boundaries], dtype=np.int64)
    binned = _bin_matrix(x, boundaries)

    rng = np.random.default_rng(params.seed)
    n_bag = int(np.ceil(params.bagging_fraction * n))
    n_feat = max(1, int(np.ceil(params.feature_fraction * d)))

    trees: list[list[DecisionTree]] = [[] for _ in range(num_classes)]
    losses: list[float] = []
    for _ in range(params.num_rounds):
        proba = _softmax(scores)
        losses.append(_log_loss(proba, y))
        for k in range(num_classes):
            g = proba[:, k] - onehot[:, k]
            h = proba[:, k] * (1.0 - proba[:, k])
            if params.bagging_fraction < 1.0:
                rows = np.sort(rng.choice(n, size=n_bag, replace=False))
            else:
                rows = np.arange(n)
            if params.feature_fraction < 1.0:
                feats = np.sort(rng.choice(d, size=n_feat, replace=False))
            else:
                feats = np.arange(d)
            tree = _grow_tree(binned, boundaries, n_bounds_all, g, h, rows, feats, params)
            trees[k].append(tree)
            scores[:, k] += tree.predict(x)
    losses.append(_log_loss(_softmax(scores), y))

    return GbdtModel(
        params=params,
        num_classes=num_classes,
        n_features=d,
        base_scores=base_scores,
        trees=trees,
        train_log_loss=losses,
    )


def predict_scores(model: GbdtModel, rows: np.ndarray) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim == 1:
        x = x[np.newaxis, :]
    if x.shape[1] != model.n_features:
        raise FeatureCountMismatch(
            f"model expects {model.n_features} features, rows have {x.shape[1]}"
        )
    scores = np.tile(model.base_scores, (x.shape[0], 1))
    for k, class_trees in enumerate(model.trees):
        for tree in class_trees:
            scores[:, k] += tree.predict(x)
    return scores


def predict_proba(model: GbdtModel, rows: np.ndarray) -> np.ndarray:
    """Softmax of summed tree outputs plus base scores; rows sum to 1."""
    return _softmax(predict_scores(model, rows))


# ---------------------------------------------------------------------------
# Model file format
#
#   8-byte magic "HPGBDT01", 1 version byte,
#   u32 little-endian JSON length, JSON (params + metadata),
#   then per class, per round: u32 node count + flat little-endian array of
#   node records (feature i32, left i32, right i32, threshold f64, value f8).
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"HPGBDT01"
MODEL_VERSION = 1

_NODE_DTYPE = np.dtype(
    [
        ("feature", "<i4"),
        ("left", "<i4"),
        ("right", "<i4"),
        ("threshold", "<f8"),
        ("value", "<f8"),
    ]
)


def serialize_model(model: GbdtModel) -> bytes:
    meta = {
        "params": asdict(model.params),
        "num_classes": model.num_classes,
        "n_features": model.n_features,
        "base_scores": [float(v) for v in model.base_scores],
        "train_log_loss": [float(v) for v in model.train_log_loss],
        "rounds_stored": len(model.trees[0]) if model.trees else 0,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MODEL_MAGIC, bytes([MODEL_VERSION]), struct.pack("<I", len(blob)), blob]
    for class_trees in model.trees:
        for tree in class_trees:
            records = np.empty(tree.feature.shape[0], dtype=_NODE_DTYPE)
            records["feature"] = tree.feature
            records["left"] = tree.left
            records["right"] = tree.right
            records["threshold"] = tree.threshold
            records["value"] = tree.value
            parts.append(struct.pack("<I", records.shape[0]))
            parts.append(records.tobytes())
    return b"".join(parts)


def deserialize_model(data: bytes) -> GbdtModel:
    if len(data) < len(MODEL_MAGIC) + 1 or data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise CorruptModel("bad magic")
    version = data[len(MODEL_MAGIC)]
    if version != MODEL_VERSION:
        raise VersionMismatch(f"model version {version}, supported {MODEL_VERSION}")
    off = len(MODEL_MAGIC) + 1
    try:
        (hlen,) = struct.unpack_from("<I", data, off)
        off += 4
        meta = json.loads(data[off : off + hlen].decode("utf-8"))
        if off + hlen > len(data):
            raise CorruptModel("truncated header")
        off += hlen
        params = GbdtParams(**meta["params"])
        num_classes = meta["num_classes"]
        rounds = meta["rounds_stored"]
        trees: list[list[DecisionTree]] = []
        for _ in range(num_classes):
            class_trees = []
            for _ in range(rounds):
                (n_nodes,) = struct.unpack_from("<I", data, off)
                off += 4
                nbytes = n_nodes * _NODE_DTYPE.itemsize
                if off + nbytes > len(data):
                    raise CorruptModel("truncated tree data")
                records = np.frombuffer(data, dtype=_NODE_DTYPE, count=n_nodes, offset=off)
                off += nbytes
                class_trees.append(
                    DecisionTree(
                        feature=records["feature"].astype(np.int32),
                        threshold=records["threshold"].astype(np.float64),
                        left=records["left"].astype(np.int32),
                        right=records["right"].astype(np.int32),
                        value=records["value"].astype(np.float64),
                    )
                )
            trees.append(class_trees)
    except (struct.error, KeyError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptModel(str(exc)) from exc
    if off != len(data):
        raise CorruptModel(f"{len(data) - off} trailing bytes")
    return GbdtModel(
        params=params,
        num_classes=num_classes,
        n_features=meta["n_features"],
        base_scores=np.asarray(meta["base_scores"], dtype=np.float64),
        trees=trees,
        train_log_loss=list(meta["train_log_loss"]),
    )
