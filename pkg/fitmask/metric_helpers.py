"""
Scoring of frozen features: retrieval, linear probing, projection variance, collapse and
attention localization. Everything here works on numpy arrays / tensors already extracted.
"""

import math
import warnings
from dataclasses import dataclass, asdict, field
from typing import List, Optional, Sequence
import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score, top_k_accuracy_score
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler
from .errors import DataError, FitmaskWarning
from .rationale_helpers import projection_responses

PROBE_FRACTIONS = (1.0, 0.5, 0.2)
PROBE_C_GRID = (0.01, 0.1, 1.0, 10.0)
COLLAPSE_STD = 0.01
COLLAPSE_CHANCE_FACTOR = 1.5
COLLAPSE_MIN_ITEMS = 50


def _numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


# -- retrieval ----------------------------------------------------------------------------

@dataclass
class RetrievalReport:
    rank1: float
    rank5: float
    mAP: float
    gallery_size: int
    metric: str
    queries: int
    excluded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def similarity_matrix(features, metric: str='cosine') -> np.ndarray:
    """
    Pairwise similarity (higher = closer). l2 uses the negated squared distance.
    """
    X = _numpy(features).astype(np.float64)
    if metric == 'cosine':
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0, norms, 1.0)
        return X @ X.T
    if metric == 'l2':
        sq = (X ** 2).sum(axis=1)
        return -(sq[:, None] + sq[None, :] - 2 * X @ X.T)
    raise ValueError(f"unknown similarity metric {metric!r}")


def average_precision(relevant: np.ndarray) -> float:
    """
    AP of one ranked gallery given its 0/1 relevance in rank order: mean precision at the
    rank of each relevant item.
    """
    hits = np.cumsum(relevant)
    ranks = np.arange(1, len(relevant) + 1)
    n_pos = hits[-1] if len(hits) else 0
    if n_pos == 0:
        return 0.0
    return float((relevant * hits / ranks).sum() / n_pos)


def retrieval_eval(features, labels, metric: str='cosine', ks: Sequence[int]=(1, 5)) -> RetrievalReport:
    """
    Leave-one-out retrieval over one set: every item queries all the others.

    Inputs:
        features (array) - NxF
        labels (array) - N
        metric (str) - 'cosine' or 'l2'

    Outputs:
        RetrievalReport - rank-k and mAP as percentages over the included queries. A query
            whose class has no other member is excluded (with a warning).
    """
    labels = _numpy(labels)
    n = len(labels)
    if n < 2:
        raise DataError("retrieval needs at least 2 items")
    sim = similarity_matrix(features, metric)
    np.fill_diagonal(sim, -np.inf)
    # stable sort on the negated similarity: ties go to the lower index
    order = np.argsort(-sim, axis=1, kind='stable')[:, :n - 1]

    hits = {k: 0 for k in ks}
    aps = []
    excluded = 0
    for i in range(n):
        relevant = (labels[order[i]] == labels[i]).astype(np.float64)
        if relevant.sum() == 0:
            excluded += 1
            continue
        for k in ks:
            hits[k] += bool(relevant[:k].any())
        aps.append(average_precision(relevant))

    if excluded:
        warnings.warn(f"{excluded} retrieval queries have no same-class item and were excluded", FitmaskWarning)
    if not aps:
        raise DataError("no query has a same-class item in the gallery")
    q = len(aps)
    return RetrievalReport(
        rank1=100.0 * hits[ks[0]] / q,
        rank5=100.0 * hits[ks[1]] / q if len(ks) > 1 else float('nan'),
        mAP=100.0 * float(np.mean(aps)),
        gallery_size=n - 1,
        metric=metric,
        queries=q,
        excluded=excluded,
        )


# -- linear probe -------------------------------------------------------------------------

@dataclass
class ProbeReport:
    rows: List[dict] = field(default_factory=list)

    def row(self, fraction: float) -> dict:
        for r in self.rows:
            if math.isclose(r['fraction'], fraction):
                return r
        raise KeyError(fraction)

    def to_dict(self) -> dict:
        return {'rows': self.rows}


def stratified_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """
    Indices of a class-stratified fraction of the items.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    idx = np.arange(len(labels))
    if fraction == 1.0:
        return idx
    classes, counts = np.unique(labels, return_counts=True)
    for c, n in zip(classes, counts):
        if int(round(n * fraction)) < 1:
            raise DataError(f"fraction {fraction} leaves class {c} without training labels")
    try:
        keep, _ = train_test_split(idx, train_size=fraction, stratify=labels, random_state=seed)
    except ValueError as e:
        raise DataError(f"cannot draw a stratified {fraction} subsample: {e}") from e
    if len(np.unique(labels[keep])) < len(classes):
        raise DataError(f"fraction {fraction} leaves a class without training labels")
    return np.sort(keep)


def _choose_C(X: np.ndarray, y: np.ndarray, seed: int) -> float:
    n_classes = len(np.unique(y))
    n_val = int(math.ceil(0.25 * len(y)))
    if np.unique(y, return_counts=True)[1].min() < 2 or n_val < n_classes or len(y) - n_val < n_classes:
        return 1.0
    X_fit, X_val, y_fit, y_val = train_test_split(X, y, test_size=n_val, stratify=y, random_state=seed)
    scores = []
    for C in PROBE_C_GRID:
        clf = LogisticRegression(C=C, max_iter=2000).fit(X_fit, y_fit)
        scores.append(clf.score(X_val, y_val))
    return PROBE_C_GRID[int(np.argmax(scores))]


def _topk(clf: LogisticRegression, X: np.ndarray, y: np.ndarray, k: int) -> float:
    n_classes = len(clf.classes_)
    if k == 1:
        return 100.0 * accuracy_score(y, clf.predict(X))
    if k >= n_classes:
        return 100.0
    return 100.0 * top_k_accuracy_score(y, clf.predict_proba(X), k=k, labels=clf.classes_)


def linear_probe(train_features, train_labels, test_features, test_labels, fraction: float=1.0, seed: int=0) -> dict:
    """
    Multinomial logistic regression on frozen features.

    Inputs:
        train_features, train_labels - probe training set (subsampled to fraction, stratified)
        test_features, test_labels - held-out evaluation set
        fraction (float) - share of training labels used
        seed (int) - subsample and validation split

    Outputs:
        row (dict) - fraction, top1, top5 (percent), C, n_train
    """
    X_tr, y_tr = _numpy(train_features).astype(np.float64), _numpy(train_labels).astype(int)
    X_te, y_te = _numpy(test_features).astype(np.float64), _numpy(test_labels).astype(int)
    if len(np.unique(y_tr)) < 2:
        raise DataError("linear probe needs at least 2 classes")
    keep = stratified_subset(y_tr, fraction, seed)
    X_tr, y_tr = X_tr[keep], y_tr[keep]

    scaler = StandardScaler().fit(X_tr)
    X_tr, X_te = scaler.transform(X_tr), scaler.transform(X_te)
    C = _choose_C(X_tr, y_tr, seed)
    clf = LogisticRegression(C=C, max_iter=5000).fit(X_tr, y_tr)
    return {
        'fraction': fraction,
        'top1': _topk(clf, X_te, y_te, 1),
        'top5': _topk(clf, X_te, y_te, 5),
        'C': C,
        'n_train': int(len(y_tr)),
    }


def probe_report(train_features, train_labels, test_features, test_labels, fractions=PROBE_FRACTIONS, seed: int=0) -> ProbeReport:
    return ProbeReport([
        linear_probe(train_features, train_labels, test_features, test_labels, f, seed) for f in fractions
        ])


# -- projection variance ------------------------------------------------------------------

@dataclass
class ProjectionVarianceReport:
    variance: List[float]
    ranking: List[int]

    def top(self, n: int) -> List[int]:
        return self.ranking[:n]

    def random_others(self, n: int, seed: int=0) -> List[int]:
        """
        n projections drawn at random from those outside the top n.
        """
        rest = self.ranking[n:]
        if not rest:
            raise ValueError(f"no projections left outside the top {n}")
        rng = np.random.default_rng(seed)
        picked = rng.choice(rest, size=min(n, len(rest)), replace=False)
        return sorted(int(i) for i in picked)

    def to_dict(self) -> dict:
        return asdict(self)


def projection_variance(weight: torch.Tensor, feature_maps: torch.Tensor) -> ProjectionVarianceReport:
    """
    Variance of each projection's response w_k . phi[i,j] over every grid cell of every image.

    Inputs:
        weight (Tensor) - KxC
        feature_maps (Tensor) - NxHxWxC

    Outputs:
        ProjectionVarianceReport - ranking is descending by variance, ties by lower index
    """
    if feature_maps.shape[0] == 0:
        raise DataError("projection variance needs at least one image")
    responses = projection_responses(feature_maps.double(), weight.double())
    variance = responses.reshape(-1, weight.shape[0]).var(dim=0, unbiased=False).cpu().numpy()
    ranking = np.argsort(-variance, kind='stable')
    return ProjectionVarianceReport(variance=[float(v) for v in variance], ranking=[int(i) for i in ranking])


# -- collapse -----------------------------------------------------------------------------

@dataclass
class CollapseReport:
    collapsed: bool
    mean_std: float
    min_std: float
    max_std: float
    rank1: Optional[float] = None
    chance: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def collapse_check(embeddings, labels=None) -> CollapseReport:
    """
    Flags a collapsed representation: mean per-dimension std of the L2-normalized embeddings
    below 0.01, or (when labels are given) nearest-neighbour rank-1 within 1.5x of chance.
    """
    Z = _numpy(embeddings).astype(np.float64)
    if Z.shape[0] < COLLAPSE_MIN_ITEMS:
        raise DataError(f"collapse check needs at least {COLLAPSE_MIN_ITEMS} embeddings, got {Z.shape[0]}")
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    Z = Z / np.where(norms > 0, norms, 1.0)
    std = Z.std(axis=0)
    report = CollapseReport(
        collapsed=bool(std.mean() < COLLAPSE_STD),
        mean_std=float(std.mean()), min_std=float(std.min()), max_std=float(std.max()),
        )
    if labels is not None:
        labels = _numpy(labels)
        report.chance = 100.0 / len(np.unique(labels))
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', FitmaskWarning)
            report.rank1 = retrieval_eval(Z, labels).rank1
        report.collapsed = report.collapsed or report.rank1 <= COLLAPSE_CHANCE_FACTOR * report.chance
    return report


# -- attention localization ---------------------------------------------------------------

def box_to_view(box, source_size: int, resize: int, crop: int) -> tuple:
    """
    Maps an [x, y, w, h] pixel box of a square source image through resize + center crop.
    Returns (x0, y0, x1, y1) clipped to the crop.
    """
    x, y, w, h = box
    scale = resize / source_size
    offset = (resize - crop) / 2
    x0, y0 = x * scale - offset, y * scale - offset
    x1, y1 = x0 + w * scale, y0 + h * scale
    clip = lambda v: min(max(v, 0.0), float(crop))
    return clip(x0), clip(y0), clip(x1), clip(y1)


def box_mass(weights: np.ndarray, box: tuple, size: int) -> float:
    """
    Share of a grid map's mass that falls inside a pixel box; each cell spreads its weight
    uniformly over the pixels it covers.
    """
    H, W = weights.shape
    x0, y0, x1, y1 = box
    ys = np.arange(H + 1) * size / H
    xs = np.arange(W + 1) * size / W
    overlap_y = np.clip(np.minimum(ys[1:], y1) - np.maximum(ys[:-1], y0), 0, None) / (size / H)
    overlap_x = np.clip(np.minimum(xs[1:], x1) - np.maximum(xs[:-1], x0), 0, None) / (size / W)
    total = weights.sum()
    if total <= 0:
        return 0.0
    return float((weights * overlap_y[:, None] * overlap_x[None, :]).sum() / total)


def attention_mass(maps, boxes: Sequence, source_size: int, resize: int, crop: int) -> dict:
    """
    Mean share of normalized attention inside the ground-truth boxes, against the share a
    uniform map would put there (box area / image area).

    Inputs:
        maps (array) - NxHxW normalized attention A'
        boxes (list) - N source-image boxes [x, y, w, h]
        source_size, resize, crop (int) - the test-time resize / center crop that produced the maps
    """
    maps = _numpy(maps).astype(np.float64)
    if len(maps) != len(boxes):
        raise ValueError(f"{len(maps)} maps for {len(boxes)} boxes")
    masses, baselines = [], []
    for A, box in zip(maps, boxes):
        view_box = box_to_view(box, source_size, resize, crop)
        masses.append(box_mass(A, view_box, crop))
        baselines.append((view_box[2] - view_box[0]) * (view_box[3] - view_box[1]) / crop ** 2)
    mass, baseline = float(np.mean(masses)), float(np.mean(baselines))
    return {'mass': mass, 'baseline': baseline, 'ratio': mass / baseline if baseline > 0 else float('nan')}
