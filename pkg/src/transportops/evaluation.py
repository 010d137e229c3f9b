"""Evaluation metrics for trained models.

ROC/AUC over pair distances (AUC as the exact rank statistic), brute
force nearest-neighbor classification grouped by metadata, path errors
for sequence extrapolation, planar offset-distance heat maps, and
per-pair coefficient tables. Results can be emitted as CSV with headers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, PreconditionError
from .data import LabeledSample
from .operators import (
    InferenceOptions,
    LatentPair,
    OperatorDictionary,
    infer_coefficients,
    manifold_offset,
)


@dataclass(frozen=True)
class ScoredPair:
    """A pair distance with its same-manifold ground truth."""

    distance: float
    same_manifold: bool

    def __post_init__(self):
        if not np.isfinite(self.distance):
            raise DomainError("distance must be finite")


@dataclass(frozen=True)
class RocResult:
    auc: float
    sweep: tuple[tuple[float, float], ...]  # (fpr, tpr) points


def roc_auc(pairs: Sequence[ScoredPair]) -> RocResult:
    """Class separability of distances, oriented so that smaller distance
    means same manifold and 1.0 means perfect separation.

    The AUC is the rank statistic P(d_same < d_diff) with ties counted
    one half; the threshold sweep is included for curve plotting.
    """
    distances = np.asarray([p.distance for p in pairs], dtype=np.float64)
    positive = np.asarray([p.same_manifold for p in pairs], dtype=bool)
    n_pos = int(np.sum(positive))
    n_neg = distances.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise PreconditionError(
            "roc_auc needs at least one positive and one negative pair")
    pos = distances[positive]
    neg = distances[~positive]
    wins = np.sum(pos[:, None] < neg[None, :])
    ties = np.sum(pos[:, None] == neg[None, :])
    auc = (wins + 0.5 * ties) / (n_pos * n_neg)
    sweep = [(0.0, 0.0)]
    for threshold in np.unique(distances):
        tpr = float(np.sum(pos <= threshold)) / n_pos
        fpr = float(np.sum(neg <= threshold)) / n_neg
        sweep.append((fpr, tpr))
    sweep.append((1.0, 1.0))
    sweep = sorted(set(sweep))
    return RocResult(auc=float(auc), sweep=tuple(sweep))


def euclidean_distance(a: np.ndarray, b: np.ndarray) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(diff @ diff))


def offset_distance_fn(dictionary: OperatorDictionary,
                       options: InferenceOptions | None = None) -> Callable:
    """Distance callable for kNN: offset of transporting the train point
    toward the test point."""

    def fn(train_features, test_features):
        return manifold_offset(dictionary, train_features, test_features,
                               options)

    return fn


@dataclass(frozen=True)
class KnnResult:
    accuracy: float
    per_group: dict
    predictions: np.ndarray


def knn_classify(train: Sequence[LabeledSample], test: Sequence[LabeledSample],
                 distance_fn: Callable | str = "euclidean") -> KnnResult:
    """Label each test sample by its nearest training sample.

    ``distance_fn`` is "euclidean" or a callable
    ``(train_features, test_features) -> float``. Ties go to the lowest
    train index. Accuracy is also aggregated per test-sample ``meta``
    value when present.
    """
    if len(train) == 0:
        raise PreconditionError("knn_classify needs a nonempty training set")
    if isinstance(distance_fn, str):
        if distance_fn != "euclidean":
            raise DomainError(f"unknown distance_fn {distance_fn!r}")
        fn = euclidean_distance
    else:
        fn = distance_fn
    dim = np.asarray(train[0].features).shape
    for sample in list(train) + list(test):
        if np.asarray(sample.features).shape != dim:
            raise DimensionError("train and test features disagree in shape")
    predictions = np.empty(len(test), dtype=np.int64)
    correct_by_group: dict = {}
    total_by_group: dict = {}
    hits = 0
    for i, sample in enumerate(test):
        dists = np.asarray([fn(t.features, sample.features) for t in train])
        predictions[i] = train[int(np.argmin(dists))].label
        group = sample.meta if sample.meta is not None else "all"
        total_by_group[group] = total_by_group.get(group, 0) + 1
        if predictions[i] == sample.label:
            hits += 1
            correct_by_group[group] = correct_by_group.get(group, 0) + 1
    per_group = {g: correct_by_group.get(g, 0) / total_by_group[g]
                 for g in total_by_group}
    accuracy = hits / len(test) if test else 0.0
    return KnnResult(accuracy=accuracy, per_group=per_group,
                     predictions=predictions)


def path_mse(estimated: np.ndarray, truth: np.ndarray,
             ) -> tuple[np.ndarray, float]:
    """Per-frame squared Euclidean error between two paths, plus its mean."""
    est = np.asarray(estimated, dtype=np.float64)
    ref = np.asarray(truth, dtype=np.float64)
    if est.shape != ref.shape:
        raise DimensionError(
            f"paths disagree in shape: {est.shape} vs {ref.shape}")
    diff = (est - ref).reshape(est.shape[0], -1)
    per_step = np.sum(diff * diff, axis=1)
    return per_step, float(np.mean(per_step))


@dataclass(frozen=True)
class HeatmapGrid:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise DomainError("grid needs nx >= 1 and ny >= 1")
        if not (self.x_max >= self.x_min and self.y_max >= self.y_min):
            raise DomainError("grid bounds are inverted")


def offset_heatmap(dictionary: OperatorDictionary, reference,
                   grid: HeatmapGrid,
                   options: InferenceOptions | None = None, *,
                   csv_path=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Manifold offset from a planar reference point to every grid point.

    Returns (xs, ys, offsets) with offsets shaped (ny, nx); optionally
    writes rows (x, y, offset) as CSV.
    """
    if dictionary.latent_dim != 2:
        raise PreconditionError(
            "offset_heatmap requires a dictionary over planar latents")
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != (2,):
        raise DimensionError(f"reference must be a 2-vector, got {ref.shape}")
    xs = np.linspace(grid.x_min, grid.x_max, grid.nx)
    ys = np.linspace(grid.y_min, grid.y_max, grid.ny)
    offsets = np.empty((grid.ny, grid.nx))
    for yi, y in enumerate(ys):
        for xi, x in enumerate(xs):
            offsets[yi, xi] = manifold_offset(
                dictionary, ref, np.array([x, y]), options)
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "offset"])
            for yi, y in enumerate(ys):
                for xi, x in enumerate(xs):
                    writer.writerow([repr(float(x)), repr(float(y)),
                                     repr(float(offsets[yi, xi]))])
    return xs, ys, offsets


def coefficient_stats(dictionary: OperatorDictionary,
                      pairs: Sequence[LatentPair],
                      options: InferenceOptions | None = None, *,
                      csv_path=None) -> np.ndarray:
    """Inferred coefficients per pair, one row per pair and one column
    per operator. Optionally written as CSV."""
    table = np.empty((len(pairs), dictionary.num_ops))
    for i, pair in enumerate(pairs):
        coeffs, _ = infer_coefficients(dictionary, pair, options)
        table[i] = coeffs
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"c{m}" for m in range(dictionary.num_ops)])
            for row in table:
                writer.writerow([repr(float(v)) for v in row])
    return table
