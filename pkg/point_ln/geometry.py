# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

"""Point-set primitives: centroid, farthest point sampling, k nearest
neighbors, neighborhood gathering and per-neighborhood standardization.

Coordinates are always handled in float64. All functions are pure.
"""

from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np
import numpy.typing as npt

from point_ln.exceptions import GeometryError

PointCloud = npt.NDArray[np.float64]
FeatureMatrix = npt.NDArray[np.floating]
IndexArray = npt.NDArray[np.intp]


@dataclass(frozen=True)
class Neighborhood:
    center_index: int
    indices: IndexArray
    coords: np.ndarray
    feats: np.ndarray


@dataclass(frozen=True)
class NeighborhoodBatch:
    center_indices: IndexArray
    indices: IndexArray
    coords: np.ndarray
    feats: np.ndarray

    def __len__(self) -> int:
        return len(self.center_indices)

    def neighborhoods(self) -> List[Neighborhood]:
        return [
            Neighborhood(
                center_index=int(center),
                indices=self.indices[j],
                coords=self.coords[j],
                feats=self.feats[j]
            )
            for j, center in enumerate(self.center_indices)
        ]


def as_point_cloud(points: npt.ArrayLike) -> PointCloud:
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise GeometryError('point cloud must be an N x 3 array, got shape {}'.format(cloud.shape))
    if len(cloud) == 0:
        raise GeometryError('empty point cloud')
    if not np.all(np.isfinite(cloud)):
        raise GeometryError('point cloud has non-finite coordinates')
    return cloud


def squared_distances(points: PointCloud, target: np.ndarray) -> np.ndarray:
    diff = points - target
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


def centroid(cloud: npt.ArrayLike) -> np.ndarray:
    points = as_point_cloud(cloud)
    return points.mean(axis=0)


def _pick(values: np.ndarray, points: PointCloud) -> int:
    # Largest value wins; ties go to the lexicographically smallest (x, y, z), then the smallest index.
    candidates = np.flatnonzero(values == values.max())
    if len(candidates) == 1:
        return int(candidates[0])
    tied = points[candidates]
    order = np.lexsort((candidates, tied[:, 2], tied[:, 1], tied[:, 0]))
    return int(candidates[order[0]])


def farthest_point_sample(cloud: npt.ArrayLike, m: int) -> IndexArray:
    points = as_point_cloud(cloud)
    if m < 1 or m > len(points):
        raise GeometryError('invalid sample count')
    selected = np.empty(m, dtype=np.intp)
    selected[0] = _pick(squared_distances(points, centroid(points)), points)
    min_distance = squared_distances(points, points[selected[0]])
    min_distance[selected[0]] = -np.inf
    # Per-axis columns and scratch buffers; same operation order as squared_distances.
    axes = [np.ascontiguousarray(points[:, axis]) for axis in range(3)]
    distance = np.empty(len(points))
    term = np.empty(len(points))
    for i in range(1, m):
        chosen = _pick(min_distance, points)
        selected[i] = chosen
        target = points[chosen]
        np.subtract(axes[0], target[0], out=distance)
        np.multiply(distance, distance, out=distance)
        for axis in (1, 2):
            np.subtract(axes[axis], target[axis], out=term)
            np.multiply(term, term, out=term)
            np.add(distance, term, out=distance)
        np.minimum(min_distance, distance, out=min_distance)
        min_distance[chosen] = -np.inf
    return selected


def knn(queries: npt.ArrayLike, reference: npt.ArrayLike, k: int) -> IndexArray:
    query_points = as_point_cloud(queries)
    reference_points = as_point_cloud(reference)
    n = len(reference_points)
    if k > n:
        raise GeometryError('k exceeds reference size')
    if k < 1:
        raise GeometryError('k must be positive')
    distances = squared_distances(query_points[:, None, :], reference_points[None, :, :])
    if k == n:
        return np.argsort(distances, axis=1, kind='stable')
    candidates = np.argpartition(distances, k - 1, axis=1)[:, :k]
    candidate_distances = np.take_along_axis(distances, candidates, axis=1)
    order = np.lexsort((candidates, candidate_distances), axis=1)
    result = np.take_along_axis(candidates, order, axis=1)
    # Rows tied at the k-th distance need the full stable sort to keep the smaller indices.
    kth = candidate_distances.max(axis=1, keepdims=True)
    ambiguous = np.flatnonzero(np.count_nonzero(distances <= kth, axis=1) > k)
    if len(ambiguous):
        result[ambiguous] = np.argsort(distances[ambiguous], axis=1, kind='stable')[:, :k]
    return result


def gather_batch(cloud: npt.ArrayLike, feats: np.ndarray, center_indices: npt.ArrayLike,
                 neighbor_indices: npt.ArrayLike) -> NeighborhoodBatch:
    points = as_point_cloud(cloud)
    features = np.asarray(feats)
    centers = np.asarray(center_indices, dtype=np.intp)
    neighbors = np.asarray(neighbor_indices, dtype=np.intp)
    if features.ndim != 2 or len(features) != len(points):
        raise GeometryError('feature rows must match the point count')
    if neighbors.ndim != 2 or len(neighbors) != len(centers):
        raise GeometryError('neighbor rows must match the center count')
    n = len(points)
    for indices in (centers, neighbors):
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise GeometryError('index out of bounds')
    return NeighborhoodBatch(
        center_indices=centers,
        indices=neighbors,
        coords=points[neighbors],
        feats=features[neighbors]
    )


def gather(cloud: npt.ArrayLike, feats: np.ndarray, center_indices: npt.ArrayLike,
           neighbor_indices: npt.ArrayLike) -> List[Neighborhood]:
    return gather_batch(cloud, feats, center_indices, neighbor_indices).neighborhoods()


def standardize(values: np.ndarray, epsilon: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise (x - mean) / (population std + epsilon) over axis -2.

    Returns the standardized block together with the centered values and the
    std, which the backward pass needs.
    """
    centered = values - values.mean(axis=-2, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=-2, keepdims=True))
    return centered / (std + epsilon), centered, std


def normalize_batch(batch: NeighborhoodBatch, epsilon: float) -> NeighborhoodBatch:
    if epsilon <= 0:
        raise GeometryError('epsilon must be positive')
    coords, _, _ = standardize(batch.coords, epsilon)
    feats, _, _ = standardize(batch.feats, epsilon)
    return replace(batch, coords=coords, feats=feats)


def normalize_neighborhood(n: Neighborhood, epsilon: float) -> Neighborhood:
    if epsilon <= 0:
        raise GeometryError('epsilon must be positive')
    if len(n.indices) < 1:
        raise GeometryError('empty neighborhood')
    coords, _, _ = standardize(np.asarray(n.coords, dtype=np.float64), epsilon)
    feats, _, _ = standardize(np.asarray(n.feats), epsilon)
    return replace(n, coords=coords, feats=feats)
