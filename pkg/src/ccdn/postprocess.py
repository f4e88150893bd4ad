"""False-positive elimination on CCDN response maps.

Three stages run in order: keep pixels scoring at least half the map
maximum, greedy non-maximum suppression on 4x4 boxes, then k-means++
clustering (k = 10) that drops every cluster of two or fewer points.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import CcdnParams, forward


@dataclass(frozen=True, order=True)
class Detection:
    x: int
    y: int
    score: float


@dataclass
class Cluster:
    member_indices: list
    centroid: np.ndarray

    @property
    def size(self) -> int:
        return len(self.member_indices)


@dataclass
class DetectOptions:
    threshold: bool = True
    nms: bool = True
    cluster: bool = True
    nms_iou: float = 0.5
    box_size: int = 4
    k: int = 10
    max_dropped_size: int = 2
    seed: int = 0


def adaptive_threshold(response: np.ndarray) -> list[Detection]:
    """Every pixel scoring at least half of the map maximum, in row-major order."""
    response = np.asarray(response)
    peak = float(response.max()) if response.size else 0.0
    if peak <= 0:
        return []
    ys, xs = np.nonzero(response >= peak / 2)
    return [Detection(int(x), int(y), float(response[y, x])) for y, x in zip(ys, xs)]


def positive_pixels(response: np.ndarray) -> list[Detection]:
    """All pixels with a nonzero score (used when thresholding is disabled)."""
    response = np.asarray(response)
    ys, xs = np.nonzero(response > 0)
    return [Detection(int(x), int(y), float(response[y, x])) for y, x in zip(ys, xs)]


def box_iou(a: Detection, b: Detection, box_size: int = 4) -> float:
    """IoU of the two ``box_size`` squares spanning ``[x - s/2, x + s/2)``."""
    ix = max(0, box_size - abs(a.x - b.x))
    iy = max(0, box_size - abs(a.y - b.y))
    inter = ix * iy
    return inter / (2 * box_size * box_size - inter)


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5,
        box_size: int = 4) -> list[Detection]:
    """Greedy NMS; survivors are returned in descending score order.

    Ties in score are broken by ``(y, x)`` ascending.  A box is suppressed
    when its IoU with an already kept box is strictly above the threshold.
    """
    if not detections:
        return []
    order = sorted(detections, key=lambda d: (-d.score, d.y, d.x))
    xs = np.array([d.x for d in order], dtype=np.int64)
    ys = np.array([d.y for d in order], dtype=np.int64)
    alive = np.ones(len(order), dtype=bool)
    area = box_size * box_size
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(order[i])
        rest = slice(i + 1, None)
        ix = np.maximum(0, box_size - np.abs(xs[rest] - xs[i]))
        iy = np.maximum(0, box_size - np.abs(ys[rest] - ys[i]))
        inter = ix * iy
        iou = inter / (2 * area - inter)
        alive[rest] &= iou <= iou_threshold
    return kept


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def kmeans_cost(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def kmeans_pp_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Careful seeding: first centre uniform, the rest drawn with probability
    proportional to the squared distance to the nearest chosen centre."""
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].astype(np.float64)


def kmeans_pp(points, k: int = 10, seed=0, max_iter: int = 100,
              history: list | None = None) -> list[Cluster]:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when assignments no longer change or after ``max_iter`` updates.
    If ``history`` is given, the clustering cost after every assignment and
    every centroid update is appended to it.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise ValueError("k-means needs at least one point")
    k = min(k, len(points))
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_seeds(points, k, rng)
    labels = _sq_dists(points, centroids).argmin(axis=1)
    if history is not None:
        history.append(kmeans_cost(points, centroids, labels))
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
        if history is not None:
            history.append(kmeans_cost(points, centroids, labels))
        new_labels = _sq_dists(points, centroids).argmin(axis=1)
        if history is not None:
            history.append(kmeans_cost(points, centroids, new_labels))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return [Cluster(np.flatnonzero(labels == j).tolist(), centroids[j].copy()) for j in range(k)]


def cluster_filter(detections: Sequence[Detection], k: int = 10, seed=0,
                   max_dropped_size: int = 2) -> list[Detection]:
    """Drop detections whose k-means cluster has ``max_dropped_size`` members or fewer."""
    detections = list(detections)
    if len(detections) <= max_dropped_size:
        return detections
    points = np.array([(d.x, d.y) for d in detections], dtype=np.float64)
    keep = np.zeros(len(detections), dtype=bool)
    for cluster in kmeans_pp(points, k, seed):
        if cluster.size > max_dropped_size:
            keep[cluster.member_indices] = True
    return [d for d, kept in zip(detections, keep) if kept]


def postprocess(response: np.ndarray, options: DetectOptions | None = None) -> list[Detection]:
    options = options or DetectOptions()
    found = adaptive_threshold(response) if options.threshold else positive_pixels(response)
    if options.nms:
        found = nms(found, options.nms_iou, options.box_size)
    if options.cluster:
        found = cluster_filter(found, options.k, options.seed, options.max_dropped_size)
    return found


def detect(image, params: CcdnParams, options: DetectOptions | None = None) -> list[Detection]:
    """Network response followed by the enabled post-processing stages."""
    return postprocess(forward(image, params), options)


def write_detections(path, detections: Iterable[Detection]) -> None:
    lines = ["x,y,score"] + [f"{d.x},{d.y},{d.score:.9g}" for d in detections]
    Path(path).write_text("\n".join(lines) + "\n")


def read_detections(path) -> list[Detection]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "x,y,score":
        raise ValueError(f"{path}: missing 'x,y,score' header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            x, y, score = line.split(",")
            out.append(Detection(int(x), int(y), float(score)))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed detection line {line!r}") from None
    return out
