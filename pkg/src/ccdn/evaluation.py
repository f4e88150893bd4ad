"""Detection metrics: 5-px nearest-corner matching and dataset-level rates.

Rates are pooled over the whole dataset (counts and distances are summed
across images before dividing), never averaged per image.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import read_image

MATCH_RADIUS = 5.0


@dataclass
class MatchResult:
    """``det_gt[i]`` is the matched ground-truth index of detection ``i`` (or
    ``None``), ``det_dist[i]`` its distance to the closest corner, and
    ``gt_dets[j]`` the detections matched to corner ``j``."""

    det_gt: list
    det_dist: list
    gt_dets: list

    @property
    def n_detections(self) -> int:
        return len(self.det_gt)

    @property
    def n_gt(self) -> int:
        return len(self.gt_dets)

    @property
    def false_positives(self) -> int:
        return sum(g is None for g in self.det_gt)

    @property
    def missed(self) -> int:
        return sum(not dets for dets in self.gt_dets)

    @property
    def doubles(self) -> int:
        return sum(max(0, len(dets) - 1) for dets in self.gt_dets)

    def matched_distances(self) -> list[float]:
        return [d for g, d in zip(self.det_gt, self.det_dist) if g is not None]


def _xy(points) -> np.ndarray:
    out = []
    for p in points:
        if hasattr(p, "x"):
            out.append((p.x, p.y))
        else:
            out.append((p[0], p[1]))
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def match(detections, gt_corners, radius: float = MATCH_RADIUS) -> MatchResult:
    """Assign each detection to its nearest ground-truth corner if closer than ``radius``.

    Ties in distance go to the lower ground-truth index.
    """
    det = _xy(detections)
    gt = _xy(gt_corners)
    gt_dets = [[] for _ in range(len(gt))]
    if len(gt) == 0:
        return MatchResult([None] * len(det), [math.inf] * len(det), gt_dets)
    dist = np.sqrt(((det[:, None, :] - gt[None, :, :]) ** 2).sum(axis=2))
    det_gt, det_dist = [], []
    for i in range(len(det)):
        j = int(dist[i].argmin())
        d = float(dist[i, j])
        det_dist.append(d)
        if d < radius:
            det_gt.append(j)
            gt_dets[j].append(i)
        else:
            det_gt.append(None)
    return MatchResult(det_gt, det_dist, gt_dets)


@dataclass
class MetricsReport:
    accuracy_px: float
    missed_pct: float
    double_pct: float
    false_positives: int
    n_images: int
    n_gt_corners: int
    n_detections: int

    COLUMNS = ("Accuracy", "Missed", "Double", "FalsePositives",
               "Images", "GroundTruth", "Detections")

    def row(self) -> list:
        return [f"{self.accuracy_px:.6f}", f"{self.missed_pct:.6f}", f"{self.double_pct:.6f}",
                self.false_positives, self.n_images, self.n_gt_corners, self.n_detections]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        writer.writerow(self.row())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        header, row = list(csv.reader(io.StringIO(text)))[:2]
        values = dict(zip(header, row))
        return cls(float(values["Accuracy"]), float(values["Missed"]), float(values["Double"]),
                   int(values["FalsePositives"]), int(values["Images"]),
                   int(values["GroundTruth"]), int(values["Detections"]))


def compute_metrics(results: Sequence[MatchResult]) -> MetricsReport:
    """Pooled accuracy / missed / double / false-positive statistics."""
    n_gt = sum(r.n_gt for r in results)
    if n_gt == 0:
        raise ValueError("metrics need at least one ground-truth corner")
    distances = [d for r in results for d in r.matched_distances()]
    accuracy = float(np.mean(distances)) if distances else math.nan
    return MetricsReport(
        accuracy_px=accuracy,
        missed_pct=100.0 * sum(r.missed for r in results) / n_gt,
        double_pct=100.0 * sum(r.doubles for r in results) / n_gt,
        false_positives=sum(r.false_positives for r in results),
        n_images=len(results),
        n_gt_corners=n_gt,
        n_detections=sum(r.n_detections for r in results),
    )


def per_image_csv(names: Sequence[str], results: Sequence[MatchResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image", "GroundTruth", "Detections", "Missed", "Double",
                     "FalsePositives", "MeanDistance"])
    for name, r in zip(names, results):
        d = r.matched_distances()
        writer.writerow([name, r.n_gt, r.n_detections, r.missed, r.doubles, r.false_positives,
                         f"{np.mean(d):.6f}" if d else "nan"])
    return buf.getvalue()


# --- datasets on disk -------------------------------------------------------------

class DatasetError(ValueError):
    pass


class CornerFileError(DatasetError):
    pass


def read_corners(path) -> np.ndarray:
    """Parse an ``x,y`` corner file into an ``(N, 2)`` array."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "x,y":
        raise CornerFileError(f"{path}:1: expected header 'x,y'")
    corners = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            if len(parts) != 2:
                raise ValueError
            x, y = float(parts[0]), float(parts[1])
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError
        except ValueError:
            raise CornerFileError(f"{path}:{lineno}: malformed corner line {line!r}") from None
        corners.append((x, y))
    return np.array(corners, dtype=np.float64).reshape(-1, 2)


@dataclass
class EvalSample:
    name: str
    image_path: Path
    corners: np.ndarray
    split: str = "test"
    meta: dict = field(default_factory=dict)

    def load_image(self) -> np.ndarray:
        return read_image(self.image_path)


IMAGE_SUFFIXES = (".pgm", ".png")


def load_external_dataset(root, split: str | None = None) -> list[EvalSample]:
    """Load images with their corner files.

    ``root`` is either a directory holding ``manifest.json`` (as written by
    the generator), or a directory with ``images/`` and ``corners/``
    subdirectories whose files are paired by stem.  ``split`` filters
    manifest entries.
    """
    root = Path(root)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    if manifest_path.is_file():
        return _load_manifest(manifest_path, split)
    image_dir, corner_dir = root / "images", root / "corners"
    if not image_dir.is_dir():
        raise DatasetError(f"{root}: no manifest.json and no images/ directory")
    images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    missing = [p.name for p in images if not (corner_dir / f"{p.stem}.csv").is_file()]
    if missing:
        raise DatasetError(f"{root}: missing corner files for: {', '.join(missing)}")
    return [EvalSample(p.stem, p, read_corners(corner_dir / f"{p.stem}.csv")) for p in images]


def _load_manifest(path: Path, split: str | None) -> list[EvalSample]:
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["samples"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: not a dataset manifest ({exc})") from None
    base = path.parent
    missing = [e["corners"] for e in entries if not (base / e["corners"]).is_file()]
    if missing:
        raise DatasetError(f"{path}: missing corner files for: {', '.join(missing)}")
    samples = []
    for entry in entries:
        if split is not None and entry.get("split") != split:
            continue
        image_path = base / entry["image"]
        if not image_path.is_file():
            raise DatasetError(f"{path}: missing image {entry['image']}")
        samples.append(EvalSample(Path(entry["image"]).stem, image_path,
                                  read_corners(base / entry["corners"]),
                                  entry.get("split", "test"),
                                  {k: entry[k] for k in ("board", "provenance") if k in entry}))
    return samples
