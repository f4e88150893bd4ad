"""Synthetic checkerboard images with exact corner ground truth.

Boards are rendered through a plane-to-image homography over a procedurally
cluttered background.  Augmentations (right-angle rotation, intensity
inversion, Brown-Conrady distortion, Gaussian noise, resizing) transform the
image and the corner list together, so labels stay exact.

Coordinates are ``(x, y)`` in pixels with pixel centres at integers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .imageio import write_image
from .training import LabelMap

BOARD_PRESETS = ("7x7", "6x9", "7x11", "9x9", "12x13")
# 8000 training images out of 8900 in total
DEFAULT_TRAIN_FRACTION = 8000 / 8900


class PoseError(ValueError):
    """The board does not project inside the canvas."""


class DistortionError(ValueError):
    """Distortion coefficients fold the image or push corners out of frame."""


@dataclass(frozen=True)
class BoardSpec:
    inner_rows: int
    inner_cols: int
    square_size: float = 10.0
    border: float = 1.0

    def __post_init__(self):
        if self.inner_rows < 2 or self.inner_cols < 2:
            raise ValueError("a board needs at least 2x2 inner corners")
        if self.square_size < 4:
            raise ValueError("square_size must be >= 4 px")
        if self.border < 0:
            raise ValueError("border must be >= 0")

    @classmethod
    def parse(cls, text: str, **kwargs) -> "BoardSpec":
        """``"7x11"`` -> 7 inner rows, 11 inner columns."""
        try:
            rows, cols = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"board must look like ROWSxCOLS, got {text!r}") from None
        return cls(rows, cols, **kwargs)

    @property
    def name(self) -> str:
        return f"{self.inner_rows}x{self.inner_cols}"

    @property
    def n_corners(self) -> int:
        return self.inner_rows * self.inner_cols

    def plane_corners(self) -> np.ndarray:
        """Inner corners on the board plane, row-major, as ``(N, 2)``."""
        s = self.square_size
        ys, xs = np.mgrid[1:self.inner_rows + 1, 1:self.inner_cols + 1]
        return np.stack([xs.ravel() * s, ys.ravel() * s], axis=1).astype(np.float64)

    def outline(self) -> np.ndarray:
        """Outer edge of the white margin on the board plane."""
        s, b = self.square_size, self.border * self.square_size
        x1 = (self.inner_cols + 1) * s + b
        y1 = (self.inner_rows + 1) * s + b
        return np.array([[-b, -b], [x1, -b], [x1, y1], [-b, y1]], dtype=np.float64)


@dataclass
class Sample:
    image: np.ndarray                 # (H, W) float32 in [0, 1]
    corners: np.ndarray               # (N, 2) float64 (x, y)
    provenance: list = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def label_map(self) -> LabelMap:
        return make_label_map(self.corners, (self.width, self.height))


@dataclass
class AugmentConfig:
    rotation_choices: tuple = (0, 90, 180, 270)
    invert_probability: float = 0.5
    k1_range: tuple = (-0.4, 0.4)
    k2_range: tuple = (-0.1, 0.1)
    p1_range: tuple = (-0.01, 0.01)
    p2_range: tuple = (-0.01, 0.01)
    noise_sigma_range: tuple = (0.0, 0.04)
    resize_to: tuple | None = (640, 480)
    seed: int = 0

    def __post_init__(self):
        if not set(self.rotation_choices) <= {0, 90, 180, 270} or not self.rotation_choices:
            raise ValueError("rotation_choices must be a non-empty subset of {0, 90, 180, 270}")
        if not 0 <= self.invert_probability <= 1:
            raise ValueError("invert_probability must be in [0, 1]")
        for name in ("k1_range", "k2_range", "p1_range", "p2_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError(f"{name} must be a finite (low, high) pair")
        if self.noise_sigma_range[0] < 0:
            raise ValueError("noise sigma must be >= 0")


# --- geometry -----------------------------------------------------------------

def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    homog = np.c_[points, np.ones(len(points))] @ np.asarray(h, dtype=np.float64).T
    return homog[:, :2] / homog[:, 2:3]


def translation(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0, dx], [0, 1.0, dy], [0, 0, 1.0]])


def random_pose(spec: BoardSpec, canvas: tuple[int, int], rng: np.random.Generator,
                max_tilt_deg: float = 35.0, max_roll_deg: float = 30.0,
                fill: tuple[float, float] = (0.7, 0.95)) -> np.ndarray:
    """Random perspective homography that keeps the whole board inside ``canvas``."""
    w, h = canvas
    outline = spec.outline()
    centre = outline.mean(axis=0)
    for _ in range(100):
        tilt_x, tilt_y = np.deg2rad(rng.uniform(-max_tilt_deg, max_tilt_deg, size=2))
        roll = np.deg2rad(rng.uniform(-max_roll_deg, max_roll_deg))
        rx = np.array([[1, 0, 0], [0, math.cos(tilt_x), -math.sin(tilt_x)],
                       [0, math.sin(tilt_x), math.cos(tilt_x)]])
        ry = np.array([[math.cos(tilt_y), 0, math.sin(tilt_y)], [0, 1, 0],
                       [-math.sin(tilt_y), 0, math.cos(tilt_y)]])
        rz = np.array([[math.cos(roll), -math.sin(roll), 0],
                       [math.sin(roll), math.cos(roll), 0], [0, 0, 1]])
        rot = rz @ ry @ rx
        size = np.ptp(outline, axis=0).max()
        distance = 2.0 * size
        # plane point (X, Y) -> camera frame rot @ (X - cx, Y - cy, 0) + (0, 0, distance)
        plane_to_cam = np.c_[rot[:, :2], rot @ np.r_[-centre, 0.0] + [0, 0, distance]]
        projected = apply_homography(plane_to_cam, outline)
        lo, hi = projected.min(axis=0), projected.max(axis=0)
        scale = rng.uniform(*fill) * min(w / (hi - lo)[0], h / (hi - lo)[1])
        span = (hi - lo) * scale
        offset = rng.uniform([0, 0], [w - 1 - span[0], h - 1 - span[1]]) - lo * scale
        fit = np.array([[scale, 0, offset[0]], [0, scale, offset[1]], [0, 0, 1]])
        pose = fit @ plane_to_cam
        pose /= pose[2, 2]
        if _inside(apply_homography(pose, outline), canvas):
            return pose
    raise PoseError("could not find a pose that fits the canvas")


def _inside(points: np.ndarray, canvas: tuple[int, int]) -> bool:
    w, h = canvas
    return bool(np.all((points[:, 0] >= 0) & (points[:, 0] <= w - 1)
                       & (points[:, 1] >= 0) & (points[:, 1] <= h - 1)))


# --- rendering ----------------------------------------------------------------

def cluttered_background(canvas: tuple[int, int], seed) -> np.ndarray:
    """Gradient + random rectangles/ellipses + smooth texture noise."""
    w, h = canvas
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (xs * math.cos(angle) + ys * math.sin(angle)) / max(w, h)
    bg = rng.uniform(0.3, 0.7) + rng.uniform(-0.25, 0.25) * ramp
    for _ in range(rng.integers(4, 12)):
        level = rng.uniform(0.1, 0.9)
        alpha = rng.uniform(0.3, 0.9)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        a, b = rng.uniform(0.05, 0.3) * w, rng.uniform(0.05, 0.3) * h
        theta = rng.uniform(0, np.pi)
        u = (xs - cx) * math.cos(theta) + (ys - cy) * math.sin(theta)
        v = -(xs - cx) * math.sin(theta) + (ys - cy) * math.cos(theta)
        if rng.random() < 0.5:
            mask = (np.abs(u) < a) & (np.abs(v) < b)
        else:
            mask = (u / a) ** 2 + (v / b) ** 2 < 1
        soft = ndimage.gaussian_filter(mask.astype(np.float64), rng.uniform(0.5, 2.0))
        bg = bg * (1 - alpha * soft) + level * alpha * soft
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), rng.uniform(1.0, 4.0))
    bg += texture / (texture.std() + 1e-12) * rng.uniform(0.0, 0.05)
    return np.clip(bg, 0.0, 1.0)


def _board_texture(spec: BoardSpec, oversample: int = 4):
    """Board albedo (black 0 / white 1) and coverage mask on a fine plane grid.

    Texel ``t`` is centred on plane coordinate ``(t + 0.5) / oversample + origin``.
    """
    s = spec.square_size
    margin = spec.border * s
    x0, y0 = -margin, -margin
    x1 = (spec.inner_cols + 1) * s + margin
    y1 = (spec.inner_rows + 1) * s + margin
    nx = int(math.ceil((x1 - x0) * oversample))
    ny = int(math.ceil((y1 - y0) * oversample))
    px = x0 + (np.arange(nx) + 0.5) / oversample
    py = y0 + (np.arange(ny) + 0.5) / oversample
    gx, gy = np.meshgrid(px, py)
    col = np.floor(gx / s)
    row = np.floor(gy / s)
    in_squares = (gx >= 0) & (gx < (spec.inner_cols + 1) * s) & (gy >= 0) & (gy < (spec.inner_rows + 1) * s)
    black = in_squares & ((row + col) % 2 == 0)
    albedo = np.where(black, 0.0, 1.0)
    return albedo, (x0, y0)


def render_board(spec: BoardSpec, pose: np.ndarray, canvas: tuple[int, int] = (640, 480),
                 background_seed=0, oversample: int = 4, supersample: int = 3) -> Sample:
    """Render ``spec`` through the plane-to-image homography ``pose``.

    The board texture is sampled bilinearly at ``supersample**2`` points per
    pixel; corners are the exact homography images of the lattice points.
    """
    w, h = canvas
    pose = np.asarray(pose, dtype=np.float64)
    if not _inside(apply_homography(pose, spec.outline()), canvas):
        raise PoseError("board projects outside the canvas")
    rng = np.random.default_rng(background_seed)
    black_level = rng.uniform(0.02, 0.3)
    white_level = rng.uniform(0.65, 0.98)
    albedo, (x0, y0) = _board_texture(spec, oversample)
    inverse = np.linalg.inv(pose)

    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    shade = np.zeros((h, w))
    cover = np.zeros((h, w))
    for oy in offsets:
        for ox in offsets:
            pts = np.stack([(xs + ox).ravel(), (ys + oy).ravel()], axis=1)
            plane = apply_homography(inverse, pts)
            tx = (plane[:, 0] - x0) * oversample - 0.5
            ty = (plane[:, 1] - y0) * oversample - 0.5
            coords = np.stack([ty, tx])
            shade += ndimage.map_coordinates(albedo, coords, order=1, mode="nearest").reshape(h, w)
            inside = ((tx >= -0.5) & (tx <= albedo.shape[1] - 0.5)
                      & (ty >= -0.5) & (ty <= albedo.shape[0] - 0.5))
            cover += inside.reshape(h, w)
    n = supersample * supersample
    shade /= n
    cover /= n
    board = black_level + (white_level - black_level) * shade
    image = cover * board + (1 - cover) * cluttered_background(canvas, rng.integers(2**32))
    corners = apply_homography(pose, spec.plane_corners())
    record = {"op": "render", "board": spec.name, "canvas": [w, h]}
    return Sample(image.astype(np.float32), corners, [record])


# --- augmentations --------------------------------------------------------------

def rotate(sample: Sample, angle: int) -> Sample:
    """Rotate counter-clockwise by a right angle (pixel permutation)."""
    if angle not in (0, 90, 180, 270):
        raise ValueError(f"rotation must be a right angle, got {angle}")
    h, w = sample.image.shape
    x, y = sample.corners[:, 0], sample.corners[:, 1]
    if angle == 0:
        corners = sample.corners.copy()
    elif angle == 90:
        corners = np.stack([y, w - 1 - x], axis=1)
    elif angle == 180:
        corners = np.stack([w - 1 - x, h - 1 - y], axis=1)
    else:
        corners = np.stack([h - 1 - y, x], axis=1)
    image = np.ascontiguousarray(np.rot90(sample.image, k=angle // 90))
    return Sample(image, corners, sample.provenance + [{"op": "rotate", "angle": angle}])


def invert_intensity(sample: Sample) -> Sample:
    return Sample((1.0 - sample.image).astype(sample.image.dtype), sample.corners.copy(),
                  sample.provenance + [{"op": "invert"}])


def distort_normalized(x, y, k1, k2, p1, p2):
    """Brown-Conrady forward model on normalized coordinates."""
    r2 = x * x + y * y
    radial = 1 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return xd, yd


def _distortion_jacobian(x, y, k1, k2, p1, p2):
    r2 = x * x + y * y
    radial = 1 + k1 * r2 + k2 * r2 * r2
    dradial = 2 * k1 + 4 * k2 * r2            # d(radial)/d(r2) * 2
    dxx = radial + x * dradial * x + 2 * p1 * y + 6 * p2 * x
    dxy = x * dradial * y + 2 * p1 * x + 2 * p2 * y
    dyx = y * dradial * x + 2 * p1 * x + 2 * p2 * y
    dyy = radial + y * dradial * y + 6 * p1 * y + 2 * p2 * x
    return dxx, dxy, dyx, dyy


def undistort_normalized(xd, yd, k1, k2, p1, p2, max_steps: int = 20, tol: float = 1e-6):
    """Invert :func:`distort_normalized` by Newton's method.

    Iterates until every residual is below ``tol``, then takes one more
    (quadratically convergent) polishing step, all within ``max_steps``.
    Returns ``(x, y, converged)`` with ``converged`` a boolean array.
    """
    xd = np.asarray(xd, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    x, y = xd.copy(), yd.copy()
    polished = False
    for _ in range(max_steps):
        fx, fy = distort_normalized(x, y, k1, k2, p1, p2)
        rx, ry = fx - xd, fy - yd
        if np.all(np.hypot(rx, ry) < tol):
            if polished:
                break
            polished = True
        a, b, c, d = _distortion_jacobian(x, y, k1, k2, p1, p2)
        det = a * d - b * c
        det = np.where(np.abs(det) < 1e-12, 1e-12, det)
        x = x - (d * rx - b * ry) / det
        y = y - (-c * rx + a * ry) / det
    fx, fy = distort_normalized(x, y, k1, k2, p1, p2)
    return x, y, np.hypot(fx - xd, fy - yd) < tol


def default_intrinsics(width: int, height: int):
    """Distortion centre at the image centre, focal length = image width."""
    return ((width - 1) / 2.0, (height - 1) / 2.0), float(width)


def distort_points(points, k1, k2, p1, p2, center, focal) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    cx, cy = center
    xd, yd = distort_normalized((points[:, 0] - cx) / focal, (points[:, 1] - cy) / focal,
                                k1, k2, p1, p2)
    return np.stack([xd * focal + cx, yd * focal + cy], axis=1)


def undistort_points(points, k1, k2, p1, p2, center, focal) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    cx, cy = center
    x, y, ok = undistort_normalized((points[:, 0] - cx) / focal, (points[:, 1] - cy) / focal,
                                    k1, k2, p1, p2)
    if not np.all(ok):
        raise DistortionError("undistortion did not converge")
    return np.stack([x * focal + cx, y * focal + cy], axis=1)


def distort(sample: Sample, k1: float, k2: float, p1: float, p2: float,
            center=None, focal: float | None = None) -> Sample:
    """Apply lens distortion: resample by inverse mapping, forward-map corners."""
    h, w = sample.image.shape
    default_center, default_focal = default_intrinsics(w, h)
    center = default_center if center is None else tuple(center)
    focal = default_focal if focal is None else float(focal)
    cx, cy = center
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xu, yu, ok = undistort_normalized((xs - cx) / focal, (ys - cy) / focal, k1, k2, p1, p2)
    if not np.all(ok):
        raise DistortionError("distortion is not invertible over the image")
    a, b, c, d = _distortion_jacobian(xu, yu, k1, k2, p1, p2)
    if np.any(a * d - b * c <= 0):
        raise DistortionError("distortion folds over inside the image")
    corners = distort_points(sample.corners, k1, k2, p1, p2, center, focal)
    if not _inside(corners, (w, h)):
        raise DistortionError("distortion pushes corners out of the image")
    coords = np.stack([yu * focal + cy, xu * focal + cx])
    image = ndimage.map_coordinates(sample.image.astype(np.float64), coords, order=1,
                                    mode="nearest")
    record = {"op": "distort", "k1": k1, "k2": k2, "p1": p1, "p2": p2,
              "center": [cx, cy], "focal": focal}
    return Sample(image.astype(np.float32), corners, sample.provenance + [record])


def add_noise(sample: Sample, sigma: float, seed=None) -> Sample:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    record = {"op": "noise", "sigma": sigma}
    if sigma == 0:
        return Sample(sample.image.copy(), sample.corners.copy(), sample.provenance + [record])
    rng = np.random.default_rng(seed)
    noisy = sample.image + rng.normal(0.0, sigma, size=sample.image.shape)
    return Sample(np.clip(noisy, 0.0, 1.0).astype(np.float32), sample.corners.copy(),
                  sample.provenance + [record])


def resize(sample: Sample, size: tuple[int, int]) -> Sample:
    """Bilinear resize to ``(width, height)`` with pixel-centre alignment."""
    w1, h1 = size
    h0, w0 = sample.image.shape
    if (w0, h0) == (w1, h1):
        return sample
    sx, sy = w0 / w1, h0 / h1
    image = sample.image.astype(np.float64)
    if sx > 1 or sy > 1:
        image = ndimage.gaussian_filter(image, (max(sy, 1) / 2.0 - 0.5 + 1e-9,
                                                max(sx, 1) / 2.0 - 0.5 + 1e-9))
    ys, xs = np.mgrid[0:h1, 0:w1].astype(np.float64)
    coords = np.stack([(ys + 0.5) * sy - 0.5, (xs + 0.5) * sx - 0.5])
    out = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    corners = np.stack([(sample.corners[:, 0] + 0.5) / sx - 0.5,
                        (sample.corners[:, 1] + 0.5) / sy - 0.5], axis=1)
    return Sample(out.astype(np.float32), corners,
                  sample.provenance + [{"op": "resize", "size": [w1, h1]}])


def make_label_map(corners, size: tuple[int, int]) -> LabelMap:
    """Binary map with a 1 at each corner rounded half-up to the nearest pixel."""
    w, h = size
    labels = np.zeros((h, w), dtype=np.uint8)
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    if len(corners):
        px = np.floor(corners[:, 0] + 0.5).astype(int)
        py = np.floor(corners[:, 1] + 0.5).astype(int)
        if np.any((px < 0) | (px >= w) | (py < 0) | (py >= h)):
            raise ValueError("corner outside the image")
        labels[py, px] = 1
    return LabelMap(labels)


# --- datasets -------------------------------------------------------------------

def _uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Rotation, inversion, distortion, noise, resize -- in that order."""
    sample = rotate(sample, int(rng.choice(config.rotation_choices)))
    if rng.random() < config.invert_probability:
        sample = invert_intensity(sample)
    for _ in range(20):
        coeffs = [_uniform(rng, r) for r in (config.k1_range, config.k2_range,
                                             config.p1_range, config.p2_range)]
        if not any(coeffs):
            break
        try:
            sample = distort(sample, *coeffs)
            break
        except DistortionError:
            continue
    sample = add_noise(sample, _uniform(rng, config.noise_sigma_range), rng.integers(2**32))
    if config.resize_to is not None:
        w, h = config.resize_to
        if sample.height > sample.width:
            w, h = h, w                       # keep portrait images portrait
        sample = resize(sample, (w, h))
    return sample


def make_sample(spec: BoardSpec, canvas: tuple[int, int], config: AugmentConfig, seed) -> Sample:
    """Render one randomly posed board and push it through the augmentation cascade."""
    rng = np.random.default_rng(seed)
    pose = random_pose(spec, canvas, rng)
    sample = render_board(spec, pose, canvas, background_seed=rng.integers(2**32))
    return augment(sample, config, rng)


def fit_square_size(spec: BoardSpec, canvas: tuple[int, int]) -> float:
    """Square size (plane units) at which the board roughly fills the canvas."""
    w, h = canvas
    return max(4.0, min(w / (spec.inner_cols + 1 + 2 * spec.border),
                        h / (spec.inner_rows + 1 + 2 * spec.border)))


def write_corners(path, corners) -> None:
    lines = ["x,y"] + [f"{x:.6f},{y:.6f}" for x, y in np.asarray(corners).reshape(-1, 2)]
    Path(path).write_text("\n".join(lines) + "\n")


def generate_dataset(boards: Sequence[BoardSpec], count: int, out_dir,
                     augment_config: AugmentConfig | None = None,
                     canvas: tuple[int, int] = (640, 480),
                     train_fraction: float = DEFAULT_TRAIN_FRACTION,
                     image_format: str = "pgm") -> dict:
    """Render ``count`` samples cycling through ``boards`` and write them to disk.

    Layout: ``images/NNNNN.pgm``, ``corners/NNNNN.csv`` and ``manifest.json``.
    Everything is derived from ``augment_config.seed``; the same call twice
    produces byte-identical files.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not boards:
        raise ValueError("at least one board spec is required")
    config = augment_config or AugmentConfig()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "corners").mkdir(exist_ok=True)

    seeds = np.random.SeedSequence(config.seed).spawn(count + 1)
    n_train = int(round(count * train_fraction))
    if count > 1:
        n_train = min(max(n_train, 1), count - 1)
    order = np.random.default_rng(seeds[-1]).permutation(count)
    split = np.empty(count, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:]] = "val"

    entries = []
    for i in range(count):
        spec = boards[i % len(boards)]
        sized = replace(spec, square_size=fit_square_size(spec, canvas))
        sample = make_sample(sized, canvas, config, seeds[i])
        image_name = f"images/{i:05d}.{image_format}"
        corner_name = f"corners/{i:05d}.csv"
        try:
            write_image(out / image_name, sample.image)
            write_corners(out / corner_name, sample.corners)
        except OSError as exc:
            raise OSError(f"failed to write sample {i}: {exc}") from exc
        entries.append({
            "image": image_name,
            "corners": corner_name,
            "split": split[i],
            "board": spec.name,
            "size": [sample.width, sample.height],
            "provenance": sample.provenance,
        })
    manifest = {
        "version": 1,
        "seed": config.seed,
        "canvas": list(canvas),
        "count": count,
        "n_train": int(n_train),
        "n_val": int(count - n_train),
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
