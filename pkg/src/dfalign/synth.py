"""Synthetic garment-landmark images with controllable pose, deformation and zoom-in.

Each sample starts from a garment template (eight anchor points in the unit
square), gets a pose transform, a smooth non-rigid warp, a similarity
placement and optionally a zoom that pushes landmarks out of frame. Landmarks
are drawn as small direction-coded glyphs on a filled silhouette with
connecting strokes. Pixel coordinates are continuous: pixel ``(row i, col j)``
covers ``[j, j+1) x [i, i+1)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.draw import line_aa, polygon

from .geometry import (INVISIBLE, LANDMARK_NAMES, SUBSETS, TRUNCATED, VISIBLE, BBox,
                       LandmarkSet, classify_subset, normalize_landmarks)
from .seeding import derive_seed, rng_for

POSES = ("front", "side", "back")

# (x, y) in the unit square, y down; order follows LANDMARK_NAMES
TEMPLATES = {
    "upper-body": np.array([
        [0.42, 0.16], [0.58, 0.16], [0.20, 0.36], [0.80, 0.36],
        [0.32, 0.58], [0.68, 0.58], [0.31, 0.80], [0.69, 0.80]]),
    "lower-body": np.array([
        [0.36, 0.14], [0.64, 0.14], [0.30, 0.84], [0.70, 0.84],
        [0.33, 0.34], [0.67, 0.34], [0.44, 0.86], [0.56, 0.86]]),
    "full-body": np.array([
        [0.44, 0.10], [0.56, 0.10], [0.22, 0.52], [0.78, 0.52],
        [0.37, 0.44], [0.63, 0.44], [0.27, 0.90], [0.73, 0.90]]),
}
SLEEVE, COLLAR = (2, 3), (0, 1)
EDGES = ((0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6), (5, 7), (6, 7), (0, 4), (1, 5))
OUTLINE = (0, 2, 4, 6, 7, 5, 3, 1)

DEFAULT_MIX = {"normal-pose": 0.30, "medium-pose": 0.20, "large-pose": 0.15,
               "medium-zoom": 0.20, "large-zoom": 0.15}


class GenerationError(ValueError):
    pass


@dataclass
class GenerationConfig:
    n_samples: int = 100
    image_size: int = 64
    n_landmarks: int = 8
    subset_mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    invisible_fraction: float = 0.05
    deformation: float = 0.03
    medium_zoom_truncated: tuple[int, int] = (2, 3)
    large_zoom_truncated: tuple[int, int] = (4, 6)
    zoom_range: tuple[float, float] = (1.3, 3.2)
    zoom_pose_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    noise: float = 0.03
    max_attempts: int = 500

    def validate(self):
        if self.n_samples < 1 or self.image_size < 32:
            raise GenerationError("n_samples must be >= 1 and image_size >= 32")
        if self.n_landmarks != len(LANDMARK_NAMES):
            raise GenerationError(f"templates define {len(LANDMARK_NAMES)} landmarks, "
                                  f"config asks for {self.n_landmarks}")
        for name, (lo, hi) in (("medium_zoom_truncated", self.medium_zoom_truncated),
                               ("large_zoom_truncated", self.large_zoom_truncated)):
            if hi > self.n_landmarks:
                raise GenerationError(f"{name} asks for {hi} truncated landmarks but only "
                                      f"{self.n_landmarks} exist")
            if lo > hi:
                raise GenerationError(f"{name} range is empty")
        if self.medium_zoom_truncated[0] < 2 or self.medium_zoom_truncated[1] > 3:
            raise GenerationError("medium zoom-in needs 2..3 truncated landmarks")
        if self.large_zoom_truncated[0] < 4:
            raise GenerationError("large zoom-in needs at least 4 truncated landmarks")
        unknown = set(self.subset_mix) - set(SUBSETS)
        if unknown:
            raise GenerationError(f"unknown subsets in mix: {sorted(unknown)}")
        if not np.isclose(sum(self.subset_mix.values()), 1.0):
            raise GenerationError("subset mix must sum to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("medium_zoom_truncated", "large_zoom_truncated", "zoom_range", "zoom_pose_weights"):
            d[k] = list(d[k])
        return d


@dataclass
class RenderStyle:
    background: float = 0.10
    fill: float = 0.35
    stroke: float = 0.60
    glyph_sigma: float = 0.9
    satellite: float = 0.7
    satellite_radius: float = 2.6
    occluder: float = 0.5
    noise: float = 0.0


@dataclass
class SyntheticSample:
    image: np.ndarray                 # (H, W) in [0, 1]
    landmarks: LandmarkSet            # pixel coordinates
    bbox: BBox
    pose: str
    zoom: float
    template: str
    seed: int
    sample_id: str = ""

    @property
    def normalized(self) -> LandmarkSet:
        return LandmarkSet(normalize_landmarks(self.landmarks.coords, self.bbox), self.landmarks.visibility)

    @property
    def subset(self) -> str:
        return classify_subset(self.pose, self.landmarks.visibility)


# -- geometry of one sample -----------------------------------------------------

def _layout(template: str, rng) -> np.ndarray:
    pts = TEMPLATES[template].copy()
    width = rng.uniform(0.85, 1.15)
    pts[:, 0] = 0.5 + (pts[:, 0] - 0.5) * width
    length = rng.uniform(0.85, 1.15)
    pts[:, 1] = pts[0, 1] + (pts[:, 1] - pts[0, 1]) * length
    reach = rng.uniform(0.75, 1.25)
    for s, c in zip(SLEEVE, COLLAR):
        pts[s] = pts[c] + (pts[s] - pts[c]) * reach
    return pts


def _pose(pts, pose, rng) -> np.ndarray:
    pts = pts.copy()
    if pose == "front":
        pts += rng.normal(0, 0.01, pts.shape)
    elif pose == "side":
        squeeze = rng.uniform(0.45, 0.7)
        shear = rng.uniform(-0.3, 0.3)
        pts[:, 0] = 0.5 + (pts[:, 0] - 0.5) * squeeze + shear * (pts[:, 1] - 0.5)
        # the far side recedes
        far = 1 if rng.random() < 0.5 else 0
        pts[far::2, 0] = 0.5 + (pts[far::2, 0] - 0.5) * 0.7
    elif pose == "back":
        pts[:, 0] = 1.0 - pts[:, 0]
        pts += rng.normal(0, 0.01, pts.shape)
    else:
        raise GenerationError(f"unknown pose {pose!r}")
    return pts


def _warp(pts, amplitude, rng) -> np.ndarray:
    if amplitude <= 0:
        return pts
    a = amplitude * rng.uniform(0.5, 1.0, size=2)
    f = rng.uniform(0.5, 1.5, size=2)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    out = pts.copy()
    out[:, 0] += a[0] * np.sin(2 * np.pi * f[0] * pts[:, 1] + ph[0])
    out[:, 1] += a[1] * np.sin(2 * np.pi * f[1] * pts[:, 0] + ph[1])
    return out


def _place(pts, rng, margin=0.07) -> np.ndarray:
    """Random rotation/scale about the center, then a shift keeping all points inside."""
    theta = np.deg2rad(rng.uniform(-12, 12))
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    mid = (pts.min(0) + pts.max(0)) / 2
    pts = (pts - mid) @ rot.T
    extent = pts.max(0) - pts.min(0)
    limit = (1 - 2 * margin) / max(extent.max(), 1e-9)
    pts = pts * min(rng.uniform(0.7, 0.95), limit)
    lo = margin - pts.min(0)
    hi = 1 - margin - pts.max(0)
    return pts + rng.uniform(np.minimum(lo, hi), np.maximum(lo, hi))


def _visibility(px, size, invisible_fraction, rng) -> np.ndarray:
    inside = np.all((px >= 0) & (px < size), axis=1)
    vis = np.where(inside, VISIBLE, TRUNCATED)
    occluded = inside & (rng.random(len(px)) < invisible_fraction)
    vis[occluded] = INVISIBLE
    return vis


# -- rendering --------------------------------------------------------------

def _glyph(img, x, y, k, style: RenderStyle):
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    s2 = 2 * style.glyph_sigma ** 2
    g = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / s2)
    ang = k * np.pi / 4
    sx, sy = x + style.satellite_radius * np.cos(ang), y + style.satellite_radius * np.sin(ang)
    g = np.maximum(g, style.satellite * np.exp(-((xx - sx) ** 2 + (yy - sy) ** 2) / s2))
    np.maximum(img, g, out=img)


def _stroke(img, p0, p1, level):
    size = img.shape[0]
    (x0, y0), (x1, y1) = np.asarray(p0) - 0.5, np.asarray(p1) - 0.5
    rr, cc, val = line_aa(int(round(y0)), int(round(x0)), int(round(y1)), int(round(x1)))
    ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
    img[rr[ok], cc[ok]] = np.maximum(img[rr[ok], cc[ok]], level * val[ok])


def render_image(coords_px, visibility, template: str = "upper-body",
                 style: RenderStyle | None = None, size: int = 64, rng=None,
                 pose: str = "front") -> np.ndarray:
    """Draw a garment silhouette, strokes and one glyph per visible landmark.

    Front and side views get a V-shaped neckline under the collar and the back
    view a straight collar band, which is what tells a back view apart from a
    mirrored front.

    Invisible landmarks are covered by an occluder patch; truncated ones lie
    outside the frame. Without ``rng`` (or with ``style.noise == 0``) the
    output is a pure function of the inputs.
    """
    if size < 32:
        raise ValueError("image size must be at least 32")
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}")
    style = style or RenderStyle()
    coords_px = np.asarray(coords_px, float).reshape(-1, 2)
    visibility = np.asarray(visibility).reshape(-1)
    img = np.full((size, size), style.background)
    if len(coords_px) == 0:
        return img
    n = len(coords_px)
    if n == len(OUTLINE):
        rr, cc = polygon(coords_px[list(OUTLINE), 1] - 0.5, coords_px[list(OUTLINE), 0] - 0.5, (size, size))
        img[rr, cc] = style.fill
        for a, b in EDGES:
            _stroke(img, coords_px[a], coords_px[b], style.stroke)
        left, right = coords_px[COLLAR[0]], coords_px[COLLAR[1]]
        if pose == "back":
            for dy in (0.0, 1.0, 2.0):
                _stroke(img, left + [0, dy], right + [0, dy], 1.0)
        else:
            tip = (left + right) / 2 + [0.0, 0.4 * np.linalg.norm(right - left)]
            _stroke(img, left, tip, style.stroke)
            _stroke(img, right, tip, style.stroke)
    for k in range(n):
        if visibility[k] == VISIBLE:
            _glyph(img, coords_px[k, 0], coords_px[k, 1], k, style)
    for k in range(n):
        if visibility[k] == INVISIBLE:
            x, y = coords_px[k]
            c0, r0 = int(np.floor(x)) - 4, int(np.floor(y)) - 4
            img[max(r0, 0):max(r0 + 9, 0), max(c0, 0):max(c0 + 9, 0)] = style.occluder
    if rng is not None and style.noise > 0:
        img = img + rng.normal(0, style.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


# -- dataset generation -----------------------------------------------------------

def _zoom(pts, size, trunc_range, cfg: GenerationConfig, rng):
    lo, hi = trunc_range
    gmin, gmax = pts.min(0), pts.max(0)
    for _ in range(cfg.max_attempts):
        z = rng.uniform(*cfg.zoom_range)
        c = rng.uniform(gmin, gmax)
        zp = 0.5 + z * (pts - c)
        out = np.sum(~np.all((zp * size >= 0) & (zp * size < size), axis=1))
        if lo <= out <= hi:
            return zp, z
    raise GenerationError(f"could not place a zoom with {lo}..{hi} truncated landmarks")


def generate_sample(cfg: GenerationConfig, seed: int, index: int) -> SyntheticSample:
    rng = rng_for(seed, "sample", index)
    subset = SUBSETS[int(rng.choice(len(SUBSETS), p=[cfg.subset_mix.get(s, 0.0) for s in SUBSETS]))]
    template = list(TEMPLATES)[int(rng.integers(len(TEMPLATES)))]
    if subset.endswith("pose"):
        pose = POSES[SUBSETS.index(subset)]
    else:
        pose = POSES[int(rng.choice(3, p=cfg.zoom_pose_weights))]
    pts = _place(_warp(_pose(_layout(template, rng), pose, rng), cfg.deformation, rng), rng)
    zoom = 1.0
    if subset == "medium-zoom":
        pts, zoom = _zoom(pts, cfg.image_size, cfg.medium_zoom_truncated, cfg, rng)
    elif subset == "large-zoom":
        pts, zoom = _zoom(pts, cfg.image_size, cfg.large_zoom_truncated, cfg, rng)
    size = cfg.image_size
    px = pts * size
    vis = _visibility(px, size, cfg.invisible_fraction, rng)
    style = RenderStyle(background=rng.uniform(0.05, 0.15), fill=rng.uniform(0.25, 0.45),
                        stroke=rng.uniform(0.5, 0.7), noise=cfg.noise)
    img = render_image(px, vis, template, style, size, rng, pose)
    img = np.round(img * 255) / 255  # stored as 8-bit graymaps
    return SyntheticSample(img, LandmarkSet(px, vis), BBox(size / 2, size / 2, size, size),
                           pose, float(zoom), template, derive_seed(seed, "sample", index),
                           sample_id=f"{index:06d}")


class Dataset:
    """Array-backed collection of samples; indexing yields :class:`SyntheticSample`."""

    def __init__(self, images, coords, visibility, bboxes, poses, zooms, templates,
                 sample_ids, seeds=None):
        self.images = np.asarray(images, dtype=np.float64)
        self.coords = np.asarray(coords, dtype=float)
        self.visibility = np.asarray(visibility, dtype=np.int64)
        self.bboxes = np.asarray(bboxes, dtype=float).reshape(-1, 4)
        self.poses = list(poses)
        self.zooms = np.asarray(zooms, dtype=float)
        self.templates = list(templates)
        self.sample_ids = list(sample_ids)
        self.seeds = list(seeds) if seeds is not None else [0] * len(self.sample_ids)

    @classmethod
    def from_samples(cls, samples) -> "Dataset":
        samples = list(samples)
        return cls([s.image for s in samples], [s.landmarks.coords for s in samples],
                    [s.landmarks.visibility for s in samples], [s.bbox.as_tuple() for s in samples],
                    [s.pose for s in samples], [s.zoom for s in samples],
                    [s.template for s in samples], [s.sample_id for s in samples],
                    [s.seed for s in samples])

    def __len__(self):
        return len(self.sample_ids)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return self.subset_of(np.arange(len(self))[i])
        return SyntheticSample(self.images[i], LandmarkSet(self.coords[i], self.visibility[i]),
                               BBox(*self.bboxes[i]), self.poses[i], float(self.zooms[i]),
                               self.templates[i], self.seeds[i], self.sample_ids[i])

    def subset_of(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.coords[idx], self.visibility[idx], self.bboxes[idx],
                       [self.poses[i] for i in idx], self.zooms[idx],
                       [self.templates[i] for i in idx], [self.sample_ids[i] for i in idx],
                       [self.seeds[i] for i in idx])

    @property
    def n_landmarks(self) -> int:
        return self.coords.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def normalized(self) -> np.ndarray:
        return normalize_landmarks(self.coords, self.bboxes)

    @property
    def subsets(self) -> list[str]:
        return [classify_subset(p, v) for p, v in zip(self.poses, self.visibility)]

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self.images, other.images) and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.visibility, other.visibility)
                and np.array_equal(self.bboxes, other.bboxes) and self.poses == other.poses
                and np.array_equal(self.zooms, other.zooms) and self.templates == other.templates
                and self.sample_ids == other.sample_ids)


def generate_dataset(cfg: GenerationConfig, seed: int) -> Dataset:
    cfg.validate()
    return Dataset.from_samples(generate_sample(cfg, seed, i) for i in range(cfg.n_samples))


def split(dataset: Dataset, fractions, seed: int) -> tuple[Dataset, ...]:
    """Seeded disjoint, exhaustive split. Sizes round; the last part takes the remainder."""
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("split fractions must be non-negative and sum to 1")
    n = len(dataset)
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if min(sizes) <= 0:
        raise ValueError(f"split would produce an empty part: sizes {sizes}")
    perm = rng_for(seed, "split").permutation(n)
    parts, start = [], 0
    for s in sizes:
        parts.append(dataset.subset_of(np.sort(perm[start:start + s])))
        start += s
    return tuple(parts)


# -- files --------------------------------------------------------------------

CSV_FIXED = ("sample_id", "bbox_xc", "bbox_yc", "bbox_w", "bbox_h")
CSV_TAIL = ("pose", "zoom", "template")


def csv_header(n_landmarks: int) -> list[str]:
    cols = list(CSV_FIXED)
    for i in range(n_landmarks):
        cols += [f"x{i}", f"y{i}", f"v{i}"]
    return cols + list(CSV_TAIL)


def save_dataset(dataset: Dataset, path, manifest: dict | None = None) -> None:
    """One P5 graymap per sample under ``images/`` plus ``annotations.csv``."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    with open(path / "annotations.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(dataset.n_landmarks))
        for i in range(len(dataset)):
            pixels = np.round(dataset.images[i] * 255).astype(np.uint8)
            Image.fromarray(pixels).save(path / "images" / f"{dataset.sample_ids[i]}.pgm")
            row = [dataset.sample_ids[i]] + [repr(float(v)) for v in dataset.bboxes[i]]
            for (x, y), v in zip(dataset.coords[i], dataset.visibility[i]):
                row += [repr(float(x)), repr(float(y)), str(int(v))]
            row += [dataset.poses[i], repr(float(dataset.zooms[i])), dataset.templates[i]]
            w.writerow(row)
    if manifest is not None:
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    csv_path = path / "annotations.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"no dataset at {path} (missing annotations.csv)")
    ids, boxes, coords, vis, poses, zooms, templates, images = [], [], [], [], [], [], [], []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = (len(header) - len(CSV_FIXED) - len(CSV_TAIL)) // 3
        if header != csv_header(n):
            raise ValueError(f"{csv_path}:1: unexpected header")
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                box = [float(v) for v in row[1:5]]
                BBox(*box)
                pts, states = [], []
                for i in range(n):
                    x, y, v = row[5 + 3 * i: 8 + 3 * i]
                    if v not in ("0", "1", "2"):
                        raise ValueError(f"visibility token {v!r} not in {{0,1,2}}")
                    pts.append((float(x), float(y)))
                    states.append(int(v))
                pose, zoom, template = row[-3:]
                if pose not in POSES:
                    raise ValueError(f"unknown pose {pose!r}")
                if template not in TEMPLATES:
                    raise ValueError(f"unknown template {template!r}")
                zoom = float(zoom)
                img = np.asarray(Image.open(path / "images" / f"{row[0]}.pgm"), dtype=np.float64) / 255
                if img.ndim != 2:
                    raise ValueError("image is not grayscale")
                pts = np.asarray(pts)
                states = np.asarray(states)
                inside = np.all((pts >= 0) & (pts < np.array(img.shape[::-1])), axis=1)
                if np.any(inside & (states == TRUNCATED)) or np.any(~inside & (states != TRUNCATED)):
                    raise ValueError("visibility disagrees with in-frame test")
            except (ValueError, OSError) as exc:
                raise ValueError(f"{csv_path}:{lineno}: {exc}") from exc
            ids.append(row[0])
            boxes.append(box)
            coords.append(pts)
            vis.append(states)
            poses.append(pose)
            zooms.append(zoom)
            templates.append(template)
            images.append(img)
    if not ids:
        raise ValueError(f"{csv_path}: no samples")
    return Dataset(images, coords, vis, boxes, poses, zooms, templates, ids)
