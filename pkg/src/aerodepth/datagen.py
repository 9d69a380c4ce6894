"""Ground-truth depth masks, crop/smoothing preprocessing, synthetic scenes, manifests."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"bbox width/height must be positive, got {self.w}x{self.h}")

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def clip(self, height: int, width: int) -> Optional["BBox"]:
        """Intersection with a height x width image, or None when empty."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def shifted(self, dx: int, dy: int) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class AnnotatedFrame:
    image_path: str
    bbox: BBox
    distance_m: float
    frame_id: str

    def __post_init__(self):
        if not math.isfinite(self.distance_m) or self.distance_m < 0:
            raise ValueError(f"distance_m must be finite and >= 0, got {self.distance_m}")


@dataclass(frozen=True)
class ClassBins:
    upper_edges_m: Tuple[float, ...] = (200.0, 400.0, 600.0, 700.0)
    background_class: int = 4

    def __post_init__(self):
        edges = self.upper_edges_m
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"bin edges must be strictly increasing: {edges}")
        if self.background_class != len(edges):
            raise ValueError("background class must equal the number of edges")

    @property
    def num_classes(self) -> int:
        return len(self.upper_edges_m) + 1


DEFAULT_BINS = ClassBins()


@dataclass(frozen=True)
class SynthParams:
    focal_px: float = 1200.0
    wingspan_m: float = 12.0
    image_size: int = 512
    distance_range_m: Tuple[float, float] = (50.0, 900.0)
    noise_std: float = 0.02
    seed: int = 0
    # height / width of the silhouette ellipse
    aspect: float = 0.5

    def validate(self) -> None:
        lo, hi = self.distance_range_m
        if self.focal_px <= 0 or self.wingspan_m <= 0:
            raise ValueError("focal_px and wingspan_m must be positive")
        if not (0 < lo <= hi < math.inf):
            raise ValueError(f"distance range must lie in (0, inf), got {self.distance_range_m}")
        if self.image_size < 4:
            raise ValueError("image_size too small")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def bin_distance(d: float, bins: ClassBins = DEFAULT_BINS) -> int:
    """Smallest class whose upper edge is strictly greater than ``d``.

    The background class needs ``d`` strictly beyond the last edge, so a
    distance exactly on it (700 m by default) stays in the closer class.
    """
    if not math.isfinite(d):
        raise ValueError(f"distance must be finite, got {d}")
    if d < 0:
        raise ValueError(f"distance must be >= 0, got {d}")
    for i, edge in enumerate(bins.upper_edges_m):
        if d < edge:
            return i
    if d == bins.upper_edges_m[-1]:
        return bins.background_class - 1
    return bins.background_class


def build_mask(frame: AnnotatedFrame, image_shape: Tuple[int, int], bins: ClassBins = DEFAULT_BINS) -> np.ndarray:
    """Background-class mask with the (clipped) bbox painted with the object's class."""
    h, w = image_shape[:2]
    box = frame.bbox.clip(h, w)
    if box is None:
        raise ValueError(f"bbox {frame.bbox} lies fully outside the {h}x{w} image")
    mask = np.full((h, w), float(bins.background_class), dtype=np.float32)
    mask[box.y : box.y + box.h, box.x : box.x + box.w] = bin_distance(frame.distance_m, bins)
    return mask


def crop_window(bbox: BBox, image_shape: Tuple[int, int], crop: int) -> Tuple[int, int]:
    """Top-left (x0, y0) of the crop x crop window centred on ``bbox``."""
    h, w = image_shape[:2]
    if crop <= 0:
        raise ValueError("crop must be positive")
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    cx, cy = bbox.center
    x0 = int(math.floor(cx - crop / 2.0))
    y0 = int(math.floor(cy - crop / 2.0))
    return min(max(x0, 0), w - crop), min(max(y0, 0), h - crop)


def center_crop(image: np.ndarray, mask: Optional[np.ndarray], bbox: BBox, crop: int):
    """Crop image (H x W or H x W x C) and mask identically around the bbox centre.

    The window is translated, never shrunk, to stay inside the image. Returns
    ``(image_crop, mask_crop, bbox_in_crop)``; ``mask_crop`` is None when no
    mask was given.
    """
    x0, y0 = crop_window(bbox, image.shape, crop)
    img = image[y0 : y0 + crop, x0 : x0 + crop]
    msk = None if mask is None else mask[y0 : y0 + crop, x0 : x0 + crop]
    return img.copy(), None if msk is None else msk.copy(), bbox.shifted(-x0, -y0)


def gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    r = ksize // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(mask: np.ndarray, sigma: float = 2.0, ksize: int = 9) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    if ksize % 2 == 0 or ksize < 1:
        raise ValueError(f"ksize must be a positive odd integer, got {ksize}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = gaussian_kernel(sigma, ksize)
    r = ksize // 2
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    rows = np.pad(m, ((r, r), (0, 0)), mode="reflect")
    tmp = sum(k[i] * rows[i : i + h] for i in range(ksize))
    cols = np.pad(tmp, ((0, 0), (r, r)), mode="reflect")
    out = sum(k[j] * cols[:, j : j + w] for j in range(ksize))
    # the weighted average cannot leave the input range, rounding aside
    return np.clip(out, m.min(), m.max()).astype(np.float32)


def apparent_size(distance_m: float, params: SynthParams) -> float:
    return params.focal_px * params.wingspan_m / distance_m


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float) -> np.ndarray:
    ys = np.arange(size)[:, None] + 0.5
    xs = np.arange(size)[None, :] + 0.5
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def synth_scene(params: SynthParams, rng: np.random.Generator, frame_id: str = "",
                image_path: str = "") -> Tuple[np.ndarray, AnnotatedFrame]:
    """One grayscale sky image with a dark elliptical silhouette.

    The silhouette width follows the pinhole relation focal * wingspan / d for
    a distance d drawn uniformly from ``distance_range_m``.
    """
    params.validate()
    n = params.image_size
    lo, hi = params.distance_range_m
    for _ in range(100):
        d = float(rng.uniform(lo, hi))
        width = apparent_size(d, params)
        height = width * params.aspect
        if 2.0 <= width <= n - 2:
            break
    else:
        raise ValueError("no distance in 100 draws gave a silhouette between 2 px and the image size")
    a, b = width / 2.0, height / 2.0
    cx = float(rng.uniform(a + 1, n - a - 1))
    cy = float(rng.uniform(b + 1, n - b - 1))
    top = rng.uniform(0.6, 0.9)
    bottom = top - rng.uniform(0.05, 0.25)
    sky = np.linspace(top, bottom, n)[:, None] * np.ones((1, n))
    shade = rng.uniform(0.05, 0.3)
    inside = _ellipse_mask(n, cx, cy, a, b)
    img = np.where(inside, shade, sky) + rng.normal(0.0, params.noise_std, size=(n, n))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    ys, xs = np.nonzero(inside)
    bbox = BBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
    return img, AnnotatedFrame(image_path, bbox, d, frame_id)


def frame_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per frame so output does not depend on worker count."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def synth_dataset(params: SynthParams, count: int, start: int = 0):
    """Yield ``count`` (image, frame) pairs for frame indices start .. start+count-1."""
    for i in range(start, start + count):
        fid = f"f{i:06d}"
        yield synth_scene(params, frame_rng(params.seed, i), frame_id=fid, image_path=f"images/{fid}.pgm")


# ---------------------------------------------------------------------------
# manifest: frame_id \t image_path \t x \t y \t w \t h \t distance_m
# ---------------------------------------------------------------------------

_FIELDS = ("frame_id", "image_path", "x", "y", "w", "h", "distance_m")


def format_record(frame: AnnotatedFrame) -> str:
    b = frame.bbox
    for name, value in (("frame_id", frame.frame_id), ("image_path", frame.image_path)):
        if "\t" in value or "\n" in value:
            raise ManifestError(f"{name} may not contain tabs or newlines: {value!r}")
    return "\t".join([frame.frame_id, frame.image_path, str(b.x), str(b.y), str(b.w), str(b.h),
                      repr(float(frame.distance_m))])


def parse_record(line: str, lineno: int = 1) -> AnnotatedFrame:
    parts = line.split("\t")
    if len(parts) != len(_FIELDS):
        raise ManifestError(f"line {lineno}: expected {len(_FIELDS)} tab-separated fields, got {len(parts)}")
    values = {}
    for name, raw in zip(_FIELDS, parts):
        try:
            if name in ("x", "y", "w", "h"):
                values[name] = int(raw)
            elif name == "distance_m":
                values[name] = float(raw)
            else:
                values[name] = raw
        except ValueError:
            raise ManifestError(f"line {lineno}: field {name}: cannot parse {raw!r}") from None
    if not values["frame_id"]:
        raise ManifestError(f"line {lineno}: field frame_id: empty")
    d = values["distance_m"]
    if not math.isfinite(d) or d < 0:
        raise ManifestError(f"line {lineno}: field distance_m: must be finite and >= 0, got {d}")
    for name in ("w", "h"):
        if values[name] <= 0:
            raise ManifestError(f"line {lineno}: field {name}: must be positive, got {values[name]}")
    bbox = BBox(values["x"], values["y"], values["w"], values["h"])
    return AnnotatedFrame(values["image_path"], bbox, d, values["frame_id"])


def write_manifest(frames: Sequence[AnnotatedFrame], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for frame in frames:
            fh.write(format_record(frame) + "\n")


def load_manifest(path) -> List[AnnotatedFrame]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()
    frames = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line == "":
            continue
        frames.append(parse_record(line.rstrip("\r"), lineno))
    return frames


def resolve_image_path(frame: AnnotatedFrame, manifest_path) -> str:
    """Image paths in a manifest are relative to the manifest's directory."""
    if os.path.isabs(frame.image_path):
        return frame.image_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), frame.image_path)
