"""Data unification: one sample interface for detection scenes and re-ID crops.

Detection records keep their scene and get a brand-new (fresh) identity per
box. Re-ID crops are placed on a proportionally sized canvas and stretched to
the training size (expand_resize), which is what induces scale diversity; a
fixed-canvas variant (random_paste) exists for the ablation harness. Every
unified sample can then be expanded into two independently augmented views
with full bounding-box bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import DetectionRecord, ReidRecord
from .utils import as_boxes, box_area, mean_color, resize_image, rng_for

SUB_DETECTION = "detection_source"
SUB_REID = "reid_source"
SUP_FULL = "full_identity"
SUP_FRESH = "fresh_identity"


class UnificationError(Exception):
    pass


class ParameterError(UnificationError):
    pass


# ---------------------------------------------------------------------------
# Identity allocation
# ---------------------------------------------------------------------------

class IdentityAllocator:
    """Injective mapping from source persons into one global identity space.

    Labeled re-ID identities map through (dataset_id, raw id); fresh
    identities (detection boxes, unlabeled crops) are memoized by caller key
    so revisiting the same record keeps its identity for the whole run.
    """

    def __init__(self, start=0):
        self.next_fresh_id = int(start)
        self._labeled = {}
        self._fresh = {}

    def fresh(self, key=None) -> int:
        if key is not None and key in self._fresh:
            return self._fresh[key]
        gid = self.next_fresh_id
        self.next_fresh_id += 1
        if key is not None:
            self._fresh[key] = gid
        return gid

    def labeled(self, dataset_id, raw_id) -> int:
        k = (dataset_id, int(raw_id))
        if k not in self._labeled:
            gid = self.next_fresh_id
            self.next_fresh_id += 1
            self._labeled[k] = gid
        return self._labeled[k]

    @property
    def num_allocated(self) -> int:
        return self.next_fresh_id

    def labeled_ids(self):
        return set(self._labeled.values())

    def fresh_ids(self):
        return set(self._fresh.values())


# ---------------------------------------------------------------------------
# Unified samples
# ---------------------------------------------------------------------------

@dataclass
class UnifiedSample:
    image: np.ndarray           # training-size float32 HxWx3
    boxes: np.ndarray           # (N, 4)
    identities: np.ndarray      # (N,)
    domain_label: int           # index within the sub-task's domain registry
    sub_task: str               # SUB_DETECTION | SUB_REID
    supervision: str            # SUP_FULL | SUP_FRESH
    dataset_id: str = ""

    def check(self):
        h, w = self.image.shape[:2]
        assert len(self.boxes) == len(self.identities)
        b = as_boxes(self.boxes)
        if len(b):
            assert (b[:, 0] >= -1e-6).all() and (b[:, 1] >= -1e-6).all()
            assert (b[:, 2] <= w + 1e-6).all() and (b[:, 3] <= h + 1e-6).all()
        return self


@dataclass
class View:
    image: np.ndarray
    boxes: np.ndarray
    identities: np.ndarray


@dataclass
class ViewPair:
    view1: View
    view2: View
    correspondence: list        # [(index_in_view1, index_in_view2), ...]


def fit_scene(image: np.ndarray, boxes, training_size: int):
    """Aspect-preserving resize plus mean-color padding to a square canvas."""
    t = training_size
    h, w = image.shape[:2]
    s = min(t / w, t / h)
    nw, nh = max(1, round(w * s)), max(1, round(h * s))
    resized = resize_image(image, (nh, nw))
    canvas = np.empty((t, t, 3), dtype=np.float32)
    canvas[:] = mean_color(image)
    canvas[:nh, :nw] = resized
    sx, sy = nw / w, nh / h
    out = as_boxes(boxes) * np.array([sx, sy, sx, sy])
    return canvas, out.astype(np.float32)


@dataclass
class Unifier:
    """Geometry + identity policy turning corpus records into UnifiedSamples."""

    training_size: int
    detection_domains: list
    reid_domains: list
    ratio_range: tuple = (1.0, 3.0)

    def _det_label(self, dataset_id):
        try:
            return self.detection_domains.index(dataset_id)
        except ValueError:
            raise UnificationError(f"dataset {dataset_id!r} not in detection domain registry")

    def _reid_label(self, dataset_id):
        try:
            return self.reid_domains.index(dataset_id)
        except ValueError:
            raise UnificationError(f"dataset {dataset_id!r} not in re-ID domain registry")

    def unify_detection(self, rec: DetectionRecord, alloc: IdentityAllocator,
                        image: np.ndarray) -> UnifiedSample:
        """Scene -> training size (aspect-preserving + padded), fresh id per box."""
        canvas, boxes = fit_scene(image, rec.boxes, self.training_size)
        ids = [alloc.fresh(key=(rec.dataset_id, rec.image_path, j))
               for j in range(len(rec.boxes))]
        return UnifiedSample(canvas, boxes, np.asarray(ids, dtype=np.int64),
                             self._det_label(rec.dataset_id), SUB_DETECTION, SUP_FRESH,
                             rec.dataset_id).check()

    def unify_search(self, rec: DetectionRecord, alloc: IdentityAllocator,
                     image: np.ndarray) -> UnifiedSample:
        """Person-search-style scene: detection geometry, labeled identities.

        Used for target corpora whose detection records carry per-box ids
        (fine-tuning and evaluation); identities map through the allocator's
        labeled table so they stay stable for the whole run.
        """
        if rec.identities is None:
            raise UnificationError(f"record {rec.image_path} carries no identities")
        canvas, boxes = fit_scene(image, rec.boxes, self.training_size)
        ids = [alloc.labeled(rec.dataset_id, raw) for raw in rec.identities]
        return UnifiedSample(canvas, boxes, np.asarray(ids, dtype=np.int64),
                             self._det_label(rec.dataset_id), SUB_DETECTION, SUP_FULL,
                             rec.dataset_id).check()

    def _reid_identity(self, rec, alloc):
        if rec.identity is not None:
            return alloc.labeled(rec.dataset_id, rec.identity), SUP_FULL
        return alloc.fresh(key=(rec.dataset_id, rec.image_path)), SUP_FRESH

    def expand_resize(self, rec: ReidRecord, alloc: IdentityAllocator,
                      ratio: float, anchor: tuple, image: np.ndarray) -> UnifiedSample:
        """Crop on a ratio-proportioned canvas, stretched to the training size."""
        if ratio < 1.0:
            raise ParameterError(f"expand ratio {ratio} below 1.0")
        if not (self.ratio_range[0] - 1e-9 <= ratio <= self.ratio_range[1] + 1e-9):
            raise ParameterError(f"expand ratio {ratio} outside {self.ratio_range}")
        ax, ay = anchor
        if not (0 <= ax <= 1 and 0 <= ay <= 1):
            raise ParameterError(f"anchor {anchor} outside [0,1]^2")
        t = self.training_size
        h, w = image.shape[:2]
        ch, cw = max(h, round(h * ratio)), max(w, round(w * ratio))
        ox = int(round(ax * (cw - w)))
        oy = int(round(ay * (ch - h)))
        canvas = np.empty((ch, cw, 3), dtype=np.float32)
        canvas[:] = mean_color(image)
        canvas[oy:oy + h, ox:ox + w] = image
        out = resize_image(canvas, (t, t))
        sx, sy = t / cw, t / ch
        box = np.array([[ox * sx, oy * sy, (ox + w) * sx, (oy + h) * sy]], dtype=np.float32)
        gid, sup = self._reid_identity(rec, alloc)
        return UnifiedSample(out, box, np.asarray([gid], dtype=np.int64),
                             self._reid_label(rec.dataset_id), SUB_REID, sup,
                             rec.dataset_id).check()

    def random_paste(self, rec: ReidRecord, alloc: IdentityAllocator,
                     position: tuple, image: np.ndarray) -> UnifiedSample:
        """Ablation variant: crop pasted unscaled on a training-size canvas."""
        t = self.training_size
        h, w = image.shape[:2]
        if w > t or h > t:
            raise ParameterError(f"crop {w}x{h} larger than canvas {t}x{t}")
        px, py = position
        if not (0 <= px <= 1 and 0 <= py <= 1):
            raise ParameterError(f"position {position} outside [0,1]^2")
        ox = int(round(px * (t - w)))
        oy = int(round(py * (t - h)))
        canvas = np.empty((t, t, 3), dtype=np.float32)
        canvas[:] = mean_color(image)
        canvas[oy:oy + h, ox:ox + w] = image
        box = np.array([[ox, oy, ox + w, oy + h]], dtype=np.float32)
        gid, sup = self._reid_identity(rec, alloc)
        return UnifiedSample(canvas, box, np.asarray([gid], dtype=np.int64),
                             self._reid_label(rec.dataset_id), SUB_REID, sup,
                             rec.dataset_id).check()


# ---------------------------------------------------------------------------
# Two-view augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip: bool = True
    scale_crop: bool = True
    photometric: bool = True
    noise: bool = True
    crop_min: float = 0.75          # minimum crop window as a fraction of each side
    brightness_delta: float = 0.15
    contrast_range: tuple = (0.8, 1.2)
    saturation_range: tuple = (0.7, 1.3)
    noise_max: float = 0.03
    drop_below: float = 0.2         # retained-area fraction below which a box is dropped


@dataclass
class AugmentParams:
    """A fully explicit augmentation chain; applying it is a pure function."""
    flip: bool
    crop: tuple                 # (x0, y0, x1, y1) integer window, post-flip frame
    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    noise_sigma: float = 0.0
    noise_key: tuple = ()
    drop_below: float = 0.2

    @classmethod
    def neutral(cls, width, height):
        return cls(flip=False, crop=(0, 0, width, height))


def _crop_window_1d(length, centers, frac, rng):
    w = max(2, int(round(length * frac)))
    if len(centers):
        span_lo, span_hi = float(np.min(centers)), float(np.max(centers))
        w = max(w, int(np.ceil(span_hi - span_lo)) + 2)
        if w >= length:
            return 0, length
        lo = max(0.0, span_hi - w)
        hi = min(float(length - w), span_lo)
        if hi < lo:
            return 0, length
    else:
        w = min(w, length)
        lo, hi = 0.0, float(length - w)
    c0 = int(round(rng.uniform(lo, hi))) if hi > lo else int(round(lo))
    return c0, w


def sample_augment_params(rng, width, height, boxes, cfg: AugmentConfig) -> AugmentParams:
    boxes = as_boxes(boxes)
    flip = bool(cfg.flip and rng.random() < 0.5)
    if cfg.scale_crop:
        cx = (boxes[:, 0] + boxes[:, 2]) / 2
        cy = (boxes[:, 1] + boxes[:, 3]) / 2
        if flip:
            cx = width - cx
        frac = rng.uniform(cfg.crop_min, 1.0)
        x0, cw = _crop_window_1d(width, cx, frac, rng)
        y0, chh = _crop_window_1d(height, cy, frac, rng)
        crop = (x0, y0, x0 + cw, y0 + chh)
    else:
        crop = (0, 0, width, height)
    brightness = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta) if cfg.photometric else 0.0
    contrast = rng.uniform(*cfg.contrast_range) if cfg.photometric else 1.0
    saturation = rng.uniform(*cfg.saturation_range) if cfg.photometric else 1.0
    sigma = rng.uniform(0.0, cfg.noise_max) if cfg.noise else 0.0
    noise_key = tuple(int(v) for v in rng.integers(0, 2**31, size=4))
    return AugmentParams(flip, crop, brightness, contrast, saturation, sigma, noise_key,
                         cfg.drop_below)


def transform_boxes(boxes, params: AugmentParams, width, height):
    """Analytic box mapping through the chain's geometry.

    Returns (transformed boxes, indices of surviving boxes). Boxes are clipped
    to the crop window and dropped when their retained area falls below the
    drop threshold.
    """
    b = as_boxes(boxes).copy()
    n = len(b)
    if n == 0:
        return b.astype(np.float32), np.arange(0)
    if params.flip:
        b = np.stack([width - b[:, 2], b[:, 1], width - b[:, 0], b[:, 3]], axis=1)
    x0, y0, x1, y1 = params.crop
    orig_area = box_area(b)
    clipped = b.copy()
    clipped[:, 0::2] = np.clip(clipped[:, 0::2], x0, x1)
    clipped[:, 1::2] = np.clip(clipped[:, 1::2], y0, y1)
    retained = box_area(clipped) / np.maximum(orig_area, 1e-12)
    keep = np.nonzero(retained >= params.drop_below)[0]
    clipped = clipped[keep]
    sx = width / (x1 - x0)
    sy = height / (y1 - y0)
    out = (clipped - np.array([x0, y0, x0, y0])) * np.array([sx, sy, sx, sy])
    return out.astype(np.float32), keep


def apply_augment_image(image, params: AugmentParams) -> np.ndarray:
    """Apply the chain to pixels; exact identity when every component is neutral."""
    h, w = image.shape[:2]
    img = image
    touched = False
    if params.flip:
        img = img[:, ::-1]
        touched = True
    x0, y0, x1, y1 = params.crop
    if (x0, y0, x1, y1) != (0, 0, w, h):
        img = resize_image(np.ascontiguousarray(img[y0:y1, x0:x1]), (h, w))
        touched = True
    if params.saturation != 1.0:
        gray = img.mean(axis=2, keepdims=True)
        img = gray + (img - gray) * params.saturation
        touched = True
    if params.contrast != 1.0:
        m = img.mean()
        img = (img - m) * params.contrast + m
        touched = True
    if params.brightness != 0.0:
        img = img + params.brightness
        touched = True
    if params.noise_sigma > 0.0:
        noise = rng_for(*params.noise_key).normal(0.0, params.noise_sigma, size=img.shape)
        img = img + noise.astype(np.float32)
        touched = True
    if touched:
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        return np.ascontiguousarray(img)
    return image.copy()


def apply_geometry_to_mask(mask, params: AugmentParams) -> np.ndarray:
    """Warp a float mask through the chain's geometric part only (oracle path)."""
    h, w = mask.shape[:2]
    m = mask.astype(np.float32)
    if params.flip:
        m = m[:, ::-1]
    x0, y0, x1, y1 = params.crop
    if (x0, y0, x1, y1) != (0, 0, w, h):
        m = resize_image(np.ascontiguousarray(m[y0:y1, x0:x1]), (h, w))
    return m


def apply_augment(sample_img, boxes, identities, params: AugmentParams) -> View:
    h, w = sample_img.shape[:2]
    new_boxes, keep = transform_boxes(boxes, params, w, h)
    img = apply_augment_image(sample_img, params)
    ids = np.asarray(identities, dtype=np.int64)[keep] if len(keep) else np.zeros(0, np.int64)
    return View(img, new_boxes, ids)


def make_view_pair(sample: UnifiedSample, seed, cfg: AugmentConfig = None) -> ViewPair:
    """Two independently augmented views plus identity-based box correspondence."""
    cfg = cfg or AugmentConfig()
    h, w = sample.image.shape[:2]
    views = []
    for v in (1, 2):
        rng = rng_for(seed, "aug", v)
        params = sample_augment_params(rng, w, h, sample.boxes, cfg)
        views.append(apply_augment(sample.image, sample.boxes, sample.identities, params))
    id_to_j = {int(gid): j for j, gid in enumerate(views[1].identities)}
    correspondence = [(i, id_to_j[int(gid)]) for i, gid in enumerate(views[0].identities)
                      if int(gid) in id_to_j]
    return ViewPair(views[0], views[1], correspondence)


def identity_view_pair(sample: UnifiedSample) -> ViewPair:
    """The all-neutral chain: both views equal the sample, full correspondence."""
    h, w = sample.image.shape[:2]
    params = AugmentParams.neutral(w, h)
    v1 = apply_augment(sample.image, sample.boxes, sample.identities, params)
    v2 = apply_augment(sample.image, sample.boxes, sample.identities, params)
    corr = [(i, i) for i in range(len(sample.boxes))]
    return ViewPair(v1, v2, corr)


def box_from_mask(mask) -> tuple:
    """Subpixel box from a (possibly resampled) rectangle coverage mask.

    Edge positions are recovered from marginal coverage profiles by mass
    integration, which is exact for area-sampled masks and accurate for
    bilinear-warped ones. Independent of the analytic box transform.
    """
    m = np.asarray(mask, dtype=np.float64)
    sx = m.sum(axis=0)
    sy = m.sum(axis=1)

    def edges(profile):
        top = profile.max()
        if top <= 0:
            return None
        p = np.clip(profile / top, 0.0, 1.0)
        k = int(np.argmax(p))
        left = float(np.sum(1.0 - p[:k]))
        right = float(k + 1 + np.sum(p[k + 1:]))
        return left, right

    ex = edges(sx)
    ey = edges(sy)
    if ex is None or ey is None:
        return None
    return (ex[0], ey[0], ex[1], ey[1])
