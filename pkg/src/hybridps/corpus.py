"""Dataset registry: manifest file format and a procedural synthetic multi-domain corpus.

A corpus is a set of domains, each one a directory with PNG images plus a
newline-delimited JSON manifest. Three kinds exist: whole-scene detection
domains (boxes, optionally per-box identities for person-search-style target
domains), labeled re-ID crop domains and unlabeled re-ID crop domains.

The synthetic generator draws parametric "person" glyphs (head / torso / legs
with identity-determined colors) on domain-styled backgrounds, so identity
ground truth is exact and domains are visually separable by construction.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .utils import (
    canonical_json,
    image_size,
    iou_matrix,
    load_image,
    rng_for,
    save_image,
)

MANIFEST_VERSION = 1
KINDS = ("detection", "reid_labeled", "reid_unlabeled")
GLYPH_PALETTE_CAPACITY = 256


class CorpusError(Exception):
    """Base class for manifest and generation failures."""


class ManifestParseError(CorpusError):
    pass


class ManifestValidationError(CorpusError):
    pass


class ManifestIngestionError(CorpusError):
    pass


class CorpusGenerationError(CorpusError):
    pass


# ---------------------------------------------------------------------------
# Records and manifests
# ---------------------------------------------------------------------------

@dataclass
class DetectionRecord:
    image_path: str                 # relative to the manifest directory
    boxes: list                     # [(x0, y0, x1, y1), ...] in pixels
    dataset_id: str
    identities: list | None = None  # per-box ids, only for person-search-style domains

    def validate(self, width, height, where=""):
        if self.identities is not None and len(self.identities) != len(self.boxes):
            raise ManifestValidationError(
                f"{where}: identities length {len(self.identities)} != boxes length {len(self.boxes)}")
        for j, b in enumerate(self.boxes):
            x0, y0, x1, y1 = b
            if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
                raise ManifestValidationError(
                    f"{where}: box {j} {tuple(b)} outside image {width}x{height} or degenerate")


@dataclass
class ReidRecord:
    image_path: str
    identity: int | None
    dataset_id: str

    def validate(self, width, height, where=""):
        if self.identity is not None and self.identity < 0:
            raise ManifestValidationError(f"{where}: negative identity {self.identity}")


@dataclass
class CorpusManifest:
    dataset_id: str
    kind: str
    records: list
    image_size_stats: dict = field(default_factory=dict)
    root: str = "."

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ManifestValidationError(f"unknown manifest kind {self.kind!r}")

    def resolve(self, record) -> str:
        return os.path.join(self.root, record.image_path)

    def same_content(self, other) -> bool:
        return (self.dataset_id == other.dataset_id and self.kind == other.kind
                and self.records == other.records
                and self.image_size_stats == other.image_size_stats)


def _record_to_json(rec) -> dict:
    if isinstance(rec, DetectionRecord):
        out = {"image": rec.image_path, "boxes": [list(map(float, b)) for b in rec.boxes]}
        if rec.identities is not None:
            out["identities"] = [int(i) for i in rec.identities]
        return out
    return {"image": rec.image_path,
            "identity": None if rec.identity is None else int(rec.identity)}


def _size_stats(sizes) -> dict:
    ws = [s[0] for s in sizes]
    hs = [s[1] for s in sizes]
    if not ws:
        return {"width": [0, 0], "height": [0, 0]}
    return {"width": [int(min(ws)), int(max(ws))], "height": [int(min(hs)), int(max(hs))]}


def save_manifest(manifest: CorpusManifest, path) -> None:
    """Write header line plus one canonical-JSON record per line."""
    header = {"manifest_version": MANIFEST_VERSION, "kind": manifest.kind,
              "dataset_id": manifest.dataset_id}
    lines = [canonical_json(header)]
    lines += [canonical_json(_record_to_json(r)) for r in manifest.records]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_manifest(path) -> CorpusManifest:
    """Parse and fully validate a manifest file.

    Raises ManifestParseError (malformed line, with its line number),
    ManifestValidationError (invariant violation, naming the record) or
    ManifestIngestionError (referenced image missing).
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ManifestIngestionError(f"manifest file not found: {path}")
    root = os.path.dirname(path) or "."
    with open(path, "r", encoding="utf-8") as f:
        raw_lines = f.read().splitlines()
    lines = [(i + 1, s) for i, s in enumerate(raw_lines) if s.strip()]
    if not lines:
        raise ManifestParseError(f"{path}: empty manifest")

    def parse(lineno, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ManifestParseError(f"{path}: malformed JSON at line {lineno}: {e}") from e

    header = parse(*lines[0])
    if not isinstance(header, dict) or "kind" not in header or "dataset_id" not in header:
        raise ManifestParseError(f"{path}: line {lines[0][0]} is not a valid manifest header")
    if header.get("manifest_version") != MANIFEST_VERSION:
        raise ManifestParseError(
            f"{path}: unsupported manifest_version {header.get('manifest_version')!r}")
    kind = header["kind"]
    if kind not in KINDS:
        raise ManifestParseError(f"{path}: unknown kind {kind!r} in header")
    dataset_id = header["dataset_id"]

    records = []
    sizes = []
    for lineno, text in lines[1:]:
        obj = parse(lineno, text)
        where = f"{path}: record at line {lineno}"
        if not isinstance(obj, dict) or "image" not in obj:
            raise ManifestParseError(f"{where} has no image field")
        img_path = os.path.join(root, obj["image"])
        if not os.path.exists(img_path):
            raise ManifestIngestionError(f"{where}: referenced image missing: {img_path}")
        w, h = image_size(img_path)
        sizes.append((w, h))
        if kind == "detection":
            if "boxes" not in obj:
                raise ManifestValidationError(f"{where}: detection record without boxes")
            rec = DetectionRecord(obj["image"], [tuple(b) for b in obj["boxes"]],
                                  dataset_id, obj.get("identities"))
        else:
            if "identity" not in obj:
                raise ManifestValidationError(f"{where}: re-ID record without identity field")
            ident = obj["identity"]
            if kind == "reid_labeled" and ident is None:
                raise ManifestValidationError(f"{where}: labeled re-ID record missing identity")
            if kind == "reid_unlabeled" and ident is not None:
                raise ManifestValidationError(f"{where}: unlabeled re-ID record carries identity")
            rec = ReidRecord(obj["image"], ident, dataset_id)
        rec.validate(w, h, where)
        records.append(rec)

    return CorpusManifest(dataset_id, kind, records, _size_stats(sizes), root)


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

@dataclass
class StyleSpec:
    """Per-domain look: background palette, stripe texture, pixel noise."""
    palette: list                    # list of RGB triples in [0, 1]
    texture_freq: float = 5.0        # stripe cycles across the long image side
    texture_angle: float = 0.0       # radians
    noise: float = 0.02              # additive gaussian sigma


@dataclass
class DomainSpec:
    name: str
    kind: str                        # detection | reid_labeled | reid_unlabeled
    images: int
    size: tuple                      # (width, height)
    style: StyleSpec
    identities: int = 0              # labeled re-ID / identity-carrying detection domains
    glyphs_per_image: tuple = (1, 4)
    with_identities: bool = False    # detection domains: record per-box identities

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CorpusGenerationError(f"domain {self.name}: unknown kind {self.kind!r}")
        if self.kind == "reid_labeled" and self.identities <= 0:
            raise CorpusGenerationError(f"domain {self.name}: labeled re-ID needs identities > 0")
        if self.with_identities and self.kind != "detection":
            raise CorpusGenerationError(f"domain {self.name}: with_identities is for detection kinds")


@dataclass
class SynthSpec:
    domains: list

    def __post_init__(self):
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise CorpusGenerationError("duplicate domain names in synthetic spec")


def identity_color_pair(dataset_id, identity, seed):
    """Deterministic (torso RGB, legs RGB) for an identity within a dataset."""
    if identity >= GLYPH_PALETTE_CAPACITY:
        raise CorpusGenerationError(
            f"identity {identity} exceeds glyph palette capacity {GLYPH_PALETTE_CAPACITY}")
    perm = rng_for(seed, "palette", dataset_id).permutation(GLYPH_PALETTE_CAPACITY)
    idx = int(perm[int(identity)])
    phi = 0.6180339887498949
    hue_t = (idx * phi) % 1.0
    sat_t = 0.65 + 0.3 * ((idx * 7) % 4) / 3.0
    val_t = 0.55 + 0.4 * ((idx * 13) % 3) / 2.0
    hue_l = (hue_t + 0.31 + 0.2 * ((idx * 5) % 3) / 2.0) % 1.0
    val_l = 0.35 + 0.45 * ((idx * 11) % 4) / 3.0
    torso = colorsys.hsv_to_rgb(hue_t, sat_t, val_t)
    legs = colorsys.hsv_to_rgb(hue_l, 0.8, val_l)
    return np.array(torso, dtype=np.float32), np.array(legs, dtype=np.float32)


def render_background(width, height, style: StyleSpec, rng) -> np.ndarray:
    pal = np.asarray(style.palette, dtype=np.float32).reshape(-1, 3)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float32)
    phase = rng.uniform(0, 2 * np.pi)
    u = (xs * np.cos(style.texture_angle) + ys * np.sin(style.texture_angle))
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * style.texture_freq * u / max(width, height) + phase)
    if len(pal) == 1:
        img = np.broadcast_to(pal[0], (height, width, 3)).copy()
    else:
        # blend along the palette by the wave value
        pos = wave * (len(pal) - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, len(pal) - 1)
        t = (pos - lo)[..., None]
        img = pal[lo] * (1 - t) + pal[hi] * t
    if style.noise > 0:
        img = img + rng.normal(0.0, style.noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_glyph(height_px, torso_rgb, legs_rgb, rng):
    """Render one person glyph; returns (patch HxWx3, alpha mask HxW bool).

    Proportions get small per-call jitter so two crops of the same identity
    differ in pose while keeping the identity colors.
    """
    h = int(max(12, round(height_px)))
    w = int(max(6, round(h * rng.uniform(0.42, 0.52))))
    patch = np.zeros((h, w, 3), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)

    skin = np.array(colorsys.hsv_to_rgb(0.08, rng.uniform(0.25, 0.45), rng.uniform(0.75, 0.95)),
                    dtype=np.float32)

    def fill(y0, y1, x0, x1, color):
        y0, y1 = int(round(y0)), int(round(y1))
        x0, x1 = int(round(x0)), int(round(x1))
        y0, y1 = max(0, y0), min(h, y1)
        x0, x1 = max(0, x0), min(w, x1)
        if y1 > y0 and x1 > x0:
            patch[y0:y1, x0:x1] = color
            mask[y0:y1, x0:x1] = True

    head_r = 0.11 * h * rng.uniform(0.85, 1.1)
    cx = w / 2 + rng.uniform(-0.04, 0.04) * w
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    head_cy = 0.11 * h
    inside = ((xs + 0.5 - cx) ** 2 / (0.85 * head_r) ** 2
              + (ys + 0.5 - head_cy) ** 2 / head_r ** 2) <= 1.0
    patch[inside] = skin
    mask |= inside

    torso_top = 0.20 * h
    torso_bot = h * rng.uniform(0.58, 0.66)
    torso_halfw = w * rng.uniform(0.30, 0.40)
    fill(torso_top, torso_bot, cx - torso_halfw, cx + torso_halfw, torso_rgb)

    leg_w = w * rng.uniform(0.16, 0.24)
    gap = w * rng.uniform(0.02, 0.10)
    fill(torso_bot, h, cx - gap / 2 - leg_w, cx - gap / 2, legs_rgb)
    fill(torso_bot, h, cx + gap / 2, cx + gap / 2 + leg_w, legs_rgb)
    return patch, mask


def place_glyph(img, patch, mask, x0, y0):
    """Blend a glyph into img at integer (x0, y0); returns its tight box."""
    h, w = patch.shape[:2]
    H, W = img.shape[:2]
    x0, y0 = int(x0), int(y0)
    x1, y1 = min(W, x0 + w), min(H, y0 + h)
    px0, py0 = max(0, -x0), max(0, -y0)
    x0, y0 = max(0, x0), max(0, y0)
    sub_mask = mask[py0:py0 + (y1 - y0), px0:px0 + (x1 - x0)]
    img[y0:y1, x0:x1][sub_mask] = patch[py0:py0 + (y1 - y0), px0:px0 + (x1 - x0)][sub_mask]
    ys, xs = np.nonzero(sub_mask)
    if len(xs) == 0:
        return None
    return (float(x0 + xs.min()), float(y0 + ys.min()),
            float(x0 + xs.max() + 1), float(y0 + ys.max() + 1))


def render_scene(domain: DomainSpec, rng, seed):
    """One detection scene: styled background plus 1..k non-degenerate glyphs.

    Returns (image, boxes, identities, per-glyph visibility masks); a later
    glyph overdraws earlier ones, and the masks reflect final visibility.
    """
    W, H = domain.size
    img = render_background(W, H, domain.style, rng)
    lo, hi = domain.glyphs_per_image
    n = int(rng.integers(lo, hi + 1))
    boxes, identities, masks = [], [], []
    placed = []
    if domain.with_identities:
        pool = rng.choice(domain.identities, size=min(n, domain.identities), replace=False)
    else:
        pool = rng.integers(0, GLYPH_PALETTE_CAPACITY, size=n)
    for ident in pool:
        gh = H * rng.uniform(0.38, 0.68)
        torso, legs = identity_color_pair(domain.name, int(ident), seed)
        patch, mask = render_glyph(gh, torso, legs, rng)
        ph, pw = patch.shape[:2]
        ok = None
        for _ in range(12):
            x0 = rng.uniform(0, max(1, W - pw))
            y0 = rng.uniform(0, max(1, H - ph))
            cand = (x0, y0, x0 + pw, y0 + ph)
            if not placed or iou_matrix([cand], placed).max() < 0.25:
                ok = (x0, y0)
                break
        if ok is None:
            continue
        scene_mask = np.zeros((H, W), dtype=bool)
        ix, iy = int(ok[0]), int(ok[1])
        mh = min(H - iy, ph)
        mw = min(W - ix, pw)
        scene_mask[iy:iy + mh, ix:ix + mw] = mask[:mh, :mw]
        box = place_glyph(img, patch, mask, ok[0], ok[1])
        if box is None or box[2] - box[0] < 4 or box[3] - box[1] < 4:
            continue
        for m in masks:
            m &= ~scene_mask
        placed.append((box[0], box[1], box[2], box[3]))
        boxes.append(box)
        identities.append(int(ident))
        masks.append(scene_mask)
    return img, boxes, identities, masks


def _render_crop(domain: DomainSpec, ident, rng, seed):
    W, H = domain.size
    img = render_background(W, H, domain.style, rng)
    gh = H * rng.uniform(0.80, 0.94)
    torso, legs = identity_color_pair(domain.name, int(ident), seed)
    patch, mask = render_glyph(gh, torso, legs, rng)
    ph, pw = patch.shape[:2]
    x0 = (W - pw) / 2 + rng.uniform(-0.05, 0.05) * W
    y0 = (H - ph) / 2 + rng.uniform(-0.03, 0.03) * H
    place_glyph(img, patch, mask, max(0, x0), max(0, y0))
    return img


def generate_synthetic_corpus(spec: SynthSpec, out_dir, seed: int) -> list:
    """Write one image directory + manifest per domain; returns the manifests.

    Fully deterministic in (spec, seed): repeated calls produce byte-identical
    images and manifest files.
    """
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w") as f:
            f.write("")
        os.unlink(probe)
    except OSError as e:
        raise CorpusGenerationError(f"output directory not writable: {out_dir}: {e}") from e

    manifests = []
    for domain in spec.domains:
        if domain.identities > GLYPH_PALETTE_CAPACITY:
            raise CorpusGenerationError(
                f"domain {domain.name}: {domain.identities} identities exceed palette "
                f"capacity {GLYPH_PALETTE_CAPACITY}")
        droot = os.path.join(out_dir, domain.name)
        os.makedirs(os.path.join(droot, "images"), exist_ok=True)
        records = []
        for i in range(domain.images):
            rng = rng_for(seed, "synth", domain.name, i)
            rel = os.path.join("images", f"{i:05d}.png")
            if domain.kind == "detection":
                img, boxes, idents, _ = render_scene(domain, rng, seed)
                save_image(img, os.path.join(droot, rel))
                records.append(DetectionRecord(
                    rel, [tuple(b) for b in boxes], domain.name,
                    idents if domain.with_identities else None))
            else:
                if domain.kind == "reid_labeled":
                    ident = i % domain.identities
                    rec_ident = ident
                else:
                    ident = i % max(domain.identities, GLYPH_PALETTE_CAPACITY)
                    rec_ident = None
                img = _render_crop(domain, ident, rng, seed)
                save_image(img, os.path.join(droot, rel))
                records.append(ReidRecord(rel, rec_ident, domain.name))
        sizes = [domain.size] * len(records)
        manifest = CorpusManifest(domain.name, domain.kind, records, _size_stats(sizes), droot)
        save_manifest(manifest, os.path.join(droot, "manifest.jsonl"))
        manifests.append(manifest)
    return manifests


# ---------------------------------------------------------------------------
# Domain-style separability helper
# ---------------------------------------------------------------------------

def color_histogram(img, bins=4) -> np.ndarray:
    """Flattened joint RGB histogram, L1-normalized."""
    q = np.clip((img * bins).astype(int), 0, bins - 1)
    flat = q[..., 0] * bins * bins + q[..., 1] * bins + q[..., 2]
    hist = np.bincount(flat.ravel(), minlength=bins ** 3).astype(np.float64)
    return hist / hist.sum()


def histogram_domain_accuracy(manifests, seed=0, train_fraction=0.5) -> float:
    """Nearest-centroid domain classification on color histograms.

    The quantitative form of the corpus design premise: raw pixel statistics
    separate the synthetic domains (which feature alignment later erases).
    """
    feats, labels = [], []
    for d, m in enumerate(manifests):
        for rec in m.records:
            feats.append(color_histogram(load_image(m.resolve(rec))))
            labels.append(d)
    feats = np.asarray(feats)
    labels = np.asarray(labels)
    rng = rng_for(seed, "histsep")
    order = rng.permutation(len(labels))
    n_train = max(len(labels) * train_fraction, 1)
    train = order[: int(n_train)]
    test = order[int(n_train):]
    centroids = np.stack([feats[train][labels[train] == d].mean(axis=0)
                          for d in range(len(manifests))])
    pred = np.argmin(((feats[test][:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    return float((pred == labels[test]).mean())
